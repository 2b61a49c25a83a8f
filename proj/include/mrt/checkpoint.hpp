#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mrt/editor.hpp"
#include "mrt/model.hpp"

namespace mrt {

// Thrown when a checkpoint file fails its magic/length/checksum validation.
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EditorRecord {
    Site site = Site::Visual;
    int layer = 0;
    int rank = 0;
    int dim = 0;
    Tensor raw_U, W, bias;
};

struct Checkpoint {
    std::string config_json;  // resolved run configuration
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, Tensor>> frozen;
    std::vector<EditorRecord> editor_records;
};

Checkpoint make_checkpoint(const ToyModel& model, const EditorSet* editors,
                           const std::string& config_json, std::uint64_t seed);

// Length-prefixed binary with an FNV-1a trailer; save/load round-trips are
// bit-exact on the stored doubles.
void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Copies stored tensors back into a compatible model; shape mismatches throw
// naming the offending tensor.
void restore_frozen(const Checkpoint& c, ToyModel& model);
EditorSet restore_editors(const Checkpoint& c);

}  // namespace mrt
