#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrt/control.hpp"
#include "mrt/diagnostics.hpp"
#include "mrt/model.hpp"
#include "mrt/train.hpp"

namespace mrt {

struct SweepSpec {
    std::vector<int> visual_ranks = {2, 4, 6, 8};
    std::vector<int> multimodal_ranks = {2, 4, 8};
    std::string depth_settings = "abcde";
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::vector<int> lengths = {1, 2, 3, 4, 5};
    int n_per_class = 50;
    int test_per_class = 20;
};

struct LandscapeSpec {
    int resolution = 21;
    double span = 1.0;
    std::uint64_t direction_seed = 99;
    int n_per_class = 20;
};

struct DataSpec {
    int n_per_class = 200;
    int test_per_class = 50;
    std::uint64_t seed = 1234;
};

// Everything a run needs; a run is a pure function of this plus the seed.
struct RunConfig {
    ToyModelConfig model;
    EditPlan plan;            // resolved against `model` during parsing
    TrainConfig train;
    PretrainConfig pretrain;
    ControlScenario scenario;
    ControlConfig control;
    SweepSpec sweep;
    LandscapeSpec landscape;
    DataSpec data;
    std::uint64_t seed = 0;
    std::uint64_t model_seed = 2024;
};

// Parses JSON, fills defaults, rejects unknown keys (naming key and section)
// and out-of-range values. An empty object yields all defaults.
RunConfig parse_config(const std::string& path);
RunConfig parse_config_text(const std::string& json_text, const std::string& where = "<inline>");

// Fully resolved round-trippable form: parse(serialize(c)) == c.
std::string serialize_config(const RunConfig& c);

// Stable fingerprint of the resolved configuration.
std::string config_hash(const RunConfig& c);

}  // namespace mrt
