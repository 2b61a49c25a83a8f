#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "mrt/tensor.hpp"

namespace mrt {

constexpr int kNumClasses = 10;
constexpr int kPatchSide = 4;  // pixels per patch edge

const std::vector<std::string>& class_words();

// --- tokenizer: closed word-level vocabulary ---

int vocab_size_words();
int token_id(const std::string& word);  // throws on out-of-vocabulary
const std::string& token_word(int id);
int eos_id();

std::vector<int> tokenize(const std::string& text);
std::string detokenize(const std::vector<int>& ids);

// --- synthetic images ---

struct SynthImage {
    int class_id = 0;
    int grid = 4;                       // patches per edge
    std::vector<double> pixels;         // (grid*kPatchSide)^2 grayscale in [0,1]
    std::set<int> roi_patches;          // patch indices covering the glyph
    std::uint64_t seed = 0;

    int side() const { return grid * kPatchSide; }
    double px(int r, int c) const { return pixels[static_cast<std::size_t>(r) * side() + c]; }
};

SynthImage gen_image(int class_id, std::uint64_t seed, int grid = 4);

// Patches whose pixels exceed the glyph threshold; used as an oracle for
// the stored RoI set.
std::set<int> scan_roi(const SynthImage& img);

// --- prompt templates ---

enum class TaskKind { Classify, YesNo, CounterfactMisclass, CounterfactMisalign };

struct PromptTemplate {
    std::string text;        // with a {cls} slot for yes/no templates
    int indicator_index;     // token index of the class-indicator slot
};

const PromptTemplate& classify_template();
const PromptTemplate& yesno_template(int id);  // id in {0, 1}

// --- samples ---

struct Sample {
    SynthImage image;
    std::vector<int> token_ids;        // prompt followed by response
    std::vector<std::uint8_t> mask;    // true exactly at response positions
    std::vector<int> answer_ids;       // response tokens excluding eos
    int prompt_len = 0;
    TaskKind task = TaskKind::Classify;
};

struct TaskSpec {
    TaskKind kind = TaskKind::Classify;
    int target_class = -1;     // e, for counterfactual tasks
    int misalign_target = -1;  // e-bar, for misalignment
    int template_id = 0;       // yes/no template variant
};

// Pure function of (task, n_per_class, seed). The `split` tag keeps train
// and test image seed streams disjoint.
std::vector<Sample> make_dataset(const TaskSpec& task, int n_per_class,
                                 std::uint64_t seed, const std::string& split = "train");

void dump_dataset_jsonl(const std::vector<Sample>& ds, const std::string& path);

}  // namespace mrt
