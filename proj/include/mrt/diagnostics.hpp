#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mrt/model.hpp"
#include "mrt/train.hpp"

namespace mrt {

struct SweepCell {
    std::map<std::string, std::string> axes;  // axis name -> value
    double accuracy = 0.0;
    double final_loss = 0.0;
    long long trainable_params = 0;
    double trainable_fraction = 0.0;
    double mean_edited_positions = 0.0;
    std::uint64_t seed = 0;
    bool skipped = false;
    std::string skip_reason;
    bool is_best = false;
};

struct SweepResult {
    std::vector<std::string> axis_names;
    std::vector<SweepCell> cells;
};

struct DiagConfig {
    int n_per_class = 50;
    int test_per_class = 20;
    TrainConfig train;
    std::uint64_t data_seed = 1234;
    std::uint64_t editor_seed = 77;
    int threads = 1;  // MRT_THREADS bounds this in the CLI
};

// Accuracy grid over (visual rank, multimodal rank) on the classify task.
SweepResult rank_sweep(const ToyModel& model, const std::vector<int>& visual_ranks,
                       const std::vector<int>& multimodal_ranks, const DiagConfig& cfg);

// Depth settings: (a) first layer, (b) even layers, (c) first half,
// (d) latter half, (e) all eligible layers. The final vision layer is always
// excluded from the eligible set.
std::pair<std::vector<int>, std::vector<int>> depth_setting(char id, const ToyModelConfig& cfg);

SweepResult depth_sweep(const ToyModel& model, const std::string& settings,
                        const std::vector<std::uint64_t>& seeds, const DiagConfig& cfg);

// Tied prefix/suffix length sweep; spans that overflow the shortest prompt
// are emitted as skipped rows rather than dropped.
SweepResult length_sweep(const ToyModel& model, const std::vector<int>& lengths,
                         const DiagConfig& cfg);

// Prefix-only / suffix-only / both / all-textual-positions comparison.
SweepResult segment_ablation(const ToyModel& model, const DiagConfig& cfg);

void write_sweep_csv(const SweepResult& r, const std::string& path);

struct LandscapeGrid {
    int resolution = 21;
    double span = 1.0;
    std::vector<double> alphas, betas;
    Tensor losses;  // resolution x resolution, losses[i][j] at (alpha_i, beta_j)
    double center_loss = 0.0;
};

// Training loss over a 2-D slice of editor-parameter space spanned by two
// seeded random directions, each norm-matched per parameter tensor. Editor
// values are restored afterwards.
LandscapeGrid loss_landscape(const ToyModel& model, EditorSet& editors, const EditPlan& plan,
                             const std::vector<Sample>& dataset, int resolution, double span,
                             std::uint64_t direction_seed);

void write_landscape_csv(const LandscapeGrid& g, const std::string& path,
                         bool emit_matrix = false);

}  // namespace mrt
