#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrt/model.hpp"
#include "mrt/train.hpp"

namespace mrt {

struct ControlScenario {
    enum class Kind { Misclassification, Misalignment };
    Kind kind = Kind::Misclassification;
    int target_class = 3;       // e
    int misalign_target = -1;   // e-bar, required for misalignment
    int template_id = 0;

    void validate() const;
};

struct ControlReport {
    struct Row {
        int cls = 0;
        int count = 0;
        double counterfact_rate = 0.0;  // meaningful for the target class
        double changed_rate = 0.0;      // vs the editor-free model
        double base_accuracy = 0.0;     // editor-free clean accuracy
    };
    double counterfact_rate_on_target = 0.0;
    double other_class_disruption = 0.0;
    std::vector<Row> per_class;
};

struct ControlConfig {
    int n_per_class = 200;        // counterfactual training samples per class
    int test_per_class = 20;
    double clean_threshold = 0.9;  // required editor-free yes/no accuracy
    int visual_rank = 6;
    int multimodal_rank = 4;
    TrainConfig train;             // epochs defaults to 1 for control runs
    std::uint64_t data_seed = 1234;
    std::uint64_t editor_seed = 55;

    // One epoch at a high editor learning rate: the three control editors are
    // tiny and the counterfactual signal is strong, so 1e-2 converges within
    // the single pass while 6e-4 barely moves the answers.
    ControlConfig() {
        train.epochs = 1;
        train.learning_rate = 1e-2;
    }
};

// The reduced editor set: one RoI-restricted visual editor at vision layer 1,
// the RoI-restricted cross-modality editor, and a single-token editor at
// decoder layer 1 targeting the template's indicator position.
EditPlan build_control_plan(const ToyModelConfig& cfg, const ControlScenario& scenario,
                            int visual_rank = 6, int multimodal_rank = 4);

// Matched-indicator yes/no probes, one prompt per image asking its own class.
std::vector<Sample> make_control_eval_set(const ControlScenario& scenario, int per_class,
                                          std::uint64_t seed, const std::string& split);

struct ControlTrainResult {
    EditorSet editors;
    ControlReport train_report;
    RunMetrics metrics;
};

// Trains the three control editors on counterfactually relabeled data.
// Throws if the editor-free model is not yes/no competent, reporting the
// measured clean accuracy.
ControlTrainResult run_control_training(const ToyModel& model, const ControlScenario& scenario,
                                        const ControlConfig& cfg);

ControlReport eval_counterfact(const ToyModel& model, const EditorSet* editors,
                               const ControlScenario& scenario,
                               const std::vector<Sample>& test_set);

void write_control_report_json(const ControlReport& r, const std::string& path);
void write_control_report_csv(const ControlReport& r, const std::string& path);

}  // namespace mrt
