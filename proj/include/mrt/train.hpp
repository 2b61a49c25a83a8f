#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrt/data.hpp"
#include "mrt/model.hpp"

namespace mrt {

struct TrainConfig {
    double learning_rate = 6e-4;
    int batch_size = 32;
    int epochs = 3;
    double warmup_ratio = 0.03;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 0.0;  // 0 disables
    std::uint64_t seed = 0;
    int eval_every = 0;  // steps between mid-run evals; 0 disables

    void validate() const;
};

struct RunMetrics {
    std::vector<double> step_loss;
    std::vector<double> step_lr;
    std::vector<std::pair<int, double>> eval_accuracy;  // (step, acc)
    double final_loss = 0.0;
    double final_accuracy = -1.0;
    double trainable_fraction = 0.0;
    double wall_seconds = 0.0;
};

// Linear warmup to learning_rate over warmup_ratio*total_steps, then linear
// decay to zero at total_steps.
double lr_at(int step, int total_steps, const TrainConfig& cfg);

// Adam over an explicit leaf set; anything not registered never moves.
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<Node*> params, const TrainConfig& cfg);

    void zero_grad();
    void step(double lr);
    const std::vector<Node*>& params() const { return params_; }
    long long param_count() const;

private:
    std::vector<Node*> params_;
    std::vector<Tensor> m_, v_;
    TrainConfig cfg_;
    long long t_ = 0;
};

// Editor-only fine-tuning; the base model stays frozen throughout.
RunMetrics train_editors(const ToyModel& model, const EditPlan& plan, EditorSet& editors,
                         const std::vector<Sample>& dataset, const TrainConfig& cfg,
                         const std::vector<Sample>* eval_set = nullptr);

// Greedy-decode exact-match accuracy on answer tokens.
double evaluate(const ToyModel& model, const EditorSet* editors, const EditPlan& plan,
                const std::vector<Sample>& dataset);

// Mean forward loss over a dataset at fixed parameters (no gradients).
double dataset_loss(const ToyModel& model, const EditorSet* editors, const EditPlan& plan,
                    const std::vector<Sample>& dataset, int batch_size = 32);

struct PretrainConfig {
    int steps = 500;
    double learning_rate = 1e-3;
    int batch_size = 32;
    int classify_per_class = 40;
    int yesno_per_class = 40;
    std::uint64_t data_seed = 7;
};

// Stops while the base still misclassifies plenty, leaving headroom for
// editor tuning to close.
PretrainConfig headroom_pretrain();

// Long enough that the base answers clean yes/no prompts reliably, the
// precondition for counterfactual control runs.
PretrainConfig competent_pretrain();

// Supervised pass over a synthetic caption/classify mix updating the whole
// base; leaves the model above chance but imperfect so editors have headroom.
void pretrain_base(ToyModel& model, const PretrainConfig& cfg, std::uint64_t seed);

void write_metrics_csv(const RunMetrics& m, const std::string& path);
void write_summary_json(const RunMetrics& m, std::uint64_t seed, const std::string& config_hash,
                        const std::string& path);

}  // namespace mrt
