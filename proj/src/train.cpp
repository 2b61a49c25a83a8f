#include "mrt/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mrt/rng.hpp"

namespace mrt {

void TrainConfig::validate() const {
    if (learning_rate <= 0.0 || batch_size < 1 || epochs < 1)
        throw std::invalid_argument("train config: lr, batch size and epochs must be positive");
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0)
        throw std::invalid_argument("train config: warmup ratio must be in [0,1)");
}

double lr_at(int step, int total_steps, const TrainConfig& cfg) {
    if (step < 0 || step > total_steps) throw std::invalid_argument("lr_at: step out of range");
    const double warm = cfg.warmup_ratio * total_steps;
    if (warm > 0.0 && step < warm) return cfg.learning_rate * (step / warm);
    if (total_steps == static_cast<int>(warm)) return step == total_steps ? 0.0 : cfg.learning_rate;
    return cfg.learning_rate * (total_steps - step) / (total_steps - warm);
}

AdamOptimizer::AdamOptimizer(std::vector<Node*> params, const TrainConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
    for (Node* p : params_) {
        m_.push_back(Tensor::zeros(p->value.shape));
        v_.push_back(Tensor::zeros(p->value.shape));
    }
}

void AdamOptimizer::zero_grad() {
    for (Node* p : params_) p->zero_grad();
}

void AdamOptimizer::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

    double gnorm_sq = 0.0;
    if (cfg_.grad_clip > 0.0) {
        for (Node* p : params_)
            if (p->has_grad())
                for (double g : p->grad.data) gnorm_sq += g * g;
    }
    const double clip_scale = (cfg_.grad_clip > 0.0 && std::sqrt(gnorm_sq) > cfg_.grad_clip)
                                  ? cfg_.grad_clip / std::sqrt(gnorm_sq)
                                  : 1.0;

    for (std::size_t i = 0; i < params_.size(); ++i) {
        Node* p = params_[i];
        if (!p->has_grad()) continue;
        for (std::size_t j = 0; j < p->value.data.size(); ++j) {
            double g = p->grad.data[j] * clip_scale;
            if (cfg_.weight_decay > 0.0) g += cfg_.weight_decay * p->value.data[j];
            m_[i].data[j] = cfg_.beta1 * m_[i].data[j] + (1.0 - cfg_.beta1) * g;
            v_[i].data[j] = cfg_.beta2 * v_[i].data[j] + (1.0 - cfg_.beta2) * g * g;
            const double mh = m_[i].data[j] / bc1;
            const double vh = v_[i].data[j] / bc2;
            p->value.data[j] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
        }
    }
}

long long AdamOptimizer::param_count() const {
    long long n = 0;
    for (Node* p : params_) n += static_cast<long long>(p->value.numel());
    return n;
}

namespace {

std::vector<std::vector<const Sample*>> make_batches(const std::vector<Sample>& ds, int batch,
                                                     Rng& rng) {
    std::vector<const Sample*> order;
    order.reserve(ds.size());
    for (const Sample& s : ds) order.push_back(&s);
    rng.shuffle(order);
    std::vector<std::vector<const Sample*>> out;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch)) {
        const std::size_t j = std::min(order.size(), i + static_cast<std::size_t>(batch));
        out.emplace_back(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(j));
    }
    return out;
}

}  // namespace

RunMetrics train_editors(const ToyModel& model, const EditPlan& plan, EditorSet& editors,
                         const std::vector<Sample>& dataset, const TrainConfig& cfg,
                         const std::vector<Sample>* eval_set) {
    cfg.validate();
    if (dataset.empty()) throw std::invalid_argument("train_editors: empty dataset");
    plan.validate(model.config());

    const auto t0 = std::chrono::steady_clock::now();
    RunMetrics metrics;
    AdamOptimizer opt(editors.trainable_leaves(), cfg);

    const int steps_per_epoch =
        static_cast<int>((dataset.size() + cfg.batch_size - 1) / cfg.batch_size);
    const int total_steps = steps_per_epoch * cfg.epochs;

    Rng shuffle_rng(Rng::mix(cfg.seed, 0x7368756666ULL));
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (auto& batch : make_batches(dataset, cfg.batch_size, shuffle_rng)) {
            const double lr = lr_at(step, total_steps, cfg);
            opt.zero_grad();
            Var loss = model.forward_loss(batch, &editors, plan);
            const double lval = loss.value().data[0];
            if (!std::isfinite(lval))
                throw std::runtime_error("train_editors: loss diverged (non-finite) at step " +
                                         std::to_string(step));
            backward(loss);
            opt.step(lr);
            metrics.step_loss.push_back(lval);
            metrics.step_lr.push_back(lr);
            ++step;
            if (cfg.eval_every > 0 && eval_set && step % cfg.eval_every == 0)
                metrics.eval_accuracy.emplace_back(step,
                                                   evaluate(model, &editors, plan, *eval_set));
        }
    }

    metrics.final_loss = metrics.step_loss.empty() ? 0.0 : metrics.step_loss.back();
    if (eval_set) metrics.final_accuracy = evaluate(model, &editors, plan, *eval_set);
    const long long editor_params = editors.total_params();
    metrics.trainable_fraction =
        static_cast<double>(editor_params) /
        static_cast<double>(model.weights().param_count() + editor_params);
    metrics.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return metrics;
}

double evaluate(const ToyModel& model, const EditorSet* editors, const EditPlan& plan,
                const std::vector<Sample>& dataset) {
    if (dataset.empty()) return 0.0;
    int correct = 0;
    for (const Sample& s : dataset) {
        std::vector<int> prompt(s.token_ids.begin(),
                                s.token_ids.begin() + static_cast<long>(s.prompt_len));
        std::vector<int> out = model.generate(s.image, prompt, editors, plan,
                                              static_cast<int>(s.answer_ids.size()) + 1);
        if (out.size() >= s.answer_ids.size() &&
            std::equal(s.answer_ids.begin(), s.answer_ids.end(), out.begin()))
            ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

double dataset_loss(const ToyModel& model, const EditorSet* editors, const EditPlan& plan,
                    const std::vector<Sample>& dataset, int batch_size) {
    if (dataset.empty()) throw std::invalid_argument("dataset_loss: empty dataset");
    NoGradGuard ng;
    double total = 0.0;
    long count = 0;
    std::vector<const Sample*> batch;
    auto flush = [&] {
        if (batch.empty()) return;
        total += model.forward_loss(batch, editors, plan).value().data[0] *
                 static_cast<double>(batch.size());
        count += static_cast<long>(batch.size());
        batch.clear();
    };
    for (const Sample& s : dataset) {
        batch.push_back(&s);
        if (static_cast<int>(batch.size()) == batch_size) flush();
    }
    flush();
    return total / static_cast<double>(count);
}

PretrainConfig headroom_pretrain() {
    PretrainConfig c;
    c.steps = 200;
    c.learning_rate = 1e-3;
    return c;
}

PretrainConfig competent_pretrain() {
    PretrainConfig c;
    c.steps = 1600;
    c.learning_rate = 1e-3;
    return c;
}

void pretrain_base(ToyModel& model, const PretrainConfig& cfg, std::uint64_t seed) {
    std::vector<Sample> mix =
        make_dataset({TaskKind::Classify}, cfg.classify_per_class, cfg.data_seed, "pretrain");
    std::vector<Sample> yn =
        make_dataset({TaskKind::YesNo}, cfg.yesno_per_class, cfg.data_seed, "pretrain");
    mix.insert(mix.end(), yn.begin(), yn.end());

    model.weights().set_trainable(true);
    std::vector<Node*> leaves;
    for (auto& [name, v] : model.weights().named_tensors()) leaves.push_back(v.raw());

    TrainConfig tc;
    tc.learning_rate = cfg.learning_rate;
    tc.batch_size = cfg.batch_size;
    tc.warmup_ratio = 0.03;
    AdamOptimizer opt(leaves, tc);

    EditPlan no_edit;  // no editors during base pretraining
    Rng shuffle_rng(Rng::mix(seed, 0x70726574ULL));
    int step = 0;
    while (step < cfg.steps) {
        for (auto& batch : make_batches(mix, cfg.batch_size, shuffle_rng)) {
            if (step >= cfg.steps) break;
            const double lr = lr_at(step, cfg.steps, tc);
            opt.zero_grad();
            Var loss = model.forward_loss(batch, nullptr, no_edit);
            if (!loss.value().all_finite())
                throw std::runtime_error("pretrain_base: loss diverged at step " +
                                         std::to_string(step));
            backward(loss);
            opt.step(lr);
            ++step;
        }
    }
    model.weights().set_trainable(false);
}

void write_metrics_csv(const RunMetrics& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path);
    out << "step,loss,lr\n";
    for (std::size_t i = 0; i < m.step_loss.size(); ++i)
        out << i << "," << m.step_loss[i] << "," << m.step_lr[i] << "\n";
}

void write_summary_json(const RunMetrics& m, std::uint64_t seed, const std::string& config_hash,
                        const std::string& path) {
    nlohmann::json j;
    j["final_loss"] = m.final_loss;
    j["final_accuracy"] = m.final_accuracy;
    j["trainable_fraction"] = m.trainable_fraction;
    j["wall_seconds"] = m.wall_seconds;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_summary_json: cannot open " + path);
    out << j.dump(2) << "\n";
}

}  // namespace mrt
