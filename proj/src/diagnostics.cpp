#include "mrt/diagnostics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <thread>

#include "mrt/rng.hpp"

namespace mrt {

namespace {

struct CellOutcome {
    double accuracy = 0.0;
    double final_loss = 0.0;
    long long trainable_params = 0;
    double trainable_fraction = 0.0;
    double mean_edited_positions = 0.0;
};

double edited_positions(const EditPlan& plan, const Sample& s) {
    const int n = static_cast<int>(s.token_ids.size());
    if (plan.control_token_index >= 0) return 1.0;
    if (plan.edit_all_text) return n;
    return std::min(plan.prefix_len, n) + std::min(plan.suffix_len, n);
}

CellOutcome run_cell(const ToyModel& model, const EditPlan& plan, const DiagConfig& cfg,
                     std::uint64_t seed) {
    auto train_set = make_dataset({TaskKind::Classify}, cfg.n_per_class,
                                  Rng::mix(cfg.data_seed, 0), "train");
    auto test_set = make_dataset({TaskKind::Classify}, cfg.test_per_class,
                                 Rng::mix(cfg.data_seed, 0), "test");

    EditorSet editors = make_editors(plan, model.config(), Rng::mix(cfg.editor_seed, seed));
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    RunMetrics m = train_editors(model, plan, editors, train_set, tc);

    CellOutcome out;
    out.accuracy = evaluate(model, &editors, plan, test_set);
    out.final_loss = m.final_loss;
    out.trainable_params = editors.total_params();
    out.trainable_fraction = m.trainable_fraction;
    double pos = 0.0;
    for (const Sample& s : train_set) pos += edited_positions(plan, s);
    out.mean_edited_positions = pos / static_cast<double>(train_set.size());
    return out;
}

void run_cells_parallel(int threads, std::size_t count,
                        const std::function<void(std::size_t)>& work) {
    threads = std::max(1, threads);
    if (threads == 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) work(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) work(i);
        });
    for (auto& th : pool) th.join();
}

void mark_best(SweepResult& r) {
    double best = -1.0;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < r.cells.size(); ++i)
        if (!r.cells[i].skipped && r.cells[i].accuracy > best) {
            best = r.cells[i].accuracy;
            best_i = i;
        }
    if (best >= 0.0) r.cells[best_i].is_best = true;
}

}  // namespace

SweepResult rank_sweep(const ToyModel& model, const std::vector<int>& visual_ranks,
                       const std::vector<int>& multimodal_ranks, const DiagConfig& cfg) {
    if (visual_ranks.empty() || multimodal_ranks.empty())
        throw std::invalid_argument("rank_sweep: empty axes");
    SweepResult r;
    r.axis_names = {"visual_rank", "multimodal_rank"};
    for (int v : visual_ranks)
        for (int m : multimodal_ranks) {
            SweepCell c;
            c.axes["visual_rank"] = std::to_string(v);
            c.axes["multimodal_rank"] = std::to_string(m);
            c.seed = cfg.train.seed;
            r.cells.push_back(std::move(c));
        }
    run_cells_parallel(cfg.threads, r.cells.size(), [&](std::size_t i) {
        SweepCell& c = r.cells[i];
        EditPlan plan = EditPlan::default_plan(model.config());
        plan.visual_rank = std::stoi(c.axes["visual_rank"]);
        plan.multimodal_rank = std::stoi(c.axes["multimodal_rank"]);
        const CellOutcome out = run_cell(model, plan, cfg, c.seed);
        c.accuracy = out.accuracy;
        c.final_loss = out.final_loss;
        c.trainable_params = out.trainable_params;
        c.trainable_fraction = out.trainable_fraction;
        c.mean_edited_positions = out.mean_edited_positions;
    });
    mark_best(r);
    return r;
}

std::pair<std::vector<int>, std::vector<int>> depth_setting(char id, const ToyModelConfig& cfg) {
    std::vector<int> vis_all, dec_all;
    for (int i = 1; i < cfg.vision_layers; ++i) vis_all.push_back(i);  // final layer excluded
    for (int j = 1; j <= cfg.decoder_layers; ++j) dec_all.push_back(j);

    auto first_half = [](const std::vector<int>& v) {
        return std::vector<int>(v.begin(), v.begin() + static_cast<long>((v.size() + 1) / 2));
    };
    auto latter_half = [](const std::vector<int>& v) {
        return std::vector<int>(v.begin() + static_cast<long>((v.size() + 1) / 2), v.end());
    };
    auto evens = [](const std::vector<int>& v) {
        std::vector<int> out;
        for (int x : v)
            if (x % 2 == 0) out.push_back(x);
        return out;
    };

    switch (id) {
        case 'a':
            return {{vis_all.empty() ? std::vector<int>{} : std::vector<int>{vis_all.front()}},
                    {dec_all.front()}};
        case 'b': return {evens(vis_all), evens(dec_all)};
        case 'c': return {first_half(vis_all), first_half(dec_all)};
        case 'd': return {latter_half(vis_all), latter_half(dec_all)};
        case 'e': return {vis_all, dec_all};
        default: throw std::invalid_argument(std::string("depth_setting: unknown id '") + id + "'");
    }
}

SweepResult depth_sweep(const ToyModel& model, const std::string& settings,
                        const std::vector<std::uint64_t>& seeds, const DiagConfig& cfg) {
    if (settings.empty() || seeds.empty())
        throw std::invalid_argument("depth_sweep: empty settings or seeds");
    SweepResult r;
    r.axis_names = {"setting", "seed"};
    for (char id : settings)
        for (std::uint64_t s : seeds) {
            depth_setting(id, model.config());  // validates the id up front
            SweepCell c;
            c.axes["setting"] = std::string(1, id);
            c.axes["seed"] = std::to_string(s);
            c.seed = s;
            r.cells.push_back(std::move(c));
        }
    run_cells_parallel(cfg.threads, r.cells.size(), [&](std::size_t i) {
        SweepCell& c = r.cells[i];
        auto [vis, dec] = depth_setting(c.axes["setting"][0], model.config());
        EditPlan plan = EditPlan::default_plan(model.config());
        plan.visual_layers = vis;
        plan.decoder_layers = dec;
        const CellOutcome out = run_cell(model, plan, cfg, c.seed);
        c.accuracy = out.accuracy;
        c.final_loss = out.final_loss;
        c.trainable_params = out.trainable_params;
        c.trainable_fraction = out.trainable_fraction;
        c.mean_edited_positions = out.mean_edited_positions;
    });
    mark_best(r);
    return r;
}

SweepResult length_sweep(const ToyModel& model, const std::vector<int>& lengths,
                         const DiagConfig& cfg) {
    if (lengths.empty()) throw std::invalid_argument("length_sweep: empty lengths");
    auto probe = make_dataset({TaskKind::Classify}, 1, cfg.data_seed, "train");
    int min_n = 1 << 30;
    for (const Sample& s : probe) min_n = std::min(min_n, static_cast<int>(s.token_ids.size()));

    SweepResult r;
    r.axis_names = {"length"};
    for (int len : lengths) {
        SweepCell c;
        c.axes["length"] = std::to_string(len);
        c.seed = cfg.train.seed;
        if (2 * len > min_n) {
            c.skipped = true;
            c.skip_reason = "prefix+suffix span " + std::to_string(2 * len) +
                            " exceeds shortest text length " + std::to_string(min_n);
        }
        r.cells.push_back(std::move(c));
    }
    run_cells_parallel(cfg.threads, r.cells.size(), [&](std::size_t i) {
        SweepCell& c = r.cells[i];
        if (c.skipped) return;
        EditPlan plan = EditPlan::default_plan(model.config());
        plan.prefix_len = plan.suffix_len = std::stoi(c.axes["length"]);
        const CellOutcome out = run_cell(model, plan, cfg, c.seed);
        c.accuracy = out.accuracy;
        c.final_loss = out.final_loss;
        c.trainable_params = out.trainable_params;
        c.trainable_fraction = out.trainable_fraction;
        c.mean_edited_positions = out.mean_edited_positions;
    });
    mark_best(r);
    return r;
}

SweepResult segment_ablation(const ToyModel& model, const DiagConfig& cfg) {
    const std::vector<std::string> modes = {"prefix_only", "suffix_only", "both", "all"};
    SweepResult r;
    r.axis_names = {"segments"};
    for (const auto& m : modes) {
        SweepCell c;
        c.axes["segments"] = m;
        c.seed = cfg.train.seed;
        r.cells.push_back(std::move(c));
    }
    run_cells_parallel(cfg.threads, r.cells.size(), [&](std::size_t i) {
        SweepCell& c = r.cells[i];
        EditPlan plan = EditPlan::default_plan(model.config());
        const std::string& m = c.axes["segments"];
        if (m == "prefix_only") plan.suffix_len = 0;
        if (m == "suffix_only") plan.prefix_len = 0;
        if (m == "all") plan.edit_all_text = true;
        const CellOutcome out = run_cell(model, plan, cfg, c.seed);
        c.accuracy = out.accuracy;
        c.final_loss = out.final_loss;
        c.trainable_params = out.trainable_params;
        c.trainable_fraction = out.trainable_fraction;
        c.mean_edited_positions = out.mean_edited_positions;
    });
    mark_best(r);
    return r;
}

void write_sweep_csv(const SweepResult& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_sweep_csv: cannot open " + path);
    for (const auto& a : r.axis_names) out << a << ",";
    out << "accuracy,final_loss,trainable_params,trainable_fraction,mean_edited_positions,"
           "seed,best,skipped,skip_reason\n";
    for (const SweepCell& c : r.cells) {
        for (const auto& a : r.axis_names) out << c.axes.at(a) << ",";
        out << c.accuracy << "," << c.final_loss << "," << c.trainable_params << ","
            << c.trainable_fraction << "," << c.mean_edited_positions << "," << c.seed << ","
            << (c.is_best ? 1 : 0) << "," << (c.skipped ? 1 : 0) << "," << c.skip_reason << "\n";
    }
}

LandscapeGrid loss_landscape(const ToyModel& model, EditorSet& editors, const EditPlan& plan,
                             const std::vector<Sample>& dataset, int resolution, double span,
                             std::uint64_t direction_seed) {
    if (resolution < 2) throw std::invalid_argument("loss_landscape: resolution must be >= 2");
    if (dataset.empty()) throw std::invalid_argument("loss_landscape: empty dataset");

    std::vector<Node*> leaves = editors.trainable_leaves();
    std::vector<Tensor> origin;
    origin.reserve(leaves.size());
    for (Node* n : leaves) origin.push_back(n->value);

    // two random directions, norm-matched per parameter tensor
    auto make_direction = [&](std::uint64_t seed) {
        Rng rng(Rng::mix(direction_seed, seed));
        std::vector<Tensor> dir;
        for (const Tensor& theta : origin) {
            Tensor d(theta.shape);
            double dn = 0.0, tn = 0.0;
            for (std::size_t i = 0; i < d.data.size(); ++i) {
                d.data[i] = rng.normal();
                dn += d.data[i] * d.data[i];
                tn += theta.data[i] * theta.data[i];
            }
            const double s = dn > 0.0 ? std::sqrt(tn / dn) : 0.0;
            for (double& v : d.data) v *= s;
            dir.push_back(std::move(d));
        }
        return dir;
    };
    const std::vector<Tensor> d1 = make_direction(1);
    const std::vector<Tensor> d2 = make_direction(2);

    LandscapeGrid grid;
    grid.resolution = resolution;
    grid.span = span;
    grid.losses = Tensor::zeros({resolution, resolution});
    for (int i = 0; i < resolution; ++i) {
        const double t = resolution == 1 ? 0.0 : 2.0 * i / (resolution - 1) - 1.0;
        grid.alphas.push_back(span * t);
        grid.betas.push_back(span * t);
    }

    grid.center_loss = dataset_loss(model, &editors, plan, dataset);

    for (int gi = 0; gi < resolution; ++gi) {
        const double alpha = grid.alphas[static_cast<std::size_t>(gi)];
        for (int gj = 0; gj < resolution; ++gj) {
            const double beta = grid.betas[static_cast<std::size_t>(gj)];
            for (std::size_t p = 0; p < leaves.size(); ++p) {
                Tensor& v = leaves[p]->value;
                for (std::size_t k = 0; k < v.data.size(); ++k)
                    v.data[k] = origin[p].data[k] + alpha * d1[p].data[k] + beta * d2[p].data[k];
            }
            double loss;
            try {
                loss = dataset_loss(model, &editors, plan, dataset);
            } catch (const std::exception&) {
                loss = std::nan("");  // degenerate subspace or numeric blowup: record, keep going
            }
            grid.losses.at(gi, gj) = loss;
        }
    }

    for (std::size_t p = 0; p < leaves.size(); ++p) leaves[p]->value = origin[p];
    return grid;
}

void write_landscape_csv(const LandscapeGrid& g, const std::string& path, bool emit_matrix) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_landscape_csv: cannot open " + path);
    if (emit_matrix) {
        for (int i = 0; i < g.resolution; ++i) {
            for (int j = 0; j < g.resolution; ++j)
                out << g.losses.at(i, j) << (j + 1 < g.resolution ? " " : "");
            out << "\n";
        }
        return;
    }
    out << "alpha,beta,loss\n";
    for (int i = 0; i < g.resolution; ++i)
        for (int j = 0; j < g.resolution; ++j)
            out << g.alphas[static_cast<std::size_t>(i)] << ","
                << g.betas[static_cast<std::size_t>(j)] << "," << g.losses.at(i, j) << "\n";
}

}  // namespace mrt
