#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mrt/checkpoint.hpp"
#include "mrt/config.hpp"
#include "mrt/control.hpp"
#include "mrt/diagnostics.hpp"
#include "mrt/model.hpp"
#include "mrt/rng.hpp"
#include "mrt/train.hpp"

namespace fs = std::filesystem;
using namespace mrt;

namespace {

int env_threads() {
    const char* v = std::getenv("MRT_THREADS");
    if (!v) return 1;
    const int n = std::atoi(v);
    if (n < 1) throw std::invalid_argument("MRT_THREADS must be a positive integer");
    return n;
}

RunConfig load_run_config(const std::string& config_path) {
    if (config_path.empty()) return parse_config_text("{}");
    return parse_config(config_path);
}

void write_resolved_config(const RunConfig& c, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream f(out_dir / "config.json");
    if (!f) throw std::runtime_error("cannot write " + (out_dir / "config.json").string());
    f << serialize_config(c);
}

void write_json(const nlohmann::json& j, const fs::path& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << j.dump(2) << "\n";
}

// Base weights come from the checkpoint; everything else (plan, training,
// data) from the supplied config.
std::pair<RunConfig, ToyModel> load_base(const std::string& ckpt_path, const RunConfig& cli_cfg,
                                         const Checkpoint** out_ckpt = nullptr) {
    static Checkpoint ckpt;  // single-command process, one load
    ckpt = load_checkpoint(ckpt_path);
    RunConfig stored = parse_config_text(ckpt.config_json, ckpt_path);
    RunConfig merged = cli_cfg;
    merged.model = stored.model;
    merged.model_seed = stored.model_seed;
    merged.plan = cli_cfg.plan;
    ToyModel model(merged.model, merged.model_seed);
    restore_frozen(ckpt, model);
    if (out_ckpt) *out_ckpt = &ckpt;
    return {merged, std::move(model)};
}

int cmd_pretrain_base(const std::string& config_path, const std::string& out) {
    RunConfig cfg = load_run_config(config_path);
    write_resolved_config(cfg, out);
    ToyModel model(cfg.model, cfg.model_seed);
    pretrain_base(model, cfg.pretrain, cfg.seed);

    auto classify_test =
        make_dataset({TaskKind::Classify}, cfg.data.test_per_class, cfg.data.seed, "test");
    auto yesno_test =
        make_dataset({TaskKind::YesNo}, cfg.data.test_per_class, cfg.data.seed, "test");
    EditPlan no_edit;
    const double classify_acc = evaluate(model, nullptr, no_edit, classify_test);
    const double yesno_acc = evaluate(model, nullptr, no_edit, yesno_test);

    Checkpoint ckpt = make_checkpoint(model, nullptr, serialize_config(cfg), cfg.seed);
    save_checkpoint(ckpt, (fs::path(out) / "base.ckpt").string());
    write_json({{"classify_accuracy", classify_acc},
                {"yesno_accuracy", yesno_acc},
                {"frozen_hash", model.weights().hash()},
                {"config_hash", config_hash(cfg)},
                {"seed", cfg.seed}},
               fs::path(out) / "summary.json");
    std::cout << "pretrained base: classify " << classify_acc << ", yesno " << yesno_acc << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& base, const std::string& out) {
    auto [cfg, model] = load_base(base, load_run_config(config_path));
    write_resolved_config(cfg, out);

    auto train_set = make_dataset({TaskKind::Classify}, cfg.data.n_per_class, cfg.data.seed);
    auto test_set =
        make_dataset({TaskKind::Classify}, cfg.data.test_per_class, cfg.data.seed, "test");

    EditorSet editors = make_editors(cfg.plan, cfg.model, Rng::mix(cfg.seed, 0xed17));
    RunMetrics m = train_editors(model, cfg.plan, editors, train_set, cfg.train, &test_set);
    m.final_accuracy = evaluate(model, &editors, cfg.plan, test_set);

    write_metrics_csv(m, (fs::path(out) / "metrics.csv").string());
    write_summary_json(m, cfg.seed, config_hash(cfg), (fs::path(out) / "summary.json").string());
    Checkpoint ckpt = make_checkpoint(model, &editors, serialize_config(cfg), cfg.seed);
    save_checkpoint(ckpt, (fs::path(out) / "model.ckpt").string());
    std::cout << "final loss " << m.final_loss << ", test accuracy " << m.final_accuracy << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& out) {
    const Checkpoint* raw = nullptr;
    auto [cfg, model] = load_base(ckpt_path, parse_config_text("{}"), &raw);
    cfg = parse_config_text(raw->config_json, ckpt_path);  // evaluate under the stored run config
    EditorSet editors = restore_editors(*raw);
    const bool edited = !editors.editors.empty();

    auto test_set =
        make_dataset({TaskKind::Classify}, cfg.data.test_per_class, cfg.data.seed, "test");
    EditPlan plan = edited ? cfg.plan : EditPlan{};
    const double acc = evaluate(model, edited ? &editors : nullptr, plan, test_set);
    const double loss = dataset_loss(model, edited ? &editors : nullptr, plan, test_set);

    if (!out.empty()) {
        write_resolved_config(cfg, out);
        write_json({{"accuracy", acc}, {"loss", loss}, {"edited", edited}},
                   fs::path(out) / "eval.json");
    }
    std::cout << "accuracy " << acc << ", loss " << loss << (edited ? "" : " (no editors)")
              << "\n";
    return 0;
}

int cmd_control_train(const std::string& config_path, const std::string& base,
                      const std::string& out) {
    auto [cfg, model] = load_base(base, load_run_config(config_path));
    write_resolved_config(cfg, out);

    ControlTrainResult res = run_control_training(model, cfg.scenario, cfg.control);
    Checkpoint ckpt = make_checkpoint(model, &res.editors, serialize_config(cfg), cfg.seed);
    save_checkpoint(ckpt, (fs::path(out) / "control.ckpt").string());
    write_control_report_json(res.train_report, (fs::path(out) / "train_report.json").string());
    write_metrics_csv(res.metrics, (fs::path(out) / "metrics.csv").string());
    std::cout << "train-split counterfact rate "
              << res.train_report.counterfact_rate_on_target << ", disruption "
              << res.train_report.other_class_disruption << "\n";
    return 0;
}

int cmd_control_eval(const std::string& ckpt_path, const std::string& out) {
    const Checkpoint* raw = nullptr;
    auto [cfg, model] = load_base(ckpt_path, parse_config_text("{}"), &raw);
    cfg = parse_config_text(raw->config_json, ckpt_path);
    EditorSet editors = restore_editors(*raw);
    if (editors.editors.empty())
        throw std::invalid_argument("control-eval: checkpoint " + ckpt_path +
                                    " holds no trained editors");

    auto test_set = make_control_eval_set(cfg.scenario, cfg.control.test_per_class,
                                          cfg.control.data_seed, "test");
    ControlReport rep = eval_counterfact(model, &editors, cfg.scenario, test_set);

    if (!out.empty()) {
        write_resolved_config(cfg, out);
        write_control_report_json(rep, (fs::path(out) / "report.json").string());
        write_control_report_csv(rep, (fs::path(out) / "report.csv").string());
    }
    std::cout << "counterfact rate " << rep.counterfact_rate_on_target << ", disruption "
              << rep.other_class_disruption << "\n";
    return 0;
}

DiagConfig diag_config(const RunConfig& cfg) {
    DiagConfig d;
    d.n_per_class = cfg.sweep.n_per_class;
    d.test_per_class = cfg.sweep.test_per_class;
    d.train = cfg.train;
    d.data_seed = cfg.data.seed;
    d.editor_seed = Rng::mix(cfg.seed, 0xd1a6);
    d.threads = env_threads();
    return d;
}

int cmd_sweep(const std::string& which, const std::string& config_path, const std::string& base,
              const std::string& out) {
    auto [cfg, model] = load_base(base, load_run_config(config_path));
    write_resolved_config(cfg, out);
    DiagConfig d = diag_config(cfg);

    SweepResult r;
    if (which == "rank")
        r = rank_sweep(model, cfg.sweep.visual_ranks, cfg.sweep.multimodal_ranks, d);
    else if (which == "depth")
        r = depth_sweep(model, cfg.sweep.depth_settings, cfg.sweep.seeds, d);
    else if (which == "length")
        r = length_sweep(model, cfg.sweep.lengths, d);
    else
        r = segment_ablation(model, d);

    write_sweep_csv(r, (fs::path(out) / ("sweep_" + which + ".csv")).string());
    for (const SweepCell& c : r.cells)
        if (c.is_best) {
            std::cout << "best cell accuracy " << c.accuracy << "\n";
            break;
        }
    return 0;
}

int cmd_landscape(const std::string& ckpt_path, const std::string& out, int grid_override,
                  double span_override) {
    const Checkpoint* raw = nullptr;
    auto [cfg, model] = load_base(ckpt_path, parse_config_text("{}"), &raw);
    cfg = parse_config_text(raw->config_json, ckpt_path);
    EditorSet editors = restore_editors(*raw);
    if (editors.editors.empty())
        throw std::invalid_argument("landscape: checkpoint " + ckpt_path +
                                    " holds no trained editors");
    if (grid_override > 0) cfg.landscape.resolution = grid_override;
    if (span_override > 0.0) cfg.landscape.span = span_override;
    write_resolved_config(cfg, out);

    auto train_set =
        make_dataset({TaskKind::Classify}, cfg.landscape.n_per_class, cfg.data.seed);
    LandscapeGrid g = loss_landscape(model, editors, cfg.plan, train_set,
                                     cfg.landscape.resolution, cfg.landscape.span,
                                     cfg.landscape.direction_seed);
    write_landscape_csv(g, (fs::path(out) / "landscape.csv").string());
    write_json({{"center_loss", g.center_loss},
                {"resolution", g.resolution},
                {"span", g.span},
                {"all_finite", g.losses.all_finite()}},
               fs::path(out) / "landscape.json");
    std::cout << "center loss " << g.center_loss << "\n";
    return 0;
}

int cmd_dump_data(const std::string& config_path, const std::string& task,
                  const std::string& split, const std::string& out) {
    RunConfig cfg = load_run_config(config_path);
    write_resolved_config(cfg, out);
    TaskSpec spec;
    if (task == "classify") spec = {TaskKind::Classify};
    else if (task == "yesno") spec = {TaskKind::YesNo};
    else throw std::invalid_argument("dump-data: task must be classify or yesno");
    auto ds = make_dataset(spec, cfg.data.n_per_class, cfg.data.seed, split);
    dump_dataset_jsonl(ds, (fs::path(out) / (task + "_" + split + ".jsonl")).string());
    std::cout << "wrote " << ds.size() << " samples\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Low-rank representation editors on a frozen vision-text model"};
    app.require_subcommand(1);

    std::string config_path, base_ckpt, ckpt_path, out_dir = "runs/out";
    std::string task = "classify", split = "train";
    int grid = 0;
    double span = 0.0;

    auto add_common = [&](CLI::App* c, bool needs_base, bool needs_ckpt) {
        c->add_option("--config", config_path, "JSON run configuration");
        c->add_option("--out", out_dir, "artifact directory");
        if (needs_base) c->add_option("--base", base_ckpt, "base checkpoint")->required();
        if (needs_ckpt)
            c->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
    };

    add_common(app.add_subcommand("pretrain-base", "train the frozen base"), false, false);
    add_common(app.add_subcommand("train", "editor-only fine-tuning"), true, false);
    add_common(app.add_subcommand("eval", "greedy exact-match evaluation"), false, true);
    add_common(app.add_subcommand("control-train", "train counterfactual control editors"), true,
               false);
    add_common(app.add_subcommand("control-eval", "evaluate control editors"), false, true);
    add_common(app.add_subcommand("sweep-rank", "visual/multimodal rank grid"), true, false);
    add_common(app.add_subcommand("sweep-depth", "layer-depth settings a-e"), true, false);
    add_common(app.add_subcommand("sweep-length", "tied prefix/suffix lengths"), true, false);
    add_common(app.add_subcommand("sweep-segment", "prefix/suffix/both/all ablation"), true,
               false);
    auto* ls = app.add_subcommand("landscape", "2-D loss surface around a checkpoint");
    add_common(ls, false, true);
    ls->add_option("--grid", grid, "grid resolution override");
    ls->add_option("--span", span, "alpha/beta span override");
    auto* dd = app.add_subcommand("dump-data", "write a dataset as JSONL");
    add_common(dd, false, false);
    dd->add_option("--task", task, "classify or yesno");
    dd->add_option("--split", split, "train or test");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "pretrain-base") return cmd_pretrain_base(config_path, out_dir);
        if (cmd == "train") return cmd_train(config_path, base_ckpt, out_dir);
        if (cmd == "eval") return cmd_eval(ckpt_path, out_dir);
        if (cmd == "control-train") return cmd_control_train(config_path, base_ckpt, out_dir);
        if (cmd == "control-eval") return cmd_control_eval(ckpt_path, out_dir);
        if (cmd.rfind("sweep-", 0) == 0)
            return cmd_sweep(cmd.substr(6), config_path, base_ckpt, out_dir);
        if (cmd == "landscape") return cmd_landscape(ckpt_path, out_dir, grid, span);
        if (cmd == "dump-data") return cmd_dump_data(config_path, task, split, out_dir);
        std::cerr << "unknown subcommand " << cmd << "\n";
        return 1;
    } catch (const IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 2;
    }
}
