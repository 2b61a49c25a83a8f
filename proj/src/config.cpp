#include "mrt/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mrt/hash.hpp"

namespace mrt {

namespace {

using nlohmann::json;

// Tracks which keys of one JSON object were consumed so leftovers can be
// reported with their full location.
class Section {
public:
    Section(const json& j, std::string loc) : j_(j), loc_(std::move(loc)) {
        if (!j_.is_object())
            throw std::invalid_argument("config: " + loc_ + " must be a JSON object");
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        auto it = j_.find(key);
        if (it == j_.end()) return;
        seen_.insert(key);
        try {
            out = it->get<T>();
        } catch (const json::exception&) {
            throw std::invalid_argument("config: wrong type for key " + qualify(key));
        }
    }

    bool has(const std::string& key) {
        if (j_.contains(key)) {
            seen_.insert(key);
            return true;
        }
        return false;
    }

    const json& at(const std::string& key) const { return j_.at(key); }

    std::string qualify(const std::string& key) const {
        return loc_.empty() ? key : loc_ + "." + key;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw std::invalid_argument("config: unknown key " + qualify(it.key()));
    }

private:
    const json& j_;
    std::string loc_;
    std::set<std::string> seen_;
};

void check_positive(long long v, const std::string& where) {
    if (v <= 0) throw std::invalid_argument("config: " + where + " must be positive");
}

void parse_model(const json& j, const std::string& loc, ToyModelConfig& m) {
    Section s(j, loc);
    s.get("d_v", m.d_v);
    s.get("d_t", m.d_t);
    s.get("vision_layers", m.vision_layers);
    s.get("decoder_layers", m.decoder_layers);
    s.get("heads", m.heads);
    s.get("patch_grid", m.patch_grid);
    s.get("vocab_size", m.vocab_size);
    s.get("max_seq", m.max_seq);
    s.get("ffn_mult", m.ffn_mult);
    s.finish();
    try {
        m.validate();
    } catch (const std::exception& e) {
        throw std::invalid_argument("config: " + loc + ": " + e.what());
    }
}

void parse_plan(const json& j, const std::string& loc, const ToyModelConfig& model,
                EditPlan& p) {
    Section s(j, loc);
    s.get("visual_layers", p.visual_layers);
    s.get("visual_rank", p.visual_rank);
    s.get("cross_modality", p.cross_modality);
    s.get("decoder_layers", p.decoder_layers);
    s.get("multimodal_rank", p.multimodal_rank);
    s.get("prefix_len", p.prefix_len);
    s.get("suffix_len", p.suffix_len);
    s.get("control_token_index", p.control_token_index);
    s.get("roi_only", p.roi_only);
    s.get("edit_all_text", p.edit_all_text);
    s.finish();
    try {
        p.validate(model);
    } catch (const std::exception& e) {
        throw std::invalid_argument("config: " + loc + ": " + e.what());
    }
}

void parse_train(const json& j, const std::string& loc, TrainConfig& t) {
    Section s(j, loc);
    s.get("learning_rate", t.learning_rate);
    s.get("batch_size", t.batch_size);
    s.get("epochs", t.epochs);
    s.get("warmup_ratio", t.warmup_ratio);
    s.get("beta1", t.beta1);
    s.get("beta2", t.beta2);
    s.get("eps", t.eps);
    s.get("weight_decay", t.weight_decay);
    s.get("grad_clip", t.grad_clip);
    s.get("seed", t.seed);
    s.get("eval_every", t.eval_every);
    s.finish();
    try {
        t.validate();
    } catch (const std::exception& e) {
        throw std::invalid_argument("config: " + loc + ": " + e.what());
    }
}

void parse_pretrain(const json& j, const std::string& loc, PretrainConfig& p) {
    Section s(j, loc);
    s.get("steps", p.steps);
    s.get("learning_rate", p.learning_rate);
    s.get("batch_size", p.batch_size);
    s.get("classify_per_class", p.classify_per_class);
    s.get("yesno_per_class", p.yesno_per_class);
    s.get("data_seed", p.data_seed);
    s.finish();
    if (p.steps < 0) throw std::invalid_argument("config: " + loc + ".steps must be >= 0");
    check_positive(p.batch_size, loc + ".batch_size");
    check_positive(p.classify_per_class + p.yesno_per_class, loc + ".*_per_class");
    if (p.learning_rate <= 0.0)
        throw std::invalid_argument("config: " + loc + ".learning_rate must be positive");
}

ControlScenario::Kind kind_from_name(const std::string& name, const std::string& where) {
    if (name == "misclassification") return ControlScenario::Kind::Misclassification;
    if (name == "misalignment") return ControlScenario::Kind::Misalignment;
    throw std::invalid_argument("config: " + where + " must be \"misclassification\" or "
                                "\"misalignment\"");
}

void parse_control(const json& j, const std::string& loc, ControlScenario& sc,
                   ControlConfig& cc) {
    Section s(j, loc);
    std::string kind = sc.kind == ControlScenario::Kind::Misclassification ? "misclassification"
                                                                           : "misalignment";
    s.get("kind", kind);
    sc.kind = kind_from_name(kind, loc + ".kind");
    s.get("target_class", sc.target_class);
    s.get("misalign_target", sc.misalign_target);
    s.get("template_id", sc.template_id);
    s.get("n_per_class", cc.n_per_class);
    s.get("test_per_class", cc.test_per_class);
    s.get("clean_threshold", cc.clean_threshold);
    s.get("visual_rank", cc.visual_rank);
    s.get("multimodal_rank", cc.multimodal_rank);
    s.get("data_seed", cc.data_seed);
    s.get("editor_seed", cc.editor_seed);
    if (s.has("train")) parse_train(s.at("train"), loc + ".train", cc.train);
    s.finish();
    check_positive(cc.n_per_class, loc + ".n_per_class");
    check_positive(cc.test_per_class, loc + ".test_per_class");
    try {
        sc.validate();
    } catch (const std::exception& e) {
        throw std::invalid_argument("config: " + loc + ": " + e.what());
    }
}

void parse_sweep(const json& j, const std::string& loc, SweepSpec& sw) {
    Section s(j, loc);
    s.get("visual_ranks", sw.visual_ranks);
    s.get("multimodal_ranks", sw.multimodal_ranks);
    s.get("depth_settings", sw.depth_settings);
    s.get("seeds", sw.seeds);
    s.get("lengths", sw.lengths);
    s.get("n_per_class", sw.n_per_class);
    s.get("test_per_class", sw.test_per_class);
    s.finish();
    check_positive(sw.n_per_class, loc + ".n_per_class");
    check_positive(sw.test_per_class, loc + ".test_per_class");
    for (int r : sw.visual_ranks) check_positive(r, loc + ".visual_ranks entries");
    for (int r : sw.multimodal_ranks) check_positive(r, loc + ".multimodal_ranks entries");
    for (int r : sw.lengths) check_positive(r, loc + ".lengths entries");
    for (char c : sw.depth_settings)
        if (c < 'a' || c > 'e')
            throw std::invalid_argument("config: " + loc + ".depth_settings must use a-e");
    if (sw.seeds.empty())
        throw std::invalid_argument("config: " + loc + ".seeds must not be empty");
}

void parse_landscape(const json& j, const std::string& loc, LandscapeSpec& l) {
    Section s(j, loc);
    s.get("resolution", l.resolution);
    s.get("span", l.span);
    s.get("direction_seed", l.direction_seed);
    s.get("n_per_class", l.n_per_class);
    s.finish();
    if (l.resolution < 2)
        throw std::invalid_argument("config: " + loc + ".resolution must be at least 2");
    if (l.span <= 0.0) throw std::invalid_argument("config: " + loc + ".span must be positive");
    check_positive(l.n_per_class, loc + ".n_per_class");
}

void parse_data(const json& j, const std::string& loc, DataSpec& d) {
    Section s(j, loc);
    s.get("n_per_class", d.n_per_class);
    s.get("test_per_class", d.test_per_class);
    s.get("seed", d.seed);
    s.finish();
    check_positive(d.n_per_class, loc + ".n_per_class");
    check_positive(d.test_per_class, loc + ".test_per_class");
}

}  // namespace

RunConfig parse_config_text(const std::string& json_text, const std::string& where) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config: " + where + " is not valid JSON: " + e.what());
    }

    RunConfig c;
    Section root(j, "");
    if (root.has("model")) parse_model(root.at("model"), "model", c.model);
    else c.model.validate();
    c.plan = EditPlan::default_plan(c.model);
    if (root.has("plan")) parse_plan(root.at("plan"), "plan", c.model, c.plan);
    else c.plan.validate(c.model);
    if (root.has("train")) parse_train(root.at("train"), "train", c.train);
    if (root.has("pretrain")) parse_pretrain(root.at("pretrain"), "pretrain", c.pretrain);
    if (root.has("control")) parse_control(root.at("control"), "control", c.scenario, c.control);
    if (root.has("sweep")) parse_sweep(root.at("sweep"), "sweep", c.sweep);
    if (root.has("landscape")) parse_landscape(root.at("landscape"), "landscape", c.landscape);
    if (root.has("data")) parse_data(root.at("data"), "data", c.data);
    root.get("seed", c.seed);
    root.get("model_seed", c.model_seed);
    root.finish();
    return c;
}

RunConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path);
}

std::string serialize_config(const RunConfig& c) {
    json j;
    j["model"] = {{"d_v", c.model.d_v},
                  {"d_t", c.model.d_t},
                  {"vision_layers", c.model.vision_layers},
                  {"decoder_layers", c.model.decoder_layers},
                  {"heads", c.model.heads},
                  {"patch_grid", c.model.patch_grid},
                  {"vocab_size", c.model.vocab_size},
                  {"max_seq", c.model.max_seq},
                  {"ffn_mult", c.model.ffn_mult}};
    j["plan"] = {{"visual_layers", c.plan.visual_layers},
                 {"visual_rank", c.plan.visual_rank},
                 {"cross_modality", c.plan.cross_modality},
                 {"decoder_layers", c.plan.decoder_layers},
                 {"multimodal_rank", c.plan.multimodal_rank},
                 {"prefix_len", c.plan.prefix_len},
                 {"suffix_len", c.plan.suffix_len},
                 {"control_token_index", c.plan.control_token_index},
                 {"roi_only", c.plan.roi_only},
                 {"edit_all_text", c.plan.edit_all_text}};
    auto train_json = [](const TrainConfig& t) {
        return json{{"learning_rate", t.learning_rate},
                    {"batch_size", t.batch_size},
                    {"epochs", t.epochs},
                    {"warmup_ratio", t.warmup_ratio},
                    {"beta1", t.beta1},
                    {"beta2", t.beta2},
                    {"eps", t.eps},
                    {"weight_decay", t.weight_decay},
                    {"grad_clip", t.grad_clip},
                    {"seed", t.seed},
                    {"eval_every", t.eval_every}};
    };
    j["train"] = train_json(c.train);
    j["pretrain"] = {{"steps", c.pretrain.steps},
                     {"learning_rate", c.pretrain.learning_rate},
                     {"batch_size", c.pretrain.batch_size},
                     {"classify_per_class", c.pretrain.classify_per_class},
                     {"yesno_per_class", c.pretrain.yesno_per_class},
                     {"data_seed", c.pretrain.data_seed}};
    j["control"] = {{"kind", c.scenario.kind == ControlScenario::Kind::Misclassification
                                 ? "misclassification"
                                 : "misalignment"},
                    {"target_class", c.scenario.target_class},
                    {"misalign_target", c.scenario.misalign_target},
                    {"template_id", c.scenario.template_id},
                    {"n_per_class", c.control.n_per_class},
                    {"test_per_class", c.control.test_per_class},
                    {"clean_threshold", c.control.clean_threshold},
                    {"visual_rank", c.control.visual_rank},
                    {"multimodal_rank", c.control.multimodal_rank},
                    {"data_seed", c.control.data_seed},
                    {"editor_seed", c.control.editor_seed},
                    {"train", train_json(c.control.train)}};
    j["sweep"] = {{"visual_ranks", c.sweep.visual_ranks},
                  {"multimodal_ranks", c.sweep.multimodal_ranks},
                  {"depth_settings", c.sweep.depth_settings},
                  {"seeds", c.sweep.seeds},
                  {"lengths", c.sweep.lengths},
                  {"n_per_class", c.sweep.n_per_class},
                  {"test_per_class", c.sweep.test_per_class}};
    j["landscape"] = {{"resolution", c.landscape.resolution},
                      {"span", c.landscape.span},
                      {"direction_seed", c.landscape.direction_seed},
                      {"n_per_class", c.landscape.n_per_class}};
    j["data"] = {{"n_per_class", c.data.n_per_class},
                 {"test_per_class", c.data.test_per_class},
                 {"seed", c.data.seed}};
    j["seed"] = c.seed;
    j["model_seed"] = c.model_seed;
    return j.dump(2) + "\n";
}

std::string config_hash(const RunConfig& c) {
    Fnv1a h;
    h.update_string(serialize_config(c));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(h.digest()));
    return std::string(buf);
}

}  // namespace mrt
