#include "mrt/control.hpp"

#include <fstream>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace mrt {

void ControlScenario::validate() const {
    if (target_class < 0 || target_class >= kNumClasses)
        throw std::invalid_argument("control scenario: target class out of range");
    if (kind == Kind::Misalignment) {
        if (misalign_target < 0 || misalign_target >= kNumClasses)
            throw std::invalid_argument("control scenario: misalignment target out of range");
        if (misalign_target == target_class)
            throw std::invalid_argument("control scenario: misalignment target equals source");
    }
}

EditPlan build_control_plan(const ToyModelConfig& cfg, const ControlScenario& scenario,
                            int visual_rank, int multimodal_rank) {
    scenario.validate();
    EditPlan plan;
    if (cfg.vision_layers > 1) plan.visual_layers = {1};
    plan.visual_rank = visual_rank;
    plan.cross_modality = true;
    plan.decoder_layers = {1};
    plan.multimodal_rank = multimodal_rank;
    plan.prefix_len = 0;
    plan.suffix_len = 0;
    plan.roi_only = true;
    plan.control_token_index = scenario.kind == ControlScenario::Kind::Misclassification
                                   ? yesno_template(scenario.template_id).indicator_index
                                   : classify_template().indicator_index;
    plan.validate(cfg);
    return plan;
}

std::vector<Sample> make_control_eval_set(const ControlScenario& scenario, int per_class,
                                          std::uint64_t seed, const std::string& split) {
    if (scenario.kind == ControlScenario::Kind::Misalignment)
        return make_dataset({TaskKind::Classify, -1, -1, scenario.template_id}, per_class, seed,
                            split);
    // matched-indicator probes only: even indices of the clean yes/no stream
    auto all = make_dataset({TaskKind::YesNo, -1, -1, scenario.template_id}, 2 * per_class, seed,
                            split);
    std::vector<Sample> matched;
    for (Sample& s : all)
        if (s.answer_ids == tokenize("yes")) matched.push_back(std::move(s));
    return matched;
}

namespace {

std::vector<int> decode_answer(const ToyModel& model, const EditorSet* editors,
                               const EditPlan& plan, const Sample& s) {
    std::vector<int> prompt(s.token_ids.begin(),
                            s.token_ids.begin() + static_cast<long>(s.prompt_len));
    return model.generate(s.image, prompt, editors, plan,
                          static_cast<int>(s.answer_ids.size()) + 1);
}

bool answer_is(const std::vector<int>& decoded, const std::vector<int>& want) {
    return decoded.size() >= want.size() &&
           std::equal(want.begin(), want.end(), decoded.begin());
}

}  // namespace

ControlReport eval_counterfact(const ToyModel& model, const EditorSet* editors,
                               const ControlScenario& scenario,
                               const std::vector<Sample>& test_set) {
    scenario.validate();
    if (test_set.empty()) throw std::invalid_argument("eval_counterfact: empty test set");

    EditPlan plan = build_control_plan(model.config(), scenario);
    EditPlan no_edit;  // editor-free reference

    const std::vector<int> counterfact_answer =
        scenario.kind == ControlScenario::Kind::Misclassification
            ? tokenize("no")
            : tokenize(class_words()[static_cast<std::size_t>(scenario.misalign_target)]);

    std::map<int, ControlReport::Row> rows;
    for (const Sample& s : test_set) {
        ControlReport::Row& row = rows[s.image.class_id];
        row.cls = s.image.class_id;
        ++row.count;

        std::vector<int> base = decode_answer(model, nullptr, no_edit, s);
        std::vector<int> edited =
            editors ? decode_answer(model, editors, plan, s) : base;

        if (answer_is(base, s.answer_ids)) row.base_accuracy += 1.0;
        if (answer_is(edited, counterfact_answer)) row.counterfact_rate += 1.0;
        if (edited != base) row.changed_rate += 1.0;
    }

    ControlReport rep;
    int others = 0;
    double disrupted = 0.0;
    for (auto& [cls, row] : rows) {
        row.base_accuracy /= row.count;
        row.counterfact_rate /= row.count;
        row.changed_rate /= row.count;
        rep.per_class.push_back(row);
        if (cls == scenario.target_class) {
            rep.counterfact_rate_on_target = row.counterfact_rate;
        } else {
            others += row.count;
            disrupted += row.changed_rate * row.count;
        }
    }
    if (!rows.count(scenario.target_class))
        throw std::invalid_argument("eval_counterfact: no samples for the target class");
    rep.other_class_disruption = others > 0 ? disrupted / others : 0.0;
    return rep;
}

ControlTrainResult run_control_training(const ToyModel& model, const ControlScenario& scenario,
                                        const ControlConfig& cfg) {
    scenario.validate();

    // precondition: the frozen model must already answer clean yes/no prompts
    auto clean_test = make_dataset({TaskKind::YesNo, -1, -1, scenario.template_id},
                                   cfg.test_per_class, cfg.data_seed, "test");
    EditPlan no_edit;
    const double clean_acc = evaluate(model, nullptr, no_edit, clean_test);
    if (clean_acc < cfg.clean_threshold)
        throw std::runtime_error(
            "run_control_training: base model is not yes/no competent (clean accuracy " +
            std::to_string(clean_acc) + " < " + std::to_string(cfg.clean_threshold) + ")");

    EditPlan plan =
        build_control_plan(model.config(), scenario, cfg.visual_rank, cfg.multimodal_rank);

    TaskSpec task;
    if (scenario.kind == ControlScenario::Kind::Misclassification) {
        task = {TaskKind::CounterfactMisclass, scenario.target_class, -1, scenario.template_id};
    } else {
        task = {TaskKind::CounterfactMisalign, scenario.target_class, scenario.misalign_target,
                scenario.template_id};
    }
    auto train_set = make_dataset(task, cfg.n_per_class, cfg.data_seed, "train");

    ControlTrainResult res;
    res.editors = make_editors(plan, model.config(), cfg.editor_seed);
    res.metrics = train_editors(model, plan, res.editors, train_set, cfg.train);

    auto train_probes =
        make_control_eval_set(scenario, cfg.test_per_class, cfg.data_seed, "train");
    res.train_report = eval_counterfact(model, &res.editors, scenario, train_probes);
    return res;
}

void write_control_report_json(const ControlReport& r, const std::string& path) {
    nlohmann::json j;
    j["counterfact_rate_on_target"] = r.counterfact_rate_on_target;
    j["other_class_disruption"] = r.other_class_disruption;
    j["per_class"] = nlohmann::json::array();
    for (const auto& row : r.per_class)
        j["per_class"].push_back({{"class", row.cls},
                                  {"count", row.count},
                                  {"counterfact_rate", row.counterfact_rate},
                                  {"changed_rate", row.changed_rate},
                                  {"base_accuracy", row.base_accuracy}});
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_control_report_json: cannot open " + path);
    out << j.dump(2) << "\n";
}

void write_control_report_csv(const ControlReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_control_report_csv: cannot open " + path);
    out << "class,count,counterfact_rate,other_disruption,base_accuracy\n";
    for (const auto& row : r.per_class)
        out << row.cls << "," << row.count << "," << row.counterfact_rate << ","
            << row.changed_rate << "," << row.base_accuracy << "\n";
}

}  // namespace mrt
