#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mrt/model.hpp"
#include "mrt/rng.hpp"
#include "mrt/train.hpp"

using namespace mrt;

namespace {

ToyModelConfig micro_config() {
    ToyModelConfig c;
    c.d_v = 8;
    c.d_t = 8;
    c.vision_layers = 2;
    c.decoder_layers = 2;
    c.heads = 2;
    c.patch_grid = 2;
    return c;
}

EditPlan micro_plan() {
    EditPlan p;
    p.visual_layers = {1};
    p.visual_rank = 2;
    p.decoder_layers = {1, 2};
    p.multimodal_rank = 2;
    p.prefix_len = 2;
    p.suffix_len = 2;
    return p;
}

std::vector<Sample> micro_dataset(int per_class, std::uint64_t seed, const std::string& split) {
    std::vector<Sample> ds;
    for (int cls = 0; cls < kNumClasses; ++cls)
        for (int i = 0; i < per_class; ++i) {
            Sample s;
            s.image = gen_image(cls, Rng::mix(Rng::mix(seed, cls),
                                              static_cast<std::uint64_t>(i) * 2 +
                                                  (split == "test" ? 1 : 0)),
                                2);
            s.token_ids = tokenize("what is the object ? " +
                                   class_words()[static_cast<std::size_t>(cls)]);
            s.token_ids.push_back(eos_id());
            s.prompt_len = 5;
            s.mask.assign(s.token_ids.size(), 0);
            for (std::size_t k = 5; k < s.token_ids.size(); ++k) s.mask[k] = 1;
            s.answer_ids = {token_id(class_words()[static_cast<std::size_t>(cls)])};
            ds.push_back(std::move(s));
        }
    return ds;
}

}  // namespace

TEST_CASE("lr schedule: warmup then linear decay") {
    TrainConfig cfg;
    cfg.learning_rate = 1.0;
    cfg.warmup_ratio = 0.1;
    const int total = 100;
    CHECK(lr_at(0, total, cfg) == 0.0);
    CHECK(lr_at(5, total, cfg) == doctest::Approx(0.5));
    CHECK(lr_at(10, total, cfg) == doctest::Approx(1.0));
    CHECK(lr_at(55, total, cfg) == doctest::Approx(0.5));
    CHECK(lr_at(100, total, cfg) == doctest::Approx(0.0));
    // monotone up then down
    for (int s = 1; s <= 10; ++s) CHECK(lr_at(s, total, cfg) > lr_at(s - 1, total, cfg));
    for (int s = 11; s <= 100; ++s) CHECK(lr_at(s, total, cfg) < lr_at(s - 1, total, cfg));
    CHECK_THROWS_AS(lr_at(101, total, cfg), std::invalid_argument);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.warmup_ratio = 1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("adam first step matches the hand formula") {
    Var p = Var::leaf(Tensor({1, 2}, {1.0, -2.0}), true);
    TrainConfig cfg;
    AdamOptimizer opt({p.raw()}, cfg);
    p.raw()->accumulate(Tensor({1, 2}, {0.5, -0.25}));
    opt.step(0.1);
    // with bias correction, the first step is lr * g / (|g| + eps)
    CHECK(p.value().data[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-10));
    CHECK(p.value().data[1] == doctest::Approx(-2.0 - 0.1 * (-0.25) / (0.25 + 1e-8)).epsilon(1e-10));
}

TEST_CASE("adam global-norm clipping caps the step") {
    Var a = Var::leaf(Tensor({1, 1}, {0.0}), true);
    TrainConfig cfg;
    cfg.grad_clip = 1.0;
    AdamOptimizer opt({a.raw()}, cfg);
    a.raw()->accumulate(Tensor({1, 1}, {100.0}));
    opt.step(1.0);
    // clipped g = 1.0, so the update equals the unclipped unit-gradient update
    CHECK(a.value().data[0] == doctest::Approx(-1.0 / (1.0 + 1e-8)).epsilon(1e-10));
}

TEST_CASE("training moves only editor parameters") {
    ToyModelConfig mc = micro_config();
    ToyModel model(mc, 40);
    const std::uint64_t before = model.weights().hash();

    EditPlan plan = micro_plan();
    EditorSet ed = make_editors(plan, mc, 41);
    std::vector<Tensor> ed_before;
    for (Node* n : ed.trainable_leaves()) ed_before.push_back(n->value);

    auto ds = micro_dataset(3, 7, "train");
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    RunMetrics m = train_editors(model, plan, ed, ds, cfg);

    CHECK(model.weights().hash() == before);
    bool any_moved = false;
    auto leaves = ed.trainable_leaves();
    for (std::size_t i = 0; i < leaves.size(); ++i)
        if (leaves[i]->value.data != ed_before[i].data) any_moved = true;
    CHECK(any_moved);
    CHECK(m.step_loss.size() == 4 * 1);  // ceil(30/8) steps, 1 epoch
    CHECK(m.trainable_fraction > 0.0);
    CHECK(m.trainable_fraction < 0.1);
}

TEST_CASE("editor training reduces the loss") {
    ToyModelConfig mc = micro_config();
    ToyModel model(mc, 42);
    EditPlan plan = micro_plan();
    EditorSet ed = make_editors(plan, mc, 43);
    auto ds = micro_dataset(4, 9, "train");

    const double before = dataset_loss(model, &ed, plan, ds);
    TrainConfig cfg;
    cfg.epochs = 8;
    cfg.batch_size = 8;
    cfg.learning_rate = 3e-3;
    train_editors(model, plan, ed, ds, cfg);
    const double after = dataset_loss(model, &ed, plan, ds);
    CHECK(after < before);
}

TEST_CASE("training is deterministic under the seed") {
    ToyModelConfig mc = micro_config();
    ToyModel model(mc, 44);
    EditPlan plan = micro_plan();
    auto ds = micro_dataset(2, 11, "train");
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seed = 5;

    EditorSet e1 = make_editors(plan, mc, 45);
    RunMetrics m1 = train_editors(model, plan, e1, ds, cfg);
    EditorSet e2 = make_editors(plan, mc, 45);
    RunMetrics m2 = train_editors(model, plan, e2, ds, cfg);

    REQUIRE(m1.step_loss.size() == m2.step_loss.size());
    for (std::size_t i = 0; i < m1.step_loss.size(); ++i)
        CHECK(m1.step_loss[i] == m2.step_loss[i]);
    auto l1 = e1.trainable_leaves(), l2 = e2.trainable_leaves();
    for (std::size_t i = 0; i < l1.size(); ++i) CHECK(l1[i]->value.data == l2[i]->value.data);
}

TEST_CASE("diverging run reports the failing step") {
    ToyModelConfig mc = micro_config();
    ToyModel model(mc, 46);
    EditPlan plan = micro_plan();
    EditorSet ed = make_editors(plan, mc, 47);
    auto ds = micro_dataset(2, 13, "train");
    TrainConfig cfg;
    cfg.learning_rate = 1e200;  // guaranteed blow-up
    cfg.epochs = 12;
    cfg.batch_size = 4;
    cfg.warmup_ratio = 0.0;
    CHECK_THROWS_AS(train_editors(model, plan, ed, ds, cfg), std::runtime_error);
}

TEST_CASE("evaluate scores exact-match answers") {
    ToyModelConfig mc = micro_config();
    ToyModel model(mc, 48);
    // saturate the head toward one class word: those samples match, others fail
    Tensor bias = Tensor::zeros({1, mc.vocab_size});
    bias.at(0, token_id(class_words()[0])) = 1e4;
    model.weights().head_bias.value_mut() = bias;

    auto ds = micro_dataset(2, 15, "test");
    EditPlan none;
    CHECK(evaluate(model, nullptr, none, ds) == doctest::Approx(0.1));
}

TEST_CASE("dataset_loss is independent of batching") {
    ToyModelConfig mc = micro_config();
    ToyModel model(mc, 50);
    EditPlan plan = micro_plan();
    EditorSet ed = make_editors(plan, mc, 51);
    auto ds = micro_dataset(2, 17, "train");
    const double a = dataset_loss(model, &ed, plan, ds, 3);
    const double b = dataset_loss(model, &ed, plan, ds, 20);
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("pretraining is deterministic and zero steps leave chance accuracy") {
    ToyModelConfig mc = micro_config();
    mc.patch_grid = 4;  // pretraining data uses the standard 16x16 images
    ToyModel a(mc, 52), b(mc, 52);
    PretrainConfig pc;
    pc.steps = 2;
    pc.classify_per_class = 2;
    pc.yesno_per_class = 2;
    pretrain_base(a, pc, 3);
    pretrain_base(b, pc, 3);
    CHECK(a.weights().hash() == b.weights().hash());

    ToyModel fresh(mc, 52);
    EditPlan none;
    auto test = make_dataset({TaskKind::Classify}, 2, 19, "test");
    CHECK(evaluate(fresh, nullptr, none, test) < 0.3);  // untrained is near chance
}

TEST_CASE("metrics artifacts are written") {
    RunMetrics m;
    m.step_loss = {1.0, 0.5};
    m.step_lr = {0.0, 1e-3};
    m.final_loss = 0.5;
    m.final_accuracy = 0.75;
    m.trainable_fraction = 0.01;
    write_metrics_csv(m, "/tmp/mrt_test_metrics.csv");
    write_summary_json(m, 7, "abc123", "/tmp/mrt_test_summary.json");
    std::ifstream csv("/tmp/mrt_test_metrics.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "step,loss,lr");
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 2);
}
