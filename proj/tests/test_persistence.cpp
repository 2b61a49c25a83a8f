#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "mrt/checkpoint.hpp"
#include "mrt/config.hpp"
#include "mrt/hash.hpp"
#include "mrt/model.hpp"

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
    p.prefix_len = 1;
    p.suffix_len = 1;
    return p;
}

std::string tmp_path(const char* name) { return std::string("/tmp/") + name; }

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact and reproduces logits") {
    ToyModelConfig mc = micro_config();
    ToyModel model(mc, 60);
    EditPlan plan = micro_plan();
    EditorSet ed = make_editors(plan, mc, 61);

    RunConfig rc;
    rc.model = mc;
    rc.plan = plan;
    const std::string cfg_json = serialize_config(rc);

    const std::string path = tmp_path("mrt_roundtrip.ckpt");
    save_checkpoint(make_checkpoint(model, &ed, cfg_json, 99), path);
    Checkpoint loaded = load_checkpoint(path);

    CHECK(loaded.seed == 99);
    CHECK(loaded.config_json == cfg_json);

    ToyModel restored(mc, 1234567);  // different init, then overwritten
    restore_frozen(loaded, restored);
    CHECK(restored.weights().hash() == model.weights().hash());
    EditorSet red = restore_editors(loaded);
    REQUIRE(red.editors.size() == ed.editors.size());
    for (const auto& [key, e] : ed.editors) {
        const EditorParams* r = red.find(key.first, key.second);
        REQUIRE(r != nullptr);
        CHECK(r->raw_U.value().data == e.raw_U.value().data);
        CHECK(r->W.value().data == e.W.value().data);
        CHECK(r->bias.value().data == e.bias.value().data);
    }

    auto img = gen_image(3, 7, 2);
    auto ids = tokenize("what is the object ?");
    Tensor a = model.logits(img, ids, &ed, plan);
    Tensor b = restored.logits(img, ids, &red, plan);
    CHECK(a.data == b.data);
}

TEST_CASE("every single-byte flip is detected") {
    ToyModelConfig mc = micro_config();
    ToyModel model(mc, 62);
    EditPlan plan = micro_plan();
    EditorSet ed = make_editors(plan, mc, 63);
    const std::string path = tmp_path("mrt_corrupt.ckpt");
    save_checkpoint(make_checkpoint(model, &ed, "{}", 0), path);
    const std::string clean = read_file(path);
    REQUIRE(clean.size() > 64);

    // probe positions across header, payload and footer
    for (std::size_t pos : {std::size_t{0}, std::size_t{9}, std::size_t{40},
                            clean.size() / 2, clean.size() - 9, clean.size() - 1}) {
        std::string bad = clean;
        bad[pos] = static_cast<char>(bad[pos] ^ 0x01);
        write_file(path, bad);
        CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
    }
}

TEST_CASE("truncated files are rejected") {
    ToyModelConfig mc = micro_config();
    ToyModel model(mc, 64);
    const std::string path = tmp_path("mrt_trunc.ckpt");
    save_checkpoint(make_checkpoint(model, nullptr, "{}", 0), path);
    const std::string clean = read_file(path);

    write_file(path, clean.substr(0, clean.size() - 20));
    CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
    write_file(path, clean.substr(0, 10));
    CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
    write_file(path, "");
    CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
}

TEST_CASE("version mismatch is refused even with a valid checksum") {
    ToyModelConfig mc = micro_config();
    ToyModel model(mc, 65);
    const std::string path = tmp_path("mrt_version.ckpt");
    save_checkpoint(make_checkpoint(model, nullptr, "{}", 0), path);
    std::string bytes = read_file(path);

    bytes[8] = 2;  // version field follows the 8-byte magic
    Fnv1a sum;
    sum.update(bytes.data(), bytes.size() - 16);
    std::uint64_t digest = sum.digest();
    std::memcpy(bytes.data() + bytes.size() - 8, &digest, 8);
    write_file(path, bytes);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), IntegrityError);
}

TEST_CASE("restore into a mismatched model names the tensor") {
    ToyModelConfig mc = micro_config();
    ToyModel model(mc, 66);
    const std::string path = tmp_path("mrt_mismatch.ckpt");
    save_checkpoint(make_checkpoint(model, nullptr, "{}", 0), path);
    Checkpoint loaded = load_checkpoint(path);

    ToyModelConfig other = micro_config();
    other.d_v = 16;
    ToyModel wrong(other, 67);
    CHECK_THROWS_WITH_AS(restore_frozen(loaded, wrong), doctest::Contains("patch_embed"),
                         std::runtime_error);
}

TEST_CASE("editor records with inconsistent shapes are rejected") {
    Checkpoint c;
    EditorRecord rec;
    rec.site = Site::Visual;
    rec.layer = 1;
    rec.rank = 2;
    rec.dim = 4;
    rec.raw_U = Tensor::zeros({2, 3});  // wrong width
    rec.W = Tensor::zeros({2, 4});
    rec.bias = Tensor::zeros({1, 2});
    c.editor_records.push_back(rec);
    CHECK_THROWS_AS(restore_editors(c), std::runtime_error);
}

TEST_CASE("missing checkpoint file raises a runtime error") {
    CHECK_THROWS_AS(load_checkpoint("/tmp/mrt_definitely_absent.ckpt"), std::runtime_error);
}

TEST_CASE("run config serialization round-trips") {
    RunConfig c = parse_config_text("{}");
    c.train.epochs = 7;
    c.plan.visual_rank = 3;
    c.sweep.depth_settings = "ae";
    c.scenario.kind = ControlScenario::Kind::Misalignment;
    c.scenario.misalign_target = 8;
    c.seed = 42;

    RunConfig back = parse_config_text(serialize_config(c));
    CHECK(serialize_config(back) == serialize_config(c));
    CHECK(config_hash(back) == config_hash(c));
    CHECK(back.train.epochs == 7);
    CHECK(back.plan.visual_rank == 3);
    CHECK(back.scenario.misalign_target == 8);
}

TEST_CASE("unknown and out-of-range config keys are rejected by name") {
    CHECK_THROWS_WITH_AS(parse_config_text(R"({"modle": {}})"),
                         doctest::Contains("modle"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(parse_config_text(R"({"model": {"d_vv": 8}})"),
                         doctest::Contains("model.d_vv"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(parse_config_text(R"({"plan": {"visual_rank": 0}})"),
                         doctest::Contains("plan"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("not json"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(parse_config_text(R"({"train": {"epochs": "three"}})"),
                         doctest::Contains("train.epochs"), std::invalid_argument);
}

TEST_CASE("empty config object yields documented defaults") {
    RunConfig c = parse_config_text("{}");
    CHECK(c.model.d_v == 32);
    CHECK(c.model.d_t == 48);
    CHECK(c.train.learning_rate == doctest::Approx(6e-4));
    CHECK(c.train.epochs == 3);
    CHECK(c.train.warmup_ratio == doctest::Approx(0.03));
    CHECK(c.plan.visual_rank == 6);
    CHECK(c.plan.multimodal_rank == 4);
    CHECK(c.plan.prefix_len == 4);
    CHECK(c.plan.suffix_len == 4);
    CHECK(c.plan.visual_layers == std::vector<int>{1, 2, 3});
    CHECK(c.control.train.epochs == 1);
    CHECK(c.landscape.resolution == 21);
    CHECK(c.landscape.span == 1.0);
}
