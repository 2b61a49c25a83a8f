#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "mrt/data.hpp"

using namespace mrt;

TEST_CASE("gen_image determinism and class separation") {
    SynthImage a = gen_image(3, 42);
    SynthImage b = gen_image(3, 42);
    CHECK(a.pixels == b.pixels);
    CHECK(a.roi_patches == b.roi_patches);

    SynthImage c = gen_image(7, 42);
    CHECK(a.pixels != c.pixels);
}

TEST_CASE("all class glyphs are pairwise distinct") {
    std::vector<SynthImage> imgs;
    for (int cls = 0; cls < kNumClasses; ++cls) imgs.push_back(gen_image(cls, 5));
    for (int i = 0; i < kNumClasses; ++i)
        for (int j = i + 1; j < kNumClasses; ++j) CHECK(imgs[i].pixels != imgs[j].pixels);
}

TEST_CASE("stored RoI matches pixel-scan oracle") {
    for (int cls = 0; cls < kNumClasses; ++cls)
        for (std::uint64_t seed = 0; seed < 8; ++seed) {
            SynthImage img = gen_image(cls, seed);
            CHECK(scan_roi(img) == img.roi_patches);
            CHECK_FALSE(img.roi_patches.empty());
            for (int p : img.roi_patches) {
                CHECK(p >= 0);
                CHECK(p < img.grid * img.grid);
            }
        }
}

TEST_CASE("tokenize round trip and template anchor") {
    const std::string s = "is the object an cat in the image ?";
    auto ids = tokenize(s);
    CHECK(detokenize(ids) == s);
    CHECK(ids[4] == token_id("cat"));
    CHECK(yesno_template(0).indicator_index == 4);

    CHECK(tokenize("").empty());
    CHECK(detokenize(tokenize(classify_template().text)) == classify_template().text);
    CHECK(detokenize(tokenize(yesno_template(1).text.substr(0, 4))) == "does");
}

TEST_CASE("tokenize rejects out-of-vocabulary words") {
    CHECK_THROWS_AS(tokenize("what is a zebra ?"), std::invalid_argument);
}

TEST_CASE("yesno dataset is balanced 50/50") {
    auto ds = make_dataset({TaskKind::YesNo}, 10, 3);
    int yes = 0;
    for (const Sample& s : ds)
        if (s.answer_ids == tokenize("yes")) ++yes;
    CHECK(yes * 2 == static_cast<int>(ds.size()));
}

TEST_CASE("misclassification relabel leaves no yes on the target class") {
    TaskSpec spec{TaskKind::CounterfactMisclass, 4, -1, 0};
    auto ds = make_dataset(spec, 10, 3);
    auto clean = make_dataset({TaskKind::YesNo}, 10, 3);
    REQUIRE(ds.size() == clean.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds[i].image.class_id == 4) {
            CHECK(ds[i].answer_ids == tokenize("no"));
        } else {
            CHECK(ds[i].answer_ids == clean[i].answer_ids);
        }
        // counterfactual differs only in response tokens
        CHECK(ds[i].image.pixels == clean[i].image.pixels);
        CHECK(std::equal(ds[i].token_ids.begin(),
                         ds[i].token_ids.begin() + ds[i].prompt_len,
                         clean[i].token_ids.begin()));
    }
}

TEST_CASE("misalignment maps target class answers to the other class word") {
    TaskSpec spec{TaskKind::CounterfactMisalign, 2, 8, 0};
    auto ds = make_dataset(spec, 6, 11);
    for (const Sample& s : ds) {
        if (s.image.class_id == 2)
            CHECK(s.answer_ids == tokenize(class_words()[8]));
        else
            CHECK(s.answer_ids == tokenize(class_words()[static_cast<std::size_t>(s.image.class_id)]));
    }
}

TEST_CASE("make_dataset rejects bad counterfactual parameters") {
    CHECK_THROWS_AS(make_dataset({TaskKind::CounterfactMisclass, -1, -1, 0}, 4, 0),
                    std::invalid_argument);
    CHECK_THROWS_AS(make_dataset({TaskKind::CounterfactMisalign, 3, 3, 0}, 4, 0),
                    std::invalid_argument);
}

TEST_CASE("dataset generation is a pure function of its arguments") {
    auto a = make_dataset({TaskKind::Classify}, 5, 9);
    auto b = make_dataset({TaskKind::Classify}, 5, 9);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image.pixels == b[i].image.pixels);
        CHECK(a[i].token_ids == b[i].token_ids);
    }
}

TEST_CASE("train/test split hygiene: no shared images") {
    auto tr = make_dataset({TaskKind::Classify}, 20, 9, "train");
    auto te = make_dataset({TaskKind::Classify}, 20, 9, "test");
    std::set<std::vector<double>> seen;
    for (const Sample& s : tr) seen.insert(s.image.pixels);
    for (const Sample& s : te) CHECK(seen.count(s.image.pixels) == 0);
}

TEST_CASE("supervision mask covers exactly the response tokens") {
    auto ds = make_dataset({TaskKind::Classify}, 2, 1);
    for (const Sample& s : ds) {
        REQUIRE(s.mask.size() == s.token_ids.size());
        for (std::size_t i = 0; i < s.mask.size(); ++i)
            CHECK(static_cast<bool>(s.mask[i]) == (static_cast<int>(i) >= s.prompt_len));
        CHECK(s.token_ids.back() == eos_id());
    }
}

TEST_CASE("second yesno template uses a different indicator index") {
    CHECK(yesno_template(1).indicator_index == 5);
    auto ids = tokenize("does the image show an dog ?");
    CHECK(ids[5] == token_id("dog"));
}
