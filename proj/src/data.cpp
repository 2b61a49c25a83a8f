#include "mrt/data.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mrt/rng.hpp"

namespace mrt {

const std::vector<std::string>& class_words() {
    static const std::vector<std::string> words = {"plane", "car",   "bird",  "cat",  "deer",
                                                   "dog",   "frog",  "horse", "ship", "truck"};
    return words;
}

namespace {

std::vector<std::string> build_vocab() {
    std::vector<std::string> v = {"<eos>", "<pad>", "what", "is",  "the",  "object", "in",
                                  "image", "?",     "an",   "does", "show", "yes",    "no",
                                  "not",   "sure"};
    for (const auto& w : class_words()) v.push_back(w);
    for (int d = 0; d < 10; ++d) v.push_back(std::to_string(d));
    return v;
}

const std::vector<std::string>& vocab() {
    static const std::vector<std::string> v = build_vocab();
    return v;
}

const std::map<std::string, int>& vocab_index() {
    static const std::map<std::string, int> idx = [] {
        std::map<std::string, int> m;
        for (std::size_t i = 0; i < vocab().size(); ++i) m[vocab()[i]] = static_cast<int>(i);
        return m;
    }();
    return idx;
}

}  // namespace

int vocab_size_words() { return static_cast<int>(vocab().size()); }

int token_id(const std::string& word) {
    auto it = vocab_index().find(word);
    if (it == vocab_index().end())
        throw std::invalid_argument("tokenize: out-of-vocabulary word '" + word + "'");
    return it->second;
}

const std::string& token_word(int id) {
    if (id < 0 || id >= vocab_size_words()) throw std::invalid_argument("bad token id");
    return vocab()[static_cast<std::size_t>(id)];
}

int eos_id() { return 0; }

std::vector<int> tokenize(const std::string& text) {
    std::vector<int> ids;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) ids.push_back(token_id(w));
    return ids;
}

std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += token_word(ids[i]);
    }
    return out;
}

namespace {

// 8x8 glyph bitmaps, one per class. Every 4x4 quadrant of each glyph has at
// least one set pixel so the RoI patch set is exactly the 2x2 bounding box.
bool glyph_bit(int cls, int r, int c) {
    auto in = [](int v, int lo, int hi) { return v >= lo && v <= hi; };
    switch (cls) {
        case 0: return in(r, 3, 4);                                   // horizontal bar
        case 1: return in(c, 3, 4);                                   // vertical bar
        case 2: return r == c || r == 7 - c;                          // X
        // four isolated dots, one centered per quadrant; structurally unlike
        // the corner-L quadrants the cross shared with the outline glyph
        case 3: return in(r % 4, 1, 2) && in(c % 4, 1, 2);
        case 4: return r == 0 || r == 7 || c == 0 || c == 7;          // outline
        case 5: return in(r, 2, 5) && in(c, 2, 5);                    // solid block
        case 6: return ((r / 2) + (c / 2)) % 2 == 0;                  // checkerboard
        case 7: {                                                     // diamond ring
            const double d = std::abs(2 * r - 7) + std::abs(2 * c - 7);
            return d >= 6 && d <= 8;
        }
        case 8: return c <= 1 || c >= 6 || in(r, 6, 7);               // U
        case 9: return in(r, 0, 1) || in(r, 6, 7) || r == 7 - c;      // Z
        default: throw std::invalid_argument("gen_image: class id out of range");
    }
}

}  // namespace

SynthImage gen_image(int class_id, std::uint64_t seed, int grid) {
    if (class_id < 0 || class_id >= kNumClasses)
        throw std::invalid_argument("gen_image: class id out of range");
    if (grid < 2) throw std::invalid_argument("gen_image: grid too small for an 8x8 glyph");

    SynthImage img;
    img.class_id = class_id;
    img.grid = grid;
    img.seed = seed;
    const int side = img.side();
    img.pixels.assign(static_cast<std::size_t>(side) * side, 0.0);

    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(class_id)));
    for (double& p : img.pixels) p = rng.uniform(0.0, 0.15);

    // glyph occupies a 2x2 patch block at a seeded patch-aligned offset
    const int max_off = grid - 2;
    const int ox = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(max_off + 1)));
    const int oy = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(max_off + 1)));
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c)
            if (glyph_bit(class_id, r, c))
                img.pixels[static_cast<std::size_t>(oy * kPatchSide + r) * side +
                           (ox * kPatchSide + c)] = rng.uniform(0.7, 1.0);

    for (int pr = 0; pr < 2; ++pr)
        for (int pc = 0; pc < 2; ++pc) img.roi_patches.insert((oy + pr) * grid + (ox + pc));
    return img;
}

std::set<int> scan_roi(const SynthImage& img) {
    std::set<int> roi;
    const int side = img.side();
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c)
            if (img.px(r, c) > 0.5)
                roi.insert((r / kPatchSide) * img.grid + (c / kPatchSide));
    return roi;
}

const PromptTemplate& classify_template() {
    static const PromptTemplate t{"what is the object in the image ?", 3};
    return t;
}

const PromptTemplate& yesno_template(int id) {
    static const PromptTemplate t0{"is the object an {cls} in the image ?", 4};
    static const PromptTemplate t1{"does the image show an {cls} ?", 5};
    if (id == 0) return t0;
    if (id == 1) return t1;
    throw std::invalid_argument("yesno_template: unknown template id");
}

namespace {

std::vector<int> instantiate(const PromptTemplate& t, int cls) {
    std::string s = t.text;
    const auto pos = s.find("{cls}");
    if (pos != std::string::npos) s.replace(pos, 5, class_words()[static_cast<std::size_t>(cls)]);
    return tokenize(s);
}

Sample make_sample(SynthImage img, std::vector<int> prompt, const std::string& answer,
                   TaskKind task) {
    Sample s;
    s.image = std::move(img);
    s.prompt_len = static_cast<int>(prompt.size());
    s.token_ids = std::move(prompt);
    s.answer_ids = tokenize(answer);
    for (int id : s.answer_ids) s.token_ids.push_back(id);
    s.token_ids.push_back(eos_id());
    s.mask.assign(s.token_ids.size(), 0);
    for (std::size_t i = static_cast<std::size_t>(s.prompt_len); i < s.token_ids.size(); ++i)
        s.mask[i] = 1;
    s.task = task;
    return s;
}

void replace_answer(Sample& s, const std::string& answer) {
    s.token_ids.resize(static_cast<std::size_t>(s.prompt_len));
    s.answer_ids = tokenize(answer);
    for (int id : s.answer_ids) s.token_ids.push_back(id);
    s.token_ids.push_back(eos_id());
    s.mask.assign(s.token_ids.size(), 0);
    for (std::size_t i = static_cast<std::size_t>(s.prompt_len); i < s.token_ids.size(); ++i)
        s.mask[i] = 1;
}

std::uint64_t image_seed(std::uint64_t base, const std::string& split, int cls, int idx) {
    std::uint64_t h = base;
    for (char ch : split) h = Rng::mix(h, static_cast<std::uint64_t>(ch));
    h = Rng::mix(h, static_cast<std::uint64_t>(cls) * 1000003ULL +
                        static_cast<std::uint64_t>(idx));
    return h;
}

std::vector<Sample> make_classify(int n_per_class, std::uint64_t seed, const std::string& split) {
    std::vector<Sample> ds;
    for (int c = 0; c < kNumClasses; ++c)
        for (int i = 0; i < n_per_class; ++i) {
            SynthImage img = gen_image(c, image_seed(seed, split, c, i));
            ds.push_back(make_sample(std::move(img), tokenize(classify_template().text),
                                     class_words()[static_cast<std::size_t>(c)],
                                     TaskKind::Classify));
        }
    return ds;
}

std::vector<Sample> make_yesno(int n_per_class, std::uint64_t seed, const std::string& split,
                               int template_id) {
    const PromptTemplate& tpl = yesno_template(template_id);
    std::vector<Sample> ds;
    for (int c = 0; c < kNumClasses; ++c) {
        Rng rng(Rng::mix(Rng::mix(seed, 0x79657301ULL), static_cast<std::uint64_t>(c)));
        for (int i = 0; i < n_per_class; ++i) {
            SynthImage img = gen_image(c, image_seed(seed, split, c, i));
            const bool matched = (i % 2 == 0);
            int indicator = c;
            if (!matched) {
                indicator = static_cast<int>(rng.next_below(kNumClasses - 1));
                if (indicator >= c) ++indicator;
            }
            ds.push_back(make_sample(std::move(img), instantiate(tpl, indicator),
                                     matched ? "yes" : "no", TaskKind::YesNo));
        }
    }
    return ds;
}

}  // namespace

std::vector<Sample> make_dataset(const TaskSpec& task, int n_per_class, std::uint64_t seed,
                                 const std::string& split) {
    switch (task.kind) {
        case TaskKind::Classify:
            return make_classify(n_per_class, seed, split);
        case TaskKind::YesNo:
            return make_yesno(n_per_class, seed, split, task.template_id);
        case TaskKind::CounterfactMisclass: {
            if (task.target_class < 0 || task.target_class >= kNumClasses)
                throw std::invalid_argument("make_dataset: bad target class");
            auto ds = make_yesno(n_per_class, seed, split, task.template_id);
            for (Sample& s : ds) {
                if (s.image.class_id != task.target_class) continue;
                s.task = TaskKind::CounterfactMisclass;
                if (s.answer_ids == tokenize("yes")) replace_answer(s, "no");
            }
            return ds;
        }
        case TaskKind::CounterfactMisalign: {
            if (task.target_class < 0 || task.target_class >= kNumClasses ||
                task.misalign_target < 0 || task.misalign_target >= kNumClasses ||
                task.misalign_target == task.target_class)
                throw std::invalid_argument("make_dataset: bad misalignment classes");
            auto ds = make_classify(n_per_class, seed, split);
            for (Sample& s : ds) {
                if (s.image.class_id != task.target_class) continue;
                s.task = TaskKind::CounterfactMisalign;
                replace_answer(s, class_words()[static_cast<std::size_t>(task.misalign_target)]);
            }
            return ds;
        }
    }
    throw std::invalid_argument("make_dataset: unknown task tag");
}

void dump_dataset_jsonl(const std::vector<Sample>& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("dump_dataset_jsonl: cannot open " + path);
    for (const Sample& s : ds) {
        nlohmann::json j;
        j["class"] = s.image.class_id;
        j["seed"] = s.image.seed;
        j["pixels"] = s.image.pixels;
        j["tokens"] = s.token_ids;
        j["label"] = detokenize(s.answer_ids);
        j["roi"] = std::vector<int>(s.image.roi_patches.begin(), s.image.roi_patches.end());
        out << j.dump() << "\n";
    }
}

}  // namespace mrt
