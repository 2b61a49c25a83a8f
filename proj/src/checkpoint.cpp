#include "mrt/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "mrt/hash.hpp"

namespace mrt {

namespace {

constexpr char kMagic[8] = {'M', 'R', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& b, std::uint32_t v) {
    char raw[4];
    std::memcpy(raw, &v, 4);
    b.append(raw, 4);
}

void put_u64(std::string& b, std::uint64_t v) {
    char raw[8];
    std::memcpy(raw, &v, 8);
    b.append(raw, 8);
}

void put_i32(std::string& b, std::int32_t v) { put_u32(b, static_cast<std::uint32_t>(v)); }

void put_string(std::string& b, const std::string& s) {
    put_u64(b, s.size());
    b.append(s);
}

void put_tensor(std::string& b, const Tensor& t) {
    put_u32(b, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(b, static_cast<std::uint32_t>(d));
    put_u64(b, t.data.size());
    b.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw IntegrityError("checkpoint payload truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    std::string str() {
        const std::uint64_t n = u64();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    Tensor tensor() {
        const std::uint32_t ndim = u32();
        if (ndim > 4) throw IntegrityError("checkpoint tensor has implausible rank");
        std::vector<int> shape;
        for (std::uint32_t i = 0; i < ndim; ++i) shape.push_back(static_cast<int>(u32()));
        const std::uint64_t n = u64();
        std::size_t expect = shape.empty() ? 0 : 1;
        for (int d : shape) expect *= static_cast<std::size_t>(d);
        if (n != expect) throw IntegrityError("checkpoint tensor size disagrees with its shape");
        need(n * sizeof(double));
        std::vector<double> data(n);
        std::memcpy(data.data(), buf.data() + pos, n * sizeof(double));
        pos += n * sizeof(double);
        return Tensor(std::move(shape), std::move(data));
    }
};

std::string serialize_payload(const Checkpoint& c) {
    std::string b;
    put_u64(b, c.seed);
    put_string(b, c.config_json);
    put_u64(b, c.frozen.size());
    for (const auto& [name, t] : c.frozen) {
        put_string(b, name);
        put_tensor(b, t);
    }
    put_u64(b, c.editor_records.size());
    for (const EditorRecord& e : c.editor_records) {
        put_string(b, site_name(e.site));
        put_i32(b, e.layer);
        put_i32(b, e.rank);
        put_i32(b, e.dim);
        put_tensor(b, e.raw_U);
        put_tensor(b, e.W);
        put_tensor(b, e.bias);
    }
    return b;
}

}  // namespace

Checkpoint make_checkpoint(const ToyModel& model, const EditorSet* editors,
                           const std::string& config_json, std::uint64_t seed) {
    Checkpoint c;
    c.config_json = config_json;
    c.seed = seed;
    for (const auto& [name, var] : model.weights().named_tensors())
        c.frozen.emplace_back(name, var.value());
    if (editors)
        for (const auto& [key, e] : editors->editors) {
            EditorRecord rec;
            rec.site = key.first;
            rec.layer = key.second;
            rec.rank = e.rank;
            rec.dim = e.dim;
            rec.raw_U = e.raw_U.value();
            rec.W = e.W.value();
            rec.bias = e.bias.value();
            c.editor_records.push_back(std::move(rec));
        }
    return c;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
    const std::string payload = serialize_payload(c);

    std::string head(kMagic, sizeof(kMagic));
    put_u32(head, kVersion);

    Fnv1a sum;
    sum.update(head.data(), head.size());
    sum.update(payload.data(), payload.size());

    std::string foot;
    put_u64(foot, payload.size());
    put_u64(foot, sum.digest());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.write(foot.data(), static_cast<std::streamsize>(foot.size()));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    const std::size_t head_len = sizeof(kMagic) + 4;
    const std::size_t foot_len = 16;
    if (file.size() < head_len + foot_len)
        throw IntegrityError("checkpoint file is too short to be valid");
    if (std::memcmp(file.data(), kMagic, sizeof(kMagic)) != 0)
        throw IntegrityError("checkpoint magic mismatch");
    std::uint32_t version;
    std::memcpy(&version, file.data() + sizeof(kMagic), 4);
    if (version != kVersion)
        throw IntegrityError("unsupported checkpoint version " + std::to_string(version));

    std::uint64_t stored_len, stored_sum;
    std::memcpy(&stored_len, file.data() + file.size() - 16, 8);
    std::memcpy(&stored_sum, file.data() + file.size() - 8, 8);
    if (stored_len != file.size() - head_len - foot_len)
        throw IntegrityError("checkpoint length footer disagrees with the file size");

    Fnv1a sum;
    sum.update(file.data(), file.size() - foot_len);
    if (sum.digest() != stored_sum) throw IntegrityError("checkpoint checksum mismatch");

    const std::string payload = file.substr(head_len, stored_len);
    Reader r{payload};
    Checkpoint c;
    c.seed = r.u64();
    c.config_json = r.str();
    const std::uint64_t n_frozen = r.u64();
    for (std::uint64_t i = 0; i < n_frozen; ++i) {
        std::string name = r.str();
        Tensor t = r.tensor();
        c.frozen.emplace_back(std::move(name), std::move(t));
    }
    const std::uint64_t n_editors = r.u64();
    for (std::uint64_t i = 0; i < n_editors; ++i) {
        EditorRecord rec;
        rec.site = site_from_name(r.str());
        rec.layer = r.i32();
        rec.rank = r.i32();
        rec.dim = r.i32();
        rec.raw_U = r.tensor();
        rec.W = r.tensor();
        rec.bias = r.tensor();
        c.editor_records.push_back(std::move(rec));
    }
    if (r.pos != payload.size()) throw IntegrityError("checkpoint has trailing payload bytes");
    return c;
}

void restore_frozen(const Checkpoint& c, ToyModel& model) {
    std::map<std::string, Tensor> stored;
    for (const auto& [name, t] : c.frozen) stored.emplace(name, t);
    for (auto& [name, var] : model.weights().named_tensors()) {
        auto it = stored.find(name);
        if (it == stored.end())
            throw std::runtime_error("restore_frozen: checkpoint is missing tensor " + name);
        if (!it->second.same_shape(var.value()))
            throw std::runtime_error("restore_frozen: shape mismatch for tensor " + name);
        var.raw()->value = it->second;
        stored.erase(it);
    }
    if (!stored.empty())
        throw std::runtime_error("restore_frozen: checkpoint has unknown tensor " +
                                 stored.begin()->first);
}

EditorSet restore_editors(const Checkpoint& c) {
    EditorSet set;
    for (const EditorRecord& rec : c.editor_records) {
        if (rec.raw_U.shape != std::vector<int>{rec.rank, rec.dim} ||
            rec.W.shape != std::vector<int>{rec.rank, rec.dim} ||
            rec.bias.shape != std::vector<int>{1, rec.rank})
            throw std::runtime_error("restore_editors: shape mismatch for editor " +
                                     site_name(rec.site) + "/" + std::to_string(rec.layer));
        EditorParams e;
        e.rank = rec.rank;
        e.dim = rec.dim;
        e.raw_U = Var::leaf(rec.raw_U, true);
        e.W = Var::leaf(rec.W, true);
        e.bias = Var::leaf(rec.bias, true);
        set.editors.emplace(std::make_pair(rec.site, rec.layer), std::move(e));
    }
    return set;
}

}  // namespace mrt
