#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace mrt {

// FNV-1a 64-bit, used for frozen-weight fingerprints and checkpoint integrity.
class Fnv1a {
public:
    void update(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= b[i];
            h_ *= 0x100000001b3ULL;
        }
    }

    void update_doubles(const std::vector<double>& v) {
        update(v.data(), v.size() * sizeof(double));
    }

    void update_string(const std::string& s) { update(s.data(), s.size()); }

    std::uint64_t digest() const { return h_; }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace mrt
