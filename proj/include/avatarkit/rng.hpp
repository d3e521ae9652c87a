#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "avatarkit/tensor.hpp"

namespace avk {

namespace detail {

inline uint64_t fmix64(uint64_t k) {
    k ^= k >> 33;
    k *= 0xff51afd7ed558ccdULL;
    k ^= k >> 33;
    k *= 0xc4ceb9fe1a85ec53ULL;
    k ^= k >> 33;
    return k;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

// Counter-based random stream keyed by (seed, role, a, b). Streams with
// distinct keys are independent; the same key always replays the same
// sequence, which is what the deterministic training mode relies on.
class RandomStream {
public:
    RandomStream(uint64_t seed, std::string_view role, uint64_t a = 0, uint64_t b = 0) {
        uint64_t h = detail::fnv1a64(role);
        h = detail::fmix64(h ^ detail::fmix64(seed + 0x9e3779b97f4a7c15ULL));
        h = detail::fmix64(h ^ detail::fmix64(a + 0xbf58476d1ce4e5b9ULL));
        h = detail::fmix64(h ^ detail::fmix64(b + 0x94d049bb133111ebULL));
        state_ = h;
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return detail::fmix64(state_);
    }

    // [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        u1 = u1 < 1e-300 ? 1e-300 : u1;
        double r = std::sqrt(-2.0 * std::log(u1));
        double t = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

    template <typename T>
    void fill_normal(Tensor<T>& t, double scale = 1.0) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(normal() * scale);
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo = 0.0, double hi = 1.0) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(uniform(lo, hi));
    }

private:
    uint64_t state_ = 0;
    double spare_ = 0;
    bool have_spare_ = false;
};

}  // namespace avk
