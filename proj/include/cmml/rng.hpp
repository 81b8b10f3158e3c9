#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "cmml/tensor.hpp"

namespace cmml {

// splitmix64: cheap stateless expansion of a 64-bit seed into a stream.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Deterministic RNG wrapper. normal() uses an explicit Box-Muller transform
// (drawing exactly two uniforms, no cached spare) so the draw sequence is
// fully determined by the engine state and serializes with it.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // [0,1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    long long uniform_int(long long lo, long long hi) {
        CMML_CHECK(hi >= lo, "uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        // modulo bias is negligible for desk-scale spans (<< 2^64)
        return lo + static_cast<long long>(eng_() % span);
    }

    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 5e-324;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    void fill_normal(Tensor& t, double stddev) {
        for (long long i = 0; i < t.numel(); ++i) t[i] = stddev * normal();
    }

    void fill_uniform(Tensor& t, double lo, double hi) {
        for (long long i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
    }

    bool bernoulli(double p) { return uniform() < p; }

    std::string serialize() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        CMML_CHECK(!is.fail(), "Rng::deserialize: bad state string");
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace cmml
