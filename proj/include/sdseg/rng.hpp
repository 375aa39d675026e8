#pragma once

#include <cstdint>

namespace sdseg {

// Counter-based random stream.
//
// Generator: output_i = splitmix64_finalizer(key + GOLDEN_GAMMA * i), i.e. the
// SplitMix64 sequence evaluated as a pure function of (key, counter). Identical
// seeds give identical streams on every platform; split() derives statistically
// independent child streams from (key, tag) without consuming parent state.
// Normal variates use Box-Muller with portable log/cos kernels (pure IEEE
// arithmetic, no libm), so streams are bit-stable across C libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    // uniform in (0, 1]
    double next_unit();
    // standard normal, consumes two counter steps
    double next_normal();

    Rng split(std::uint64_t tag) const;

    std::uint64_t key() const { return key_; }
    std::uint64_t counter() const { return counter_; }

private:
    Rng(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

namespace detail {
// deterministic elementary kernels used by Rng (exposed for tests)
double portable_log(double x);
double portable_cospi(double x);   // cos(pi*x)
double portable_sinpi(double x);   // sin(pi*x)
std::uint64_t mix64(std::uint64_t x);
}  // namespace detail

// FNV-1a over raw bytes; used for parameter/config fingerprints.
std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace sdseg
