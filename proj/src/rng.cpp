#include "sdseg/rng.hpp"

#include <cmath>
#include <cstring>

namespace sdseg {
namespace detail {

std::uint64_t mix64(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

// ln(x) for finite x > 0 via frexp range reduction and the atanh series
// ln(m) = 2*(s + s^3/3 + ...), s = (m-1)/(m+1), m in [sqrt(1/2), sqrt(2)).
double portable_log(double x) {
    int e = 0;
    double m = std::frexp(x, &e);  // m in [0.5, 1)
    if (m < 0.70710678118654752440) {
        m *= 2.0;
        e -= 1;
    }
    const double s = (m - 1.0) / (m + 1.0);
    const double s2 = s * s;
    // 12 odd terms cover |s| <= 0.1716 to < 1 ulp
    double acc = 1.0 / 23.0;
    acc = acc * s2 + 1.0 / 21.0;
    acc = acc * s2 + 1.0 / 19.0;
    acc = acc * s2 + 1.0 / 17.0;
    acc = acc * s2 + 1.0 / 15.0;
    acc = acc * s2 + 1.0 / 13.0;
    acc = acc * s2 + 1.0 / 11.0;
    acc = acc * s2 + 1.0 / 9.0;
    acc = acc * s2 + 1.0 / 7.0;
    acc = acc * s2 + 1.0 / 5.0;
    acc = acc * s2 + 1.0 / 3.0;
    acc = acc * s2 + 1.0;
    const double ln2 = 0.69314718055994530942;
    return 2.0 * s * acc + static_cast<double>(e) * ln2;
}

namespace {

const double kPi = 3.14159265358979323846;

// cos(pi*r) for r in [0, 0.5]
double cospi_kernel(double r) {
    const double y2 = (kPi * r) * (kPi * r);
    double acc = -1.0 / 87178291200.0;          // -1/14!
    acc = acc * y2 + 1.0 / 479001600.0;         // 1/12!
    acc = acc * y2 - 1.0 / 3628800.0;           // -1/10!
    acc = acc * y2 + 1.0 / 40320.0;             // 1/8!
    acc = acc * y2 - 1.0 / 720.0;               // -1/6!
    acc = acc * y2 + 1.0 / 24.0;                // 1/4!
    acc = acc * y2 - 1.0 / 2.0;                 // -1/2!
    return acc * y2 + 1.0;
}

// sin(pi*r) for r in [0, 0.5]
double sinpi_kernel(double r) {
    const double y = kPi * r;
    const double y2 = y * y;
    double acc = -1.0 / 1307674368000.0;        // -1/15!
    acc = acc * y2 + 1.0 / 6227020800.0;        // 1/13!
    acc = acc * y2 - 1.0 / 39916800.0;          // -1/11!
    acc = acc * y2 + 1.0 / 362880.0;            // 1/9!
    acc = acc * y2 - 1.0 / 5040.0;              // -1/7!
    acc = acc * y2 + 1.0 / 120.0;               // 1/5!
    acc = acc * y2 - 1.0 / 6.0;                 // -1/3!
    return (acc * y2 + 1.0) * y;
}

}  // namespace

double portable_cospi(double x) {
    double t = x - 2.0 * std::floor(x * 0.5);  // t in [0, 2)
    int q = static_cast<int>(t * 2.0);         // quadrant of length 1/2
    double r = t - 0.5 * q;
    switch (q) {
        case 0: return cospi_kernel(r);
        case 1: return -sinpi_kernel(r);
        case 2: return -cospi_kernel(r);
        default: return sinpi_kernel(r);
    }
}

double portable_sinpi(double x) {
    double t = x - 2.0 * std::floor(x * 0.5);
    int q = static_cast<int>(t * 2.0);
    double r = t - 0.5 * q;
    switch (q) {
        case 0: return sinpi_kernel(r);
        case 1: return cospi_kernel(r);
        case 2: return -sinpi_kernel(r);
        default: return -cospi_kernel(r);
    }
}

}  // namespace detail

namespace {
const std::uint64_t kGoldenGamma = 0x9e3779b97f4a7c15ull;
}

Rng::Rng(std::uint64_t seed) : key_(detail::mix64(seed + kGoldenGamma)), counter_(0) {}

std::uint64_t Rng::next_u64() {
    ++counter_;
    return detail::mix64(key_ + kGoldenGamma * counter_);
}

double Rng::next_unit() {
    // 53 mantissa bits; +1 keeps the value strictly positive for log()
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
}

double Rng::next_normal() {
    const double u1 = next_unit();
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * detail::portable_log(u1));
    return r * detail::portable_cospi(2.0 * u2);
}

Rng Rng::split(std::uint64_t tag) const {
    return Rng(detail::mix64(key_ ^ detail::mix64(tag + kGoldenGamma)), 0);
}

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace sdseg
