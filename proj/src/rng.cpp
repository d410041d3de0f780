#include "morphldm/rng.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <numbers>

namespace morphldm {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t derive_seed(uint64_t root, std::string_view stream, std::initializer_list<uint64_t> index) {
    uint64_t h = splitmix64(root ^ fnv1a64(stream));
    for (uint64_t i : index) h = splitmix64(h ^ splitmix64(i + 0x632be59bd9b4e019ULL));
    return h;
}

at::Generator make_generator(uint64_t seed) { return at::detail::createCPUGenerator(seed); }

double NormalStream::next() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

double NormalStream::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

uint64_t NormalStream::below(uint64_t bound) {
    // Rejection keeps the draw unbiased.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t x = 0;
    do {
        x = engine_();
    } while (x >= limit);
    return x % bound;
}

}  // namespace morphldm
