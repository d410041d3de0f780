#pragma once

// Named random substreams derived from a single run seed.
//
// Every consumer of randomness asks for derive_seed(root, "name", index...)
// so results never depend on call order, batching, or thread count.

#include <ATen/core/Generator.h>

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace morphldm {

uint64_t splitmix64(uint64_t x);
uint64_t fnv1a64(std::string_view s);

uint64_t derive_seed(uint64_t root, std::string_view stream, std::initializer_list<uint64_t> index = {});

/// CPU generator for torch::randn / torch::randint seeded from a substream.
at::Generator make_generator(uint64_t seed);

/// Portable standard-normal draws (Box-Muller on mt19937_64); std::normal_distribution
/// is implementation-defined.
class NormalStream {
public:
    explicit NormalStream(uint64_t seed) : engine_(seed) {}
    double next();
    double uniform();  // [0, 1)
    uint64_t below(uint64_t bound);  // [0, bound), bound > 0
    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace morphldm
