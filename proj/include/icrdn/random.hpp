#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <initializer_list>

namespace icrdn {

/// SplitMix64 finaliser; a bijection on 64-bit words.
constexpr auto mix64(std::uint64_t x) -> std::uint64_t {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Independent stream seed for a tagged sub-task of a run.
inline auto derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) -> std::uint64_t {
    std::uint64_t h = mix64(base);
    for (auto tag : tags) {
        h = mix64(h ^ mix64(tag));
    }
    return h;
}

/// CPU generator seeded for one call; streams are never shared between calls.
inline auto make_generator(std::uint64_t seed) -> torch::Generator {
    return at::make_generator<at::CPUGeneratorImpl>(seed);
}

}  // namespace icrdn
