#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "tubelet/tensor.hpp"

namespace tubelet {

/// Engine seeded from a base seed plus stream identifiers, so independent
/// parts of a run draw from independent, reproducible streams.
std::mt19937_64 make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> streams = {});

/// Tensor of i.i.d. uniform values in [-bound, bound].
Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng);

}  // namespace tubelet
