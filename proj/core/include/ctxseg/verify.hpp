#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ctxseg/numerics.hpp"

namespace ctxseg {

// Finite-difference checks of every trainable operation on small random
// shapes, in 64-bit. Each case builds a scalar loss (a random weighting of the
// operation's output, or cross-entropy) and runs grad_check over all of its
// parameters.
struct GradCase {
  std::string name;
  GradReport report;
};

std::vector<GradCase> gradcheck_suite(std::uint64_t seed, double h = 1e-6);

inline constexpr double kGradCheckTolerance = 1e-5;

}  // namespace ctxseg
