#pragma once

#include <functional>
#include <vector>

#include "rpmnet/rng.hpp"
#include "rpmnet/tensor.hpp"

namespace rpmnet {

// Scalar-valued function under test: binds its inputs to the given graph
// and returns a scalar on that graph.
using GradCheckFn =
    std::function<Tensor<double>(Graph<double>&, const std::vector<Tensor<double>>&)>;

struct GradCheckOptions {
    double h = 1e-5;
    // When > 0, check at most this many randomly chosen coordinates per
    // input tensor instead of all of them (seeded, deterministic).
    int max_coords_per_tensor = 0;
    uint64_t coord_seed = 0;
};

// Compares reverse-mode gradients of f against central finite differences
// at 64-bit precision. Returns the maximum over checked coordinates of
// |a - n| / max(|a|, |n|, 1e-8).
double grad_check(const GradCheckFn& f, const std::vector<Tensor<double>>& inputs,
                  const GradCheckOptions& opts = {});

}  // namespace rpmnet
