#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rpmnet/tensor.hpp"

namespace rpmnet {

template <typename T>
struct AdamHyper {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

// Per-parameter first/second moments plus the shared step counter.
template <typename T>
struct AdamState {
    AdamHyper<T> hyper;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    int64_t t = 0;
    int64_t rejected = 0;  // parameter groups skipped for non-finite gradients

    // Called with a diagnostic when a group's update is rejected.
    std::function<void(const std::string&)> on_reject;

    AdamState() = default;
    explicit AdamState(AdamHyper<T> h) : hyper(h) {}
};

// One bias-corrected update over a parameter list. Parameter tensors are
// updated in place. A group whose gradient contains a non-finite value is
// skipped (the step counter still advances once per call).
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params,
               const std::vector<std::vector<T>>& grads, AdamState<T>& state);

extern template void adam_step<float>(const std::vector<Tensor<float>*>&,
                                      const std::vector<std::vector<float>>&, AdamState<float>&);
extern template void adam_step<double>(const std::vector<Tensor<double>*>&,
                                       const std::vector<std::vector<double>>&, AdamState<double>&);

}  // namespace rpmnet
