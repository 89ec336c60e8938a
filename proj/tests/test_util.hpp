#pragma once

#include <vector>

#include "rpmnet/rng.hpp"
#include "rpmnet/tensor.hpp"

namespace testutil {

template <typename T>
rpmnet::Tensor<T> rand_tensor(rpmnet::Shape shape, rpmnet::Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
    rpmnet::Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rpmnet::uniform_range(rng, lo, hi));
    return t;
}

template <typename T>
bool all_close(const std::vector<T>& a, const std::vector<T>& b, double tol) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])) > tol) return false;
    }
    return true;
}

template <typename T>
bool bit_equal(const std::vector<T>& a, const std::vector<T>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) return false;
    }
    return true;
}

}  // namespace testutil
