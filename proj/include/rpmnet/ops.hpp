#pragma once

#include <vector>

#include "rpmnet/tensor.hpp"

// Differentiable primitives. Every op is a pure function of its inputs;
// when an input is bound to a graph the result is recorded there with a
// backward closure. Convolutions use cross-correlation semantics (no
// kernel flip) and zero padding.

namespace rpmnet {

// x:(b,cin,h,w), weight:(cout,cin,kh,kw), bias:(cout) ->
// (b,cout,h',w') with h' = floor((h + 2p - kh)/s) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int pad);

// x:(b,cin,d,h,w), weight:(cout,cin,kd,kh,kw), bias:(cout).
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int pad);

// Running statistics of one batchnorm site. Channel axis is axis 1.
template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;  // initialized to 0
    std::vector<T> running_var;   // initialized to 1

    explicit BatchNormState(int channels = 0)
        : running_mean(static_cast<size_t>(channels), T(0)),
          running_var(static_cast<size_t>(channels), T(1)) {}
};

// Train mode normalizes by batch statistics over all non-channel dims and
// updates `state` by exponential moving average; eval mode normalizes by
// the running statistics. Differentiable w.r.t. x, gamma, beta.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormState<T>& state, Mode mode, T eps = T(1e-5), T momentum = T(0.1));

// Per-window maximum with -inf padding. Backward routes the gradient to
// the first argmax element in row-major window order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride, int pad);

// Mean over the listed dims, which are removed from the shape.
// An empty dims list is the identity.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x, const std::vector<int>& dims);

// x:(b,n), weight:(m,n), bias:(m) -> (b,m).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

// Element-wise mean of one or more identically shaped tensors.
template <typename T>
Tensor<T> mean_of_list(const std::vector<Tensor<T>>& xs);

// Sum of all elements, as a scalar tensor.
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// perm[i] = input axis that becomes output axis i.
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int dim);

// Mean over elements of -[pos_weight*y*ln p + (1-y)*ln(1-p)], with p
// clamped to [1e-7, 1-1e-7]. y must be exactly 0 or 1 everywhere.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& p, const Tensor<T>& y, T pos_weight = T(1));

}  // namespace rpmnet
