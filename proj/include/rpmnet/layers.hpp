#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rpmnet/ops.hpp"
#include "rpmnet/rng.hpp"
#include "rpmnet/tensor.hpp"

// Parameterized layers over the primitives in ops.hpp. Layers own their
// parameters as plain tensors; during a differentiable forward pass they
// bind them to the context's graph. Parameter registration follows
// construction order, which fixes the checkpoint layout.

namespace rpmnet {

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* tensor;
};

// Non-trainable state (batchnorm running statistics). Saved in checkpoints,
// excluded from parameter counts and the optimizer.
template <typename T>
struct BufferRef {
    std::string name;
    std::vector<T>* values;
};

struct TraceEntry {
    std::string name;
    Shape shape;
    int multiplicity = 1;
};

// Per-forward context: the recording graph (null for pure inference),
// train/eval mode, and an optional shape-trace sink.
template <typename T>
struct FwdCtx {
    Graph<T>* graph = nullptr;
    Mode mode = Mode::kEval;
    std::vector<TraceEntry>* trace = nullptr;

    Tensor<T> use(Tensor<T>& p) { return graph ? graph->leaf(p) : p.detached(); }

    void record(const std::string& name, const Shape& shape, int multiplicity = 1) {
        if (trace) trace->push_back({name, shape, multiplicity});
    }
};

// Uniform Kaiming fill with ReLU gain: U(-b, b), b = sqrt(6 / fan_in).
template <typename T>
void kaiming_uniform(Tensor<T>& w, int64_t fan_in, Rng& rng);

template <typename T>
class Conv2dLayer {
public:
    Conv2dLayer(std::string name, int cin, int cout, int k, int stride, int pad, Rng& rng);

    Tensor<T> forward(FwdCtx<T>& ctx, const Tensor<T>& x);
    void params(std::vector<ParamRef<T>>& out);
    int out_extent(int in) const;
    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }

private:
    std::string name_;
    Tensor<T> weight_, bias_;
    int stride_, pad_;
};

template <typename T>
class Conv3dLayer {
public:
    Conv3dLayer(std::string name, int cin, int cout, int k, int stride, int pad, Rng& rng);

    Tensor<T> forward(FwdCtx<T>& ctx, const Tensor<T>& x);
    void params(std::vector<ParamRef<T>>& out);
    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }

private:
    std::string name_;
    Tensor<T> weight_, bias_;
    int stride_, pad_;
};

template <typename T>
class BatchNormLayer {
public:
    BatchNormLayer(std::string name, int channels);

    Tensor<T> forward(FwdCtx<T>& ctx, const Tensor<T>& x);
    void params(std::vector<ParamRef<T>>& out);
    void buffers(std::vector<BufferRef<T>>& out);

private:
    std::string name_;
    Tensor<T> gamma_, beta_;
    BatchNormState<T> state_;
};

template <typename T>
class LinearLayer {
public:
    LinearLayer(std::string name, int in, int out, Rng& rng);

    Tensor<T> forward(FwdCtx<T>& ctx, const Tensor<T>& x);
    void params(std::vector<ParamRef<T>>& out);

private:
    std::string name_;
    Tensor<T> weight_, bias_;
};

// conv(k,s,p=1) + BN + ReLU + conv(k,1,p=1) + BN, skip through a 1x1
// stride-s conv when the shape changes, add, ReLU.
template <typename T>
class ResidualBlock2d {
public:
    ResidualBlock2d(std::string name, int cin, int cout, int k, int stride, Rng& rng);

    Tensor<T> forward(FwdCtx<T>& ctx, const Tensor<T>& x);
    void params(std::vector<ParamRef<T>>& out);
    void buffers(std::vector<BufferRef<T>>& out);
    int out_extent(int in) const;
    int out_channels() const { return cout_; }

private:
    std::string name_;
    int cout_, stride_;
    Conv2dLayer<T> conv1_;
    BatchNormLayer<T> bn1_;
    Conv2dLayer<T> conv2_;
    BatchNormLayer<T> bn2_;
    std::optional<Conv2dLayer<T>> skip_;
};

extern template class Conv2dLayer<float>;
extern template class Conv2dLayer<double>;
extern template class Conv3dLayer<float>;
extern template class Conv3dLayer<double>;
extern template class BatchNormLayer<float>;
extern template class BatchNormLayer<double>;
extern template class LinearLayer<float>;
extern template class LinearLayer<double>;
extern template class ResidualBlock2d<float>;
extern template class ResidualBlock2d<double>;
extern template void kaiming_uniform<float>(Tensor<float>&, int64_t, Rng&);
extern template void kaiming_uniform<double>(Tensor<double>&, int64_t, Rng&);

}  // namespace rpmnet
