#include "rpmnet/layers.hpp"

#include <cmath>

namespace rpmnet {

template <typename T>
void kaiming_uniform(Tensor<T>& w, int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w.data()) v = static_cast<T>(uniform_range(rng, -bound, bound));
}

// ---------------------------------------------------------------------------

template <typename T>
Conv2dLayer<T>::Conv2dLayer(std::string name, int cin, int cout, int k, int stride, int pad,
                            Rng& rng)
    : name_(std::move(name)),
      weight_({cout, cin, k, k}),
      bias_({cout}),
      stride_(stride),
      pad_(pad) {
    kaiming_uniform(weight_, static_cast<int64_t>(cin) * k * k, rng);
}

template <typename T>
Tensor<T> Conv2dLayer<T>::forward(FwdCtx<T>& ctx, const Tensor<T>& x) {
    return conv2d(x, ctx.use(weight_), ctx.use(bias_), stride_, pad_);
}

template <typename T>
void Conv2dLayer<T>::params(std::vector<ParamRef<T>>& out) {
    out.push_back({name_ + ".weight", &weight_});
    out.push_back({name_ + ".bias", &bias_});
}

template <typename T>
int Conv2dLayer<T>::out_extent(int in) const {
    return (in + 2 * pad_ - weight_.extent(2)) / stride_ + 1;
}

// ---------------------------------------------------------------------------

template <typename T>
Conv3dLayer<T>::Conv3dLayer(std::string name, int cin, int cout, int k, int stride, int pad,
                            Rng& rng)
    : name_(std::move(name)),
      weight_({cout, cin, k, k, k}),
      bias_({cout}),
      stride_(stride),
      pad_(pad) {
    kaiming_uniform(weight_, static_cast<int64_t>(cin) * k * k * k, rng);
}

template <typename T>
Tensor<T> Conv3dLayer<T>::forward(FwdCtx<T>& ctx, const Tensor<T>& x) {
    return conv3d(x, ctx.use(weight_), ctx.use(bias_), stride_, pad_);
}

template <typename T>
void Conv3dLayer<T>::params(std::vector<ParamRef<T>>& out) {
    out.push_back({name_ + ".weight", &weight_});
    out.push_back({name_ + ".bias", &bias_});
}

// ---------------------------------------------------------------------------

template <typename T>
BatchNormLayer<T>::BatchNormLayer(std::string name, int channels)
    : name_(std::move(name)),
      gamma_(Tensor<T>::full({channels}, T(1))),
      beta_({channels}),
      state_(channels) {}

template <typename T>
Tensor<T> BatchNormLayer<T>::forward(FwdCtx<T>& ctx, const Tensor<T>& x) {
    return batchnorm(x, ctx.use(gamma_), ctx.use(beta_), state_, ctx.mode);
}

template <typename T>
void BatchNormLayer<T>::params(std::vector<ParamRef<T>>& out) {
    out.push_back({name_ + ".gamma", &gamma_});
    out.push_back({name_ + ".beta", &beta_});
}

template <typename T>
void BatchNormLayer<T>::buffers(std::vector<BufferRef<T>>& out) {
    out.push_back({name_ + ".running_mean", &state_.running_mean});
    out.push_back({name_ + ".running_var", &state_.running_var});
}

// ---------------------------------------------------------------------------

template <typename T>
LinearLayer<T>::LinearLayer(std::string name, int in, int out, Rng& rng)
    : name_(std::move(name)), weight_({out, in}), bias_({out}) {
    kaiming_uniform(weight_, in, rng);
}

template <typename T>
Tensor<T> LinearLayer<T>::forward(FwdCtx<T>& ctx, const Tensor<T>& x) {
    return linear(x, ctx.use(weight_), ctx.use(bias_));
}

template <typename T>
void LinearLayer<T>::params(std::vector<ParamRef<T>>& out) {
    out.push_back({name_ + ".weight", &weight_});
    out.push_back({name_ + ".bias", &bias_});
}

// ---------------------------------------------------------------------------

template <typename T>
ResidualBlock2d<T>::ResidualBlock2d(std::string name, int cin, int cout, int k, int stride,
                                    Rng& rng)
    : name_(std::move(name)),
      cout_(cout),
      stride_(stride),
      conv1_(name_ + ".conv1", cin, cout, k, stride, 1, rng),
      bn1_(name_ + ".bn1", cout),
      conv2_(name_ + ".conv2", cout, cout, k, 1, 1, rng),
      bn2_(name_ + ".bn2", cout) {
    if (stride != 1 || cin != cout) {
        skip_.emplace(name_ + ".skip", cin, cout, 1, stride, 0, rng);
    }
}

template <typename T>
Tensor<T> ResidualBlock2d<T>::forward(FwdCtx<T>& ctx, const Tensor<T>& x) {
    Tensor<T> y = bn2_.forward(ctx, conv2_.forward(ctx, relu(bn1_.forward(ctx, conv1_.forward(ctx, x)))));
    Tensor<T> shortcut = skip_ ? skip_->forward(ctx, x) : x;
    return relu(add(y, shortcut));
}

template <typename T>
void ResidualBlock2d<T>::params(std::vector<ParamRef<T>>& out) {
    conv1_.params(out);
    bn1_.params(out);
    conv2_.params(out);
    bn2_.params(out);
    if (skip_) skip_->params(out);
}

template <typename T>
void ResidualBlock2d<T>::buffers(std::vector<BufferRef<T>>& out) {
    bn1_.buffers(out);
    bn2_.buffers(out);
}

template <typename T>
int ResidualBlock2d<T>::out_extent(int in) const {
    return conv1_.out_extent(in);
}

template class Conv2dLayer<float>;
template class Conv2dLayer<double>;
template class Conv3dLayer<float>;
template class Conv3dLayer<double>;
template class BatchNormLayer<float>;
template class BatchNormLayer<double>;
template class LinearLayer<float>;
template class LinearLayer<double>;
template class ResidualBlock2d<float>;
template class ResidualBlock2d<double>;
template void kaiming_uniform<float>(Tensor<float>&, int64_t, Rng&);
template void kaiming_uniform<double>(Tensor<double>&, int64_t, Rng&);

}  // namespace rpmnet
