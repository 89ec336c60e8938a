// Pointwise, pooling, normalization, shape and loss primitives.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "rpmnet/ops.hpp"

namespace rpmnet {

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!same_shape(a.shape(), b.shape())) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

Shape drop_axes(const Shape& in, const std::vector<int>& dims) {
    Shape out;
    for (int a = 0; a < static_cast<int>(in.size()); ++a) {
        if (std::find(dims.begin(), dims.end(), a) == dims.end()) out.push_back(in[static_cast<size_t>(a)]);
    }
    return out;
}

std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
        st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
    }
    return st;
}

}  // namespace

// ---------------------------------------------------------------------------
// batchnorm

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormState<T>& state, Mode mode, T eps, T momentum) {
    if (x.rank() < 2) throw ShapeError("batchnorm: input must have a channel axis, got " + shape_str(x.shape()));
    const int channels = x.extent(1);
    if (gamma.rank() != 1 || gamma.extent(0) != channels || beta.rank() != 1 || beta.extent(0) != channels) {
        throw ShapeError("batchnorm: gamma/beta must be (" + std::to_string(channels) + "), got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    }
    if (state.running_mean.empty()) state = BatchNormState<T>(channels);
    if (static_cast<int>(state.running_mean.size()) != channels) {
        throw ShapeError("batchnorm: state has " + std::to_string(state.running_mean.size()) +
                         " channels, input has " + std::to_string(channels));
    }

    const int batch = x.extent(0);
    int64_t inner = 1;
    for (int a = 2; a < x.rank(); ++a) inner *= x.extent(a);
    const int64_t per_channel = static_cast<int64_t>(batch) * inner;

    std::vector<T> mean(static_cast<size_t>(channels), T(0));
    std::vector<T> invstd(static_cast<size_t>(channels), T(0));
    const std::vector<T>& xd = x.data();

    if (mode == Mode::kTrain) {
        std::vector<T> var(static_cast<size_t>(channels), T(0));
        for (int c = 0; c < channels; ++c) {
            T s = T(0);
            for (int b = 0; b < batch; ++b) {
                const T* p = xd.data() + (static_cast<int64_t>(b) * channels + c) * inner;
                for (int64_t i = 0; i < inner; ++i) s += p[i];
            }
            const T m = s / static_cast<T>(per_channel);
            T v = T(0);
            for (int b = 0; b < batch; ++b) {
                const T* p = xd.data() + (static_cast<int64_t>(b) * channels + c) * inner;
                for (int64_t i = 0; i < inner; ++i) {
                    const T d = p[i] - m;
                    v += d * d;
                }
            }
            v /= static_cast<T>(per_channel);
            mean[static_cast<size_t>(c)] = m;
            var[static_cast<size_t>(c)] = v;
            invstd[static_cast<size_t>(c)] = T(1) / std::sqrt(v + eps);

            // EMA update; running variance uses the unbiased estimate.
            const T unbiased = per_channel > 1 ? v * static_cast<T>(per_channel) / static_cast<T>(per_channel - 1) : v;
            state.running_mean[static_cast<size_t>(c)] =
                (T(1) - momentum) * state.running_mean[static_cast<size_t>(c)] + momentum * m;
            state.running_var[static_cast<size_t>(c)] =
                (T(1) - momentum) * state.running_var[static_cast<size_t>(c)] + momentum * unbiased;
        }
    } else {
        for (int c = 0; c < channels; ++c) {
            mean[static_cast<size_t>(c)] = state.running_mean[static_cast<size_t>(c)];
            invstd[static_cast<size_t>(c)] = T(1) / std::sqrt(state.running_var[static_cast<size_t>(c)] + eps);
        }
    }

    std::vector<T> out(xd.size());
    const std::vector<T>& gd = gamma.data();
    const std::vector<T>& bd = beta.data();
    for (int b = 0; b < batch; ++b) {
        for (int c = 0; c < channels; ++c) {
            const int64_t base = (static_cast<int64_t>(b) * channels + c) * inner;
            const T m = mean[static_cast<size_t>(c)], is = invstd[static_cast<size_t>(c)];
            const T ga = gd[static_cast<size_t>(c)], be = bd[static_cast<size_t>(c)];
            for (int64_t i = 0; i < inner; ++i) {
                out[static_cast<size_t>(base + i)] = (xd[static_cast<size_t>(base + i)] - m) * is * ga + be;
            }
        }
    }

    Graph<T>* g = common_graph<T>({&x, &gamma, &beta});
    if (!g) return Tensor<T>(x.shape(), std::move(out));

    const int xn = x.node(), gn = gamma.node(), bn = beta.node();
    auto xs = x.storage();
    auto gs = gamma.storage();
    const bool train = (mode == Mode::kTrain);
    return g->record(
        x.shape(), std::move(out),
        [=](Graph<T>& gg, int self) {
            const std::vector<T>& go = gg.grad_of(self);
            const std::vector<T>& xv = *xs;
            for (int c = 0; c < channels; ++c) {
                const T m = mean[static_cast<size_t>(c)], is = invstd[static_cast<size_t>(c)];
                const T ga = (*gs)[static_cast<size_t>(c)];
                // Per-channel reductions of the incoming gradient.
                T sum_go = T(0), sum_go_xhat = T(0);
                for (int b = 0; b < batch; ++b) {
                    const int64_t base = (static_cast<int64_t>(b) * channels + c) * inner;
                    for (int64_t i = 0; i < inner; ++i) {
                        const T gi = go[static_cast<size_t>(base + i)];
                        sum_go += gi;
                        sum_go_xhat += gi * (xv[static_cast<size_t>(base + i)] - m) * is;
                    }
                }
                if (gn >= 0) gg.grad_buf(gn)[static_cast<size_t>(c)] += sum_go_xhat;
                if (bn >= 0) gg.grad_buf(bn)[static_cast<size_t>(c)] += sum_go;
                if (xn >= 0) {
                    std::vector<T>& gx = gg.grad_buf(xn);
                    if (train) {
                        const T inv_n = T(1) / static_cast<T>(per_channel);
                        for (int b = 0; b < batch; ++b) {
                            const int64_t base = (static_cast<int64_t>(b) * channels + c) * inner;
                            for (int64_t i = 0; i < inner; ++i) {
                                const T xhat = (xv[static_cast<size_t>(base + i)] - m) * is;
                                gx[static_cast<size_t>(base + i)] +=
                                    ga * is *
                                    (go[static_cast<size_t>(base + i)] - inv_n * sum_go - xhat * inv_n * sum_go_xhat);
                            }
                        }
                    } else {
                        for (int b = 0; b < batch; ++b) {
                            const int64_t base = (static_cast<int64_t>(b) * channels + c) * inner;
                            for (int64_t i = 0; i < inner; ++i) {
                                gx[static_cast<size_t>(base + i)] += go[static_cast<size_t>(base + i)] * ga * is;
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// pooling

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride, int pad) {
    if (x.rank() != 4) throw ShapeError("maxpool2d: input must be (b,c,h,w), got " + shape_str(x.shape()));
    if (k < 1 || stride < 1 || pad < 0) throw ValueError("maxpool2d: require k,stride >= 1 and pad >= 0");
    if (pad >= k) throw ValueError("maxpool2d: pad must be < k so every window sees real data");
    const int bsz = x.extent(0), ch = x.extent(1), h = x.extent(2), w = x.extent(3);
    if (k > h + 2 * pad || k > w + 2 * pad) {
        throw ShapeError("maxpool2d: window " + std::to_string(k) + " larger than padded input " +
                         shape_str(x.shape()) + " with pad " + std::to_string(pad));
    }
    const int oh = (h + 2 * pad - k) / stride + 1;
    const int ow = (w + 2 * pad - k) / stride + 1;

    const std::vector<T>& xd = x.data();
    std::vector<T> out(static_cast<size_t>(bsz) * ch * oh * ow);
    auto argmax = std::make_shared<std::vector<int64_t>>(out.size());

    int64_t o = 0;
    for (int b = 0; b < bsz; ++b) {
        for (int c = 0; c < ch; ++c) {
            const int64_t plane = (static_cast<int64_t>(b) * ch + c) * h * w;
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox, ++o) {
                    T best = -std::numeric_limits<T>::infinity();
                    int64_t best_idx = -1;
                    for (int ki = 0; ki < k; ++ki) {
                        const int iy = oy * stride - pad + ki;
                        if (iy < 0 || iy >= h) continue;
                        for (int kj = 0; kj < k; ++kj) {
                            const int ix = ox * stride - pad + kj;
                            if (ix < 0 || ix >= w) continue;
                            const T v = xd[static_cast<size_t>(plane + static_cast<int64_t>(iy) * w + ix)];
                            if (v > best) {  // first occurrence wins ties
                                best = v;
                                best_idx = plane + static_cast<int64_t>(iy) * w + ix;
                            }
                        }
                    }
                    out[static_cast<size_t>(o)] = best;
                    (*argmax)[static_cast<size_t>(o)] = best_idx;
                }
            }
        }
    }

    Graph<T>* g = common_graph<T>({&x});
    Shape oshape{bsz, ch, oh, ow};
    if (!g) return Tensor<T>(std::move(oshape), std::move(out));

    const int xn = x.node();
    return g->record(std::move(oshape), std::move(out), [xn, argmax](Graph<T>& gg, int self) {
        if (xn < 0) return;
        const std::vector<T>& go = gg.grad_of(self);
        std::vector<T>& gx = gg.grad_buf(xn);
        for (size_t i = 0; i < go.size(); ++i) {
            gx[static_cast<size_t>((*argmax)[i])] += go[i];
        }
    });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x, const std::vector<int>& dims) {
    if (dims.empty()) return x;
    std::vector<int> sorted = dims;
    std::sort(sorted.begin(), sorted.end());
    for (size_t i = 0; i < sorted.size(); ++i) {
        if (sorted[i] < 0 || sorted[i] >= x.rank()) {
            throw ShapeError("global_avg_pool: dim " + std::to_string(sorted[i]) + " out of range for " +
                             shape_str(x.shape()));
        }
        if (i > 0 && sorted[i] == sorted[i - 1]) throw ValueError("global_avg_pool: duplicate dim");
    }

    const Shape& in_shape = x.shape();
    Shape oshape = drop_axes(in_shape, sorted);
    if (oshape.empty()) oshape = {1};

    // out_stride[a] is the contribution of input axis a to the output index
    // (0 for reduced axes).
    std::vector<int64_t> out_stride(in_shape.size(), 0);
    {
        int64_t stride = 1;
        for (int a = static_cast<int>(in_shape.size()) - 1; a >= 0; --a) {
            if (std::find(sorted.begin(), sorted.end(), a) == sorted.end()) {
                out_stride[static_cast<size_t>(a)] = stride;
                stride *= in_shape[static_cast<size_t>(a)];
            }
        }
    }

    int64_t reduce_count = 1;
    for (int a : sorted) reduce_count *= in_shape[static_cast<size_t>(a)];

    const std::vector<T>& xd = x.data();
    std::vector<T> out(static_cast<size_t>(numel(oshape)), T(0));
    auto out_index = std::make_shared<std::vector<int64_t>>(xd.size());

    std::vector<int> idx(in_shape.size(), 0);
    for (size_t i = 0; i < xd.size(); ++i) {
        int64_t oi = 0;
        for (size_t a = 0; a < in_shape.size(); ++a) oi += idx[a] * out_stride[a];
        out[static_cast<size_t>(oi)] += xd[i];
        (*out_index)[i] = oi;
        for (int a = static_cast<int>(in_shape.size()) - 1; a >= 0; --a) {
            if (++idx[static_cast<size_t>(a)] < in_shape[static_cast<size_t>(a)]) break;
            idx[static_cast<size_t>(a)] = 0;
        }
    }
    const T inv = T(1) / static_cast<T>(reduce_count);
    for (auto& v : out) v *= inv;

    Graph<T>* g = common_graph<T>({&x});
    if (!g) return Tensor<T>(std::move(oshape), std::move(out));

    const int xn = x.node();
    return g->record(std::move(oshape), std::move(out), [xn, out_index, inv](Graph<T>& gg, int self) {
        if (xn < 0) return;
        const std::vector<T>& go = gg.grad_of(self);
        std::vector<T>& gx = gg.grad_buf(xn);
        for (size_t i = 0; i < gx.size(); ++i) {
            gx[i] += go[static_cast<size_t>((*out_index)[i])] * inv;
        }
    });
}

// ---------------------------------------------------------------------------
// pointwise

namespace {

// Shared recorder for unary pointwise ops whose backward is a pointwise
// factor of saved forward values.
template <typename T, typename FwdF, typename BwdF>
Tensor<T> unary_pointwise(const Tensor<T>& x, FwdF fwd, BwdF bwd_factor) {
    const std::vector<T>& xd = x.data();
    std::vector<T> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);

    Graph<T>* g = common_graph<T>({&x});
    if (!g) return Tensor<T>(x.shape(), std::move(out));

    const int xn = x.node();
    auto xs = x.storage();
    auto os = std::make_shared<std::vector<T>>(std::move(out));
    return g->record_view(x.shape(), os, [xn, xs, os, bwd_factor](Graph<T>& gg, int self) {
        if (xn < 0) return;
        const std::vector<T>& go = gg.grad_of(self);
        std::vector<T>& gx = gg.grad_buf(xn);
        for (size_t i = 0; i < go.size(); ++i) {
            gx[i] += go[i] * bwd_factor((*xs)[i], (*os)[i]);
        }
    });
}

}  // namespace

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    const std::vector<T>& xd = x.data();
    std::vector<T> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);

    Graph<T>* g = common_graph<T>({&x});
    if (!g) return Tensor<T>(x.shape(), std::move(out));
    const int xn = x.node();
    auto xs = x.storage();
    return g->record(x.shape(), std::move(out), [xn, xs](Graph<T>& gg, int self) {
        if (xn < 0) return;
        const std::vector<T>& go = gg.grad_of(self);
        std::vector<T>& gx = gg.grad_buf(xn);
        for (size_t i = 0; i < go.size(); ++i) {
            if ((*xs)[i] > T(0)) gx[i] += go[i];  // subgradient 0 at the kink
        }
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    const std::vector<T>& xd = x.data();
    std::vector<T> out(xd.size());
    for (size_t i = 0; i < xd.size(); ++i) {
        const T v = xd[i];
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }

    Graph<T>* g = common_graph<T>({&x});
    if (!g) return Tensor<T>(x.shape(), std::move(out));
    const int xn = x.node();
    auto os = std::make_shared<std::vector<T>>(std::move(out));
    return g->record_view(x.shape(), os, [xn, os](Graph<T>& gg, int self) {
        if (xn < 0) return;
        const std::vector<T>& go = gg.grad_of(self);
        std::vector<T>& gx = gg.grad_buf(xn);
        for (size_t i = 0; i < go.size(); ++i) {
            const T s = (*os)[i];
            gx[i] += go[i] * s * (T(1) - s);
        }
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    const std::vector<T>& ad = a.data();
    const std::vector<T>& bd = b.data();
    std::vector<T> out(ad.size());
    for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[i];

    Graph<T>* g = common_graph<T>({&a, &b});
    if (!g) return Tensor<T>(a.shape(), std::move(out));
    const int an = a.node(), bn = b.node();
    return g->record(a.shape(), std::move(out), [an, bn](Graph<T>& gg, int self) {
        const std::vector<T>& go = gg.grad_of(self);
        if (an >= 0) {
            std::vector<T>& ga = gg.grad_buf(an);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (bn >= 0) {
            std::vector<T>& gb = gg.grad_buf(bn);
            for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    const std::vector<T>& ad = a.data();
    const std::vector<T>& bd = b.data();
    std::vector<T> out(ad.size());
    for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] - bd[i];

    Graph<T>* g = common_graph<T>({&a, &b});
    if (!g) return Tensor<T>(a.shape(), std::move(out));
    const int an = a.node(), bn = b.node();
    return g->record(a.shape(), std::move(out), [an, bn](Graph<T>& gg, int self) {
        const std::vector<T>& go = gg.grad_of(self);
        if (an >= 0) {
            std::vector<T>& ga = gg.grad_buf(an);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
        if (bn >= 0) {
            std::vector<T>& gb = gg.grad_buf(bn);
            for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    const std::vector<T>& ad = a.data();
    const std::vector<T>& bd = b.data();
    std::vector<T> out(ad.size());
    for (size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i];

    Graph<T>* g = common_graph<T>({&a, &b});
    if (!g) return Tensor<T>(a.shape(), std::move(out));
    const int an = a.node(), bn = b.node();
    auto as = a.storage();
    auto bs = b.storage();
    return g->record(a.shape(), std::move(out), [an, bn, as, bs](Graph<T>& gg, int self) {
        const std::vector<T>& go = gg.grad_of(self);
        if (an >= 0) {
            std::vector<T>& ga = gg.grad_buf(an);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (*bs)[i];
        }
        if (bn >= 0) {
            std::vector<T>& gb = gg.grad_buf(bn);
            for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * (*as)[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    return unary_pointwise(
        x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> mean_of_list(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw ValueError("mean_of_list: need at least one tensor");
    for (const auto& t : xs) require_same_shape(xs[0], t, "mean_of_list");
    const size_t n = xs[0].data().size();
    std::vector<T> out(n, T(0));
    for (const auto& t : xs) {
        const std::vector<T>& d = t.data();
        for (size_t i = 0; i < n; ++i) out[i] += d[i];
    }
    const T inv = T(1) / static_cast<T>(xs.size());
    for (auto& v : out) v *= inv;

    Graph<T>* g = nullptr;
    for (const auto& t : xs) {
        Graph<T>* tg = common_graph<T>({&t});
        if (tg) {
            if (g && g != tg) throw ValueError("mean_of_list: operands belong to different graphs");
            g = tg;
        }
    }
    if (!g) return Tensor<T>(xs[0].shape(), std::move(out));

    std::vector<int> nodes;
    nodes.reserve(xs.size());
    for (const auto& t : xs) nodes.push_back(t.graph() == g ? t.node() : -1);
    return g->record(xs[0].shape(), std::move(out), [nodes, inv](Graph<T>& gg, int self) {
        const std::vector<T>& go = gg.grad_of(self);
        for (int nd : nodes) {
            if (nd < 0) continue;
            std::vector<T>& gi = gg.grad_buf(nd);
            for (size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * inv;
        }
    });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    const std::vector<T>& xd = x.data();
    T s = T(0);
    for (T v : xd) s += v;

    Graph<T>* g = common_graph<T>({&x});
    if (!g) return Tensor<T>::scalar(s);
    const int xn = x.node();
    const int64_t n = x.size();
    return g->record({1}, {s}, [xn, n](Graph<T>& gg, int self) {
        if (xn < 0) return;
        const T go = gg.grad_of(self)[0];
        std::vector<T>& gx = gg.grad_buf(xn);
        for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += go;
    });
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape) +
                         " (element counts differ)");
    }
    Graph<T>* g = common_graph<T>({&x});
    if (!g) {
        Tensor<T> t = x.detached();
        return Tensor<T>(std::move(shape), std::vector<T>(t.data()));
    }
    const int xn = x.node();
    return g->record_view(std::move(shape), x.storage(), [xn](Graph<T>& gg, int self) {
        if (xn < 0) return;
        const std::vector<T>& go = gg.grad_of(self);
        std::vector<T>& gx = gg.grad_buf(xn);
        for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) {
        throw ShapeError("permute: perm has " + std::to_string(perm.size()) + " axes, tensor has " +
                         std::to_string(r));
    }
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int a : perm) {
        if (a < 0 || a >= r || seen[static_cast<size_t>(a)]) throw ValueError("permute: not a valid permutation");
        seen[static_cast<size_t>(a)] = true;
    }

    Shape oshape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) oshape[static_cast<size_t>(i)] = x.extent(perm[static_cast<size_t>(i)]);

    // dst_stride[a] = stride of input axis a in the output layout.
    const std::vector<int64_t> ost = row_major_strides(oshape);
    std::vector<int64_t> dst_stride(static_cast<size_t>(r), 0);
    for (int i = 0; i < r; ++i) dst_stride[static_cast<size_t>(perm[static_cast<size_t>(i)])] = ost[static_cast<size_t>(i)];

    const Shape& in_shape = x.shape();
    const std::vector<T>& xd = x.data();
    std::vector<T> out(xd.size());
    auto mapping = std::make_shared<std::vector<int64_t>>(xd.size());
    std::vector<int> idx(static_cast<size_t>(r), 0);
    for (size_t i = 0; i < xd.size(); ++i) {
        int64_t oi = 0;
        for (int a = 0; a < r; ++a) oi += idx[static_cast<size_t>(a)] * dst_stride[static_cast<size_t>(a)];
        out[static_cast<size_t>(oi)] = xd[i];
        (*mapping)[i] = oi;
        for (int a = r - 1; a >= 0; --a) {
            if (++idx[static_cast<size_t>(a)] < in_shape[static_cast<size_t>(a)]) break;
            idx[static_cast<size_t>(a)] = 0;
        }
    }

    Graph<T>* g = common_graph<T>({&x});
    if (!g) return Tensor<T>(std::move(oshape), std::move(out));
    const int xn = x.node();
    return g->record(std::move(oshape), std::move(out), [xn, mapping](Graph<T>& gg, int self) {
        if (xn < 0) return;
        const std::vector<T>& go = gg.grad_of(self);
        std::vector<T>& gx = gg.grad_buf(xn);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[static_cast<size_t>((*mapping)[i])];
    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int dim) {
    if (xs.empty()) throw ValueError("concat: need at least one tensor");
    const int r = xs[0].rank();
    if (dim < 0 || dim >= r) throw ShapeError("concat: dim " + std::to_string(dim) + " out of range");
    int total = 0;
    for (const auto& t : xs) {
        if (t.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int a = 0; a < r; ++a) {
            if (a != dim && t.extent(a) != xs[0].extent(a)) {
                throw ShapeError("concat: non-concat extents differ, " + shape_str(xs[0].shape()) +
                                 " vs " + shape_str(t.shape()));
            }
        }
        total += t.extent(dim);
    }

    Shape oshape = xs[0].shape();
    oshape[static_cast<size_t>(dim)] = total;

    int64_t outer = 1, inner = 1;
    for (int a = 0; a < dim; ++a) outer *= xs[0].extent(a);
    for (int a = dim + 1; a < r; ++a) inner *= xs[0].extent(a);

    std::vector<T> out(static_cast<size_t>(numel(oshape)));
    const int64_t out_row = static_cast<int64_t>(total) * inner;
    int64_t offset = 0;
    for (const auto& t : xs) {
        const int64_t block = static_cast<int64_t>(t.extent(dim)) * inner;
        const std::vector<T>& td = t.data();
        for (int64_t ou = 0; ou < outer; ++ou) {
            std::copy(td.begin() + ou * block, td.begin() + (ou + 1) * block,
                      out.begin() + ou * out_row + offset);
        }
        offset += block;
    }

    Graph<T>* g = nullptr;
    for (const auto& t : xs) {
        Graph<T>* tg = common_graph<T>({&t});
        if (tg) {
            if (g && g != tg) throw ValueError("concat: operands belong to different graphs");
            g = tg;
        }
    }
    if (!g) return Tensor<T>(std::move(oshape), std::move(out));

    struct Piece {
        int node;
        int64_t block;
    };
    std::vector<Piece> pieces;
    pieces.reserve(xs.size());
    for (const auto& t : xs) {
        pieces.push_back({t.graph() == g ? t.node() : -1, static_cast<int64_t>(t.extent(dim)) * inner});
    }
    return g->record(std::move(oshape), std::move(out), [pieces, outer, out_row](Graph<T>& gg, int self) {
        const std::vector<T>& go = gg.grad_of(self);
        int64_t offset = 0;
        for (const Piece& p : pieces) {
            if (p.node >= 0) {
                std::vector<T>& gi = gg.grad_buf(p.node);
                for (int64_t ou = 0; ou < outer; ++ou) {
                    const T* src = go.data() + ou * out_row + offset;
                    T* dst = gi.data() + ou * p.block;
                    for (int64_t i = 0; i < p.block; ++i) dst[i] += src[i];
                }
            }
            offset += p.block;
        }
    });
}

// ---------------------------------------------------------------------------
// loss

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& p, const Tensor<T>& y, T pos_weight) {
    require_same_shape(p, y, "bce_loss");
    if (pos_weight <= T(0)) throw ValueError("bce_loss: pos_weight must be positive");
    const std::vector<T>& pd = p.data();
    const std::vector<T>& yd = y.data();
    for (T v : yd) {
        if (v != T(0) && v != T(1)) throw ValueError("bce_loss: labels must be exactly 0 or 1");
    }

    const T lo = T(1e-7), hi = T(1) - T(1e-7);
    const size_t n = pd.size();
    T loss = T(0);
    for (size_t i = 0; i < n; ++i) {
        const T pc = std::clamp(pd[i], lo, hi);
        loss += yd[i] == T(1) ? -pos_weight * std::log(pc) : -std::log(T(1) - pc);
    }
    loss /= static_cast<T>(n);

    Graph<T>* g = common_graph<T>({&p, &y});
    if (!g) return Tensor<T>::scalar(loss);

    const int pn = p.node();
    auto ps = p.storage();
    auto ys = y.storage();
    return g->record({1}, {loss}, [pn, ps, ys, pos_weight, lo, hi, n](Graph<T>& gg, int self) {
        if (pn < 0) return;
        const T go = gg.grad_of(self)[0];
        std::vector<T>& gp = gg.grad_buf(pn);
        const T inv_n = T(1) / static_cast<T>(n);
        for (size_t i = 0; i < n; ++i) {
            const T pv = (*ps)[i];
            if (pv <= lo || pv >= hi) continue;  // clamp is flat outside
            const T d = (*ys)[i] == T(1) ? -pos_weight / pv : T(1) / (T(1) - pv);
            gp[i] += go * d * inv_n;
        }
    });
}

// ---------------------------------------------------------------------------

#define RPMNET_INSTANTIATE_OPS(T)                                                              \
    template Tensor<T> batchnorm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                    BatchNormState<T>&, Mode, T, T);                           \
    template Tensor<T> maxpool2d<T>(const Tensor<T>&, int, int, int);                         \
    template Tensor<T> global_avg_pool<T>(const Tensor<T>&, const std::vector<int>&);         \
    template Tensor<T> relu<T>(const Tensor<T>&);                                             \
    template Tensor<T> sigmoid<T>(const Tensor<T>&);                                          \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> scale<T>(const Tensor<T>&, T);                                         \
    template Tensor<T> mean_of_list<T>(const std::vector<Tensor<T>>&);                        \
    template Tensor<T> sum_all<T>(const Tensor<T>&);                                          \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                   \
    template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);                 \
    template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                         \
    template Tensor<T> bce_loss<T>(const Tensor<T>&, const Tensor<T>&, T);

RPMNET_INSTANTIATE_OPS(float)
RPMNET_INSTANTIATE_OPS(double)

#undef RPMNET_INSTANTIATE_OPS

}  // namespace rpmnet
