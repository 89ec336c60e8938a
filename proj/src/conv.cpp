// Convolution and linear primitives: im2col + GEMM, with the GEMM mapped
// onto Eigen. Single-threaded, fixed accumulation order, so forward values
// and gradients are bit-reproducible run to run.

#include <Eigen/Core>

#include "rpmnet/ops.hpp"

namespace rpmnet {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;

int out_extent(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// cols is (cin*kh*kw) x (oh*ow), row-major.
template <typename T>
void im2col2d(const T* x, int cin, int h, int w, int kh, int kw, int stride, int pad,
              int oh, int ow, T* cols) {
    const int64_t n = static_cast<int64_t>(oh) * ow;
    for (int ci = 0; ci < cin; ++ci) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                T* row = cols + (static_cast<int64_t>(ci) * kh * kw + ki * kw + kj) * n;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    T* dst = row + static_cast<int64_t>(oy) * ow;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < ow; ++ox) dst[ox] = T(0);
                        continue;
                    }
                    const T* src = x + (static_cast<int64_t>(ci) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im2d_add(const T* cols, int cin, int h, int w, int kh, int kw, int stride, int pad,
                  int oh, int ow, T* gx) {
    const int64_t n = static_cast<int64_t>(oh) * ow;
    for (int ci = 0; ci < cin; ++ci) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const T* row = cols + (static_cast<int64_t>(ci) * kh * kw + ki * kw + kj) * n;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    const T* src = row + static_cast<int64_t>(oy) * ow;
                    T* dst = gx + (static_cast<int64_t>(ci) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

// cols is (cin*kd*kh*kw) x (od*oh*ow), row-major.
template <typename T>
void im2col3d(const T* x, int cin, int d, int h, int w, int kd, int kh, int kw, int stride,
              int pad, int od, int oh, int ow, T* cols) {
    int64_t k = 0;
    for (int ci = 0; ci < cin; ++ci) {
        for (int kz = 0; kz < kd; ++kz) {
            for (int ki = 0; ki < kh; ++ki) {
                for (int kj = 0; kj < kw; ++kj, ++k) {
                    T* row = cols + k * (static_cast<int64_t>(od) * oh * ow);
                    for (int oz = 0; oz < od; ++oz) {
                        const int iz = oz * stride - pad + kz;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * stride - pad + ki;
                            T* dst = row + (static_cast<int64_t>(oz) * oh + oy) * ow;
                            if (iz < 0 || iz >= d || iy < 0 || iy >= h) {
                                for (int ox = 0; ox < ow; ++ox) dst[ox] = T(0);
                                continue;
                            }
                            const T* src = x + ((static_cast<int64_t>(ci) * d + iz) * h + iy) * w;
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * stride - pad + kj;
                                dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im3d_add(const T* cols, int cin, int d, int h, int w, int kd, int kh, int kw,
                  int stride, int pad, int od, int oh, int ow, T* gx) {
    int64_t k = 0;
    for (int ci = 0; ci < cin; ++ci) {
        for (int kz = 0; kz < kd; ++kz) {
            for (int ki = 0; ki < kh; ++ki) {
                for (int kj = 0; kj < kw; ++kj, ++k) {
                    const T* row = cols + k * (static_cast<int64_t>(od) * oh * ow);
                    for (int oz = 0; oz < od; ++oz) {
                        const int iz = oz * stride - pad + kz;
                        if (iz < 0 || iz >= d) continue;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * stride - pad + ki;
                            if (iy < 0 || iy >= h) continue;
                            const T* src = row + (static_cast<int64_t>(oz) * oh + oy) * ow;
                            T* dst = gx + ((static_cast<int64_t>(ci) * d + iz) * h + iy) * w;
                            for (int ox = 0; ox < ow; ++ox) {
                                const int ix = ox * stride - pad + kj;
                                if (ix >= 0 && ix < w) dst[ix] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Shared backward for conv2d/conv3d once geometry is reduced to
// (spatial volume in, spatial volume out, column matrix).
template <typename T>
struct ConvGrad {
    std::shared_ptr<std::vector<T>> cols;  // batch-stacked im2col output
    std::shared_ptr<std::vector<T>> wdata;
    int xnode, wnode, bnode;
    int bsz, cout;
    int64_t kdim, n, in_volume;  // per-image: cin*d*h*w

    void operator()(Graph<T>& g, int self, const std::function<void(const T*, T*)>& scatter) const {
        const std::vector<T>& go = g.grad_of(self);
        if (wnode >= 0) {
            MapM<T> gw(g.grad_buf(wnode).data(), cout, kdim);
            for (int b = 0; b < bsz; ++b) {
                CMapM<T> gob(go.data() + static_cast<int64_t>(b) * cout * n, cout, n);
                CMapM<T> cb(cols->data() + static_cast<int64_t>(b) * kdim * n, kdim, n);
                gw.noalias() += gob * cb.transpose();
            }
        }
        if (bnode >= 0) {
            std::vector<T>& gb = g.grad_buf(bnode);
            for (int b = 0; b < bsz; ++b) {
                const T* gob = go.data() + static_cast<int64_t>(b) * cout * n;
                for (int co = 0; co < cout; ++co) {
                    T s = T(0);
                    const T* r = gob + static_cast<int64_t>(co) * n;
                    for (int64_t i = 0; i < n; ++i) s += r[i];
                    gb[static_cast<size_t>(co)] += s;
                }
            }
        }
        if (xnode >= 0) {
            std::vector<T>& gx = g.grad_buf(xnode);
            std::vector<T> gcols(static_cast<size_t>(kdim) * n);
            for (int b = 0; b < bsz; ++b) {
                CMapM<T> gob(go.data() + static_cast<int64_t>(b) * cout * n, cout, n);
                MapM<T> gc(gcols.data(), kdim, n);
                gc.noalias() = CMapM<T>(wdata->data(), cout, kdim).transpose() * gob;
                scatter(gcols.data(), gx.data() + static_cast<int64_t>(b) * in_volume);
            }
        }
    }
};

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int pad) {
    if (x.rank() != 4) throw ShapeError("conv2d: input must be (b,cin,h,w), got " + shape_str(x.shape()));
    if (weight.rank() != 4) throw ShapeError("conv2d: weight must be (cout,cin,kh,kw), got " + shape_str(weight.shape()));
    const int bsz = x.extent(0), cin = x.extent(1), h = x.extent(2), w = x.extent(3);
    const int cout = weight.extent(0), kh = weight.extent(2), kw = weight.extent(3);
    if (weight.extent(1) != cin) {
        throw ShapeError("conv2d: input channels " + std::to_string(cin) +
                         " do not match weight cin " + std::to_string(weight.extent(1)) +
                         " (x " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) + ")");
    }
    if (bias.rank() != 1 || bias.extent(0) != cout) {
        throw ShapeError("conv2d: bias must be (" + std::to_string(cout) + "), got " + shape_str(bias.shape()));
    }
    if (stride < 1 || pad < 0) throw ValueError("conv2d: require stride >= 1 and pad >= 0");
    if (kh > h + 2 * pad || kw > w + 2 * pad) {
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " larger than padded input " + shape_str(x.shape()) + " with pad " + std::to_string(pad));
    }

    const int oh = out_extent(h, kh, stride, pad), ow = out_extent(w, kw, stride, pad);
    const int64_t kdim = static_cast<int64_t>(cin) * kh * kw;
    const int64_t n = static_cast<int64_t>(oh) * ow;
    const int64_t in_volume = static_cast<int64_t>(cin) * h * w;

    Graph<T>* g = common_graph<T>({&x, &weight, &bias});
    std::vector<T> out(static_cast<size_t>(bsz) * cout * n);
    // Columns are kept alive for backward only when a graph is recording.
    auto cols = std::make_shared<std::vector<T>>(static_cast<size_t>(g ? bsz : 1) * kdim * n);

    const T* xd = x.data().data();
    for (int b = 0; b < bsz; ++b) {
        T* cb = cols->data() + (g ? static_cast<int64_t>(b) * kdim * n : 0);
        im2col2d(xd + b * in_volume, cin, h, w, kh, kw, stride, pad, oh, ow, cb);
        MapM<T> om(out.data() + static_cast<int64_t>(b) * cout * n, cout, n);
        om.noalias() = CMapM<T>(weight.data().data(), cout, kdim) * CMapM<T>(cb, kdim, n);
        for (int co = 0; co < cout; ++co) om.row(co).array() += bias[co];
    }

    Shape oshape{bsz, cout, oh, ow};
    if (!g) return Tensor<T>(std::move(oshape), std::move(out));

    ConvGrad<T> grad{cols, weight.storage(), x.node(), weight.node(), bias.node(),
                     bsz, cout, kdim, n, in_volume};
    return g->record(std::move(oshape), std::move(out),
                     [grad, cin, h, w, kh, kw, stride, pad, oh, ow](Graph<T>& gg, int self) {
                         grad(gg, self, [&](const T* gc, T* gx) {
                             col2im2d_add(gc, cin, h, w, kh, kw, stride, pad, oh, ow, gx);
                         });
                     });
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int pad) {
    if (x.rank() != 5) throw ShapeError("conv3d: input must be (b,cin,d,h,w), got " + shape_str(x.shape()));
    if (weight.rank() != 5) throw ShapeError("conv3d: weight must be (cout,cin,kd,kh,kw), got " + shape_str(weight.shape()));
    const int bsz = x.extent(0), cin = x.extent(1), d = x.extent(2), h = x.extent(3), w = x.extent(4);
    const int cout = weight.extent(0), kd = weight.extent(2), kh = weight.extent(3), kw = weight.extent(4);
    if (weight.extent(1) != cin) {
        throw ShapeError("conv3d: input channels " + std::to_string(cin) +
                         " do not match weight cin " + std::to_string(weight.extent(1)));
    }
    if (bias.rank() != 1 || bias.extent(0) != cout) {
        throw ShapeError("conv3d: bias must be (" + std::to_string(cout) + "), got " + shape_str(bias.shape()));
    }
    if (stride < 1 || pad < 0) throw ValueError("conv3d: require stride >= 1 and pad >= 0");
    if (kd > d + 2 * pad || kh > h + 2 * pad || kw > w + 2 * pad) {
        throw ShapeError("conv3d: kernel exceeds padded input " + shape_str(x.shape()) +
                         " with pad " + std::to_string(pad));
    }

    const int od = out_extent(d, kd, stride, pad);
    const int oh = out_extent(h, kh, stride, pad), ow = out_extent(w, kw, stride, pad);
    const int64_t kdim = static_cast<int64_t>(cin) * kd * kh * kw;
    const int64_t n = static_cast<int64_t>(od) * oh * ow;
    const int64_t in_volume = static_cast<int64_t>(cin) * d * h * w;

    Graph<T>* g = common_graph<T>({&x, &weight, &bias});
    std::vector<T> out(static_cast<size_t>(bsz) * cout * n);
    auto cols = std::make_shared<std::vector<T>>(static_cast<size_t>(g ? bsz : 1) * kdim * n);

    const T* xd = x.data().data();
    for (int b = 0; b < bsz; ++b) {
        T* cb = cols->data() + (g ? static_cast<int64_t>(b) * kdim * n : 0);
        im2col3d(xd + b * in_volume, cin, d, h, w, kd, kh, kw, stride, pad, od, oh, ow, cb);
        MapM<T> om(out.data() + static_cast<int64_t>(b) * cout * n, cout, n);
        om.noalias() = CMapM<T>(weight.data().data(), cout, kdim) * CMapM<T>(cb, kdim, n);
        for (int co = 0; co < cout; ++co) om.row(co).array() += bias[co];
    }

    Shape oshape{bsz, cout, od, oh, ow};
    if (!g) return Tensor<T>(std::move(oshape), std::move(out));

    ConvGrad<T> grad{cols, weight.storage(), x.node(), weight.node(), bias.node(),
                     bsz, cout, kdim, n, in_volume};
    return g->record(std::move(oshape), std::move(out),
                     [grad, cin, d, h, w, kd, kh, kw, stride, pad, od, oh, ow](Graph<T>& gg, int self) {
                         grad(gg, self, [&](const T* gc, T* gx) {
                             col2im3d_add(gc, cin, d, h, w, kd, kh, kw, stride, pad, od, oh, ow, gx);
                         });
                     });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (x.rank() != 2) throw ShapeError("linear: input must be (b,n), got " + shape_str(x.shape()));
    if (weight.rank() != 2) throw ShapeError("linear: weight must be (m,n), got " + shape_str(weight.shape()));
    const int bsz = x.extent(0), nin = x.extent(1);
    const int m = weight.extent(0);
    if (weight.extent(1) != nin) {
        throw ShapeError("linear: inner extents disagree, x " + shape_str(x.shape()) +
                         " vs weight " + shape_str(weight.shape()));
    }
    if (bias.rank() != 1 || bias.extent(0) != m) {
        throw ShapeError("linear: bias must be (" + std::to_string(m) + "), got " + shape_str(bias.shape()));
    }

    Graph<T>* g = common_graph<T>({&x, &weight, &bias});
    std::vector<T> out(static_cast<size_t>(bsz) * m);
    {
        MapM<T> om(out.data(), bsz, m);
        om.noalias() = CMapM<T>(x.data().data(), bsz, nin) *
                       CMapM<T>(weight.data().data(), m, nin).transpose();
        for (int b = 0; b < bsz; ++b) om.row(b) += CMapM<T>(bias.data().data(), 1, m);
    }

    if (!g) return Tensor<T>({bsz, m}, std::move(out));

    const int xn = x.node(), wn = weight.node(), bn = bias.node();
    auto xs = x.storage();
    auto ws = weight.storage();
    return g->record(
        {bsz, m}, std::move(out), [=](Graph<T>& gg, int self) {
            const std::vector<T>& go = gg.grad_of(self);
            CMapM<T> gom(go.data(), bsz, m);
            if (wn >= 0) {
                MapM<T> gw(gg.grad_buf(wn).data(), m, nin);
                gw.noalias() += gom.transpose() * CMapM<T>(xs->data(), bsz, nin);
            }
            if (bn >= 0) {
                std::vector<T>& gb = gg.grad_buf(bn);
                for (int b = 0; b < bsz; ++b)
                    for (int j = 0; j < m; ++j) gb[static_cast<size_t>(j)] += gom(b, j);
            }
            if (xn >= 0) {
                MapM<T> gx(gg.grad_buf(xn).data(), bsz, nin);
                gx.noalias() += gom * CMapM<T>(ws->data(), m, nin);
            }
        });
}

template Tensor<float> conv2d<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, int, int);
template Tensor<double> conv2d<double>(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, int, int);
template Tensor<float> conv3d<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, int, int);
template Tensor<double> conv3d<double>(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, int, int);
template Tensor<float> linear<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> linear<double>(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);

}  // namespace rpmnet
