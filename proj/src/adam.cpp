#include "rpmnet/adam.hpp"

#include <cmath>

namespace rpmnet {

template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params,
               const std::vector<std::vector<T>>& grads, AdamState<T>& state) {
    if (params.size() != grads.size()) {
        throw ValueError("adam_step: " + std::to_string(params.size()) + " params vs " +
                         std::to_string(grads.size()) + " grads");
    }
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i]->data().size(), T(0));
            state.v[i].assign(params[i]->data().size(), T(0));
        }
    }
    if (state.m.size() != params.size()) {
        throw ValueError("adam_step: state was initialized for a different parameter list");
    }

    state.t += 1;
    const AdamHyper<T>& h = state.hyper;
    const T bc1 = T(1) - std::pow(h.beta1, static_cast<T>(state.t));
    const T bc2 = T(1) - std::pow(h.beta2, static_cast<T>(state.t));

    for (size_t i = 0; i < params.size(); ++i) {
        std::vector<T>& p = params[i]->data();
        const std::vector<T>& g = grads[i];
        if (p.size() != g.size()) {
            throw ShapeError("adam_step: param " + std::to_string(i) + " has " +
                             std::to_string(p.size()) + " elements, grad has " + std::to_string(g.size()));
        }
        bool finite = true;
        for (T gv : g) {
            if (!std::isfinite(gv)) {
                finite = false;
                break;
            }
        }
        if (!finite) {
            state.rejected += 1;
            if (state.on_reject) {
                state.on_reject("adam_step: non-finite gradient in group " + std::to_string(i) +
                                " at step " + std::to_string(state.t) + ", update skipped");
            }
            continue;
        }
        std::vector<T>& m = state.m[i];
        std::vector<T>& v = state.v[i];
        for (size_t j = 0; j < p.size(); ++j) {
            m[j] = h.beta1 * m[j] + (T(1) - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (T(1) - h.beta2) * g[j] * g[j];
            const T mhat = m[j] / bc1;
            const T vhat = v[j] / bc2;
            p[j] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
        }
    }
}

template void adam_step<float>(const std::vector<Tensor<float>*>&,
                               const std::vector<std::vector<float>>&, AdamState<float>&);
template void adam_step<double>(const std::vector<Tensor<double>*>&,
                                const std::vector<std::vector<double>>&, AdamState<double>&);

}  // namespace rpmnet
