#include "rpmnet/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace rpmnet {

namespace {

double eval_scalar(const GradCheckFn& f, const std::vector<Tensor<double>>& inputs) {
    Graph<double> g;
    return f(g, inputs).item();
}

}  // namespace

double grad_check(const GradCheckFn& f, const std::vector<Tensor<double>>& inputs,
                  const GradCheckOptions& opts) {
    // Analytic pass.
    Graph<double> g;
    Tensor<double> root = f(g, inputs);
    g.backward(root);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (const auto& in : inputs) analytic.push_back(g.grad(in));

    Rng coord_rng = make_rng(opts.coord_seed);
    double max_rel = 0.0;

    for (size_t t = 0; t < inputs.size(); ++t) {
        const int64_t n = inputs[t].size();
        std::vector<int64_t> coords;
        if (opts.max_coords_per_tensor > 0 && n > opts.max_coords_per_tensor) {
            for (int c = 0; c < opts.max_coords_per_tensor; ++c) {
                coords.push_back(static_cast<int64_t>(uniform_below(coord_rng, static_cast<uint64_t>(n))));
            }
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        } else {
            coords.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        }

        for (int64_t c : coords) {
            // Perturb a private copy of the one input tensor.
            std::vector<Tensor<double>> work = inputs;
            Tensor<double> probe(inputs[t].shape(), inputs[t].data());
            work[t] = probe;

            const double orig = probe[c];
            probe[c] = orig + opts.h;
            const double fp = eval_scalar(f, work);
            probe[c] = orig - opts.h;
            const double fm = eval_scalar(f, work);
            probe[c] = orig;

            const double numeric = (fp - fm) / (2.0 * opts.h);
            const double a = analytic[t][static_cast<size_t>(c)];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace rpmnet
