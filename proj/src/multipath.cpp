#include "rpmnet/multipath.hpp"

#include <algorithm>
#include <sstream>

namespace rpmnet {

namespace {

const char* axis_name(Axis a) {
    switch (a) {
        case Axis::kRow: return "row";
        case Axis::kCol: return "col";
        case Axis::kHeight: return "height";
        case Axis::kWidth: return "width";
    }
    return "?";
}

template <typename T>
void check_state_shape(const Tensor<T>& x, const StepSig& sig, const char* what) {
    if (x.rank() != 6 || x.extent(1) != sig.rows || x.extent(2) != sig.cols ||
        x.extent(3) != sig.channels || x.extent(4) != sig.height || x.extent(5) != sig.width) {
        throw ShapeError(std::string(what) + ": state " + shape_str(x.shape()) +
                         " does not match signature " + to_string(sig));
    }
}

}  // namespace

std::string axis_set_str(const AxisSet& s) {
    std::ostringstream os;
    os << '{';
    bool first = true;
    for (Axis a : s) {
        if (!first) os << ',';
        os << axis_name(a);
        first = false;
    }
    os << '}';
    return os.str();
}

int StepSig::structural(Axis a) const {
    switch (a) {
        case Axis::kRow: return rows;
        case Axis::kCol: return cols;
        case Axis::kHeight: return height;
        case Axis::kWidth: return width;
    }
    return 0;
}

std::string to_string(const StepSig& sig) {
    std::ostringstream os;
    os << "(r=" << sig.rows << ",c=" << sig.cols << ",ch=" << sig.channels << ",h=" << sig.height
       << ",w=" << sig.width << ')';
    return os.str();
}

std::vector<PathSpec> enumerate_paths(const std::vector<AxisSet>& stage_targets) {
    const int t = static_cast<int>(stage_targets.size());
    if (t < 1) throw ValueError("enumerate_paths: need at least one stage");
    for (int i = 0; i < t; ++i) {
        if (stage_targets[static_cast<size_t>(i)].empty()) {
            throw ValueError("enumerate_paths: stage " + std::to_string(i) + " has an empty target");
        }
        for (int j = i + 1; j < t; ++j) {
            for (Axis a : stage_targets[static_cast<size_t>(i)]) {
                if (stage_targets[static_cast<size_t>(j)].count(a)) {
                    throw ValueError("enumerate_paths: overlapping targets " +
                                     axis_set_str(stage_targets[static_cast<size_t>(i)]) + " and " +
                                     axis_set_str(stage_targets[static_cast<size_t>(j)]));
                }
            }
        }
    }

    std::vector<int> order(static_cast<size_t>(t));
    for (int i = 0; i < t; ++i) order[static_cast<size_t>(i)] = i;
    std::vector<PathSpec> out;
    int index = 0;
    do {
        out.push_back({order, index++});
    } while (std::next_permutation(order.begin(), order.end()));
    return out;
}

// ---------------------------------------------------------------------------
// Path

template <typename T>
Path<T>::Path(PathSpec spec, std::vector<std::unique_ptr<StageTransform<T>>> transforms,
              StepSig in_sig, StepSig out_sig)
    : spec_(std::move(spec)),
      transforms_(std::move(transforms)),
      in_sig_(in_sig),
      out_sig_(out_sig) {}

template <typename T>
Tensor<T> Path<T>::apply(FwdCtx<T>& ctx, const Tensor<T>& input) {
    check_state_shape(input, in_sig_, "path");
    Tensor<T> x = input;
    for (auto& t : transforms_) {
        x = t->apply(ctx, x);
        check_state_shape(x, t->out_sig(), "stage output");
    }
    return x;
}

template <typename T>
void Path<T>::params(std::vector<ParamRef<T>>& out) {
    for (auto& t : transforms_) t->params(out);
}

template <typename T>
void Path<T>::buffers(std::vector<BufferRef<T>>& out) {
    for (auto& t : transforms_) t->buffers(out);
}

// ---------------------------------------------------------------------------
// ContrastModule

template <typename T>
ContrastModule<T>::ContrastModule(const std::string& name, const StepSig& sig, Rng& rng)
    : sig_(sig),
      conv_(name + ".conv", sig.channels, sig.channels, 3, 1, 1, rng),
      bn_(name + ".bn", sig.channels) {}

template <typename T>
Tensor<T> ContrastModule<T>::forward(FwdCtx<T>& ctx, const std::vector<Tensor<T>>& path_outputs) {
    if (path_outputs.size() < 2) {
        throw ValueError("contrast: need at least two path outputs, got " +
                         std::to_string(path_outputs.size()));
    }
    for (const auto& p : path_outputs) check_state_shape(p, sig_, "contrast input");

    Tensor<T> m = mean_of_list(path_outputs);
    const int batch = m.extent(0);
    // (b,r,c,ch,h,w) -> (b,ch,r*c,h,w): depth axis is the flattened grid.
    Tensor<T> folded = reshape(permute(m, {0, 3, 1, 2, 4, 5}),
                               {batch, sig_.channels, sig_.rows * sig_.cols, sig_.height, sig_.width});
    Tensor<T> c = bn_.forward(ctx, conv_.forward(ctx, folded));
    Tensor<T> unfolded = permute(
        reshape(c, {batch, sig_.channels, sig_.rows, sig_.cols, sig_.height, sig_.width}),
        {0, 2, 3, 1, 4, 5});
    return unfolded;
}

template <typename T>
void ContrastModule<T>::params(std::vector<ParamRef<T>>& out) {
    conv_.params(out);
    bn_.params(out);
}

template <typename T>
void ContrastModule<T>::buffers(std::vector<BufferRef<T>>& out) {
    bn_.buffers(out);
}

template <typename T>
void ContrastModule<T>::zero() {
    for (auto& v : conv_.weight().data()) v = T(0);
    for (auto& v : conv_.bias().data()) v = T(0);
}

// ---------------------------------------------------------------------------
// MultiPathStep

template <typename T>
MultiPathStep<T> MultiPathStep<T>::enumerated(const std::string& name,
                                              const std::vector<const Stage<T>*>& stages,
                                              const StepSig& in_sig, Rng& rng) {
    return with_paths(name, stages, enumerate_paths(stages), in_sig, rng);
}

template <typename T>
MultiPathStep<T> MultiPathStep<T>::with_paths(const std::string& name,
                                              const std::vector<const Stage<T>*>& stages,
                                              std::vector<PathSpec> path_specs,
                                              const StepSig& in_sig, Rng& rng) {
    if (stages.empty()) throw ValueError(name + ": need at least one stage");
    if (path_specs.size() < 2) throw ValueError(name + ": a step needs at least two paths");
    for (const PathSpec& ps : path_specs) {
        std::vector<bool> seen(stages.size(), false);
        if (ps.order.size() != stages.size()) {
            throw ValueError(name + ": path order must use every stage exactly once");
        }
        for (int s : ps.order) {
            if (s < 0 || s >= static_cast<int>(stages.size()) || seen[static_cast<size_t>(s)]) {
                throw ValueError(name + ": path order is not a permutation of the stages");
            }
            seen[static_cast<size_t>(s)] = true;
        }
    }
    for (size_t i = 0; i < path_specs.size(); ++i) {
        for (size_t j = i + 1; j < path_specs.size(); ++j) {
            if (path_specs[i].order == path_specs[j].order) {
                throw ValueError(name + ": duplicate path ordering");
            }
        }
    }

    MultiPathStep<T> step;
    step.in_sig_ = in_sig;

    bool have_out = false;
    for (size_t pi = 0; pi < path_specs.size(); ++pi) {
        // Signature check happens here, at construction.
        StepSig sig = in_sig;
        std::vector<std::unique_ptr<StageTransform<T>>> transforms;
        for (size_t k = 0; k < path_specs[pi].order.size(); ++k) {
            const Stage<T>* stage = stages[static_cast<size_t>(path_specs[pi].order[k])];
            const StepSig next = stage->map_sig(sig);
            for (Axis a : {Axis::kRow, Axis::kCol, Axis::kHeight, Axis::kWidth}) {
                if (!stage->target().count(a) && next.structural(a) != sig.structural(a)) {
                    throw ShapeError(name + ": stage " + std::to_string(path_specs[pi].order[k]) +
                                     " modifies non-target axis " + axis_name(a));
                }
            }
            const std::string tname = name + ".path" + std::to_string(pi) + ".stage" + std::to_string(k);
            transforms.push_back(stage->instantiate(tname, sig, rng));
            sig = next;
        }
        if (!have_out) {
            step.out_sig_ = sig;
            have_out = true;
        } else if (!(sig == step.out_sig_)) {
            throw ShapeError(name + ": path " + std::to_string(pi) + " ends at " + to_string(sig) +
                             " but path 0 ends at " + to_string(step.out_sig_));
        }
        step.paths_.emplace_back(path_specs[pi], std::move(transforms), in_sig, sig);
    }

    step.contrast_ = std::make_unique<ContrastModule<T>>(name + ".contrast", step.out_sig_, rng);
    return step;
}

template <typename T>
std::vector<Tensor<T>> MultiPathStep<T>::forward(FwdCtx<T>& ctx,
                                                 const std::vector<Tensor<T>>& inputs) {
    if (inputs.size() != paths_.size()) {
        throw ValueError("step: got " + std::to_string(inputs.size()) + " inputs for " +
                         std::to_string(paths_.size()) + " paths");
    }
    std::vector<Tensor<T>> outs;
    outs.reserve(paths_.size());
    for (size_t i = 0; i < paths_.size(); ++i) {
        outs.push_back(paths_[i].apply(ctx, inputs[i]));
    }
    Tensor<T> c = contrast_->forward(ctx, outs);
    for (auto& p : outs) p = sub(p, c);  // no activation after the subtraction
    return outs;
}

template <typename T>
void MultiPathStep<T>::params(std::vector<ParamRef<T>>& out) {
    for (auto& p : paths_) p.params(out);
    contrast_->params(out);
}

template <typename T>
void MultiPathStep<T>::buffers(std::vector<BufferRef<T>>& out) {
    for (auto& p : paths_) p.buffers(out);
    contrast_->buffers(out);
}

template <typename T>
std::vector<Tensor<T>> stack_steps(std::vector<MultiPathStep<T>>& steps, FwdCtx<T>& ctx,
                                   const Tensor<T>& input) {
    if (steps.empty()) return {input};
    for (size_t j = 0; j + 1 < steps.size(); ++j) {
        if (!(steps[j].out_sig() == steps[j + 1].in_sig())) {
            throw ShapeError("stack_steps: step " + std::to_string(j) + " ends at " +
                             to_string(steps[j].out_sig()) + " but step " + std::to_string(j + 1) +
                             " starts at " + to_string(steps[j + 1].in_sig()));
        }
        if (steps[j].path_count() != steps[j + 1].path_count()) {
            throw ValueError("stack_steps: path counts differ between steps");
        }
    }
    std::vector<Tensor<T>> states(static_cast<size_t>(steps[0].path_count()), input);
    for (auto& step : steps) states = step.forward(ctx, states);
    return states;
}

// ---------------------------------------------------------------------------
// concrete stages

namespace {

template <typename T>
class IdentityTransform : public StageTransform<T> {
public:
    explicit IdentityTransform(const StepSig& sig) { this->out_sig_ = sig; }
    Tensor<T> apply(FwdCtx<T>&, const Tensor<T>& x) override { return x; }
    void params(std::vector<ParamRef<T>>&) override {}
};

template <typename T>
class MeanPoolTransform : public StageTransform<T> {
public:
    MeanPoolTransform(const AxisSet& target, const StepSig& out) {
        this->out_sig_ = out;
        for (Axis a : target) {
            switch (a) {
                case Axis::kRow: dims_.push_back(1); break;
                case Axis::kCol: dims_.push_back(2); break;
                case Axis::kHeight: dims_.push_back(4); break;
                case Axis::kWidth: dims_.push_back(5); break;
            }
        }
        std::sort(dims_.begin(), dims_.end());
    }

    Tensor<T> apply(FwdCtx<T>&, const Tensor<T>& x) override {
        Tensor<T> pooled = global_avg_pool(x, dims_);
        return reshape(pooled, this->out_sig_.with_batch(x.extent(0)));
    }
    void params(std::vector<ParamRef<T>>&) override {}

private:
    std::vector<int> dims_;
};

template <typename T>
class ResidualTransform : public StageTransform<T> {
public:
    ResidualTransform(const std::string& name, const StepSig& in, const StepSig& out, int kernel,
                      int stride, Rng& rng)
        : block_(name + ".block", in.channels, out.channels, kernel, stride, rng) {
        this->out_sig_ = out;
        in_sig_ = in;
    }

    Tensor<T> apply(FwdCtx<T>& ctx, const Tensor<T>& x) override {
        const int batch = x.extent(0);
        Tensor<T> folded = reshape(x, {batch * in_sig_.rows * in_sig_.cols, in_sig_.channels,
                                       in_sig_.height, in_sig_.width});
        Tensor<T> y = block_.forward(ctx, folded);
        return reshape(y, this->out_sig_.with_batch(batch));
    }

    void params(std::vector<ParamRef<T>>& out) override { block_.params(out); }
    void buffers(std::vector<BufferRef<T>>& out) override { block_.buffers(out); }

private:
    ResidualBlock2d<T> block_;
    StepSig in_sig_;
};

}  // namespace

template <typename T>
std::unique_ptr<StageTransform<T>> IdentityStage<T>::instantiate(const std::string&,
                                                                 const StepSig& in, Rng&) const {
    return std::make_unique<IdentityTransform<T>>(in);
}

template <typename T>
StepSig MeanPoolStage<T>::map_sig(const StepSig& in) const {
    StepSig out = in;
    for (Axis a : target_) {
        switch (a) {
            case Axis::kRow: out.rows = 1; break;
            case Axis::kCol: out.cols = 1; break;
            case Axis::kHeight: out.height = 1; break;
            case Axis::kWidth: out.width = 1; break;
        }
    }
    return out;
}

template <typename T>
std::unique_ptr<StageTransform<T>> MeanPoolStage<T>::instantiate(const std::string&,
                                                                 const StepSig& in, Rng&) const {
    return std::make_unique<MeanPoolTransform<T>>(target_, map_sig(in));
}

template <typename T>
ResidualStage<T>::ResidualStage(int channel_multiplier, int stride, int kernel)
    : target_({Axis::kHeight, Axis::kWidth}),
      mult_(channel_multiplier),
      stride_(stride),
      kernel_(kernel) {
    if (channel_multiplier < 1 || stride < 1) {
        throw ValueError("ResidualStage: multiplier and stride must be positive");
    }
}

template <typename T>
StepSig ResidualStage<T>::map_sig(const StepSig& in) const {
    if (kernel_ > in.height + 2 || kernel_ > in.width + 2) {
        throw ShapeError("ResidualStage: kernel " + std::to_string(kernel_) +
                         " too large for state " + to_string(in));
    }
    StepSig out = in;
    out.channels = in.channels * mult_;
    out.height = (in.height + 2 - kernel_) / stride_ + 1;
    out.width = (in.width + 2 - kernel_) / stride_ + 1;
    if (out.height < 1 || out.width < 1) {
        throw ShapeError("ResidualStage: state " + to_string(in) + " collapses below one pixel");
    }
    return out;
}

template <typename T>
std::unique_ptr<StageTransform<T>> ResidualStage<T>::instantiate(const std::string& name,
                                                                 const StepSig& in,
                                                                 Rng& rng) const {
    return std::make_unique<ResidualTransform<T>>(name, in, map_sig(in), kernel_, stride_, rng);
}

template class Path<float>;
template class Path<double>;
template class ContrastModule<float>;
template class ContrastModule<double>;
template class MultiPathStep<float>;
template class MultiPathStep<double>;
template class IdentityStage<float>;
template class IdentityStage<double>;
template class MeanPoolStage<float>;
template class MeanPoolStage<double>;
template class ResidualStage<float>;
template class ResidualStage<double>;
template std::vector<Tensor<float>> stack_steps<float>(std::vector<MultiPathStep<float>>&,
                                                       FwdCtx<float>&, const Tensor<float>&);
template std::vector<Tensor<double>> stack_steps<double>(std::vector<MultiPathStep<double>>&,
                                                         FwdCtx<double>&, const Tensor<double>&);

}  // namespace rpmnet
