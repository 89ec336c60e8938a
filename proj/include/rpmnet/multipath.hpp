#pragma once

#include <memory>
#include <set>
#include <string>
#include <vector>

#include "rpmnet/layers.hpp"

// Parallel permutation-path processing with a contrasting module.
//
// A step owns K paths, each a chain of stage transforms applied in a
// different order, plus one contrast module. The step forward computes
// every path output P_i, a shared correction C from all of them, and
// returns P_i - C per path. Path states live in the canonical layout
// (batch, row, col, channel, height, width).

namespace rpmnet {

enum class Axis { kRow, kCol, kHeight, kWidth };
using AxisSet = std::set<Axis>;

std::string axis_set_str(const AxisSet& s);

// Extents of one path state, batch excluded.
struct StepSig {
    int rows = 1;
    int cols = 1;
    int channels = 1;
    int height = 1;
    int width = 1;

    bool operator==(const StepSig&) const = default;
    int structural(Axis a) const;
    Shape with_batch(int batch) const { return {batch, rows, cols, channels, height, width}; }
};

std::string to_string(const StepSig& sig);

// An instantiated stage: a differentiable map with its own parameters.
template <typename T>
class StageTransform {
public:
    virtual ~StageTransform() = default;
    virtual Tensor<T> apply(FwdCtx<T>& ctx, const Tensor<T>& x) = 0;
    virtual void params(std::vector<ParamRef<T>>& out) = 0;
    virtual void buffers(std::vector<BufferRef<T>>& out) { (void)out; }
    const StepSig& out_sig() const { return out_sig_; }

protected:
    StepSig out_sig_;
};

// Stage factory: declares the dimension subset it reads and writes, maps
// signatures, and instantiates transforms with independent parameters.
// Every extent outside the target subset (other than the declared channel
// change) must survive map_sig unchanged; step construction enforces this.
template <typename T>
class Stage {
public:
    virtual ~Stage() = default;
    virtual const AxisSet& target() const = 0;
    virtual StepSig map_sig(const StepSig& in) const = 0;
    virtual std::unique_ptr<StageTransform<T>> instantiate(const std::string& name,
                                                           const StepSig& in, Rng& rng) const = 0;
};

struct PathSpec {
    std::vector<int> order;  // stage indices, applied left to right
    int index = 0;           // position in the lexicographic enumeration
};

// All K = T! orderings of T stages, lexicographic over stage indices.
// Targets must be pairwise disjoint; overlapping targets are rejected.
std::vector<PathSpec> enumerate_paths(const std::vector<AxisSet>& stage_targets);

template <typename T>
std::vector<PathSpec> enumerate_paths(const std::vector<const Stage<T>*>& stages) {
    std::vector<AxisSet> targets;
    targets.reserve(stages.size());
    for (const Stage<T>* s : stages) targets.push_back(s->target());
    return enumerate_paths(targets);
}

// One instantiated path: transforms applied in spec order.
template <typename T>
class Path {
public:
    Path(PathSpec spec, std::vector<std::unique_ptr<StageTransform<T>>> transforms,
         StepSig in_sig, StepSig out_sig);

    Tensor<T> apply(FwdCtx<T>& ctx, const Tensor<T>& input);
    const PathSpec& spec() const { return spec_; }
    const StepSig& in_sig() const { return in_sig_; }
    const StepSig& out_sig() const { return out_sig_; }
    StageTransform<T>& transform(size_t i) { return *transforms_[i]; }
    size_t length() const { return transforms_.size(); }
    void params(std::vector<ParamRef<T>>& out);
    void buffers(std::vector<BufferRef<T>>& out);

private:
    PathSpec spec_;
    std::vector<std::unique_ptr<StageTransform<T>>> transforms_;
    StepSig in_sig_, out_sig_;
};

// Correction from the K path outputs: element-wise mean over paths, a 3-D
// convolution over (row*col depth, height, width) with channels preserved,
// then batchnorm. zero() zeroes the convolution so the correction becomes
// exactly zero in either mode.
template <typename T>
class ContrastModule {
public:
    ContrastModule(const std::string& name, const StepSig& sig, Rng& rng);

    Tensor<T> forward(FwdCtx<T>& ctx, const std::vector<Tensor<T>>& path_outputs);
    void params(std::vector<ParamRef<T>>& out);
    void buffers(std::vector<BufferRef<T>>& out);
    void zero();

private:
    StepSig sig_;
    Conv3dLayer<T> conv_;
    BatchNormLayer<T> bn_;
};

template <typename T>
class MultiPathStep {
public:
    // Paths enumerated from the stage targets (requires disjoint targets).
    static MultiPathStep enumerated(const std::string& name,
                                    const std::vector<const Stage<T>*>& stages,
                                    const StepSig& in_sig, Rng& rng);

    // Explicit orderings. Stage families that act on a shared dimension
    // subset and differ only in parameter placement are built this way.
    static MultiPathStep with_paths(const std::string& name,
                                    const std::vector<const Stage<T>*>& stages,
                                    std::vector<PathSpec> path_specs, const StepSig& in_sig,
                                    Rng& rng);

    // inputs[i] feeds path i; returns the K corrected outputs P_i - C.
    std::vector<Tensor<T>> forward(FwdCtx<T>& ctx, const std::vector<Tensor<T>>& inputs);

    int path_count() const { return static_cast<int>(paths_.size()); }
    Path<T>& path(int i) { return paths_[static_cast<size_t>(i)]; }
    ContrastModule<T>& contrast() { return *contrast_; }
    const StepSig& in_sig() const { return in_sig_; }
    const StepSig& out_sig() const { return out_sig_; }
    void params(std::vector<ParamRef<T>>& out);
    void buffers(std::vector<BufferRef<T>>& out);

private:
    MultiPathStep() = default;

    StepSig in_sig_, out_sig_;
    std::vector<Path<T>> paths_;
    std::unique_ptr<ContrastModule<T>> contrast_;
};

// Stacked steps: the input is copied once per path, then every step maps
// the K states to K new states. Step boundaries are validated here.
template <typename T>
std::vector<Tensor<T>> stack_steps(std::vector<MultiPathStep<T>>& steps, FwdCtx<T>& ctx,
                                   const Tensor<T>& input);

// --- concrete stages --------------------------------------------------------

// Pass-through stage; useful as a degenerate processor.
template <typename T>
class IdentityStage : public Stage<T> {
public:
    explicit IdentityStage(AxisSet target) : target_(std::move(target)) {}
    const AxisSet& target() const override { return target_; }
    StepSig map_sig(const StepSig& in) const override { return in; }
    std::unique_ptr<StageTransform<T>> instantiate(const std::string& name, const StepSig& in,
                                                   Rng& rng) const override;

private:
    AxisSet target_;
};

// Mean over the target axes, keeping them at extent 1.
template <typename T>
class MeanPoolStage : public Stage<T> {
public:
    explicit MeanPoolStage(AxisSet target) : target_(std::move(target)) {}
    const AxisSet& target() const override { return target_; }
    StepSig map_sig(const StepSig& in) const override;
    std::unique_ptr<StageTransform<T>> instantiate(const std::string& name, const StepSig& in,
                                                   Rng& rng) const override;

private:
    AxisSet target_;
};

// Residual 2-D processing over (height, width): rows and cols fold into the
// batch, a ResidualBlock2d maps channels by `channel_multiplier` at the
// given stride, and the state unfolds back.
template <typename T>
class ResidualStage : public Stage<T> {
public:
    ResidualStage(int channel_multiplier, int stride, int kernel = 3);
    const AxisSet& target() const override { return target_; }
    StepSig map_sig(const StepSig& in) const override;
    std::unique_ptr<StageTransform<T>> instantiate(const std::string& name, const StepSig& in,
                                                   Rng& rng) const override;

private:
    AxisSet target_;
    int mult_, stride_, kernel_;
};

extern template class Path<float>;
extern template class Path<double>;
extern template class ContrastModule<float>;
extern template class ContrastModule<double>;
extern template class MultiPathStep<float>;
extern template class MultiPathStep<double>;
extern template class IdentityStage<float>;
extern template class IdentityStage<double>;
extern template class MeanPoolStage<float>;
extern template class MeanPoolStage<double>;
extern template class ResidualStage<float>;
extern template class ResidualStage<double>;
extern template std::vector<Tensor<float>> stack_steps<float>(std::vector<MultiPathStep<float>>&,
                                                              FwdCtx<float>&, const Tensor<float>&);
extern template std::vector<Tensor<double>> stack_steps<double>(
    std::vector<MultiPathStep<double>>&, FwdCtx<double>&, const Tensor<double>&);

}  // namespace rpmnet
