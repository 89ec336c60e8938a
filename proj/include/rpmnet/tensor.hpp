#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

// N-dimensional row-major tensors plus a reverse-mode differentiation tape.
// Tensors are value types with shared element storage; they are never
// mutated by operations. A tensor participates in differentiation only
// while it is bound to a Graph (see Graph::leaf and the ops in ops.hpp).

namespace rpmnet {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValueError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);

enum class Mode { kTrain, kEval };

template <typename T>
class Graph;

template <typename T>
class Tensor {
public:
    Tensor() : data_(std::make_shared<std::vector<T>>()) {}

    // Zero-filled tensor. All extents must be >= 1.
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<T> values);

    static Tensor full(Shape shape, T value);
    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const;
    int64_t size() const { return static_cast<int64_t>(data_->size()); }

    std::vector<T>& data() { return *data_; }
    const std::vector<T>& data() const { return *data_; }
    const std::shared_ptr<std::vector<T>>& storage() const { return data_; }

    T& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    T operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    // Value of a single-element tensor.
    T item() const;

    Graph<T>* graph() const { return graph_; }
    int node() const { return node_; }
    bool requires_grad() const { return requires_grad_; }

    // Same storage and shape, not bound to any graph.
    Tensor detached() const;

private:
    friend class Graph<T>;

    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
    Graph<T>* graph_ = nullptr;
    int node_ = -1;
    bool requires_grad_ = false;
};

// Append-only tape of primitive applications. Insertion order is the
// topological order; backward() visits nodes in exact reverse insertion
// order, which makes gradient accumulation deterministic.
template <typename T>
class Graph {
public:
    // Backward closure of one node; `self` is the node's own id, so the
    // closure can read its output gradient via grad_of(self).
    using BackFn = std::function<void(Graph&, int self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Registers `t` as a leaf of this graph and returns a bound alias.
    // Leaves are deduplicated on the storage buffer, so binding the same
    // parameter twice yields the same node. With requires_grad false the
    // tensor is returned unbound (it acts as a constant).
    Tensor<T> leaf(const Tensor<T>& t, bool requires_grad = true);

    // Reverse accumulation from a scalar root belonging to this graph.
    // May be called once per graph.
    void backward(const Tensor<T>& root);

    // Gradient of a tensor bound to this graph (leaves may also be looked
    // up by storage buffer). Zeros if backward never reached it.
    std::vector<T> grad(const Tensor<T>& t) const;

    size_t node_count() const { return nodes_.size(); }
    bool backward_done() const { return backward_done_; }

    // --- op plumbing -------------------------------------------------------

    // Fresh op result bound to this graph. `back` may be empty for
    // non-differentiable results.
    Tensor<T> record(Shape shape, std::vector<T> values, BackFn back);
    // Same, but sharing an existing buffer (views such as reshape).
    Tensor<T> record_view(Shape shape, std::shared_ptr<std::vector<T>> values, BackFn back);

    // Gradient buffer of a node, allocated to zeros on first access.
    std::vector<T>& grad_buf(int node);
    bool grad_present(int node) const;
    const std::vector<T>& grad_of(int node) const;

private:
    int add_node(int64_t size, BackFn back);

    struct Node {
        int64_t size;
        std::vector<T> grad;  // empty until touched
        BackFn back;          // empty for leaves
    };
    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> leaf_by_storage_;
    bool backward_done_ = false;
};

// The single graph the given tensors are bound to, or nullptr when none is.
// Mixing tensors from two live graphs in one op is an error.
template <typename T>
Graph<T>* common_graph(std::initializer_list<const Tensor<T>*> xs);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;
extern template Graph<float>* common_graph<float>(std::initializer_list<const Tensor<float>*>);
extern template Graph<double>* common_graph<double>(std::initializer_list<const Tensor<double>*>);

}  // namespace rpmnet
