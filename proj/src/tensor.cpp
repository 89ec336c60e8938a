#include "rpmnet/tensor.hpp"

#include <sstream>

namespace rpmnet {

int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

namespace {

void check_shape(const Shape& shape) {
    for (int e : shape) {
        if (e < 1) throw ShapeError("invalid extent in shape " + shape_str(shape));
    }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = std::make_shared<std::vector<T>>(static_cast<size_t>(numel(shape_)), T(0));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    check_shape(shape_);
    if (numel(shape_) != static_cast<int64_t>(values.size())) {
        throw ShapeError("data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape_));
    }
    data_ = std::make_shared<std::vector<T>>(std::move(values));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = value;
    return t;
}

template <typename T>
int Tensor<T>::extent(int axis) const {
    if (axis < 0 || axis >= rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[static_cast<size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
    if (size() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape_));
    return (*data_)[0];
}

template <typename T>
Tensor<T> Tensor<T>::detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
}

template <typename T>
Tensor<T> Graph<T>::leaf(const Tensor<T>& t, bool requires_grad) {
    if (!requires_grad) return t.detached();
    if (t.graph_ == this && t.node_ >= 0) return t;
    if (t.graph_ != nullptr && t.graph_ != this) {
        throw ValueError("tensor is already bound to a different graph");
    }
    Tensor<T> bound = t.detached();
    auto it = leaf_by_storage_.find(static_cast<const void*>(t.data_.get()));
    if (it != leaf_by_storage_.end()) {
        bound.node_ = it->second;
    } else {
        bound.node_ = add_node(t.size(), BackFn());
        leaf_by_storage_.emplace(static_cast<const void*>(t.data_.get()), bound.node_);
    }
    bound.graph_ = this;
    bound.requires_grad_ = true;
    return bound;
}

template <typename T>
int Graph<T>::add_node(int64_t size, BackFn back) {
    nodes_.push_back(Node{size, {}, std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
}

template <typename T>
Tensor<T> Graph<T>::record(Shape shape, std::vector<T> values, BackFn back) {
    Tensor<T> out(std::move(shape), std::move(values));
    out.graph_ = this;
    out.node_ = add_node(out.size(), std::move(back));
    out.requires_grad_ = true;
    return out;
}

template <typename T>
Tensor<T> Graph<T>::record_view(Shape shape, std::shared_ptr<std::vector<T>> values, BackFn back) {
    if (numel(shape) != static_cast<int64_t>(values->size())) {
        throw ShapeError("view shape " + shape_str(shape) + " does not match buffer size");
    }
    Tensor<T> out;
    out.shape_ = std::move(shape);
    out.data_ = std::move(values);
    out.graph_ = this;
    out.node_ = add_node(out.size(), std::move(back));
    out.requires_grad_ = true;
    return out;
}

template <typename T>
std::vector<T>& Graph<T>::grad_buf(int node) {
    Node& n = nodes_[static_cast<size_t>(node)];
    if (n.grad.empty()) n.grad.assign(static_cast<size_t>(n.size), T(0));
    return n.grad;
}

template <typename T>
bool Graph<T>::grad_present(int node) const {
    return !nodes_[static_cast<size_t>(node)].grad.empty();
}

template <typename T>
const std::vector<T>& Graph<T>::grad_of(int node) const {
    return nodes_[static_cast<size_t>(node)].grad;
}

template <typename T>
void Graph<T>::backward(const Tensor<T>& root) {
    if (root.graph() != this || root.node() < 0) {
        throw ValueError("backward root is not bound to this graph");
    }
    if (root.size() != 1) {
        throw ShapeError("backward root must be scalar, got " + shape_str(root.shape()));
    }
    if (backward_done_) throw ValueError("backward was already run on this graph");
    backward_done_ = true;

    grad_buf(root.node())[0] = T(1);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.back && !n.grad.empty()) n.back(*this, i);
    }
}

template <typename T>
std::vector<T> Graph<T>::grad(const Tensor<T>& t) const {
    int node = -1;
    if (t.graph() == this && t.node() >= 0) {
        node = t.node();
    } else {
        auto it = leaf_by_storage_.find(static_cast<const void*>(t.storage().get()));
        if (it == leaf_by_storage_.end()) {
            throw ValueError("tensor is not bound to this graph");
        }
        node = it->second;
    }
    const Node& n = nodes_[static_cast<size_t>(node)];
    if (n.grad.empty()) return std::vector<T>(static_cast<size_t>(n.size), T(0));
    return n.grad;
}

template <typename T>
Graph<T>* common_graph(std::initializer_list<const Tensor<T>*> xs) {
    Graph<T>* g = nullptr;
    for (const Tensor<T>* x : xs) {
        if (x->graph() == nullptr) continue;
        if (g != nullptr && g != x->graph()) {
            throw ValueError("operands belong to different graphs");
        }
        g = x->graph();
    }
    return g;
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;
template Graph<float>* common_graph<float>(std::initializer_list<const Tensor<float>*>);
template Graph<double>* common_graph<double>(std::initializer_list<const Tensor<double>*>);

}  // namespace rpmnet
