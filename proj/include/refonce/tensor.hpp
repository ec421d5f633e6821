#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace refonce {

class Error : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
   public:
    using Error::Error;
};

class ValueError : public Error {
   public:
    using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
class TensorT;

namespace detail {

// One record of the dynamic graph. Non-leaf nodes keep their inputs alive and a
// closure that pushes this node's gradient into them.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool leaf = true;
    bool consumed = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(const std::vector<T>&)> backward;

    std::vector<T>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

}  // namespace detail

/// Dense row-major tensor with an attached differentiation record.
///
/// Copies are shallow: two TensorT values may refer to the same node. Use
/// clone() or stop_gradient() for an independent copy.
template <typename T>
class TensorT {
   public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    TensorT() = default;
    explicit TensorT(NodePtr node) : node_(std::move(node)) {}

    static TensorT zeros(Shape shape) { return full(std::move(shape), T(0)); }

    static TensorT full(Shape shape, T value) {
        std::vector<T> data(shape_numel(shape), value);
        return from(std::move(shape), std::move(data));
    }

    static TensorT from(Shape shape, std::vector<T> data) {
        for (auto d : shape) {
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
        if (data.size() != shape_numel(shape)) {
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
        }
        auto node = std::make_shared<detail::Node<T>>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        return TensorT(std::move(node));
    }

    static TensorT scalar(T value) { return from({1}, {value}); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T> vec() const { return node_->data; }
    T operator[](std::size_t i) const { return node_->data[i]; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->leaf; }
    const char* op() const { return node_->op; }

    TensorT& set_requires_grad(bool on) {
        if (!node_->leaf) throw Error("requires_grad can only be set on leaf tensors");
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }

    /// Accumulated gradient; all zeros when nothing has been accumulated yet.
    std::vector<T> grad() const {
        if (node_->grad.empty()) return std::vector<T>(numel(), T(0));
        return node_->grad;
    }

    std::span<T> grad_mut() { return node_->grad_buffer(); }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    TensorT clone() const { return from(shape(), node_->data); }

    detail::Node<T>* node() const { return node_.get(); }
    const NodePtr& node_ptr() const { return node_; }

   private:
    NodePtr node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

/// Stop-gradient boundary: a fresh leaf holding a copy of the values that never
/// accumulates gradient.
template <typename T>
TensorT<T> stop_gradient(const TensorT<T>& x) {
    return TensorT<T>::from(x.shape(), x.vec());
}

template <typename U, typename T>
TensorT<U> cast(const TensorT<T>& x) {
    const auto src = x.data();
    std::vector<U> out(src.begin(), src.end());
    return TensorT<U>::from(x.shape(), std::move(out));
}

namespace detail {

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
   public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool prev_;
};

namespace detail {

// Builds the result node of an operation. The backward closure receives the
// output gradient and accumulates into inputs that require grad.
template <typename T, typename Backward>
TensorT<T> make_result(Shape shape, std::vector<T> data, std::vector<TensorT<T>> inputs, const char* op,
                       Backward&& backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    node->leaf = false;
    bool needs = false;
    if (grad_enabled())
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
        node->requires_grad = true;
        for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
        node->backward = std::forward<Backward>(backward);
    }
    return TensorT<T>(std::move(node));
}

template <typename T>
inline std::vector<T>* grad_of(const TensorT<T>& t) {
    if (!t.requires_grad()) return nullptr;
    return &t.node()->grad_buffer();
}

}  // namespace detail

/// Topologically ordered view of the graph reachable from `root`; inputs
/// precede their consumers.
template <typename T>
std::vector<detail::Node<T>*> topological_order(const TensorT<T>& root) {
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            auto* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

/// Reverse-mode accumulation from a scalar loss into every leaf that requires
/// grad. Leaf gradients accumulate across calls; zero them explicitly between
/// steps. The graph is released afterwards and a second call on the same loss
/// throws.
template <typename T>
void backward(const TensorT<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward expects a scalar loss, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    auto* root = loss.node();
    if (root->consumed) throw Error("backward called twice on the same graph");
    if (!root->requires_grad) throw Error("loss does not depend on any tensor that requires grad");

    auto order = topological_order(loss);
    root->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(node->grad);
    }
    for (auto* node : order) {
        if (node->leaf) continue;
        node->backward = nullptr;
        node->inputs.clear();
        node->grad.clear();
        node->grad.shrink_to_fit();
        node->consumed = true;
    }
}

namespace kernels {

// C[MxN] (+)= A[MxK] * B[KxN]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[MxN] (+)= A[MxK] * B[NxK]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] = accumulate ? c[i * n + j] + acc : acc;
        }
    }
}

// C[MxN] (+)= A[KxM]^T * B[KxN]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace kernels

}  // namespace refonce
