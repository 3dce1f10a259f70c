#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "eyepurify/common.hpp"

namespace eyepurify {

// Thread-local switch for graph recording. Evaluations inside a NoGradGuard
// build no tape (constant results), which is what value-only objective
// evaluations in line searches use.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

struct BackwardStats {
    long nodes = 0;  // graph nodes reached from the root
    long ops = 0;    // backward closures executed (exactly once each)
};

// Reverse-mode autodiff tensor. A Tensor is a shared handle to a node that
// owns row-major data, an optional gradient, and (for op outputs) the list
// of parent nodes plus a backward closure. Node data is immutable once the
// tensor has been used as an op input; raw_data() exists for staging leaf
// values before graph use and must not be called after that point.
template <typename T>
class Tensor {
public:
    struct Node {
        std::vector<long> shape;
        std::vector<T> data;
        std::vector<T> grad;  // sized on first accumulation
        bool requires_grad = false;  // leaf flag: retain gradient
        bool needs = false;          // participates in backprop
        std::vector<std::shared_ptr<Node>> parents;
        // Reads self.grad, accumulates into parents' grads.
        std::function<void(Node&)> backward_fn;

        long numel() const {
            long n = 1;
            for (long d : shape) n *= d;
            return n;
        }
    };

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(std::vector<long> shape, bool requires_grad = false);
    static Tensor full(std::vector<long> shape, T value, bool requires_grad = false);
    static Tensor from_data(std::vector<T> data, std::vector<long> shape,
                            bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<long>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    long dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    long numel() const { return node_->numel(); }

    const std::vector<T>& data() const { return node_->data; }
    std::vector<T>& raw_data() { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    bool needs_grad() const { return node_->needs; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const;
    void zero_grad();

    // Value of a one-element tensor.
    T value() const;

    std::shared_ptr<Node> node() const { return node_; }
    Node& n() const { return *node_; }

private:
    std::shared_ptr<Node> node_;
};

// Runs reverse-mode accumulation from a scalar root. Gradients of all leaf
// tensors with requires_grad reachable from the root are accumulated (sums
// over all paths). Throws std::invalid_argument for a non-scalar root.
template <typename T>
BackwardStats backward(const Tensor<T>& root);

namespace detail {

// Allocates the result node of an op. The node records parents and a
// backward closure only when grad mode is on and some input needs grad;
// otherwise it is a plain constant.
template <typename T>
Tensor<T> make_op_node(std::vector<long> shape,
                       std::vector<std::shared_ptr<typename Tensor<T>::Node>> parents,
                       std::function<void(typename Tensor<T>::Node&)> backward_fn);

// Sizes the gradient buffer on demand and returns it.
template <typename T>
std::vector<T>& ensure_grad(typename Tensor<T>::Node& node);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template BackwardStats backward<float>(const Tensor<float>&);
extern template BackwardStats backward<double>(const Tensor<double>&);

}  // namespace eyepurify
