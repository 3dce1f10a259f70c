#include "eyepurify/tensor.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_set>

namespace eyepurify {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

template <typename T>
Tensor<T> Tensor<T>::zeros(std::vector<long> shape, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data.assign(static_cast<size_t>(node->numel()), T(0));
    node->requires_grad = requires_grad;
    node->needs = requires_grad && g_grad_enabled;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::full(std::vector<long> shape, T value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::from_data(std::vector<T> data, std::vector<long> shape,
                               bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    if (static_cast<long>(data.size()) != node->numel()) {
        throw std::invalid_argument(
            strf("tensor data size %zu does not match shape %s", data.size(),
                 shape_str(node->shape).c_str()));
    }
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->needs = requires_grad && g_grad_enabled;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from_data({value}, {1}, requires_grad);
}

template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
    if (node_->grad.empty()) {
        throw std::logic_error("tensor has no gradient (backward not run, or node does not need grad)");
    }
    return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
T Tensor<T>::value() const {
    if (numel() != 1) {
        throw std::invalid_argument(strf("value() on tensor of shape %s",
                                         shape_str(node_->shape).c_str()));
    }
    return node_->data[0];
}

template <typename T>
BackwardStats backward(const Tensor<T>& root) {
    using Node = typename Tensor<T>::Node;
    if (!root.defined() || root.numel() != 1) {
        throw std::invalid_argument("backward requires a scalar root");
    }

    // Iterative post-order DFS. The post-order list places producers before
    // consumers, and the visited set guarantees every node is emitted
    // exactly once. Only nodes that need grad are walked.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    struct Frame {
        Node* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    Node* rootn = root.node().get();
    if (rootn->needs) {
        stack.push_back({rootn, 0});
        visited.insert(rootn);
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                Node* p = f.node->parents[f.next_parent++].get();
                if (p->needs && visited.insert(p).second) {
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
    }

    BackwardStats stats;
    stats.nodes = static_cast<long>(order.size());
    if (order.empty()) return stats;

    rootn->grad.assign(1, T(1));
    // order is post-order: root last. Walk it backwards so every node's
    // gradient is complete before its backward closure runs.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) {
            if (n->grad.empty()) continue;  // unreachable from root's grad flow
            n->backward_fn(*n);
            ++stats.ops;
        }
    }
    return stats;
}

namespace detail {

template <typename T>
Tensor<T> make_op_node(std::vector<long> shape,
                       std::vector<std::shared_ptr<typename Tensor<T>::Node>> parents,
                       std::function<void(typename Tensor<T>::Node&)> backward_fn) {
    using Node = typename Tensor<T>::Node;
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data.resize(static_cast<size_t>(node->numel()));
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) {
            if (p->needs) {
                needs = true;
                break;
            }
        }
    }
    if (needs) {
        node->needs = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
std::vector<T>& ensure_grad(typename Tensor<T>::Node& node) {
    if (node.grad.empty()) {
        node.grad.assign(static_cast<size_t>(node.numel()), T(0));
    }
    return node.grad;
}

template Tensor<float> make_op_node<float>(
    std::vector<long>, std::vector<std::shared_ptr<Tensor<float>::Node>>,
    std::function<void(Tensor<float>::Node&)>);
template Tensor<double> make_op_node<double>(
    std::vector<long>, std::vector<std::shared_ptr<Tensor<double>::Node>>,
    std::function<void(Tensor<double>::Node&)>);
template std::vector<float>& ensure_grad<float>(Tensor<float>::Node&);
template std::vector<double>& ensure_grad<double>(Tensor<double>::Node&);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template BackwardStats backward<float>(const Tensor<float>&);
template BackwardStats backward<double>(const Tensor<double>&);

}  // namespace eyepurify
