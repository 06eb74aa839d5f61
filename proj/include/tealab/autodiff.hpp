#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tealab/tensor.hpp"

namespace tealab {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the backward graph: a value, its accumulated adjoint, and
/// the closure that pushes that adjoint into the parents. Graphs are built
/// per minibatch (define-by-run) and freed when the root pointer drops.
struct Node {
    Tensor value;
    Tensor grad; // same shape as value, zero-initialized
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop; // empty on leaves
    const char* op = "leaf";

    bool is_leaf() const { return !backprop; }
};

/// Wrap a tensor as a graph leaf (parameter or constant input).
inline NodePtr leaf(Tensor v) {
    auto n = std::make_shared<Node>();
    n->grad = Tensor(v.shape());
    n->value = std::move(v);
    return n;
}

namespace detail {

inline NodePtr make_node(const char* op, Tensor value, std::vector<NodePtr> parents,
                         std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->grad = Tensor(value.shape());
    n->value = std::move(value);
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
    n->op = op;
    return n;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() +
                         " vs " + b.shape_string());
    }
}

/// Reverse topological order (root last), each reachable node exactly once.
inline std::vector<Node*> topo_order(const NodePtr& root) {
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative DFS; graphs can be a few thousand nodes deep for GRU unrolls.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

} // namespace detail

/// Standard matrix product with adjoint accumulation into both operands.
inline NodePtr matmul(const NodePtr& a, const NodePtr& b) {
    const Tensor& A = a->value;
    const Tensor& B = b->value;
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
        throw ShapeError("matmul: incompatible shapes " + A.shape_string() + " x " +
                         B.shape_string());
    }
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = A.data() + i * k;
        double* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = B.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return detail::make_node("matmul", std::move(out), {a, b}, [m, k, n](Node& self) {
        const Tensor& G = self.grad;
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        // dA += G * B^T
        for (std::size_t i = 0; i < m; ++i) {
            const double* grow = G.data() + i * n;
            double* garow = pa.grad.data() + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const double* brow = pb.value.data() + p * n;
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                garow[p] += acc;
            }
        }
        // dB += A^T * G
        for (std::size_t p = 0; p < k; ++p) {
            double* gbrow = pb.grad.data() + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const double av = pa.value[i * k + p];
                if (av == 0.0) continue;
                const double* grow = G.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
        }
    });
}

inline NodePtr add(const NodePtr& a, const NodePtr& b) {
    detail::require_same_shape("add", a->value, b->value);
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
    return detail::make_node("add", std::move(out), {a, b}, [](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            self.parents[0]->grad[i] += self.grad[i];
            self.parents[1]->grad[i] += self.grad[i];
        }
    });
}

inline NodePtr sub(const NodePtr& a, const NodePtr& b) {
    detail::require_same_shape("sub", a->value, b->value);
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
    return detail::make_node("sub", std::move(out), {a, b}, [](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            self.parents[0]->grad[i] += self.grad[i];
            self.parents[1]->grad[i] -= self.grad[i];
        }
    });
}

inline NodePtr hadamard(const NodePtr& a, const NodePtr& b) {
    detail::require_same_shape("hadamard", a->value, b->value);
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
    return detail::make_node("hadamard", std::move(out), {a, b}, [](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            self.parents[0]->grad[i] += self.grad[i] * self.parents[1]->value[i];
            self.parents[1]->grad[i] += self.grad[i] * self.parents[0]->value[i];
        }
    });
}

inline NodePtr scale(const NodePtr& a, double c) {
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a->value[i];
    return detail::make_node("scale", std::move(out), {a}, [c](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            self.parents[0]->grad[i] += c * self.grad[i];
        }
    });
}

inline NodePtr sigmoid(const NodePtr& a) {
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = 1.0 / (1.0 + std::exp(-a->value[i]));
    }
    return detail::make_node("sigmoid", std::move(out), {a}, [](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double s = self.value[i];
            self.parents[0]->grad[i] += self.grad[i] * s * (1.0 - s);
        }
    });
}

inline NodePtr tanh(const NodePtr& a) {
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a->value[i]);
    return detail::make_node("tanh", std::move(out), {a}, [](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double t = self.value[i];
            self.parents[0]->grad[i] += self.grad[i] * (1.0 - t * t);
        }
    });
}

/// Sigmoid on the rows flagged in `binary_rows`, identity elsewhere.
/// Used to squash binary-target outputs while continuous rows pass through.
inline NodePtr masked_sigmoid(const NodePtr& a, const std::vector<std::uint8_t>& binary_rows) {
    const Tensor& A = a->value;
    if (A.rank() != 2 || binary_rows.size() != A.rows()) {
        throw ShapeError("masked_sigmoid: mask of length " +
                         std::to_string(binary_rows.size()) + " against " + A.shape_string());
    }
    const std::size_t r = A.rows(), c = A.cols();
    Tensor out({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const double v = A[i * c + j];
            out[i * c + j] = binary_rows[i] ? 1.0 / (1.0 + std::exp(-v)) : v;
        }
    }
    return detail::make_node("masked_sigmoid", std::move(out), {a},
                             [binary_rows, r, c](Node& self) {
                                 for (std::size_t i = 0; i < r; ++i) {
                                     for (std::size_t j = 0; j < c; ++j) {
                                         const double g = self.grad[i * c + j];
                                         if (binary_rows[i]) {
                                             const double s = self.value[i * c + j];
                                             self.parents[0]->grad[i * c + j] += g * s * (1.0 - s);
                                         } else {
                                             self.parents[0]->grad[i * c + j] += g;
                                         }
                                     }
                                 }
                             });
}

/// Add a column vector to every column of a matrix (explicit shape contract;
/// there is no implicit broadcasting anywhere in the engine).
inline NodePtr colwise_add(const NodePtr& m, const NodePtr& v) {
    const Tensor& M = m->value;
    const Tensor& V = v->value;
    if (M.rank() != 2 || V.rank() != 2 || V.cols() != 1 || V.rows() != M.rows()) {
        throw ShapeError("colwise_add: " + M.shape_string() + " + " + V.shape_string());
    }
    const std::size_t r = M.rows(), c = M.cols();
    Tensor out({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = M[i * c + j] + V[i];
    }
    return detail::make_node("colwise_add", std::move(out), {m, v}, [r, c](Node& self) {
        for (std::size_t i = 0; i < r; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                const double g = self.grad[i * c + j];
                self.parents[0]->grad[i * c + j] += g;
                acc += g;
            }
            self.parents[1]->grad[i] += acc;
        }
    });
}

inline NodePtr sum(const NodePtr& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a->value.size(); ++i) acc += a->value[i];
    Tensor out({1});
    out[0] = acc;
    return detail::make_node("sum", std::move(out), {a}, [](Node& self) {
        const double g = self.grad[0];
        for (std::size_t i = 0; i < self.parents[0]->grad.size(); ++i) {
            self.parents[0]->grad[i] += g;
        }
    });
}

inline NodePtr mean(const NodePtr& a) {
    const std::size_t n = a->value.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a->value[i];
    Tensor out({1});
    out[0] = acc / static_cast<double>(n);
    return detail::make_node("mean", std::move(out), {a}, [n](Node& self) {
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) self.parents[0]->grad[i] += g;
    });
}

/// Stack matrices with equal column counts on top of each other.
inline NodePtr concat_rows(const std::vector<NodePtr>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no operands");
    const std::size_t c = parts[0]->value.cols();
    std::size_t total_rows = 0;
    for (const auto& p : parts) {
        if (p->value.rank() != 2 || p->value.cols() != c) {
            throw ShapeError("concat_rows: incompatible operand " + p->value.shape_string());
        }
        total_rows += p->value.rows();
    }
    Tensor out({total_rows, c});
    std::size_t row = 0;
    for (const auto& p : parts) {
        const std::size_t r = p->value.rows();
        for (std::size_t i = 0; i < r * c; ++i) out[row * c + i] = p->value[i];
        row += r;
    }
    return detail::make_node("concat_rows", std::move(out),
                             std::vector<NodePtr>(parts.begin(), parts.end()),
                             [c](Node& self) {
                                 std::size_t row = 0;
                                 for (auto& p : self.parents) {
                                     const std::size_t r = p->value.rows();
                                     for (std::size_t i = 0; i < r * c; ++i) {
                                         p->grad[i] += self.grad[row * c + i];
                                     }
                                     row += r;
                                 }
                             });
}

inline NodePtr concat_rows(const NodePtr& a, const NodePtr& b) {
    return concat_rows(std::vector<NodePtr>{a, b});
}

/// Rows [begin, end) of a matrix; the adjoint scatters back into place.
inline NodePtr slice_rows(const NodePtr& a, std::size_t begin, std::size_t end) {
    const Tensor& A = a->value;
    if (A.rank() != 2) throw ShapeError("slice_rows: need a matrix, got " + A.shape_string());
    if (begin >= end || end > A.rows()) {
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") out of " + std::to_string(A.rows()) +
                         " rows");
    }
    const std::size_t c = A.cols(), r = end - begin;
    Tensor out({r, c});
    for (std::size_t i = 0; i < r * c; ++i) out[i] = A[begin * c + i];
    return detail::make_node("slice_rows", std::move(out), {a}, [begin, r, c](Node& self) {
        for (std::size_t i = 0; i < r * c; ++i) {
            self.parents[0]->grad[begin * c + i] += self.grad[i];
        }
    });
}

/// Reverse pass from a scalar root. Interior adjoints are reset per call;
/// leaf gradients accumulate across calls until zero_gradients() resets them.
inline void backward(const NodePtr& root) {
    if (!root->value.is_scalar()) {
        throw ShapeError("backward: root must be scalar, got " + root->value.shape_string());
    }
    auto order = detail::topo_order(root);
    for (Node* n : order) {
        if (!n->is_leaf()) n->grad.fill(0.0);
    }
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

/// Zero every gradient reachable from the root, leaves included.
inline void zero_gradients(const NodePtr& root) {
    for (Node* n : detail::topo_order(root)) n->grad.fill(0.0);
}

/// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
/// Test oracle for every backward implementation in this project.
inline Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                         const Tensor& at, double step) {
    if (!(step > 0.0)) throw ValueError("finite_difference_gradient: step must be > 0");
    Tensor g(at.shape());
    Tensor x = at;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + step;
        const double fp = f(x);
        x[i] = orig - step;
        const double fm = f(x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * step);
    }
    return g;
}

} // namespace tealab
