#include "risclip/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

namespace risclip {

template <typename T>
using EigMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<EigMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const EigMat<T>>;

template <typename T>
void Node<T>::accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (!grad_ready) {
        grad = Tensor<T>::zeros(value.shape);
        grad_ready = true;
    }
    for (std::int64_t i = 0; i < g.numel(); ++i) grad[i] += g[i];
}

template <typename T>
Var<T> make_leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    return make_leaf(std::move(value), false);
}

template <typename T>
static Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents,
                        std::function<void(Node<T>&)> bw) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (const auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(bw);
    }
    return n;
}

template <typename T>
void backward(const Var<T>& root) {
    if (root->value.numel() != 1)
        throw std::logic_error("backward: root must be scalar, got " + shape_str(root->value.shape));
    if (!root->requires_grad) return;

    // iterative DFS postorder over the requires_grad subgraph
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad = Tensor<T>::full({1}, T(1));
    root->grad_ready = true;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->grad_ready) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------

template <typename T>
static void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a->value.shape) + " vs " + shape_str(b->value.shape));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
        a->accumulate(self.grad);
        b->accumulate(self.grad);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    return make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
        a->accumulate(self.grad);
        if (b->requires_grad) {
            Tensor<T> g = self.grad;
            for (auto& x : g.data) x = -x;
            b->accumulate(g);
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return make_node<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
        if (a->requires_grad) {
            Tensor<T> g = self.grad;
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= b->value[i];
            a->accumulate(g);
        }
        if (b->requires_grad) {
            Tensor<T> g = self.grad;
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= a->value[i];
            b->accumulate(g);
        }
    });
}

template <typename T>
Var<T> divide(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a, b, "divide");
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= b->value[i];
    Tensor<T> outc = out;
    return make_node<T>(std::move(out), {a, b}, [a, b, outc](Node<T>& self) {
        if (a->requires_grad) {
            Tensor<T> g = self.grad;
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] /= b->value[i];
            a->accumulate(g);
        }
        if (b->requires_grad) {
            Tensor<T> g = self.grad;
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= -outc[i] / b->value[i];
            b->accumulate(g);
        }
    });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
    return mul_const(a, T(-1));
}

template <typename T>
Var<T> add_const(const Var<T>& a, T c) {
    Tensor<T> out = a->value;
    for (auto& x : out.data) x += c;
    return make_node<T>(std::move(out), {a}, [a](Node<T>& self) { a->accumulate(self.grad); });
}

template <typename T>
Var<T> mul_const(const Var<T>& a, T c) {
    Tensor<T> out = a->value;
    for (auto& x : out.data) x *= c;
    return make_node<T>(std::move(out), {a}, [a, c](Node<T>& self) {
        Tensor<T> g = self.grad;
        for (auto& x : g.data) x *= c;
        a->accumulate(g);
    });
}

template <typename T>
Var<T> mul_tensor(const Var<T>& a, const Tensor<T>& c) {
    if (!a->value.same_shape(c))
        throw std::invalid_argument("mul_tensor: shape mismatch");
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
    return make_node<T>(std::move(out), {a}, [a, c](Node<T>& self) {
        Tensor<T> g = self.grad;
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= c[i];
        a->accumulate(g);
    });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    Tensor<T> out = a->value;
    for (auto& x : out.data) x = x > T(0) ? x : T(0);
    return make_node<T>(std::move(out), {a}, [a](Node<T>& self) {
        Tensor<T> g = self.grad;
        for (std::int64_t i = 0; i < g.numel(); ++i)
            if (a->value[i] <= T(0)) g[i] = T(0);
        a->accumulate(g);
    });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
    Tensor<T> out = a->value;
    for (auto& x : out.data) {
        const double v = static_cast<double>(x);
        x = static_cast<T>(0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)));
    }
    return make_node<T>(std::move(out), {a}, [a](Node<T>& self) {
        Tensor<T> g = self.grad;
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            const double v = static_cast<double>(a->value[i]);
            const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
            const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
            g[i] *= static_cast<T>(cdf + v * pdf);
        }
        a->accumulate(g);
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> out = a->value;
    for (auto& x : out.data) x = T(1) / (T(1) + std::exp(-x));
    Tensor<T> outc = out;
    return make_node<T>(std::move(out), {a}, [a, outc](Node<T>& self) {
        Tensor<T> g = self.grad;
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= outc[i] * (T(1) - outc[i]);
        a->accumulate(g);
    });
}

template <typename T>
Var<T> vlog(const Var<T>& a) {
    Tensor<T> out = a->value;
    for (auto& x : out.data) x = std::log(x);
    return make_node<T>(std::move(out), {a}, [a](Node<T>& self) {
        Tensor<T> g = self.grad;
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] /= a->value[i];
        a->accumulate(g);
    });
}

template <typename T>
Var<T> pow_const(const Var<T>& a, T p) {
    Tensor<T> out = a->value;
    for (auto& x : out.data) x = std::pow(x, p);
    return make_node<T>(std::move(out), {a}, [a, p](Node<T>& self) {
        Tensor<T> g = self.grad;
        for (std::int64_t i = 0; i < g.numel(); ++i)
            g[i] *= p * std::pow(a->value[i], p - T(1));
        a->accumulate(g);
    });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
    Tensor<T> out = a->value;
    for (auto& x : out.data) x = std::min(hi, std::max(lo, x));
    return make_node<T>(std::move(out), {a}, [a, lo, hi](Node<T>& self) {
        Tensor<T> g = self.grad;
        for (std::int64_t i = 0; i < g.numel(); ++i)
            if (a->value[i] < lo || a->value[i] > hi) g[i] = T(0);
        a->accumulate(g);
    });
}

// ---------------------------------------------------------------------------

template <typename T>
static void check_mat_vec(const Var<T>& x, const Var<T>& v, const char* op) {
    if (x->value.rank() != 2 || v->value.rank() != 1 || x->value.dim(1) != v->value.dim(0))
        throw std::invalid_argument(std::string(op) + ": want (m,n) and (n), got " +
                                    shape_str(x->value.shape) + " and " + shape_str(v->value.shape));
}

template <typename T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& b) {
    check_mat_vec(x, b, "add_rowvec");
    const int m = x->value.dim(0), n = x->value.dim(1);
    Tensor<T> out = x->value;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) += b->value[j];
    return make_node<T>(std::move(out), {x, b}, [x, b, m, n](Node<T>& self) {
        x->accumulate(self.grad);
        if (b->requires_grad) {
            Tensor<T> g({n});
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) g[j] += self.grad.at(i, j);
            b->accumulate(g);
        }
    });
}

template <typename T>
Var<T> mul_rowvec(const Var<T>& x, const Var<T>& s) {
    check_mat_vec(x, s, "mul_rowvec");
    const int m = x->value.dim(0), n = x->value.dim(1);
    Tensor<T> out = x->value;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) *= s->value[j];
    return make_node<T>(std::move(out), {x, s}, [x, s, m, n](Node<T>& self) {
        if (x->requires_grad) {
            Tensor<T> g = self.grad;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) g.at(i, j) *= s->value[j];
            x->accumulate(g);
        }
        if (s->requires_grad) {
            Tensor<T> g({n});
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) g[j] += self.grad.at(i, j) * x->value.at(i, j);
            s->accumulate(g);
        }
    });
}

template <typename T>
Var<T> scalar_mul(const Var<T>& x, const Var<T>& s) {
    if (s->value.numel() != 1) throw std::invalid_argument("scalar_mul: scale must have numel 1");
    const T sv = s->value[0];
    Tensor<T> out = x->value;
    for (auto& v : out.data) v *= sv;
    return make_node<T>(std::move(out), {x, s}, [x, s, sv](Node<T>& self) {
        if (x->requires_grad) {
            Tensor<T> g = self.grad;
            for (auto& v : g.data) v *= sv;
            x->accumulate(g);
        }
        if (s->requires_grad) {
            Tensor<T> g({1});
            for (std::int64_t i = 0; i < self.grad.numel(); ++i)
                g[0] += self.grad[i] * x->value[i];
            s->accumulate(g);
        }
    });
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(1) != b->value.dim(0))
        throw std::invalid_argument("matmul: bad shapes " + shape_str(a->value.shape) + " x " +
                                    shape_str(b->value.shape));
    const int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    Tensor<T> out({m, n});
    MapMat<T>(out.data.data(), m, n) = CMapMat<T>(a->value.data.data(), m, k) *
                                       CMapMat<T>(b->value.data.data(), k, n);
    return make_node<T>(std::move(out), {a, b}, [a, b, m, k, n](Node<T>& self) {
        CMapMat<T> g(self.grad.data.data(), m, n);
        if (a->requires_grad) {
            Tensor<T> ga({m, k});
            MapMat<T>(ga.data.data(), m, k) = g * CMapMat<T>(b->value.data.data(), k, n).transpose();
            a->accumulate(ga);
        }
        if (b->requires_grad) {
            Tensor<T> gb({k, n});
            MapMat<T>(gb.data.data(), k, n) = CMapMat<T>(a->value.data.data(), m, k).transpose() * g;
            b->accumulate(gb);
        }
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    if (a->value.rank() != 2) throw std::invalid_argument("transpose: rank-2 only");
    const int m = a->value.dim(0), n = a->value.dim(1);
    Tensor<T> out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = a->value.at(i, j);
    return make_node<T>(std::move(out), {a}, [a, m, n](Node<T>& self) {
        Tensor<T> g({m, n});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) g.at(i, j) = self.grad.at(j, i);
        a->accumulate(g);
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    return add_rowvec(matmul(x, w), b);
}

template <typename T>
Var<T> linear_nobias(const Var<T>& x, const Var<T>& w) {
    return matmul(x, w);
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<int> shape) {
    if (numel_of(shape) != x->value.numel())
        throw std::invalid_argument("reshape: numel mismatch " + shape_str(x->value.shape) +
                                    " -> " + shape_str(shape));
    Tensor<T> out;
    out.shape = shape;
    out.data = x->value.data;
    auto old_shape = x->value.shape;
    return make_node<T>(std::move(out), {x}, [x, old_shape](Node<T>& self) {
        Tensor<T> g;
        g.shape = old_shape;
        g.data = self.grad.data;
        x->accumulate(g);
    });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, int r0, int r1) {
    if (x->value.rank() != 2 || r0 < 0 || r1 > x->value.dim(0) || r0 >= r1)
        throw std::invalid_argument("slice_rows: bad range");
    const int n = x->value.dim(1);
    Tensor<T> out({r1 - r0, n});
    for (int i = r0; i < r1; ++i)
        for (int j = 0; j < n; ++j) out.at(i - r0, j) = x->value.at(i, j);
    return make_node<T>(std::move(out), {x}, [x, r0, r1, n](Node<T>& self) {
        Tensor<T> g(x->value.shape);
        for (int i = r0; i < r1; ++i)
            for (int j = 0; j < n; ++j) g.at(i, j) = self.grad.at(i - r0, j);
        x->accumulate(g);
    });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, int c0, int c1) {
    if (x->value.rank() != 2 || c0 < 0 || c1 > x->value.dim(1) || c0 >= c1)
        throw std::invalid_argument("slice_cols: bad range");
    const int m = x->value.dim(0);
    Tensor<T> out({m, c1 - c0});
    for (int i = 0; i < m; ++i)
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = x->value.at(i, j);
    return make_node<T>(std::move(out), {x}, [x, c0, c1, m](Node<T>& self) {
        Tensor<T> g(x->value.shape);
        for (int i = 0; i < m; ++i)
            for (int j = c0; j < c1; ++j) g.at(i, j) = self.grad.at(i, j - c0);
        x->accumulate(g);
    });
}

template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(0) != b->value.dim(0))
        throw std::invalid_argument("concat_cols: row mismatch");
    const int m = a->value.dim(0), na = a->value.dim(1), nb = b->value.dim(1);
    Tensor<T> out({m, na + nb});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < na; ++j) out.at(i, j) = a->value.at(i, j);
        for (int j = 0; j < nb; ++j) out.at(i, na + j) = b->value.at(i, j);
    }
    return make_node<T>(std::move(out), {a, b}, [a, b, m, na, nb](Node<T>& self) {
        if (a->requires_grad) {
            Tensor<T> g({m, na});
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < na; ++j) g.at(i, j) = self.grad.at(i, j);
            a->accumulate(g);
        }
        if (b->requires_grad) {
            Tensor<T> g({m, nb});
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < nb; ++j) g.at(i, j) = self.grad.at(i, na + j);
            b->accumulate(g);
        }
    });
}

template <typename T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(1) != b->value.dim(1))
        throw std::invalid_argument("concat_rows: col mismatch");
    const int ma = a->value.dim(0), mb = b->value.dim(0), n = a->value.dim(1);
    Tensor<T> out({ma + mb, n});
    for (int i = 0; i < ma; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) = a->value.at(i, j);
    for (int i = 0; i < mb; ++i)
        for (int j = 0; j < n; ++j) out.at(ma + i, j) = b->value.at(i, j);
    return make_node<T>(std::move(out), {a, b}, [a, b, ma, mb, n](Node<T>& self) {
        if (a->requires_grad) {
            Tensor<T> g({ma, n});
            for (int i = 0; i < ma; ++i)
                for (int j = 0; j < n; ++j) g.at(i, j) = self.grad.at(i, j);
            a->accumulate(g);
        }
        if (b->requires_grad) {
            Tensor<T> g({mb, n});
            for (int i = 0; i < mb; ++i)
                for (int j = 0; j < n; ++j) g.at(i, j) = self.grad.at(ma + i, j);
            b->accumulate(g);
        }
    });
}

template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& ids) {
    if (table->value.rank() != 2) throw std::invalid_argument("gather_rows: rank-2 table");
    const int rows = table->value.dim(0), n = table->value.dim(1);
    for (int id : ids)
        if (id < 0 || id >= rows) throw std::out_of_range("gather_rows: id out of range");
    Tensor<T> out({static_cast<int>(ids.size()), n});
    for (size_t r = 0; r < ids.size(); ++r)
        for (int j = 0; j < n; ++j) out.at(static_cast<int>(r), j) = table->value.at(ids[r], j);
    return make_node<T>(std::move(out), {table}, [table, ids, n](Node<T>& self) {
        Tensor<T> g(table->value.shape);
        for (size_t r = 0; r < ids.size(); ++r)
            for (int j = 0; j < n; ++j) g.at(ids[r], j) += self.grad.at(static_cast<int>(r), j);
        table->accumulate(g);
    });
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
    check_mat_vec(x, gain, "layer_norm");
    check_mat_vec(x, bias, "layer_norm");
    const int m = x->value.dim(0), n = x->value.dim(1);
    Tensor<T> xhat({m, n});
    Tensor<T> inv_std({m});
    for (int i = 0; i < m; ++i) {
        T mean = 0;
        for (int j = 0; j < n; ++j) mean += x->value.at(i, j);
        mean /= T(n);
        T var = 0;
        for (int j = 0; j < n; ++j) {
            const T d = x->value.at(i, j) - mean;
            var += d * d;
        }
        var /= T(n);
        inv_std[i] = T(1) / std::sqrt(var + eps);
        for (int j = 0; j < n; ++j) xhat.at(i, j) = (x->value.at(i, j) - mean) * inv_std[i];
    }
    Tensor<T> out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) = xhat.at(i, j) * gain->value[j] + bias->value[j];
    return make_node<T>(std::move(out), {x, gain, bias},
                        [x, gain, bias, xhat, inv_std, m, n](Node<T>& self) {
        if (gain->requires_grad) {
            Tensor<T> g({n});
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) g[j] += self.grad.at(i, j) * xhat.at(i, j);
            gain->accumulate(g);
        }
        if (bias->requires_grad) {
            Tensor<T> g({n});
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) g[j] += self.grad.at(i, j);
            bias->accumulate(g);
        }
        if (x->requires_grad) {
            Tensor<T> g({m, n});
            for (int i = 0; i < m; ++i) {
                T mean_dxhat = 0, mean_dxhat_xhat = 0;
                for (int j = 0; j < n; ++j) {
                    const T dxh = self.grad.at(i, j) * gain->value[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xhat.at(i, j);
                }
                mean_dxhat /= T(n);
                mean_dxhat_xhat /= T(n);
                for (int j = 0; j < n; ++j) {
                    const T dxh = self.grad.at(i, j) * gain->value[j];
                    g.at(i, j) = inv_std[i] * (dxh - mean_dxhat - xhat.at(i, j) * mean_dxhat_xhat);
                }
            }
            x->accumulate(g);
        }
    });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
    if (x->value.rank() != 2) throw std::invalid_argument("softmax_rows: rank-2 only");
    const int m = x->value.dim(0), n = x->value.dim(1);
    Tensor<T> out({m, n});
    for (int i = 0; i < m; ++i) {
        T mx = x->value.at(i, 0);
        for (int j = 1; j < n; ++j) mx = std::max(mx, x->value.at(i, j));
        T sum = 0;
        for (int j = 0; j < n; ++j) {
            out.at(i, j) = std::exp(x->value.at(i, j) - mx);
            sum += out.at(i, j);
        }
        for (int j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    Tensor<T> outc = out;
    return make_node<T>(std::move(out), {x}, [x, outc, m, n](Node<T>& self) {
        Tensor<T> g({m, n});
        for (int i = 0; i < m; ++i) {
            T dot = 0;
            for (int j = 0; j < n; ++j) dot += self.grad.at(i, j) * outc.at(i, j);
            for (int j = 0; j < n; ++j)
                g.at(i, j) = outc.at(i, j) * (self.grad.at(i, j) - dot);
        }
        x->accumulate(g);
    });
}

template <typename T>
Var<T> masked_fill(const Var<T>& x, const Tensor<std::uint8_t>& keep, T fill) {
    if (x->value.shape != keep.shape) throw std::invalid_argument("masked_fill: shape mismatch");
    Tensor<T> out = x->value;
    for (std::int64_t i = 0; i < out.numel(); ++i)
        if (!keep[i]) out[i] = fill;
    return make_node<T>(std::move(out), {x}, [x, keep](Node<T>& self) {
        Tensor<T> g = self.grad;
        for (std::int64_t i = 0; i < g.numel(); ++i)
            if (!keep[i]) g[i] = T(0);
        x->accumulate(g);
    });
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    Tensor<T> out({1});
    for (const T& v : x->value.data) out[0] += v;
    return make_node<T>(std::move(out), {x}, [x](Node<T>& self) {
        Tensor<T> g = Tensor<T>::full(x->value.shape, self.grad[0]);
        x->accumulate(g);
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    return mul_const(sum_all(x), T(1) / T(x->value.numel()));
}

template <typename T>
Var<T> cosine_rows(const Var<T>& v, const Var<T>& t) {
    if (v->value.rank() != 2 || t->value.rank() != 2 || t->value.dim(0) != 1 ||
        v->value.dim(1) != t->value.dim(1))
        throw std::invalid_argument("cosine_rows: want (n,d) and (1,d)");
    const int n = v->value.dim(0), d = v->value.dim(1);
    T nt = 0;
    for (int j = 0; j < d; ++j) nt += t->value.at(0, j) * t->value.at(0, j);
    nt = std::sqrt(nt);
    if (nt < T(1e-12)) throw std::domain_error("cosine_rows: sentence feature has zero norm");
    Tensor<T> norms({n}), dots({n}), out({n});
    for (int i = 0; i < n; ++i) {
        T nv = 0, dot = 0;
        for (int j = 0; j < d; ++j) {
            nv += v->value.at(i, j) * v->value.at(i, j);
            dot += v->value.at(i, j) * t->value.at(0, j);
        }
        nv = std::sqrt(nv);
        if (nv < T(1e-12))
            throw std::domain_error("cosine_rows: patch feature row " + std::to_string(i) +
                                    " has zero norm");
        norms[i] = nv;
        dots[i] = dot;
        out[i] = dot / (nv * nt);
    }
    return make_node<T>(std::move(out), {v, t}, [v, t, norms, dots, nt, n, d](Node<T>& self) {
        if (v->requires_grad) {
            Tensor<T> g({n, d});
            for (int i = 0; i < n; ++i) {
                const T go = self.grad[i];
                const T inv = T(1) / (norms[i] * nt);
                const T k = dots[i] / (norms[i] * norms[i] * norms[i] * nt);
                for (int j = 0; j < d; ++j)
                    g.at(i, j) = go * (t->value.at(0, j) * inv - v->value.at(i, j) * k);
            }
            v->accumulate(g);
        }
        if (t->requires_grad) {
            Tensor<T> g({1, d});
            for (int i = 0; i < n; ++i) {
                const T go = self.grad[i];
                const T inv = T(1) / (norms[i] * nt);
                const T k = dots[i] / (norms[i] * nt * nt * nt);
                for (int j = 0; j < d; ++j)
                    g.at(0, j) += go * (v->value.at(i, j) * inv - t->value.at(0, j) * k);
            }
            t->accumulate(g);
        }
    });
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int pad) {
    if (x->value.rank() != 3 || w->value.rank() != 4 || b->value.rank() != 1)
        throw std::invalid_argument("conv2d: want x(C,H,W) w(Co,Ci,kh,kw) b(Co)");
    const int ci = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
    const int co = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
    if (w->value.dim(1) != ci || b->value.dim(0) != co)
        throw std::invalid_argument("conv2d: channel mismatch");
    Tensor<T> out({co, h, wd});
    for (int oc = 0; oc < co; ++oc)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < wd; ++xx) {
                T acc = b->value[oc];
                for (int icn = 0; icn < ci; ++icn)
                    for (int dy = 0; dy < kh; ++dy) {
                        const int sy = y + dy - pad;
                        if (sy < 0 || sy >= h) continue;
                        for (int dx = 0; dx < kw; ++dx) {
                            const int sx = xx + dx - pad;
                            if (sx < 0 || sx >= wd) continue;
                            acc += w->value.at(oc, icn, dy, dx) * x->value.at(icn, sy, sx);
                        }
                    }
                out.at(oc, y, xx) = acc;
            }
    return make_node<T>(std::move(out), {x, w, b},
                        [x, w, b, ci, h, wd, co, kh, kw, pad](Node<T>& self) {
        Tensor<T> gx, gw, gb;
        const bool nx = x->requires_grad, nw = w->requires_grad, nb = b->requires_grad;
        if (nx) gx = Tensor<T>(x->value.shape);
        if (nw) gw = Tensor<T>(w->value.shape);
        if (nb) gb = Tensor<T>(b->value.shape);
        for (int oc = 0; oc < co; ++oc)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < wd; ++xx) {
                    const T go = self.grad.at(oc, y, xx);
                    if (go == T(0)) continue;
                    if (nb) gb[oc] += go;
                    for (int icn = 0; icn < ci; ++icn)
                        for (int dy = 0; dy < kh; ++dy) {
                            const int sy = y + dy - pad;
                            if (sy < 0 || sy >= h) continue;
                            for (int dx = 0; dx < kw; ++dx) {
                                const int sx = xx + dx - pad;
                                if (sx < 0 || sx >= wd) continue;
                                if (nx) gx.at(icn, sy, sx) += go * w->value.at(oc, icn, dy, dx);
                                if (nw) gw.at(oc, icn, dy, dx) += go * x->value.at(icn, sy, sx);
                            }
                        }
                }
        if (nx) x->accumulate(gx);
        if (nw) w->accumulate(gw);
        if (nb) b->accumulate(gb);
    });
}

template <typename T>
Var<T> resize2d(const Var<T>& x, int out_h, int out_w, Resize mode) {
    if (x->value.rank() != 3) throw std::invalid_argument("resize2d: want (C,H,W)");
    const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
    Tensor<T> out({c, out_h, out_w});
    if (mode == Resize::nearest) {
        std::vector<int> src_y(out_h), src_x(out_w);
        for (int y = 0; y < out_h; ++y) src_y[y] = std::min(h - 1, static_cast<int>(y * sy));
        for (int xx = 0; xx < out_w; ++xx) src_x[xx] = std::min(w - 1, static_cast<int>(xx * sx));
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < out_h; ++y)
                for (int xx = 0; xx < out_w; ++xx)
                    out.at(ch, y, xx) = x->value.at(ch, src_y[y], src_x[xx]);
        return make_node<T>(std::move(out), {x}, [x, c, out_h, out_w, src_y, src_x](Node<T>& self) {
            Tensor<T> g(x->value.shape);
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < out_h; ++y)
                    for (int xx = 0; xx < out_w; ++xx)
                        g.at(ch, src_y[y], src_x[xx]) += self.grad.at(ch, y, xx);
            x->accumulate(g);
        });
    }
    // bilinear, half-pixel centers
    struct Lerp { int i0, i1; T w0, w1; };
    std::vector<Lerp> ly(out_h), lx(out_w);
    auto make_lerp = [](int out_n, double scale, int in_n, std::vector<Lerp>& l) {
        for (int o = 0; o < out_n; ++o) {
            double s = (o + 0.5) * scale - 0.5;
            s = std::max(0.0, std::min(s, static_cast<double>(in_n - 1)));
            const int i0 = static_cast<int>(s);
            const int i1 = std::min(i0 + 1, in_n - 1);
            const T w1 = static_cast<T>(s - i0);
            l[o] = {i0, i1, T(1) - w1, w1};
        }
    };
    make_lerp(out_h, sy, h, ly);
    make_lerp(out_w, sx, w, lx);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < out_h; ++y)
            for (int xx = 0; xx < out_w; ++xx)
                out.at(ch, y, xx) =
                    ly[y].w0 * (lx[xx].w0 * x->value.at(ch, ly[y].i0, lx[xx].i0) +
                                lx[xx].w1 * x->value.at(ch, ly[y].i0, lx[xx].i1)) +
                    ly[y].w1 * (lx[xx].w0 * x->value.at(ch, ly[y].i1, lx[xx].i0) +
                                lx[xx].w1 * x->value.at(ch, ly[y].i1, lx[xx].i1));
    return make_node<T>(std::move(out), {x}, [x, c, out_h, out_w, ly, lx](Node<T>& self) {
        Tensor<T> g(x->value.shape);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < out_h; ++y)
                for (int xx = 0; xx < out_w; ++xx) {
                    const T go = self.grad.at(ch, y, xx);
                    g.at(ch, ly[y].i0, lx[xx].i0) += go * ly[y].w0 * lx[xx].w0;
                    g.at(ch, ly[y].i0, lx[xx].i1) += go * ly[y].w0 * lx[xx].w1;
                    g.at(ch, ly[y].i1, lx[xx].i0) += go * ly[y].w1 * lx[xx].w0;
                    g.at(ch, ly[y].i1, lx[xx].i1) += go * ly[y].w1 * lx[xx].w1;
                }
        x->accumulate(g);
    });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    if (a->value.rank() != 3 || b->value.rank() != 3 || a->value.dim(1) != b->value.dim(1) ||
        a->value.dim(2) != b->value.dim(2))
        throw std::invalid_argument("concat_channels: spatial mismatch " +
                                    shape_str(a->value.shape) + " vs " + shape_str(b->value.shape));
    const int ca = a->value.dim(0), cb = b->value.dim(0);
    const int h = a->value.dim(1), w = a->value.dim(2);
    Tensor<T> out({ca + cb, h, w});
    std::copy(a->value.data.begin(), a->value.data.end(), out.data.begin());
    std::copy(b->value.data.begin(), b->value.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(ca) * h * w);
    return make_node<T>(std::move(out), {a, b}, [a, b, ca, cb, h, w](Node<T>& self) {
        if (a->requires_grad) {
            Tensor<T> g({ca, h, w});
            std::copy(self.grad.data.begin(),
                      self.grad.data.begin() + static_cast<std::ptrdiff_t>(ca) * h * w,
                      g.data.begin());
            a->accumulate(g);
        }
        if (b->requires_grad) {
            Tensor<T> g({cb, h, w});
            std::copy(self.grad.data.begin() + static_cast<std::ptrdiff_t>(ca) * h * w,
                      self.grad.data.end(), g.data.begin());
            b->accumulate(g);
        }
    });
}

template <typename T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                       const Tensor<T>& running_mean, const Tensor<T>& running_var, T eps) {
    if (x->value.rank() != 3) throw std::invalid_argument("batch_norm_eval: want (C,H,W)");
    const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    Tensor<T> inv_std({c});
    for (int ch = 0; ch < c; ++ch) inv_std[ch] = T(1) / std::sqrt(running_var[ch] + eps);
    Tensor<T> out(x->value.shape);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                out.at(ch, y, xx) = (x->value.at(ch, y, xx) - running_mean[ch]) * inv_std[ch] *
                                        gain->value[ch] +
                                    bias->value[ch];
    return make_node<T>(std::move(out), {x, gain, bias},
                        [x, gain, bias, running_mean, inv_std, c, h, w](Node<T>& self) {
        if (x->requires_grad) {
            Tensor<T> g(x->value.shape);
            for (int ch = 0; ch < c; ++ch) {
                const T k = inv_std[ch] * gain->value[ch];
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) g.at(ch, y, xx) = self.grad.at(ch, y, xx) * k;
            }
            x->accumulate(g);
        }
        if (gain->requires_grad) {
            Tensor<T> g({c});
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx)
                        g[ch] += self.grad.at(ch, y, xx) *
                                 (x->value.at(ch, y, xx) - running_mean[ch]) * inv_std[ch];
            gain->accumulate(g);
        }
        if (bias->requires_grad) {
            Tensor<T> g({c});
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) g[ch] += self.grad.at(ch, y, xx);
            bias->accumulate(g);
        }
    });
}

template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                        Tensor<T>* batch_mean, Tensor<T>* batch_var_unbiased, T eps) {
    if (x->value.rank() != 3) throw std::invalid_argument("batch_norm_train: want (C,H,W)");
    const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    const std::int64_t m = static_cast<std::int64_t>(h) * w;
    Tensor<T> mean({c}), inv_std({c});
    Tensor<T> xhat(x->value.shape);
    if (batch_mean) *batch_mean = Tensor<T>({c});
    if (batch_var_unbiased) *batch_var_unbiased = Tensor<T>({c});
    for (int ch = 0; ch < c; ++ch) {
        T mu = 0;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) mu += x->value.at(ch, y, xx);
        mu /= T(m);
        T var = 0;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                const T d = x->value.at(ch, y, xx) - mu;
                var += d * d;
            }
        var /= T(m);
        mean[ch] = mu;
        inv_std[ch] = T(1) / std::sqrt(var + eps);
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                xhat.at(ch, y, xx) = (x->value.at(ch, y, xx) - mu) * inv_std[ch];
        if (batch_mean) (*batch_mean)[ch] = mu;
        if (batch_var_unbiased)
            (*batch_var_unbiased)[ch] = m > 1 ? var * T(m) / T(m - 1) : var;
    }
    Tensor<T> out(x->value.shape);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                out.at(ch, y, xx) = xhat.at(ch, y, xx) * gain->value[ch] + bias->value[ch];
    return make_node<T>(std::move(out), {x, gain, bias},
                        [x, gain, bias, xhat, inv_std, c, h, w, m](Node<T>& self) {
        if (gain->requires_grad) {
            Tensor<T> g({c});
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx)
                        g[ch] += self.grad.at(ch, y, xx) * xhat.at(ch, y, xx);
            gain->accumulate(g);
        }
        if (bias->requires_grad) {
            Tensor<T> g({c});
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) g[ch] += self.grad.at(ch, y, xx);
            bias->accumulate(g);
        }
        if (x->requires_grad) {
            Tensor<T> g(x->value.shape);
            for (int ch = 0; ch < c; ++ch) {
                T mean_d = 0, mean_dx = 0;
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) {
                        const T dxh = self.grad.at(ch, y, xx) * gain->value[ch];
                        mean_d += dxh;
                        mean_dx += dxh * xhat.at(ch, y, xx);
                    }
                mean_d /= T(m);
                mean_dx /= T(m);
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) {
                        const T dxh = self.grad.at(ch, y, xx) * gain->value[ch];
                        g.at(ch, y, xx) =
                            inv_std[ch] * (dxh - mean_d - xhat.at(ch, y, xx) * mean_dx);
                    }
            }
            x->accumulate(g);
        }
    });
}

// ---------------------------------------------------------------------------

#define RISCLIP_INSTANTIATE(T)                                                               \
    template struct Node<T>;                                                                 \
    template Var<T> make_leaf<T>(Tensor<T>, bool);                                           \
    template Var<T> constant<T>(Tensor<T>);                                                  \
    template void backward<T>(const Var<T>&);                                                \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                    \
    template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                    \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                    \
    template Var<T> divide<T>(const Var<T>&, const Var<T>&);                                 \
    template Var<T> neg<T>(const Var<T>&);                                                   \
    template Var<T> add_const<T>(const Var<T>&, T);                                          \
    template Var<T> mul_const<T>(const Var<T>&, T);                                          \
    template Var<T> mul_tensor<T>(const Var<T>&, const Tensor<T>&);                          \
    template Var<T> relu<T>(const Var<T>&);                                                  \
    template Var<T> gelu<T>(const Var<T>&);                                                  \
    template Var<T> sigmoid<T>(const Var<T>&);                                               \
    template Var<T> vlog<T>(const Var<T>&);                                                  \
    template Var<T> pow_const<T>(const Var<T>&, T);                                          \
    template Var<T> clamp<T>(const Var<T>&, T, T);                                           \
    template Var<T> add_rowvec<T>(const Var<T>&, const Var<T>&);                             \
    template Var<T> mul_rowvec<T>(const Var<T>&, const Var<T>&);                             \
    template Var<T> scalar_mul<T>(const Var<T>&, const Var<T>&);                             \
    template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                 \
    template Var<T> transpose<T>(const Var<T>&);                                             \
    template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                  \
    template Var<T> linear_nobias<T>(const Var<T>&, const Var<T>&);                          \
    template Var<T> reshape<T>(const Var<T>&, std::vector<int>);                             \
    template Var<T> slice_rows<T>(const Var<T>&, int, int);                                  \
    template Var<T> slice_cols<T>(const Var<T>&, int, int);                                  \
    template Var<T> concat_cols<T>(const Var<T>&, const Var<T>&);                            \
    template Var<T> concat_rows<T>(const Var<T>&, const Var<T>&);                            \
    template Var<T> gather_rows<T>(const Var<T>&, const std::vector<int>&);                  \
    template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);           \
    template Var<T> softmax_rows<T>(const Var<T>&);                                          \
    template Var<T> masked_fill<T>(const Var<T>&, const Tensor<std::uint8_t>&, T);           \
    template Var<T> sum_all<T>(const Var<T>&);                                               \
    template Var<T> mean_all<T>(const Var<T>&);                                              \
    template Var<T> cosine_rows<T>(const Var<T>&, const Var<T>&);                            \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int);             \
    template Var<T> resize2d<T>(const Var<T>&, int, int, Resize);                            \
    template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                        \
    template Var<T> batch_norm_eval<T>(const Var<T>&, const Var<T>&, const Var<T>&,          \
                                       const Tensor<T>&, const Tensor<T>&, T);               \
    template Var<T> batch_norm_train<T>(const Var<T>&, const Var<T>&, const Var<T>&,         \
                                        Tensor<T>*, Tensor<T>*, T);

RISCLIP_INSTANTIATE(float)
RISCLIP_INSTANTIATE(double)

}  // namespace risclip
