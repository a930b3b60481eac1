#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "risclip/tensor.hpp"

namespace risclip {

// Reverse-mode autodiff over Tensor<T>. A forward pass builds a DAG of
// heap-allocated nodes; backward() walks it in reverse topological order.
// Graphs are per-call and freed when the root Var goes out of scope.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    void accumulate(const Tensor<T>& g);
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_leaf(Tensor<T> value, bool requires_grad);

template <typename T>
Var<T> constant(Tensor<T> value);

// Seeds d(root)/d(root) = 1 and propagates to every requires_grad leaf.
// root must be scalar (numel 1).
template <typename T>
void backward(const Var<T>& root);

// --- elementwise -----------------------------------------------------------
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> divide(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> neg(const Var<T>& a);
template <typename T> Var<T> add_const(const Var<T>& a, T c);
template <typename T> Var<T> mul_const(const Var<T>& a, T c);
template <typename T> Var<T> mul_tensor(const Var<T>& a, const Tensor<T>& c);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> gelu(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> vlog(const Var<T>& a);
template <typename T> Var<T> pow_const(const Var<T>& a, T p);
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi);

// --- broadcasting over rows of an (m,n) matrix ------------------------------
template <typename T> Var<T> add_rowvec(const Var<T>& x, const Var<T>& b);
template <typename T> Var<T> mul_rowvec(const Var<T>& x, const Var<T>& s);
template <typename T> Var<T> scalar_mul(const Var<T>& x, const Var<T>& s);  // s: numel 1

// --- linear algebra ----------------------------------------------------------
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> transpose(const Var<T>& a);
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <typename T> Var<T> linear_nobias(const Var<T>& x, const Var<T>& w);

// --- shape ------------------------------------------------------------------
template <typename T> Var<T> reshape(const Var<T>& x, std::vector<int> shape);
template <typename T> Var<T> slice_rows(const Var<T>& x, int r0, int r1);
template <typename T> Var<T> slice_cols(const Var<T>& x, int c0, int c1);
template <typename T> Var<T> concat_cols(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> concat_rows(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> gather_rows(const Var<T>& table, const std::vector<int>& ids);

// --- normalization / attention pieces ----------------------------------------
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5));
template <typename T> Var<T> softmax_rows(const Var<T>& x);
// keep[i] == 0 forces x[i] to fill (no gradient through filled entries)
template <typename T>
Var<T> masked_fill(const Var<T>& x, const Tensor<std::uint8_t>& keep, T fill);

// --- reductions ---------------------------------------------------------------
template <typename T> Var<T> sum_all(const Var<T>& x);
template <typename T> Var<T> mean_all(const Var<T>& x);

// cos(V_i, t) per row; throws if any norm underflows
template <typename T> Var<T> cosine_rows(const Var<T>& v, const Var<T>& t);

// --- conv / image ops (channels-first CHW) ------------------------------------
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int pad);
enum class Resize { bilinear, nearest };
template <typename T>
Var<T> resize2d(const Var<T>& x, int out_h, int out_w, Resize mode);
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                       const Tensor<T>& running_mean, const Tensor<T>& running_var,
                       T eps = T(1e-5));
// Normalizes with per-channel batch statistics; writes the biased mean and
// unbiased variance to the out-params so the caller can update running stats.
template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                        Tensor<T>* batch_mean, Tensor<T>* batch_var_unbiased,
                        T eps = T(1e-5));

}  // namespace risclip
