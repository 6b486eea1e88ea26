#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "ovlw/tensor.hpp"

namespace ovlw::ad {

// Reverse-mode autodiff over Tensor. Dynamic tape: ops compute values
// eagerly and record a backward closure. Values are double precision
// throughout; gradient correctness is held to central finite differences in
// the test suites, so every op's backward must be exact, not approximate.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;
    int64_t id = 0;

    void accumulate(const Tensor& g);
    Tensor& ensure_grad();
};

// Tape recording toggle. Disable for eval/bench forward passes.
bool& grad_enabled();
struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev_; }

  private:
    bool prev_;
};

Var constant(Tensor v);
Var param(Tensor v);  // leaf with requires_grad

// Runs reverse pass from a scalar loss; accumulates into .grad of every
// reachable node that requires grad.
void backward(const Var& loss);

// --- arithmetic ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double c);
Var add_const(const Var& x, double c);
Var neg(const Var& x);
Var add_bias(const Var& x, const Var& bias);           // [r x n] + [n]
Var mul_scalar_var(const Var& x, const Var& s);        // s is [1]
Var add_scalar_var(const Var& x, const Var& s);        // s is [1]
Var mul_colbroadcast(const Var& x, const Var& col);    // [r x n] .* [r x 1]

// --- matmul family (kern-backed) ---
Var matmul(const Var& a, const Var& b);                      // [m x k][k x n]
Var matmul_nt(const Var& a, const Var& b);                   // [m x k][n x k]^T
Var bmm(const Var& a, const Var& b, bool trans_b,            // slabs x ...
        int64_t s, int64_t m, int64_t k, int64_t n);

// --- nonlinearities ---
Var relu(const Var& x);
Var gelu(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var exp(const Var& x);
Var log_clamped(const Var& x, double min_x = 1e-30);
Var pow_const(const Var& x, double p);
Var abs(const Var& x);
Var min_elem(const Var& a, const Var& b);
Var max_elem(const Var& a, const Var& b);
Var clamp_min_const(const Var& x, double c);
// log(p/(1-p)) with p clamped to [eps, 1-eps]; zero gradient in the clamp.
Var logit(const Var& x, double eps = 1e-5);

// softmax over the last dim; optional additive mask [mask_rows x n]
// broadcast as mask[row % mask_rows].
Var softmax_rows(const Var& x, const Tensor* mask = nullptr);
Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// --- reductions ---
Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var sum_cols(const Var& x);  // [r x n] -> [r x 1]

// --- shape / indexing ---
Var narrow0(const Var& x, int64_t start, int64_t len);             // leading dim
Var narrow_cols(const Var& x, int64_t start, int64_t len);         // [r x n]
Var concat0(const std::vector<Var>& xs);
Var gather_rows(const Var& x, std::vector<int64_t> idx);
Var gather_elems(const Var& x, std::vector<int64_t> flat_idx);     // -> [k]
Var scatter_vals(std::vector<int64_t> shape, std::vector<int64_t> flat_idx, const Var& vals);
Var repeat0(const Var& x, int64_t times);
Var detach(const Var& x);
Var reshape(const Var& x, std::vector<int64_t> shape);
// [B*T x h*dh] -> [B*h x T x dh] and back
Var split_heads(const Var& x, int64_t b, int64_t t, int64_t h, int64_t dh);
Var merge_heads(const Var& x, int64_t b, int64_t t, int64_t h, int64_t dh);

// --- attention composite ---
struct AttentionWeights {
    Var wq, bq, wk, bk, wv, bv, wo, bo;
};
// q_in [B*Tq x d], k_in/v_in [B*Tk x d]; mask optional [Tq x Tk] additive.
Var multihead_attention(const Var& q_in, const Var& k_in, const Var& v_in, const AttentionWeights& w,
                        int64_t b, int64_t tq, int64_t tk, int64_t heads, const Tensor* mask = nullptr);

// L2-normalizes each row; denominator clamped at `eps`.
Var l2_normalize_rows(const Var& x, double eps = 1e-8);

}  // namespace ovlw::ad
