#include "ovlw/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "ovlw/errors.hpp"
#include "ovlw/kernels.hpp"

namespace ovlw::ad {

namespace {
std::atomic<int64_t> g_next_id{1};

Var make_node(Tensor val, std::vector<Var> parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->id = g_next_id.fetch_add(1);
    bool rec = grad_enabled();
    bool req = false;
    if (rec)
        for (const auto& p : parents)
            if (p && p->requires_grad) req = true;
    if (req) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(bw);
    }
    return n;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

void Node::accumulate(const Tensor& g) {
    if (grad.numel() == 0) grad = Tensor::zeros(val.shape());
    OVLW_REQUIRE(g.numel() == grad.numel(), InvalidInput, "gradient shape mismatch");
    double* dst = grad.data();
    const double* src = g.data();
    for (int64_t i = 0; i < grad.numel(); ++i) dst[i] += src[i];
}

Tensor& Node::ensure_grad() {
    if (grad.numel() == 0) grad = Tensor::zeros(val.shape());
    return grad;
}

Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->id = g_next_id.fetch_add(1);
    return n;
}

Var param(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->id = g_next_id.fetch_add(1);
    n->requires_grad = true;
    return n;
}

void backward(const Var& loss) {
    OVLW_REQUIRE(loss && loss->val.numel() == 1, InvalidInput, "backward expects a scalar loss");
    // collect reachable grad-requiring nodes
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.get()};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!n || !n->requires_grad || seen.count(n)) continue;
        seen.insert(n);
        order.push_back(n);
        for (const auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
    loss->ensure_grad()[0] += 1.0;
    for (Node* n : order)
        if (n->backward_fn) n->backward_fn(*n);
}

// ---------------- arithmetic ----------------

Var add(const Var& a, const Var& b) {
    OVLW_REQUIRE(same_shape(a->val, b->val), InvalidInput, "add: shape mismatch");
    Tensor out(a->val.shape());
    const double* pa = a->val.data();
    const double* pb = b->val.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
    return make_node(std::move(out), {a, b}, [a = a.get(), b = b.get()](Node& self) {
        if (a->requires_grad) a->accumulate(self.grad);
        if (b->requires_grad) b->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    OVLW_REQUIRE(same_shape(a->val, b->val), InvalidInput, "sub: shape mismatch");
    Tensor out(a->val.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] - b->val[i];
    return make_node(std::move(out), {a, b}, [a = a.get(), b = b.get()](Node& self) {
        if (a->requires_grad) a->accumulate(self.grad);
        if (b->requires_grad) {
            Tensor g(self.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = -self.grad[i];
            b->accumulate(g);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    OVLW_REQUIRE(same_shape(a->val, b->val), InvalidInput, "mul: shape mismatch");
    Tensor out(a->val.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * b->val[i];
    return make_node(std::move(out), {a, b}, [a = a.get(), b = b.get()](Node& self) {
        if (a->requires_grad) {
            Tensor g(self.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * b->val[i];
            a->accumulate(g);
        }
        if (b->requires_grad) {
            Tensor g(self.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * a->val[i];
            b->accumulate(g);
        }
    });
}

Var scale(const Var& x, double c) {
    Tensor out(x->val.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x->val[i] * c;
    return make_node(std::move(out), {x}, [x = x.get(), c](Node& self) {
        Tensor g(self.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * c;
        x->accumulate(g);
    });
}

Var add_const(const Var& x, double c) {
    Tensor out(x->val.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x->val[i] + c;
    return make_node(std::move(out), {x}, [x = x.get()](Node& self) { x->accumulate(self.grad); });
}

Var neg(const Var& x) { return scale(x, -1.0); }

Var add_bias(const Var& x, const Var& bias) {
    const int64_t n = bias->val.numel();
    OVLW_REQUIRE(x->val.numel() % n == 0, InvalidInput, "add_bias: width mismatch");
    const int64_t rows = x->val.numel() / n;
    Tensor out(x->val.shape());
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < n; ++j) out[r * n + j] = x->val[r * n + j] + bias->val[j];
    return make_node(std::move(out), {x, bias}, [x = x.get(), bias = bias.get(), rows, n](Node& self) {
        if (x->requires_grad) x->accumulate(self.grad);
        if (bias->requires_grad) {
            Tensor g(bias->val.shape());
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
            bias->accumulate(g);
        }
    });
}

Var mul_scalar_var(const Var& x, const Var& s) {
    OVLW_REQUIRE(s->val.numel() == 1, InvalidInput, "mul_scalar_var: scalar expected");
    const double sv = s->val[0];
    Tensor out(x->val.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x->val[i] * sv;
    return make_node(std::move(out), {x, s}, [x = x.get(), s = s.get(), sv](Node& self) {
        if (x->requires_grad) {
            Tensor g(self.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * sv;
            x->accumulate(g);
        }
        if (s->requires_grad) {
            double acc = 0.0;
            for (int64_t i = 0; i < self.grad.numel(); ++i) acc += self.grad[i] * x->val[i];
            s->accumulate(Tensor::scalar(acc));
        }
    });
}

Var add_scalar_var(const Var& x, const Var& s) {
    OVLW_REQUIRE(s->val.numel() == 1, InvalidInput, "add_scalar_var: scalar expected");
    const double sv = s->val[0];
    Tensor out(x->val.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x->val[i] + sv;
    return make_node(std::move(out), {x, s}, [x = x.get(), s = s.get()](Node& self) {
        if (x->requires_grad) x->accumulate(self.grad);
        if (s->requires_grad) {
            double acc = 0.0;
            for (int64_t i = 0; i < self.grad.numel(); ++i) acc += self.grad[i];
            s->accumulate(Tensor::scalar(acc));
        }
    });
}

Var mul_colbroadcast(const Var& x, const Var& col) {
    OVLW_REQUIRE(x->val.ndim() == 2 && col->val.ndim() == 2 && col->val.dim(1) == 1 &&
                     col->val.dim(0) == x->val.dim(0),
                 InvalidInput, "mul_colbroadcast: shapes");
    const int64_t rows = x->val.dim(0), n = x->val.dim(1);
    Tensor out(x->val.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const double c = col->val[r];
        for (int64_t j = 0; j < n; ++j) out[r * n + j] = x->val[r * n + j] * c;
    }
    return make_node(std::move(out), {x, col}, [x = x.get(), col = col.get(), rows, n](Node& self) {
        if (x->requires_grad) {
            Tensor g(x->val.shape());
            for (int64_t r = 0; r < rows; ++r) {
                const double c = col->val[r];
                for (int64_t j = 0; j < n; ++j) g[r * n + j] = self.grad[r * n + j] * c;
            }
            x->accumulate(g);
        }
        if (col->requires_grad) {
            Tensor g(col->val.shape());
            for (int64_t r = 0; r < rows; ++r) {
                double acc = 0.0;
                for (int64_t j = 0; j < n; ++j) acc += self.grad[r * n + j] * x->val[r * n + j];
                g[r] = acc;
            }
            col->accumulate(g);
        }
    });
}

// ---------------- matmul family ----------------

Var matmul(const Var& a, const Var& b) {
    OVLW_REQUIRE(a->val.ndim() == 2 && b->val.ndim() == 2 && a->val.dim(1) == b->val.dim(0), InvalidInput,
                 "matmul: shape mismatch " + a->val.shape_str() + " x " + b->val.shape_str());
    const int64_t m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(1);
    Tensor out({m, n});
    kern::matmul_nn(a->val.data(), b->val.data(), out.data(), m, k, n);
    return make_node(std::move(out), {a, b}, [a = a.get(), b = b.get(), m, k, n](Node& self) {
        if (a->requires_grad) {
            Tensor g({m, k});
            kern::matmul_nt(self.grad.data(), b->val.data(), g.data(), m, n, k);
            a->accumulate(g);
        }
        if (b->requires_grad) {
            Tensor g({k, n});
            kern::matmul_tn(a->val.data(), self.grad.data(), g.data(), m, k, n);
            b->accumulate(g);
        }
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    OVLW_REQUIRE(a->val.ndim() == 2 && b->val.ndim() == 2 && a->val.dim(1) == b->val.dim(1), InvalidInput,
                 "matmul_nt: shape mismatch");
    const int64_t m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(0);
    Tensor out({m, n});
    kern::matmul_nt(a->val.data(), b->val.data(), out.data(), m, k, n);
    return make_node(std::move(out), {a, b}, [a = a.get(), b = b.get(), m, k, n](Node& self) {
        if (a->requires_grad) {
            Tensor g({m, k});
            kern::matmul_nn(self.grad.data(), b->val.data(), g.data(), m, n, k);
            a->accumulate(g);
        }
        if (b->requires_grad) {
            Tensor g({n, k});
            kern::matmul_tn(self.grad.data(), a->val.data(), g.data(), m, n, k);
            b->accumulate(g);
        }
    });
}

Var bmm(const Var& a, const Var& b, bool trans_b, int64_t s, int64_t m, int64_t k, int64_t n) {
    OVLW_REQUIRE(a->val.numel() == s * m * k, InvalidInput, "bmm: lhs size");
    OVLW_REQUIRE(b->val.numel() == s * k * n, InvalidInput, "bmm: rhs size");
    Tensor out({s, m, n});
    if (trans_b)
        kern::bmm_nt(a->val.data(), b->val.data(), out.data(), s, m, k, n);
    else
        kern::bmm_nn(a->val.data(), b->val.data(), out.data(), s, m, k, n);
    return make_node(std::move(out), {a, b}, [a = a.get(), b = b.get(), trans_b, s, m, k, n](Node& self) {
        if (a->requires_grad) {
            Tensor g({s, m, k});
            if (trans_b)
                kern::bmm_nn(self.grad.data(), b->val.data(), g.data(), s, m, n, k);
            else
                kern::bmm_nt(self.grad.data(), b->val.data(), g.data(), s, m, n, k);
            a->accumulate(g);
        }
        if (b->requires_grad) {
            if (trans_b) {
                Tensor g({s, n, k});
                kern::bmm_tn(self.grad.data(), a->val.data(), g.data(), s, m, n, k);
                b->accumulate(g);
            } else {
                Tensor g({s, k, n});
                kern::bmm_tn(a->val.data(), self.grad.data(), g.data(), s, m, k, n);
                b->accumulate(g);
            }
        }
    });
}

// ---------------- nonlinearities ----------------

namespace {
template <typename Fwd, typename Bwd>
Var unary_op(const Var& x, Fwd fwd, Bwd bwd) {
    Tensor out(x->val.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = fwd(x->val[i]);
    return make_node(std::move(out), {x}, [x = x.get(), bwd](Node& self) {
        Tensor g(self.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * bwd(x->val[i], self.val[i]);
        x->accumulate(g);
    });
}
}  // namespace

Var relu(const Var& x) {
    return unary_op(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(const Var& x) {
    return unary_op(
        x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
        [](double v, double) {
            const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            return phi + v * pdf;
        });
}

Var sigmoid(const Var& x) {
    return unary_op(
        x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& x) {
    return unary_op(
        x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v))); },
        [](double v, double) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        });
}

Var exp(const Var& x) {
    return unary_op(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log_clamped(const Var& x, double min_x) {
    return unary_op(
        x, [min_x](double v) { return std::log(std::max(v, min_x)); },
        [min_x](double v, double) { return v > min_x ? 1.0 / v : 0.0; });
}

Var pow_const(const Var& x, double p) {
    return unary_op(
        x, [p](double v) { return std::pow(v, p); },
        [p](double v, double) { return v > 0.0 ? p * std::pow(v, p - 1.0) : 0.0; });
}

Var abs(const Var& x) {
    return unary_op(
        x, [](double v) { return std::fabs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var min_elem(const Var& a, const Var& b) {
    OVLW_REQUIRE(same_shape(a->val, b->val), InvalidInput, "min_elem: shape mismatch");
    Tensor out(a->val.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(a->val[i], b->val[i]);
    return make_node(std::move(out), {a, b}, [a = a.get(), b = b.get()](Node& self) {
        if (a->requires_grad) {
            Tensor g(self.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = a->val[i] <= b->val[i] ? self.grad[i] : 0.0;
            a->accumulate(g);
        }
        if (b->requires_grad) {
            Tensor g(self.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = a->val[i] <= b->val[i] ? 0.0 : self.grad[i];
            b->accumulate(g);
        }
    });
}

Var max_elem(const Var& a, const Var& b) {
    OVLW_REQUIRE(same_shape(a->val, b->val), InvalidInput, "max_elem: shape mismatch");
    Tensor out(a->val.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(a->val[i], b->val[i]);
    return make_node(std::move(out), {a, b}, [a = a.get(), b = b.get()](Node& self) {
        if (a->requires_grad) {
            Tensor g(self.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = a->val[i] >= b->val[i] ? self.grad[i] : 0.0;
            a->accumulate(g);
        }
        if (b->requires_grad) {
            Tensor g(self.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = a->val[i] >= b->val[i] ? 0.0 : self.grad[i];
            b->accumulate(g);
        }
    });
}

Var clamp_min_const(const Var& x, double c) {
    return unary_op(
        x, [c](double v) { return std::max(v, c); },
        [c](double v, double) { return v > c ? 1.0 : 0.0; });
}

Var logit(const Var& x, double eps) {
    return unary_op(
        x,
        [eps](double v) {
            const double p = std::clamp(v, eps, 1.0 - eps);
            return std::log(p / (1.0 - p));
        },
        [eps](double v, double) {
            if (v <= eps || v >= 1.0 - eps) return 0.0;
            return 1.0 / (v * (1.0 - v));
        });
}

// ---------------- softmax / layernorm ----------------

Var softmax_rows(const Var& x, const Tensor* mask) {
    OVLW_REQUIRE(x->val.ndim() >= 2, InvalidInput, "softmax_rows: need >= 2 dims");
    const int64_t n = x->val.shape().back();
    const int64_t rows = x->val.numel() / n;
    Tensor out(x->val.shape());
    const int64_t mask_rows = mask ? mask->numel() / n : 1;
    kern::softmax_rows(x->val.data(), mask ? mask->data() : nullptr, mask_rows, out.data(), rows, n);
    return make_node(std::move(out), {x}, [x = x.get(), rows, n](Node& self) {
        Tensor g(self.grad.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const double* y = self.val.data() + r * n;
            const double* dy = self.grad.data() + r * n;
            double dot = 0.0;
            for (int64_t j = 0; j < n; ++j) dot += dy[j] * y[j];
            double* dx = g.data() + r * n;
            for (int64_t j = 0; j < n; ++j) dx[j] = (dy[j] - dot) * y[j];
        }
        x->accumulate(g);
    });
}

Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const int64_t n = x->val.shape().back();
    OVLW_REQUIRE(gamma->val.numel() == n && beta->val.numel() == n, InvalidInput, "layernorm: affine size");
    const int64_t rows = x->val.numel() / n;
    Tensor out(x->val.shape());
    auto mean = std::make_shared<Tensor>(Tensor({rows}));
    auto inv_std = std::make_shared<Tensor>(Tensor({rows}));
    kern::layernorm_rows(x->val.data(), gamma->val.data(), beta->val.data(), out.data(), inv_std->data(),
                         mean->data(), rows, n, eps);
    return make_node(std::move(out), {x, gamma, beta},
                     [x = x.get(), gamma = gamma.get(), beta = beta.get(), mean, inv_std, rows, n](Node& self) {
                         Tensor dx(x->val.shape());
                         Tensor dgamma({n});
                         Tensor dbeta({n});
                         const double inv_n = 1.0 / static_cast<double>(n);
                         for (int64_t r = 0; r < rows; ++r) {
                             const double mu = (*mean)[r];
                             const double is = (*inv_std)[r];
                             const double* xr = x->val.data() + r * n;
                             const double* dy = self.grad.data() + r * n;
                             double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                             for (int64_t j = 0; j < n; ++j) {
                                 const double xhat = (xr[j] - mu) * is;
                                 const double dxhat = dy[j] * gamma->val[j];
                                 sum_dxhat += dxhat;
                                 sum_dxhat_xhat += dxhat * xhat;
                                 dgamma[j] += dy[j] * xhat;
                                 dbeta[j] += dy[j];
                             }
                             double* dxr = dx.data() + r * n;
                             for (int64_t j = 0; j < n; ++j) {
                                 const double xhat = (xr[j] - mu) * is;
                                 const double dxhat = dy[j] * gamma->val[j];
                                 dxr[j] = is * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                             }
                         }
                         if (x->requires_grad) x->accumulate(dx);
                         if (gamma->requires_grad) gamma->accumulate(dgamma);
                         if (beta->requires_grad) beta->accumulate(dbeta);
                     });
}

// ---------------- reductions ----------------

Var sum_all(const Var& x) {
    double acc = 0.0;
    for (int64_t i = 0; i < x->val.numel(); ++i) acc += x->val[i];
    return make_node(Tensor::scalar(acc), {x}, [x = x.get()](Node& self) {
        Tensor g(x->val.shape());
        const double gv = self.grad[0];
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = gv;
        x->accumulate(g);
    });
}

Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x->val.numel())); }

Var sum_cols(const Var& x) {
    OVLW_REQUIRE(x->val.ndim() == 2, InvalidInput, "sum_cols: 2-D only");
    const int64_t rows = x->val.dim(0), n = x->val.dim(1);
    Tensor out({rows, 1});
    for (int64_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (int64_t j = 0; j < n; ++j) acc += x->val[r * n + j];
        out[r] = acc;
    }
    return make_node(std::move(out), {x}, [x = x.get(), rows, n](Node& self) {
        Tensor g(x->val.shape());
        for (int64_t r = 0; r < rows; ++r) {
            const double gv = self.grad[r];
            for (int64_t j = 0; j < n; ++j) g[r * n + j] = gv;
        }
        x->accumulate(g);
    });
}

// ---------------- shape / indexing ----------------

namespace {
int64_t row_width(const Tensor& t) { return t.numel() / t.dim(0); }
}  // namespace

Var narrow0(const Var& x, int64_t start, int64_t len) {
    OVLW_REQUIRE(x->val.ndim() >= 1 && start >= 0 && start + len <= x->val.dim(0), InvalidInput,
                 "narrow0: out of range");
    const int64_t w = row_width(x->val);
    auto shape = x->val.shape();
    shape[0] = len;
    Tensor out(shape);
    std::memcpy(out.data(), x->val.data() + start * w, sizeof(double) * len * w);
    return make_node(std::move(out), {x}, [x = x.get(), start, w, len](Node& self) {
        Tensor g(x->val.shape());
        std::memcpy(g.data() + start * w, self.grad.data(), sizeof(double) * len * w);
        x->accumulate(g);
    });
}

Var narrow_cols(const Var& x, int64_t start, int64_t len) {
    OVLW_REQUIRE(x->val.ndim() == 2 && start >= 0 && start + len <= x->val.dim(1), InvalidInput,
                 "narrow_cols: out of range");
    const int64_t rows = x->val.dim(0), n = x->val.dim(1);
    Tensor out({rows, len});
    for (int64_t r = 0; r < rows; ++r)
        std::memcpy(out.data() + r * len, x->val.data() + r * n + start, sizeof(double) * len);
    return make_node(std::move(out), {x}, [x = x.get(), start, rows, n, len](Node& self) {
        Tensor g(x->val.shape());
        for (int64_t r = 0; r < rows; ++r)
            std::memcpy(g.data() + r * n + start, self.grad.data() + r * len, sizeof(double) * len);
        x->accumulate(g);
    });
}

Var concat0(const std::vector<Var>& xs) {
    OVLW_REQUIRE(!xs.empty(), InvalidInput, "concat0: empty input");
    auto shape = xs[0]->val.shape();
    const int64_t w = row_width(xs[0]->val);
    int64_t total = 0;
    for (const auto& x : xs) {
        OVLW_REQUIRE(row_width(x->val) == w, InvalidInput, "concat0: row width mismatch");
        total += x->val.dim(0);
    }
    shape[0] = total;
    Tensor out(shape);
    int64_t off = 0;
    for (const auto& x : xs) {
        std::memcpy(out.data() + off, x->val.data(), sizeof(double) * x->val.numel());
        off += x->val.numel();
    }
    std::vector<Node*> raw;
    raw.reserve(xs.size());
    for (const auto& x : xs) raw.push_back(x.get());
    return make_node(std::move(out), xs, [raw, w](Node& self) {
        int64_t off = 0;
        for (Node* x : raw) {
            const int64_t cnt = x->val.numel();
            if (x->requires_grad) {
                Tensor g(x->val.shape());
                std::memcpy(g.data(), self.grad.data() + off, sizeof(double) * cnt);
                x->accumulate(g);
            }
            off += cnt;
        }
    });
}

Var gather_rows(const Var& x, std::vector<int64_t> idx) {
    const int64_t w = row_width(x->val);
    auto shape = x->val.shape();
    shape[0] = static_cast<int64_t>(idx.size());
    Tensor out(shape);
    for (size_t i = 0; i < idx.size(); ++i) {
        OVLW_REQUIRE(idx[i] >= 0 && idx[i] < x->val.dim(0), InvalidInput, "gather_rows: index out of range");
        std::memcpy(out.data() + i * w, x->val.data() + idx[i] * w, sizeof(double) * w);
    }
    return make_node(std::move(out), {x}, [x = x.get(), idx = std::move(idx), w](Node& self) {
        Tensor g(x->val.shape());
        for (size_t i = 0; i < idx.size(); ++i) {
            const double* src = self.grad.data() + i * w;
            double* dst = g.data() + idx[i] * w;
            for (int64_t j = 0; j < w; ++j) dst[j] += src[j];
        }
        x->accumulate(g);
    });
}

Var gather_elems(const Var& x, std::vector<int64_t> flat_idx) {
    Tensor out({static_cast<int64_t>(flat_idx.size())});
    for (size_t i = 0; i < flat_idx.size(); ++i) {
        OVLW_REQUIRE(flat_idx[i] >= 0 && flat_idx[i] < x->val.numel(), InvalidInput,
                     "gather_elems: index out of range");
        out[i] = x->val[flat_idx[i]];
    }
    return make_node(std::move(out), {x}, [x = x.get(), idx = std::move(flat_idx)](Node& self) {
        Tensor g(x->val.shape());
        for (size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
        x->accumulate(g);
    });
}

Var scatter_vals(std::vector<int64_t> shape, std::vector<int64_t> flat_idx, const Var& vals) {
    OVLW_REQUIRE(static_cast<int64_t>(flat_idx.size()) == vals->val.numel(), InvalidInput,
                 "scatter_vals: index/value count mismatch");
    Tensor out(shape);
    for (size_t i = 0; i < flat_idx.size(); ++i) {
        OVLW_REQUIRE(flat_idx[i] >= 0 && flat_idx[i] < out.numel(), InvalidInput,
                     "scatter_vals: index out of range");
        out[flat_idx[i]] += vals->val[i];
    }
    return make_node(std::move(out), {vals}, [vals = vals.get(), idx = std::move(flat_idx)](Node& self) {
        Tensor g(vals->val.shape());
        for (size_t i = 0; i < idx.size(); ++i) g[i] = self.grad[idx[i]];
        vals->accumulate(g);
    });
}

Var repeat0(const Var& x, int64_t times) {
    auto shape = x->val.shape();
    const int64_t cnt = x->val.numel();
    shape[0] *= times;
    Tensor out(shape);
    for (int64_t t = 0; t < times; ++t) std::memcpy(out.data() + t * cnt, x->val.data(), sizeof(double) * cnt);
    return make_node(std::move(out), {x}, [x = x.get(), times, cnt](Node& self) {
        Tensor g(x->val.shape());
        for (int64_t t = 0; t < times; ++t)
            for (int64_t i = 0; i < cnt; ++i) g[i] += self.grad[t * cnt + i];
        x->accumulate(g);
    });
}

Var detach(const Var& x) { return constant(x->val); }

Var reshape(const Var& x, std::vector<int64_t> shape) {
    Tensor out = x->val.reshaped(shape);
    return make_node(std::move(out), {x}, [x = x.get()](Node& self) {
        x->accumulate(self.grad.reshaped(x->val.shape()));
    });
}

Var split_heads(const Var& x, int64_t b, int64_t t, int64_t h, int64_t dh) {
    OVLW_REQUIRE(x->val.numel() == b * t * h * dh, InvalidInput, "split_heads: size mismatch");
    Tensor out({b * h, t, dh});
    const double* src = x->val.data();
    double* dst = out.data();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t hi = 0; hi < h; ++hi)
            for (int64_t ti = 0; ti < t; ++ti)
                std::memcpy(dst + ((bi * h + hi) * t + ti) * dh, src + ((bi * t + ti) * h + hi) * dh,
                            sizeof(double) * dh);
    return make_node(std::move(out), {x}, [x = x.get(), b, t, h, dh](Node& self) {
        Tensor g(x->val.shape());
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t hi = 0; hi < h; ++hi)
                for (int64_t ti = 0; ti < t; ++ti) {
                    const double* src = self.grad.data() + ((bi * h + hi) * t + ti) * dh;
                    double* dst = g.data() + ((bi * t + ti) * h + hi) * dh;
                    for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
                }
        x->accumulate(g);
    });
}

Var merge_heads(const Var& x, int64_t b, int64_t t, int64_t h, int64_t dh) {
    OVLW_REQUIRE(x->val.numel() == b * t * h * dh, InvalidInput, "merge_heads: size mismatch");
    Tensor out({b * t, h * dh});
    const double* src = x->val.data();
    double* dst = out.data();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t hi = 0; hi < h; ++hi)
            for (int64_t ti = 0; ti < t; ++ti)
                std::memcpy(dst + ((bi * t + ti) * h + hi) * dh, src + ((bi * h + hi) * t + ti) * dh,
                            sizeof(double) * dh);
    return make_node(std::move(out), {x}, [x = x.get(), b, t, h, dh](Node& self) {
        Tensor g(x->val.shape());
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t hi = 0; hi < h; ++hi)
                for (int64_t ti = 0; ti < t; ++ti) {
                    const double* src = self.grad.data() + ((bi * t + ti) * h + hi) * dh;
                    double* dst = g.data() + ((bi * h + hi) * t + ti) * dh;
                    for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
                }
        x->accumulate(g);
    });
}

// ---------------- composites ----------------

Var multihead_attention(const Var& q_in, const Var& k_in, const Var& v_in, const AttentionWeights& w,
                        int64_t b, int64_t tq, int64_t tk, int64_t heads, const Tensor* mask) {
    const int64_t d = w.wq->val.dim(1);
    OVLW_REQUIRE(d % heads == 0, InvalidInput, "attention: dim not divisible by heads");
    const int64_t dh = d / heads;
    Var q = add_bias(matmul(q_in, w.wq), w.bq);
    Var k = add_bias(matmul(k_in, w.wk), w.bk);
    Var v = add_bias(matmul(v_in, w.wv), w.bv);
    Var qh = split_heads(q, b, tq, heads, dh);
    Var kh = split_heads(k, b, tk, heads, dh);
    Var vh = split_heads(v, b, tk, heads, dh);
    Var scores = scale(bmm(qh, kh, /*trans_b=*/true, b * heads, tq, dh, tk), 1.0 / std::sqrt(double(dh)));
    Var probs = softmax_rows(scores, mask);
    Var ctx = bmm(probs, vh, /*trans_b=*/false, b * heads, tq, tk, dh);
    Var merged = merge_heads(ctx, b, tq, heads, dh);
    return add_bias(matmul(merged, w.wo), w.bo);
}

Var l2_normalize_rows(const Var& x, double eps) {
    Var sq = mul(x, x);
    Var norms = pow_const(sum_cols(sq), 0.5);
    Var inv = pow_const(clamp_min_const(norms, eps), -1.0);
    return mul_colbroadcast(x, inv);
}

}  // namespace ovlw::ad
