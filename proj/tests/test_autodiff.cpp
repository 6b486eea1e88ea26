#include "ovlw/autodiff.hpp"

#include "doctest.h"
#include "ovlw/rng.hpp"
#include "testutil.hpp"

using namespace ovlw;
using ad::Var;
using testutil::grad_check;
using testutil::random_tensor;

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("matmul forward matches naive") {
    Rng rng(3);
    Tensor a = random_tensor({5, 7}, rng), b = random_tensor({7, 4}, rng);
    Var va = ad::constant(a), vb = ad::constant(b);
    Var c = ad::matmul(va, vb);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j) {
            double acc = 0.0;
            for (int p = 0; p < 7; ++p) acc += a.at2(i, p) * b.at2(p, j);
            CHECK(c->val.at2(i, j) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("gradients of core ops match finite differences") {
    Rng rng(17);
    auto x = ad::param(random_tensor({4, 6}, rng));
    auto w = ad::param(random_tensor({6, 3}, rng));

    SUBCASE("matmul + bias + gelu") {
        auto b = ad::param(random_tensor({3}, rng));
        auto res = grad_check({x, w, b}, [&] {
            return ad::sum_all(ad::gelu(ad::add_bias(ad::matmul(x, w), b)));
        });
        CHECK(res.ok);
        CHECK(res.max_rel < 1e-4);
    }
    SUBCASE("matmul_nt") {
        auto t = ad::param(random_tensor({5, 6}, rng));
        auto res = grad_check({x, t}, [&] { return ad::sum_all(ad::sigmoid(ad::matmul_nt(x, t))); });
        CHECK(res.ok);
    }
    SUBCASE("softmax") {
        auto res = grad_check({x}, [&] {
            auto y = ad::softmax_rows(x);
            auto z = ad::mul(y, y);  // non-uniform upstream gradient
            return ad::sum_all(z);
        });
        CHECK(res.ok);
    }
    SUBCASE("masked softmax ignores masked entries") {
        Tensor mask({1, 6});
        for (int j = 3; j < 6; ++j) mask[j] = -1e30;
        auto y = ad::softmax_rows(x, &mask);
        for (int r = 0; r < 4; ++r) {
            double s = 0.0;
            for (int j = 0; j < 3; ++j) s += y->val.at2(r, j);
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
            for (int j = 3; j < 6; ++j) CHECK(y->val.at2(r, j) == 0.0);
        }
    }
    SUBCASE("layernorm") {
        auto gamma = ad::param(random_tensor({6}, rng, 0.5, 1.5));
        auto beta = ad::param(random_tensor({6}, rng));
        auto res = grad_check({x, gamma, beta}, [&] {
            auto y = ad::layernorm(x, gamma, beta);
            return ad::sum_all(ad::mul(y, y));
        });
        CHECK(res.ok);
    }
    SUBCASE("unary chain") {
        auto xp = ad::param(random_tensor({3, 5}, rng, 0.1, 2.0));
        auto res = grad_check({xp}, [&] {
            auto y = ad::pow_const(ad::clamp_min_const(xp, 0.2), 0.75);
            return ad::sum_all(ad::mul(ad::softplus(y), ad::exp(ad::scale(y, -0.5))));
        });
        CHECK(res.ok);
    }
    SUBCASE("min/max/abs") {
        auto a = ad::param(random_tensor({4, 4}, rng));
        auto b = ad::param(random_tensor({4, 4}, rng));
        auto res = grad_check({a, b}, [&] {
            auto lo = ad::min_elem(a, b);
            auto hi = ad::max_elem(a, b);
            return ad::sum_all(ad::add(ad::abs(lo), ad::mul(hi, hi)));
        });
        CHECK(res.ok);
    }
    SUBCASE("gather and scatter") {
        auto res = grad_check({x}, [&] {
            auto g = ad::gather_rows(x, {3, 1, 1});
            auto e = ad::gather_elems(x, {0, 7, 13, 13});
            auto sc = ad::scatter_vals({4, 3}, {0, 5, 11, 2}, e);
            return ad::add(ad::sum_all(ad::mul(g, g)), ad::sum_all(ad::sigmoid(sc)));
        });
        CHECK(res.ok);
    }
    SUBCASE("l2 row normalize") {
        auto res = grad_check({x}, [&] {
            auto y = ad::l2_normalize_rows(x);
            return ad::sum_all(ad::mul(y, ad::exp(ad::scale(y, 0.3))));
        });
        CHECK(res.ok);
    }
    SUBCASE("bmm both orientations") {
        auto a = ad::param(random_tensor({2, 3, 4}, rng));
        auto b = ad::param(random_tensor({2, 4, 5}, rng));
        auto bt = ad::param(random_tensor({2, 5, 4}, rng));
        auto res = grad_check({a, b}, [&] {
            return ad::sum_all(ad::sigmoid(ad::bmm(a, b, false, 2, 3, 4, 5)));
        });
        CHECK(res.ok);
        auto res2 = grad_check({a, bt}, [&] {
            return ad::sum_all(ad::sigmoid(ad::bmm(a, bt, true, 2, 3, 4, 5)));
        });
        CHECK(res2.ok);
    }
    SUBCASE("heads round trip") {
        auto xr = ad::param(random_tensor({6, 8}, rng));  // b=2, t=3, h=4, dh=2
        auto res = grad_check({xr}, [&] {
            auto s = ad::split_heads(xr, 2, 3, 4, 2);
            auto m = ad::merge_heads(s, 2, 3, 4, 2);
            return ad::sum_all(ad::mul(m, m));
        });
        CHECK(res.ok);
        auto s = ad::split_heads(ad::constant(xr->val), 2, 3, 4, 2);
        auto m = ad::merge_heads(s, 2, 3, 4, 2);
        CHECK(testutil::max_abs_diff(m->val, xr->val) == 0.0);
    }
}

TEST_CASE("full attention block gradcheck") {
    Rng rng(23);
    const int64_t b = 2, tq = 3, tk = 4, d = 8, heads = 2;
    ad::AttentionWeights w;
    w.wq = ad::param(random_tensor({d, d}, rng, -0.4, 0.4));
    w.bq = ad::param(random_tensor({d}, rng, -0.1, 0.1));
    w.wk = ad::param(random_tensor({d, d}, rng, -0.4, 0.4));
    w.bk = ad::param(random_tensor({d}, rng, -0.1, 0.1));
    w.wv = ad::param(random_tensor({d, d}, rng, -0.4, 0.4));
    w.bv = ad::param(random_tensor({d}, rng, -0.1, 0.1));
    w.wo = ad::param(random_tensor({d, d}, rng, -0.4, 0.4));
    w.bo = ad::param(random_tensor({d}, rng, -0.1, 0.1));
    auto q = ad::param(random_tensor({b * tq, d}, rng));
    auto kv = ad::param(random_tensor({b * tk, d}, rng));
    auto res = grad_check({q, kv, w.wq, w.wk, w.wv, w.wo, w.bo}, [&] {
        auto y = ad::multihead_attention(q, kv, kv, w, b, tq, tk, heads);
        return ad::sum_all(ad::mul(y, y));
    });
    CHECK(res.ok);
    CHECK(res.max_rel < 1e-4);
}

TEST_CASE("detach blocks gradient flow") {
    Rng rng(5);
    auto x = ad::param(random_tensor({3, 3}, rng));
    auto loss = ad::sum_all(ad::mul(ad::detach(x), x));
    ad::backward(loss);
    // d/dx (detach(x) * x) = detach(x), not 2x
    for (int64_t i = 0; i < 9; ++i) CHECK(x->grad[i] == doctest::Approx(x->val[i]).epsilon(1e-12));
}

TEST_CASE("no-grad mode records nothing") {
    Rng rng(6);
    auto x = ad::param(random_tensor({2, 2}, rng));
    ad::NoGradGuard guard;
    auto y = ad::mul(x, x);
    CHECK_FALSE(y->requires_grad);
    CHECK(y->parents.empty());
}

TEST_SUITE_END();
