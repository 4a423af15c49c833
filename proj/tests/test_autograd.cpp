#include <doctest.h>

#include <functional>

#include "mammolab/autograd.hpp"
#include "mammolab/nn.hpp"

using namespace mammolab;

namespace {

// Central finite-difference check of d(loss)/d(param) for every parameter
// coordinate; `build` must rebuild the loss graph from the live params.
double max_rel_grad_error(const std::vector<ag::Var>& params,
                          const std::function<ag::Var()>& build, double h = 1e-6) {
    for (const auto& p : params) p->zero_grad();
    ag::Var loss = build();
    ag::backward(loss);
    double worst = 0;
    for (const auto& p : params) {
        for (std::size_t i = 0; i < p->val.size(); ++i) {
            const double keep = p->val[i];
            p->val[i] = keep + h;
            const double up = build()->val[0];
            p->val[i] = keep - h;
            const double dn = build()->val[0];
            p->val[i] = keep;
            const double fd = (up - dn) / (2 * h);
            const double an = p->grad[i];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
            worst = std::max(worst, std::abs(fd - an) / denom);
        }
    }
    return worst;
}

ag::Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    ag::Tensor t(std::move(shape));
    for (auto& x : t.v) x = scale * rand_normal(rng);
    return t;
}

}  // namespace

TEST_CASE("gradients: dense + gelu + mse chain") {
    Rng rng(1);
    auto w = ag::parameter(random_tensor({3, 4}, rng, 0.5));
    auto b = ag::parameter(random_tensor({3}, rng, 0.5));
    auto x = ag::constant(random_tensor({5, 4}, rng));
    auto target = ag::constant(random_tensor({5, 3}, rng));
    auto build = [&] { return ag::mse(ag::gelu(ag::linear(x, w, b)), target); };
    CHECK(max_rel_grad_error({w, b}, build) < 1e-5);
}

TEST_CASE("gradients: conv2d + sigmoid + bce") {
    Rng rng(2);
    auto w = ag::parameter(random_tensor({2, 3, 3, 3}, rng, 0.3));
    auto b = ag::parameter(random_tensor({2}, rng, 0.3));
    auto x = ag::constant(random_tensor({3, 5, 5}, rng));
    ag::Tensor target({2, 3, 3});
    Rng trng(3);
    for (auto& t : target.v) t = double(trng() & 1);
    auto build = [&] { return ag::bce_with_logits(ag::conv2d(x, w, b, 2, 1), target); };
    CHECK(max_rel_grad_error({w, b}, build) < 1e-5);
}

TEST_CASE("gradients: layernorm + softmax cross-entropy") {
    Rng rng(4);
    auto gamma = ag::parameter(random_tensor({6}, rng, 0.5));
    auto beta = ag::parameter(random_tensor({6}, rng, 0.5));
    auto w = ag::parameter(random_tensor({4, 6}, rng, 0.5));
    auto bb = ag::parameter(random_tensor({4}, rng, 0.5));
    auto x = ag::constant(random_tensor({5, 6}, rng));
    std::vector<int> labels = {0, 2, -1, 3, 1};
    auto build = [&] {
        return ag::cross_entropy(ag::linear(ag::layernorm_rows(x, gamma, beta), w, bb), labels);
    };
    CHECK(max_rel_grad_error({gamma, beta, w, bb}, build) < 1e-5);
}

TEST_CASE("gradients: attention-style composite") {
    Rng rng(5);
    auto wq = ag::parameter(random_tensor({4, 4}, rng, 0.5));
    auto wk = ag::parameter(random_tensor({4, 4}, rng, 0.5));
    auto wv = ag::parameter(random_tensor({4, 4}, rng, 0.5));
    auto bias = ag::parameter(random_tensor({4}, rng, 0.1));
    auto x = ag::constant(random_tensor({6, 4}, rng));
    auto build = [&] {
        auto q = ag::linear(x, wq, bias);
        auto k = ag::linear(x, wk, bias);
        auto v = ag::linear(x, wv, bias);
        auto attn = ag::softmax_rows(ag::scale(ag::matmul(q, ag::transpose(k)), 0.5));
        return ag::mean_all(ag::mul(ag::matmul(attn, v), ag::matmul(attn, v)));
    };
    CHECK(max_rel_grad_error({wq, wk, wv, bias}, build) < 1e-5);
}

TEST_CASE("gradients: bilinear resize and crop_resize") {
    Rng rng(6);
    auto x = ag::parameter(random_tensor({2, 6, 6}, rng));
    auto target = ag::constant(random_tensor({2, 4, 4}, rng));
    auto build_resize = [&] { return ag::mse(ag::bilinear_resize(x, 4, 4), target); };
    CHECK(max_rel_grad_error({x}, build_resize) < 1e-5);

    auto target2 = ag::constant(random_tensor({2, 3, 3}, rng));
    auto build_crop = [&] {
        return ag::mse(ag::crop_resize(x, 1.2, 0.7, 4.6, 3.9, 3), target2);
    };
    CHECK(max_rel_grad_error({x}, build_crop) < 1e-5);
}

TEST_CASE("gradients: normalization, stacking, slicing composite") {
    Rng rng(7);
    auto a = ag::parameter(random_tensor({4}, rng));
    auto b = ag::parameter(random_tensor({4}, rng));
    auto build = [&] {
        auto m = ag::stack_rows({a, b});
        auto z = ag::l2_normalize_rows(m);
        auto s = ag::matmul(z, ag::transpose(z));
        return ag::mean_all(ag::mul(ag::slice_cols(s, 0, 2), ag::slice_cols(s, 0, 2)));
    };
    CHECK(max_rel_grad_error({a, b}, build) < 1e-5);
}

TEST_CASE("bilinear_resize stays within input bounds and preserves identity") {
    Rng rng(8);
    auto x = ag::constant(random_tensor({3, 5, 5}, rng));
    auto y = ag::bilinear_resize(x, 9, 9);
    const double lo = *std::min_element(x->val.v.begin(), x->val.v.end());
    const double hi = *std::max_element(x->val.v.begin(), x->val.v.end());
    for (double v : y->val.v) {
        CHECK(v >= lo - 1e-12);
        CHECK(v <= hi + 1e-12);
    }
    CHECK(ag::bilinear_resize(x, 5, 5)->val.v == x->val.v);
}

TEST_CASE("smooth_l1 matches quadratic and linear regimes") {
    auto x = ag::parameter(ag::Tensor({2}, {0.25, 3.0}));
    ag::Tensor target({2}, {0.0, 0.0});
    auto loss = ag::smooth_l1(x, target, 1.0);
    CHECK(loss->val[0] == doctest::Approx(0.5 * (0.5 * 0.25 * 0.25 + 3.0 - 0.5)));
    auto build = [&] { return ag::smooth_l1(x, target, 1.0); };
    CHECK(max_rel_grad_error({x}, build) < 1e-5);
}

TEST_CASE("AdamW descends on a quadratic") {
    auto x = ag::parameter(ag::Tensor({3}, {3.0, -2.0, 1.5}));
    nn::AdamW opt({x}, 0.05);
    for (int i = 0; i < 400; ++i) {
        opt.zero_grad();
        auto loss = ag::mse(x, ag::constant(ag::Tensor({3}, {0.0, 0.0, 0.0})));
        ag::backward(loss);
        opt.step();
    }
    for (double v : x->val.v) CHECK(std::abs(v) < 1e-2);
}
