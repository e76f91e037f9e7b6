// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "clorae/clorae_linear.hpp"
#include "clorae/gradcheck.hpp"
#include "clorae/mim.hpp"

using namespace clorae;
using Catch::Approx;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double s = 1.0) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = rng.normal(0.0, s);
    return Tensor(r, c, std::move(v));
}

VidHead identity_head(ParameterStore& store, std::size_t d) {
    VidHead h = make_vid_head(store, "h", d, 1);
    std::fill(h.weight.data(), h.weight.data() + h.weight.size(), 0.0);
    for (std::size_t i = 0; i < d; ++i) h.weight.data()[i * d + i] = 1.0;
    return h;
}

double softplus_ref(double x) { return std::log1p(std::exp(x)); }

}  // namespace

TEST_CASE("perfect prediction with unit variance costs nothing", "[mim]") {
    ParameterStore store;
    VidHead h = identity_head(store, 4);
    Rng rng(1);
    const Tensor d = random_matrix(5, 4, rng);
    CHECK(std::abs(mim_loss(d, d.clone(), h).item()) <= 1e-15);
    CHECK(softplus(h.log_var)(0, 0) == Approx(1.0).epsilon(1e-15));
}

TEST_CASE("unit per-channel error with unit variance costs one half", "[mim]") {
    ParameterStore store;
    VidHead h = identity_head(store, 3);
    const Tensor d = Tensor::zeros(2, 3);
    const Tensor u(2, 3, {1, -1, 1, -1, 1, -1});
    CHECK(mim_loss(d, u, h).item() == Approx(0.5).epsilon(1e-14));
}

TEST_CASE("loss matches a per-channel loop oracle", "[mim]") {
    Rng rng(2);
    for (int trial = 0; trial < 25; ++trial) {
        ParameterStore store;
        const std::size_t t = 1 + rng.index(6), dim = 1 + rng.index(7);
        VidHead h = make_vid_head(store, "h", dim, static_cast<std::uint64_t>(trial));
        for (std::size_t i = 0; i < dim; ++i) {
            h.bias.data()[i] = rng.normal(0.0, 0.3);
            h.log_var.data()[i] = rng.normal(0.0, 1.0);
        }
        const Tensor d = random_matrix(t, dim, rng);
        const Tensor u = random_matrix(t, dim, rng);
        double total = 0.0;
        for (std::size_t i = 0; i < t; ++i) {
            for (std::size_t c = 0; c < dim; ++c) {
                double mu = h.bias(0, c);
                for (std::size_t k = 0; k < dim; ++k) mu += h.weight(c, k) * d(i, k);
                const double var = softplus_ref(h.log_var(0, c));
                total += 0.5 * std::log(var) + (u(i, c) - mu) * (u(i, c) - mu) / (2.0 * var);
            }
        }
        CHECK(std::abs(mim_loss(d, u, h).item() - total / static_cast<double>(t * dim)) <= 1e-10);
    }
}

TEST_CASE("mismatched shapes are rejected", "[mim]") {
    ParameterStore store;
    VidHead h = make_vid_head(store, "h", 3, 1);
    CHECK_THROWS_AS(mim_loss(Tensor::zeros(2, 3), Tensor::zeros(3, 3), h), Error);
    CHECK_THROWS_AS(mim_loss(Tensor::zeros(2, 4), Tensor::zeros(2, 4), h), Error);
}

TEST_CASE("gradient reaches task experts and the head but never the universal expert", "[mim][property]") {
    Rng rng(3);
    ParameterStore store;
    CloraeOptions o;
    o.rank = 4;
    o.n_tasks = 2;
    o.alpha = 4.0;
    o.dropout = 0.0;
    CloraeLinear layer(store, "c", Tensor::identity(4), 0, o, 5);
    for (auto& p : store.all()) {
        for (std::size_t i = 0; i < p.tensor.size(); ++i) p.tensor.data()[i] = rng.normal(0.0, 0.5);
    }
    VidHead h = make_vid_head(store, "mim", 4, 9);
    std::vector<ExpertCapture> caps;
    ForwardContext ctx;
    ctx.captures = &caps;
    (void)layer.forward(random_matrix(6, 4, rng), 1, ctx);
    REQUIRE(caps.size() == 1);
    backward(mim_loss(caps[0].task, caps[0].universal, h));
    CHECK(layer.universal()->A.grad_norm() == 0.0);
    CHECK(layer.universal()->B.grad_norm() == 0.0);
    CHECK(layer.task_experts()[1].A.grad_norm() > 0.0);
    CHECK(layer.task_experts()[1].B.grad_norm() > 0.0);
    CHECK(h.weight.grad_norm() > 0.0);
    CHECK(h.log_var.grad_norm() > 0.0);
}

TEST_CASE("loss is nondecreasing in the prediction error", "[mim][property]") {
    Rng rng(4);
    ParameterStore store;
    VidHead h = make_vid_head(store, "h", 5, 2);
    for (std::size_t i = 0; i < 5; ++i) h.log_var.data()[i] = rng.normal(0.0, 1.0);
    const Tensor d = random_matrix(3, 5, rng);
    const Tensor mu = add_row(matmul_nt(d, h.weight), h.bias);
    const Tensor dir = random_matrix(3, 5, rng);
    double prev = -1e300;
    for (int k = 0; k <= 40; ++k) {
        const Tensor u = add(mu, scale(dir, 0.1 * k));
        const double l = mim_loss(d, u, h).item();
        CHECK(l >= prev);
        prev = l;
    }
}

TEST_CASE("head parameters pass the gradient check", "[mim][gradcheck]") {
    Rng rng(5);
    ParameterStore store;
    VidHead h = make_vid_head(store, "h", 4, 3);
    for (std::size_t i = 0; i < 4; ++i) {
        h.bias.data()[i] = rng.normal(0.0, 0.3);
        h.log_var.data()[i] = rng.normal(0.0, 0.5);
    }
    const Tensor d = random_matrix(5, 4, rng);
    const Tensor u = random_matrix(5, 4, rng);
    std::vector<Parameter*> params;
    for (auto& p : store.all()) params.push_back(&p);
    const auto report = finite_diff_check([&] { return mim_loss(d, u, h); }, params);
    CHECK(report.max_relative_error <= 1e-4);
}
