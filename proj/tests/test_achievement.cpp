// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "clorae/achievement.hpp"
#include "clorae/random.hpp"

using namespace clorae;
using Catch::Approx;

TEST_CASE("raw weight examples", "[achievement]") {
    CHECK(raw_weight(0.0, 1.0, 1.1, 2.0) == 1.0);
    CHECK(raw_weight(0.0, 0.7, 1.3, 0.5) == 1.0);
    CHECK(raw_weight(1.1 * 0.8, 0.8, 1.1, 2.0) == Approx(0.0).margin(1e-15));
    CHECK(raw_weight(0.5, 1.0, 1.1, 2.0) == Approx(0.29752).margin(1e-5));
    CHECK(raw_weight(0.5, 1.0, 1.1, 2.0) == Approx(std::pow(1.0 - 0.5 / 1.1, 2.0)).epsilon(1e-14));
    CHECK(raw_weight(0.99, 0.8, 1.1, 2.0) == 0.0);
    CHECK(raw_weight(0.99, 0.8, 1.1, 0.5) == 0.0);
}

TEST_CASE("raw weight rejects bad targets and margins", "[achievement]") {
    CHECK_THROWS_AS(raw_weight(0.5, 0.0, 1.1, 2.0), Error);
    CHECK_THROWS_AS(raw_weight(0.5, 1.0, 1.0, 2.0), Error);
    CHECK_THROWS_AS(raw_weight(0.5, 1.0, 0.9, 2.0), Error);
    CHECK_THROWS_AS(AchievementTracker({1.0}, 1.0, 2.0), Error);
    CHECK_THROWS_AS(AchievementTracker({0.0}, 1.1, 2.0), Error);
}

TEST_CASE("softmax normalization examples", "[achievement]") {
    const auto u = normalize_weights({0.3, 0.3, 0.3});
    for (double w : u) CHECK(w == Approx(1.0 / 3.0).epsilon(1e-15));
    const auto w = normalize_weights({1.0, 0.0});
    CHECK(w[0] == Approx(0.7311).margin(5e-5));
    CHECK(w[1] == Approx(0.2689).margin(5e-5));
    CHECK(w[0] == Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-14));
}

TEST_CASE("joint objective examples", "[achievement]") {
    const std::vector<Tensor> losses{Tensor::scalar(1.0), Tensor::scalar(2.0)};
    CHECK(multitask_step_loss(losses, {0.7, 0.3}, Tensor::scalar(0.5), 0.01).item() == Approx(1.305).epsilon(1e-14));
    CHECK(multitask_step_loss(losses, {0.7, 0.3}, Tensor::scalar(0.5), 0.0).item() == Approx(1.3).epsilon(1e-14));
    const std::vector<Tensor> equal(4, Tensor::scalar(2.5));
    CHECK(multitask_step_loss(equal, std::vector<double>(4, 0.25), Tensor{}, 0.01).item() ==
          Approx(2.5).epsilon(1e-14));
    const std::vector<Tensor> partial{Tensor{}, Tensor::scalar(2.0)};
    CHECK(multitask_step_loss(partial, {0.7, 0.3}, Tensor{}, 0.01).item() == Approx(0.6).epsilon(1e-14));
}

TEST_CASE("tracker cold start, chained update and missing ids", "[achievement]") {
    AchievementTracker t({1.0, 1.0}, 1.1, 2.0);
    const auto w0 = t.initial();
    CHECK(w0.weights == std::vector<double>{0.5, 0.5});
    const auto w1 = t.update_epoch(std::vector<double>{0.2, 0.8});
    // quoted as 0.6692 / 0.0746; exact values are 0.669421 / 0.074380
    CHECK(raw_weight(0.2, 1, 1.1, 2) == Approx(0.6692).margin(3e-4));
    CHECK(raw_weight(0.8, 1, 1.1, 2) == Approx(0.0746).margin(3e-4));
    CHECK(raw_weight(0.2, 1, 1.1, 2) == Approx(0.669421487603).epsilon(1e-11));
    CHECK(raw_weight(0.8, 1, 1.1, 2) == Approx(0.074380165289).epsilon(1e-10));
    const double r0 = std::pow(1.0 - 0.2 / 1.1, 2.0), r1 = std::pow(1.0 - 0.8 / 1.1, 2.0);
    CHECK(w1.weights[0] == Approx(std::exp(r0) / (std::exp(r0) + std::exp(r1))).epsilon(1e-14));
    // quoted 0.6444 / 0.3556 follow from the rounded raw weights; exact is 0.64453
    CHECK(w1.weights[0] == Approx(0.6444).margin(2e-4));
    CHECK(w1.weights[1] == Approx(0.3556).margin(2e-4));
    CHECK(w1.epoch == 1);
    CHECK(t.history().size() == 1);

    const auto same = t.update_epoch(std::vector<double>{0.4, 0.4});
    CHECK(same.weights[0] == same.weights[1]);

    AchievementTracker three({1.0, 1.0, 1.0}, 1.1, 2.0);
    try {
        (void)three.update_epoch(std::vector<std::optional<double>>{0.1, std::nullopt});
        FAIL("expected an error");
    } catch (const Error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("1, 2") != std::string::npos);
    }
    CHECK(three.history().empty());
}

TEST_CASE("achievement properties over random inputs", "[achievement][property]") {
    Rng rng(2024);
    for (int i = 0; i < 10000; ++i) {
        const double p = rng.uniform(0.05, 1.0);
        const double margin = 1.0 + rng.uniform(1e-3, 1.0);
        const double gamma = rng.uniform(0.0, 5.0);
        const double s1 = rng.uniform(0.0, 1.0);
        const double s2 = rng.uniform(0.0, 1.0);
        const double lo = std::min(s1, s2), hi = std::max(s1, s2);
        const double wlo = raw_weight(lo, p, margin, gamma);
        const double whi = raw_weight(hi, p, margin, gamma);
        CHECK((wlo >= 0.0 && wlo <= 1.0));
        CHECK((whi >= 0.0 && whi <= 1.0));
        CHECK(wlo >= whi);
        if (gamma > 0.01 && hi - lo > 1e-6 && hi < margin * p) CHECK(wlo > whi);
        CHECK(raw_weight(lo, p, margin, 0.0) == 1.0);

        const std::size_t m = 1 + rng.index(7);
        std::vector<double> raw(m);
        for (auto& r : raw) r = raw_weight(rng.uniform(0.0, 1.0), p, margin, gamma);
        const auto w = normalize_weights(raw);
        double total = 0.0;
        for (double x : w) {
            CHECK(x > 0.0);
            total += x;
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);

        std::vector<std::size_t> perm(m);
        for (std::size_t k = 0; k < m; ++k) perm[k] = k;
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        std::vector<double> raw_p(m);
        for (std::size_t k = 0; k < m; ++k) raw_p[k] = raw[perm[k]];
        const auto w_p = normalize_weights(raw_p);
        for (std::size_t k = 0; k < m; ++k) CHECK(w_p[k] == Approx(w[perm[k]]).epsilon(1e-14));
    }
}

TEST_CASE("gamma zero recovers uniform weighting", "[achievement][property]") {
    AchievementTracker t({1.0, 0.5, 0.9}, 1.2, 0.0);
    const auto w = t.update_epoch(std::vector<double>{0.1, 0.95, 0.5});
    for (double x : w.weights) CHECK(x == Approx(1.0 / 3.0).epsilon(1e-15));
}
