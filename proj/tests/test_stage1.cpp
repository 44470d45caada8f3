#include <doctest.h>

#include <cmath>
#include <limits>

#include "crit/stage1.hpp"
#include "helpers.hpp"

using namespace crit;

TEST_CASE("ranking loss reference values") {
    const std::vector<double> a{0.0}, b{0.0};
    CHECK(ranking_loss(a, b) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    const std::vector<double> hi{10.0}, lo{0.0};
    CHECK(ranking_loss(hi, lo) == doctest::Approx(4.5399e-5).epsilon(1e-4));
    const std::vector<double> p{-1.0}, n{1.0};
    CHECK(ranking_loss(p, n) == doctest::Approx(2.126928).epsilon(1e-6));
}

TEST_CASE("ranking loss is shift invariant and its gradient matches finite differences") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> p(1 + rng.below(20)), n(p.size());
        for (auto& v : p) v = rng.normal() * 3;
        for (auto& v : n) v = rng.normal() * 3;
        const double base = ranking_loss(p, n);
        const double c = rng.uniform(-100, 100);
        auto ps = p, ns = n;
        for (auto& v : ps) v += c;
        for (auto& v : ns) v += c;
        CHECK(std::abs(ranking_loss(ps, ns) - base) <= 1e-12);

        std::vector<double> dp, dn;
        ranking_loss(p, n, &dp, &dn);
        const double h = 1e-6;
        const std::size_t k = rng.below(p.size());
        auto pp = p, pm = p;
        pp[k] += h;
        pm[k] -= h;
        CHECK(std::abs((ranking_loss(pp, n) - ranking_loss(pm, n)) / (2 * h) - dp[k]) <= 1e-7);
        CHECK(std::abs(dp[k] + dn[k]) <= 1e-15);
    }
}

TEST_CASE("softplus is stable") {
    CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)));
    CHECK(softplus(800.0) == 800.0);
    CHECK(softplus(-800.0) >= 0.0);
    CHECK(std::isfinite(softplus(-800.0)));
}

TEST_CASE("pair loss gradient passes a finite-difference check") {
    const auto ds = testing::toy_dataset(6, 12, 8, 5, 3, 2);
    FilterModel m(ds.input_dim(), {0, {7, 5}, 4, nn::Activation::tanh});
    Rng rng(9);
    m.init(rng);
    m.fit_standardizer(ds);
    for (const auto& b : m.params.blocks())
        if (b.name.ends_with(".bias"))
            for (std::size_t k = 0; k < b.size(); ++k) m.params.values()[b.offset + k] = 0.1 * rng.normal();
    nn::Matrix Xp(5, static_cast<Eigen::Index>(ds.input_dim())), Xn(5, static_cast<Eigen::Index>(ds.input_dim()));
    for (Eigen::Index i = 0; i < 5; ++i) {
        ds.fill_window(ds.positives()[static_cast<std::size_t>(i)], {Xp.row(i).data(), ds.input_dim()});
        ds.fill_window(ds.negatives()[static_cast<std::size_t>(i) * 7], {Xn.row(i).data(), ds.input_dim()});
    }
    auto loss = [&](std::span<const double> theta, std::vector<double>* grad) {
        FilterModel c = m;
        std::copy(theta.begin(), theta.end(), c.params.values().begin());
        return c.pair_loss(Xp, Xn, grad);
    };
    const auto r = testing::grad_check_tail(loss, m.params.values(), testing::trainable_offset(m.params), 1e-5, 4);
    CHECK(r.finite);
    CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("reward model separates the toy corpus and is deterministic") {
    const auto ds = testing::toy_dataset(40, 200, 20, 7);
    Stage1Config cfg;
    cfg.backbone = {0, {8}, 8, nn::Activation::tanh};
    cfg.steps = 300;
    cfg.batch_pairs = 64;
    cfg.adam.lr = 1e-2;
    const auto a = train_reward_model(ds, cfg, 11);
    const auto scores = a.model.score_dataset(ds);
    std::size_t correct = 0, total = 0;
    Rng rng(1);
    for (int k = 0; k < 20000; ++k) {
        const auto p = ds.positives()[rng.below(ds.positives().size())];
        const auto n = ds.negatives()[rng.below(ds.negatives().size())];
        correct += scores[p] > scores[n];
        ++total;
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(total) >= 0.99);
    CHECK(a.log.back().loss < a.log.front().loss);

    const auto b = train_reward_model(ds, cfg, 11);
    CHECK(a.model.params.values() == b.model.params.values());
    const auto c = train_reward_model(ds, cfg, 12);
    CHECK(a.model.params.values() != c.model.params.values());
}

TEST_CASE("batched score matches the reference path") {
    const auto ds = testing::toy_dataset(5, 20, 10, 2, 4, 1);
    FilterModel m(ds.input_dim(), {0, {6}, 5, nn::Activation::relu});
    Rng rng(2);
    m.init(rng);
    m.fit_standardizer(ds);
    const auto scores = m.score_dataset(ds);
    std::vector<double> x(ds.input_dim());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        ds.fill_window(i, x);
        CHECK(std::abs(scores[i] - m.score_reference(x)) <= 1e-12);
    }
}

TEST_CASE("threshold calibration") {
    const std::vector<double> s{2.0, 3.0, 5.0};
    const double all = calibrate_threshold(s, 1.0);
    CHECK(all < 2.0);
    CHECK(all == std::nextafter(2.0, -std::numeric_limits<double>::infinity()));
    const double two = calibrate_threshold(s, 2.0 / 3.0);
    CHECK(two < 3.0);
    CHECK(two >= 2.0);

    // Recall is met for random score sets and targets, with ties.
    Rng rng(4);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> v(1 + rng.below(300));
        for (auto& x : v) x = std::round(rng.normal() * 4) / 4;
        const double target = rng.uniform(0.5, 1.0);
        const double eps = calibrate_threshold(v, target);
        std::size_t above = 0;
        for (double x : v) above += x > eps;
        CHECK(static_cast<double>(above) >= target * static_cast<double>(v.size()) - 1e-9);
    }
    CHECK_THROWS_AS(calibrate_threshold(std::vector<double>{}, 0.9), Error);
}

TEST_CASE("filtering keeps positives and is monotone in the threshold") {
    const auto ds = testing::toy_dataset(10, 50, 10, 3);
    Rng rng(5);
    std::vector<double> scores(ds.size());
    for (auto& v : scores) v = rng.normal();

    const auto none = filter_by_scores(scores, ds, -1e300);
    CHECK(none.survivors.size() == ds.size());
    CHECK(none.stats.removed_negative_rate == 0.0);
    const auto all = filter_by_scores(scores, ds, 1e300);
    CHECK(all.survivors.size() == ds.positives().size());
    CHECK(all.stats.removed_negative_rate == 1.0);

    std::size_t prev = ds.size() + 1;
    for (double eps = -3.0; eps <= 3.0; eps += 0.25) {
        const auto r = filter_by_scores(scores, ds, eps);
        CHECK(r.survivors.size() <= prev);
        CHECK(r.survivors.positives().size() == ds.positives().size());
        CHECK(r.stats.n_pos == ds.positives().size());
        prev = r.survivors.size();
    }
}
