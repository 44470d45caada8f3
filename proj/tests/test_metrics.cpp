#include <doctest.h>

#include <cmath>

#include "crit/evaluation.hpp"
#include "crit/metrics.hpp"
#include "helpers.hpp"

using namespace crit;

TEST_CASE("auc on small examples") {
    const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    const std::vector<int> y{0, 0, 1, 1};
    CHECK(roc_auc(s, y) == 0.75);
    const std::vector<double> tie{0.5, 0.5};
    const std::vector<int> ty{0, 1};
    CHECK(roc_auc(tie, ty) == 0.5);
    const std::vector<double> perfect{0.0, 0.1, 0.9};
    CHECK(roc_auc(perfect, std::vector<int>{0, 0, 1}) == 1.0);
    CHECK(roc_auc(perfect, std::vector<int>{1, 1, 0}) == 0.0);
    CHECK_THROWS_AS(roc_auc(perfect, std::vector<int>{0, 0, 0}), Error);
}

TEST_CASE("auc matches the pairwise count") {
    Rng rng(1);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 2 + rng.below(200);
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (auto& v : s) v = std::round(rng.normal() * 3) / 3;  // plenty of ties
        for (auto& v : y) v = rng.uniform() < 0.3;
        y[0] = 1;
        y[1] = 0;
        CHECK(std::abs(roc_auc(s, y) - roc_auc_pairwise(s, y)) <= 1e-12);
        const auto roc = roc_curve(s, y);
        CHECK(roc.front().fpr == 0.0);
        CHECK(roc.back().fpr == 1.0);
        CHECK(roc.back().tpr == 1.0);
        for (std::size_t k = 1; k < roc.size(); ++k) {
            CHECK(roc[k].fpr >= roc[k - 1].fpr);
            CHECK(roc[k].tpr >= roc[k - 1].tpr);
        }
        // Trapezoid area of the curve is the same statistic.
        double area = 0.0;
        for (std::size_t k = 1; k < roc.size(); ++k)
            area += (roc[k].fpr - roc[k - 1].fpr) * 0.5 * (roc[k].tpr + roc[k - 1].tpr);
        CHECK(std::abs(area - roc_auc(s, y)) <= 1e-12);
    }
}

TEST_CASE("random scores give auc near one half") {
    Rng rng(2);
    const std::size_t n = 20000;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        s[i] = rng.uniform();
        y[i] = rng.uniform() < 0.5;
    }
    CHECK(std::abs(roc_auc(s, y) - 0.5) <= 0.02);
}

TEST_CASE("pr curve matches the reference and counts") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.below(150);
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (auto& v : s) v = std::round(rng.normal() * 4) / 4;
        for (auto& v : y) v = rng.uniform() < 0.2;
        y[0] = 1;
        const auto a = pr_curve(s, y), b = pr_curve_reference(s, y);
        REQUIRE(a.size() == b.size());
        std::size_t P = 0;
        for (int v : y) P += v;
        for (std::size_t k = 0; k < a.size(); ++k) {
            CHECK(a[k].threshold == b[k].threshold);
            CHECK(a[k].tp == b[k].tp);
            CHECK(a[k].fp == b[k].fp);
            CHECK(std::abs(a[k].precision - b[k].precision) <= 1e-12);
            CHECK(std::abs(a[k].recall - b[k].recall) <= 1e-12);
            CHECK(std::abs(a[k].precision * static_cast<double>(a[k].tp + a[k].fp) - static_cast<double>(a[k].tp)) <= 1e-9);
            CHECK(std::abs(a[k].recall * static_cast<double>(P) - static_cast<double>(a[k].tp)) <= 1e-9);
            if (k) CHECK(a[k].recall >= a[k - 1].recall);
        }
        CHECK(a.back().recall == 1.0);
        const double ap = average_precision(a);
        CHECK(ap >= 0.0);
        CHECK(ap <= 1.0);
    }
}

TEST_CASE("confusion and identification rates") {
    const std::vector<double> s{0.1, 0.2, 0.6, 0.7, 0.9};
    const std::vector<int> y{0, 1, 0, 1, 1};
    const auto c = confusion_at(s, y, 0.5);
    CHECK(c.tp == 2);
    CHECK(c.fp == 1);
    CHECK(c.tn == 1);
    CHECK(c.fn == 1);
    CHECK(c.precision() == doctest::Approx(2.0 / 3.0));
    CHECK(c.recall() == doctest::Approx(2.0 / 3.0));
    const auto r = identification_rates(s, y, 0.5);
    CHECK(r.pos_rate == doctest::Approx(2.0 / 3.0));
    CHECK(r.neg_rate == 0.5);
    // strictly greater: a score equal to the threshold is negative
    CHECK(confusion_at(s, y, 0.7).tp == 1);

    const double t = f1_max_threshold(s, y);
    const auto best = confusion_at(s, y, t);
    Rng rng(4);
    for (int k = 0; k < 200; ++k) CHECK(confusion_at(s, y, rng.uniform(-0.1, 1.1)).f1() <= best.f1() + 1e-12);
}

TEST_CASE("calibration error") {
    const std::vector<double> p{0.1, 0.5, 1.0}, t{0.0, 0.5, 0.7};
    CHECK(calibration_error(p, t) == doctest::Approx((0.1 + 0.0 + 0.3) / 3));
    CHECK(calibration_error(t, t) == 0.0);
    CHECK_THROWS_AS(calibration_error(p, std::vector<double>{0.0}), Error);
}

TEST_CASE("report serializes without non-finite numbers") {
    Rng rng(5);
    std::vector<double> s(500);
    std::vector<int> y(500);
    for (std::size_t i = 0; i < s.size(); ++i) {
        y[i] = i % 10 == 0;
        s[i] = rng.normal() + y[i];
    }
    const auto r = make_report("demo", s, y, 0.5);
    const auto j = summary_json(r);
    CHECK(j.at("name") == "demo");
    CHECK(j.dump().find("nan") == std::string::npos);
    const auto csv = roc_csv(r, 50);
    CHECK(std::count(csv.begin(), csv.end(), '\n') <= 52);
    CHECK(roc_svg(std::span<const MetricReport>(&r, 1)).starts_with("<svg"));
}

TEST_CASE("cascade predictor") {
    const auto ds = testing::toy_dataset(6, 30, 8, 2, 2, 1);
    FilterModel f(ds.input_dim(), {0, {5}, 4, nn::Activation::tanh});
    BBNArchitecture a;
    a.backbone = {0, {5}, 4, nn::Activation::tanh};
    a.d_z = 3;
    BBNModel m(ds.input_dim(), a);
    Rng rng(6);
    f.init(rng);
    f.fit_standardizer(ds);
    m.init(rng);
    m.fit_standardizer(ds);
    const auto r = f.score_dataset(ds);
    std::vector<double> sorted = r;
    std::sort(sorted.begin(), sorted.end());
    f.epsilon = sorted[sorted.size() / 2];

    CascadePredictor c{&f, &m};
    const auto p = c.predict_dataset(ds);
    const auto q = m.predict_dataset(ds);
    const auto with_scores = c.predict_dataset(ds, {}, &r);
    CHECK(p == with_scores);
    std::vector<double> x(ds.input_dim());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        ds.fill_window(i, x);
        if (r[i] <= f.epsilon)
            CHECK(p[i] == 0.0);
        else
            CHECK(std::abs(p[i] - q[i]) <= 1e-12);
        CHECK(std::abs(c.predict_one(x) - p[i]) <= 1e-12);
    }

    FilterModel uncalibrated = f;
    uncalibrated.epsilon = std::numeric_limits<double>::quiet_NaN();
    CascadePredictor bad{&uncalibrated, &m};
    CHECK_THROWS_AS(bad.predict_dataset(ds), Error);
}

TEST_CASE("baselines learn the toy corpus") {
    const auto train = testing::toy_dataset(30, 120, 12, 31);
    const auto test = testing::toy_dataset(30, 120, 12, 32);
    BaselineSettings s;
    s.arch.backbone = {0, {8}, 6, nn::Activation::tanh};
    s.arch.d_z = 4;
    s.training.epochs = 4;
    s.training.steps_per_epoch = 50;
    s.training.batch = 64;
    s.training.adam.lr = 1e-2;
    s.retrain_epochs = 2;
    std::vector<std::string> names{"bbn", "cbs", "decoupling"};
    const auto reports = run_baselines(train, nullptr, test, names, s, 7);
    REQUIRE(reports.size() == 3);
    for (const auto& r : reports) {
        INFO(r.name);
        CHECK(r.auc >= 0.95);
    }
    CHECK_THROWS_AS(train_baseline("nope", train, nullptr, s, 1), Error);
}
