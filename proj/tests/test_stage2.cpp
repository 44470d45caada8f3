#include <doctest.h>

#include <cmath>

#include "crit/metrics.hpp"
#include "crit/stage2.hpp"
#include "helpers.hpp"

using namespace crit;
using nn::Matrix;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

BBNArchitecture small_arch(bool normalized = true) {
    BBNArchitecture a;
    a.backbone = {0, {6}, 5, nn::Activation::tanh};
    a.d_z = 4;
    a.normalized = normalized;
    return a;
}

}  // namespace

TEST_CASE("feature mixing endpoints and symmetry") {
    Rng rng(1);
    const Matrix Fa = random_matrix(7, 5, rng), Fb = random_matrix(7, 5, rng);
    const Matrix Wa = random_matrix(5, 3, rng), Wb = random_matrix(5, 3, rng);
    CHECK((mix_features(Fa, Fb, Wa, Wb, 1.0) - Fa * Wa).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((mix_features(Fa, Fb, Wa, Wb, 0.0) - Fb * Wb).cwiseAbs().maxCoeff() <= 1e-12);
    for (double a : {0.1, 0.37, 0.5, 0.9})
        CHECK((mix_features(Fa, Fb, Wa, Wb, a) - mix_features(Fb, Fa, Wb, Wa, 1.0 - a)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("focal loss values") {
    CHECK(focal_loss(0.5, 1, 0.0) == doctest::Approx(std::log(2.0)));
    CHECK(std::abs(focal_loss(0.5, 1, 2.0) - 0.25 * std::log(2.0)) <= 1e-12);
    CHECK(focal_loss(0.9, 1, 2.0) == doctest::Approx(0.01 * -std::log(0.9)).epsilon(1e-12));
    CHECK(focal_loss(0.9, 0, 2.0) == doctest::Approx(0.81 * -std::log(0.1)).epsilon(1e-12));
    CHECK(cross_entropy(0.25, 0) == doctest::Approx(-std::log(0.75)));
    CHECK(std::isfinite(focal_loss(0.0, 1, 2.0)));
    CHECK(focal_loss(0.0, 1, 0.0) == doctest::Approx(-std::log(kProbClamp)));
    CHECK_THROWS_AS(focal_loss(0.5, 2, 1.0), Error);
    // gamma lowers the loss of well-classified samples
    for (double p = 0.55; p < 1.0; p += 0.05) CHECK(focal_loss(p, 1, 2.0) < focal_loss(p, 1, 0.0));
}

TEST_CASE("combined loss matches a scalar oracle") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(30));
        Matrix L = random_matrix(n, 2, rng);
        L *= 4.0;
        std::vector<int> ya(static_cast<std::size_t>(n)), yb(static_cast<std::size_t>(n));
        for (auto& y : ya) y = rng.uniform() < 0.3;
        for (auto& y : yb) y = rng.uniform() < 0.3;
        const double alpha = rng.uniform(), gamma = rng.uniform(0, 3);
        double expect = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double p = 1.0 / (1.0 + std::exp(L(i, 0) - L(i, 1)));
            const double pa = std::clamp(ya[static_cast<std::size_t>(i)] ? p : 1 - p, kProbClamp, 1 - kProbClamp);
            const double pb = std::clamp(yb[static_cast<std::size_t>(i)] ? p : 1 - p, kProbClamp, 1 - kProbClamp);
            expect += alpha * -std::pow(1 - pa, gamma) * std::log(pa) + (1 - alpha) * -std::log(pb);
        }
        expect /= static_cast<double>(n);
        const auto got = combined_loss(L, ya, yb, alpha, gamma);
        CHECK(std::abs(got.total - expect) <= 1e-10);
        CHECK(std::abs(got.total - (alpha * got.loss_a + (1 - alpha) * got.loss_b)) <= 1e-10);
    }
    Matrix L = Matrix::Zero(3, 2);
    const std::vector<int> y1{1, 0, 1}, y2{0, 0, 1};
    CHECK(combined_loss(L, y1, y2, 1.0, 2.0).total == doctest::Approx(combined_loss(L, y1, y1, 1.0, 2.0).total));
    CHECK(combined_loss(L, y2, y1, 0.0, 2.0).total == doctest::Approx(combined_loss(L, y1, y1, 0.0, 0.0).total));
}

TEST_CASE("combined loss logit gradient") {
    Rng rng(3);
    Matrix L = random_matrix(6, 2, rng);
    const std::vector<int> ya{1, 0, 0, 1, 0, 0}, yb{0, 0, 1, 1, 0, 0};
    Matrix d;
    combined_loss(L, ya, yb, 0.6, 2.0, &d);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < L.size(); ++i) {
        Matrix lp = L, lm = L;
        lp.data()[i] += h;
        lm.data()[i] -= h;
        const double num = (combined_loss(lp, ya, yb, 0.6, 2.0).total - combined_loss(lm, ya, yb, 0.6, 2.0).total) / (2 * h);
        CHECK(std::abs(num - d.data()[i]) <= 1e-7);
    }
}

TEST_CASE("branch sampler statistics") {
    const auto ds = testing::toy_dataset(10, 90, 10, 4);  // 10 positives out of 1000
    const double n = 1e5;
    BranchSampler bal(ds, SamplerMode::class_balanced, 1), uni(ds, SamplerMode::uniform, 2);
    std::size_t pos_bal = 0, pos_uni = 0;
    std::vector<std::size_t> hits(ds.size(), 0);
    for (int k = 0; k < static_cast<int>(n); ++k) {
        pos_bal += ds.label(bal.draw());
        const auto u = uni.draw();
        pos_uni += ds.label(u);
        ++hits[u];
    }
    const double pb = 0.5, pu = static_cast<double>(ds.positives().size()) / static_cast<double>(ds.size());
    CHECK(std::abs(static_cast<double>(pos_bal) / n - pb) <= 4 * std::sqrt(pb * (1 - pb) / n));
    CHECK(std::abs(static_cast<double>(pos_uni) / n - pu) <= 4 * std::sqrt(pu * (1 - pu) / n));
    // every sample is reachable under uniform sampling
    std::size_t zero = 0;
    for (auto h : hits) zero += h == 0;
    CHECK(zero == 0);

    const auto neg_only = testing::toy_dataset(0, 5, 5, 1);
    CHECK_THROWS_AS(BranchSampler(neg_only, SamplerMode::class_balanced, 1), Error);
    CHECK_NOTHROW(BranchSampler(neg_only, SamplerMode::uniform, 1));
}

TEST_CASE("alpha schedule") {
    AlphaSchedule s;
    CHECK(s.at(0, 20) == 1.0);
    CHECK(s.at(19, 20) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(s.at(0, 1) == 1.0);
    double prev = 2.0;
    for (std::size_t e = 0; e < 20; ++e) {
        CHECK(s.at(e, 20) <= prev);
        prev = s.at(e, 20);
    }
    CHECK(s.at(10, 21) == doctest::Approx(0.5));
}

TEST_CASE("bbn backward passes a finite-difference check") {
    for (bool normalized : {true, false}) {
        const auto ds = testing::toy_dataset(4, 8, 6, 5, 2, 1);
        BBNModel m(ds.input_dim(), small_arch(normalized));
        Rng rng(6);
        m.init(rng);
        m.fit_standardizer(ds);
        for (const auto& b : m.params.blocks())
            if (b.name.ends_with(".bias") && !b.name.starts_with("input"))
                for (std::size_t k = 0; k < b.size(); ++k) m.params.values()[b.offset + k] = 0.1 * rng.normal();
        const Matrix Xa = random_matrix(5, static_cast<Eigen::Index>(ds.input_dim()), rng);
        const Matrix Xb = random_matrix(5, static_cast<Eigen::Index>(ds.input_dim()), rng);
        const std::vector<int> ya{1, 0, 1, 0, 0}, yb{0, 0, 1, 0, 1};
        auto loss = [&](std::span<const double> theta, std::vector<double>* grad) {
            BBNModel c = m;
            std::copy(theta.begin(), theta.end(), c.params.values().begin());
            BBNCache cache;
            const Matrix L = c.logits(Xa, Xb, 0.3, &cache);
            Matrix d;
            const double v = combined_loss(L, ya, yb, 0.3, 2.0, &d).total;
            if (grad) {
                grad->assign(c.params.size(), 0.0);
                c.backward(cache, d, *grad);
            }
            return v;
        };
        const auto r = testing::grad_check_tail(loss, m.params.values(), testing::trainable_offset(m.params), 1e-5, 7);
        CHECK(r.finite);
        CHECK(r.max_rel_error <= 1e-4);
    }
}

TEST_CASE("prediction properties") {
    const auto ds = testing::toy_dataset(4, 8, 6, 5, 3, 1);
    BBNModel m(ds.input_dim(), small_arch());
    Rng rng(8);
    m.init(rng);
    m.fit_standardizer(ds);
    const Matrix X = random_matrix(50, static_cast<Eigen::Index>(ds.input_dim()), rng);
    const auto p = m.predict(X);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        CHECK(p[i] >= 0.0);
        CHECK(p[i] <= 1.0);
        CHECK(std::abs(p[i] - m.predict_reference({X.row(i).data(), ds.input_dim()})) <= 1e-12);
        const Matrix L = m.logits(X.row(i), X.row(i), m.arch.inference_alpha);
        CHECK(std::abs(p[i] - nn::positive_probability(L(0, 0), L(0, 1))) <= 1e-12);
    }
    // Equal class weights give 0.5 everywhere.
    auto W = m.params.view("classifier.weight");
    W.row(1) = W.row(0);
    const auto half = m.predict(X);
    for (Eigen::Index i = 0; i < half.size(); ++i) CHECK(std::abs(half[i] - 0.5) <= 1e-12);
}

TEST_CASE("enhanced bbn learns the toy corpus") {
    const auto ds = testing::toy_dataset(30, 120, 12, 9);
    Stage2Config cfg;
    cfg.arch = small_arch();
    cfg.training.epochs = 6;
    cfg.training.steps_per_epoch = 60;
    cfg.training.batch = 64;
    cfg.training.adam.lr = 1e-2;
    cfg.init_from_stage1 = false;
    const auto r = train_bbn(ds, &ds, nullptr, cfg, 3);
    CHECK(r.log.size() == 6);
    CHECK(r.log.front().alpha == 1.0);
    const auto p = r.model.predict_dataset(ds);
    const auto y = dataset_labels(ds);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < p.size(); ++i) ok += (p[i] > 0.5) == (y[i] == 1);
    CHECK(static_cast<double>(ok) / static_cast<double>(p.size()) >= 0.99);
    CHECK(r.log.back().val_auc >= 0.99);

    // normalized heads stay unit norm
    const auto W = r.model.params.view("classifier.weight");
    CHECK(std::abs(W.row(0).norm() - 1.0) <= 1e-9);
    CHECK(std::abs(W.row(1).norm() - 1.0) <= 1e-9);

    const auto again = train_bbn(ds, &ds, nullptr, cfg, 3);
    CHECK(again.model.params.values() == r.model.params.values());
}

TEST_CASE("single-class training data is refused") {
    const auto ds = testing::toy_dataset(0, 20, 6, 1);
    Stage2Config cfg;
    cfg.arch = small_arch();
    cfg.init_from_stage1 = false;
    CHECK_THROWS_AS(train_bbn(ds, nullptr, nullptr, cfg, 1), Error);
}

TEST_CASE("initialization from the reward model copies the backbone") {
    const auto ds = testing::toy_dataset(4, 8, 6, 5, 2, 1);
    FilterModel f(ds.input_dim(), {0, {6}, 5, nn::Activation::tanh});
    Rng rng(1);
    f.init(rng);
    f.fit_standardizer(ds);
    BBNModel m(ds.input_dim(), small_arch());
    m.init(rng);
    CHECK(m.init_from(f) > 0);
    const Matrix X = random_matrix(3, static_cast<Eigen::Index>(ds.input_dim()), rng);
    CHECK((m.branch_a.forward(m.params, m.standardizer.apply(m.params, X)) -
           f.backbone.forward(f.params, f.standardizer.apply(f.params, X)))
              .cwiseAbs()
              .maxCoeff() == 0.0);
}
