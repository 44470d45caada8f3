#include <doctest.h>

#include <cmath>

#include "crit/stage3.hpp"
#include "helpers.hpp"

using namespace crit;

namespace {

struct Fixture {
    LabeledDataset ds = testing::toy_dataset(6, 10, 8, 21, 2, 2);
    std::vector<Transition> replay;
    BBNModel model;

    Fixture() {
        replay = build_replay(critical_episode_index(ds));
        BBNArchitecture a;
        a.backbone = {0, {6}, 5, nn::Activation::tanh};
        a.d_z = 4;
        model = BBNModel(ds.input_dim(), a);
        Rng rng(3);
        model.init(rng);
        model.fit_standardizer(ds);
    }

    // Model whose two class rows coincide, so Q = 0.5 everywhere.
    BBNModel flat() const {
        BBNModel m = model;
        auto W = m.params.view("classifier.weight");
        W.row(1) = W.row(0);
        return m;
    }
};

std::vector<const Transition*> pointers(const std::vector<Transition>& v) {
    std::vector<const Transition*> p;
    for (const auto& t : v) p.push_back(&t);
    return p;
}

}  // namespace

TEST_CASE("replay covers every critical-episode step with one terminal reward") {
    Fixture f;
    CHECK(f.replay.size() == 6 * 8);
    std::size_t rewards = 0, terminals = 0;
    for (const auto& t : f.replay) {
        rewards += t.reward;
        terminals += t.terminal;
        CHECK(t.terminal == t.X_next.empty());
        CHECK(t.reward == (t.terminal ? 1 : 0));
    }
    CHECK(rewards == 6);
    CHECK(terminals == 6);
    CHECK_THROWS_AS(build_replay(CriticalEpisodeIndex{}), Error);
}

TEST_CASE("dqn targets") {
    Fixture f;
    const auto target = f.flat();
    for (const auto& t : f.replay) {
        if (t.terminal) {
            CHECK(dqn_target(t, target, 0.99) == 1.0);
        } else {
            CHECK(dqn_target(t, target, 0.99) == doctest::Approx(0.495).epsilon(1e-12));
            CHECK(dqn_target(t, target, 0.0) == 0.0);
        }
    }
    CHECK_THROWS_AS(dqn_target(f.replay[0], target, 1.5), Error);
}

TEST_CASE("loss vanishes when Q equals its targets") {
    Fixture f;
    const auto m = f.flat();
    auto p = pointers(f.replay);
    const std::vector<double> y(p.size(), 0.5);
    std::vector<double> g;
    CHECK(dense_dqn_loss_with_targets(p, y, m, &g) <= 1e-24);
    double n = 0.0;
    for (double v : g) n += v * v;
    CHECK(n <= 1e-24);
}

TEST_CASE("loss matches a scalar oracle") {
    Fixture f;
    const double gamma = 0.9;
    const auto target = f.model;
    double expect = 0.0;
    for (const auto& t : f.replay) {
        const double y = t.terminal ? 1.0 : std::clamp(gamma * f.model.predict_reference(t.X_next), 0.0, 1.0);
        const double q = f.model.predict_reference(t.X);
        expect += (y - q) * (y - q);
    }
    CHECK(std::abs(dense_dqn_loss(std::span<const Transition>(f.replay), f.model, target, gamma) - expect) <= 1e-10);
}

TEST_CASE("transitions outside critical episodes contribute exactly zero") {
    Fixture f;
    auto mixed = f.replay;
    Rng rng(5);
    for (int k = 0; k < 30; ++k) {
        Transition t = f.replay[rng.below(f.replay.size())];
        for (auto& v : t.X) v += rng.normal();
        t.in_critical_episode = false;
        t.label = 0;
        mixed.insert(mixed.begin() + static_cast<std::ptrdiff_t>(rng.below(mixed.size())), t);
    }
    std::vector<double> g0, g1;
    const double a = dense_dqn_loss(std::span<const Transition>(f.replay), f.model, f.model, 0.99, &g0);
    // Same multiset of critical transitions, in the order they appear in `mixed`.
    std::vector<Transition> kept;
    for (const auto& t : mixed)
        if (t.in_critical_episode) kept.push_back(t);
    const double b = dense_dqn_loss(std::span<const Transition>(mixed), f.model, f.model, 0.99, &g1);
    std::vector<double> g2;
    const double c = dense_dqn_loss(std::span<const Transition>(kept), f.model, f.model, 0.99, &g2);
    CHECK(b == c);
    CHECK(g1 == g2);
    CHECK(std::abs(a - b) <= 1e-12);

    // A batch of only outside transitions gives exactly zero.
    std::vector<Transition> outside;
    for (const auto& t : mixed)
        if (!t.in_critical_episode) outside.push_back(t);
    std::vector<double> g3;
    CHECK(dense_dqn_loss(std::span<const Transition>(outside), f.model, f.model, 0.99, &g3) == 0.0);
    for (double v : g3) CHECK(v == 0.0);
}

TEST_CASE("dense dqn gradient passes a finite-difference check") {
    Fixture f;
    for (const auto& b : f.model.params.blocks())
        if (b.name.ends_with(".bias"))
            for (std::size_t k = 0; k < b.size(); ++k) f.model.params.values()[b.offset + k] = 0.05 * (1.0 + k % 3);
    auto p = pointers(f.replay);
    const auto y = dqn_targets(p, f.model, 0.99);
    auto loss = [&](std::span<const double> theta, std::vector<double>* grad) {
        BBNModel c = f.model;
        std::copy(theta.begin(), theta.end(), c.params.values().begin());
        return dense_dqn_loss_with_targets(p, y, c, grad);
    };
    const auto r = testing::grad_check_tail(loss, f.model.params.values(), testing::trainable_offset(f.model.params),
                                            1e-5, 9);
    CHECK(r.finite);
    CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("gradient decomposes into positive and negative label terms") {
    Fixture f;
    const auto gb = gradient_balance_report(std::span<const Transition>(f.replay), f.model, f.model, 0.99);
    CHECK(gb.n_pos == 6 * 2);
    CHECK(gb.n_neg == 6 * 6);
    CHECK(gb.identity_error <= 1e-8);
    CHECK(gb.grad_norm_pos > 0.0);
    CHECK(gb.grad_norm_neg > 0.0);

    std::vector<Transition> terminal_only;
    for (const auto& t : f.replay)
        if (t.terminal) terminal_only.push_back(t);
    const auto tb = gradient_balance_report(std::span<const Transition>(terminal_only), f.model, f.model, 0.99);
    CHECK(tb.n_neg == 0);
    CHECK(tb.grad_norm_neg == 0.0);
    CHECK(std::abs(tb.grad_norm_pos - tb.grad_norm_total) <= 1e-12);
}

TEST_CASE("fine-tuning respects its scope") {
    Fixture f;
    DenseDQNConfig cfg;
    cfg.steps = 0;
    CHECK(finetune(f.model, f.replay, cfg, 1).model.params.values() == f.model.params.values());

    cfg.steps = 40;
    cfg.batch = 16;
    cfg.target_sync_period = 10;
    cfg.log_every = 10;
    const auto r = finetune(f.model, f.replay, cfg, 1);
    const auto mask = f.model.params.mask(cfg.finetune_scope);
    std::size_t changed = 0;
    for (std::size_t k = 0; k < mask.size(); ++k) {
        if (!mask[k])
            CHECK(r.model.params.values()[k] == f.model.params.values()[k]);
        else
            changed += r.model.params.values()[k] != f.model.params.values()[k];
    }
    CHECK(changed > 0);
    CHECK(r.log.size() == 5);
    for (const auto& e : r.log) CHECK(std::isfinite(e.loss));
    CHECK(finetune(f.model, f.replay, cfg, 1).model.params.values() == r.model.params.values());

    CHECK_THROWS_AS(finetune(f.model, {}, cfg, 1), Error);
    cfg.finetune_scope = {"nothing."};
    CHECK_THROWS_AS(finetune(f.model, f.replay, cfg, 1), Error);
}
