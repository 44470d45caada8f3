#include "crit/stage3.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace crit {

void to_json(nlohmann::json& j, const DenseDQNConfig& c) {
    j = nlohmann::json{{"gamma", c.gamma},
                       {"target_sync_period", c.target_sync_period},
                       {"finetune_scope", c.finetune_scope},
                       {"batch", c.batch},
                       {"steps", c.steps},
                       {"lr", c.adam.lr},
                       {"log_every", c.log_every}};
}

void from_json(const nlohmann::json& j, DenseDQNConfig& c) {
    c.gamma = j.value("gamma", c.gamma);
    c.target_sync_period = j.value("target_sync_period", c.target_sync_period);
    if (j.contains("finetune_scope")) j.at("finetune_scope").get_to(c.finetune_scope);
    c.batch = j.value("batch", c.batch);
    c.steps = j.value("steps", c.steps);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.log_every = j.value("log_every", c.log_every);
}

std::vector<Transition> build_replay(const CriticalEpisodeIndex& index) {
    require(!index.empty(), ErrorKind::precondition, "no critical episodes: the replay for dense DQN would be empty");
    std::vector<Transition> replay;
    replay.reserve(index.transition_count());
    for (const auto& ep : index.episodes) {
        for (const auto& it : ep.transitions) {
            Transition t;
            t.X = it.X;
            t.action = it.action;
            t.reward = it.reward;
            t.terminal = it.terminal;
            t.X_next = it.X_next;
            t.label = it.label;
            t.episode_id = ep.episode_id;
            t.in_critical_episode = true;
            replay.push_back(std::move(t));
        }
    }
    return replay;
}

namespace {

nn::Matrix stack(std::span<const Transition* const> batch, bool next_state, std::size_t in) {
    nn::Matrix X(static_cast<Eigen::Index>(batch.size()), static_cast<Eigen::Index>(in));
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& src = next_state ? batch[i]->X_next : batch[i]->X;
        require(src.size() == in, ErrorKind::precondition, "transition window does not match the model input");
        std::copy(src.begin(), src.end(), X.row(static_cast<Eigen::Index>(i)).data());
    }
    return X;
}

std::vector<const Transition*> pointers(std::span<const Transition> batch) {
    std::vector<const Transition*> p;
    p.reserve(batch.size());
    for (const auto& t : batch) p.push_back(&t);
    return p;
}

}  // namespace

std::vector<double> q_values(const BBNModel& model, std::span<const Transition* const> batch, bool next_state) {
    if (batch.empty()) return {};
    const nn::Vector q = model.predict(stack(batch, next_state, model.input_dim()));
    return {q.data(), q.data() + q.size()};
}

double dqn_target(const Transition& t, const BBNModel& target_model, double gamma) {
    const Transition* p = &t;
    return dqn_targets(std::span<const Transition* const>(&p, 1), target_model, gamma)[0];
}

std::vector<double> dqn_targets(std::span<const Transition* const> batch, const BBNModel& target_model, double gamma) {
    require(gamma >= 0.0 && gamma <= 1.0, ErrorKind::config, "gamma must lie in [0, 1]");
    std::vector<double> y(batch.size());
    std::vector<const Transition*> boot;
    std::vector<std::size_t> where;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        y[i] = batch[i]->reward;
        // With gamma = 0 the bootstrap term vanishes; skip the forward pass.
        if (!batch[i]->terminal && gamma > 0.0) {
            boot.push_back(batch[i]);
            where.push_back(i);
        }
    }
    // The scripted policy fixes the next action, so max over a' is Q(s').
    const auto q = q_values(target_model, boot, true);
    for (std::size_t k = 0; k < boot.size(); ++k) y[where[k]] += gamma * q[k];
    for (double& v : y) v = std::clamp(v, 0.0, 1.0);
    return y;
}

double dense_dqn_loss_with_targets(std::span<const Transition* const> batch, std::span<const double> targets,
                                   const BBNModel& model, std::vector<double>* grad,
                                   std::span<const std::uint8_t> include) {
    require(targets.size() == batch.size(), ErrorKind::precondition, "target count does not match the batch");
    if (grad) grad->assign(model.params.size(), 0.0);
    // Only critical-episode transitions (optionally a further subset) enter
    // the loss; the others are dropped before the forward pass, so they
    // contribute exactly zero to both the value and the gradient.
    std::vector<const Transition*> used;
    std::vector<double> y;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (!batch[i]->in_critical_episode) continue;
        if (!include.empty() && !include[i]) continue;
        used.push_back(batch[i]);
        y.push_back(targets[i]);
    }
    if (used.empty()) return 0.0;
    const nn::Matrix X = stack(used, false, model.input_dim());
    BBNCache cache;
    const nn::Matrix L = model.logits(X, X, model.arch.inference_alpha, &cache);
    nn::Matrix dlogits(L.rows(), 2);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < L.rows(); ++i) {
        const double q = nn::positive_probability(L(i, 0), L(i, 1));
        require(std::isfinite(q), ErrorKind::divergence, "non-finite Q value");
        const double e = y[static_cast<std::size_t>(i)] - q;
        loss += e * e;
        const double dm = -2.0 * e * q * (1.0 - q);
        dlogits(i, 1) = dm;
        dlogits(i, 0) = -dm;
    }
    if (grad) model.backward(cache, dlogits, *grad);
    return loss;
}

double dense_dqn_loss(std::span<const Transition* const> batch, const BBNModel& model, const BBNModel& target_model,
                      double gamma, std::vector<double>* grad) {
    std::vector<const Transition*> critical;
    for (const auto* t : batch)
        if (t->in_critical_episode) critical.push_back(t);
    const auto y = dqn_targets(critical, target_model, gamma);
    return dense_dqn_loss_with_targets(critical, y, model, grad);
}

double dense_dqn_loss(std::span<const Transition> batch, const BBNModel& model, const BBNModel& target_model,
                      double gamma, std::vector<double>* grad) {
    const auto p = pointers(batch);
    return dense_dqn_loss(p, model, target_model, gamma, grad);
}

GradientBalance gradient_balance_report(std::span<const Transition* const> batch, const BBNModel& model,
                                        const BBNModel& target_model, double gamma) {
    std::vector<const Transition*> critical;
    for (const auto* t : batch)
        if (t->in_critical_episode) critical.push_back(t);
    const auto y = dqn_targets(critical, target_model, gamma);
    std::vector<std::uint8_t> pos(critical.size()), neg(critical.size());
    GradientBalance gb;
    for (std::size_t i = 0; i < critical.size(); ++i) {
        pos[i] = critical[i]->label == 1;
        neg[i] = !pos[i];
        gb.n_pos += pos[i];
        gb.n_neg += neg[i];
    }
    std::vector<double> gp, gn, gt;
    dense_dqn_loss_with_targets(critical, y, model, &gp, pos);
    dense_dqn_loss_with_targets(critical, y, model, &gn, neg);
    dense_dqn_loss_with_targets(critical, y, model, &gt);
    double np = 0.0, nn_ = 0.0, nt = 0.0, diff = 0.0;
    for (std::size_t k = 0; k < gt.size(); ++k) {
        np += gp[k] * gp[k];
        nn_ += gn[k] * gn[k];
        nt += gt[k] * gt[k];
        const double d = gp[k] + gn[k] - gt[k];
        diff += d * d;
    }
    gb.grad_norm_pos = std::sqrt(np);
    gb.grad_norm_neg = std::sqrt(nn_);
    gb.grad_norm_total = std::sqrt(nt);
    gb.identity_error = std::sqrt(diff);
    return gb;
}

GradientBalance gradient_balance_report(std::span<const Transition> batch, const BBNModel& model,
                                        const BBNModel& target_model, double gamma) {
    const auto p = pointers(batch);
    return gradient_balance_report(p, model, target_model, gamma);
}

FinetuneResult finetune(const BBNModel& model, const std::vector<Transition>& replay, const DenseDQNConfig& config,
                        std::uint64_t seed) {
    require(!replay.empty(), ErrorKind::precondition, "dense DQN replay is empty");
    require(config.gamma >= 0.0 && config.gamma <= 1.0, ErrorKind::config, "gamma must lie in [0, 1]");
    require(config.batch > 0, ErrorKind::config, "stage3 batch must be positive");
    require(config.target_sync_period > 0, ErrorKind::config, "target_sync_period must be positive");
    require(!config.finetune_scope.empty(), ErrorKind::config, "finetune_scope is empty");
    FinetuneResult res;
    res.model = model;
    const auto mask = res.model.params.mask(config.finetune_scope);
    require(std::any_of(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; }), ErrorKind::config,
            "finetune_scope resolves to no parameters");
    const auto& cw = res.model.params.block("classifier.weight");
    const bool renormalize = res.model.arch.normalized && mask[cw.offset];
    BBNModel target = model;
    nn::Adam adam(res.model.params.size(), config.adam);
    Rng rng(derive_seed(seed, 0xD3));
    std::vector<const Transition*> batch(config.batch);
    std::vector<double> grad;
    for (std::size_t step = 0; step < config.steps; ++step) {
        if (step > 0 && step % config.target_sync_period == 0) target.params = res.model.params;
        for (auto& p : batch) p = &replay[rng.below(replay.size())];
        const auto y = dqn_targets(batch, target, config.gamma);
        const double loss = dense_dqn_loss_with_targets(batch, y, res.model, &grad);
        if (!std::isfinite(loss)) {
            std::ostringstream msg;
            msg << "dense DQN diverged at step " << step << " (loss " << loss << ")";
            fail(ErrorKind::divergence, msg.str());
        }
        if (config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps)) {
            const auto gb = gradient_balance_report(batch, res.model, target, config.gamma);
            res.log.push_back({step, loss / static_cast<double>(batch.size()), gb.n_pos, gb.n_neg, gb.grad_norm_pos,
                               gb.grad_norm_neg});
        }
        adam.step(res.model.params.values(), grad, mask);
        if (renormalize) nn::normalize_classifier(res.model.params, res.model.head);
    }
    return res;
}

}  // namespace crit
