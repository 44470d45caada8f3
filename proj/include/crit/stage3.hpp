#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crit/dataset.hpp"
#include "crit/nn.hpp"
#include "crit/stage2.hpp"

namespace crit {

/// One replay entry. The scripted policy is deterministic, so the action is a
/// function of the state and Q(s, a) is scored on the state window alone.
struct Transition {
    std::vector<double> X;
    double action = 0.0;
    int reward = 0;  // 1 only at the terminal state of a critical episode
    bool terminal = false;
    std::vector<double> X_next;  // empty when terminal
    int label = 0;               // horizon label of s
    std::string episode_id;
    bool in_critical_episode = true;
};

struct DenseDQNConfig {
    double gamma = 0.99;
    std::size_t target_sync_period = 250;
    std::vector<std::string> finetune_scope{"proj_a.", "proj_b.", "classifier."};
    std::size_t batch = 256;
    std::size_t steps = 2000;
    nn::AdamConfig adam{.lr = 3e-4};
    std::size_t log_every = 50;
};

void to_json(nlohmann::json& j, const DenseDQNConfig& c);
void from_json(const nlohmann::json& j, DenseDQNConfig& c);

/// Every transition of every indexed critical episode, in index order.
std::vector<Transition> build_replay(const CriticalEpisodeIndex& index);

/// Q(s) of a batch of windows (positive-class probability).
std::vector<double> q_values(const BBNModel& model, std::span<const Transition* const> batch, bool next_state);

/// r for terminal transitions, otherwise r + gamma * Q_target(s'); clamped to [0, 1].
double dqn_target(const Transition& t, const BBNModel& target_model, double gamma);
std::vector<double> dqn_targets(std::span<const Transition* const> batch, const BBNModel& target_model, double gamma);

/// Sum over critical-episode transitions of (y - Q(s))^2 with y from the
/// frozen target model; other transitions contribute exactly zero. Writes the
/// parameter gradient into `grad` when given.
double dense_dqn_loss(std::span<const Transition* const> batch, const BBNModel& model, const BBNModel& target_model,
                      double gamma, std::vector<double>* grad = nullptr);
double dense_dqn_loss(std::span<const Transition> batch, const BBNModel& model, const BBNModel& target_model,
                      double gamma, std::vector<double>* grad = nullptr);

/// Same loss with targets supplied (already computed).
double dense_dqn_loss_with_targets(std::span<const Transition* const> batch, std::span<const double> targets,
                                   const BBNModel& model, std::vector<double>* grad,
                                   std::span<const std::uint8_t> include = {});

struct Stage3LogEntry {
    std::size_t step = 0;
    double loss = 0.0;  // per-transition mean over the batch
    std::size_t n_pos = 0;
    std::size_t n_neg = 0;
    double grad_norm_pos = 0.0;
    double grad_norm_neg = 0.0;
};

struct FinetuneResult {
    BBNModel model;
    std::vector<Stage3LogEntry> log;
};

FinetuneResult finetune(const BBNModel& model, const std::vector<Transition>& replay, const DenseDQNConfig& config,
                        std::uint64_t seed);

struct GradientBalance {
    std::size_t n_pos = 0;  // transitions whose state carries a positive label
    std::size_t n_neg = 0;
    double grad_norm_pos = 0.0;
    double grad_norm_neg = 0.0;
    double grad_norm_total = 0.0;
    double identity_error = 0.0;  // ||g_pos + g_neg - g_total||
};

/// Splits the loss into the positive-label and negative-label terms and
/// reports each term's gradient norm.
GradientBalance gradient_balance_report(std::span<const Transition* const> batch, const BBNModel& model,
                                        const BBNModel& target_model, double gamma);
GradientBalance gradient_balance_report(std::span<const Transition> batch, const BBNModel& model,
                                        const BBNModel& target_model, double gamma);

}  // namespace crit
