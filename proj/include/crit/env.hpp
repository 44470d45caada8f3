#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crit/common.hpp"

namespace crit {

/// Linear stochastic plant under a scripted stabilizing feedback policy.
///
///   s' = A s + b u(s) + w,   u(s) = -policy_gain * (feedback . s)
///
/// Component 0 of the state is the position; the hazard event fires when it
/// reaches `hazard_threshold`. Each noise component is
/// `rarity_scale * noise_gain[j] * xi` with xi drawn from `noise_support`.
/// The support is finite, so criticality can be computed exactly by
/// enumerating noise sequences.
struct EnvConfig {
    int state_dim = 2;
    std::vector<double> dynamics;  // state_dim x state_dim, row-major
    std::vector<double> control;   // b
    std::vector<double> feedback;  // K
    double policy_gain = 1.0;

    std::vector<double> noise_support;
    std::vector<double> noise_probs;
    std::vector<double> noise_gain;  // per dimension; 0 disables noise there

    std::vector<double> initial_mean;
    std::vector<double> initial_spread;  // uniform half-width per dimension

    double hazard_threshold = 1.0;
    int horizon_h = 6;
    int episode_len_max = 200;
    double rarity_scale = 1.0;
    double enumeration_budget = 1e7;

    /// Double integrator (position, velocity) with damped feedback; dimensions
    /// beyond the second are decoupled AR(1) nuisance channels.
    static EnvConfig standard(int state_dim = 2);

    /// Throws ErrorKind::config on any violated invariant.
    void validate() const;

    /// Closed-loop matrix A - policy_gain * b K^T.
    std::vector<double> closed_loop() const;
};

void to_json(nlohmann::json& j, const EnvConfig& c);
void from_json(const nlohmann::json& j, EnvConfig& c);

struct EnvState {
    std::vector<double> s;
    int t = 0;
    bool terminated = false;
    bool event_occurred = false;

    double position() const { return s.front(); }
};

/// Trajectory s_0 .. s_T stored flat (state_dim values per step), together
/// with the scripted action taken at each step.
struct Episode {
    std::string episode_id;
    int state_dim = 0;
    std::vector<double> states;
    std::vector<double> actions;  // one scalar action per state
    bool critical = false;

    std::size_t length() const { return state_dim == 0 ? 0 : states.size() / static_cast<std::size_t>(state_dim); }
    std::span<const double> state(std::size_t step) const {
        return {states.data() + step * static_cast<std::size_t>(state_dim), static_cast<std::size_t>(state_dim)};
    }
};

EnvState reset(const EnvConfig& config, std::uint64_t seed);
EnvState reset(const EnvConfig& config, Rng& rng);

double scripted_action(const EnvConfig& config, std::span<const double> s);

/// Advances one step with noise drawn from `rng`.
EnvState step(const EnvState& state, const EnvConfig& config, Rng& rng);

/// Advances one step with an explicit noise index per dimension (index into
/// noise_support). Used by the enumeration oracle and by tests.
EnvState step_with_noise(const EnvState& state, const EnvConfig& config, std::span<const std::size_t> noise_index);

/// Number of states the criticality window covers from `state`:
/// min(horizon, episode_len_max - t + 1).
int effective_horizon(const EnvState& state, const EnvConfig& config, int horizon);

/// Exact probability that the hazard event is observed among the next
/// `horizon` states (the current one included), by exhaustive enumeration of
/// noise sequences on the dimensions that can influence the position.
///
/// Throws ErrorKind::budget when the enumeration would exceed
/// config.enumeration_budget leaves; use monte_carlo_criticality instead.
double true_criticality(const EnvState& state, const EnvConfig& config);
double criticality_within(const EnvState& state, const EnvConfig& config, int horizon);

/// Enumeration leaf count the oracle needs for `horizon`.
double enumeration_leaves(const EnvConfig& config, int horizon);

/// Dimensions whose noise can reach the position coordinate.
std::vector<int> influencing_noise_dims(const EnvConfig& config);

struct MonteCarloEstimate {
    double probability = 0.0;
    double std_error = 0.0;
    std::size_t samples = 0;
};

MonteCarloEstimate monte_carlo_criticality(const EnvState& state, const EnvConfig& config, std::size_t samples,
                                           std::uint64_t seed);

Episode rollout(const EnvConfig& config, std::uint64_t seed, std::string episode_id);

/// "s<seed>-<index>" with the index zero-padded, so lexicographic order
/// equals generation order.
std::string episode_id(std::uint64_t seed, std::size_t index);

/// Independent episodes; episode i uses stream derive_seed(seed, i).
std::vector<Episode> generate_episodes(const EnvConfig& config, std::size_t n_episodes, std::uint64_t seed);

/// Episodes first .. first+count-1 of the stream generate_episodes uses.
std::vector<Episode> generate_episode_range(const EnvConfig& config, std::size_t first, std::size_t count,
                                            std::uint64_t seed);

double critical_fraction(std::span<const Episode> episodes);

struct RarityCalibration {
    double rarity_scale = 1.0;
    double realized_rate = 0.0;
    int iterations = 0;
};

/// Bisection on log(rarity_scale) so that the critical-episode rate of a
/// pilot run of `n_pilot` episodes lands near `target_rate`. The pilot reuses
/// the same seed for every candidate (common random numbers).
RarityCalibration calibrate_rarity(EnvConfig config, double target_rate, std::size_t n_pilot, std::uint64_t seed,
                                   double lo = 0.25, double hi = 4.0, int max_iter = 30);

}  // namespace crit
