#include "crit/env.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace crit {

EnvConfig EnvConfig::standard(int state_dim) {
    require(state_dim >= 1, ErrorKind::config, "state_dim must be positive");
    EnvConfig c;
    c.state_dim = state_dim;
    const auto d = static_cast<std::size_t>(state_dim);
    c.dynamics.assign(d * d, 0.0);
    c.control.assign(d, 0.0);
    c.feedback.assign(d, 0.0);
    c.noise_gain.assign(d, 0.0);
    c.initial_mean.assign(d, 0.0);
    c.initial_spread.assign(d, 0.0);
    if (state_dim == 1) {
        c.dynamics[0] = 1.0;
        c.control[0] = 1.0;
        c.feedback[0] = 0.2;
        c.noise_gain[0] = 1.0;
        c.initial_spread[0] = 0.2;
    } else {
        constexpr double dt = 0.2;
        c.dynamics[0] = 1.0;
        c.dynamics[1] = dt;
        c.dynamics[d + 1] = 1.0;
        c.control[1] = dt;
        c.feedback[0] = 1.0;
        c.feedback[1] = 1.5;
        c.noise_gain[1] = 1.0;
        c.initial_spread[0] = 0.25;
        c.initial_spread[1] = 0.25;
        for (std::size_t j = 2; j < d; ++j) {
            c.dynamics[j * d + j] = 0.9;
            c.noise_gain[j] = 1.0;
            c.initial_spread[j] = 0.25;
        }
    }
    // Small symmetric steps plus rare large kicks; the kicks are what make
    // hazard events unpredictable a few steps ahead.
    c.noise_support = {-0.6, -0.15, 0.0, 0.15, 0.6};
    c.noise_probs = {0.0015, 0.24925, 0.4985, 0.24925, 0.0015};
    c.hazard_threshold = 0.85;
    c.horizon_h = 6;
    c.episode_len_max = 200;
    c.rarity_scale = 1.0;
    return c;
}

void EnvConfig::validate() const {
    require(state_dim >= 1, ErrorKind::config, "state_dim must be positive");
    const auto d = static_cast<std::size_t>(state_dim);
    require(dynamics.size() == d * d, ErrorKind::config, "dynamics must be state_dim x state_dim");
    require(control.size() == d && feedback.size() == d && noise_gain.size() == d, ErrorKind::config,
            "control, feedback and noise_gain must have state_dim entries");
    require(initial_mean.size() == d && initial_spread.size() == d, ErrorKind::config,
            "initial_mean and initial_spread must have state_dim entries");
    require(!noise_support.empty(), ErrorKind::config, "noise_support must be non-empty");
    require(noise_support.size() == noise_probs.size(), ErrorKind::config,
            "noise_probs must match noise_support in length");
    double total = 0.0;
    for (double p : noise_probs) {
        require(std::isfinite(p) && p >= 0.0, ErrorKind::config, "noise_probs entries must be >= 0");
        total += p;
    }
    require(std::abs(total - 1.0) <= 1e-12, ErrorKind::config, "noise_probs must sum to 1");
    require(horizon_h >= 1, ErrorKind::config, "horizon_h must be >= 1");
    require(episode_len_max >= 1, ErrorKind::config, "episode_len_max must be >= 1");
    require(std::isfinite(rarity_scale) && rarity_scale > 0.0, ErrorKind::config, "rarity_scale must be > 0");
    require(std::isfinite(hazard_threshold), ErrorKind::config, "hazard_threshold must be finite");
    for (double s : initial_spread) require(s >= 0.0, ErrorKind::config, "initial_spread must be >= 0");
    require(enumeration_budget >= 1.0, ErrorKind::config, "enumeration_budget must be >= 1");
}

std::vector<double> EnvConfig::closed_loop() const {
    const auto d = static_cast<std::size_t>(state_dim);
    std::vector<double> m = dynamics;
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) m[i * d + j] -= policy_gain * control[i] * feedback[j];
    return m;
}

void to_json(nlohmann::json& j, const EnvConfig& c) {
    j = nlohmann::json{{"state_dim", c.state_dim},
                       {"dynamics", c.dynamics},
                       {"control", c.control},
                       {"feedback", c.feedback},
                       {"policy_gain", c.policy_gain},
                       {"noise_support", c.noise_support},
                       {"noise_probs", c.noise_probs},
                       {"noise_gain", c.noise_gain},
                       {"initial_mean", c.initial_mean},
                       {"initial_spread", c.initial_spread},
                       {"hazard_threshold", c.hazard_threshold},
                       {"horizon_h", c.horizon_h},
                       {"episode_len_max", c.episode_len_max},
                       {"rarity_scale", c.rarity_scale},
                       {"enumeration_budget", c.enumeration_budget}};
}

void from_json(const nlohmann::json& j, EnvConfig& c) {
    const int dim = j.value("state_dim", 2);
    c = EnvConfig::standard(dim);
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("dynamics", c.dynamics);
    get("control", c.control);
    get("feedback", c.feedback);
    get("policy_gain", c.policy_gain);
    get("noise_support", c.noise_support);
    get("noise_probs", c.noise_probs);
    get("noise_gain", c.noise_gain);
    get("initial_mean", c.initial_mean);
    get("initial_spread", c.initial_spread);
    get("hazard_threshold", c.hazard_threshold);
    get("horizon_h", c.horizon_h);
    get("episode_len_max", c.episode_len_max);
    get("rarity_scale", c.rarity_scale);
    get("enumeration_budget", c.enumeration_budget);
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

// Single source of truth for the transition arithmetic; the sampler and the
// enumeration oracle both go through here, so their trajectories agree bit
// for bit.
void transition(const EnvConfig& c, const double* s, const double* noise, double* out) {
    const auto d = static_cast<std::size_t>(c.state_dim);
    const double u = -c.policy_gain * dot(c.feedback, {s, d});
    for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += c.dynamics[i * d + j] * s[j];
        out[i] = acc + c.control[i] * u + noise[i];
    }
}

bool is_event(const EnvConfig& c, double position) { return position >= c.hazard_threshold; }

void finish_step(const EnvConfig& c, EnvState& next) {
    if (is_event(c, next.position())) {
        next.event_occurred = true;
        next.terminated = true;
    }
    if (next.t >= c.episode_len_max) next.terminated = true;
}

std::vector<double> cumulative(const std::vector<double>& p) {
    std::vector<double> c(p.size());
    std::partial_sum(p.begin(), p.end(), c.begin());
    return c;
}

struct Enumerator {
    const EnvConfig& c;
    std::vector<int> dims;
    std::size_t combos = 1;
    std::vector<double> combo_weight;             // probability of each combo
    std::vector<std::vector<double>> combo_noise;  // noise vector of each combo
    std::vector<std::vector<double>> scratch;      // one state buffer per depth

    Enumerator(const EnvConfig& config, int max_depth) : c(config), dims(influencing_noise_dims(config)) {
        const std::size_t k = c.noise_support.size();
        const auto d = static_cast<std::size_t>(c.state_dim);
        for (std::size_t i = 0; i < dims.size(); ++i) combos *= k;
        std::vector<std::size_t> digit(dims.size(), 0);
        for (std::size_t n = 0; n < combos; ++n) {
            double w = 1.0;
            std::vector<double> noise(d, 0.0);
            for (std::size_t i = 0; i < dims.size(); ++i) {
                const auto dim = static_cast<std::size_t>(dims[i]);
                w *= c.noise_probs[digit[i]];
                noise[dim] = c.rarity_scale * c.noise_gain[dim] * c.noise_support[digit[i]];
            }
            combo_weight.push_back(w);
            combo_noise.push_back(std::move(noise));
            for (std::size_t i = dims.size(); i-- > 0;) {
                if (++digit[i] < k) break;
                digit[i] = 0;
            }
        }
        scratch.assign(static_cast<std::size_t>(std::max(max_depth, 1)) + 1, std::vector<double>(d));
    }

    // Probability of an event among the next `h` states starting at s (which
    // is known not to be an event).
    double run(const double* s, int h, int depth) {
        if (h <= 1) return 0.0;
        double total = 0.0;
        double* next = scratch[static_cast<std::size_t>(depth)].data();
        for (std::size_t n = 0; n < combos; ++n) {
            const double w = combo_weight[n];
            if (w == 0.0) continue;
            transition(c, s, combo_noise[n].data(), next);
            const double sub = is_event(c, next[0]) ? 1.0 : run(next, h - 1, depth + 1);
            total += w * sub;
        }
        return total;
    }
};

}  // namespace

EnvState reset(const EnvConfig& config, Rng& rng) {
    config.validate();
    EnvState st;
    const auto d = static_cast<std::size_t>(config.state_dim);
    st.s.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        const double spread = config.rarity_scale * config.initial_spread[j];
        const double u = rng.uniform(-1.0, 1.0);
        st.s[j] = spread == 0.0 ? config.initial_mean[j] : config.initial_mean[j] + spread * u;
    }
    st.t = 0;
    if (is_event(config, st.position())) {
        st.event_occurred = true;
        st.terminated = true;
    }
    return st;
}

EnvState reset(const EnvConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    return reset(config, rng);
}

double scripted_action(const EnvConfig& config, std::span<const double> s) {
    return -config.policy_gain * dot(config.feedback, s);
}

EnvState step_with_noise(const EnvState& state, const EnvConfig& config, std::span<const std::size_t> noise_index) {
    require(!state.terminated, ErrorKind::usage, "cannot step a terminated state");
    const auto d = static_cast<std::size_t>(config.state_dim);
    require(state.s.size() == d && noise_index.size() == d, ErrorKind::usage, "state/noise dimension mismatch");
    std::vector<double> noise(d);
    for (std::size_t j = 0; j < d; ++j) {
        require(noise_index[j] < config.noise_support.size(), ErrorKind::usage, "noise index out of range");
        noise[j] = config.rarity_scale * config.noise_gain[j] * config.noise_support[noise_index[j]];
    }
    EnvState next;
    next.s.resize(d);
    transition(config, state.s.data(), noise.data(), next.s.data());
    next.t = state.t + 1;
    finish_step(config, next);
    return next;
}

EnvState step(const EnvState& state, const EnvConfig& config, Rng& rng) {
    require(!state.terminated, ErrorKind::usage, "cannot step a terminated state");
    const auto d = static_cast<std::size_t>(config.state_dim);
    const auto cum = cumulative(config.noise_probs);
    std::vector<std::size_t> idx(d, 0);
    for (std::size_t j = 0; j < d; ++j) idx[j] = rng.categorical(cum);
    return step_with_noise(state, config, idx);
}

std::vector<int> influencing_noise_dims(const EnvConfig& config) {
    const auto d = static_cast<std::size_t>(config.state_dim);
    const auto m = config.closed_loop();
    // Backward reachability from the position in the dependency graph
    // i <- j whenever m[i][j] != 0.
    std::vector<bool> reach(d, false);
    reach[0] = true;
    bool changed = true;
    while (changed) {
        changed = false;
        for (std::size_t i = 0; i < d; ++i) {
            if (!reach[i]) continue;
            for (std::size_t j = 0; j < d; ++j) {
                if (!reach[j] && m[i * d + j] != 0.0) {
                    reach[j] = true;
                    changed = true;
                }
            }
        }
    }
    std::vector<int> dims;
    for (std::size_t j = 0; j < d; ++j)
        if (reach[j] && config.noise_gain[j] != 0.0) dims.push_back(static_cast<int>(j));
    return dims;
}

int effective_horizon(const EnvState& state, const EnvConfig& config, int horizon) {
    return std::max(0, std::min(horizon, config.episode_len_max - state.t + 1));
}

double enumeration_leaves(const EnvConfig& config, int horizon) {
    const auto dims = influencing_noise_dims(config);
    const double per_step = std::pow(static_cast<double>(config.noise_support.size()), static_cast<double>(dims.size()));
    return std::pow(per_step, std::max(0, horizon - 1));
}

double criticality_within(const EnvState& state, const EnvConfig& config, int horizon) {
    config.validate();
    require(state.s.size() == static_cast<std::size_t>(config.state_dim), ErrorKind::usage,
            "state dimension does not match config");
    const int h = effective_horizon(state, config, horizon);
    if (h <= 0) return 0.0;
    if (state.event_occurred || is_event(config, state.position())) return 1.0;
    if (state.terminated || h == 1) return 0.0;
    const double leaves = enumeration_leaves(config, h);
    if (leaves > config.enumeration_budget)
        fail(ErrorKind::budget, "exact criticality needs " + std::to_string(leaves) +
                                    " noise sequences (budget " + std::to_string(config.enumeration_budget) +
                                    "); use monte_carlo_criticality");
    Enumerator e(config, h);
    return e.run(state.s.data(), h, 0);
}

double true_criticality(const EnvState& state, const EnvConfig& config) {
    return criticality_within(state, config, config.horizon_h);
}

MonteCarloEstimate monte_carlo_criticality(const EnvState& state, const EnvConfig& config, std::size_t samples,
                                           std::uint64_t seed) {
    config.validate();
    require(samples > 0, ErrorKind::precondition, "monte carlo needs at least one sample");
    const int h = effective_horizon(state, config, config.horizon_h);
    MonteCarloEstimate est;
    est.samples = samples;
    if (h <= 0) return est;
    if (state.event_occurred || is_event(config, state.position())) {
        est.probability = 1.0;
        return est;
    }
    if (state.terminated) return est;
    const auto d = static_cast<std::size_t>(config.state_dim);
    const auto cum = cumulative(config.noise_probs);
    // Fixed-size blocks with their own streams keep the estimate independent
    // of how the loop is scheduled.
    constexpr std::size_t block = 4096;
    const std::size_t n_blocks = (samples + block - 1) / block;
    std::vector<std::size_t> block_hits(n_blocks, 0);
#pragma omp parallel for schedule(static)
    for (std::size_t b = 0; b < n_blocks; ++b) {
        Rng rng(derive_seed(seed, b));
        std::vector<double> cur(d), next(d), noise(d);
        const std::size_t end = std::min(samples, (b + 1) * block);
        std::size_t hits = 0;
        for (std::size_t i = b * block; i < end; ++i) {
            std::copy(state.s.begin(), state.s.end(), cur.begin());
            for (int k = 1; k < h; ++k) {
                for (std::size_t j = 0; j < d; ++j)
                    noise[j] = config.rarity_scale * config.noise_gain[j] * config.noise_support[rng.categorical(cum)];
                transition(config, cur.data(), noise.data(), next.data());
                std::swap(cur, next);
                if (is_event(config, cur[0])) {
                    ++hits;
                    break;
                }
            }
        }
        block_hits[b] = hits;
    }
    const auto hits = std::accumulate(block_hits.begin(), block_hits.end(), std::size_t{0});
    est.probability = static_cast<double>(hits) / static_cast<double>(samples);
    est.std_error = std::sqrt(est.probability * (1.0 - est.probability) / static_cast<double>(samples));
    return est;
}

Episode rollout(const EnvConfig& config, std::uint64_t seed, std::string episode_id) {
    Rng rng(seed);
    EnvState st = reset(config, rng);
    Episode ep;
    ep.episode_id = std::move(episode_id);
    ep.state_dim = config.state_dim;
    ep.states.reserve(static_cast<std::size_t>(config.episode_len_max + 1) * static_cast<std::size_t>(config.state_dim));
    ep.states.insert(ep.states.end(), st.s.begin(), st.s.end());
    ep.actions.push_back(scripted_action(config, st.s));
    while (!st.terminated) {
        st = step(st, config, rng);
        ep.states.insert(ep.states.end(), st.s.begin(), st.s.end());
        ep.actions.push_back(scripted_action(config, st.s));
    }
    ep.critical = st.event_occurred;
    return ep;
}

std::string episode_id(std::uint64_t seed, std::size_t index) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "s%llu-%08zu", static_cast<unsigned long long>(seed), index);
    return buf;
}

std::vector<Episode> generate_episodes(const EnvConfig& config, std::size_t n_episodes, std::uint64_t seed) {
    require(n_episodes >= 1, ErrorKind::precondition, "n_episodes must be >= 1");
    return generate_episode_range(config, 0, n_episodes, seed);
}

std::vector<Episode> generate_episode_range(const EnvConfig& config, std::size_t first, std::size_t count,
                                            std::uint64_t seed) {
    config.validate();
    std::vector<Episode> out(count);
#pragma omp parallel for schedule(dynamic, 64)
    for (std::size_t k = 0; k < count; ++k)
        out[k] = rollout(config, derive_seed(seed, first + k), episode_id(seed, first + k));
    return out;
}

double critical_fraction(std::span<const Episode> episodes) {
    if (episodes.empty()) return 0.0;
    const auto n = std::count_if(episodes.begin(), episodes.end(), [](const Episode& e) { return e.critical; });
    return static_cast<double>(n) / static_cast<double>(episodes.size());
}

namespace {
double pilot_rate(const EnvConfig& config, std::size_t n, std::uint64_t seed) {
    std::size_t hits = 0;
#pragma omp parallel for reduction(+ : hits) schedule(dynamic, 64)
    for (std::size_t i = 0; i < n; ++i)
        if (rollout(config, derive_seed(seed, i), {}).critical) ++hits;
    return static_cast<double>(hits) / static_cast<double>(n);
}
}  // namespace

RarityCalibration calibrate_rarity(EnvConfig config, double target_rate, std::size_t n_pilot, std::uint64_t seed,
                                   double lo, double hi, int max_iter) {
    require(target_rate > 0.0 && target_rate < 1.0, ErrorKind::precondition, "target_rate must lie in (0,1)");
    require(lo > 0.0 && hi > lo, ErrorKind::precondition, "invalid rarity bracket");
    RarityCalibration out;
    double log_lo = std::log(lo), log_hi = std::log(hi);
    double best_gap = std::numeric_limits<double>::infinity();
    for (int it = 0; it < max_iter; ++it) {
        const double mid = std::exp(0.5 * (log_lo + log_hi));
        config.rarity_scale = mid;
        const double rate = pilot_rate(config, n_pilot, seed);
        const double gap = std::abs(std::log((rate + 1e-12) / target_rate));
        if (gap < best_gap) {
            best_gap = gap;
            out.rarity_scale = mid;
            out.realized_rate = rate;
        }
        out.iterations = it + 1;
        if (rate < target_rate)
            log_lo = std::log(mid);
        else
            log_hi = std::log(mid);
        if (log_hi - log_lo < 1e-4) break;
    }
    return out;
}

}  // namespace crit
