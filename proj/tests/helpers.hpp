#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <unistd.h>
#include <string>
#include <vector>

#include "crit/dataset.hpp"
#include "crit/env.hpp"
#include "crit/nn.hpp"

namespace testing {

// One-dimensional episode with the given positions; critical when the last
// position is marked as the event.
inline crit::Episode line_episode(std::string id, std::vector<double> positions, bool critical) {
    crit::Episode e;
    e.episode_id = std::move(id);
    e.state_dim = 1;
    e.states = std::move(positions);
    e.actions.assign(e.states.size(), 0.0);
    e.critical = critical;
    return e;
}

// Toy corpus: negatives hover around -1, critical episodes end at +1 after a
// ramp. Separable on the current state.
inline crit::LabeledDataset toy_dataset(std::size_t n_critical, std::size_t n_plain, std::size_t len,
                                        std::uint64_t seed, int window = 1, int horizon = 1) {
    crit::Rng rng(seed);
    std::vector<crit::Episode> eps;
    std::size_t id = 0;
    auto name = [&] {
        char buf[32];
        std::snprintf(buf, sizeof buf, "toy-%06zu", id++);
        return std::string(buf);
    };
    for (std::size_t k = 0; k < n_critical + n_plain; ++k) {
        const bool crit = k < n_critical;
        std::vector<double> pos(len);
        for (auto& p : pos) p = -1.0 + 0.1 * rng.uniform(-1.0, 1.0);
        if (crit)
            for (int h = 0; h < horizon && h < static_cast<int>(len); ++h) pos[len - 1 - h] = 1.0 + 0.1 * rng.uniform(-1.0, 1.0);
        eps.push_back(line_episode(name(), std::move(pos), crit));
    }
    return crit::build_dataset(std::move(eps), window, horizon, {"toy", seed, {}});
}

// First coordinate after the frozen input standardizer blocks.
inline std::size_t trainable_offset(const crit::nn::ParamStore& p) {
    std::size_t end = 0;
    for (const auto& b : p.blocks())
        if (b.name.starts_with("input.")) end = std::max(end, b.offset + b.size());
    return end;
}

// Gradient check restricted to the coordinates from `first` on.
inline crit::nn::GradCheckResult grad_check_tail(const crit::nn::LossFn& loss, const std::vector<double>& theta,
                                                 std::size_t first, double eps, std::uint64_t seed) {
    auto sub = [&](std::span<const double> t, std::vector<double>* g) {
        std::vector<double> full = theta;
        std::copy(t.begin(), t.end(), full.begin() + static_cast<std::ptrdiff_t>(first));
        std::vector<double> fg;
        const double v = loss(full, g ? &fg : nullptr);
        if (g) g->assign(fg.begin() + static_cast<std::ptrdiff_t>(first), fg.end());
        return v;
    };
    std::vector<double> tail(theta.begin() + static_cast<std::ptrdiff_t>(first), theta.end());
    return crit::nn::grad_check(sub, tail, eps, seed);
}

// Scratch directory removed on scope exit.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        crit::Rng rng(std::hash<std::string>{}(tag) ^ static_cast<std::uint64_t>(::getpid()));
        path = std::filesystem::temp_directory_path() / ("crit-" + tag + "-" + std::to_string(rng.next_u64() % 1000000007));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

}  // namespace testing
