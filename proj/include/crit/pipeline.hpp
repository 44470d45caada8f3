#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crit/dataset.hpp"
#include "crit/env.hpp"
#include "crit/evaluation.hpp"
#include "crit/metrics.hpp"
#include "crit/stage1.hpp"
#include "crit/stage2.hpp"
#include "crit/stage3.hpp"

namespace crit {

struct DataConfig {
    int window_len = 10;
    std::size_t train_episodes = 50000;
    std::size_t val_episodes = 100000;
    std::size_t test_episodes = 50000;
    /// Fraction of non-critical validation episodes kept; every critical one is.
    double val_negative_keep = 0.02;
};

struct EvalConfig {
    std::vector<std::string> baselines{"bbn", "cbs", "decoupling"};
    bool calibration = true;
    std::size_t curve_points = 2000;
    std::size_t histogram_bins = 60;
};

struct PipelineConfig {
    std::uint64_t seed = 1;
    EnvConfig env;
    DataConfig data;
    Stage1Config stage1;
    Stage2Config stage2;
    DenseDQNConfig stage3;
    BaselineSettings baselines;
    EvalConfig eval;

    static PipelineConfig defaults();
    /// Parses a (possibly partial) document over the defaults. Unknown keys
    /// and invalid values raise ErrorKind::config.
    static PipelineConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    /// sha256 of the canonical effective config, first 16 hex digits.
    std::string hash() const;
    void validate() const;

    std::uint64_t stream(std::uint64_t tag) const { return derive_seed(seed, tag); }
};

PipelineConfig load_config(const std::string& path);

using Logger = std::function<void(const std::string&)>;

struct Splits {
    LabeledDataset train;
    LabeledDataset val;
    LabeledDataset test;
};

/// Generates the three splits from disjoint seed streams.
Splits generate_splits(const PipelineConfig& cfg, const Logger& log = {});
LabeledDataset generate_split(const PipelineConfig& cfg, const std::string& split, const Logger& log = {});

struct Stage1Outcome {
    FilterModel model;
    std::vector<Stage1LogEntry> log;
    FilterStats train_stats;
    FilterStats val_stats;
    LabeledDataset survivors;
    std::vector<double> train_scores;
};

Stage1Outcome run_stage1(const PipelineConfig& cfg, const LabeledDataset& train, const LabeledDataset& val);

struct Stage2Outcome {
    BBNModel model;
    std::vector<EpochLog> log;
};

Stage2Outcome run_stage2(const PipelineConfig& cfg, const FilterModel& filter, const LabeledDataset& survivors,
                         const LabeledDataset& val);

struct Stage3Outcome {
    BBNModel model;
    std::vector<Stage3LogEntry> log;
    GradientBalance balance;  // full replay under the stage-2 model
    std::size_t replay_size = 0;
};

Stage3Outcome run_stage3(const PipelineConfig& cfg, const BBNModel& stage2, const CriticalEpisodeIndex& index);

struct Evaluation {
    std::vector<MetricReport> reports;  // stage2 cascade, stage3 cascade, baselines
    FilterStats test_filter;
    nlohmann::json calibration;         // per-model oracle errors or a skip reason
    std::size_t calibration_states = 0;
    std::vector<BaselineModel> baseline_models;
    std::vector<double> stage1_test_scores;
};

Evaluation run_evaluation(const PipelineConfig& cfg, const LabeledDataset& train, const LabeledDataset& val,
                          const LabeledDataset& test, const FilterModel& filter, const BBNModel& stage2,
                          const BBNModel* stage3, const Logger& log = {});

const MetricReport* find_report(const Evaluation& ev, const std::string& name);

// ---- file-backed commands (the CLI) ----

struct CommandOptions {
    std::string out_dir;
    bool force = false;
    Logger log;
};

void cmd_generate(const PipelineConfig& cfg, const CommandOptions& opt);
void cmd_stage(const PipelineConfig& cfg, int stage, const CommandOptions& opt);
void cmd_evaluate(const PipelineConfig& cfg, const CommandOptions& opt);
/// Renders the evaluation summary as a markdown table; returns it.
std::string cmd_report(const PipelineConfig& cfg, const CommandOptions& opt);

/// Exit code for an error category: 2 config, 3 prerequisite, 4 divergence, 1 otherwise.
int exit_code(ErrorKind kind);

}  // namespace crit
