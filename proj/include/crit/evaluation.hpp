#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crit/env.hpp"
#include "crit/metrics.hpp"
#include "crit/stage1.hpp"
#include "crit/stage2.hpp"

namespace crit {

/// Stage-1 filter in front of a classifier: samples with r <= eps get
/// criticality exactly 0, the rest the classifier probability.
struct CascadePredictor {
    const FilterModel* filter = nullptr;
    const BBNModel* classifier = nullptr;

    std::vector<double> predict(const nn::Matrix& X) const;
    double predict_one(std::span<const double> x) const;
    /// Whole dataset (or `indices`); `stage1_scores`, when given, must be the
    /// filter scores of the same samples and skips re-scoring.
    std::vector<double> predict_dataset(const LabeledDataset& ds, std::span<const std::uint32_t> indices = {},
                                        const std::vector<double>* stage1_scores = nullptr) const;

private:
    void check() const;
};

/// Indices of samples that belong to critical episodes.
std::vector<std::uint32_t> critical_episode_samples(const LabeledDataset& ds);

/// Exact criticality of each sample's current state (parallel, pure).
std::vector<double> oracle_criticality(const LabeledDataset& ds, std::span<const std::uint32_t> indices,
                                       const EnvConfig& config);

struct BaselineSettings {
    BBNArchitecture arch = [] {
        BBNArchitecture a;
        a.normalized = false;
        return a;
    }();
    ClassifierTraining training;      // shared schedule for every baseline
    std::size_t retrain_epochs = 5;   // decoupling classifier retraining
    double decision_threshold = 0.5;  // operating point reported for baselines
};

void to_json(nlohmann::json& j, const BaselineSettings& s);
void from_json(const nlohmann::json& j, BaselineSettings& s);

const std::vector<std::string>& known_baselines();

struct BaselineModel {
    std::string name;
    BBNModel model;
    std::vector<EpochLog> log;
};

/// "bbn": two branches, unnormalized classifier, cross-entropy on both.
/// "cbs": single model trained on class-balanced batches with cross-entropy.
/// "decoupling": uniform-batch representation training, then the classifier
/// is re-initialized and retrained on class-balanced batches with the rest frozen.
BaselineModel train_baseline(const std::string& name, const LabeledDataset& train, const LabeledDataset* val,
                             const BaselineSettings& settings, std::uint64_t seed);

/// Trains and evaluates every named baseline on the same test split.
std::vector<MetricReport> run_baselines(const LabeledDataset& train, const LabeledDataset* val,
                                        const LabeledDataset& test, std::span<const std::string> names,
                                        const BaselineSettings& settings, std::uint64_t seed,
                                        std::vector<BaselineModel>* models = nullptr);

}  // namespace crit
