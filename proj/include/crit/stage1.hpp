#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crit/checkpoint.hpp"
#include "crit/dataset.hpp"
#include "crit/nn.hpp"

namespace crit {

/// Mean over pairs of -log sigmoid(r_pos - r_neg). When `d_pos`/`d_neg` are
/// given they receive d(loss)/d(r).
double ranking_loss(std::span<const double> r_pos, std::span<const double> r_neg, std::vector<double>* d_pos = nullptr,
                    std::vector<double>* d_neg = nullptr);

/// Numerically stable log(1 + e^x).
double softplus(double x);

/// Fits `prefix`.mean/.scale to the per-dimension moments of the current
/// state of every sample in `ds`, tiled over the window.
void fit_input_standardizer(nn::ParamStore& params, const LabeledDataset& ds, const std::string& prefix = "input");

struct Stage1Config {
    nn::MlpSpec backbone;  // input_dim is taken from the dataset
    std::size_t steps = 3000;
    std::size_t batch_pairs = 256;
    nn::AdamConfig adam{.lr = 1e-3};
    double target_recall = 0.995;
    std::size_t log_every = 50;
};

void to_json(nlohmann::json& j, const Stage1Config& c);
void from_json(const nlohmann::json& j, Stage1Config& c);

/// Reward model r_theta = head(backbone(standardize(X))) plus the calibrated
/// filter threshold.
class FilterModel {
public:
    FilterModel() = default;
    FilterModel(std::size_t input_dim, nn::MlpSpec backbone);

    nn::ParamStore params;
    nn::Standardizer standardizer{"input"};
    nn::Mlp backbone;
    nn::ScalarHead head{"head"};
    double epsilon = std::numeric_limits<double>::quiet_NaN();

    bool calibrated() const { return std::isfinite(epsilon); }
    std::size_t input_dim() const { return backbone.spec().input_dim; }

    void init(Rng& rng);
    /// Fits the input standardizer on the states of `ds`.
    void fit_standardizer(const LabeledDataset& ds);

    nn::Vector score(const nn::Matrix& X) const;
    double score_reference(std::span<const double> x) const;
    /// Parallel scores of dataset samples (all when `indices` is empty).
    std::vector<double> score_dataset(const LabeledDataset& ds, std::span<const std::uint32_t> indices = {}) const;

    /// Pairwise ranking loss on explicit positive/negative windows; accumulates
    /// the parameter gradient when `grad` is non-null.
    double pair_loss(const nn::Matrix& Xp, const nn::Matrix& Xn, std::vector<double>* grad) const;

    nlohmann::json architecture() const;
    ModelBundle to_bundle(const std::string& config_hash, nlohmann::json metrics = nlohmann::json::object()) const;
    static FilterModel from_bundle(const ModelBundle& bundle);
};

struct Stage1LogEntry {
    std::size_t step = 0;
    double loss = 0.0;
};

struct Stage1Result {
    FilterModel model;
    std::vector<Stage1LogEntry> log;
};

/// Trains the reward model on pairs drawn uniformly with replacement from P
/// and from N, redrawn every step.
Stage1Result train_reward_model(const LabeledDataset& ds, const Stage1Config& config, std::uint64_t seed);

/// Largest eps such that the fraction of `positive_scores` strictly above eps
/// is at least target_recall, moved one ulp down so ties keep recall.
double calibrate_threshold(std::span<const double> positive_scores, double target_recall);
double calibrate_threshold(const FilterModel& model, const LabeledDataset& val, double target_recall);

struct FilterStats {
    double epsilon = 0.0;
    std::size_t n_pos = 0;
    std::size_t n_neg = 0;
    std::size_t pos_above = 0;      // positives with r > eps
    std::size_t neg_survivors = 0;  // negatives with r > eps
    double retained_positive_rate = 0.0;
    double removed_negative_rate = 0.0;
    double original_ir = 0.0;  // NaN when no positives
    double survivor_ir = 0.0;
};

void to_json(nlohmann::json& j, const FilterStats& s);

/// Threshold statistics of precomputed scores.
FilterStats filter_stats(std::span<const double> scores, const LabeledDataset& ds, double epsilon);

struct FilterResult {
    LabeledDataset survivors;
    FilterStats stats;
    std::vector<double> scores;  // r_theta of every input sample
};

/// Keeps every positive and the negatives scoring above eps.
FilterResult filter_dataset(const FilterModel& model, const LabeledDataset& ds);
FilterResult filter_by_scores(std::vector<double> scores, const LabeledDataset& ds, double epsilon);

}  // namespace crit
