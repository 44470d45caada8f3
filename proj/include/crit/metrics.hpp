#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crit/dataset.hpp"

namespace crit {

std::vector<int> dataset_labels(const LabeledDataset& ds);

/// Mann-Whitney statistic: probability that a random positive outscores a
/// random negative, ties counted one half. Computed from integer counts, so
/// it matches the pairwise brute force bit for bit.
double roc_auc(std::span<const double> scores, std::span<const int> labels);
/// O(|P||N|) reference.
double roc_auc_pairwise(std::span<const double> scores, std::span<const int> labels);

struct RocPoint {
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

/// One point per distinct score (predict positive when score >= threshold),
/// starting from (0, 0); FPR is non-decreasing.
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);

struct PrPoint {
    double threshold = 0.0;
    double recall = 0.0;
    double precision = 0.0;
    std::size_t tp = 0;
    std::size_t fp = 0;
};

/// Precision/recall at every distinct score in descending order (predict
/// positive when score >= threshold); recall is non-decreasing.
std::vector<PrPoint> pr_curve(std::span<const double> scores, std::span<const int> labels);
/// Quadratic-time reference of pr_curve.
std::vector<PrPoint> pr_curve_reference(std::span<const double> scores, std::span<const int> labels);

struct Confusion {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    double precision() const;
    double recall() const;
    double f1() const;
};

/// Predicts positive when score > threshold.
Confusion confusion_at(std::span<const double> scores, std::span<const int> labels, double threshold);

struct IdentificationRates {
    double pos_rate = 0.0;  // TP / |P|
    double neg_rate = 0.0;  // TN / |N|
};

IdentificationRates identification_rates(std::span<const double> scores, std::span<const int> labels, double threshold);

/// Threshold (between distinct scores) maximizing F1 under "score > threshold".
double f1_max_threshold(std::span<const double> scores, std::span<const int> labels);

/// Mean |prediction - truth|.
double calibration_error(std::span<const double> predictions, std::span<const double> truth);

struct MetricReport {
    std::string name;
    std::size_t n_samples = 0;
    std::size_t n_pos = 0;
    std::size_t n_neg = 0;
    double auc = 0.0;
    double average_precision = 0.0;
    double threshold_calibrated = 0.0;  // decision threshold named in the report
    Confusion at_calibrated;
    IdentificationRates rates_calibrated;
    double threshold_f1 = 0.0;
    Confusion at_f1;
    IdentificationRates rates_f1;
    std::optional<double> calibration;  // empty: oracle unavailable
    std::string calibration_note;       // skip reason when empty
    double runtime_seconds = 0.0;
    std::uint64_t seed = 0;
    std::string split_hash;
    std::vector<RocPoint> roc;
    std::vector<PrPoint> pr;
};

/// Fills AUC, curves, and identification rates at `calibrated_threshold` and
/// at the F1-max threshold.
MetricReport make_report(std::string name, std::span<const double> scores, std::span<const int> labels,
                         double calibrated_threshold);

/// Step-interpolated area under the PR curve.
double average_precision(std::span<const PrPoint> pr);

/// Summary without curve points.
nlohmann::json summary_json(const MetricReport& r);

/// Curve CSVs, thinned to at most `max_points` rows (endpoints kept).
std::string roc_csv(const MetricReport& r, std::size_t max_points = 2000);
std::string pr_csv(const MetricReport& r, std::size_t max_points = 2000);

/// Line plots of several reports' curves.
std::string roc_svg(std::span<const MetricReport> reports);
std::string pr_svg(std::span<const MetricReport> reports);
/// Histogram of scores split by label.
std::string histogram_csv(std::span<const double> scores, std::span<const int> labels, std::size_t bins);
std::string histogram_svg(std::span<const double> scores, std::span<const int> labels, std::size_t bins,
                          const std::string& title, std::optional<double> marker = std::nullopt);

}  // namespace crit
