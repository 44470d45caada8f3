#include "crit/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace crit {

std::vector<int> dataset_labels(const LabeledDataset& ds) {
    std::vector<int> y(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) y[i] = ds.label(i);
    return y;
}

namespace {

struct Counts {
    std::size_t pos = 0, neg = 0;
};

Counts check_inputs(std::span<const double> scores, std::span<const int> labels) {
    require(scores.size() == labels.size(), ErrorKind::precondition, "scores and labels differ in length");
    Counts c;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        require(!std::isnan(scores[i]), ErrorKind::precondition, "NaN score");
        require(labels[i] == 0 || labels[i] == 1, ErrorKind::precondition, "labels must be 0 or 1");
        (labels[i] ? c.pos : c.neg)++;
    }
    return c;
}

// Indices sorted by descending score (stable, so ties keep input order).
std::vector<std::size_t> order_desc(std::span<const double> scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

double auc_from_twice_wins(unsigned __int128 twice_wins, const Counts& c) {
    return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(c.pos) * static_cast<double>(c.neg));
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
    const Counts c = check_inputs(scores, labels);
    require(c.pos > 0 && c.neg > 0, ErrorKind::precondition, "AUC is undefined without both classes");
    const auto idx = order_desc(scores);
    // Walk from the top; every positive in a tie group beats the negatives
    // still below the group and ties with the group's own negatives.
    unsigned __int128 twice_wins = 0;
    std::size_t neg_above = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i, gp = 0, gn = 0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? gp : gn)++;
            ++j;
        }
        const std::size_t neg_below = c.neg - neg_above - gn;
        twice_wins += static_cast<unsigned __int128>(gp) * (2 * neg_below + gn);
        neg_above += gn;
        i = j;
    }
    return auc_from_twice_wins(twice_wins, c);
}

double roc_auc_pairwise(std::span<const double> scores, std::span<const int> labels) {
    const Counts c = check_inputs(scores, labels);
    require(c.pos > 0 && c.neg > 0, ErrorKind::precondition, "AUC is undefined without both classes");
    unsigned __int128 twice_wins = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            if (scores[i] > scores[j])
                twice_wins += 2;
            else if (scores[i] == scores[j])
                twice_wins += 1;
        }
    }
    return auc_from_twice_wins(twice_wins, c);
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
    const Counts c = check_inputs(scores, labels);
    require(c.pos > 0 && c.neg > 0, ErrorKind::precondition, "ROC is undefined without both classes");
    const auto idx = order_desc(scores);
    std::vector<RocPoint> out{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < idx.size();) {
        const double s = scores[idx[i]];
        while (i < idx.size() && scores[idx[i]] == s) (labels[idx[i++]] ? tp : fp)++;
        out.push_back({s, static_cast<double>(fp) / static_cast<double>(c.neg),
                       static_cast<double>(tp) / static_cast<double>(c.pos)});
    }
    return out;
}

std::vector<PrPoint> pr_curve(std::span<const double> scores, std::span<const int> labels) {
    const Counts c = check_inputs(scores, labels);
    require(c.pos > 0, ErrorKind::precondition, "PR curve needs at least one positive");
    const auto idx = order_desc(scores);
    std::vector<PrPoint> out;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < idx.size();) {
        const double s = scores[idx[i]];
        while (i < idx.size() && scores[idx[i]] == s) (labels[idx[i++]] ? tp : fp)++;
        out.push_back({s, static_cast<double>(tp) / static_cast<double>(c.pos),
                       static_cast<double>(tp) / static_cast<double>(tp + fp), tp, fp});
    }
    return out;
}

std::vector<PrPoint> pr_curve_reference(std::span<const double> scores, std::span<const int> labels) {
    const Counts c = check_inputs(scores, labels);
    require(c.pos > 0, ErrorKind::precondition, "PR curve needs at least one positive");
    std::vector<double> thresholds(scores.begin(), scores.end());
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
    std::vector<PrPoint> out;
    for (double t : thresholds) {
        std::size_t tp = 0, fp = 0;
        for (std::size_t i = 0; i < scores.size(); ++i)
            if (scores[i] >= t) (labels[i] ? tp : fp)++;
        out.push_back({t, static_cast<double>(tp) / static_cast<double>(c.pos),
                       static_cast<double>(tp) / static_cast<double>(tp + fp), tp, fp});
    }
    return out;
}

double Confusion::precision() const {
    return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
}
double Confusion::recall() const { return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
double Confusion::f1() const {
    const double p = precision(), r = recall();
    return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

Confusion confusion_at(std::span<const double> scores, std::span<const int> labels, double threshold) {
    check_inputs(scores, labels);
    Confusion c;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] > threshold;
        if (labels[i])
            (pred ? c.tp : c.fn)++;
        else
            (pred ? c.fp : c.tn)++;
    }
    return c;
}

IdentificationRates identification_rates(std::span<const double> scores, std::span<const int> labels,
                                         double threshold) {
    require(std::isfinite(threshold), ErrorKind::precondition, "identification threshold must be finite");
    const Confusion c = confusion_at(scores, labels, threshold);
    require(c.tp + c.fn > 0 && c.tn + c.fp > 0, ErrorKind::precondition, "identification rates need both classes");
    return {static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn),
            static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp)};
}

double f1_max_threshold(std::span<const double> scores, std::span<const int> labels) {
    const auto pr = pr_curve(scores, labels);
    double best = -1.0, thr = 0.0;
    const double P = static_cast<double>(pr.back().tp);
    for (const auto& p : pr) {
        const double f1 = p.tp ? 2.0 * static_cast<double>(p.tp) / (static_cast<double>(p.tp + p.fp) + P) : 0.0;
        if (f1 > best) {
            best = f1;
            thr = std::nextafter(p.threshold, -std::numeric_limits<double>::infinity());
        }
    }
    return thr;
}

double calibration_error(std::span<const double> predictions, std::span<const double> truth) {
    require(predictions.size() == truth.size(), ErrorKind::precondition, "prediction/truth length mismatch");
    require(!predictions.empty(), ErrorKind::precondition, "calibration error over an empty set");
    double total = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) total += std::abs(predictions[i] - truth[i]);
    return total / static_cast<double>(truth.size());
}

double average_precision(std::span<const PrPoint> pr) {
    double ap = 0.0, prev = 0.0;
    for (const auto& p : pr) {
        ap += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    return ap;
}

MetricReport make_report(std::string name, std::span<const double> scores, std::span<const int> labels,
                         double calibrated_threshold) {
    MetricReport r;
    r.name = std::move(name);
    const Counts c = check_inputs(scores, labels);
    r.n_samples = scores.size();
    r.n_pos = c.pos;
    r.n_neg = c.neg;
    r.auc = roc_auc(scores, labels);
    r.roc = roc_curve(scores, labels);
    r.pr = pr_curve(scores, labels);
    r.average_precision = average_precision(r.pr);
    r.threshold_calibrated = calibrated_threshold;
    r.at_calibrated = confusion_at(scores, labels, calibrated_threshold);
    r.rates_calibrated = identification_rates(scores, labels, calibrated_threshold);
    r.threshold_f1 = f1_max_threshold(scores, labels);
    r.at_f1 = confusion_at(scores, labels, r.threshold_f1);
    r.rates_f1 = identification_rates(scores, labels, r.threshold_f1);
    r.calibration_note = "not computed";
    return r;
}

namespace {

nlohmann::json confusion_json(const Confusion& c) {
    return {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}, {"precision", c.precision()},
            {"recall", c.recall()}, {"f1", c.f1()}};
}

std::string fmt(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

template <class P, class Row>
std::string thinned_csv(const std::vector<P>& pts, std::size_t max_points, const char* header, Row row) {
    std::string out = header;
    out += '\n';
    const std::size_t n = pts.size();
    const std::size_t stride = n > max_points && max_points > 1 ? (n + max_points - 2) / (max_points - 1) : 1;
    for (std::size_t i = 0; i < n; ++i)
        if (i % stride == 0 || i + 1 == n) out += row(pts[i]) + '\n';
    return out;
}

}  // namespace

nlohmann::json summary_json(const MetricReport& r) {
    nlohmann::json j{{"name", r.name},
                     {"n_samples", r.n_samples},
                     {"n_pos", r.n_pos},
                     {"n_neg", r.n_neg},
                     {"auc", r.auc},
                     {"average_precision", r.average_precision},
                     {"calibrated", {{"threshold", r.threshold_calibrated},
                                     {"confusion", confusion_json(r.at_calibrated)},
                                     {"pos_rate", r.rates_calibrated.pos_rate},
                                     {"neg_rate", r.rates_calibrated.neg_rate}}},
                     {"f1_max", {{"threshold", r.threshold_f1},
                                 {"confusion", confusion_json(r.at_f1)},
                                 {"pos_rate", r.rates_f1.pos_rate},
                                 {"neg_rate", r.rates_f1.neg_rate}}},
                     {"seed", r.seed},
                     {"split_hash", r.split_hash}};
    if (r.calibration)
        j["calibration_error"] = *r.calibration;
    else
        j["calibration_error"] = {{"skipped", r.calibration_note}};
    return j;
}

std::string roc_csv(const MetricReport& r, std::size_t max_points) {
    return thinned_csv(r.roc, max_points, "threshold,fpr,tpr", [](const RocPoint& p) {
        return fmt(p.threshold) + ',' + fmt(p.fpr) + ',' + fmt(p.tpr);
    });
}

std::string pr_csv(const MetricReport& r, std::size_t max_points) {
    return thinned_csv(r.pr, max_points, "threshold,recall,precision", [](const PrPoint& p) {
        return fmt(p.threshold) + ',' + fmt(p.recall) + ',' + fmt(p.precision);
    });
}

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};

struct Plot {
    double w = 480, h = 400, left = 60, right = 170, top = 30, bottom = 50;
    std::ostringstream svg;

    double px(double x) const { return left + x * (w - left - right); }
    double py(double y) const { return h - bottom - y * (h - top - bottom); }

    void begin(const std::string& title, const std::string& xlabel, const std::string& ylabel) {
        svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
            << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
            << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
            << "<text x=\"" << w / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << title << "</text>\n"
            << "<rect x=\"" << px(0) << "\" y=\"" << py(1) << "\" width=\"" << px(1) - px(0) << "\" height=\""
            << py(0) - py(1) << "\" fill=\"none\" stroke=\"black\"/>\n";
        for (int k = 0; k <= 5; ++k) {
            const double t = k / 5.0;
            svg << "<text x=\"" << px(t) << "\" y=\"" << py(0) + 15 << "\" text-anchor=\"middle\">" << t << "</text>\n"
                << "<text x=\"" << px(0) - 5 << "\" y=\"" << py(t) + 4 << "\" text-anchor=\"end\">" << t << "</text>\n";
        }
        svg << "<text x=\"" << (px(0) + px(1)) / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\">" << xlabel
            << "</text>\n"
            << "<text x=\"15\" y=\"" << (py(0) + py(1)) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 15 "
            << (py(0) + py(1)) / 2 << ")\">" << ylabel << "</text>\n";
    }

    void line(const std::vector<std::pair<double, double>>& pts, std::size_t k, const std::string& label) {
        svg << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << kPalette[k % 7] << "\" points=\"";
        for (const auto& [x, y] : pts) svg << px(x) << ',' << py(y) << ' ';
        svg << "\"/>\n";
        const double ly = top + 15 + 16 * static_cast<double>(k);
        svg << "<line x1=\"" << w - right + 10 << "\" y1=\"" << ly << "\" x2=\"" << w - right + 28 << "\" y2=\"" << ly
            << "\" stroke=\"" << kPalette[k % 7] << "\" stroke-width=\"2\"/>\n"
            << "<text x=\"" << w - right + 32 << "\" y=\"" << ly + 4 << "\">" << label << "</text>\n";
    }

    std::string end() {
        svg << "</svg>\n";
        return svg.str();
    }
};

template <class P, class XY>
std::vector<std::pair<double, double>> thin(const std::vector<P>& pts, XY xy, std::size_t max_points = 1500) {
    std::vector<std::pair<double, double>> out;
    const std::size_t n = pts.size();
    const std::size_t stride = n > max_points ? (n + max_points - 1) / max_points : 1;
    for (std::size_t i = 0; i < n; ++i)
        if (i % stride == 0 || i + 1 == n) out.push_back(xy(pts[i]));
    return out;
}

std::string auc_label(const MetricReport& r, double v) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%s (%.4f)", r.name.c_str(), v);
    return buf;
}

}  // namespace

std::string roc_svg(std::span<const MetricReport> reports) {
    Plot p;
    p.begin("ROC", "false positive rate", "true positive rate");
    for (std::size_t k = 0; k < reports.size(); ++k)
        p.line(thin(reports[k].roc, [](const RocPoint& q) { return std::make_pair(q.fpr, q.tpr); }), k,
               auc_label(reports[k], reports[k].auc));
    return p.end();
}

std::string pr_svg(std::span<const MetricReport> reports) {
    Plot p;
    p.begin("Precision-Recall", "recall", "precision");
    for (std::size_t k = 0; k < reports.size(); ++k)
        p.line(thin(reports[k].pr, [](const PrPoint& q) { return std::make_pair(q.recall, q.precision); }), k,
               auc_label(reports[k], reports[k].average_precision));
    return p.end();
}

namespace {

struct Histogram {
    double lo = 0.0, hi = 1.0;
    std::vector<std::size_t> pos, neg;
};

Histogram histogram(std::span<const double> scores, std::span<const int> labels, std::size_t bins) {
    check_inputs(scores, labels);
    require(bins > 0 && !scores.empty(), ErrorKind::precondition, "histogram needs bins and scores");
    Histogram h;
    const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
    h.lo = *mn;
    h.hi = *mx > *mn ? *mx : *mn + 1.0;
    h.pos.assign(bins, 0);
    h.neg.assign(bins, 0);
    const double width = (h.hi - h.lo) / static_cast<double>(bins);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        auto b = static_cast<std::size_t>((scores[i] - h.lo) / width);
        b = std::min(b, bins - 1);
        (labels[i] ? h.pos : h.neg)[b]++;
    }
    return h;
}

}  // namespace

std::string histogram_csv(std::span<const double> scores, std::span<const int> labels, std::size_t bins) {
    const Histogram h = histogram(scores, labels, bins);
    const double width = (h.hi - h.lo) / static_cast<double>(bins);
    std::string out = "bin_lo,bin_hi,negatives,positives\n";
    for (std::size_t b = 0; b < bins; ++b)
        out += fmt(h.lo + width * static_cast<double>(b)) + ',' + fmt(h.lo + width * static_cast<double>(b + 1)) +
               ',' + std::to_string(h.neg[b]) + ',' + std::to_string(h.pos[b]) + '\n';
    return out;
}

std::string histogram_svg(std::span<const double> scores, std::span<const int> labels, std::size_t bins,
                          const std::string& title, std::optional<double> marker) {
    const Histogram h = histogram(scores, labels, bins);
    // Class-wise densities on a shared axis so the rare class stays visible.
    double total_pos = 0, total_neg = 0;
    for (std::size_t b = 0; b < bins; ++b) {
        total_pos += static_cast<double>(h.pos[b]);
        total_neg += static_cast<double>(h.neg[b]);
    }
    double peak = 0.0;
    std::vector<double> dp(bins), dn(bins);
    for (std::size_t b = 0; b < bins; ++b) {
        dp[b] = total_pos > 0 ? static_cast<double>(h.pos[b]) / total_pos : 0.0;
        dn[b] = total_neg > 0 ? static_cast<double>(h.neg[b]) / total_neg : 0.0;
        peak = std::max({peak, dp[b], dn[b]});
    }
    if (peak <= 0.0) peak = 1.0;
    Plot p;
    p.begin(title, "score (scaled to [0,1])", "fraction of class (scaled)");
    auto series = [&](const std::vector<double>& d) {
        std::vector<std::pair<double, double>> pts;
        for (std::size_t b = 0; b < bins; ++b) {
            const double x0 = static_cast<double>(b) / static_cast<double>(bins);
            const double x1 = static_cast<double>(b + 1) / static_cast<double>(bins);
            pts.emplace_back(x0, d[b] / peak);
            pts.emplace_back(x1, d[b] / peak);
        }
        return pts;
    };
    p.line(series(dn), 0, "negatives");
    p.line(series(dp), 1, "positives");
    if (marker) {
        const double x = std::clamp((*marker - h.lo) / (h.hi - h.lo), 0.0, 1.0);
        p.svg << "<line x1=\"" << p.px(x) << "\" y1=\"" << p.py(0) << "\" x2=\"" << p.px(x) << "\" y2=\"" << p.py(1)
              << "\" stroke=\"black\" stroke-dasharray=\"4 3\"/>\n";
    }
    return p.end();
}

}  // namespace crit
