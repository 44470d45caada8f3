#include "crit/stage1.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "crit/kernels.hpp"

namespace crit {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

namespace {

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

double ranking_loss(std::span<const double> r_pos, std::span<const double> r_neg, std::vector<double>* d_pos,
                    std::vector<double>* d_neg) {
    require(!r_pos.empty(), ErrorKind::precondition, "ranking loss needs at least one pair");
    require(r_pos.size() == r_neg.size(), ErrorKind::precondition, "ranking loss needs equal positive/negative batches");
    const double n = static_cast<double>(r_pos.size());
    if (d_pos) d_pos->assign(r_pos.size(), 0.0);
    if (d_neg) d_neg->assign(r_neg.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < r_pos.size(); ++i) {
        const double m = r_pos[i] - r_neg[i];
        total += softplus(-m);
        // d softplus(-m) / dm = -sigmoid(-m)
        const double g = -sigmoid(-m) / n;
        if (d_pos) (*d_pos)[i] = g;
        if (d_neg) (*d_neg)[i] = -g;
    }
    return total / n;
}

void to_json(nlohmann::json& j, const Stage1Config& c) {
    j = nlohmann::json{{"backbone", c.backbone},
                       {"steps", c.steps},
                       {"batch_pairs", c.batch_pairs},
                       {"lr", c.adam.lr},
                       {"weight_decay", c.adam.weight_decay},
                       {"target_recall", c.target_recall},
                       {"log_every", c.log_every}};
}

void from_json(const nlohmann::json& j, Stage1Config& c) {
    if (j.contains("backbone")) j.at("backbone").get_to(c.backbone);
    c.steps = j.value("steps", c.steps);
    c.batch_pairs = j.value("batch_pairs", c.batch_pairs);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.weight_decay = j.value("weight_decay", c.adam.weight_decay);
    c.target_recall = j.value("target_recall", c.target_recall);
    c.log_every = j.value("log_every", c.log_every);
}

FilterModel::FilterModel(std::size_t input_dim, nn::MlpSpec spec) {
    spec.input_dim = input_dim;
    nn::Standardizer::add_blocks(params, input_dim, standardizer.prefix);
    backbone = nn::Mlp(spec, params, "backbone");
    nn::ScalarHead::add_blocks(params, spec.output_dim, head.prefix);
}

void FilterModel::init(Rng& rng) {
    backbone.init(params, rng);
    nn::init_xavier(params, params.block("head.weight"), rng);
    params.view("head.bias").setZero();
}

namespace {

// Per-dimension mean and standard deviation of the current state of every
// sample in `ds`.
void state_moments(const LabeledDataset& ds, std::vector<double>& mean, std::vector<double>& sd) {
    const auto d = static_cast<std::size_t>(ds.state_dim());
    mean.assign(d, 0.0);
    sd.assign(d, 0.0);
    require(!ds.empty(), ErrorKind::precondition, "cannot fit a standardizer on an empty dataset");
    const auto& store = ds.store();
    for (const auto& r : ds.refs()) {
        const auto s = store.state(r.episode, r.step);
        for (std::size_t j = 0; j < d; ++j) mean[j] += s[j];
    }
    const double n = static_cast<double>(ds.size());
    for (double& m : mean) m /= n;
    for (const auto& r : ds.refs()) {
        const auto s = store.state(r.episode, r.step);
        for (std::size_t j = 0; j < d; ++j) sd[j] += (s[j] - mean[j]) * (s[j] - mean[j]);
    }
    for (double& v : sd) v = std::sqrt(v / n);
}

}  // namespace

void fit_input_standardizer(nn::ParamStore& params, const LabeledDataset& ds, const std::string& prefix) {
    std::vector<double> mean, sd;
    state_moments(ds, mean, sd);
    nn::Standardizer::fit(params, mean, sd, static_cast<std::size_t>(ds.window_len()), prefix);
}

void FilterModel::fit_standardizer(const LabeledDataset& ds) { fit_input_standardizer(params, ds, standardizer.prefix); }

nn::Vector FilterModel::score(const nn::Matrix& X) const {
    return head.forward(params, backbone.forward(params, standardizer.apply(params, X)));
}

double FilterModel::score_reference(std::span<const double> x) const {
    std::vector<double> z(x.size());
    standardizer.apply_reference(params, x, z);
    std::vector<double> f(backbone.spec().output_dim);
    backbone.forward_reference(params, z, f);
    const auto& wb = params.block("head.weight");
    double r = params.values()[params.block("head.bias").offset];
    for (std::size_t i = 0; i < f.size(); ++i) r += params.values()[wb.offset + i] * f[i];
    return r;
}

std::vector<double> FilterModel::score_dataset(const LabeledDataset& ds, std::span<const std::uint32_t> indices) const {
    require(ds.input_dim() == input_dim(), ErrorKind::precondition, "dataset window does not match the reward model");
    return kernels::score(ds, indices, [this](const nn::Matrix& X, std::span<double> out) {
        const nn::Vector r = score(X);
        std::copy(r.data(), r.data() + r.size(), out.begin());
    });
}

double FilterModel::pair_loss(const nn::Matrix& Xp, const nn::Matrix& Xn, std::vector<double>* grad) const {
    require(Xp.rows() == Xn.rows(), ErrorKind::precondition, "pair batches must have equal size");
    const auto n = static_cast<Eigen::Index>(Xp.rows());
    nn::Matrix X(2 * n, Xp.cols());
    X.topRows(n) = Xp;
    X.bottomRows(n) = Xn;
    nn::MlpCache cache;
    const nn::Matrix F = backbone.forward(params, standardizer.apply(params, X), grad ? &cache : nullptr);
    const nn::Vector r = head.forward(params, F);
    std::vector<double> dp, dn;
    const double loss = ranking_loss(std::span<const double>(r.data(), static_cast<std::size_t>(n)),
                                     std::span<const double>(r.data() + n, static_cast<std::size_t>(n)),
                                     grad ? &dp : nullptr, grad ? &dn : nullptr);
    if (grad) {
        grad->assign(params.size(), 0.0);
        nn::Vector dr(2 * n);
        for (Eigen::Index i = 0; i < n; ++i) {
            dr(i) = dp[static_cast<std::size_t>(i)];
            dr(n + i) = dn[static_cast<std::size_t>(i)];
        }
        const nn::Matrix dF = head.backward(params, F, dr, *grad);
        backbone.backward(params, cache, dF, *grad);
    }
    return loss;
}

nlohmann::json FilterModel::architecture() const {
    return {{"kind", "reward_model"}, {"backbone", backbone.spec()}, {"epsilon", epsilon}};
}

ModelBundle FilterModel::to_bundle(const std::string& config_hash, nlohmann::json metrics) const {
    ModelBundle b;
    b.stage = "stage1";
    b.architecture = architecture();
    b.config_hash = config_hash;
    b.metrics = std::move(metrics);
    b.params = params;
    return b;
}

FilterModel FilterModel::from_bundle(const ModelBundle& bundle) {
    require(bundle.architecture.value("kind", std::string()) == "reward_model", ErrorKind::integrity,
            "checkpoint does not hold a reward model (stage " + bundle.stage + ")");
    const auto spec = bundle.architecture.at("backbone").get<nn::MlpSpec>();
    FilterModel m(spec.input_dim, spec);
    require(m.params.same_layout(bundle.params), ErrorKind::integrity, "reward model parameter layout mismatch");
    m.params = bundle.params;
    const auto& eps = bundle.architecture.at("epsilon");
    m.epsilon = eps.is_number() ? eps.get<double>() : std::numeric_limits<double>::quiet_NaN();
    return m;
}

Stage1Result train_reward_model(const LabeledDataset& ds, const Stage1Config& config, std::uint64_t seed) {
    require(!ds.positives().empty() && !ds.negatives().empty(), ErrorKind::precondition,
            "reward model training needs both positive and negative samples");
    require(config.batch_pairs > 0, ErrorKind::config, "stage1 batch_pairs must be positive");
    Stage1Result res;
    res.model = FilterModel(ds.input_dim(), config.backbone);
    Rng rng(derive_seed(seed, 0x5731));
    res.model.init(rng);
    res.model.fit_standardizer(ds);

    nn::Adam adam(res.model.params.size(), config.adam);
    const auto trainable = res.model.params.mask(std::vector<std::string>{"backbone.", "head."});
    const std::size_t in = ds.input_dim();
    const std::size_t B = config.batch_pairs;
    nn::Matrix Xp(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(in));
    nn::Matrix Xn(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(in));
    std::vector<std::uint32_t> ip(B), in_(B);
    std::vector<double> grad;
    const auto& P = ds.positives();
    const auto& N = ds.negatives();
    for (std::size_t step = 0; step < config.steps; ++step) {
        for (std::size_t k = 0; k < B; ++k) {
            ip[k] = P[rng.below(P.size())];
            in_[k] = N[rng.below(N.size())];
        }
        ds.fill_batch(std::span<const std::uint32_t>(ip), std::span<double>(Xp.data(), B * in));
        ds.fill_batch(std::span<const std::uint32_t>(in_), std::span<double>(Xn.data(), B * in));
        const double loss = res.model.pair_loss(Xp, Xn, &grad);
        if (!std::isfinite(loss)) {
            std::ostringstream msg;
            msg << "stage1 diverged at step " << step << " (loss " << loss << ", lr " << config.adam.lr << ")";
            fail(ErrorKind::divergence, msg.str());
        }
        if (config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps))
            res.log.push_back({step, loss});
        adam.step(res.model.params.values(), grad, trainable);
    }
    return res;
}

double calibrate_threshold(std::span<const double> positive_scores, double target_recall) {
    require(!positive_scores.empty(), ErrorKind::precondition, "threshold calibration needs at least one positive");
    require(target_recall > 0.0 && target_recall <= 1.0, ErrorKind::config, "target_recall must lie in (0, 1]");
    std::vector<double> s(positive_scores.begin(), positive_scores.end());
    for (double v : s) require(std::isfinite(v), ErrorKind::precondition, "non-finite score in calibration");
    std::sort(s.begin(), s.end(), std::greater<>());
    const double n = static_cast<double>(s.size());
    auto k = static_cast<std::size_t>(std::ceil(target_recall * n - 1e-9));
    k = std::clamp<std::size_t>(k, 1, s.size());
    return std::nextafter(s[k - 1], -std::numeric_limits<double>::infinity());
}

double calibrate_threshold(const FilterModel& model, const LabeledDataset& val, double target_recall) {
    require(!val.positives().empty(), ErrorKind::precondition, "validation split has no positives");
    const auto scores = model.score_dataset(val, val.positives());
    return calibrate_threshold(scores, target_recall);
}

void to_json(nlohmann::json& j, const FilterStats& s) {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    j = nlohmann::json{{"epsilon", s.epsilon},
                       {"n_pos", s.n_pos},
                       {"n_neg", s.n_neg},
                       {"pos_above_threshold", s.pos_above},
                       {"neg_survivors", s.neg_survivors},
                       {"retained_positive_rate", num(s.retained_positive_rate)},
                       {"removed_negative_rate", num(s.removed_negative_rate)},
                       {"original_ir", num(s.original_ir)},
                       {"survivor_ir", num(s.survivor_ir)}};
}

FilterStats filter_stats(std::span<const double> scores, const LabeledDataset& ds, double epsilon) {
    require(scores.size() == ds.size(), ErrorKind::precondition, "score count does not match the dataset");
    FilterStats st;
    st.epsilon = epsilon;
    st.n_pos = ds.positives().size();
    st.n_neg = ds.negatives().size();
    for (auto i : ds.positives()) st.pos_above += scores[i] > epsilon;
    for (auto i : ds.negatives()) st.neg_survivors += scores[i] > epsilon;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    st.retained_positive_rate = st.n_pos ? static_cast<double>(st.pos_above) / static_cast<double>(st.n_pos) : nan;
    st.removed_negative_rate =
        st.n_neg ? 1.0 - static_cast<double>(st.neg_survivors) / static_cast<double>(st.n_neg) : nan;
    st.original_ir = st.n_pos ? static_cast<double>(st.n_neg) / static_cast<double>(st.n_pos) : nan;
    // Survivors keep every positive, so the survivor IR divides by |P|.
    st.survivor_ir = st.n_pos ? static_cast<double>(st.neg_survivors) / static_cast<double>(st.n_pos) : nan;
    return st;
}

FilterResult filter_by_scores(std::vector<double> scores, const LabeledDataset& ds, double epsilon) {
    require(std::isfinite(epsilon), ErrorKind::precondition, "filter threshold is not calibrated");
    FilterResult res;
    res.stats = filter_stats(scores, ds, epsilon);
    std::vector<std::size_t> keep;
    keep.reserve(res.stats.n_pos + res.stats.neg_survivors);
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.label(i) == 1 || scores[i] > epsilon) keep.push_back(i);
    res.survivors = ds.subset(keep, "survivors");
    res.scores = std::move(scores);
    return res;
}

FilterResult filter_dataset(const FilterModel& model, const LabeledDataset& ds) {
    require(model.calibrated(), ErrorKind::precondition, "filter model is not calibrated");
    return filter_by_scores(model.score_dataset(ds), ds, model.epsilon);
}

}  // namespace crit
