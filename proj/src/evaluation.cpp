#include "crit/evaluation.hpp"

#include <algorithm>
#include <chrono>

namespace crit {

void CascadePredictor::check() const {
    require(filter != nullptr, ErrorKind::prerequisite, "cascade has no stage-1 filter loaded");
    require(classifier != nullptr, ErrorKind::prerequisite, "cascade has no classifier loaded");
    require(filter->calibrated(), ErrorKind::prerequisite, "cascade filter is not calibrated");
    require(filter->input_dim() == classifier->input_dim(), ErrorKind::precondition,
            "filter and classifier disagree on the input window");
}

std::vector<double> CascadePredictor::predict(const nn::Matrix& X) const {
    check();
    const nn::Vector r = filter->score(X);
    const nn::Vector p = classifier->predict(X);
    std::vector<double> out(static_cast<std::size_t>(X.rows()));
    for (Eigen::Index i = 0; i < X.rows(); ++i) out[static_cast<std::size_t>(i)] = r(i) > filter->epsilon ? p(i) : 0.0;
    return out;
}

double CascadePredictor::predict_one(std::span<const double> x) const {
    check();
    if (!(filter->score_reference(x) > filter->epsilon)) return 0.0;
    return classifier->predict_reference(x);
}

std::vector<double> CascadePredictor::predict_dataset(const LabeledDataset& ds, std::span<const std::uint32_t> indices,
                                                      const std::vector<double>* stage1_scores) const {
    check();
    std::vector<double> r;
    if (stage1_scores) {
        require(stage1_scores->size() == (indices.empty() ? ds.size() : indices.size()), ErrorKind::precondition,
                "stage-1 score count does not match the request");
    } else {
        r = filter->score_dataset(ds, indices);
        stage1_scores = &r;
    }
    std::vector<std::uint32_t> survivors;
    std::vector<std::size_t> slot;
    const std::size_t n = stage1_scores->size();
    for (std::size_t k = 0; k < n; ++k) {
        if ((*stage1_scores)[k] > filter->epsilon) {
            survivors.push_back(indices.empty() ? static_cast<std::uint32_t>(k) : indices[k]);
            slot.push_back(k);
        }
    }
    std::vector<double> out(n, 0.0);
    if (!survivors.empty()) {
        const auto p = classifier->predict_dataset(ds, survivors);
        for (std::size_t k = 0; k < slot.size(); ++k) out[slot[k]] = p[k];
    }
    return out;
}

std::vector<std::uint32_t> critical_episode_samples(const LabeledDataset& ds) {
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.store().critical[ds.ref(i).episode]) out.push_back(static_cast<std::uint32_t>(i));
    return out;
}

std::vector<double> oracle_criticality(const LabeledDataset& ds, std::span<const std::uint32_t> indices,
                                       const EnvConfig& config) {
    require(config.state_dim == ds.state_dim(), ErrorKind::precondition, "oracle config does not match the dataset");
    std::vector<double> out(indices.size());
    const auto n = static_cast<std::ptrdiff_t>(indices.size());
#pragma omp parallel for schedule(dynamic, 64)
    for (std::ptrdiff_t k = 0; k < n; ++k) {
        const auto& r = ds.ref(indices[static_cast<std::size_t>(k)]);
        EnvState st;
        const auto s = ds.store().state(r.episode, r.step);
        st.s.assign(s.begin(), s.end());
        st.t = static_cast<int>(r.step);
        out[static_cast<std::size_t>(k)] = criticality_within(st, config, ds.manifest().horizon);
    }
    return out;
}

void to_json(nlohmann::json& j, const BaselineSettings& s) {
    Stage2Config c;
    c.arch = s.arch;
    c.training = s.training;
    nlohmann::json inner = c;
    inner.erase("init_from_stage1");
    j = inner;
    j["retrain_epochs"] = s.retrain_epochs;
    j["decision_threshold"] = s.decision_threshold;
}

void from_json(const nlohmann::json& j, BaselineSettings& s) {
    Stage2Config c;
    c.arch = s.arch;
    c.training = s.training;
    from_json(j, c);
    s.arch = c.arch;
    s.training = c.training;
    s.retrain_epochs = j.value("retrain_epochs", s.retrain_epochs);
    s.decision_threshold = j.value("decision_threshold", s.decision_threshold);
}

const std::vector<std::string>& known_baselines() {
    static const std::vector<std::string> names{"bbn", "cbs", "decoupling"};
    return names;
}

BaselineModel train_baseline(const std::string& name, const LabeledDataset& train, const LabeledDataset* val,
                             const BaselineSettings& settings, std::uint64_t seed) {
    const auto it = std::find(known_baselines().begin(), known_baselines().end(), name);
    require(it != known_baselines().end(), ErrorKind::config, "unknown baseline " + name);
    BBNArchitecture arch = settings.arch;
    arch.normalized = false;
    ClassifierTraining t = settings.training;
    t.gamma = 0.0;
    t.trainable.clear();
    if (name == "bbn") {
        arch.branches = 2;
        t.mode_a = SamplerMode::class_balanced;
        t.mode_b = SamplerMode::uniform;
    } else {
        arch.branches = 1;
        t.mode_a = name == "cbs" ? SamplerMode::class_balanced : SamplerMode::uniform;
    }
    const std::uint64_t s = derive_seed(seed, 0xBA5E + static_cast<std::uint64_t>(it - known_baselines().begin()));
    BBNModel model(train.input_dim(), arch);
    Rng rng(derive_seed(s, 1));
    model.init(rng);
    model.fit_standardizer(train);
    BaselineModel out;
    out.name = name;
    auto res = train_classifier(std::move(model), train, val, t, s);
    out.log = std::move(res.log);
    if (name == "decoupling") {
        nn::init_xavier(res.model.params, res.model.params.block("classifier.weight"), rng);
        res.model.params.view("classifier.bias").setZero();
        ClassifierTraining rt = t;
        rt.mode_a = SamplerMode::class_balanced;
        rt.epochs = settings.retrain_epochs;
        rt.trainable = {"classifier."};
        auto phase2 = train_classifier(std::move(res.model), train, val, rt, derive_seed(s, 2));
        for (auto& e : phase2.log) {
            e.epoch += t.epochs;
            out.log.push_back(e);
        }
        res.model = std::move(phase2.model);
    }
    out.model = std::move(res.model);
    return out;
}

std::vector<MetricReport> run_baselines(const LabeledDataset& train, const LabeledDataset* val,
                                        const LabeledDataset& test, std::span<const std::string> names,
                                        const BaselineSettings& settings, std::uint64_t seed,
                                        std::vector<BaselineModel>* models) {
    const auto labels = dataset_labels(test);
    const std::string split_hash = test.content_hash();
    std::vector<MetricReport> reports;
    for (const auto& name : names) {
        const auto t0 = std::chrono::steady_clock::now();
        BaselineModel bm = train_baseline(name, train, val, settings, seed);
        const auto scores = bm.model.predict_dataset(test);
        MetricReport r = make_report(name, scores, labels, settings.decision_threshold);
        r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        r.seed = seed;
        r.split_hash = split_hash;
        reports.push_back(std::move(r));
        if (models) models->push_back(std::move(bm));
    }
    return reports;
}

}  // namespace crit
