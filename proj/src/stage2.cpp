#include "crit/stage2.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "crit/kernels.hpp"
#include "crit/metrics.hpp"

namespace crit {

SamplerMode sampler_mode_from_string(const std::string& s) {
    if (s == "class_balanced") return SamplerMode::class_balanced;
    if (s == "uniform") return SamplerMode::uniform;
    fail(ErrorKind::config, "unknown sampler mode " + s);
}

std::string to_string(SamplerMode m) { return m == SamplerMode::class_balanced ? "class_balanced" : "uniform"; }

BranchSampler::BranchSampler(const LabeledDataset& ds, SamplerMode mode, std::uint64_t seed)
    : ds_(&ds), mode_(mode), rng_(seed) {
    require(!ds.empty(), ErrorKind::precondition, "sampler over an empty dataset");
    if (mode == SamplerMode::class_balanced)
        require(!ds.positives().empty() && !ds.negatives().empty(), ErrorKind::precondition,
                "class-balanced sampling needs both classes");
}

std::uint32_t BranchSampler::draw() {
    if (mode_ == SamplerMode::uniform) return static_cast<std::uint32_t>(rng_.below(ds_->size()));
    const auto& pool = rng_.uniform() < 0.5 ? ds_->positives() : ds_->negatives();
    return pool[rng_.below(pool.size())];
}

void BranchSampler::draw_batch(std::size_t n, std::vector<std::uint32_t>& out) {
    out.resize(n);
    for (auto& i : out) i = draw();
}

void to_json(nlohmann::json& j, const BBNArchitecture& a) {
    j = nlohmann::json{{"backbone", a.backbone},
                       {"d_z", a.d_z},
                       {"normalized", a.normalized},
                       {"temperature", a.temperature},
                       {"shared_backbone", a.shared_backbone},
                       {"branches", a.branches},
                       {"inference_alpha", a.inference_alpha}};
}

void from_json(const nlohmann::json& j, BBNArchitecture& a) {
    if (j.contains("backbone")) j.at("backbone").get_to(a.backbone);
    a.d_z = j.value("d_z", a.d_z);
    a.normalized = j.value("normalized", a.normalized);
    a.temperature = j.value("temperature", a.temperature);
    a.shared_backbone = j.value("shared_backbone", a.shared_backbone);
    a.branches = j.value("branches", a.branches);
    a.inference_alpha = j.value("inference_alpha", a.inference_alpha);
}

nn::Matrix mix_features(const nn::Matrix& Fa, const nn::Matrix& Fb, const nn::Matrix& Wa, const nn::Matrix& Wb,
                        double alpha) {
    require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::precondition, "mixing alpha must lie in [0, 1]");
    require(Fa.cols() == Wa.rows() && Fb.cols() == Wb.rows() && Wa.cols() == Wb.cols() && Fa.rows() == Fb.rows(),
            ErrorKind::precondition, "feature/projection shapes do not conform");
    if (alpha == 1.0) return Fa * Wa;
    if (alpha == 0.0) return Fb * Wb;
    return alpha * (Fa * Wa) + (1.0 - alpha) * (Fb * Wb);
}

namespace {

double clamp_p(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

void check_label(int y) { require(y == 0 || y == 1, ErrorKind::precondition, "label must be 0 or 1"); }

// p_t of the positive probability implied by the logit margin m = l1 - l0.
double p_true(double m, int y) {
    const double p = nn::positive_probability(0.0, m);
    return y == 1 ? p : 1.0 - p;
}

// d focal / d p_t (zero when p_t was clamped).
double focal_dpt(double pt_raw, double gamma) {
    if (pt_raw < kProbClamp || pt_raw > 1.0 - kProbClamp) return 0.0;
    const double q = 1.0 - pt_raw;
    const double lp = std::log(pt_raw);
    double d = -std::pow(q, gamma) / pt_raw;
    if (gamma != 0.0) d += gamma * std::pow(q, gamma - 1.0) * lp;
    return d;
}

}  // namespace

double focal_loss(double p_pos, int y, double gamma) {
    require(!std::isnan(p_pos), ErrorKind::precondition, "focal loss got NaN probability");
    require(gamma >= 0.0, ErrorKind::precondition, "focal gamma must be >= 0");
    check_label(y);
    const double pt = clamp_p(y == 1 ? p_pos : 1.0 - p_pos);
    return -std::pow(1.0 - pt, gamma) * std::log(pt);
}

double cross_entropy(double p_pos, int y) { return focal_loss(p_pos, y, 0.0); }

CombinedLoss combined_loss(const nn::Matrix& logits, std::span<const int> y_a, std::span<const int> y_b, double alpha,
                           double gamma, nn::Matrix* dlogits) {
    require(logits.cols() == 2, ErrorKind::precondition, "combined loss expects two-class logits");
    const auto n = static_cast<std::size_t>(logits.rows());
    require(n > 0 && y_a.size() == n && y_b.size() == n, ErrorKind::precondition, "label count does not match logits");
    require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::precondition, "alpha must lie in [0, 1]");
    if (dlogits) dlogits->setZero(logits.rows(), 2);
    CombinedLoss out;
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        check_label(y_a[i]);
        check_label(y_b[i]);
        const auto r = static_cast<Eigen::Index>(i);
        const double m = logits(r, 1) - logits(r, 0);
        require(std::isfinite(m), ErrorKind::divergence, "non-finite logits in combined loss");
        const double p = nn::positive_probability(0.0, m);
        const double la = focal_loss(p, y_a[i], gamma);
        const double lb = cross_entropy(p, y_b[i]);
        out.loss_a += la * inv;
        out.loss_b += lb * inv;
        if (dlogits) {
            const double dpdm = p * (1.0 - p);
            const double pa = p_true(m, y_a[i]);
            const double pb = p_true(m, y_b[i]);
            const double dm = alpha * focal_dpt(pa, gamma) * (y_a[i] == 1 ? dpdm : -dpdm) +
                              (1.0 - alpha) * focal_dpt(pb, 0.0) * (y_b[i] == 1 ? dpdm : -dpdm);
            (*dlogits)(r, 1) = dm * inv;
            (*dlogits)(r, 0) = -dm * inv;
        }
    }
    out.total = alpha * out.loss_a + (1.0 - alpha) * out.loss_b;
    return out;
}

BBNModel::BBNModel(std::size_t input_dim, BBNArchitecture a) : arch(std::move(a)) {
    require(arch.branches == 1 || arch.branches == 2, ErrorKind::config, "branches must be 1 or 2");
    require(arch.d_z > 0, ErrorKind::config, "d_z must be positive");
    require(arch.inference_alpha >= 0.0 && arch.inference_alpha <= 1.0, ErrorKind::config,
            "inference_alpha must lie in [0, 1]");
    arch.backbone.input_dim = input_dim;
    head = nn::ClassifierHead{"classifier", arch.normalized, arch.temperature};
    nn::Standardizer::add_blocks(params, input_dim, standardizer.prefix);
    branch_a = nn::Mlp(arch.backbone, params, "branch_a");
    if (two_branch() && !arch.shared_backbone) branch_b = nn::Mlp(arch.backbone, params, "branch_b");
    const std::size_t d_feat = arch.backbone.output_dim;
    params.add("proj_a.weight", d_feat, arch.d_z);
    if (two_branch()) params.add("proj_b.weight", d_feat, arch.d_z);
    nn::ClassifierHead::add_blocks(params, arch.d_z, arch.normalized, head.prefix);
}

void BBNModel::init(Rng& rng) {
    branch_a.init(params, rng);
    if (two_branch() && !arch.shared_backbone) branch_b.init(params, rng);
    nn::init_xavier(params, params.block("proj_a.weight"), rng);
    if (two_branch()) nn::init_xavier(params, params.block("proj_b.weight"), rng);
    nn::init_xavier(params, params.block("classifier.weight"), rng);
    if (arch.normalized)
        nn::normalize_classifier(params, head);
    else
        params.view("classifier.bias").setZero();
}

void BBNModel::fit_standardizer(const LabeledDataset& ds) { fit_input_standardizer(params, ds, standardizer.prefix); }

std::size_t BBNModel::init_from(const FilterModel& stage1) {
    const auto& s = stage1.backbone.spec();
    const auto& b = arch.backbone;
    require(s.input_dim == b.input_dim && s.hidden == b.hidden && s.output_dim == b.output_dim &&
                s.activation == b.activation,
            ErrorKind::config, "stage-1 backbone architecture differs from the stage-2 backbone");
    std::size_t n = params.copy_matching(stage1.params, "input.", "input.");
    n += params.copy_matching(stage1.params, "backbone.", "branch_a.");
    if (two_branch() && !arch.shared_backbone) n += params.copy_matching(stage1.params, "backbone.", "branch_b.");
    return n;
}

nn::Matrix BBNModel::logits(const nn::Matrix& Xa, const nn::Matrix& Xb, double alpha, BBNCache* cache) const {
    require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::precondition, "alpha must lie in [0, 1]");
    BBNCache local;
    BBNCache& c = cache ? *cache : local;
    c.alpha = two_branch() ? alpha : 1.0;
    c.Sa = standardizer.apply(params, Xa);
    const nn::Matrix Fa = branch_a.forward(params, c.Sa, &c.ca);
    if (two_branch()) {
        require(Xb.rows() == Xa.rows(), ErrorKind::precondition, "branch batches must have equal size");
        c.Sb = standardizer.apply(params, Xb);
        const nn::Matrix Fb = backbone_b().forward(params, c.Sb, &c.cb);
        c.Z = mix_features(Fa, Fb, params.view("proj_a.weight"), params.view("proj_b.weight"), c.alpha);
    } else {
        c.Z = Fa * params.view("proj_a.weight");
    }
    return head.logits(params, c.Z);
}

void BBNModel::backward(const BBNCache& c, const nn::Matrix& dlogits, std::span<double> grad) const {
    const nn::Matrix dZ = head.backward(params, c.Z, dlogits, grad);
    auto accumulate = [&](const char* proj, const nn::Mlp& net, const nn::MlpCache& cache, double w) {
        const auto& pb = params.block(proj);
        nn::MatrixMap gW(grad.data() + pb.offset, Eigen::Index(pb.rows), Eigen::Index(pb.cols));
        gW.noalias() += w * (cache.output.transpose() * dZ);
        const nn::Matrix dF = w * (dZ * params.view(pb).transpose());
        net.backward(params, cache, dF, grad);
    };
    accumulate("proj_a.weight", branch_a, c.ca, c.alpha);
    if (two_branch()) accumulate("proj_b.weight", backbone_b(), c.cb, 1.0 - c.alpha);
}

nn::Vector BBNModel::predict(const nn::Matrix& X) const {
    const nn::Matrix L = logits(X, X, arch.inference_alpha);
    nn::Vector p(L.rows());
    for (Eigen::Index i = 0; i < L.rows(); ++i) p(i) = nn::positive_probability(L(i, 0), L(i, 1));
    return p;
}

double BBNModel::predict_reference(std::span<const double> x) const {
    const auto& v = params.values();
    std::vector<double> s(x.size());
    standardizer.apply_reference(params, x, s);
    const std::size_t d_feat = arch.backbone.output_dim;
    const std::size_t dz = arch.d_z;
    std::vector<double> z(dz, 0.0);
    auto add_branch = [&](const nn::Mlp& net, const char* proj, double w) {
        std::vector<double> f(d_feat);
        net.forward_reference(params, s, f);
        const auto& pb = params.block(proj);
        for (std::size_t k = 0; k < dz; ++k) {
            double acc = 0.0;
            for (std::size_t i = 0; i < d_feat; ++i) acc += v[pb.offset + i * dz + k] * f[i];
            z[k] += w * acc;
        }
    };
    const double alpha = two_branch() ? arch.inference_alpha : 1.0;
    if (alpha != 0.0) add_branch(branch_a, "proj_a.weight", alpha);
    if (two_branch() && alpha != 1.0) add_branch(backbone_b(), "proj_b.weight", 1.0 - alpha);
    const auto& wb = params.block("classifier.weight");
    double logit[2];
    for (std::size_t c = 0; c < 2; ++c) {
        double dot = 0.0, norm2 = 0.0;
        for (std::size_t k = 0; k < dz; ++k) {
            const double w = v[wb.offset + c * dz + k];
            dot += w * z[k];
            norm2 += w * w;
        }
        if (arch.normalized)
            logit[c] = arch.temperature * dot / std::sqrt(norm2);
        else
            logit[c] = dot + v[params.block("classifier.bias").offset + c];
    }
    return nn::positive_probability(logit[0], logit[1]);
}

std::vector<double> BBNModel::predict_dataset(const LabeledDataset& ds, std::span<const std::uint32_t> indices) const {
    require(ds.input_dim() == input_dim(), ErrorKind::precondition, "dataset window does not match the classifier");
    return kernels::score(ds, indices, [this](const nn::Matrix& X, std::span<double> out) {
        const nn::Vector p = predict(X);
        std::copy(p.data(), p.data() + p.size(), out.begin());
    });
}

nlohmann::json BBNModel::architecture(const std::string& kind) const { return {{"kind", kind}, {"bbn", arch}}; }

ModelBundle BBNModel::to_bundle(const std::string& stage, const std::string& config_hash, nlohmann::json metrics) const {
    ModelBundle b;
    b.stage = stage;
    b.architecture = architecture();
    b.config_hash = config_hash;
    b.metrics = std::move(metrics);
    b.params = params;
    return b;
}

BBNModel BBNModel::from_bundle(const ModelBundle& bundle) {
    require(bundle.architecture.contains("bbn"), ErrorKind::integrity,
            "checkpoint does not hold a classifier (stage " + bundle.stage + ")");
    const auto a = bundle.architecture.at("bbn").get<BBNArchitecture>();
    BBNModel m(a.backbone.input_dim, a);
    require(m.params.same_layout(bundle.params), ErrorKind::integrity,
            "classifier parameter layout in checkpoint does not match its architecture");
    m.params = bundle.params;
    return m;
}

double AlphaSchedule::at(std::size_t epoch, std::size_t epochs) const {
    if (epochs <= 1) return alpha_max;
    const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
    const double a = alpha_min + (alpha_max - alpha_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
    return std::clamp(a, 0.0, 1.0);
}

void to_json(nlohmann::json& j, const Stage2Config& c) {
    const auto& t = c.training;
    j = nlohmann::json{{"arch", c.arch},
                       {"init_from_stage1", c.init_from_stage1},
                       {"sampler_a", to_string(t.mode_a)},
                       {"sampler_b", to_string(t.mode_b)},
                       {"gamma", t.gamma},
                       {"alpha_max", t.schedule.alpha_max},
                       {"alpha_min", t.schedule.alpha_min},
                       {"epochs", t.epochs},
                       {"steps_per_epoch", t.steps_per_epoch},
                       {"batch", t.batch},
                       {"lr", t.adam.lr},
                       {"weight_decay", t.adam.weight_decay},
                       {"val_every", t.val_every}};
}

void from_json(const nlohmann::json& j, Stage2Config& c) {
    if (j.contains("arch")) j.at("arch").get_to(c.arch);
    c.init_from_stage1 = j.value("init_from_stage1", c.init_from_stage1);
    auto& t = c.training;
    if (j.contains("sampler_a")) t.mode_a = sampler_mode_from_string(j.at("sampler_a").get<std::string>());
    if (j.contains("sampler_b")) t.mode_b = sampler_mode_from_string(j.at("sampler_b").get<std::string>());
    t.gamma = j.value("gamma", t.gamma);
    t.schedule.alpha_max = j.value("alpha_max", t.schedule.alpha_max);
    t.schedule.alpha_min = j.value("alpha_min", t.schedule.alpha_min);
    t.epochs = j.value("epochs", t.epochs);
    t.steps_per_epoch = j.value("steps_per_epoch", t.steps_per_epoch);
    t.batch = j.value("batch", t.batch);
    t.adam.lr = j.value("lr", t.adam.lr);
    t.adam.weight_decay = j.value("weight_decay", t.adam.weight_decay);
    t.val_every = j.value("val_every", t.val_every);
}

namespace {

std::vector<std::uint8_t> trainable_mask(const nn::ParamStore& params, const std::vector<std::string>& prefixes) {
    if (!prefixes.empty()) {
        auto m = params.mask(prefixes);
        require(std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; }), ErrorKind::config,
                "trainable scope matches no parameters");
        return m;
    }
    std::vector<std::string> all;
    for (const auto& b : params.blocks())
        if (b.name.rfind("input.", 0) != 0) all.push_back(b.name);
    return params.mask(all);
}

}  // namespace

TrainResult train_classifier(BBNModel model, const LabeledDataset& train, const LabeledDataset* val,
                             const ClassifierTraining& spec, std::uint64_t seed) {
    require(train.input_dim() == model.input_dim(), ErrorKind::precondition, "training data window mismatch");
    require(spec.batch > 0, ErrorKind::config, "batch must be positive");
    BranchSampler sa(train, spec.mode_a, derive_seed(seed, 0xA));
    BranchSampler sb(train, model.two_branch() ? spec.mode_b : spec.mode_a, derive_seed(seed, 0xB));
    nn::Adam adam(model.params.size(), spec.adam);
    const auto mask = trainable_mask(model.params, spec.trainable);
    const bool renormalize = model.arch.normalized;

    const std::size_t B = spec.batch;
    const std::size_t in = train.input_dim();
    nn::Matrix Xa(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(in));
    nn::Matrix Xb = Xa;
    std::vector<std::uint32_t> ia, ib;
    std::vector<int> ya(B), yb(B);
    std::vector<double> grad(model.params.size());
    nn::Matrix dlogits;
    BBNCache cache;

    TrainResult res;
    for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
        const double alpha = model.two_branch() ? spec.schedule.at(epoch, spec.epochs) : 1.0;
        EpochLog log;
        log.epoch = epoch;
        log.alpha = alpha;
        for (std::size_t step = 0; step < spec.steps_per_epoch; ++step) {
            sa.draw_batch(B, ia);
            train.fill_batch(std::span<const std::uint32_t>(ia), std::span<double>(Xa.data(), B * in));
            for (std::size_t k = 0; k < B; ++k) ya[k] = train.label(ia[k]);
            if (model.two_branch()) {
                sb.draw_batch(B, ib);
                train.fill_batch(std::span<const std::uint32_t>(ib), std::span<double>(Xb.data(), B * in));
                for (std::size_t k = 0; k < B; ++k) yb[k] = train.label(ib[k]);
            } else {
                yb = ya;
            }
            const nn::Matrix L = model.logits(Xa, Xb, alpha, &cache);
            const CombinedLoss loss = combined_loss(L, ya, yb, alpha, spec.gamma, &dlogits);
            if (!std::isfinite(loss.total)) {
                std::ostringstream msg;
                msg << "classifier training diverged at epoch " << epoch << " step " << step << " (loss "
                    << loss.total << ")";
                fail(ErrorKind::divergence, msg.str());
            }
            std::fill(grad.begin(), grad.end(), 0.0);
            model.backward(cache, dlogits, grad);
            adam.step(model.params.values(), grad, mask);
            if (renormalize) nn::normalize_classifier(model.params, model.head);
            log.loss_a += loss.loss_a;
            log.loss_b += loss.loss_b;
            log.combined += loss.total;
        }
        if (spec.steps_per_epoch > 0) {
            const double s = static_cast<double>(spec.steps_per_epoch);
            log.loss_a /= s;
            log.loss_b /= s;
            log.combined /= s;
        }
        const bool last = epoch + 1 == spec.epochs;
        if (val && spec.val_every > 0 && (epoch % spec.val_every == 0 || last) && !val->positives().empty() &&
            !val->negatives().empty()) {
            log.val_auc = roc_auc(model.predict_dataset(*val), dataset_labels(*val));
        }
        res.log.push_back(log);
    }
    res.model = std::move(model);
    return res;
}

TrainResult train_bbn(const LabeledDataset& survivors, const LabeledDataset* val, const FilterModel* init,
                      const Stage2Config& config, std::uint64_t seed) {
    require(!survivors.positives().empty() && !survivors.negatives().empty(), ErrorKind::precondition,
            "stage-2 training set holds a single class (" + std::to_string(survivors.positives().size()) +
                " positives, " + std::to_string(survivors.negatives().size()) +
                " negatives); stage 1 over-filtered the data, lower target_recall's threshold or retrain stage 1");
    BBNModel model(survivors.input_dim(), config.arch);
    Rng rng(derive_seed(seed, 0xB2));
    model.init(rng);
    if (init && config.init_from_stage1)
        model.init_from(*init);
    else
        model.fit_standardizer(survivors);
    return train_classifier(std::move(model), survivors, val, config.training, seed);
}

std::vector<double> predict_criticality_stage2(const BBNModel& model, const nn::Matrix& X) {
    const nn::Vector p = model.predict(X);
    return {p.data(), p.data() + p.size()};
}

}  // namespace crit
