#include "crit/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace crit::nn {

std::size_t ParamStore::add(std::string name, std::size_t rows, std::size_t cols) {
    require(!has(name), ErrorKind::usage, "duplicate parameter block " + name);
    const std::size_t offset = values_.size();
    blocks_.push_back({std::move(name), offset, rows, cols});
    values_.resize(offset + rows * cols, 0.0);
    return offset;
}

const ParamBlock& ParamStore::block(std::string_view name) const {
    for (const auto& b : blocks_)
        if (b.name == name) return b;
    fail(ErrorKind::usage, "unknown parameter block " + std::string(name));
}

bool ParamStore::has(std::string_view name) const {
    return std::any_of(blocks_.begin(), blocks_.end(), [&](const ParamBlock& b) { return b.name == name; });
}

std::vector<std::uint8_t> ParamStore::mask(std::span<const std::string> prefixes) const {
    std::vector<std::uint8_t> m(values_.size(), 0);
    for (const auto& b : blocks_) {
        const bool hit = std::any_of(prefixes.begin(), prefixes.end(),
                                     [&](const std::string& p) { return b.name.compare(0, p.size(), p) == 0; });
        if (hit) std::fill(m.begin() + static_cast<std::ptrdiff_t>(b.offset),
                           m.begin() + static_cast<std::ptrdiff_t>(b.offset + b.size()), 1);
    }
    return m;
}

bool ParamStore::same_layout(const ParamStore& other) const {
    if (blocks_.size() != other.blocks_.size()) return false;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const auto& a = blocks_[i];
        const auto& b = other.blocks_[i];
        if (a.name != b.name || a.rows != b.rows || a.cols != b.cols) return false;
    }
    return true;
}

std::size_t ParamStore::copy_matching(const ParamStore& src, std::string_view from_prefix, std::string_view to_prefix) {
    std::size_t copied = 0;
    for (const auto& sb : src.blocks()) {
        if (sb.name.compare(0, from_prefix.size(), from_prefix) != 0) continue;
        const std::string target = std::string(to_prefix) + sb.name.substr(from_prefix.size());
        if (!has(target)) continue;
        const auto& tb = block(target);
        if (tb.rows != sb.rows || tb.cols != sb.cols) continue;
        std::copy_n(src.values().begin() + static_cast<std::ptrdiff_t>(sb.offset), sb.size(),
                    values_.begin() + static_cast<std::ptrdiff_t>(tb.offset));
        ++copied;
    }
    return copied;
}

Activation activation_from_string(const std::string& name) {
    if (name == "tanh") return Activation::tanh;
    if (name == "relu") return Activation::relu;
    if (name == "identity") return Activation::identity;
    fail(ErrorKind::config, "unknown activation " + name);
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
        case Activation::identity: return "identity";
    }
    return "identity";
}

void to_json(nlohmann::json& j, const MlpSpec& s) {
    j = nlohmann::json{{"input_dim", s.input_dim},
                       {"hidden", s.hidden},
                       {"output_dim", s.output_dim},
                       {"activation", to_string(s.activation)}};
}

void from_json(const nlohmann::json& j, MlpSpec& s) {
    s.input_dim = j.value("input_dim", std::size_t{0});
    if (j.contains("hidden")) j.at("hidden").get_to(s.hidden);
    s.output_dim = j.value("output_dim", s.output_dim);
    s.activation = activation_from_string(j.value("activation", std::string("tanh")));
}

void init_xavier(ParamStore& params, const ParamBlock& weight, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(weight.rows + weight.cols));
    auto& v = params.values();
    for (std::size_t i = 0; i < weight.size(); ++i) v[weight.offset + i] = rng.uniform(-limit, limit);
}

namespace {

inline double activate(Activation a, double x) {
    switch (a) {
        case Activation::tanh: return std::tanh(x);
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::identity: return x;
    }
    return x;
}

// Derivative expressed through the activation output.
inline double activate_grad_from_output(Activation a, double y) {
    switch (a) {
        case Activation::tanh: return 1.0 - y * y;
        case Activation::relu: return y > 0.0 ? 1.0 : 0.0;
        case Activation::identity: return 1.0;
    }
    return 1.0;
}

}  // namespace

Mlp::Mlp(MlpSpec spec, ParamStore& params, const std::string& prefix) : spec_(std::move(spec)), prefix_(prefix) {
    require(spec_.input_dim > 0 && spec_.output_dim > 0, ErrorKind::config, "MLP dimensions must be positive");
    std::size_t in = spec_.input_dim;
    std::vector<std::size_t> widths = spec_.hidden;
    widths.push_back(spec_.output_dim);
    for (std::size_t l = 0; l < widths.size(); ++l) {
        const std::string w = prefix + ".l" + std::to_string(l) + ".weight";
        const std::string b = prefix + ".l" + std::to_string(l) + ".bias";
        params.add(w, widths[l], in);
        params.add(b, 1, widths[l]);
        weights_.push_back(w);
        biases_.push_back(b);
        in = widths[l];
    }
}

void Mlp::init(ParamStore& params, Rng& rng) const {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        init_xavier(params, params.block(weights_[l]), rng);
        params.view(biases_[l]).setZero();
    }
}

std::vector<std::string> Mlp::weight_names() const {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        out.push_back(weights_[l]);
        out.push_back(biases_[l]);
    }
    return out;
}

Matrix Mlp::forward(const ParamStore& params, const Matrix& X, MlpCache* cache) const {
    require(static_cast<std::size_t>(X.cols()) == spec_.input_dim, ErrorKind::precondition,
            "backbone input has " + std::to_string(X.cols()) + " columns, expected " + std::to_string(spec_.input_dim));
    if (cache) cache->layer_inputs.clear();
    Matrix A = X;
    const std::size_t L = weights_.size();
    for (std::size_t l = 0; l < L; ++l) {
        const auto W = params.view(weights_[l]);
        const auto b = params.view(biases_[l]);
        Matrix Z = A * W.transpose();
        Z.rowwise() += b.row(0);
        if (l + 1 < L) Z = Z.unaryExpr([a = spec_.activation](double x) { return activate(a, x); });
        if (cache) cache->layer_inputs.push_back(std::move(A));
        A = std::move(Z);
    }
    if (cache) cache->output = A;
    return A;
}

Matrix Mlp::backward(const ParamStore& params, const MlpCache& cache, const Matrix& dY, std::span<double> grad,
                     bool input_grad) const {
    const std::size_t L = weights_.size();
    Matrix dA = dY;
    for (std::size_t l = L; l-- > 0;) {
        Matrix dZ = dA;
        if (l + 1 < L) {
            const Matrix& out = cache.layer_inputs[l + 1];
            dZ = dA.cwiseProduct(out.unaryExpr([a = spec_.activation](double y) { return activate_grad_from_output(a, y); }));
        }
        const auto& wb = params.block(weights_[l]);
        const auto& bb = params.block(biases_[l]);
        MatrixMap gW(grad.data() + wb.offset, Eigen::Index(wb.rows), Eigen::Index(wb.cols));
        MatrixMap gb(grad.data() + bb.offset, 1, Eigen::Index(bb.cols));
        gW.noalias() += dZ.transpose() * cache.layer_inputs[l];
        gb += dZ.colwise().sum();
        if (l > 0 || input_grad) dA = dZ * params.view(wb);
    }
    return input_grad ? dA : Matrix();
}

void Mlp::forward_reference(const ParamStore& params, std::span<const double> x, std::span<double> out) const {
    require(x.size() == spec_.input_dim && out.size() == spec_.output_dim, ErrorKind::precondition,
            "reference forward dimension mismatch");
    std::vector<double> cur(x.begin(), x.end()), next;
    const auto& v = params.values();
    const std::size_t L = weights_.size();
    for (std::size_t l = 0; l < L; ++l) {
        const auto& wb = params.block(weights_[l]);
        const auto& bb = params.block(biases_[l]);
        next.assign(wb.rows, 0.0);
        for (std::size_t o = 0; o < wb.rows; ++o) {
            double acc = 0.0;
            for (std::size_t i = 0; i < wb.cols; ++i) acc += v[wb.offset + o * wb.cols + i] * cur[i];
            acc += v[bb.offset + o];
            next[o] = l + 1 < L ? activate(spec_.activation, acc) : acc;
        }
        cur.swap(next);
    }
    std::copy(cur.begin(), cur.end(), out.begin());
}

void Standardizer::add_blocks(ParamStore& params, std::size_t dim, const std::string& prefix) {
    params.add(prefix + ".mean", 1, dim);
    params.add(prefix + ".scale", 1, dim);
    params.view(prefix + ".scale").setOnes();
}

void Standardizer::fit(ParamStore& params, std::span<const double> state_mean, std::span<const double> state_std,
                       std::size_t window_len, const std::string& prefix) {
    auto mean = params.view(prefix + ".mean");
    auto scale = params.view(prefix + ".scale");
    const std::size_t d = state_mean.size();
    require(static_cast<std::size_t>(mean.cols()) == d * window_len, ErrorKind::usage, "standardizer width mismatch");
    for (std::size_t r = 0; r < window_len; ++r)
        for (std::size_t j = 0; j < d; ++j) {
            mean(0, Eigen::Index(r * d + j)) = state_mean[j];
            scale(0, Eigen::Index(r * d + j)) = state_std[j] > 1e-12 ? state_std[j] : 1.0;
        }
}

Matrix Standardizer::apply(const ParamStore& params, const Matrix& X) const {
    const auto mean = params.view(prefix + ".mean");
    const auto scale = params.view(prefix + ".scale");
    require(X.cols() == mean.cols(), ErrorKind::precondition, "input width does not match the standardizer");
    Matrix out = X.rowwise() - mean.row(0);
    out.array().rowwise() /= scale.row(0).array();
    return out;
}

void Standardizer::apply_reference(const ParamStore& params, std::span<const double> x, std::span<double> out) const {
    const auto& mb = params.block(prefix + ".mean");
    const auto& sb = params.block(prefix + ".scale");
    const auto& v = params.values();
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - v[mb.offset + i]) / v[sb.offset + i];
}

void ScalarHead::add_blocks(ParamStore& params, std::size_t dim, const std::string& prefix) {
    params.add(prefix + ".weight", 1, dim);
    params.add(prefix + ".bias", 1, 1);
}

Vector ScalarHead::forward(const ParamStore& params, const Matrix& F) const {
    const auto w = params.view(prefix + ".weight");
    const double b = params.view(prefix + ".bias")(0, 0);
    Vector r = F * w.row(0).transpose();
    r.array() += b;
    return r;
}

Matrix ScalarHead::backward(const ParamStore& params, const Matrix& F, const Vector& dr, std::span<double> grad) const {
    const auto& wb = params.block(prefix + ".weight");
    const auto& bb = params.block(prefix + ".bias");
    MatrixMap gw(grad.data() + wb.offset, 1, Eigen::Index(wb.cols));
    gw.row(0) += (F.transpose() * dr).transpose();
    grad[bb.offset] += dr.sum();
    return dr * params.view(wb).row(0);
}

void ClassifierHead::add_blocks(ParamStore& params, std::size_t dim, bool normalized, const std::string& prefix) {
    params.add(prefix + ".weight", 2, dim);
    if (!normalized) params.add(prefix + ".bias", 1, 2);
}

Matrix ClassifierHead::effective_weights(const ParamStore& params) const {
    Matrix W = params.view(prefix + ".weight");
    if (normalized) {
        for (Eigen::Index i = 0; i < W.rows(); ++i) {
            const double n = W.row(i).norm();
            require(n > 0.0, ErrorKind::precondition, "classifier weight row has zero norm");
            W.row(i) /= n;
        }
    }
    return W;
}

Matrix ClassifierHead::logits(const ParamStore& params, const Matrix& Z) const {
    const Matrix W = effective_weights(params);
    if (normalized) return temperature * (Z * W.transpose());
    Matrix out = Z * W.transpose();
    out.rowwise() += params.view(prefix + ".bias").row(0);
    return out;
}

Matrix ClassifierHead::backward(const ParamStore& params, const Matrix& Z, const Matrix& dlogits,
                                std::span<double> grad) const {
    const auto& wb = params.block(prefix + ".weight");
    MatrixMap gW(grad.data() + wb.offset, Eigen::Index(wb.rows), Eigen::Index(wb.cols));
    if (!normalized) {
        const auto W = params.view(wb);
        gW.noalias() += dlogits.transpose() * Z;
        const auto& bb = params.block(prefix + ".bias");
        MatrixMap gb(grad.data() + bb.offset, 1, 2);
        gb += dlogits.colwise().sum();
        return dlogits * W;
    }
    const auto W = params.view(wb);
    const Matrix What = effective_weights(params);
    const Matrix dWhat = temperature * (dlogits.transpose() * Z);
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
        const double n = W.row(i).norm();
        const double proj = What.row(i).dot(dWhat.row(i));
        gW.row(i) += (dWhat.row(i) - proj * What.row(i)) / n;
    }
    return temperature * (dlogits * What);
}

void normalize_classifier(ParamStore& params, const ClassifierHead& head) {
    auto W = params.view(head.prefix + ".weight");
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
        const double n = W.row(i).norm();
        require(n > 0.0, ErrorKind::precondition, "cannot normalize a zero-norm class weight");
        W.row(i) /= n;
    }
}

double positive_probability(double logit_neg, double logit_pos) {
    const double m = logit_pos - logit_neg;
    if (m >= 0.0) return 1.0 / (1.0 + std::exp(-m));
    const double e = std::exp(m);
    return e / (1.0 + e);
}

void Adam::step(std::vector<double>& params, std::span<const double> grad, std::span<const std::uint8_t> mask) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
        const double mh = m_[i] / c1;
        const double vh = v_[i] / c2;
        params[i] -= cfg_.lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * params[i]);
    }
}

GradCheckResult grad_check(const LossFn& loss, std::span<const double> params, double eps, std::uint64_t seed,
                           std::size_t min_coords, double floor) {
    GradCheckResult res;
    std::vector<double> theta(params.begin(), params.end());
    std::vector<double> analytic(theta.size(), 0.0);
    const double base = loss(theta, &analytic);
    if (!std::isfinite(base)) {
        res.finite = false;
        res.max_rel_error = std::numeric_limits<double>::infinity();
        return res;
    }
    std::vector<std::size_t> coords(theta.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > min_coords) {
        Rng rng(seed);
        shuffle(coords, rng);
        coords.resize(min_coords);
        std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
        const double orig = theta[i];
        theta[i] = orig + eps;
        const double up = loss(theta, nullptr);
        theta[i] = orig - eps;
        const double down = loss(theta, nullptr);
        theta[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            res.finite = false;
            res.max_rel_error = std::numeric_limits<double>::infinity();
            res.worst_index = i;
            break;
        }
        const double numeric = (up - down) / (2.0 * eps);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
        const double rel = std::abs(analytic[i] - numeric) / denom;
        if (rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_index = i;
        }
    }
    res.coordinates = coords.size();
    return res;
}

}  // namespace crit::nn
