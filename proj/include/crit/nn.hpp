#pragma once

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "crit/common.hpp"

namespace crit::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

struct ParamBlock {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const { return rows * cols; }
};

/// Flat parameter vector partitioned into named row-major blocks. Gradients,
/// optimizer state, fine-tuning masks and checkpoints all share this layout.
class ParamStore {
public:
    /// Appends a zero-initialized block; returns its offset.
    std::size_t add(std::string name, std::size_t rows, std::size_t cols);

    const std::vector<ParamBlock>& blocks() const { return blocks_; }
    const ParamBlock& block(std::string_view name) const;
    bool has(std::string_view name) const;

    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }
    std::size_t size() const { return values_.size(); }

    MatrixMap view(const ParamBlock& b) { return {values_.data() + b.offset, Eigen::Index(b.rows), Eigen::Index(b.cols)}; }
    ConstMatrixMap view(const ParamBlock& b) const {
        return {values_.data() + b.offset, Eigen::Index(b.rows), Eigen::Index(b.cols)};
    }
    MatrixMap view(std::string_view name) { return view(block(name)); }
    ConstMatrixMap view(std::string_view name) const { return view(block(name)); }

    /// 1 for every coordinate whose block name starts with one of `prefixes`.
    std::vector<std::uint8_t> mask(std::span<const std::string> prefixes) const;

    /// Same block names and shapes, in the same order.
    bool same_layout(const ParamStore& other) const;

    /// Copies every block of `src` whose name (after replacing `from_prefix`
    /// with `to_prefix`) exists here with the same shape. Returns the count.
    std::size_t copy_matching(const ParamStore& src, std::string_view from_prefix, std::string_view to_prefix);

private:
    std::vector<ParamBlock> blocks_;
    std::vector<double> values_;
};

enum class Activation { tanh, relu, identity };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

/// Architecture descriptor of a feed-forward encoder.
struct MlpSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden{32, 32};
    std::size_t output_dim = 32;
    Activation activation = Activation::tanh;
};

void to_json(nlohmann::json& j, const MlpSpec& s);
void from_json(const nlohmann::json& j, MlpSpec& s);

/// Xavier-uniform weights, zero biases.
void init_xavier(ParamStore& params, const ParamBlock& weight, Rng& rng);

/// Activations retained by a forward pass for the backward pass.
struct MlpCache {
    std::vector<Matrix> layer_inputs;  // input to each linear layer
    Matrix output;
};

/// Feed-forward backbone: hidden layers use `activation`, the output layer is
/// linear. Parameters live in a shared ParamStore under `prefix`.
class Mlp {
public:
    Mlp() = default;
    Mlp(MlpSpec spec, ParamStore& params, const std::string& prefix);

    const MlpSpec& spec() const { return spec_; }
    const std::string& prefix() const { return prefix_; }
    std::size_t layers() const { return weights_.size(); }

    void init(ParamStore& params, Rng& rng) const;

    Matrix forward(const ParamStore& params, const Matrix& X, MlpCache* cache = nullptr) const;

    /// Accumulates d(loss)/d(params) into `grad` given dY = d(loss)/d(output).
    /// Returns d(loss)/dX when `input_grad` is set, otherwise an empty matrix.
    Matrix backward(const ParamStore& params, const MlpCache& cache, const Matrix& dY, std::span<double> grad,
                    bool input_grad = false) const;

    /// Straight-line single-sample evaluation (no Eigen); the reference the
    /// batched kernels are checked against.
    void forward_reference(const ParamStore& params, std::span<const double> x, std::span<double> out) const;

    std::vector<std::string> weight_names() const;

private:
    MlpSpec spec_;
    std::string prefix_;
    std::vector<std::string> weights_;
    std::vector<std::string> biases_;
};

/// Per-coordinate affine standardization, stored as frozen parameter blocks
/// "<prefix>.mean" and "<prefix>.scale" so checkpoints carry it.
struct Standardizer {
    std::string prefix = "input";

    static void add_blocks(ParamStore& params, std::size_t dim, const std::string& prefix = "input");
    /// mean/scale per state dimension, tiled over the window.
    static void fit(ParamStore& params, std::span<const double> state_mean, std::span<const double> state_std,
                    std::size_t window_len, const std::string& prefix = "input");
    Matrix apply(const ParamStore& params, const Matrix& X) const;
    void apply_reference(const ParamStore& params, std::span<const double> x, std::span<double> out) const;
};

/// Linear map R^d -> R (with bias).
struct ScalarHead {
    std::string prefix = "head";

    static void add_blocks(ParamStore& params, std::size_t dim, const std::string& prefix = "head");
    Vector forward(const ParamStore& params, const Matrix& F) const;
    /// dF = dr * w^T ; accumulates weight/bias gradients.
    Matrix backward(const ParamStore& params, const Matrix& F, const Vector& dr, std::span<double> grad) const;
};

/// Two-class linear classifier. When `normalized`, logits are
/// temperature * (w_i / ||w_i||) . z with no bias; otherwise W z + b.
struct ClassifierHead {
    std::string prefix = "classifier";
    bool normalized = true;
    double temperature = 10.0;

    static void add_blocks(ParamStore& params, std::size_t dim, bool normalized, const std::string& prefix = "classifier");
    /// Effective (possibly normalized) weight rows.
    Matrix effective_weights(const ParamStore& params) const;
    Matrix logits(const ParamStore& params, const Matrix& Z) const;
    /// Accumulates parameter gradients for dlogits; returns dZ.
    Matrix backward(const ParamStore& params, const Matrix& Z, const Matrix& dlogits, std::span<double> grad) const;
};

/// Rescales every class weight row to unit Euclidean norm in place.
/// Throws ErrorKind::precondition on a zero-norm row.
void normalize_classifier(ParamStore& params, const ClassifierHead& head);

/// Positive-class probability of two-class logits (softmax).
double positive_probability(double logit_neg, double logit_pos);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class Adam {
public:
    Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

    /// Updates coordinates whose mask entry is non-zero (all when mask empty).
    void step(std::vector<double>& params, std::span<const double> grad, std::span<const std::uint8_t> mask = {});
    void set_lr(double lr) { cfg_.lr = lr; }

private:
    AdamConfig cfg_;
    std::vector<double> m_, v_;
    long t_ = 0;
};

/// Loss with optional analytic gradient (same layout as the parameters).
using LossFn = std::function<double(std::span<const double> params, std::vector<double>* grad)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    std::size_t worst_index = 0;
    bool finite = true;
};

/// Central finite differences against the analytic gradient over a random
/// subset of at least `min_coords` coordinates (all when fewer exist).
/// Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const LossFn& loss, std::span<const double> params, double eps, std::uint64_t seed,
                           std::size_t min_coords = 200, double floor = 1e-6);

}  // namespace crit::nn
