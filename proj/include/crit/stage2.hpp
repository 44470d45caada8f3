#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crit/checkpoint.hpp"
#include "crit/dataset.hpp"
#include "crit/nn.hpp"
#include "crit/stage1.hpp"

namespace crit {

enum class SamplerMode { class_balanced, uniform };

SamplerMode sampler_mode_from_string(const std::string& s);
std::string to_string(SamplerMode m);

/// Draws sample indices from a dataset view. Class-balanced mode picks a class
/// with probability 1/2 and then a sample uniformly within it; uniform mode
/// picks any sample with probability 1/|ds|.
class BranchSampler {
public:
    BranchSampler(const LabeledDataset& ds, SamplerMode mode, std::uint64_t seed);

    std::uint32_t draw();
    void draw_batch(std::size_t n, std::vector<std::uint32_t>& out);
    SamplerMode mode() const { return mode_; }

private:
    const LabeledDataset* ds_;
    SamplerMode mode_;
    Rng rng_;
};

/// Classifier architecture shared by the enhanced BBN and the baselines.
struct BBNArchitecture {
    nn::MlpSpec backbone;
    std::size_t d_z = 32;
    bool normalized = true;
    double temperature = 10.0;
    bool shared_backbone = false;  // one backbone feeds both branches
    int branches = 2;              // 1: single backbone + projection + classifier
    double inference_alpha = 0.5;
};

void to_json(nlohmann::json& j, const BBNArchitecture& a);
void from_json(const nlohmann::json& j, BBNArchitecture& a);

/// z = alpha * Fa Wa + (1 - alpha) * Fb Wb, rows are samples and W is
/// d_feat x d_z (so each row is alpha Wa^T f_a + (1 - alpha) Wb^T f_b).
nn::Matrix mix_features(const nn::Matrix& Fa, const nn::Matrix& Fb, const nn::Matrix& Wa, const nn::Matrix& Wb,
                        double alpha);

inline constexpr double kProbClamp = 1e-7;

/// -(1 - p_t)^gamma log p_t with p_t = p_pos (y = 1) or 1 - p_pos (y = 0),
/// p_t clamped to [1e-7, 1 - 1e-7].
double focal_loss(double p_pos, int y, double gamma);
double cross_entropy(double p_pos, int y);

struct CombinedLoss {
    double total = 0.0;
    double loss_a = 0.0;  // batch mean of the branch-a (focal) term
    double loss_b = 0.0;  // batch mean of the branch-b (cross-entropy) term
};

/// Batch mean of alpha * focal(p, y_a) + (1 - alpha) * CE(p, y_b), where p is
/// the positive probability of the single mixed logit row. Writes
/// d(total)/d(logits) into `dlogits` when given.
CombinedLoss combined_loss(const nn::Matrix& logits, std::span<const int> y_a, std::span<const int> y_b, double alpha,
                           double gamma, nn::Matrix* dlogits = nullptr);

struct BBNCache {
    nn::Matrix Sa, Sb;  // standardized inputs
    nn::MlpCache ca, cb;
    nn::Matrix Z;
    double alpha = 1.0;
};

class BBNModel {
public:
    BBNModel() = default;
    BBNModel(std::size_t input_dim, BBNArchitecture arch);

    BBNArchitecture arch;
    nn::ParamStore params;
    nn::Standardizer standardizer{"input"};
    nn::Mlp branch_a;
    nn::Mlp branch_b;  // unused when shared or single-branch
    nn::ClassifierHead head;

    std::size_t input_dim() const { return branch_a.spec().input_dim; }
    bool two_branch() const { return arch.branches == 2; }
    const nn::Mlp& backbone_b() const { return arch.shared_backbone ? branch_a : branch_b; }

    void init(Rng& rng);
    void fit_standardizer(const LabeledDataset& ds);
    /// Copies the stage-1 standardizer and backbone into every branch.
    /// Returns the number of blocks copied.
    std::size_t init_from(const FilterModel& stage1);

    /// Logits of the mixed feature (Xb ignored for a single branch).
    nn::Matrix logits(const nn::Matrix& Xa, const nn::Matrix& Xb, double alpha, BBNCache* cache = nullptr) const;
    /// Accumulates d(loss)/d(params) given d(loss)/d(logits).
    void backward(const BBNCache& cache, const nn::Matrix& dlogits, std::span<double> grad) const;

    /// Positive-class probability at the inference alpha with X in both branches.
    nn::Vector predict(const nn::Matrix& X) const;
    double predict_reference(std::span<const double> x) const;
    std::vector<double> predict_dataset(const LabeledDataset& ds, std::span<const std::uint32_t> indices = {}) const;

    nlohmann::json architecture(const std::string& kind = "bbn") const;
    ModelBundle to_bundle(const std::string& stage, const std::string& config_hash,
                          nlohmann::json metrics = nlohmann::json::object()) const;
    static BBNModel from_bundle(const ModelBundle& bundle);
};

/// Cosine decay from alpha_max (first epoch) to alpha_min (last epoch).
struct AlphaSchedule {
    double alpha_max = 1.0;
    double alpha_min = 0.0;
    double at(std::size_t epoch, std::size_t epochs) const;
};

struct ClassifierTraining {
    SamplerMode mode_a = SamplerMode::class_balanced;
    SamplerMode mode_b = SamplerMode::uniform;
    double gamma = 2.0;  // focal exponent of the branch-a term
    AlphaSchedule schedule;
    std::size_t epochs = 20;
    std::size_t steps_per_epoch = 200;
    std::size_t batch = 256;
    nn::AdamConfig adam{.lr = 1e-3};
    std::vector<std::string> trainable;  // block-name prefixes; empty = all but the input standardizer
    std::size_t val_every = 1;           // epochs between validation AUCs; 0 = never
};

struct Stage2Config {
    BBNArchitecture arch;
    ClassifierTraining training;
    bool init_from_stage1 = true;
};

void to_json(nlohmann::json& j, const Stage2Config& c);
void from_json(const nlohmann::json& j, Stage2Config& c);

struct EpochLog {
    std::size_t epoch = 0;
    double alpha = 0.0;
    double loss_a = 0.0;
    double loss_b = 0.0;
    double combined = 0.0;
    double val_auc = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
    BBNModel model;
    std::vector<EpochLog> log;
};

/// Runs `spec` on an already initialized model.
TrainResult train_classifier(BBNModel model, const LabeledDataset& train, const LabeledDataset* val,
                             const ClassifierTraining& spec, std::uint64_t seed);

/// Enhanced BBN on stage-1 survivors. `val` (optional) is scored every
/// val_every epochs; `init` seeds the backbones from the reward model.
TrainResult train_bbn(const LabeledDataset& survivors, const LabeledDataset* val, const FilterModel* init,
                      const Stage2Config& config, std::uint64_t seed);

std::vector<double> predict_criticality_stage2(const BBNModel& model, const nn::Matrix& X);

}  // namespace crit
