#include "crit/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "crit/checkpoint.hpp"

namespace fs = std::filesystem;

namespace crit {

namespace {

constexpr std::uint64_t kTrainStream = 101;
constexpr std::uint64_t kValStream = 102;
constexpr std::uint64_t kTestStream = 103;
constexpr std::uint64_t kValKeepStream = 104;
constexpr std::uint64_t kStage1Stream = 201;
constexpr std::uint64_t kStage2Stream = 202;
constexpr std::uint64_t kStage3Stream = 203;
constexpr std::uint64_t kBaselineStream = 204;

constexpr double kDefaultRarity = 1.27;
constexpr std::size_t kValBlock = 5000;

void say(const Logger& log, const std::string& msg) {
    if (log) log(msg);
}

// Every key of `user` must exist in `reference` (recursively through objects).
void check_known_keys(const nlohmann::json& user, const nlohmann::json& reference, const std::string& path) {
    if (!user.is_object()) return;
    require(reference.is_object(), ErrorKind::config, "config key " + path + " must not be an object");
    for (const auto& [key, value] : user.items()) {
        const std::string here = path.empty() ? key : path + "." + key;
        require(reference.contains(key), ErrorKind::config, "unknown config key " + here);
        if (value.is_object()) check_known_keys(value, reference.at(key), here);
    }
}

std::string fmt(double v, int precision = 6) {
    std::ostringstream s;
    s << std::setprecision(precision) << v;
    return s.str();
}

}  // namespace

// ---- config ----

PipelineConfig PipelineConfig::defaults() {
    PipelineConfig c;
    c.env = EnvConfig::standard(2);
    c.env.rarity_scale = kDefaultRarity;
    return c;
}

nlohmann::json PipelineConfig::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["env"] = env;
    j["data"] = {{"window_len", data.window_len},
                 {"train_episodes", data.train_episodes},
                 {"val_episodes", data.val_episodes},
                 {"test_episodes", data.test_episodes},
                 {"val_negative_keep", data.val_negative_keep}};
    j["stage1"] = stage1;
    j["stage2"] = stage2;
    j["stage3"] = stage3;
    j["baselines"] = baselines;
    j["eval"] = {{"baselines", eval.baselines},
                 {"calibration", eval.calibration},
                 {"curve_points", eval.curve_points},
                 {"histogram_bins", eval.histogram_bins}};
    return j;
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& user) {
    require(user.is_object(), ErrorKind::config, "config must be a JSON object");
    PipelineConfig base = defaults();
    if (user.contains("env") && user["env"].contains("state_dim") && user["env"]["state_dim"].is_number_integer()) {
        const int dim = user["env"]["state_dim"].get<int>();
        if (dim != base.env.state_dim && dim >= 1) {
            base.env = EnvConfig::standard(dim);
            base.env.rarity_scale = kDefaultRarity;
        }
    }
    nlohmann::json merged = base.to_json();
    check_known_keys(user, merged, "");
    merged.merge_patch(user);
    PipelineConfig c;
    try {
        c.seed = merged.at("seed").get<std::uint64_t>();
        merged.at("env").get_to(c.env);
        const auto& d = merged.at("data");
        c.data.window_len = d.at("window_len").get<int>();
        c.data.train_episodes = d.at("train_episodes").get<std::size_t>();
        c.data.val_episodes = d.at("val_episodes").get<std::size_t>();
        c.data.test_episodes = d.at("test_episodes").get<std::size_t>();
        c.data.val_negative_keep = d.at("val_negative_keep").get<double>();
        merged.at("stage1").get_to(c.stage1);
        merged.at("stage2").get_to(c.stage2);
        merged.at("stage3").get_to(c.stage3);
        merged.at("baselines").get_to(c.baselines);
        const auto& e = merged.at("eval");
        c.eval.baselines = e.at("baselines").get<std::vector<std::string>>();
        c.eval.calibration = e.at("calibration").get<bool>();
        c.eval.curve_points = e.at("curve_points").get<std::size_t>();
        c.eval.histogram_bins = e.at("histogram_bins").get<std::size_t>();
    } catch (const nlohmann::json::exception& ex) {
        fail(ErrorKind::config, std::string("invalid config value: ") + ex.what());
    } catch (const Error& ex) {
        fail(ErrorKind::config, ex.what());
    }
    c.validate();
    return c;
}

void PipelineConfig::validate() const {
    try {
        env.validate();
    } catch (const Error& ex) {
        fail(ErrorKind::config, ex.what());
    }
    require(data.window_len >= 1, ErrorKind::config, "data.window_len must be >= 1");
    require(data.train_episodes > 0 && data.val_episodes > 0 && data.test_episodes > 0, ErrorKind::config,
            "every split needs at least one episode");
    require(data.val_negative_keep > 0.0 && data.val_negative_keep <= 1.0, ErrorKind::config,
            "data.val_negative_keep must lie in (0, 1]");
    require(stage1.target_recall > 0.0 && stage1.target_recall <= 1.0, ErrorKind::config,
            "stage1.target_recall must lie in (0, 1]");
    require(stage1.batch_pairs > 0, ErrorKind::config, "stage1.batch_pairs must be positive");
    require(stage2.training.batch > 0 && stage2.training.epochs > 0, ErrorKind::config,
            "stage2 needs a positive batch and epoch count");
    require(stage2.arch.branches == 1 || stage2.arch.branches == 2, ErrorKind::config, "stage2.arch.branches must be 1 or 2");
    require(stage2.arch.inference_alpha >= 0.0 && stage2.arch.inference_alpha <= 1.0, ErrorKind::config,
            "inference_alpha must lie in [0, 1]");
    require(stage3.gamma >= 0.0 && stage3.gamma <= 1.0, ErrorKind::config, "stage3.gamma must lie in [0, 1]");
    require(!stage3.finetune_scope.empty(), ErrorKind::config, "stage3.finetune_scope is empty");
    require(stage3.target_sync_period > 0 && stage3.batch > 0, ErrorKind::config,
            "stage3 needs a positive batch and target_sync_period");
    for (const auto& b : eval.baselines)
        require(std::find(known_baselines().begin(), known_baselines().end(), b) != known_baselines().end(),
                ErrorKind::config, "unknown baseline " + b);
}

std::string PipelineConfig::hash() const { return sha256_hex(to_json().dump()).substr(0, 16); }

PipelineConfig load_config(const std::string& path) {
    if (path.empty()) return PipelineConfig::defaults();
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::config, "cannot read config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& ex) {
        fail(ErrorKind::config, "malformed config " + path + ": " + ex.what());
    }
    return PipelineConfig::from_json(j);
}

// ---- in-memory stages ----

LabeledDataset generate_split(const PipelineConfig& cfg, const std::string& split, const Logger& log) {
    BuildOptions opt;
    opt.split = split;
    opt.env = cfg.env;
    const int w = cfg.data.window_len;
    const int h = cfg.env.horizon_h;
    LabeledDataset ds;
    if (split == "train" || split == "test") {
        opt.seed = cfg.stream(split == "train" ? kTrainStream : kTestStream);
        const std::size_t n = split == "train" ? cfg.data.train_episodes : cfg.data.test_episodes;
        ds = build_dataset(generate_episodes(cfg.env, n, opt.seed), w, h, opt);
    } else if (split == "val") {
        // Every critical episode is kept, the rest with probability
        // val_negative_keep; the threshold calibration only reads positives.
        opt.seed = cfg.stream(kValStream);
        const std::uint64_t keep_seed = cfg.stream(kValKeepStream);
        std::vector<Episode> kept;
        std::size_t seen = 0;
        for (std::size_t first = 0; first < cfg.data.val_episodes; first += kValBlock) {
            const std::size_t count = std::min(kValBlock, cfg.data.val_episodes - first);
            auto block = generate_episode_range(cfg.env, first, count, opt.seed);
            for (std::size_t k = 0; k < block.size(); ++k) {
                Rng keep(derive_seed(keep_seed, first + k));
                if (block[k].critical || keep.uniform() < cfg.data.val_negative_keep) kept.push_back(std::move(block[k]));
            }
            seen += count;
        }
        say(log, "val: kept " + std::to_string(kept.size()) + " of " + std::to_string(seen) + " episodes");
        require(!kept.empty(), ErrorKind::precondition, "validation split kept no episodes");
        ds = build_dataset(std::move(kept), w, h, opt);
    } else {
        fail(ErrorKind::usage, "unknown split " + split);
    }
    ds.set_config_hash(cfg.hash());
    std::ostringstream msg;
    msg << split << ": " << ds.size() << " samples, |P| = " << ds.positives().size()
        << ", |N| = " << ds.negatives().size() << ", critical episodes = " << ds.manifest().critical_episodes;
    if (!ds.positives().empty()) msg << ", IR = " << fmt(imbalance_ratio(ds));
    say(log, msg.str());
    return ds;
}

Splits generate_splits(const PipelineConfig& cfg, const Logger& log) {
    Splits s;
    s.train = generate_split(cfg, "train", log);
    s.val = generate_split(cfg, "val", log);
    s.test = generate_split(cfg, "test", log);
    return s;
}

Stage1Outcome run_stage1(const PipelineConfig& cfg, const LabeledDataset& train, const LabeledDataset& val) {
    require(!train.positives().empty(), ErrorKind::precondition, "training split has no positives");
    require(!val.positives().empty(), ErrorKind::precondition,
            "validation split has no positives; the stage-1 threshold cannot be calibrated");
    auto res = train_reward_model(train, cfg.stage1, cfg.stream(kStage1Stream));
    Stage1Outcome out;
    out.model = std::move(res.model);
    out.log = std::move(res.log);
    const auto val_scores = out.model.score_dataset(val);
    std::vector<double> pos;
    pos.reserve(val.positives().size());
    for (auto i : val.positives()) pos.push_back(val_scores[i]);
    out.model.epsilon = calibrate_threshold(pos, cfg.stage1.target_recall);
    out.val_stats = filter_stats(val_scores, val, out.model.epsilon);
    auto fr = filter_dataset(out.model, train);
    out.train_stats = fr.stats;
    out.survivors = std::move(fr.survivors);
    out.survivors.set_config_hash(cfg.hash());
    out.train_scores = std::move(fr.scores);
    return out;
}

Stage2Outcome run_stage2(const PipelineConfig& cfg, const FilterModel& filter, const LabeledDataset& survivors,
                         const LabeledDataset& val) {
    require(filter.calibrated(), ErrorKind::prerequisite, "stage-1 filter is not calibrated");
    const auto val_filtered = filter_dataset(filter, val);
    const LabeledDataset* monitor = nullptr;
    if (!val_filtered.survivors.positives().empty() && !val_filtered.survivors.negatives().empty())
        monitor = &val_filtered.survivors;
    auto res = train_bbn(survivors, monitor, &filter, cfg.stage2, cfg.stream(kStage2Stream));
    return {std::move(res.model), std::move(res.log)};
}

Stage3Outcome run_stage3(const PipelineConfig& cfg, const BBNModel& stage2, const CriticalEpisodeIndex& index) {
    const auto replay = build_replay(index);
    Stage3Outcome out;
    out.replay_size = replay.size();
    out.balance = gradient_balance_report(replay, stage2, stage2, cfg.stage3.gamma);
    auto res = finetune(stage2, replay, cfg.stage3, cfg.stream(kStage3Stream));
    out.model = std::move(res.model);
    out.log = std::move(res.log);
    return out;
}

Evaluation run_evaluation(const PipelineConfig& cfg, const LabeledDataset& train, const LabeledDataset& val,
                          const LabeledDataset& test, const FilterModel& filter, const BBNModel& stage2,
                          const BBNModel* stage3, const Logger& log) {
    Evaluation ev;
    const auto labels = dataset_labels(test);
    const std::string split_hash = test.content_hash();
    const std::uint64_t seed = cfg.seed;

    auto t0 = std::chrono::steady_clock::now();
    ev.stage1_test_scores = filter.score_dataset(test);
    ev.test_filter = filter_stats(ev.stage1_test_scores, test, filter.epsilon);
    const double stage1_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    say(log, "test filter: removed " + fmt(ev.test_filter.removed_negative_rate) + " of negatives, retained " +
                 fmt(ev.test_filter.retained_positive_rate) + " of positives");

    std::vector<std::pair<std::string, std::vector<double>>> predictions;
    auto cascade = [&](const std::string& name, const BBNModel& m) {
        const auto t = std::chrono::steady_clock::now();
        CascadePredictor cp{&filter, &m};
        auto p = cp.predict_dataset(test, {}, &ev.stage1_test_scores);
        // Threshold 0 means "survived the filter": the calibrated cascade
        // decision point.
        MetricReport r = make_report(name, p, labels, 0.0);
        r.runtime_seconds = stage1_seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
        r.seed = seed;
        r.split_hash = split_hash;
        ev.reports.push_back(std::move(r));
        predictions.emplace_back(name, std::move(p));
    };
    cascade("stage2-cascade", stage2);
    if (stage3) cascade("stage3-cascade", *stage3);

    for (std::size_t k = 0; k < cfg.eval.baselines.size(); ++k) {
        const auto& name = cfg.eval.baselines[k];
        say(log, "training baseline " + name);
        const auto t = std::chrono::steady_clock::now();
        BaselineModel bm = train_baseline(name, train, &val, cfg.baselines, cfg.stream(kBaselineStream));
        auto p = bm.model.predict_dataset(test);
        MetricReport r = make_report(name, p, labels, cfg.baselines.decision_threshold);
        r.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
        r.seed = seed;
        r.split_hash = split_hash;
        ev.reports.push_back(std::move(r));
        ev.baseline_models.push_back(std::move(bm));
        predictions.emplace_back(name, std::move(p));
    }

    ev.calibration = nlohmann::json::object();
    if (!cfg.eval.calibration) {
        ev.calibration["skipped"] = "disabled in config";
        for (auto& r : ev.reports) r.calibration_note = "disabled in config";
        return ev;
    }
    const auto idx = critical_episode_samples(test);
    ev.calibration_states = idx.size();
    if (idx.empty()) {
        ev.calibration["skipped"] = "test split has no critical episodes";
        for (auto& r : ev.reports) r.calibration_note = "no critical-episode states";
        return ev;
    }
    std::vector<double> truth;
    try {
        truth = oracle_criticality(test, idx, cfg.env);
    } catch (const Error& ex) {
        if (ex.kind() != ErrorKind::budget) throw;
        ev.calibration["skipped"] = std::string("oracle unavailable: ") + ex.what();
        for (auto& r : ev.reports) r.calibration_note = "oracle unavailable";
        return ev;
    }
    ev.calibration["states"] = idx.size();
    for (std::size_t k = 0; k < predictions.size(); ++k) {
        std::vector<double> sub(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) sub[i] = predictions[k].second[idx[i]];
        const double err = calibration_error(sub, truth);
        ev.reports[k].calibration = err;
        ev.calibration[predictions[k].first] = err;
    }
    return ev;
}

const MetricReport* find_report(const Evaluation& ev, const std::string& name) {
    for (const auto& r : ev.reports)
        if (r.name == name) return &r;
    return nullptr;
}

int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::prerequisite: return 3;
    case ErrorKind::divergence: return 4;
    default: return 1;
    }
}

// ---- file-backed commands ----

namespace {

struct Layout {
    fs::path root;
    fs::path data() const { return root / "data"; }
    fs::path split(const std::string& s) const { return data() / (s + ".jsonl"); }
    fs::path critical_train() const { return data() / "critical_train.jsonl"; }
    fs::path stage(int k) const { return root / ("stage" + std::to_string(k)); }
    fs::path checkpoint(int k) const { return stage(k) / "model.ckpt"; }
    fs::path survivors() const { return stage(1) / "survivors.jsonl"; }
    fs::path eval() const { return root / "eval"; }
};

Layout layout(const CommandOptions& opt) {
    require(!opt.out_dir.empty(), ErrorKind::config, "--out is required");
    return {fs::path(opt.out_dir)};
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::integrity, "cannot write " + path.string());
    out << text;
    require(static_cast<bool>(out), ErrorKind::integrity, "write failed for " + path.string());
}

std::string csv_header(const std::string& hash) { return "# config_hash " + hash + "\n"; }

void prepare_dir(const fs::path& dir, const std::vector<fs::path>& outputs, bool force) {
    for (const auto& p : outputs)
        require(force || !fs::exists(p), ErrorKind::usage,
                p.string() + " already exists; pass --force to overwrite");
    fs::create_directories(dir);
}

void require_file(const fs::path& p, const std::string& producer) {
    require(fs::exists(p), ErrorKind::prerequisite,
            "missing " + p.string() + "; run `" + producer + "` first");
}

LabeledDataset load_split(const fs::path& p, const std::string& producer, const std::string& hash, bool force) {
    require_file(p, producer);
    const auto m = read_manifest(p.string());
    require(force || m.config_hash == hash, ErrorKind::prerequisite,
            p.string() + " was produced under config " + m.config_hash + " but the current config hashes to " + hash +
                "; rerun `" + producer + "` or pass --force");
    return load_dataset(p.string());
}

template <class Model>
Model load_model(const fs::path& p, const std::string& producer, const std::string& hash, bool force) {
    require_file(p, producer);
    const ModelBundle b = checkpoint_load(p.string(), {hash, true});
    require(force || b.config_hash == hash, ErrorKind::prerequisite,
            p.string() + " was produced under config " + b.config_hash + " but the current config hashes to " + hash +
                "; rerun `" + producer + "` or pass --force");
    return Model::from_bundle(b);
}

void save_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

}  // namespace

void cmd_generate(const PipelineConfig& cfg, const CommandOptions& opt) {
    const Layout L = layout(opt);
    const std::string hash = cfg.hash();
    prepare_dir(L.data(), {L.split("train"), L.split("val"), L.split("test"), L.critical_train()}, opt.force);
    fs::create_directories(L.root);
    save_json(L.root / "config.json", cfg.to_json());
    for (const std::string split : {"train", "val", "test"}) {
        const auto ds = generate_split(cfg, split, opt.log);
        save_dataset(ds, L.split(split).string());
        if (split == "train") {
            // Stage 3 reads only the critical episodes; keep them apart so it
            // does not reload the whole split.
            std::vector<std::size_t> eps;
            for (std::size_t e = 0; e < ds.store().critical.size(); ++e)
                if (ds.store().critical[e]) eps.push_back(e);
            auto crit = ds.episode_subset(eps, "critical_train");
            crit.set_config_hash(hash);
            save_dataset(crit, L.critical_train().string());
        }
    }
}

void cmd_stage(const PipelineConfig& cfg, int stage, const CommandOptions& opt) {
    const Layout L = layout(opt);
    const std::string hash = cfg.hash();
    const fs::path dir = L.stage(stage);
    if (stage == 1) {
        prepare_dir(dir, {L.checkpoint(1), L.survivors()}, opt.force);
        const auto train = load_split(L.split("train"), "generate", hash, opt.force);
        const auto val = load_split(L.split("val"), "generate", hash, opt.force);
        say(opt.log, "stage 1: training the reward model");
        auto out = run_stage1(cfg, train, val);
        nlohmann::json report{{"config_hash", hash},
                              {"epsilon", out.model.epsilon},
                              {"target_recall", cfg.stage1.target_recall},
                              {"threshold_rule",
                               "single threshold: a sample survives iff r > epsilon. Reports of a second, "
                               "higher threshold for the same filter are not reproduced."},
                              {"train", out.train_stats},
                              {"val", out.val_stats},
                              {"final_loss", out.log.empty() ? 0.0 : out.log.back().loss}};
        checkpoint_save(out.model.to_bundle(hash, report), L.checkpoint(1).string());
        save_dataset(out.survivors, L.survivors().string());
        save_json(dir / "report.json", report);
        std::string csv = csv_header(hash) + "step,loss\n";
        for (const auto& e : out.log) csv += std::to_string(e.step) + "," + fmt(e.loss, 17) + "\n";
        write_text(dir / "loss.csv", csv);
        say(opt.log, "stage 1: eps = " + fmt(out.model.epsilon) + ", removed " +
                         fmt(out.train_stats.removed_negative_rate) + " of train negatives, survivor IR = " +
                         fmt(out.train_stats.survivor_ir));
    } else if (stage == 2) {
        prepare_dir(dir, {L.checkpoint(2)}, opt.force);
        const auto filter = load_model<FilterModel>(L.checkpoint(1), "stage1", hash, opt.force);
        const auto survivors = load_split(L.survivors(), "stage1", hash, opt.force);
        const auto val = load_split(L.split("val"), "generate", hash, opt.force);
        say(opt.log, "stage 2: training the enhanced BBN on " + std::to_string(survivors.size()) + " survivors");
        auto out = run_stage2(cfg, filter, survivors, val);
        nlohmann::json epochs = nlohmann::json::array();
        std::string csv = csv_header(hash) + "epoch,alpha,loss_a,loss_b,combined,val_auc\n";
        for (const auto& e : out.log) {
            csv += std::to_string(e.epoch) + "," + fmt(e.alpha, 17) + "," + fmt(e.loss_a, 17) + "," +
                   fmt(e.loss_b, 17) + "," + fmt(e.combined, 17) + "," + fmt(e.val_auc, 17) + "\n";
        }
        const double last_auc = out.log.empty() ? std::nan("") : out.log.back().val_auc;
        nlohmann::json report{{"config_hash", hash},
                              {"survivors", survivors.size()},
                              {"epochs", out.log.size()},
                              {"final_val_auc", std::isfinite(last_auc) ? nlohmann::json(last_auc) : nlohmann::json()}};
        checkpoint_save(out.model.to_bundle("stage2", hash, report), L.checkpoint(2).string());
        save_json(dir / "report.json", report);
        write_text(dir / "epochs.csv", csv);
    } else if (stage == 3) {
        prepare_dir(dir, {L.checkpoint(3)}, opt.force);
        const auto model = load_model<BBNModel>(L.checkpoint(2), "stage2", hash, opt.force);
        const auto crit_train = load_split(L.critical_train(), "generate", hash, opt.force);
        const auto index = critical_episode_index(crit_train);
        say(opt.log, "stage 3: dense DQN over " + std::to_string(index.size()) + " critical episodes");
        auto out = run_stage3(cfg, model, index);
        const auto train_manifest = read_manifest(L.split("train").string());
        const double dataset_ir = train_manifest.n_pos == 0
                                      ? std::nan("")
                                      : static_cast<double>(train_manifest.n_neg) / static_cast<double>(train_manifest.n_pos);
        const auto& gb = out.balance;
        nlohmann::json report{{"config_hash", hash},
                              {"critical_episodes", index.size()},
                              {"replay", out.replay_size},
                              {"n_pos", gb.n_pos},
                              {"n_neg", gb.n_neg},
                              {"replay_ratio", gb.n_pos ? static_cast<double>(gb.n_neg) / static_cast<double>(gb.n_pos) : 0.0},
                              {"dataset_ir", std::isfinite(dataset_ir) ? nlohmann::json(dataset_ir) : nlohmann::json()},
                              {"grad_norm_pos", gb.grad_norm_pos},
                              {"grad_norm_neg", gb.grad_norm_neg},
                              {"identity_error", gb.identity_error}};
        checkpoint_save(out.model.to_bundle("stage3", hash, report), L.checkpoint(3).string());
        save_json(dir / "report.json", report);
        std::string csv = csv_header(hash) + "step,loss,n_pos,n_neg,grad_norm_pos,grad_norm_neg\n";
        for (const auto& e : out.log)
            csv += std::to_string(e.step) + "," + fmt(e.loss, 17) + "," + std::to_string(e.n_pos) + "," +
                   std::to_string(e.n_neg) + "," + fmt(e.grad_norm_pos, 17) + "," + fmt(e.grad_norm_neg, 17) + "\n";
        write_text(dir / "loss.csv", csv);
    } else {
        fail(ErrorKind::usage, "stage must be 1, 2 or 3");
    }
}

void cmd_evaluate(const PipelineConfig& cfg, const CommandOptions& opt) {
    const Layout L = layout(opt);
    const std::string hash = cfg.hash();
    const fs::path dir = L.eval();
    prepare_dir(dir, {dir / "summary.json"}, opt.force);
    const auto filter = load_model<FilterModel>(L.checkpoint(1), "stage1", hash, opt.force);
    const auto stage2 = load_model<BBNModel>(L.checkpoint(2), "stage2", hash, opt.force);
    std::optional<BBNModel> stage3;
    if (fs::exists(L.checkpoint(3)))
        stage3 = load_model<BBNModel>(L.checkpoint(3), "stage3", hash, opt.force);
    else
        say(opt.log, "no stage-3 checkpoint; evaluating stage 2 only");
    const auto test = load_split(L.split("test"), "generate", hash, opt.force);
    LabeledDataset train, val;
    if (!cfg.eval.baselines.empty()) {
        train = load_split(L.split("train"), "generate", hash, opt.force);
        val = load_split(L.split("val"), "generate", hash, opt.force);
    }
    const auto ev = run_evaluation(cfg, train, val, test, filter, stage2, stage3 ? &*stage3 : nullptr, opt.log);

    nlohmann::json summary{{"config_hash", hash},
                           {"seed", cfg.seed},
                           {"test_split_hash", test.content_hash()},
                           {"test_filter", ev.test_filter},
                           {"calibration", ev.calibration}};
    nlohmann::json models = nlohmann::json::array();
    for (const auto& r : ev.reports) models.push_back(summary_json(r));
    summary["models"] = models;
    if (!stage3) summary["skipped"] = {{"stage3-cascade", "no stage-3 checkpoint"}};
    save_json(dir / "summary.json", summary);

    const auto labels = dataset_labels(test);
    for (const auto& r : ev.reports) {
        write_text(dir / ("roc_" + r.name + ".csv"), csv_header(hash) + roc_csv(r, cfg.eval.curve_points));
        write_text(dir / ("pr_" + r.name + ".csv"), csv_header(hash) + pr_csv(r, cfg.eval.curve_points));
    }
    write_text(dir / "roc.svg", roc_svg(ev.reports));
    write_text(dir / "pr.svg", pr_svg(ev.reports));
    write_text(dir / "stage1_scores_hist.csv",
               csv_header(hash) + histogram_csv(ev.stage1_test_scores, labels, cfg.eval.histogram_bins));
    write_text(dir / "stage1_scores_hist.svg",
               histogram_svg(ev.stage1_test_scores, labels, cfg.eval.histogram_bins, "stage-1 reward scores (test)"));
    write_text(dir / "report.md", cmd_report(cfg, opt));
}

std::string cmd_report(const PipelineConfig& cfg, const CommandOptions& opt) {
    const Layout L = layout(opt);
    const fs::path p = L.eval() / "summary.json";
    require_file(p, "evaluate");
    nlohmann::json s;
    {
        std::ifstream in(p);
        try {
            in >> s;
        } catch (const nlohmann::json::exception& ex) {
            fail(ErrorKind::integrity, "malformed " + p.string() + ": " + ex.what());
        }
    }
    const std::string hash = cfg.hash();
    require(opt.force || s.value("config_hash", std::string()) == hash, ErrorKind::prerequisite,
            p.string() + " belongs to a different config; rerun `evaluate` or pass --force");

    std::ostringstream out;
    out << "# Evaluation report\n\nconfig hash `" << s.value("config_hash", std::string()) << "`, seed "
        << s.value("seed", 0ull) << ", test split `" << s.value("test_split_hash", std::string()).substr(0, 16)
        << "`\n\n";
    const auto& tf = s.at("test_filter");
    out << "Stage-1 filter on test: eps = " << fmt(tf.value("epsilon", 0.0)) << ", removed negatives "
        << fmt(100.0 * tf.value("removed_negative_rate", 0.0), 5) << "%, retained positives "
        << fmt(100.0 * tf.value("retained_positive_rate", 0.0), 5) << "%\n\n";
    out << "| model | AUC | AP | thr | pos id % | neg id % | F1-max thr | pos id % (F1) | neg id % (F1) | calib. MAE |\n";
    out << "|---|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& m : s.at("models")) {
        auto pct = [](const nlohmann::json& j, const char* k) { return fmt(100.0 * j.value(k, 0.0), 5); };
        const auto& rc = m.at("calibrated");
        const auto& rf = m.at("f1_max");
        out << "| " << m.value("name", std::string()) << " | " << fmt(m.value("auc", 0.0), 5) << " | "
            << fmt(m.value("average_precision", 0.0), 4) << " | " << fmt(rc.value("threshold", 0.0), 4) << " | "
            << pct(rc, "pos_rate") << " | " << pct(rc, "neg_rate") << " | " << fmt(rf.value("threshold", 0.0), 4)
            << " | " << pct(rf, "pos_rate") << " | " << pct(rf, "neg_rate") << " | ";
        if (m.contains("calibration_error") && m["calibration_error"].is_number())
            out << fmt(m["calibration_error"].get<double>(), 4);
        else
            out << "skipped";
        out << " |\n";
    }
    if (s.contains("skipped")) out << "\nSkipped: " << s["skipped"].dump() << "\n";
    out << "\nCascade rows use threshold 0 (a sample is positive iff it survives the stage-1 filter); "
           "baseline rows use their configured decision threshold.\n";
    return out.str();
}

}  // namespace crit
