#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "crit/pipeline.hpp"
#include "helpers.hpp"

using namespace crit;
namespace fs = std::filesystem;

namespace {

nlohmann::json tiny_json() {
    return nlohmann::json::parse(R"({
      "data": {"train_episodes": 3000, "val_episodes": 3000, "test_episodes": 2000, "val_negative_keep": 0.2},
      "stage1": {"steps": 150, "batch_pairs": 64, "log_every": 25},
      "stage2": {"epochs": 2, "steps_per_epoch": 25, "batch": 64},
      "stage3": {"steps": 25, "batch": 64, "log_every": 5},
      "baselines": {"epochs": 1, "steps_per_epoch": 20, "batch": 64, "retrain_epochs": 1},
      "eval": {"baselines": ["cbs"]}
    })");
}

PipelineConfig tiny() { return PipelineConfig::from_json(tiny_json()); }

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::usage;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void run_all(const PipelineConfig& cfg, const std::string& out) {
    CommandOptions opt{out, false, {}};
    cmd_generate(cfg, opt);
    for (int s = 1; s <= 3; ++s) cmd_stage(cfg, s, opt);
    cmd_evaluate(cfg, opt);
}

}  // namespace

TEST_CASE("config parsing") {
    const auto d = PipelineConfig::defaults();
    CHECK(PipelineConfig::from_json(nlohmann::json::object()).hash() == d.hash());
    CHECK(PipelineConfig::from_json(d.to_json()).to_json() == d.to_json());
    CHECK(d.hash().size() == 16);

    auto j = nlohmann::json::object();
    j["seed"] = 2;
    CHECK(PipelineConfig::from_json(j).hash() != d.hash());

    CHECK(kind_of([] { PipelineConfig::from_json({{"bogus", 1}}); }) == ErrorKind::config);
    CHECK(kind_of([] { PipelineConfig::from_json({{"stage1", {{"stepz", 1}}}}); }) == ErrorKind::config);
    CHECK(kind_of([] { PipelineConfig::from_json({{"stage1", {{"target_recall", 1.5}}}}); }) == ErrorKind::config);
    CHECK(kind_of([] { PipelineConfig::from_json({{"data", {{"train_episodes", "many"}}}}); }) == ErrorKind::config);
    CHECK(kind_of([] { PipelineConfig::from_json({{"eval", {{"baselines", {"nope"}}}}}); }) == ErrorKind::config);

    testing::TempDir dir("cfg");
    std::ofstream(dir / "bad.json") << "{ not json";
    CHECK(kind_of([&] { load_config(dir / "bad.json"); }) == ErrorKind::config);
    CHECK(kind_of([&] { load_config(dir / "absent.json"); }) == ErrorKind::config);
    CHECK(load_config("").hash() == d.hash());
}

TEST_CASE("exit codes") {
    CHECK(exit_code(ErrorKind::config) == 2);
    CHECK(exit_code(ErrorKind::prerequisite) == 3);
    CHECK(exit_code(ErrorKind::divergence) == 4);
    CHECK(exit_code(ErrorKind::usage) == 1);
    CHECK(exit_code(ErrorKind::integrity) == 1);
}

TEST_CASE("stages refuse to run without their inputs") {
    testing::TempDir dir("prereq");
    const auto cfg = tiny();
    CommandOptions opt{dir.path.string(), false, {}};
    CHECK(kind_of([&] { cmd_stage(cfg, 1, opt); }) == ErrorKind::prerequisite);
    CHECK(kind_of([&] { cmd_stage(cfg, 3, opt); }) == ErrorKind::prerequisite);
    CHECK(kind_of([&] { cmd_evaluate(cfg, opt); }) == ErrorKind::prerequisite);
    CHECK(kind_of([&] { cmd_report(cfg, opt); }) == ErrorKind::prerequisite);
    CHECK(kind_of([&] { cmd_stage(cfg, 4, opt); }) != ErrorKind::prerequisite);
}

TEST_CASE("end to end run on a tiny config") {
    testing::TempDir a("e2e-a"), b("e2e-b");
    const auto cfg = tiny();
    const std::string hash = cfg.hash();
    run_all(cfg, a.path.string());

    for (const char* f : {"config.json", "data/train.jsonl", "data/train.jsonl.manifest.json", "data/val.jsonl",
                          "data/test.jsonl", "stage1/model.ckpt", "stage1/survivors.jsonl", "stage1/report.json",
                          "stage1/loss.csv", "stage2/model.ckpt", "stage2/epochs.csv", "stage3/model.ckpt",
                          "stage3/loss.csv", "eval/summary.json", "eval/roc.svg", "eval/pr.svg", "eval/report.md"})
        CHECK_MESSAGE(fs::exists(a.path / f), f);
    CHECK(slurp(a / "stage1/loss.csv").starts_with("# config_hash " + hash));

    const auto summary = nlohmann::json::parse(slurp(a / "eval/summary.json"));
    CHECK(summary.at("config_hash") == hash);
    const std::string table = cmd_report(cfg, {a.path.string(), false, {}});
    CHECK(table.find("stage2-cascade") != std::string::npos);
    CHECK(table.find("cbs") != std::string::npos);

    // An identical rerun is byte identical.
    run_all(cfg, b.path.string());
    for (const char* f : {"data/train.jsonl", "data/val.jsonl", "data/test.jsonl", "stage1/model.ckpt",
                          "stage1/loss.csv", "stage1/survivors.jsonl", "stage2/model.ckpt", "stage2/epochs.csv",
                          "stage3/model.ckpt", "stage3/loss.csv", "eval/roc_stage2-cascade.csv"}) {
        INFO(f);
        CHECK(sha256_file(a / f) == sha256_file(b / f));
    }

    // Outputs are not silently overwritten.
    CommandOptions opt{a.path.string(), false, {}};
    CHECK(kind_of([&] { cmd_generate(cfg, opt); }) == ErrorKind::usage);
    CHECK(kind_of([&] { cmd_stage(cfg, 2, opt); }) == ErrorKind::usage);

    // Artifacts written under another config are refused unless forced.
    auto other = cfg;
    other.seed = 99;
    fs::remove_all(a.path / "stage3");
    CHECK(kind_of([&] { cmd_stage(other, 3, opt); }) == ErrorKind::prerequisite);
    opt.force = true;
    CHECK_NOTHROW(cmd_stage(cfg, 3, opt));
    CHECK(sha256_file(a / "stage3/model.ckpt") == sha256_file(b / "stage3/model.ckpt"));
}
