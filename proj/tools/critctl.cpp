#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "crit/pipeline.hpp"

namespace {

struct Args {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    bool force = false;
};

void add_common(CLI::App* cmd, Args& a) {
    cmd->add_option("--config", a.config, "pipeline config (JSON); defaults when omitted");
    cmd->add_option("--out", a.out, "output directory")->required();
    cmd->add_option("--seed", a.seed, "override the global seed");
    cmd->add_flag("--force", a.force, "overwrite outputs and accept mismatched artifact hashes");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"critctl: criticality prediction pipeline"};
    app.require_subcommand(1, 1);
    Args args;
    auto* generate = app.add_subcommand("generate", "roll out episodes and write the train/val/test splits");
    auto* stage1 = app.add_subcommand("stage1", "train and calibrate the ranking-loss filter");
    auto* stage2 = app.add_subcommand("stage2", "train the enhanced BBN on stage-1 survivors");
    auto* stage3 = app.add_subcommand("stage3", "dense DQN fine-tuning on critical episodes");
    auto* evaluate = app.add_subcommand("evaluate", "compare cascades and baselines on the test split");
    auto* report = app.add_subcommand("report", "print the evaluation table");
    for (auto* c : {generate, stage1, stage2, stage3, evaluate, report}) add_common(c, args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        crit::PipelineConfig cfg = crit::load_config(args.config);
        if (args.seed) {
            cfg.seed = *args.seed;
            cfg.validate();
        }
        crit::CommandOptions opt;
        opt.out_dir = args.out;
        opt.force = args.force;
        opt.log = [](const std::string& m) { std::cerr << "[critctl] " << m << '\n'; };
        opt.log("config hash " + cfg.hash());

        if (*generate)
            crit::cmd_generate(cfg, opt);
        else if (*stage1)
            crit::cmd_stage(cfg, 1, opt);
        else if (*stage2)
            crit::cmd_stage(cfg, 2, opt);
        else if (*stage3)
            crit::cmd_stage(cfg, 3, opt);
        else if (*evaluate)
            crit::cmd_evaluate(cfg, opt);
        else if (*report)
            std::cout << crit::cmd_report(cfg, opt);
    } catch (const crit::Error& e) {
        std::cerr << "critctl: " << e.what() << '\n';
        return crit::exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "critctl: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
