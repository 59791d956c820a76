// patchwork command-line front end: data generation, training, evaluation,
// ablations, the context-recovery oracle and the latency benchmark.
//
// Exit codes: 0 success, 2 configuration error, 3 verification failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "patchwork/harness.hpp"

namespace {

using patchwork::ConfigError;
using patchwork::RunConfig;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitVerify = 3;

RunConfig load_config(const std::string& config_flag) {
    std::string path = config_flag;
    if (path.empty()) {
        if (const char* env = std::getenv("PATCHWORK_CONFIG")) path = env;
    }
    if (path.empty()) return RunConfig();
    return RunConfig::parse(patchwork::read_text_file(path));
}

void apply_overrides(RunConfig& cfg, const std::string& out_dir, const std::string& checkpoint,
                     int jobs) {
    if (!out_dir.empty()) cfg.set("out_dir", out_dir);
    if (!checkpoint.empty()) cfg.set("checkpoint", checkpoint);
    if (jobs > 0) cfg.set("jobs", std::to_string(jobs));
}

// --verify support: re-run the command into a scratch directory and compare
// every produced file byte for byte.
bool outputs_match(const std::string& dir_a, const std::string& dir_b) {
    namespace fs = std::filesystem;
    std::vector<std::string> rel;
    for (const auto& entry : fs::recursive_directory_iterator(dir_a))
        if (entry.is_regular_file())
            rel.push_back(fs::relative(entry.path(), dir_a).string());
    std::sort(rel.begin(), rel.end());
    for (const std::string& r : rel) {
        const fs::path pb = fs::path(dir_b) / r;
        if (!fs::exists(pb)) return false;
        if (patchwork::read_text_file((fs::path(dir_a) / r).string()) !=
            patchwork::read_text_file(pb.string()))
            return false;
    }
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"patchwork: streaming hard-attention inference and benchmark harness"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint;
    int jobs = 0;
    bool verify = false;
    app.add_option("--config", config_path, "path to a key = value config file");
    app.add_option("--out", out_dir, "override out_dir");
    app.add_option("--checkpoint", checkpoint, "override checkpoint directory");
    app.add_option("--jobs", jobs, "episode-level parallelism");
    app.add_flag("--verify", verify, "re-run and compare outputs byte for byte");

    const auto names = {"gen-data", "train", "eval", "ablate-cells", "oracle-check",
                        "bench-latency"};
    for (const char* name : names) app.add_subcommand(name);

    CLI11_PARSE(app, argc, argv);
    const std::string sub = app.get_subcommands().front()->get_name();

    const auto dispatch = [&](RunConfig& cfg) {
        const patchwork::harness::PrintFn print = [](const std::string& s) {
            std::cout << s << "\n";
        };
        if (sub == "gen-data")
            patchwork::harness::cmd_gen_data(cfg, print);
        else if (sub == "train")
            patchwork::harness::cmd_train(cfg, print);
        else if (sub == "eval")
            patchwork::harness::cmd_eval(cfg, print);
        else if (sub == "ablate-cells")
            patchwork::harness::cmd_ablate_cells(cfg, print);
        else if (sub == "oracle-check")
            patchwork::harness::cmd_oracle_check(cfg, print);
        else if (sub == "bench-latency")
            patchwork::harness::cmd_bench_latency(cfg, print);
    };

    try {
        RunConfig cfg = load_config(config_path);
        apply_overrides(cfg, out_dir, checkpoint, jobs);
        dispatch(cfg);
        if (verify) {
            RunConfig again = load_config(config_path);
            const std::string scratch = cfg.get("out_dir") + ".verify";
            apply_overrides(again, scratch, checkpoint, jobs);
            dispatch(again);
            if (!outputs_match(cfg.get("out_dir"), scratch)) {
                std::cerr << "verify: outputs differ between runs\n";
                return kExitVerify;
            }
            std::cout << "verify: outputs identical\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
