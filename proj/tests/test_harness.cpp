#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <map>

#include "patchwork/harness.hpp"

using namespace patchwork;
namespace fs = std::filesystem;

namespace {

fs::path temp_root(const char* tag) {
    const auto dir = fs::temp_directory_path() /
                     (std::string("patchwork_harness_") + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::map<std::string, std::string> read_tree(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir))
        if (entry.is_regular_file())
            files[fs::relative(entry.path(), dir).string()] = read_text_file(entry.path().string());
    return files;
}

// Small trained-free checkpoint for command-level tests.
std::string make_checkpoint(const fs::path& root) {
    ModelConfig mcfg;
    mcfg.frame_rows = 32;
    mcfg.frame_cols = 32;
    mcfg.blocks = {{1, 6, 1, 2}, {4, 8, 1, 2}};
    mcfg.hires_hidden = 8;
    mcfg.seg_hidden = 4;
    mcfg.pyr1_channels = 8;
    mcfg.pyr2_channels = 8;
    Rng rng(5);
    const StreamModel model = build_model(mcfg, rng);
    Rng qrng(7);
    const QNet qnet = make_attention_net(model, qrng);
    const std::string dir = (root / "ckpt").string();
    harness::checkpoint_from(model, &qnet).save(dir);
    return dir;
}

RunConfig small_cfg(const fs::path& out, const std::string& checkpoint = "") {
    RunConfig cfg;
    cfg.set("out_dir", out.string());
    cfg.set("frame_rows", "32");
    cfg.set("frame_cols", "32");
    cfg.set("episode_frames", "6");
    cfg.set("eval_episodes", "4");
    cfg.set("oracle_eval_episodes", "2");
    cfg.set("gen_episodes", "2");
    cfg.set("gen_frames", "3");
    if (!checkpoint.empty()) cfg.set("checkpoint", checkpoint);
    return cfg;
}

}  // namespace

TEST_CASE("gen-data writes frames, masks, boxes and a seed manifest") {
    const auto root = temp_root("gen");
    RunConfig cfg = small_cfg(root / "out");
    harness::cmd_gen_data(cfg);

    CHECK(fs::exists(root / "out" / "resolved.cfg"));
    CHECK(fs::exists(root / "out" / "manifest.txt"));
    CHECK(fs::exists(root / "out" / "episode_000" / "frame_000.ppm"));
    CHECK(fs::exists(root / "out" / "episode_000" / "mask_002.pgm"));
    const std::string boxes = read_text_file((root / "out" / "episode_000" / "boxes.txt").string());
    CHECK(std::count(boxes.begin(), boxes.end(), '\n') == 3);

    // frames decode back to the generated episode
    const std::string manifest = read_text_file((root / "out" / "manifest.txt").string());
    CHECK(manifest.find("multi") != std::string::npos);
    const Tensor frame = read_pnm((root / "out" / "episode_000" / "frame_001.ppm").string());
    CHECK(frame.rows == 32);
    CHECK(frame.channels == 3);
    fs::remove_all(root);
}

TEST_CASE("gen-data is byte-identical across runs with the same config") {
    const auto root = temp_root("gen_det");
    RunConfig cfg = small_cfg(root / "out");
    harness::cmd_gen_data(cfg);
    const auto first = read_tree(root / "out");
    fs::remove_all(root / "out");
    harness::cmd_gen_data(cfg);
    const auto second = read_tree(root / "out");
    REQUIRE(first.size() == second.size());
    for (const auto& [rel, content] : first) {
        REQUIRE(second.count(rel));
        CHECK(content == second.at(rel));
    }
    fs::remove_all(root);
}

TEST_CASE("eval command writes the policy comparison with the four Table-style rows") {
    const auto root = temp_root("eval");
    const std::string ckpt = make_checkpoint(root);
    RunConfig cfg = small_cfg(root / "out", ckpt);
    harness::cmd_eval(cfg);

    const std::string csv = read_text_file((root / "out" / "eval.csv").string());
    CHECK(csv.find("policy,max_mflops,avg_mflops,det_f,seg_miou") == 0);
    CHECK(csv.find("single-frame,") != std::string::npos);
    CHECK(csv.find("random,") != std::string::npos);
    CHECK(csv.find("scanning,") != std::string::npos);
    CHECK(csv.find("dqn,") != std::string::npos);
    fs::remove_all(root);
}

TEST_CASE("eval with --jobs produces the same bytes as a serial run") {
    const auto root = temp_root("eval_jobs");
    const std::string ckpt = make_checkpoint(root);
    RunConfig serial = small_cfg(root / "serial", ckpt);
    RunConfig parallel = small_cfg(root / "parallel", ckpt);
    parallel.set("jobs", "3");
    // out_dir differs between the two resolved configs; compare eval.csv only
    harness::cmd_eval(serial);
    harness::cmd_eval(parallel);
    CHECK(read_text_file((root / "serial" / "eval.csv").string()) ==
          read_text_file((root / "parallel" / "eval.csv").string()));
    fs::remove_all(root);
}

TEST_CASE("ablate-cells emits the two-policies-by-two-cells table") {
    const auto root = temp_root("ablate");
    const std::string ckpt = make_checkpoint(root);
    RunConfig cfg = small_cfg(root / "out", ckpt);
    harness::cmd_ablate_cells(cfg);
    const std::string csv = read_text_file((root / "out" / "ablation.csv").string());
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);  // header + 4 rows
    CHECK(csv.find("scanning,no,") != std::string::npos);
    CHECK(csv.find("scanning,yes,") != std::string::npos);
    CHECK(csv.find("dqn,no,") != std::string::npos);
    CHECK(csv.find("dqn,yes,") != std::string::npos);
    fs::remove_all(root);
}

TEST_CASE("oracle-check reports per-layer deviations and the task gap") {
    const auto root = temp_root("oracle");
    const std::string ckpt = make_checkpoint(root);
    RunConfig cfg = small_cfg(root / "out", ckpt);
    cfg.set("oracle_scans", "4");
    harness::cmd_oracle_check(cfg);
    const std::string csv = read_text_file((root / "out" / "oracle.csv").string());
    CHECK(csv.find("variant,scan,layer,mad") == 0);
    CHECK(csv.find("single_cell,0,0,") != std::string::npos);
    CHECK(csv.find("incremental,3,1,") != std::string::npos);
    CHECK(csv.find("task_gap,,,") != std::string::npos);
    fs::remove_all(root);
}

TEST_CASE("bench-latency builds the frontier from config variants") {
    const auto root = temp_root("bench");
    RunConfig cfg = RunConfig::parse(
        "frame_rows = 64\n"
        "frame_cols = 64\n"
        "variant = id=sf method=single-frame base=2047\n"
        "variant = id=sf_k4 method=single-frame base=2047 interval=4\n"
        "variant = id=sf_k4d3 method=single-frame base=2047 interval=4 delay=3\n"
        "variant = id=sf_k16d15 method=single-frame base=2047 interval=16 delay=15\n"
        "variant = id=pw21 method=patchwork attention=2,1 metric=54.3\n");
    cfg.set("out_dir", (root / "out").string());
    harness::cmd_bench_latency(cfg);

    const std::string csv = read_text_file((root / "out" / "frontier.csv").string());
    CHECK(csv.find("id,method,max_mflops,avg_mflops,metric,pareto") == 0);
    CHECK(csv.find("sf,single-frame,2047,2047") != std::string::npos);
    CHECK(csv.find("sf_k4,single-frame,2047,512") != std::string::npos);
    CHECK(csv.find("sf_k4d3,single-frame,512,128") != std::string::npos);
    CHECK(csv.find("sf_k16d15,single-frame,128,8") != std::string::npos);
    fs::remove_all(root);
}

TEST_CASE("bench-latency with no variants is a config error") {
    const auto root = temp_root("bench_err");
    RunConfig cfg;
    cfg.set("out_dir", (root / "out").string());
    CHECK_THROWS_AS(harness::cmd_bench_latency(cfg), ConfigError);
    fs::remove_all(root);
}

TEST_CASE("commands requiring a checkpoint reject configs without one") {
    const auto root = temp_root("nockpt");
    RunConfig cfg = small_cfg(root / "out");
    CHECK_THROWS_AS(harness::cmd_eval(cfg), ConfigError);
    CHECK_THROWS_AS(harness::cmd_ablate_cells(cfg), ConfigError);
    fs::remove_all(root);
}

TEST_CASE("every run writes its resolved configuration next to the outputs") {
    const auto root = temp_root("resolved");
    RunConfig cfg = small_cfg(root / "out");
    cfg.set("seed", "123");
    harness::cmd_gen_data(cfg);
    const std::string resolved = read_text_file((root / "out" / "resolved.cfg").string());
    CHECK(resolved.find("seed = 123") != std::string::npos);
    // reparsing the resolved config reproduces it
    CHECK(RunConfig::parse(resolved).resolved() == resolved);
    fs::remove_all(root);
}
