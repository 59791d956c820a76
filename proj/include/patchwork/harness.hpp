#pragma once

// Command implementations behind the CLI: data generation, training,
// policy evaluation, cell ablation, context-recovery oracle and the latency
// benchmark. Everything is a library function so tests can drive commands
// without spawning processes.

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <thread>

#include "patchwork/config.hpp"
#include "patchwork/dqn.hpp"
#include "patchwork/io.hpp"
#include "patchwork/latency.hpp"
#include "patchwork/train.hpp"

namespace patchwork {

namespace harness {

inline ModelConfig model_config_from(const RunConfig& cfg) {
    ModelConfig m;
    m.frame_rows = cfg.get_int("frame_rows");
    m.frame_cols = cfg.get_int("frame_cols");
    m.space = ActionSpace(cfg.get_int("action_m"), cfg.get_int("action_n"));
    m.tap_layer = cfg.get_int("tap_layer");
    m.history_decay = static_cast<float>(cfg.get_double("history_alpha"));
    return m;
}

inline SceneConfig scene_config_from(const RunConfig& cfg) {
    SceneConfig s;
    s.frame_rows = cfg.get_int("frame_rows");
    s.frame_cols = cfg.get_int("frame_cols");
    s.episode_frames = cfg.get_int("episode_frames");
    s.pan_scan_fraction = cfg.get_double("pan_scan_fraction");
    s.pan_scan_sigma = cfg.get_double("speed_sigma");
    return s;
}

inline TrainConfig train_config_from(const RunConfig& cfg) {
    TrainConfig t;
    t.stage1_iters = cfg.get_int("stage1_iters");
    t.stage1_batch = cfg.get_int("stage1_batch");
    t.lr_stage1 = cfg.get_double("lr_stage1");
    t.grad_clip = cfg.get_double("grad_clip");
    t.momentum = cfg.get_double("momentum");
    t.calib_frames = cfg.get_int("calib_frames");
    t.stage2_episodes = cfg.get_int("stage2_episodes");
    t.stage3_episodes = cfg.get_int("stage3_episodes");
    t.lr_stage3 = cfg.get_double("lr_stage3");
    t.seed = cfg.get_u64("seed");
    t.trainer.gamma = cfg.get_double("gamma");
    t.trainer.lr = cfg.get_double("lr_stage2");
    t.trainer.target_sync = cfg.get_int("target_sync");
    t.trainer.epsilon_start = cfg.get_double("epsilon_start");
    t.trainer.epsilon_end = cfg.get_double("epsilon_end");
    t.trainer.epsilon_decay_steps = cfg.get_int("epsilon_decay_steps");
    t.trainer.replay_capacity = cfg.get_int("replay_capacity");
    t.trainer.batch_size = cfg.get_int("batch_size");
    t.trainer.train_every = cfg.get_int("train_every");
    t.trainer.warmup = cfg.get_int("warmup");
    try {
        t.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return t;
}

// ---- model/qnet checkpointing (PWT1 tensors + text manifest) ----

inline Tensor flat_tensor(const std::vector<float>& v) {
    Tensor t(1, 1, static_cast<int>(v.size()));
    t.data = v;
    return t;
}

inline void load_flat(const Checkpoint& ck, const std::string& name, std::vector<float>& into) {
    const Tensor& t = ck.get(name);
    if (t.data.size() != into.size())
        throw std::runtime_error("checkpoint tensor '" + name + "' has size " +
                                 std::to_string(t.data.size()) + ", expected " +
                                 std::to_string(into.size()));
    into = t.data;
}

inline std::string layer_key(std::size_t l, const char* part) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "layer%02zu.%s", l, part);
    return buf;
}

inline Checkpoint checkpoint_from(const StreamModel& model, const QNet* qnet) {
    Checkpoint ck;
    const ModelConfig& cfg = model.cfg;
    ck.put_meta("frame_rows", std::to_string(cfg.frame_rows));
    ck.put_meta("frame_cols", std::to_string(cfg.frame_cols));
    ck.put_meta("action_m", std::to_string(cfg.space.m));
    ck.put_meta("action_n", std::to_string(cfg.space.n));
    ck.put_meta("tap_layer", std::to_string(cfg.tap_layer));
    ck.put_meta("history_alpha", std::to_string(cfg.history_decay));
    std::ostringstream blocks;
    for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
        const BlockSpec& b = cfg.blocks[i];
        if (i) blocks << ";";
        blocks << b.expansion << "," << b.out_channels << "," << b.repeats << "," << b.stride;
    }
    ck.put_meta("blocks", blocks.str());
    ck.put_meta("hires_hidden", std::to_string(cfg.hires_hidden));
    ck.put_meta("seg_hidden", std::to_string(cfg.seg_hidden));
    ck.put_meta("pyr1_channels", std::to_string(cfg.pyr1_channels));
    ck.put_meta("pyr2_channels", std::to_string(cfg.pyr2_channels));
    ck.put_meta("anchor_scale", std::to_string(cfg.anchor_scale));

    auto put_conv = [&](const std::string& key, const ConvWeights& w) {
        ck.put(key + ".w", flat_tensor(w.values));
        ck.put(key + ".b", flat_tensor(w.bias));
    };
    auto put_norm = [&](const std::string& key, const ChannelAffine& a) {
        ck.put(key + ".scale", flat_tensor(a.scale));
        ck.put(key + ".shift", flat_tensor(a.shift));
    };
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const BottleneckLayer& layer = model.layers[l];
        if (layer.has_expand) {
            put_conv(layer_key(l, "expand"), layer.expand);
            put_norm(layer_key(l, "expand_norm"), layer.expand_norm);
        }
        put_conv(layer_key(l, "dw"), layer.dw);
        put_norm(layer_key(l, "dw_norm"), layer.dw_norm);
        put_conv(layer_key(l, "project"), layer.project);
        put_norm(layer_key(l, "project_norm"), layer.project_norm);
    }
    if (model.hires_head.has_hidden) put_conv("hires.hidden", model.hires_head.hidden);
    put_conv("hires.out", model.hires_head.out);
    put_conv("restored.out", model.restored_head.out);
    put_conv("pyr1.dw", model.pyr1.dw);
    put_norm("pyr1.dw_norm", model.pyr1.dw_norm);
    put_conv("pyr1.pw", model.pyr1.pw);
    put_norm("pyr1.pw_norm", model.pyr1.pw_norm);
    put_conv("pyr2.dw", model.pyr2.dw);
    put_norm("pyr2.dw_norm", model.pyr2.dw_norm);
    put_conv("pyr2.pw", model.pyr2.pw);
    put_norm("pyr2.pw_norm", model.pyr2.pw_norm);
    put_conv("pyr1_head.out", model.pyr1_head.out);
    put_conv("pyr2_head.out", model.pyr2_head.out);
    put_conv("seg.hidden", model.seg.hidden);
    put_conv("seg.out", model.seg.out);

    if (qnet) {
        ck.put_meta("qnet", "1");
        put_conv("qnet.conv1", qnet->conv1);
        put_conv("qnet.conv2", qnet->conv2);
        ck.put("qnet.dense.w", flat_tensor(qnet->dense_w));
        ck.put("qnet.dense.b", flat_tensor(qnet->dense_b));
    }
    return ck;
}

struct LoadedCheckpoint {
    StreamModel model;
    QNet qnet;
    bool has_qnet = false;
};

inline LoadedCheckpoint restore_checkpoint(const Checkpoint& ck) {
    ModelConfig cfg;
    cfg.frame_rows = std::stoi(ck.meta("frame_rows"));
    cfg.frame_cols = std::stoi(ck.meta("frame_cols"));
    cfg.space = ActionSpace(std::stoi(ck.meta("action_m")), std::stoi(ck.meta("action_n")));
    cfg.tap_layer = std::stoi(ck.meta("tap_layer"));
    cfg.history_decay = std::stof(ck.meta("history_alpha"));
    cfg.blocks.clear();
    std::istringstream blocks(ck.meta("blocks"));
    std::string one;
    while (std::getline(blocks, one, ';')) {
        BlockSpec b;
        if (std::sscanf(one.c_str(), "%d,%d,%d,%d", &b.expansion, &b.out_channels, &b.repeats,
                        &b.stride) != 4)
            throw std::runtime_error("checkpoint: malformed blocks meta");
        cfg.blocks.push_back(b);
    }
    cfg.hires_hidden = std::stoi(ck.meta("hires_hidden"));
    cfg.seg_hidden = std::stoi(ck.meta("seg_hidden"));
    cfg.pyr1_channels = std::stoi(ck.meta("pyr1_channels"));
    cfg.pyr2_channels = std::stoi(ck.meta("pyr2_channels"));
    cfg.anchor_scale = std::stod(ck.meta("anchor_scale"));

    LoadedCheckpoint out;
    Rng rng(0);  // skeleton only; every weight is overwritten below
    out.model = build_model(cfg, rng);

    auto get_conv = [&](const std::string& key, ConvWeights& w) {
        load_flat(ck, key + ".w", w.values);
        load_flat(ck, key + ".b", w.bias);
    };
    auto get_norm = [&](const std::string& key, ChannelAffine& a) {
        load_flat(ck, key + ".scale", a.scale);
        load_flat(ck, key + ".shift", a.shift);
    };
    for (std::size_t l = 0; l < out.model.layers.size(); ++l) {
        BottleneckLayer& layer = out.model.layers[l];
        if (layer.has_expand) {
            get_conv(layer_key(l, "expand"), layer.expand);
            get_norm(layer_key(l, "expand_norm"), layer.expand_norm);
        }
        get_conv(layer_key(l, "dw"), layer.dw);
        get_norm(layer_key(l, "dw_norm"), layer.dw_norm);
        get_conv(layer_key(l, "project"), layer.project);
        get_norm(layer_key(l, "project_norm"), layer.project_norm);
    }
    if (out.model.hires_head.has_hidden) get_conv("hires.hidden", out.model.hires_head.hidden);
    get_conv("hires.out", out.model.hires_head.out);
    get_conv("restored.out", out.model.restored_head.out);
    get_conv("pyr1.dw", out.model.pyr1.dw);
    get_norm("pyr1.dw_norm", out.model.pyr1.dw_norm);
    get_conv("pyr1.pw", out.model.pyr1.pw);
    get_norm("pyr1.pw_norm", out.model.pyr1.pw_norm);
    get_conv("pyr2.dw", out.model.pyr2.dw);
    get_norm("pyr2.dw_norm", out.model.pyr2.dw_norm);
    get_conv("pyr2.pw", out.model.pyr2.pw);
    get_norm("pyr2.pw_norm", out.model.pyr2.pw_norm);
    get_conv("pyr1_head.out", out.model.pyr1_head.out);
    get_conv("pyr2_head.out", out.model.pyr2_head.out);
    get_conv("seg.hidden", out.model.seg.hidden);
    get_conv("seg.out", out.model.seg.out);

    if (ck.has_meta("qnet")) {
        out.has_qnet = true;
        Rng qrng(0);
        out.qnet = make_attention_net(out.model, qrng);
        get_conv("qnet.conv1", out.qnet.conv1);
        get_conv("qnet.conv2", out.qnet.conv2);
        load_flat(ck, "qnet.dense.w", out.qnet.dense_w);
        load_flat(ck, "qnet.dense.b", out.qnet.dense_b);
    }
    return out;
}

inline LoadedCheckpoint load_checkpoint_dir(const std::string& dir) {
    return restore_checkpoint(Checkpoint::load(dir));
}

// ---- shared output helpers ----

inline void write_resolved_config(const RunConfig& cfg, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    write_text_file((std::filesystem::path(out_dir) / "resolved.cfg").string(), cfg.resolved());
}

inline std::string format_boxes_line(const std::vector<Box>& boxes, bool with_score) {
    std::ostringstream out;
    char buf[96];
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const Box& b = boxes[i];
        if (with_score)
            std::snprintf(buf, sizeof(buf), "%.6f %.6f %.6f %.6f %.4f", b.ymin, b.xmin, b.ymax,
                          b.xmax, b.score);
        else
            std::snprintf(buf, sizeof(buf), "%.6f %.6f %.6f %.6f", b.ymin, b.xmin, b.ymax, b.xmax);
        if (i) out << " ";
        out << buf;
    }
    return out.str();
}

// Runs fn(episode_index) over [0, count) on `jobs` threads; results land in
// an index-addressed vector so the merge order never depends on scheduling.
template <typename T>
std::vector<T> parallel_by_index(int count, int jobs, const std::function<T(int)>& fn) {
    std::vector<T> results(static_cast<std::size_t>(count));
    if (jobs <= 1) {
        for (int i = 0; i < count; ++i) results[static_cast<std::size_t>(i)] = fn(i);
        return results;
    }
    std::atomic<int> next{0};
    auto worker = [&]() {
        while (true) {
            const int i = next.fetch_add(1);
            if (i >= count) return;
            results[static_cast<std::size_t>(i)] = fn(i);
        }
    };
    std::vector<std::thread> pool;
    for (int j = 0; j < std::min(jobs, count); ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    return results;
}

// ---- commands ----

using PrintFn = std::function<void(const std::string&)>;

inline void cmd_gen_data(const RunConfig& cfg, const PrintFn& print = nullptr) {
    namespace fs = std::filesystem;
    const std::string out_dir = cfg.get("out_dir");
    write_resolved_config(cfg, out_dir);
    const Scenario scenario = parse_scenario(cfg.get("gen_scenario"));
    const int episodes = cfg.get_int("gen_episodes");
    const int frames = cfg.get_int("gen_frames");
    const int objects = cfg.get_int("gen_objects");
    const std::uint64_t seed = cfg.get_u64("seed");

    std::ostringstream manifest;
    manifest << "# episode seed scenario objects frames\n";
    for (int e = 0; e < episodes; ++e) {
        const std::uint64_t ep_seed = mix_seed(seed, static_cast<std::uint64_t>(e));
        const Episode ep = moving_shapes_scene(ep_seed, frames, objects, cfg.get_int("frame_rows"),
                                               cfg.get_int("frame_cols"), scenario);
        char name[32];
        std::snprintf(name, sizeof(name), "episode_%03d", e);
        const fs::path dir = fs::path(out_dir) / name;
        fs::create_directories(dir);
        std::ostringstream boxes;
        for (std::size_t t = 0; t < ep.frames.size(); ++t) {
            char frame_name[32];
            std::snprintf(frame_name, sizeof(frame_name), "frame_%03zu.ppm", t);
            write_ppm((dir / frame_name).string(), ep.frames[t]);
            std::snprintf(frame_name, sizeof(frame_name), "mask_%03zu.pgm", t);
            Tensor gray(ep.gt_masks[t].rows, ep.gt_masks[t].cols, 1);
            for (std::size_t i = 0; i < gray.data.size(); ++i)
                gray.data[i] = ep.gt_masks[t].data[i] ? 1.0f : 0.0f;
            write_pgm((dir / frame_name).string(), gray);
            boxes << format_boxes_line(ep.gt_boxes[t], false) << "\n";
        }
        write_text_file((dir / "boxes.txt").string(), boxes.str());
        manifest << e << " " << ep_seed << " " << scenario_name(scenario) << " " << objects << " "
                 << frames << "\n";
    }
    write_text_file((fs::path(out_dir) / "manifest.txt").string(), manifest.str());
    if (print) print("wrote " + std::to_string(episodes) + " episodes to " + out_dir);
}

inline void cmd_train(const RunConfig& cfg, const PrintFn& print = nullptr) {
    namespace fs = std::filesystem;
    const std::string out_dir = cfg.get("out_dir");
    write_resolved_config(cfg, out_dir);
    const ModelConfig mcfg = model_config_from(cfg);
    const SceneConfig scenes = scene_config_from(cfg);
    const TrainConfig tcfg = train_config_from(cfg);

    const TrainProgressFn progress = [&](const std::string& stage, const TrainLogRow& row) {
        if (!print) return;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s step=%ld eps=%.3f reward=%.4f loss=%.5f eval=%.4f",
                      stage.c_str(), row.step, row.epsilon, row.mean_episode_reward, row.td_loss,
                      row.eval_metric);
        print(buf);
    };
    const TrainedBundle bundle = train_three_stage(mcfg, scenes, tcfg, progress);

    checkpoint_from(bundle.model, &bundle.qnet).save((fs::path(out_dir) / "checkpoint").string());

    std::ostringstream csv;
    csv << "step,epsilon,mean_episode_reward,td_loss,eval_metric\n";
    char buf[160];
    for (const TrainLogRow& row : bundle.log) {
        std::snprintf(buf, sizeof(buf), "%ld,%.4f,%.6f,%.6f,%.6f\n", row.step, row.epsilon,
                      row.mean_episode_reward, row.td_loss, row.eval_metric);
        csv << buf;
    }
    write_text_file((fs::path(out_dir) / "training_log.csv").string(), csv.str());
    if (print) print("checkpoint written to " + out_dir + "/checkpoint");
}

struct PolicyEvalRow {
    std::string policy;
    double max_mflops = 0.0;
    double avg_mflops = 0.0;
    double det_f = 0.0;     // percentage points
    double seg_miou = 0.0;  // percentage points
};

inline LoadedCheckpoint checkpoint_for(const RunConfig& cfg) {
    const std::string path = cfg.get("checkpoint");
    if (path.empty()) throw ConfigError("this command needs checkpoint = <dir> in the config");
    return load_checkpoint_dir(path);
}

// Mean detection / segmentation metrics over the held-out evaluation set.
inline PolicyEvalRow eval_policy(const StreamModel& model, const QNet* qnet, Policy policy,
                                 bool cells_enabled, const SceneConfig& scenes,
                                 std::uint64_t eval_seed, int episodes, int jobs,
                                 const std::string& label) {
    struct Metrics {
        double det = 0.0, seg = 0.0;
    };
    const std::function<Metrics(int)> one = [&](int index) {
        const Episode ep = eval_episode(scenes, eval_seed, index);
        StreamSession session =
            make_session(model, policy, mix_seed(eval_seed, 0x5e55u + index), qnet);
        session.cells_enabled = cells_enabled;
        const EpisodeResult r = run_episode(session, ep);
        return Metrics{r.mean_det_f, r.mean_seg_miou};
    };
    const std::vector<Metrics> all = parallel_by_index<Metrics>(episodes, jobs, one);
    PolicyEvalRow row;
    row.policy = label;
    for (const Metrics& m : all) {
        row.det_f += m.det;
        row.seg_miou += m.seg;
    }
    row.det_f = 100.0 * row.det_f / std::max(1, episodes);
    row.seg_miou = 100.0 * row.seg_miou / std::max(1, episodes);
    return row;
}

inline std::vector<PolicyEvalRow> run_policy_comparison(const StreamModel& model, const QNet& qnet,
                                                        const SceneConfig& scenes,
                                                        const RunConfig& cfg) {
    const int episodes = cfg.get_int("eval_episodes");
    const int jobs = cfg.get_int("jobs");
    const std::uint64_t eval_seed = cfg.get_u64("eval_seed");
    const int interval = cfg.get_int("sf_interval");
    const int delay = cfg.get_int("sf_delay");

    const CostBreakdown full_cost = count_model_flops(model, false, nullptr);
    const CostBreakdown crop_cost = count_model_flops(model, true, nullptr);
    const CostBreakdown crop_cost_q = count_model_flops(model, true, &qnet);

    std::vector<PolicyEvalRow> rows;

    // quarter-cost single-frame baseline: keyframes `interval` apart with a
    // pipelining delay
    {
        const std::function<PolicyEvalRow(int)> one = [&](int index) {
            const Episode ep = eval_episode(scenes, eval_seed, index);
            const EpisodeResult r = run_episode_single_frame(model, ep, interval, delay);
            PolicyEvalRow row;
            row.det_f = r.mean_det_f;
            row.seg_miou = r.mean_seg_miou;
            return row;
        };
        const auto all = parallel_by_index<PolicyEvalRow>(episodes, jobs, one);
        PolicyEvalRow row;
        row.policy = "single-frame";
        for (const auto& m : all) {
            row.det_f += m.det_f;
            row.seg_miou += m.seg_miou;
        }
        row.det_f = 100.0 * row.det_f / std::max(1, episodes);
        row.seg_miou = 100.0 * row.seg_miou / std::max(1, episodes);
        VariantSpec sf;
        sf.interval = interval;
        sf.delay = delay;
        const LatencyProfile p = latency_profile(full_cost, sf);
        row.max_mflops = p.max_mflops;
        row.avg_mflops = p.avg_mflops;
        rows.push_back(row);
    }

    auto patchwork_row = [&](Policy policy, const QNet* net, const std::string& label) {
        PolicyEvalRow row =
            eval_policy(model, net, policy, true, scenes, eval_seed, episodes, jobs, label);
        const CostBreakdown& cost = net ? crop_cost_q : crop_cost;
        row.max_mflops = cost.total();
        row.avg_mflops = cost.total();
        rows.push_back(row);
    };
    patchwork_row(Policy::random, nullptr, "random");
    patchwork_row(Policy::scanning, nullptr, "scanning");
    patchwork_row(Policy::greedy, &qnet, "dqn");
    return rows;
}

inline std::string policy_rows_csv(const std::vector<PolicyEvalRow>& rows) {
    std::ostringstream out;
    out << "policy,max_mflops,avg_mflops,det_f,seg_miou\n";
    char buf[160];
    for (const PolicyEvalRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.3f,%.3f,%.4f,%.4f\n", r.policy.c_str(), r.max_mflops,
                      r.avg_mflops, r.det_f, r.seg_miou);
        out << buf;
    }
    return out.str();
}

inline void cmd_eval(const RunConfig& cfg, const PrintFn& print = nullptr) {
    namespace fs = std::filesystem;
    const std::string out_dir = cfg.get("out_dir");
    write_resolved_config(cfg, out_dir);
    const LoadedCheckpoint loaded = checkpoint_for(cfg);
    if (!loaded.has_qnet) throw ConfigError("checkpoint has no attention net; run train first");
    const SceneConfig scenes = scene_config_from(cfg);

    const auto rows = run_policy_comparison(loaded.model, loaded.qnet, scenes, cfg);
    const std::string csv = policy_rows_csv(rows);
    write_text_file((fs::path(out_dir) / "eval.csv").string(), csv);
    if (print) print(csv);
}

inline void cmd_ablate_cells(const RunConfig& cfg, const PrintFn& print = nullptr) {
    namespace fs = std::filesystem;
    const std::string out_dir = cfg.get("out_dir");
    write_resolved_config(cfg, out_dir);
    const LoadedCheckpoint loaded = checkpoint_for(cfg);
    if (!loaded.has_qnet) throw ConfigError("checkpoint has no attention net; run train first");
    const SceneConfig scenes = scene_config_from(cfg);
    const int episodes = cfg.get_int("eval_episodes");
    const int jobs = cfg.get_int("jobs");
    const std::uint64_t eval_seed = cfg.get_u64("eval_seed");

    std::ostringstream csv;
    csv << "policy,patchwork_cell,det_f,seg_miou\n";
    char buf[160];
    for (const bool cells : {false, true}) {
        for (const auto& [policy, net, label] :
             {std::tuple<Policy, const QNet*, const char*>{Policy::scanning, nullptr, "scanning"},
              std::tuple<Policy, const QNet*, const char*>{Policy::greedy, &loaded.qnet, "dqn"}}) {
            const PolicyEvalRow row = eval_policy(loaded.model, net, policy, cells, scenes,
                                                  eval_seed, episodes, jobs, label);
            std::snprintf(buf, sizeof(buf), "%s,%s,%.4f,%.4f\n", label, cells ? "yes" : "no",
                          row.det_f, row.seg_miou);
            csv << buf;
        }
    }
    write_text_file((fs::path(out_dir) / "ablation.csv").string(), csv.str());
    if (print) print(csv.str());
}

struct OracleSummary {
    OracleReport report;
    double single_cell_task = 0.0;  // percentage points
    double incremental_task = 0.0;
    double task_gap = 0.0;
};

inline OracleSummary run_oracle_check(const StreamModel& model, const SceneConfig& scenes,
                                      const RunConfig& cfg) {
    OracleSummary summary;
    // static scene with content
    const Episode scene_ep =
        moving_shapes_scene(cfg.get_u64("eval_seed"), 1, 2, scenes.frame_rows, scenes.frame_cols,
                            Scenario::multi);
    summary.report = oracle_check(model, scene_ep.frames[0], cfg.get_int("oracle_scans"));

    const int episodes = cfg.get_int("oracle_eval_episodes");
    const int jobs = cfg.get_int("jobs");
    const std::uint64_t eval_seed = cfg.get_u64("eval_seed");
    struct Pair {
        double single = 0.0, incremental = 0.0;
    };
    const std::function<Pair(int)> one = [&](int index) {
        const Episode ep = eval_episode(scenes, eval_seed, index);
        SingleCellSession sc = make_single_cell_session(model);
        StreamSession inc = make_session(model, Policy::scanning, mix_seed(eval_seed, 17u + index));
        return Pair{run_episode_single_cell(sc, ep).mean_det_f, run_episode(inc, ep).mean_det_f};
    };
    const auto all = parallel_by_index<Pair>(episodes, jobs, one);
    for (const Pair& p : all) {
        summary.single_cell_task += p.single;
        summary.incremental_task += p.incremental;
    }
    summary.single_cell_task = 100.0 * summary.single_cell_task / std::max(1, episodes);
    summary.incremental_task = 100.0 * summary.incremental_task / std::max(1, episodes);
    summary.task_gap = summary.single_cell_task - summary.incremental_task;
    return summary;
}

inline void cmd_oracle_check(const RunConfig& cfg, const PrintFn& print = nullptr) {
    namespace fs = std::filesystem;
    const std::string out_dir = cfg.get("out_dir");
    write_resolved_config(cfg, out_dir);
    const LoadedCheckpoint loaded = checkpoint_for(cfg);
    const SceneConfig scenes = scene_config_from(cfg);
    const OracleSummary summary = run_oracle_check(loaded.model, scenes, cfg);

    std::ostringstream csv;
    csv << "variant,scan,layer,mad\n";
    char buf[160];
    const OracleReport& rep = summary.report;
    for (int scan = 0; scan < rep.num_scans; ++scan)
        for (int layer = 0; layer < rep.num_layers; ++layer) {
            std::snprintf(buf, sizeof(buf), "single_cell,%d,%d,%.9g\n", scan, layer,
                          rep.single_cell_mad[static_cast<std::size_t>(scan)]
                                             [static_cast<std::size_t>(layer)]);
            csv << buf;
            std::snprintf(buf, sizeof(buf), "incremental,%d,%d,%.9g\n", scan, layer,
                          rep.incremental_mad[static_cast<std::size_t>(scan)]
                                             [static_cast<std::size_t>(layer)]);
            csv << buf;
        }
    std::snprintf(buf, sizeof(buf), "single_cell_task,,,%.4f\n", summary.single_cell_task);
    csv << buf;
    std::snprintf(buf, sizeof(buf), "incremental_task,,,%.4f\n", summary.incremental_task);
    csv << buf;
    std::snprintf(buf, sizeof(buf), "task_gap,,,%.4f\n", summary.task_gap);
    csv << buf;
    write_text_file((fs::path(out_dir) / "oracle.csv").string(), csv.str());
    if (print) {
        std::snprintf(buf, sizeof(buf),
                      "single-cell deviation (last scan): %.9g; incremental: %.9g; task gap: %.4f",
                      rep.single_cell_final.back(), rep.incremental_final.back(), summary.task_gap);
        print(buf);
    }
}

inline void cmd_bench_latency(const RunConfig& cfg, const PrintFn& print = nullptr) {
    namespace fs = std::filesystem;
    const std::string out_dir = cfg.get("out_dir");
    write_resolved_config(cfg, out_dir);

    // base costs come from the configured model; a checkpoint is not needed
    // for analytic accounting
    const ModelConfig mcfg = model_config_from(cfg);
    Rng rng(cfg.get_u64("seed"));
    const StreamModel model = build_model(mcfg, rng);
    Rng qrng(mix_seed(cfg.get_u64("seed"), 3));
    const QNet qnet = make_attention_net(model, qrng);

    std::vector<FrontierRow> rows;
    for (const std::string& line : cfg.variants()) {
        const VariantSpec v = parse_variant(line);
        CostBreakdown base;
        if (v.base_mflops) {
            base.conv_mflops = *v.base_mflops;
        } else if (v.attention) {
            ModelConfig vc = mcfg;
            vc.space = *v.attention;
            Rng vrng(cfg.get_u64("seed"));
            const StreamModel vmodel = build_model(vc, vrng);
            Rng vqrng(mix_seed(cfg.get_u64("seed"), 3));
            const QNet vqnet = make_attention_net(vmodel, vqrng);
            base = count_model_flops(vmodel, true, &vqnet);
        } else {
            base = count_model_flops(model, false, nullptr);
        }
        const LatencyProfile p = latency_profile(base, v);
        rows.push_back({v.id, v.method, p.max_mflops, p.avg_mflops, v.metric.value_or(0.0), false});
    }
    if (rows.empty()) throw ConfigError("bench-latency: no variant lines in the config");
    const std::string csv = frontier_csv(frontier(std::move(rows)));
    write_text_file((fs::path(out_dir) / "frontier.csv").string(), csv);
    if (print) print(csv);
}

}  // namespace harness

}  // namespace patchwork
