#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "patchwork/train.hpp"

using namespace patchwork;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.frame_rows = 32;
    cfg.frame_cols = 32;
    cfg.space = ActionSpace(2, 1);
    cfg.blocks = {{1, 6, 1, 2}, {4, 8, 1, 2}, {4, 8, 1, 1}};
    cfg.hires_hidden = 8;
    cfg.seg_hidden = 4;
    cfg.pyr1_channels = 8;
    cfg.pyr2_channels = 8;
    return cfg;
}

SceneConfig tiny_scenes() {
    SceneConfig s;
    s.frame_rows = 32;
    s.frame_cols = 32;
    s.episode_frames = 8;
    return s;
}


// Moves every convolution bias off zero; freshly built nets park whole
// channels exactly on the ReLU kink, where central differences and the
// left-derivative convention legitimately disagree.
void jitter_biases(StreamModel& m, Rng& rng) {
    auto jit = [&](ConvWeights& w) {
        for (auto& b : w.bias) b = static_cast<float>(rng.uniform(-0.2, 0.2));
    };
    for (BottleneckLayer& l : m.layers) {
        if (l.has_expand) jit(l.expand);
        jit(l.dw);
        jit(l.project);
    }
    jit(m.hires_head.hidden);
    jit(m.hires_head.out);
    jit(m.restored_head.out);
    jit(m.pyr1.dw);
    jit(m.pyr1.pw);
    jit(m.pyr2.dw);
    jit(m.pyr2.pw);
    jit(m.seg.hidden);
    jit(m.seg.out);
}

// Serializes every trainable parameter for bit-comparison.
std::vector<float> flatten_params(const StreamModel& m) {
    std::vector<float> out;
    auto push = [&](const std::vector<float>& v) { out.insert(out.end(), v.begin(), v.end()); };
    for (const BottleneckLayer& l : m.layers) {
        if (l.has_expand) {
            push(l.expand.values);
            push(l.expand.bias);
        }
        push(l.dw.values);
        push(l.dw.bias);
        push(l.project.values);
        push(l.project.bias);
        push(l.expand_norm.scale);
        push(l.dw_norm.shift);
    }
    push(m.hires_head.out.values);
    push(m.restored_head.out.values);
    push(m.pyr1.dw.values);
    push(m.pyr2.pw.values);
    push(m.seg.hidden.values);
    push(m.seg.out.values);
    return out;
}

}  // namespace

TEST_CASE("backbone backward matches finite differences of a quadratic probe") {
    // loss = 0.5 * sum(backbone_out^2); delta = backbone_out
    Rng rng(3);
    ModelConfig cfg = tiny_cfg();
    StreamModel model = build_model(cfg, rng);
    jitter_biases(model, rng);
    const Tensor frame = Tensor::random(32, 32, 3, rng, 0.0, 1.0);

    auto loss_of = [&]() {
        const Tensor out = stateless_backbone(model, frame);
        double s = 0.0;
        for (const float v : out.data) s += 0.5 * static_cast<double>(v) * v;
        return s;
    };

    ForwardCache cache;
    const Tensor out = stateless_backbone(model, frame, &cache);
    ModelGrad grads(model);
    backbone_backward(model, cache, out, grads);

    Rng pick(11);
    const double h = 1e-3;
    auto check_group = [&](std::vector<float>& params, const std::vector<float>& analytic,
                           const char* name, int samples) {
        double diff2 = 0.0, num2 = 0.0;
        for (int k = 0; k < samples; ++k) {
            const std::size_t i =
                static_cast<std::size_t>(pick.uniform_int(static_cast<int>(params.size())));
            const float saved = params[i];
            params[i] = static_cast<float>(saved + h);
            const double lp = loss_of();
            params[i] = static_cast<float>(saved - h);
            const double lm = loss_of();
            params[i] = saved;
            const double h_eff = static_cast<double>(static_cast<float>(saved + h)) -
                                 static_cast<double>(static_cast<float>(saved - h));
            const double fd = (lp - lm) / h_eff;
            diff2 += (fd - analytic[i]) * (fd - analytic[i]);
            num2 += fd * fd;
        }
        INFO(name);
        CHECK(std::sqrt(diff2) <= 5e-3 * std::max(std::sqrt(num2), 1.0));
    };

    check_group(model.layers[0].dw.values, grads.layers[0].dw.values, "layer0 dw", 18);
    check_group(model.layers[0].project.values, grads.layers[0].project.values, "layer0 proj", 18);
    check_group(model.layers[1].expand.values, grads.layers[1].expand.values, "layer1 expand", 18);
    check_group(model.layers[1].dw.bias, grads.layers[1].dw.bias, "layer1 dw bias", 8);
    check_group(model.layers[2].project.values, grads.layers[2].project.values, "layer2 proj", 18);
    check_group(model.layers[2].dw.values, grads.layers[2].dw.values, "layer2 dw", 18);
}

TEST_CASE("full task loss backward matches finite differences through heads and pyramid") {
    Rng rng(5);
    ModelConfig cfg = tiny_cfg();
    StreamModel model = build_model(cfg, rng);
    jitter_biases(model, rng);
    const Episode ep = moving_shapes_scene(7, 1, 2, 32, 32, Scenario::multi);
    const Tensor& frame = ep.frames[0];
    const TaskLossConfig lcfg;

    auto loss_of = [&]() {
        const TaskForward f = task_forward_full(model, frame);
        std::vector<Tensor> d_raw;
        Tensor d_seg;
        return task_loss_backward_maps(model, f, ep.gt_boxes[0], ep.gt_masks[0], lcfg, d_raw, d_seg)
            .total();
    };

    const TaskForward f = task_forward_full(model, frame);
    ModelGrad grads(model);
    task_train_step(model, f, ep.gt_boxes[0], ep.gt_masks[0], lcfg, grads);

    Rng pick(13);
    const double h = 1e-3;
    auto check_group = [&](std::vector<float>& params, const std::vector<float>& analytic,
                           const char* name, int samples) {
        double diff2 = 0.0, num2 = 0.0;
        for (int k = 0; k < samples; ++k) {
            const std::size_t i =
                static_cast<std::size_t>(pick.uniform_int(static_cast<int>(params.size())));
            const float saved = params[i];
            params[i] = static_cast<float>(saved + h);
            const double lp = loss_of();
            params[i] = static_cast<float>(saved - h);
            const double lm = loss_of();
            params[i] = saved;
            const double h_eff = static_cast<double>(static_cast<float>(saved + h)) -
                                 static_cast<double>(static_cast<float>(saved - h));
            const double fd = (lp - lm) / h_eff;
            diff2 += (fd - analytic[i]) * (fd - analytic[i]);
            num2 += fd * fd;
        }
        INFO(name);
        CHECK(std::sqrt(diff2) <= 5e-3 * std::max(std::sqrt(num2), 1e-3));
    };

    check_group(model.hires_head.hidden.values, grads.hires.hidden.values, "hires hidden", 14);
    check_group(model.hires_head.out.values, grads.hires.out.values, "hires out", 14);
    check_group(model.restored_head.out.values, grads.restored.out.values, "restored out", 14);
    check_group(model.pyr1.dw.values, grads.pyr1_dw.values, "pyr1 dw", 14);
    check_group(model.pyr1.pw.values, grads.pyr1_pw.values, "pyr1 pw", 14);
    check_group(model.pyr2.pw.values, grads.pyr2_pw.values, "pyr2 pw", 14);
    check_group(model.seg.hidden.values, grads.seg_hidden.values, "seg hidden", 14);
    check_group(model.seg.out.values, grads.seg_out.values, "seg out", 14);
    check_group(model.layers[0].dw.values, grads.layers[0].dw.values, "backbone via heads", 14);
    check_group(model.layers[2].project.values, grads.layers[2].project.values, "deep proj", 14);
}

TEST_CASE("crop-mode task forward agrees with the inference step") {
    Rng rng(17);
    ModelConfig cfg = tiny_cfg();
    StreamModel model = build_model(cfg, rng);
    Rng qrng(19);
    const QNet qnet = make_attention_net(model, qrng);
    const Episode ep = moving_shapes_scene(23, 6, 2, 32, 32, Scenario::multi);

    StreamSession a = make_session(model, Policy::epsilon_greedy, 31, &qnet, 0.3);
    StreamSession b = make_session(model, Policy::epsilon_greedy, 31, &qnet, 0.3);

    for (const Tensor& frame : ep.frames) {
        const StepResult ra = step(a, frame);

        const int action = b.next_action;
        REQUIRE(action == ra.action);
        const Window& window = b.windows[static_cast<std::size_t>(action)];
        const TaskForward f = task_forward_crop(model, b.cells, b.restore, frame, window, true);
        StepResult rb;
        rb.action = action;
        predict_from_crop(model, f.features, window, b.restore, b.mask_memory, rb);
        b.last_boxes = rb.boxes;
        b.history = update_history(b.history, action);
        std::vector<float> q = q_values(b.cells[static_cast<std::size_t>(model.tap_index())].memory,
                                        b.history, qnet);
        b.t += 1;
        b.next_action =
            select_action(b.policy, &q, b.t, model.cfg.space.num_actions(), b.rng, b.epsilon);

        REQUIRE(ra.boxes.size() == rb.boxes.size());
        for (std::size_t i = 0; i < ra.boxes.size(); ++i) {
            CHECK(ra.boxes[i].score == rb.boxes[i].score);
            CHECK(ra.boxes[i].ymin == rb.boxes[i].ymin);
        }
        CHECK(ra.mask.data == rb.mask.data);
        REQUIRE(ra.q.size() == q.size());
        for (std::size_t i = 0; i < q.size(); ++i) CHECK(ra.q[i] == q[i]);
        CHECK(ra.next_action == b.next_action);
    }
}

TEST_CASE("calibration whitens per-channel statistics and stays frozen") {
    Rng rng(29);
    ModelConfig cfg = tiny_cfg();
    StreamModel model = build_model(cfg, rng);
    SceneConfig scenes = tiny_scenes();
    std::vector<Tensor> frames;
    Rng frng(31);
    for (int i = 0; i < 12; ++i) frames.push_back(sample_frame(scenes, frng.next_u64()));
    calibrate_normalization(model, frames);

    // post-norm statistics of the deepest depthwise site are near standard
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const Tensor& f : frames) {
        ForwardCache cache;
        stateless_backbone(model, f, &cache);
        const Tensor& t = cache.layers.back().dw_prerelu;
        for (const float v : t.data) {
            sum += v;
            sq += static_cast<double>(v) * v;
        }
        n += t.data.size();
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.15);
    CHECK(var > 0.5);
    CHECK(var < 2.0);
}

TEST_CASE("stage 2 leaves every task-model parameter bit-identical") {
    Rng rng(37);
    ModelConfig mcfg = tiny_cfg();
    StreamModel model = build_model(mcfg, rng);
    SceneConfig scenes = tiny_scenes();
    Rng qrng(41);
    QNet qnet = make_attention_net(model, qrng);

    TrainConfig cfg;
    cfg.stage2_episodes = 6;
    cfg.trainer.warmup = 8;
    cfg.trainer.batch_size = 4;
    cfg.eval_probe_episodes = 1;
    cfg.seed = 43;

    const std::vector<float> before = flatten_params(model);
    train_stage2(model, qnet, scenes, cfg);
    const std::vector<float> after = flatten_params(model);
    REQUIRE(before.size() == after.size());
    CHECK(std::memcmp(before.data(), after.data(), before.size() * sizeof(float)) == 0);
}

TEST_CASE("a short stage-1 run reduces the task loss") {
    Rng rng(47);
    ModelConfig mcfg = tiny_cfg();
    StreamModel model = build_model(mcfg, rng);
    SceneConfig scenes = tiny_scenes();

    TrainConfig cfg;
    cfg.stage1_iters = 150;
    cfg.stage1_batch = 2;
    cfg.lr_stage1 = 0.01;
    cfg.calib_frames = 8;
    cfg.seed = 53;

    // held-out probe
    auto probe_loss = [&]() {
        double total = 0.0;
        for (std::uint64_t s = 900; s < 906; ++s) {
            const Episode ep = sample_episode(scenes, s, true);
            const TaskForward f = task_forward_full(model, ep.frames[0]);
            std::vector<Tensor> d_raw;
            Tensor d_seg;
            total += task_loss_backward_maps(model, f, ep.gt_boxes[0], ep.gt_masks[0], cfg.loss,
                                             d_raw, d_seg)
                         .total();
        }
        return total;
    };

    // calibrate first so before/after probes share the same normalization
    Rng crng(59);
    std::vector<Tensor> calib;
    for (int i = 0; i < 8; ++i) calib.push_back(sample_frame(scenes, crng.next_u64()));
    calibrate_normalization(model, calib);
    const double before = probe_loss();

    cfg.calib_frames = 8;
    train_stage1(model, scenes, cfg);
    const double after = probe_loss();
    CHECK(after < before);
}
