#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchwork/attention.hpp"
#include "patchwork/cell.hpp"
#include "patchwork/rewards.hpp"
#include "patchwork/synthetic.hpp"
#include "patchwork/tensor.hpp"

namespace patchwork {

inline Tensor depthwise_conv_same(const Tensor& x, const ConvWeights& w, int stride = 1) {
    return depthwise_conv_valid(zero_pad(x, w.radius_rows(), w.radius_cols()), w, stride);
}

// Activation slope shared by every task-model layer.
inline constexpr float kActivationSlope = 0.1f;

// Inverted bottleneck block description: expansion factor, output channels,
// repeat count and stride of the first repeat.
struct BlockSpec {
    int expansion = 1;
    int out_channels = 8;
    int repeats = 1;
    int stride = 1;
};

// One flattened bottleneck layer. The depthwise convolution is the stateful
// site; the 1x1 expand/project convolutions stay stateless.
struct BottleneckLayer {
    int in_channels = 0;
    int expanded_channels = 0;
    int out_channels = 0;
    int stride = 1;
    bool residual = false;
    bool has_expand = false;

    ConvWeights expand;  // 1x1 in -> expanded
    ChannelAffine expand_norm;
    ConvWeights dw;  // depthwise 3x3
    ChannelAffine dw_norm;
    ConvWeights project;  // 1x1 expanded -> out
    ChannelAffine project_norm;

    CellGeometry cell_geom;  // geometry of the depthwise input memory
    int in_rows_full = 0, in_cols_full = 0;    // full-frame extent at dw input
    int out_rows_full = 0, out_cols_full = 0;  // full-frame extent of block output
};

// Box head: optional hidden 1x1 + ReLU, then 1x1 to 5 channels
// (ty, tx, th, tw, score logit) with one anchor per position.
struct DetHead {
    bool has_hidden = false;
    ConvWeights hidden;
    ConvWeights out;
};

struct SegHead {
    ConvWeights hidden;
    ConvWeights out;  // 1x1 -> 1 logit
};

struct PyramidLayer {
    ConvWeights dw;  // depthwise 3x3 stride 2, SAME
    ChannelAffine dw_norm;
    ConvWeights pw;  // 1x1
    ChannelAffine pw_norm;
};

struct ModelConfig {
    int frame_rows = 64;
    int frame_cols = 64;
    int frame_channels = 3;
    ActionSpace space{2, 1};
    std::vector<BlockSpec> blocks = {{1, 8, 1, 2}, {4, 12, 2, 2}, {4, 24, 2, 2}, {4, 32, 1, 1}};
    int hires_hidden = 32;
    int seg_hidden = 16;
    int pyr1_channels = 32;
    int pyr2_channels = 32;
    double anchor_scale = 1.5;
    double score_threshold = 0.5;
    double nms_iou = 0.5;
    int tap_layer = -1;  // -1: memory of the last stateful layer
    float history_decay = 0.7f;
};

struct StreamModel {
    ModelConfig cfg;
    std::vector<BottleneckLayer> layers;
    DetHead hires_head;     // on backbone crop features
    DetHead restored_head;  // on the restored full map
    PyramidLayer pyr1, pyr2;
    DetHead pyr1_head, pyr2_head;
    SegHead seg;

    int backbone_channels = 0;
    int out_rows_full = 0, out_cols_full = 0;  // backbone output, full frame
    CellGeometry restore_geom;
    int total_stride = 1;

    int tap_index() const {
        return cfg.tap_layer < 0 ? static_cast<int>(layers.size()) - 1 : cfg.tap_layer;
    }
    const CellGeometry& tap_geometry() const {
        return layers[static_cast<std::size_t>(tap_index())].cell_geom;
    }
    int tap_channels() const {
        return layers[static_cast<std::size_t>(tap_index())].expanded_channels;
    }
};

// Builds the stateful backbone and heads, validating that every window
// offset lands on integer coordinates at every layer.
inline StreamModel build_model(const ModelConfig& cfg, Rng& rng) {
    if (cfg.frame_rows < 1 || cfg.frame_cols < 1)
        throw std::invalid_argument("build_model: bad frame dims");
    StreamModel model;
    model.cfg = cfg;
    const Frac rel = cfg.space.window_rel();

    int rows = cfg.frame_rows, cols = cfg.frame_cols;
    int channels = cfg.frame_channels;
    int total_stride = 1;

    for (const BlockSpec& spec : cfg.blocks) {
        if (spec.stride != 1 && spec.stride != 2)
            throw std::invalid_argument("build_model: block stride must be 1 or 2");
        for (int rep = 0; rep < spec.repeats; ++rep) {
            const int stride = rep == 0 ? spec.stride : 1;
            BottleneckLayer layer;
            layer.in_channels = channels;
            layer.expanded_channels = channels * spec.expansion;
            layer.out_channels = spec.out_channels;
            layer.stride = stride;
            layer.residual = stride == 1 && channels == spec.out_channels;
            layer.has_expand = spec.expansion != 1;

            if (rows % cfg.space.m != 0 || cols % cfg.space.m != 0)
                throw std::invalid_argument(
                    "build_model: layer state extent " + std::to_string(rows) + "x" +
                    std::to_string(cols) + " is not divisible by M=" + std::to_string(cfg.space.m));
            const int crop_r = frac_mul_exact(rel, rows);
            const int crop_c = frac_mul_exact(rel, cols);
            if (crop_r % stride != 0 || crop_c % stride != 0)
                throw std::invalid_argument("build_model: stride does not divide the crop extent");
            if (crop_r < 2 || crop_c < 2)
                throw std::invalid_argument("build_model: crop shrank below the kernel extent");

            layer.cell_geom = CellGeometry(crop_r, crop_c, rel, rel, 1);
            layer.in_rows_full = rows;
            layer.in_cols_full = cols;

            if (layer.has_expand)
                layer.expand =
                    ConvWeights::dense_random(1, 1, layer.in_channels, layer.expanded_channels, rng);
            layer.expand_norm = ChannelAffine::identity(layer.expanded_channels);
            layer.dw = ConvWeights::depthwise_random(3, 3, layer.expanded_channels, rng);
            layer.dw_norm = ChannelAffine::identity(layer.expanded_channels);
            layer.project =
                ConvWeights::dense_random(1, 1, layer.expanded_channels, layer.out_channels, rng);
            layer.project_norm = ChannelAffine::identity(layer.out_channels);

            rows /= stride;
            cols /= stride;
            total_stride *= stride;
            layer.out_rows_full = rows;
            layer.out_cols_full = cols;
            channels = spec.out_channels;
            model.layers.push_back(std::move(layer));
        }
    }
    if (model.layers.empty()) throw std::invalid_argument("build_model: no layers");
    if (rows % cfg.space.m != 0 || cols % cfg.space.m != 0)
        throw std::invalid_argument("build_model: backbone output not divisible by M");

    model.backbone_channels = channels;
    model.out_rows_full = rows;
    model.out_cols_full = cols;
    model.total_stride = total_stride;
    model.restore_geom =
        CellGeometry(frac_mul_exact(rel, rows), frac_mul_exact(rel, cols), rel, rel, 0);

    auto make_head = [&](int in, int hidden) {
        DetHead head;
        head.has_hidden = hidden > 0;
        if (head.has_hidden) {
            head.hidden = ConvWeights::dense_random(1, 1, in, hidden, rng);
            head.out = ConvWeights::dense_random(1, 1, hidden, 5, rng);
        } else {
            head.out = ConvWeights::dense_random(1, 1, in, 5, rng);
        }
        return head;
    };
    model.hires_head = make_head(channels, cfg.hires_hidden);
    model.restored_head = make_head(channels, 0);

    model.pyr1.dw = ConvWeights::depthwise_random(3, 3, channels, rng);
    model.pyr1.dw_norm = ChannelAffine::identity(channels);
    model.pyr1.pw = ConvWeights::dense_random(1, 1, channels, cfg.pyr1_channels, rng);
    model.pyr1.pw_norm = ChannelAffine::identity(cfg.pyr1_channels);
    model.pyr2.dw = ConvWeights::depthwise_random(3, 3, cfg.pyr1_channels, rng);
    model.pyr2.dw_norm = ChannelAffine::identity(cfg.pyr1_channels);
    model.pyr2.pw = ConvWeights::dense_random(1, 1, cfg.pyr1_channels, cfg.pyr2_channels, rng);
    model.pyr2.pw_norm = ChannelAffine::identity(cfg.pyr2_channels);
    model.pyr1_head = make_head(cfg.pyr1_channels, 0);
    model.pyr2_head = make_head(cfg.pyr2_channels, 0);

    model.seg.hidden = ConvWeights::dense_random(1, 1, channels, cfg.seg_hidden, rng);
    model.seg.out = ConvWeights::dense_random(1, 1, cfg.seg_hidden, 1, rng);

    const int tap = model.tap_index();
    if (tap < 0 || tap >= static_cast<int>(model.layers.size()))
        throw std::invalid_argument("build_model: tap layer out of range");
    return model;
}

inline QNet make_attention_net(const StreamModel& model, Rng& rng) {
    const CellGeometry& g = model.tap_geometry();
    return make_qnet(g.state_rows(), g.state_cols(), model.tap_channels(),
                     model.cfg.space.num_actions(), rng);
}

// ---- anchors, decoding, NMS ----

// One anchor per grid cell over a rectangular region of the frame.
struct AnchorGrid {
    int rows = 1, cols = 1;
    double top = 0, left = 0, height = 1, width = 1;  // relative region
    double scale = 1.5;

    Box anchor(int gy, int gx) const {
        const double ch = height / rows, cw = width / cols;
        const double cy = top + (gy + 0.5) * ch;
        const double cx = left + (gx + 0.5) * cw;
        const double ah = scale * ch, aw = scale * cw;
        return Box{static_cast<float>(cy - ah / 2), static_cast<float>(cx - aw / 2),
                   static_cast<float>(cy + ah / 2), static_cast<float>(cx + aw / 2), 1.0f};
    }
};

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Decodes a 5-channel prediction map into scored boxes (no NMS here).
inline void decode_boxes(const Tensor& pred, const AnchorGrid& grid, double score_threshold,
                         std::vector<Box>& out) {
    if (pred.channels != 5) throw std::invalid_argument("decode_boxes: expected 5 channels");
    if (pred.rows != grid.rows || pred.cols != grid.cols)
        throw std::invalid_argument("decode_boxes: grid/prediction mismatch");
    for (int gy = 0; gy < pred.rows; ++gy)
        for (int gx = 0; gx < pred.cols; ++gx) {
            const double score = sigmoid(pred.at(gy, gx, 4));
            if (score <= score_threshold) continue;
            const Box a = grid.anchor(gy, gx);
            const double ah = a.ymax - a.ymin, aw = a.xmax - a.xmin;
            const double cy = (a.ymin + a.ymax) / 2 + pred.at(gy, gx, 0) * ah;
            const double cx = (a.xmin + a.xmax) / 2 + pred.at(gy, gx, 1) * aw;
            const double h = ah * std::exp(std::clamp<double>(pred.at(gy, gx, 2), -2.0, 2.0));
            const double w = aw * std::exp(std::clamp<double>(pred.at(gy, gx, 3), -2.0, 2.0));
            Box b;
            b.ymin = static_cast<float>(std::clamp(cy - h / 2, 0.0, 1.0));
            b.ymax = static_cast<float>(std::clamp(cy + h / 2, 0.0, 1.0));
            b.xmin = static_cast<float>(std::clamp(cx - w / 2, 0.0, 1.0));
            b.xmax = static_cast<float>(std::clamp(cx + w / 2, 0.0, 1.0));
            b.score = static_cast<float>(score);
            if (b.valid()) out.push_back(b);
        }
}

inline std::vector<Box> nms(std::vector<Box> boxes, double iou_threshold) {
    std::vector<int> order(boxes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return boxes[static_cast<std::size_t>(a)].score > boxes[static_cast<std::size_t>(b)].score;
    });
    std::vector<Box> kept;
    for (const int i : order) {
        const Box& cand = boxes[static_cast<std::size_t>(i)];
        bool suppressed = false;
        for (const Box& k : kept)
            if (iou(cand, k) > iou_threshold) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(cand);
    }
    return kept;
}

inline Tensor apply_det_head(const DetHead& head, const Tensor& features) {
    if (head.has_hidden)
        return pointwise_conv(leaky_relu(pointwise_conv(features, head.hidden), kActivationSlope),
                              head.out);
    return pointwise_conv(features, head.out);
}

inline Tensor apply_seg_logits(const SegHead& head, const Tensor& features) {
    return pointwise_conv(leaky_relu(pointwise_conv(features, head.hidden), kActivationSlope),
                          head.out);
}

// ---- caches recorded during forward passes for hand-derived backprop ----

struct LayerCache {
    Tensor block_input;    // pre-expand features
    Tensor expand_prerelu; // post expand conv + norm (empty when no expand)
    Tensor dw_input;       // enlarged/padded depthwise input actually convolved
    Tensor dw_prerelu;     // post depthwise conv + norm
    Tensor project_input;  // post depthwise ReLU
    Tensor project_out;    // post project conv + norm, before any residual
    Tensor block_output;
};

struct HeadCache {
    Tensor input;
    Tensor hidden_prerelu;  // empty when headless
    Tensor output;
};

struct PyramidCache {
    Tensor dw_input_padded;
    Tensor dw_out;  // post norm (pyramids are linear before the pointwise)
    Tensor pw_out;
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    Tensor backbone_out;
    HeadCache hires, restored, pyr1_head, pyr2_head;
    PyramidCache pyr1, pyr2;
    HeadCache seg_hidden;  // input + hidden_prerelu + logits in output
};

// ---- stateless full-frame network (the independent reference path) ----

inline Tensor stateless_backbone(const StreamModel& model, const Tensor& frame,
                                 ForwardCache* cache = nullptr) {
    if (frame.rows != model.cfg.frame_rows || frame.cols != model.cfg.frame_cols ||
        frame.channels != model.cfg.frame_channels)
        throw std::invalid_argument("stateless_backbone: frame " + frame.shape_str() +
                                    " does not match the configured input");
    Tensor x = frame;
    if (cache) cache->layers.resize(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const BottleneckLayer& layer = model.layers[l];
        LayerCache* lc = cache ? &cache->layers[l] : nullptr;
        Tensor block_input = x;
        if (layer.has_expand) {
            x = pointwise_conv(x, layer.expand);
            affine_inplace(x, layer.expand_norm);
            if (lc) lc->expand_prerelu = x;
            leaky_relu_inplace(x, kActivationSlope);
        }
        Tensor padded = zero_pad(x, 1);
        if (lc) lc->dw_input = padded;
        x = depthwise_conv_valid(padded, layer.dw, layer.stride);
        affine_inplace(x, layer.dw_norm);
        if (lc) lc->dw_prerelu = x;
        leaky_relu_inplace(x, kActivationSlope);
        if (lc) lc->project_input = x;
        x = pointwise_conv(x, layer.project);
        affine_inplace(x, layer.project_norm);
        if (lc) lc->project_out = x;
        if (layer.residual) add_inplace(x, block_input);
        if (lc) {
            lc->block_input = std::move(block_input);
            lc->block_output = x;
        }
    }
    if (cache) cache->backbone_out = x;
    return x;
}

struct DetOutputs {
    std::vector<Box> boxes;      // post NMS
    std::vector<Tensor> raw;     // raw head maps: hires, restored, pyr1, pyr2
    std::vector<AnchorGrid> grids;
};

// Runs every detection head given crop features inside the current window
// and the restored full map. In the stateless/full-frame case the "crop" is
// the whole map and the window covers the frame.
inline DetOutputs run_det_heads(const StreamModel& model, const Tensor& crop_features,
                                const Window& window, const Tensor& full_map,
                                ForwardCache* cache = nullptr) {
    DetOutputs out;
    const ModelConfig& cfg = model.cfg;

    const Tensor hires = apply_det_head(model.hires_head, crop_features);
    AnchorGrid hires_grid{hires.rows, hires.cols, window.a.value(), window.b.value(),
                          window.h.value(), window.w.value(), cfg.anchor_scale};

    const Tensor restored = apply_det_head(model.restored_head, full_map);
    AnchorGrid restored_grid{restored.rows, restored.cols, 0, 0, 1, 1, cfg.anchor_scale};

    Tensor p1_pad = zero_pad(full_map, 1);
    Tensor p1 = depthwise_conv_valid(p1_pad, model.pyr1.dw, 2);
    affine_inplace(p1, model.pyr1.dw_norm);
    Tensor p1_out = pointwise_conv(p1, model.pyr1.pw);
    affine_inplace(p1_out, model.pyr1.pw_norm);
    leaky_relu_inplace(p1_out, kActivationSlope);

    Tensor p2_pad = zero_pad(p1_out, 1);
    Tensor p2 = depthwise_conv_valid(p2_pad, model.pyr2.dw, 2);
    affine_inplace(p2, model.pyr2.dw_norm);
    Tensor p2_out = pointwise_conv(p2, model.pyr2.pw);
    affine_inplace(p2_out, model.pyr2.pw_norm);
    leaky_relu_inplace(p2_out, kActivationSlope);

    const Tensor pyr1_pred = apply_det_head(model.pyr1_head, p1_out);
    AnchorGrid pyr1_grid{pyr1_pred.rows, pyr1_pred.cols, 0, 0, 1, 1, cfg.anchor_scale};
    const Tensor pyr2_pred = apply_det_head(model.pyr2_head, p2_out);
    AnchorGrid pyr2_grid{pyr2_pred.rows, pyr2_pred.cols, 0, 0, 1, 1, cfg.anchor_scale};

    std::vector<Box> boxes;
    decode_boxes(hires, hires_grid, cfg.score_threshold, boxes);
    decode_boxes(restored, restored_grid, cfg.score_threshold, boxes);
    decode_boxes(pyr1_pred, pyr1_grid, cfg.score_threshold, boxes);
    decode_boxes(pyr2_pred, pyr2_grid, cfg.score_threshold, boxes);
    out.boxes = nms(std::move(boxes), cfg.nms_iou);
    out.raw = {hires, restored, pyr1_pred, pyr2_pred};
    out.grids = {hires_grid, restored_grid, pyr1_grid, pyr2_grid};

    if (cache) {
        cache->pyr1.dw_input_padded = std::move(p1_pad);
        cache->pyr1.dw_out = std::move(p1);
        cache->pyr1.pw_out = p1_out;
        cache->pyr2.dw_input_padded = std::move(p2_pad);
        cache->pyr2.dw_out = std::move(p2);
        cache->pyr2.pw_out = p2_out;
    }
    return out;
}

inline Mask mask_from_logits(const Tensor& logits, int upsample) {
    Mask m(logits.rows * upsample, logits.cols * upsample);
    for (int r = 0; r < m.rows; ++r)
        for (int c = 0; c < m.cols; ++c)
            m.at(r, c) = logits.at(r / upsample, c / upsample, 0) > 0.0f ? 1 : 0;
    return m;
}

struct StatelessResult {
    Tensor backbone;
    std::vector<Box> boxes;
    Mask mask;
};

// Full single-frame model: backbone, all detection heads and the segmenter
// on the complete frame.
inline StatelessResult stateless_forward(const StreamModel& model, const Tensor& frame,
                                         ForwardCache* cache = nullptr) {
    StatelessResult res;
    res.backbone = stateless_backbone(model, frame, cache);
    const Window full{Frac(0, 1), Frac(0, 1), Frac(1, 1), Frac(1, 1)};
    DetOutputs det = run_det_heads(model, res.backbone, full, res.backbone, cache);
    res.boxes = std::move(det.boxes);
    const Tensor logits = apply_seg_logits(model.seg, res.backbone);
    res.mask = mask_from_logits(logits, model.total_stride);
    return res;
}

// ---- streaming session ----

struct StreamSession {
    const StreamModel* model = nullptr;
    const QNet* qnet = nullptr;
    Policy policy = Policy::scanning;
    double epsilon = 0.0;
    Rng rng{0};

    std::vector<CellState> cells;
    CellState restore;
    Tensor mask_memory;
    ActionHistory history;
    std::vector<Box> last_boxes;
    std::vector<Window> windows;
    bool cells_enabled = true;
    int t = 0;
    int next_action = 0;
};

inline StreamSession make_session(const StreamModel& model, Policy policy, std::uint64_t seed,
                                  const QNet* qnet = nullptr, double epsilon = 0.0) {
    if ((policy == Policy::greedy || policy == Policy::epsilon_greedy) && qnet == nullptr)
        throw std::invalid_argument("make_session: value-based policy requires a Q network");
    StreamSession s;
    s.model = &model;
    s.qnet = qnet;
    s.policy = policy;
    s.epsilon = epsilon;
    s.rng = Rng(seed);
    for (const BottleneckLayer& layer : model.layers)
        s.cells.emplace_back(layer.cell_geom, layer.expanded_channels);
    s.restore = CellState(model.restore_geom, model.backbone_channels);
    s.mask_memory = Tensor(model.cfg.frame_rows, model.cfg.frame_cols, 1);
    s.history = ActionHistory(model.cfg.space.num_actions(), model.cfg.history_decay);
    s.windows = enumerate_actions(model.cfg.space);
    // initial action: same policy rule evaluated on the blank state
    std::vector<float> q;
    if (s.qnet)
        q = q_values(Tensor(model.tap_geometry().state_rows(), model.tap_geometry().state_cols(),
                            model.tap_channels()),
                     s.history, *s.qnet);
    s.next_action = select_action(s.policy, q.empty() ? nullptr : &q, 0,
                                  model.cfg.space.num_actions(), s.rng, s.epsilon);
    return s;
}

inline void reset_session(StreamSession& s) {
    for (auto& c : s.cells) reset_inplace(c);
    reset_inplace(s.restore);
    std::fill(s.mask_memory.data.begin(), s.mask_memory.data.end(), 0.0f);
    std::fill(s.history.f.begin(), s.history.f.end(), 0.0f);
    s.last_boxes.clear();
    s.t = 0;
    std::vector<float> q;
    if (s.qnet)
        q = q_values(Tensor(s.model->tap_geometry().state_rows(),
                            s.model->tap_geometry().state_cols(), s.model->tap_channels()),
                     s.history, *s.qnet);
    s.next_action = select_action(s.policy, q.empty() ? nullptr : &q, 0,
                                  s.model->cfg.space.num_actions(), s.rng, s.epsilon);
}

// Runs the backbone on one crop, updating every cell memory. Returns the
// crop's backbone features.
inline Tensor backbone_crop_forward(const StreamModel& model, std::vector<CellState>& cells,
                                    const Tensor& frame_crop, const Window& window,
                                    bool cells_enabled, ForwardCache* cache = nullptr,
                                    std::vector<Tensor>* layer_outputs = nullptr) {
    Tensor x = frame_crop;
    if (cache) cache->layers.resize(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const BottleneckLayer& layer = model.layers[l];
        LayerCache* lc = cache ? &cache->layers[l] : nullptr;
        Tensor block_input = x;
        if (layer.has_expand) {
            x = pointwise_conv(x, layer.expand);
            affine_inplace(x, layer.expand_norm);
            if (lc) lc->expand_prerelu = x;
            leaky_relu_inplace(x, kActivationSlope);
        }
        state_update_inplace(cells[l], x, window.a, window.b);
        Tensor enlarged = feature_propagate(cells[l], window.a, window.b, cells_enabled);
        if (lc) lc->dw_input = enlarged;
        x = depthwise_conv_valid(enlarged, layer.dw, layer.stride);
        affine_inplace(x, layer.dw_norm);
        if (lc) lc->dw_prerelu = x;
        leaky_relu_inplace(x, kActivationSlope);
        if (lc) lc->project_input = x;
        x = pointwise_conv(x, layer.project);
        affine_inplace(x, layer.project_norm);
        if (lc) lc->project_out = x;
        if (layer.residual) add_inplace(x, block_input);
        if (lc) {
            lc->block_input = std::move(block_input);
            lc->block_output = x;
        }
        if (layer_outputs) layer_outputs->push_back(x);
    }
    if (cache) cache->backbone_out = x;
    return x;
}

struct StepResult {
    int action = 0;       // window processed this step
    int next_action = 0;  // window chosen for the next frame
    std::vector<Box> boxes;
    Mask mask;
    std::vector<float> q;
    double flops = 0.0;  // filled by callers that meter cost
};

// Shared tail of a streaming step: restore-cell update, detection heads,
// segmentation paste. `crop_features` are backbone features of the window.
inline void predict_from_crop(const StreamModel& model, const Tensor& crop_features,
                              const Window& window, CellState& restore, Tensor& mask_memory,
                              StepResult& out) {
    state_update_inplace(restore, crop_features, window.a, window.b);
    DetOutputs det = run_det_heads(model, crop_features, window, restore.memory);
    out.boxes = std::move(det.boxes);

    const Tensor logits = apply_seg_logits(model.seg, crop_features);
    const int up = model.total_stride;
    const Mask crop_mask = mask_from_logits(logits, up);
    Tensor crop_mask_t(crop_mask.rows, crop_mask.cols, 1);
    for (std::size_t i = 0; i < crop_mask.data.size(); ++i)
        crop_mask_t.data[i] = static_cast<float>(crop_mask.data[i]);
    const int top = frac_mul_exact(window.a, mask_memory.rows);
    const int left = frac_mul_exact(window.b, mask_memory.cols);
    paste_inplace(mask_memory, crop_mask_t, top, left);

    out.mask = Mask(mask_memory.rows, mask_memory.cols);
    for (std::size_t i = 0; i < out.mask.data.size(); ++i)
        out.mask.data[i] = mask_memory.data[i] > 0.5f ? 1 : 0;
}

// One stream step: crop -> backbone -> heads -> attention. Cell memories,
// the action history and the next window choice all advance.
inline StepResult step(StreamSession& s, const Tensor& frame) {
    if (!s.model) throw std::invalid_argument("step: session not built");
    const StreamModel& model = *s.model;
    if (frame.rows != model.cfg.frame_rows || frame.cols != model.cfg.frame_cols)
        throw std::invalid_argument("step: frame " + frame.shape_str() +
                                    " does not match the session");
    StepResult out;
    out.action = s.next_action;
    const Window& window = s.windows[static_cast<std::size_t>(out.action)];

    const int top = frac_mul_exact(window.a, frame.rows);
    const int left = frac_mul_exact(window.b, frame.cols);
    const Tensor frame_crop = crop(frame, top, left, frac_mul_exact(window.h, frame.rows),
                                   frac_mul_exact(window.w, frame.cols));

    const Tensor features =
        backbone_crop_forward(model, s.cells, frame_crop, window, s.cells_enabled);
    predict_from_crop(model, features, window, s.restore, s.mask_memory, out);
    s.last_boxes = out.boxes;

    s.history = update_history(s.history, out.action);
    if (s.qnet)
        out.q = q_values(s.cells[static_cast<std::size_t>(model.tap_index())].memory, s.history,
                         *s.qnet);
    s.t += 1;
    out.next_action = select_action(s.policy, out.q.empty() ? nullptr : &out.q, s.t,
                                    model.cfg.space.num_actions(), s.rng, s.epsilon);
    s.next_action = out.next_action;
    return out;
}

// ---- single-cell-at-input variant ----
// One memory at the network input holds raw frame content; the whole
// backbone then runs VALID on the crop enlarged by the full receptive-field
// ring, so recovered context is exact wherever the memory is fresh.

// Per-layer input ring widths, derived back to front: r_in = stride*r_out + k.
inline std::vector<int> context_rings(const StreamModel& model) {
    std::vector<int> rings(model.layers.size());
    int r = 0;
    for (int l = static_cast<int>(model.layers.size()) - 1; l >= 0; --l) {
        r = r * model.layers[static_cast<std::size_t>(l)].stride + 1;
        rings[static_cast<std::size_t>(l)] = r;
    }
    return rings;
}

struct SingleCellSession {
    const StreamModel* model = nullptr;
    CellState input_cell;
    CellState restore;
    Tensor mask_memory;
    std::vector<Box> last_boxes;
    std::vector<Window> windows;
};

inline SingleCellSession make_single_cell_session(const StreamModel& model) {
    SingleCellSession s;
    s.model = &model;
    const ModelConfig& cfg = model.cfg;
    const Frac rel = cfg.space.window_rel();
    const int ring = context_rings(model).front();
    s.input_cell = CellState(CellGeometry(frac_mul_exact(rel, cfg.frame_rows),
                                          frac_mul_exact(rel, cfg.frame_cols), rel, rel, ring),
                             cfg.frame_channels);
    s.restore = CellState(model.restore_geom, model.backbone_channels);
    s.mask_memory = Tensor(cfg.frame_rows, cfg.frame_cols, 1);
    s.windows = enumerate_actions(cfg.space);
    return s;
}

inline void reset_session(SingleCellSession& s) {
    reset_inplace(s.input_cell);
    reset_inplace(s.restore);
    std::fill(s.mask_memory.data.begin(), s.mask_memory.data.end(), 0.0f);
    s.last_boxes.clear();
}

// Runs the backbone as a pure VALID pipeline over a ring-extended crop.
// Positions whose frame coordinates fall outside the frame are zeroed after
// every block, mirroring the per-layer zero padding of the stateless
// network; without this, coarse layers would leak in-frame content into the
// virtual out-of-frame ring. layer_outputs, when given, receives each
// block's ring-free output crop.
inline Tensor single_cell_backbone(const StreamModel& model, const Tensor& extended_crop,
                                   const Window& window,
                                   std::vector<Tensor>* layer_outputs = nullptr) {
    const std::vector<int> rings = context_rings(model);
    Tensor x = extended_crop;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const BottleneckLayer& layer = model.layers[l];
        Tensor block_input = x;
        if (layer.has_expand) {
            x = pointwise_conv(x, layer.expand);
            affine_inplace(x, layer.expand_norm);
            leaky_relu_inplace(x, kActivationSlope);
        }
        x = depthwise_conv_valid(x, layer.dw, layer.stride);
        affine_inplace(x, layer.dw_norm);
        leaky_relu_inplace(x, kActivationSlope);
        x = pointwise_conv(x, layer.project);
        affine_inplace(x, layer.project_norm);
        if (layer.residual)
            add_inplace(x, crop(block_input, 1, 1, block_input.rows - 2, block_input.cols - 2));

        const int r_out = l + 1 < rings.size() ? rings[l + 1] : 0;
        const int top = frac_mul_exact(window.a, layer.out_rows_full) - r_out;
        const int left = frac_mul_exact(window.b, layer.out_cols_full) - r_out;
        for (int i = 0; i < x.rows; ++i) {
            const bool row_out = top + i < 0 || top + i >= layer.out_rows_full;
            for (int j = 0; j < x.cols; ++j) {
                if (!row_out && left + j >= 0 && left + j < layer.out_cols_full) continue;
                float* p = &x.data[x.index(i, j, 0)];
                std::fill_n(p, x.channels, 0.0f);
            }
        }
        if (layer_outputs)
            layer_outputs->push_back(
                crop(x, r_out, r_out, x.rows - 2 * r_out, x.cols - 2 * r_out));
    }
    return x;
}

// One step of the single-cell variant for a caller-chosen action.
inline StepResult step(SingleCellSession& s, const Tensor& frame, int action,
                       std::vector<Tensor>* layer_outputs = nullptr) {
    const StreamModel& model = *s.model;
    StepResult out;
    out.action = action;
    out.next_action = action;
    const Window& window = s.windows[static_cast<std::size_t>(action)];
    const int top = frac_mul_exact(window.a, frame.rows);
    const int left = frac_mul_exact(window.b, frame.cols);
    const Tensor frame_crop = crop(frame, top, left, frac_mul_exact(window.h, frame.rows),
                                   frac_mul_exact(window.w, frame.cols));
    state_update_inplace(s.input_cell, frame_crop, window.a, window.b);
    const Tensor extended = feature_propagate(s.input_cell, window.a, window.b);
    const Tensor features = single_cell_backbone(model, extended, window, layer_outputs);
    predict_from_crop(model, features, window, s.restore, s.mask_memory, out);
    s.last_boxes = out.boxes;
    return out;
}

// ---- context-recovery oracle ----

struct OracleReport {
    // [scan][layer] mean absolute deviation of assembled full-frame block
    // outputs against the stateless reference.
    std::vector<std::vector<double>> single_cell_mad;
    std::vector<std::vector<double>> incremental_mad;
    std::vector<double> single_cell_final;   // per scan, last layer
    std::vector<double> incremental_final;   // per scan, last layer
    int incremental_converged_scan = -1;     // first scan whose memories repeat exactly
    int num_layers = 0;
    int num_scans = 0;
};

// Scans a static scene with both cell variants and reports per-layer
// deviations from the stateless full-frame network.
inline OracleReport oracle_check(const StreamModel& model, const Tensor& scene, int num_scans = 0) {
    OracleReport report;
    const int layers = static_cast<int>(model.layers.size());
    report.num_layers = layers;
    if (num_scans <= 0) num_scans = layers + 3;
    report.num_scans = num_scans;

    // reference full-frame maps per layer
    ForwardCache ref_cache;
    stateless_backbone(model, scene, &ref_cache);

    const auto windows = enumerate_actions(model.cfg.space);

    auto make_assembly = [&]() {
        std::vector<Tensor> assembled;
        for (const BottleneckLayer& layer : model.layers)
            assembled.emplace_back(layer.out_rows_full, layer.out_cols_full, layer.out_channels);
        return assembled;
    };
    auto assemble = [&](std::vector<Tensor>& assembled, const std::vector<Tensor>& outputs,
                        const Window& win) {
        for (int l = 0; l < layers; ++l) {
            const BottleneckLayer& layer = model.layers[static_cast<std::size_t>(l)];
            const int top = frac_mul_exact(win.a, layer.out_rows_full);
            const int left = frac_mul_exact(win.b, layer.out_cols_full);
            paste_inplace(assembled[static_cast<std::size_t>(l)],
                          outputs[static_cast<std::size_t>(l)], top, left);
        }
    };
    auto measure = [&](const std::vector<Tensor>& assembled,
                       std::vector<std::vector<double>>& out_mad, std::vector<double>& out_final) {
        std::vector<double> mads;
        for (int l = 0; l < layers; ++l)
            mads.push_back(mean_abs_diff(assembled[static_cast<std::size_t>(l)],
                                         ref_cache.layers[static_cast<std::size_t>(l)].block_output));
        out_final.push_back(mads.back());
        out_mad.push_back(std::move(mads));
    };

    // variant: single cell at the input
    {
        SingleCellSession s = make_single_cell_session(model);
        std::vector<Tensor> assembled = make_assembly();
        for (int scan = 0; scan < num_scans; ++scan) {
            for (std::size_t w = 0; w < windows.size(); ++w) {
                std::vector<Tensor> outputs;
                step(s, scene, static_cast<int>(w), &outputs);
                assemble(assembled, outputs, windows[w]);
            }
            measure(assembled, report.single_cell_mad, report.single_cell_final);
        }
    }

    // variant: incremental cells throughout the network
    {
        std::vector<CellState> cells;
        for (const BottleneckLayer& layer : model.layers)
            cells.emplace_back(layer.cell_geom, layer.expanded_channels);
        std::vector<Tensor> assembled = make_assembly();
        std::vector<Tensor> prev_memories;
        for (int scan = 0; scan < num_scans; ++scan) {
            for (const Window& win : windows) {
                const int top = frac_mul_exact(win.a, scene.rows);
                const int left = frac_mul_exact(win.b, scene.cols);
                const Tensor frame_crop = crop(scene, top, left, frac_mul_exact(win.h, scene.rows),
                                               frac_mul_exact(win.w, scene.cols));
                std::vector<Tensor> outputs;
                backbone_crop_forward(model, cells, frame_crop, win, true, nullptr, &outputs);
                assemble(assembled, outputs, win);
            }
            measure(assembled, report.incremental_mad, report.incremental_final);


            std::vector<Tensor> memories;
            for (const CellState& c : cells) memories.push_back(c.memory);
            if (report.incremental_converged_scan < 0 && !prev_memories.empty()) {
                bool same = true;
                for (std::size_t i = 0; i < memories.size() && same; ++i)
                    same = max_abs_diff(memories[i], prev_memories[i]) == 0.0;
                if (same) report.incremental_converged_scan = scan;
            }
            prev_memories = std::move(memories);
        }
    }
    return report;
}

}  // namespace patchwork
