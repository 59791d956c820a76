#pragma once

// Task-model training: frozen-statistics normalization calibration, SSD-style
// detection and segmentation losses, hand-derived backward through the
// bottleneck stack, and the three-stage schedule (single-frame task training,
// Q-learning on the frozen model, joint fine-tuning at a lower rate).

#include <array>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "patchwork/dqn.hpp"
#include "patchwork/grad.hpp"
#include "patchwork/model.hpp"

namespace patchwork {

// ---- gradient and optimizer containers mirroring StreamModel ----

struct DetHeadGrad {
    ConvGrad hidden, out;
    explicit DetHeadGrad(const DetHead& h) : hidden(h.has_hidden ? ConvGrad(h.hidden) : ConvGrad()),
                                             out(h.out) {}
    DetHeadGrad() = default;
};

struct ModelGrad {
    struct LayerGrad {
        ConvGrad expand, dw, project;
    };
    std::vector<LayerGrad> layers;
    DetHeadGrad hires, restored, pyr1_head, pyr2_head;
    ConvGrad pyr1_dw, pyr1_pw, pyr2_dw, pyr2_pw;
    ConvGrad seg_hidden, seg_out;

    explicit ModelGrad(const StreamModel& m) {
        for (const BottleneckLayer& l : m.layers)
            layers.push_back({l.has_expand ? ConvGrad(l.expand) : ConvGrad(), ConvGrad(l.dw),
                              ConvGrad(l.project)});
        hires = DetHeadGrad(m.hires_head);
        restored = DetHeadGrad(m.restored_head);
        pyr1_head = DetHeadGrad(m.pyr1_head);
        pyr2_head = DetHeadGrad(m.pyr2_head);
        pyr1_dw = ConvGrad(m.pyr1.dw);
        pyr1_pw = ConvGrad(m.pyr1.pw);
        pyr2_dw = ConvGrad(m.pyr2.dw);
        pyr2_pw = ConvGrad(m.pyr2.pw);
        seg_hidden = ConvGrad(m.seg.hidden);
        seg_out = ConvGrad(m.seg.out);
    }

    void zero() {
        for (auto& l : layers) {
            l.expand.zero();
            l.dw.zero();
            l.project.zero();
        }
        for (DetHeadGrad* h : {&hires, &restored, &pyr1_head, &pyr2_head}) {
            h->hidden.zero();
            h->out.zero();
        }
        for (ConvGrad* g : {&pyr1_dw, &pyr1_pw, &pyr2_dw, &pyr2_pw, &seg_hidden, &seg_out})
            g->zero();
    }
};

struct ModelOpt {
    struct Pair {
        SgdState values, bias;
    };
    std::vector<std::array<Pair, 3>> layers;  // expand, dw, project
    Pair hires_hidden, hires_out, restored_out, pyr1h_out, pyr2h_out;
    Pair pyr1_dw, pyr1_pw, pyr2_dw, pyr2_pw, seg_hidden, seg_out;

    explicit ModelOpt(const StreamModel& m) : layers(m.layers.size()) {}
};

namespace detail {

inline void sgd_conv(ConvWeights& w, const ConvGrad& g, ModelOpt::Pair& st, double lr, double mom,
                     double scale) {
    if (g.values.empty()) return;
    sgd_step(w.values, g.values, st.values, lr, mom, scale);
    sgd_step(w.bias, g.bias, st.bias, lr, mom, scale);
}

}  // namespace detail

inline double model_grad_norm(const ModelGrad& g) {
    double s = 0.0;
    auto add = [&](const std::vector<float>& v) {
        for (const float x : v) s += static_cast<double>(x) * x;
    };
    for (const auto& l : g.layers) {
        add(l.expand.values);
        add(l.expand.bias);
        add(l.dw.values);
        add(l.dw.bias);
        add(l.project.values);
        add(l.project.bias);
    }
    for (const DetHeadGrad* h : {&g.hires, &g.restored, &g.pyr1_head, &g.pyr2_head}) {
        add(h->hidden.values);
        add(h->hidden.bias);
        add(h->out.values);
        add(h->out.bias);
    }
    for (const ConvGrad* c :
         {&g.pyr1_dw, &g.pyr1_pw, &g.pyr2_dw, &g.pyr2_pw, &g.seg_hidden, &g.seg_out}) {
        add(c->values);
        add(c->bias);
    }
    return std::sqrt(s);
}

inline void apply_model_grad(StreamModel& m, const ModelGrad& g, ModelOpt& opt, double lr,
                             double momentum, double scale) {
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        BottleneckLayer& layer = m.layers[l];
        if (layer.has_expand)
            detail::sgd_conv(layer.expand, g.layers[l].expand, opt.layers[l][0], lr, momentum, scale);
        detail::sgd_conv(layer.dw, g.layers[l].dw, opt.layers[l][1], lr, momentum, scale);
        detail::sgd_conv(layer.project, g.layers[l].project, opt.layers[l][2], lr, momentum, scale);
    }
    if (m.hires_head.has_hidden)
        detail::sgd_conv(m.hires_head.hidden, g.hires.hidden, opt.hires_hidden, lr, momentum, scale);
    detail::sgd_conv(m.hires_head.out, g.hires.out, opt.hires_out, lr, momentum, scale);
    detail::sgd_conv(m.restored_head.out, g.restored.out, opt.restored_out, lr, momentum, scale);
    detail::sgd_conv(m.pyr1_head.out, g.pyr1_head.out, opt.pyr1h_out, lr, momentum, scale);
    detail::sgd_conv(m.pyr2_head.out, g.pyr2_head.out, opt.pyr2h_out, lr, momentum, scale);
    detail::sgd_conv(m.pyr1.dw, g.pyr1_dw, opt.pyr1_dw, lr, momentum, scale);
    detail::sgd_conv(m.pyr1.pw, g.pyr1_pw, opt.pyr1_pw, lr, momentum, scale);
    detail::sgd_conv(m.pyr2.dw, g.pyr2_dw, opt.pyr2_dw, lr, momentum, scale);
    detail::sgd_conv(m.pyr2.pw, g.pyr2_pw, opt.pyr2_pw, lr, momentum, scale);
    detail::sgd_conv(m.seg.hidden, g.seg_hidden, opt.seg_hidden, lr, momentum, scale);
    detail::sgd_conv(m.seg.out, g.seg_out, opt.seg_out, lr, momentum, scale);
}

// ---- training forward (records every intermediate the backward needs) ----

struct HeadFwd {
    Tensor input;
    Tensor hidden_prerelu;
    Tensor hidden_post;
    Tensor raw;
};

inline HeadFwd det_head_forward(const DetHead& head, const Tensor& input) {
    HeadFwd f;
    f.input = input;
    if (head.has_hidden) {
        f.hidden_prerelu = pointwise_conv(input, head.hidden);
        f.hidden_post = leaky_relu(f.hidden_prerelu, kActivationSlope);
        f.raw = pointwise_conv(f.hidden_post, head.out);
    } else {
        f.raw = pointwise_conv(input, head.out);
    }
    return f;
}

inline Tensor det_head_backward(const DetHead& head, const HeadFwd& f, const Tensor& d_raw,
                                DetHeadGrad& g) {
    if (head.has_hidden) {
        Tensor dh = pointwise_backward(f.hidden_post, head.out, d_raw, g.out);
        leaky_relu_backward_inplace(dh, f.hidden_prerelu, kActivationSlope);
        return pointwise_backward(f.input, head.hidden, dh, g.hidden);
    }
    return pointwise_backward(f.input, head.out, d_raw, g.out);
}

struct PyramidFwd {
    Tensor dw_input_padded;
    Tensor pw_input;    // post depthwise + norm
    Tensor pw_prerelu;  // post pointwise + norm, before ReLU
    Tensor out;
};

inline PyramidFwd pyramid_forward(const PyramidLayer& p, const Tensor& in) {
    PyramidFwd f;
    f.dw_input_padded = zero_pad(in, 1);
    f.pw_input = depthwise_conv_valid(f.dw_input_padded, p.dw, 2);
    affine_inplace(f.pw_input, p.dw_norm);
    f.pw_prerelu = pointwise_conv(f.pw_input, p.pw);
    affine_inplace(f.pw_prerelu, p.pw_norm);
    f.out = leaky_relu(f.pw_prerelu, kActivationSlope);
    return f;
}

inline Tensor pyramid_backward(const PyramidLayer& p, const PyramidFwd& f, Tensor d_out,
                               ConvGrad& g_dw, ConvGrad& g_pw) {
    leaky_relu_backward_inplace(d_out, f.pw_prerelu, kActivationSlope);
    affine_backward_inplace(d_out, p.pw_norm);
    Tensor d_pw_in = pointwise_backward(f.pw_input, p.pw, d_out, g_pw);
    affine_backward_inplace(d_pw_in, p.dw_norm);
    const Tensor d_padded = depthwise_valid_backward(f.dw_input_padded, p.dw, 2, d_pw_in, g_dw);
    return crop(d_padded, 1, 1, d_padded.rows - 2, d_padded.cols - 2);
}

struct TaskForward {
    ForwardCache backbone;
    Tensor features;  // backbone output of the crop (or full frame)
    Tensor full_map;  // restored full map; equals features in full-frame mode
    Window window;
    bool crop_mode = false;
    HeadFwd hires, restored, pyr1h, pyr2h, seg;
    PyramidFwd p1, p2;
    std::vector<AnchorGrid> grids;  // hires, restored, pyr1, pyr2
};

namespace detail {

inline void task_heads_forward(const StreamModel& model, TaskForward& f) {
    const ModelConfig& cfg = model.cfg;
    f.hires = det_head_forward(model.hires_head, f.features);
    f.restored = det_head_forward(model.restored_head, f.full_map);
    f.p1 = pyramid_forward(model.pyr1, f.full_map);
    f.p2 = pyramid_forward(model.pyr2, f.p1.out);
    f.pyr1h = det_head_forward(model.pyr1_head, f.p1.out);
    f.pyr2h = det_head_forward(model.pyr2_head, f.p2.out);
    f.grids = {AnchorGrid{f.hires.raw.rows, f.hires.raw.cols, f.window.a.value(),
                          f.window.b.value(), f.window.h.value(), f.window.w.value(),
                          cfg.anchor_scale},
               AnchorGrid{f.restored.raw.rows, f.restored.raw.cols, 0, 0, 1, 1, cfg.anchor_scale},
               AnchorGrid{f.pyr1h.raw.rows, f.pyr1h.raw.cols, 0, 0, 1, 1, cfg.anchor_scale},
               AnchorGrid{f.pyr2h.raw.rows, f.pyr2h.raw.cols, 0, 0, 1, 1, cfg.anchor_scale}};

    f.seg.input = f.features;
    f.seg.hidden_prerelu = pointwise_conv(f.features, model.seg.hidden);
    f.seg.hidden_post = leaky_relu(f.seg.hidden_prerelu, kActivationSlope);
    f.seg.raw = pointwise_conv(f.seg.hidden_post, model.seg.out);
}

}  // namespace detail

inline TaskForward task_forward_full(const StreamModel& model, const Tensor& frame) {
    TaskForward f;
    f.window = Window{Frac(0, 1), Frac(0, 1), Frac(1, 1), Frac(1, 1)};
    f.features = stateless_backbone(model, frame, &f.backbone);
    f.full_map = f.features;
    detail::task_heads_forward(model, f);
    return f;
}

inline TaskForward task_forward_crop(const StreamModel& model, std::vector<CellState>& cells,
                                     CellState& restore, const Tensor& frame, const Window& window,
                                     bool cells_enabled) {
    TaskForward f;
    f.crop_mode = true;
    f.window = window;
    const int top = frac_mul_exact(window.a, frame.rows);
    const int left = frac_mul_exact(window.b, frame.cols);
    const Tensor frame_crop = crop(frame, top, left, frac_mul_exact(window.h, frame.rows),
                                   frac_mul_exact(window.w, frame.cols));
    f.features = backbone_crop_forward(model, cells, frame_crop, window, cells_enabled, &f.backbone);
    state_update_inplace(restore, f.features, window.a, window.b);
    f.full_map = restore.memory;
    detail::task_heads_forward(model, f);
    return f;
}

// ---- losses ----

struct TaskLossConfig {
    double lambda_box = 1.0;
    double lambda_seg = 0.5;
    double positive_iou = 0.6;
    double ignore_iou = 0.4;
    int neg_per_pos = 3;
    int min_negatives = 6;
};

struct TaskLoss {
    double score_loss = 0.0;
    double box_loss = 0.0;
    double seg_loss = 0.0;
    int num_pos = 0;
    double total() const { return score_loss + box_loss + seg_loss; }
};

namespace detail {

struct AnchorRef {
    int map;  // 0 hires, 1 restored, 2 pyr1, 3 pyr2
    int gy, gx;
    Box box;
};

inline double smooth_l1_grad(double diff, double& loss) {
    const double a = std::abs(diff);
    if (a < 1.0) {
        loss += 0.5 * diff * diff;
        return diff;
    }
    loss += a - 0.5;
    return diff > 0 ? 1.0 : -1.0;
}

}  // namespace detail

// Computes detection + segmentation losses and fills per-map gradient
// tensors (same shapes as the raw head outputs / seg logits). In crop mode
// only anchors whose centers lie inside the current window take part: the
// rest of the restored map is stale memory, so supervising it against the
// current frame's ground truth would teach the heads to hedge.
inline TaskLoss task_loss_backward_maps(const StreamModel& model, const TaskForward& f,
                                        const std::vector<Box>& gt_boxes, const Mask& gt_mask,
                                        const TaskLossConfig& lcfg, std::vector<Tensor>& d_raw,
                                        Tensor& d_seg) {
    TaskLoss loss;
    const std::vector<const Tensor*> raw = {&f.hires.raw, &f.restored.raw, &f.pyr1h.raw,
                                            &f.pyr2h.raw};
    d_raw.clear();
    for (const Tensor* r : raw) d_raw.emplace_back(r->rows, r->cols, 5);

    const double wy0 = f.window.a.value(), wx0 = f.window.b.value();
    const double wy1 = wy0 + f.window.h.value(), wx1 = wx0 + f.window.w.value();
    auto center_fresh = [&](const Box& anchor) {
        if (!f.crop_mode) return true;
        const double cy = (anchor.ymin + anchor.ymax) / 2.0;
        const double cx = (anchor.xmin + anchor.xmax) / 2.0;
        return cy >= wy0 && cy <= wy1 && cx >= wx0 && cx <= wx1;
    };

    // collect anchors over fresh content
    std::vector<detail::AnchorRef> anchors;
    for (int m = 0; m < 4; ++m)
        for (int gy = 0; gy < raw[static_cast<std::size_t>(m)]->rows; ++gy)
            for (int gx = 0; gx < raw[static_cast<std::size_t>(m)]->cols; ++gx) {
                detail::AnchorRef ar{m, gy, gx,
                                     f.grids[static_cast<std::size_t>(m)].anchor(gy, gx)};
                if (center_fresh(ar.box)) anchors.push_back(ar);
            }

    // assignment: best anchor per gt is positive; anchors above the positive
    // IoU threshold are positive for their best gt; a band below is ignored
    std::vector<int> assigned(anchors.size(), -1);  // gt index, -1 negative, -2 ignored
    std::vector<double> best_iou(anchors.size(), 0.0);
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
            const double o = iou(anchors[a].box, gt_boxes[g]);
            if (o > best_iou[a]) {
                best_iou[a] = o;
                if (o >= lcfg.positive_iou)
                    assigned[a] = static_cast<int>(g);
                else if (o >= lcfg.ignore_iou)
                    assigned[a] = -2;
            }
        }
    }
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
        int best = -1;
        double best_o = 0.0;
        for (std::size_t a = 0; a < anchors.size(); ++a) {
            const double o = iou(anchors[a].box, gt_boxes[g]);
            if (o > best_o) {
                best_o = o;
                best = static_cast<int>(a);
            }
        }
        if (best >= 0 && best_o > 0.0) assigned[static_cast<std::size_t>(best)] = static_cast<int>(g);
    }

    int num_pos = 0;
    for (const int a : assigned) num_pos += a >= 0 ? 1 : 0;
    loss.num_pos = num_pos;

    // hard negative mining by predicted score
    std::vector<std::pair<double, std::size_t>> negatives;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        if (assigned[a] != -1) continue;
        const auto& ar = anchors[a];
        const double logit = raw[static_cast<std::size_t>(ar.map)]->at(ar.gy, ar.gx, 4);
        negatives.emplace_back(logit, a);
    }
    const std::size_t keep_negs =
        std::min(negatives.size(),
                 static_cast<std::size_t>(std::max(lcfg.min_negatives, lcfg.neg_per_pos * num_pos)));
    std::partial_sort(negatives.begin(), negatives.begin() + static_cast<std::ptrdiff_t>(keep_negs),
                      negatives.end(), [](const auto& x, const auto& y) {
                          if (x.first != y.first) return x.first > y.first;
                          return x.second < y.second;
                      });

    const double score_norm = 1.0 / std::max<std::size_t>(1, num_pos + keep_negs);
    auto bce = [&](const detail::AnchorRef& ar, double target) {
        const double logit = raw[static_cast<std::size_t>(ar.map)]->at(ar.gy, ar.gx, 4);
        const double p = sigmoid(logit);
        loss.score_loss += score_norm * -(target * std::log(std::max(p, 1e-9)) +
                                          (1.0 - target) * std::log(std::max(1.0 - p, 1e-9)));
        d_raw[static_cast<std::size_t>(ar.map)].at(ar.gy, ar.gx, 4) =
            static_cast<float>(score_norm * (p - target));
    };

    const double box_norm = lcfg.lambda_box / std::max(1, num_pos);
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        if (assigned[a] < 0) continue;
        const auto& ar = anchors[a];
        bce(ar, 1.0);
        const Box& gt = gt_boxes[static_cast<std::size_t>(assigned[a])];
        const Box& an = ar.box;
        const double ah = an.ymax - an.ymin, aw = an.xmax - an.xmin;
        const double targets[4] = {
            ((gt.ymin + gt.ymax) / 2.0 - (an.ymin + an.ymax) / 2.0) / ah,
            ((gt.xmin + gt.xmax) / 2.0 - (an.xmin + an.xmax) / 2.0) / aw,
            std::clamp(std::log((gt.ymax - gt.ymin) / ah), -2.0, 2.0),
            std::clamp(std::log((gt.xmax - gt.xmin) / aw), -2.0, 2.0)};
        for (int c = 0; c < 4; ++c) {
            double l = 0.0;
            const double g = detail::smooth_l1_grad(
                raw[static_cast<std::size_t>(ar.map)]->at(ar.gy, ar.gx, c) - targets[c], l);
            loss.box_loss += box_norm * l;
            d_raw[static_cast<std::size_t>(ar.map)].at(ar.gy, ar.gx, c) =
                static_cast<float>(box_norm * g);
        }
    }
    for (std::size_t i = 0; i < keep_negs; ++i) bce(anchors[negatives[i].second], 0.0);

    // segmentation: block-majority target over the logits' footprint
    const Tensor& logits = f.seg.raw;
    d_seg = Tensor(logits.rows, logits.cols, 1);
    const int up = model.total_stride;
    const int frame_top = frac_mul_exact(f.window.a, gt_mask.rows);
    const int frame_left = frac_mul_exact(f.window.b, gt_mask.cols);
    const double seg_norm = lcfg.lambda_seg / (static_cast<double>(logits.rows) * logits.cols);
    for (int r = 0; r < logits.rows; ++r)
        for (int c = 0; c < logits.cols; ++c) {
            int fg = 0;
            for (int dr = 0; dr < up; ++dr)
                for (int dc = 0; dc < up; ++dc)
                    fg += gt_mask.at(frame_top + r * up + dr, frame_left + c * up + dc) ? 1 : 0;
            const double target = fg * 2 >= up * up ? 1.0 : 0.0;
            const double p = sigmoid(logits.at(r, c, 0));
            loss.seg_loss += seg_norm * -(target * std::log(std::max(p, 1e-9)) +
                                          (1.0 - target) * std::log(std::max(1.0 - p, 1e-9)));
            d_seg.at(r, c, 0) = static_cast<float>(seg_norm * (p - target));
        }
    return loss;
}

// ---- backward through heads and backbone ----

inline void backbone_backward(const StreamModel& model, const ForwardCache& cache, Tensor delta,
                              ModelGrad& grads) {
    for (int l = static_cast<int>(model.layers.size()) - 1; l >= 0; --l) {
        const BottleneckLayer& layer = model.layers[static_cast<std::size_t>(l)];
        const LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
        ModelGrad::LayerGrad& lg = grads.layers[static_cast<std::size_t>(l)];
        Tensor residual_delta;
        if (layer.residual) residual_delta = delta;

        affine_backward_inplace(delta, layer.project_norm);
        delta = pointwise_backward(lc.project_input, layer.project, delta, lg.project);
        leaky_relu_backward_inplace(delta, lc.dw_prerelu, kActivationSlope);
        affine_backward_inplace(delta, layer.dw_norm);
        const Tensor d_enlarged =
            depthwise_valid_backward(lc.dw_input, layer.dw, layer.stride, delta, lg.dw);
        // ring / zero padding is constant: only the interior flows back
        delta = crop(d_enlarged, 1, 1, d_enlarged.rows - 2, d_enlarged.cols - 2);
        if (layer.has_expand) {
            leaky_relu_backward_inplace(delta, lc.expand_prerelu, kActivationSlope);
            affine_backward_inplace(delta, layer.expand_norm);
            delta = pointwise_backward(lc.block_input, layer.expand, delta, lg.expand);
        }
        if (layer.residual) add_inplace(delta, residual_delta);
    }
}

// Full backward: head gradients -> feature/full-map deltas -> backbone.
inline void task_backward(const StreamModel& model, const TaskForward& f,
                          const std::vector<Tensor>& d_raw, const Tensor& d_seg,
                          ModelGrad& grads) {
    Tensor d_features(f.features.rows, f.features.cols, f.features.channels);
    Tensor d_full(f.full_map.rows, f.full_map.cols, f.full_map.channels);

    add_inplace(d_features, det_head_backward(model.hires_head, f.hires, d_raw[0], grads.hires));
    add_inplace(d_full, det_head_backward(model.restored_head, f.restored, d_raw[1], grads.restored));

    Tensor d_p1 = det_head_backward(model.pyr1_head, f.pyr1h, d_raw[2], grads.pyr1_head);
    const Tensor d_p2 = det_head_backward(model.pyr2_head, f.pyr2h, d_raw[3], grads.pyr2_head);
    add_inplace(d_p1, pyramid_backward(model.pyr2, f.p2, d_p2, grads.pyr2_dw, grads.pyr2_pw));
    add_inplace(d_full, pyramid_backward(model.pyr1, f.p1, d_p1, grads.pyr1_dw, grads.pyr1_pw));

    // segmentation head
    {
        Tensor dh = pointwise_backward(f.seg.hidden_post, model.seg.out, d_seg, grads.seg_out);
        leaky_relu_backward_inplace(dh, f.seg.hidden_prerelu, kActivationSlope);
        add_inplace(d_features, pointwise_backward(f.seg.input, model.seg.hidden, dh, grads.seg_hidden));
    }

    // restored map: only the window block was written this step; the stale
    // remainder is constant
    if (f.crop_mode) {
        const int top = frac_mul_exact(f.window.a, d_full.rows);
        const int left = frac_mul_exact(f.window.b, d_full.cols);
        add_inplace(d_features, crop(d_full, top, left, d_features.rows, d_features.cols));
    } else {
        add_inplace(d_features, d_full);
    }

    backbone_backward(model, f.backbone, std::move(d_features), grads);
}

inline TaskLoss task_train_step(const StreamModel& model, const TaskForward& f,
                                const std::vector<Box>& gt_boxes, const Mask& gt_mask,
                                const TaskLossConfig& lcfg, ModelGrad& grads) {
    std::vector<Tensor> d_raw;
    Tensor d_seg;
    const TaskLoss loss = task_loss_backward_maps(model, f, gt_boxes, gt_mask, lcfg, d_raw, d_seg);
    task_backward(model, f, d_raw, d_seg, grads);
    return loss;
}

// ---- normalization calibration ----

namespace detail {

struct ChannelStats {
    std::vector<double> sum, sq;
    std::size_t count = 0;
    explicit ChannelStats(int ch) : sum(static_cast<std::size_t>(ch), 0.0),
                                    sq(static_cast<std::size_t>(ch), 0.0) {}

    void add(const Tensor& t) {
        const std::size_t n = static_cast<std::size_t>(t.rows) * t.cols;
        const float* p = t.data.data();
        for (std::size_t i = 0; i < n; ++i, p += t.channels)
            for (int c = 0; c < t.channels; ++c) {
                sum[static_cast<std::size_t>(c)] += p[c];
                sq[static_cast<std::size_t>(c)] += static_cast<double>(p[c]) * p[c];
            }
        count += n;
    }

    ChannelAffine affine() const {
        ChannelAffine a;
        a.scale.resize(sum.size());
        a.shift.resize(sum.size());
        for (std::size_t c = 0; c < sum.size(); ++c) {
            const double mean = sum[c] / static_cast<double>(count);
            const double var = sq[c] / static_cast<double>(count) - mean * mean;
            const double scale = std::min(100.0, 1.0 / std::sqrt(std::max(var, 1e-6)));
            a.scale[static_cast<std::size_t>(c)] = static_cast<float>(scale);
            a.shift[static_cast<std::size_t>(c)] = static_cast<float>(-mean * scale);
        }
        return a;
    }
};

}  // namespace detail

// Fixes every normalization site to whiten its pre-activation statistics
// over the calibration frames. Sites are calibrated front to back so each
// one sees the effect of all earlier ones. The affines stay frozen for the
// rest of training.
inline void calibrate_normalization(StreamModel& model, const std::vector<Tensor>& frames) {
    if (frames.empty()) throw std::invalid_argument("calibrate_normalization: no frames");
    const int L = static_cast<int>(model.layers.size());
    // three sites per layer: expand, depthwise, project
    for (int l = 0; l < L; ++l) {
        BottleneckLayer& layer = model.layers[static_cast<std::size_t>(l)];
        for (int site = 0; site < 3; ++site) {
            if (site == 0 && !layer.has_expand) continue;
            detail::ChannelStats stats(site == 2 ? layer.out_channels : layer.expanded_channels);
            for (const Tensor& frame : frames) {
                ForwardCache cache;
                stateless_backbone(model, frame, &cache);
                const LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];
                if (site == 0)
                    stats.add(lc.expand_prerelu);
                else if (site == 1)
                    stats.add(lc.dw_prerelu);
                else
                    stats.add(lc.project_out);
            }
            ChannelAffine a = stats.affine();
            if (site == 0)
                layer.expand_norm = std::move(a);
            else if (site == 1)
                layer.dw_norm = std::move(a);
            else
                layer.project_norm = std::move(a);
        }
    }
    // pyramid sites
    std::vector<Tensor> maps;
    for (const Tensor& frame : frames) maps.push_back(stateless_backbone(model, frame));
    auto calibrate_pyramid = [&](PyramidLayer& p, const std::vector<Tensor>& ins) {
        detail::ChannelStats dw_stats(p.dw.out_channels);
        for (const Tensor& in : ins)
            dw_stats.add(depthwise_conv_valid(zero_pad(in, 1), p.dw, 2));
        p.dw_norm = dw_stats.affine();
        detail::ChannelStats pw_stats(p.pw.out_channels);
        std::vector<Tensor> outs;
        for (const Tensor& in : ins) {
            Tensor mid = depthwise_conv_valid(zero_pad(in, 1), p.dw, 2);
            affine_inplace(mid, p.dw_norm);
            Tensor out = pointwise_conv(mid, p.pw);
            pw_stats.add(out);
            outs.push_back(std::move(out));
        }
        p.pw_norm = pw_stats.affine();
        for (Tensor& out : outs) {
            affine_inplace(out, p.pw_norm);
            relu_inplace(out);
        }
        return outs;
    };
    const std::vector<Tensor> p1_outs = calibrate_pyramid(model.pyr1, maps);
    calibrate_pyramid(model.pyr2, p1_outs);
}

// ---- data sampling for training and evaluation ----

struct SceneConfig {
    int frame_rows = 64;
    int frame_cols = 64;
    int episode_frames = 24;
    double pan_scan_fraction = 0.0;
    double pan_scan_sigma = 0.5;
};

// Training mix: mostly multi-object scenes, some large and static objects,
// an occasional empty frame. Held-out evaluation uses multi and large only.
inline Episode sample_episode(const SceneConfig& cfg, std::uint64_t seed, bool eval_mix) {
    Rng pick(mix_seed(seed, 0xeb15c0de));
    const double u = pick.uniform();
    Scenario scenario;
    int objects;
    if (eval_mix) {
        scenario = u < 0.5 ? Scenario::multi : Scenario::large;
        objects = scenario == Scenario::multi ? 2 + (pick.bernoulli(0.3) ? 1 : 0) : 1;
    } else if (u < 0.55) {
        scenario = Scenario::multi;
        objects = 2 + (pick.bernoulli(0.3) ? 1 : 0);
    } else if (u < 0.80) {
        scenario = Scenario::large;
        objects = 1;
    } else if (u < 0.93) {
        scenario = Scenario::stay;
        objects = 1;
    } else {
        scenario = Scenario::multi;
        objects = 0;
    }
    if (!eval_mix && cfg.pan_scan_fraction > 0.0 && pick.bernoulli(cfg.pan_scan_fraction)) {
        const Episode still = moving_shapes_scene(mix_seed(seed, 0x57171), 1, std::max(objects, 1),
                                                  cfg.frame_rows * 2, cfg.frame_cols * 2, scenario);
        return pan_scan_video(still.frames[0], still.gt_boxes[0], still.gt_masks[0],
                              cfg.episode_frames, cfg.pan_scan_sigma, mix_seed(seed, 0x9a2),
                              cfg.frame_rows, cfg.frame_cols);
    }
    return moving_shapes_scene(seed, cfg.episode_frames, objects, cfg.frame_rows, cfg.frame_cols,
                               scenario);
}

inline Tensor sample_frame(const SceneConfig& cfg, std::uint64_t seed) {
    Rng pick(mix_seed(seed, 0xf7a3e));
    Episode ep = sample_episode(cfg, seed, false);
    const int idx = pick.uniform_int(static_cast<int>(ep.frames.size()));
    return std::move(ep.frames[static_cast<std::size_t>(idx)]);
}

inline Episode eval_episode(const SceneConfig& cfg, std::uint64_t eval_seed, int index) {
    return sample_episode(cfg, mix_seed(eval_seed, 0xe7a1u + static_cast<std::uint64_t>(index)),
                          true);
}

// ---- three-stage training ----

struct TrainLogRow {
    long step = 0;
    double epsilon = 0.0;
    double mean_episode_reward = 0.0;
    double td_loss = 0.0;
    double eval_metric = 0.0;
};

struct TrainConfig {
    // stage 1: single-frame task training
    int stage1_iters = 2200;
    int stage1_batch = 4;
    double lr_stage1 = 0.01;
    double grad_clip = 5.0;  // global-norm clip on batch-mean task gradients
    double momentum = 0.9;
    int calib_frames = 32;
    // stage 2: Q-learning on the frozen task model
    int stage2_episodes = 1200;
    TrainerConfig trainer;
    // stage 3: joint fine-tune, lower rate
    int stage3_episodes = 120;
    double lr_stage3 = 0.0005;
    TaskLossConfig loss;
    std::uint64_t seed = 1;
    int eval_probe_episodes = 16;

    void validate() const {
        trainer.validate();
        if (lr_stage3 >= lr_stage1)
            throw std::invalid_argument(
                "TrainConfig: stage-3 learning rate must be below the stage-1 rate");
        if (stage1_iters < 1 || stage2_episodes < 0 || stage3_episodes < 0)
            throw std::invalid_argument("TrainConfig: bad iteration counts");
    }
};

using TrainProgressFn = std::function<void(const std::string& stage, const TrainLogRow&)>;

// Stage 1: single frames, full-frame stateless forward, task loss only.
inline void train_stage1(StreamModel& model, const SceneConfig& scenes, const TrainConfig& cfg,
                         const TrainProgressFn& progress = nullptr) {
    Rng rng(mix_seed(cfg.seed, 0x51a6e1));
    std::vector<Tensor> calib;
    for (int i = 0; i < cfg.calib_frames; ++i)
        calib.push_back(sample_frame(scenes, rng.next_u64()));
    calibrate_normalization(model, calib);

    ModelGrad grads(model);
    ModelOpt opt(model);
    double ema_loss = 0.0;
    const int warmup_iters = std::max(1, cfg.stage1_iters / 10);
    for (int it = 0; it < cfg.stage1_iters; ++it) {
        double lr = it < cfg.stage1_iters * 7 / 10 ? cfg.lr_stage1 : cfg.lr_stage1 * 0.3;
        if (it < warmup_iters) lr *= static_cast<double>(it + 1) / warmup_iters;
        grads.zero();
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.stage1_batch; ++b) {
            const std::uint64_t seed = rng.next_u64();
            Rng pick(mix_seed(seed, 0xf7a3e));
            Episode ep = sample_episode(scenes, seed, false);
            const int idx = pick.uniform_int(static_cast<int>(ep.frames.size()));
            const TaskForward f = task_forward_full(model, ep.frames[static_cast<std::size_t>(idx)]);
            batch_loss += task_train_step(model, f, ep.gt_boxes[static_cast<std::size_t>(idx)],
                                          ep.gt_masks[static_cast<std::size_t>(idx)], cfg.loss,
                                          grads)
                              .total();
        }
        double scale = 1.0 / cfg.stage1_batch;
        const double gnorm = model_grad_norm(grads) * scale;
        if (gnorm > cfg.grad_clip) scale *= cfg.grad_clip / gnorm;
        apply_model_grad(model, grads, opt, lr, cfg.momentum, scale);
        ema_loss = it == 0 ? batch_loss / cfg.stage1_batch
                           : 0.98 * ema_loss + 0.02 * batch_loss / cfg.stage1_batch;
        if (progress && (it + 1) % 200 == 0)
            progress("stage1", TrainLogRow{it + 1, 0.0, 0.0, ema_loss, 0.0});
    }
}

// Mean detection metric of the greedy policy over a fixed probe set.
inline double greedy_probe(const StreamModel& model, const QNet& qnet, const SceneConfig& scenes,
                           std::uint64_t seed, int episodes) {
    double sum = 0.0;
    for (int i = 0; i < episodes; ++i) {
        const Episode ep = eval_episode(scenes, seed, i);
        StreamSession session = make_session(model, Policy::greedy, mix_seed(seed, 77u + i), &qnet);
        sum += run_episode(session, ep).mean_det_f;
    }
    return episodes > 0 ? sum / episodes : 0.0;
}

// Stage 2: the task model is frozen; only the attention net trains.
inline void train_stage2(const StreamModel& model, QNet& qnet, const SceneConfig& scenes,
                         const TrainConfig& cfg, std::vector<TrainLogRow>* log = nullptr,
                         const TrainProgressFn& progress = nullptr) {
    Rng rng(mix_seed(cfg.seed, 0x52a6e2));
    TrainerConfig tc = cfg.trainer;
    const long total_frames = static_cast<long>(cfg.stage2_episodes) * scenes.episode_frames;
    if (tc.epsilon_decay_steps <= 0) tc.epsilon_decay_steps = static_cast<int>(total_frames / 2);

    QNet target = sync_target(qnet);
    ReplayBuffer replay(tc.replay_capacity);
    QNetGrad grad(qnet);
    QNetOpt opt;
    Rng sample_rng(mix_seed(cfg.seed, 0xba7c4));

    long frames = 0;
    int updates = 0;
    double last_loss = 0.0, reward_window = 0.0;
    double eval_metric = 0.0;
    int window_n = 0;
    const int probe_every = std::max(1, cfg.stage2_episodes / 10);
    QNet best_qnet = qnet;
    double best_metric = -1.0;

    for (int ep = 0; ep < cfg.stage2_episodes; ++ep) {
        const double eps =
            tc.epsilon_start + (tc.epsilon_end - tc.epsilon_start) *
                                   std::min(1.0, static_cast<double>(frames) / tc.epsilon_decay_steps);
        const Episode episode = sample_episode(scenes, rng.next_u64(), true);
        StreamSession session =
            make_session(model, Policy::epsilon_greedy, rng.next_u64(), &qnet, eps);
        EpisodeResult result = run_episode(session, episode, true);
        for (Transition& t : result.transitions) replay.push(std::move(t));
        frames += static_cast<long>(episode.frames.size());
        reward_window += result.total_reward;
        window_n += 1;

        const int n_updates = static_cast<int>(episode.frames.size()) / tc.train_every;
        TrainerConfig step_cfg = tc;
        if (ep >= cfg.stage2_episodes * 3 / 5) step_cfg.lr = tc.lr * 0.3;
        for (int k = 0; k < n_updates; ++k) {
            if (static_cast<int>(replay.size()) < tc.warmup) break;
            last_loss = td_update_inplace(qnet, replay.sample(tc.batch_size, sample_rng), target,
                                          step_cfg, grad, opt);
            ++updates;
            if (updates % tc.target_sync == 0) target = sync_target(qnet);
        }

        if ((ep + 1) % probe_every == 0 || ep + 1 == cfg.stage2_episodes) {
            eval_metric = greedy_probe(model, qnet, scenes, mix_seed(cfg.seed, 0x9e0be),
                                       cfg.eval_probe_episodes);
            if (eval_metric > best_metric) {
                best_metric = eval_metric;
                best_qnet = qnet;
            }
        }
        if (log || progress) {
            TrainLogRow row{frames, eps, window_n ? reward_window / window_n : 0.0, last_loss,
                            eval_metric};
            if ((ep + 1) % 25 == 0 || ep + 1 == cfg.stage2_episodes) {
                if (log) log->push_back(row);
                if (progress) progress("stage2", row);
                reward_window = 0.0;
                window_n = 0;
            }
        }
    }
    // keep the strongest probe checkpoint rather than the last oscillation
    if (best_metric >= 0.0) qnet = best_qnet;
}

// Stage 3: joint fine-tune. The recurrent model trains on its own stream
// (stale context is treated as constant) while Q-learning continues;
// normalization statistics stay frozen by construction. Task-model updates
// stop after 70% of the episodes so the value function can settle against
// the final features; the best probe checkpoint of that tail wins.
inline void train_stage3(StreamModel& model, QNet& qnet, const SceneConfig& scenes,
                         const TrainConfig& cfg, std::vector<TrainLogRow>* log = nullptr,
                         const TrainProgressFn& progress = nullptr) {
    Rng rng(mix_seed(cfg.seed, 0x53a6e3));
    TrainerConfig tc = cfg.trainer;
    tc.epsilon_decay_steps = 1;  // exploration pinned low during fine-tune

    QNet target = sync_target(qnet);
    ReplayBuffer replay(tc.replay_capacity);
    QNetGrad qgrad(qnet);
    QNetOpt qopt;
    Rng sample_rng(mix_seed(cfg.seed, 0xba7c5));

    ModelGrad grads(model);
    ModelOpt opt(model);
    int grad_frames = 0;
    const double eps = tc.epsilon_end;
    const int model_updates_until = cfg.stage3_episodes * 7 / 10;
    const int probe_every = std::max(1, cfg.stage3_episodes / 10);
    QNet best_qnet = qnet;
    double best_metric = -1.0;

    long frames = 0;
    int updates = 0;
    double last_loss = 0.0, reward_window = 0.0;
    int window_n = 0;
    for (int ep = 0; ep < cfg.stage3_episodes; ++ep) {
        const bool train_model = ep < model_updates_until;
        const Episode episode = sample_episode(scenes, rng.next_u64(), true);
        StreamSession session =
            make_session(model, Policy::epsilon_greedy, rng.next_u64(), &qnet, eps);

        std::shared_ptr<const Tensor> prev_state = std::make_shared<Tensor>(
            model.tap_geometry().state_rows(), model.tap_geometry().state_cols(),
            model.tap_channels());
        std::vector<float> prev_history(session.history.f.size(), 0.0f);
        std::vector<Box> prev_boxes;

        for (std::size_t t = 0; t < episode.frames.size(); ++t) {
            const Tensor& frame = episode.frames[t];
            const int action = session.next_action;
            const Window& window = session.windows[static_cast<std::size_t>(action)];

            const TaskForward f = task_forward_crop(model, session.cells, session.restore, frame,
                                                    window, session.cells_enabled);
            if (train_model) {
                task_train_step(model, f, episode.gt_boxes[t], episode.gt_masks[t], cfg.loss,
                                grads);
                ++grad_frames;
                if (grad_frames == 4) {
                    double scale = 1.0 / grad_frames;
                    const double gnorm = model_grad_norm(grads) * scale;
                    if (gnorm > cfg.grad_clip) scale *= cfg.grad_clip / gnorm;
                    apply_model_grad(model, grads, opt, cfg.lr_stage3, cfg.momentum, scale);
                    grads.zero();
                    grad_frames = 0;
                }
            }

            // predictions for the reward come from the updated restore/mask
            StepResult res;
            res.action = action;
            predict_from_crop(model, f.features, window, session.restore, session.mask_memory, res);
            session.last_boxes = res.boxes;
            session.history = update_history(session.history, action);
            std::vector<float> q = q_values(
                session.cells[static_cast<std::size_t>(model.tap_index())].memory, session.history,
                qnet);
            session.t += 1;
            session.next_action = select_action(session.policy, &q, session.t,
                                                model.cfg.space.num_actions(), session.rng, eps);

            const double f_prev = box_overlap_metric(episode.gt_boxes[t], prev_boxes);
            const double f_curr = box_overlap_metric(episode.gt_boxes[t], res.boxes);
            const double reward = td0_reward(f_curr, f_prev);
            prev_boxes = res.boxes;

            auto state = std::make_shared<Tensor>(
                session.cells[static_cast<std::size_t>(model.tap_index())].memory);
            Transition tr;
            tr.state = prev_state;
            tr.history = prev_history;
            tr.action = action;
            tr.reward = static_cast<float>(reward);
            tr.next_state = state;
            tr.next_history = session.history.f;
            tr.terminal = t + 1 == episode.frames.size();
            replay.push(std::move(tr));
            prev_state = std::move(state);
            prev_history = session.history.f;
            reward_window += reward;
            ++frames;

            if (frames % tc.train_every == 0 && static_cast<int>(replay.size()) >= tc.warmup) {
                last_loss = td_update_inplace(qnet, replay.sample(tc.batch_size, sample_rng), target,
                                              tc, qgrad, qopt);
                ++updates;
                if (updates % tc.target_sync == 0) target = sync_target(qnet);
            }
        }
        window_n += 1;
        double eval_metric = 0.0;
        if (!train_model && ((ep + 1) % probe_every == 0 || ep + 1 == cfg.stage3_episodes)) {
            eval_metric = greedy_probe(model, qnet, scenes, mix_seed(cfg.seed, 0x9e0bf),
                                       cfg.eval_probe_episodes);
            if (eval_metric > best_metric) {
                best_metric = eval_metric;
                best_qnet = qnet;
            }
        }
        if ((log || progress) && ((ep + 1) % 20 == 0 || ep + 1 == cfg.stage3_episodes)) {
            TrainLogRow row{frames, eps, reward_window / std::max(1, window_n), last_loss,
                            eval_metric};
            if (log) log->push_back(row);
            if (progress) progress("stage3", row);
            reward_window = 0.0;
            window_n = 0;
        }
    }
    if (best_metric >= 0.0) qnet = best_qnet;
}

struct TrainedBundle {
    StreamModel model;
    QNet qnet;
    std::vector<TrainLogRow> log;
};

// The full schedule: task model on single frames, Q-learning with the task
// model frozen, then a joint low-rate fine-tune.
inline TrainedBundle train_three_stage(const ModelConfig& mcfg, const SceneConfig& scenes,
                                       const TrainConfig& cfg,
                                       const TrainProgressFn& progress = nullptr) {
    cfg.validate();
    TrainedBundle bundle;
    Rng init_rng(mix_seed(cfg.seed, 0x1217));
    bundle.model = build_model(mcfg, init_rng);
    train_stage1(bundle.model, scenes, cfg, progress);
    Rng qrng(mix_seed(cfg.seed, 0x9a37));
    bundle.qnet = make_attention_net(bundle.model, qrng);
    train_stage2(bundle.model, bundle.qnet, scenes, cfg, &bundle.log, progress);
    train_stage3(bundle.model, bundle.qnet, scenes, cfg, &bundle.log, progress);
    return bundle;
}

}  // namespace patchwork
