#pragma once

#include <cmath>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchwork/attention.hpp"
#include "patchwork/model.hpp"

namespace patchwork {

// Multiply-add counted as 2 FLOPs; kernel_ops is the per-output-element
// reduction length.
inline double conv_flops(double output_elements, double kernel_ops) {
    return 2.0 * output_elements * kernel_ops;
}

// Analytic cost split: the depth multiplier rescales only the convolutional
// backbone/pyramid portion, head and attention cost stays fixed.
struct CostBreakdown {
    double conv_mflops = 0.0;
    double fixed_mflops = 0.0;
    double total() const { return conv_mflops + fixed_mflops; }
};

// Per-frame analytic FLOPs of the model. crop_mode counts the streaming
// configuration (backbone on the attention window, full-frame heads on the
// restored map, attention net included when given); otherwise the
// single-frame full-resolution network.
inline CostBreakdown count_model_flops(const StreamModel& model, bool crop_mode,
                                       const QNet* qnet = nullptr) {
    CostBreakdown cost;
    double conv = 0.0;

    for (const BottleneckLayer& l : model.layers) {
        const double in_r = crop_mode ? l.cell_geom.crop_rows : l.in_rows_full;
        const double in_c = crop_mode ? l.cell_geom.crop_cols : l.in_cols_full;
        const double out_r = in_r / l.stride, out_c = in_c / l.stride;
        if (l.has_expand) conv += conv_flops(in_r * in_c * l.expanded_channels, l.in_channels);
        conv += conv_flops(out_r * out_c * l.expanded_channels, 9.0);
        conv += conv_flops(out_r * out_c * l.out_channels, l.expanded_channels);
    }

    const double full_r = model.out_rows_full, full_c = model.out_cols_full;
    const double crop_r = crop_mode ? model.restore_geom.crop_rows : full_r;
    const double crop_c = crop_mode ? model.restore_geom.crop_cols : full_c;
    const int ch = model.backbone_channels;

    // pyramid runs on the restored full map in both modes
    conv += conv_flops(full_r / 2 * full_c / 2 * ch, 9.0);
    conv += conv_flops(full_r / 2 * full_c / 2 * model.cfg.pyr1_channels, ch);
    conv += conv_flops(full_r / 4 * full_c / 4 * model.cfg.pyr1_channels, 9.0);
    conv += conv_flops(full_r / 4 * full_c / 4 * model.cfg.pyr2_channels, model.cfg.pyr1_channels);

    double fixed = 0.0;
    auto head_cost = [&](const DetHead& head, double rows, double cols, int in_ch) {
        if (head.has_hidden) {
            const int hidden = head.hidden.out_channels;
            return conv_flops(rows * cols * hidden, in_ch) + conv_flops(rows * cols * 5, hidden);
        }
        return conv_flops(rows * cols * 5, in_ch);
    };
    fixed += head_cost(model.hires_head, crop_r, crop_c, ch);
    fixed += head_cost(model.restored_head, full_r, full_c, ch);
    fixed += head_cost(model.pyr1_head, full_r / 2, full_c / 2, model.cfg.pyr1_channels);
    fixed += head_cost(model.pyr2_head, full_r / 4, full_c / 4, model.cfg.pyr2_channels);
    fixed += conv_flops(crop_r * crop_c * model.cfg.seg_hidden, ch);
    fixed += conv_flops(crop_r * crop_c * 1, model.cfg.seg_hidden);

    if (qnet) {
        fixed += conv_flops(static_cast<double>(qnet->conv1_rows()) * qnet->conv1_cols() *
                                qnet->conv1.out_channels,
                            9.0 * qnet->in_channels);
        fixed += conv_flops(static_cast<double>(qnet->conv2_rows()) * qnet->conv2_cols() *
                                qnet->conv2.out_channels,
                            9.0 * qnet->conv1.out_channels);
        fixed += 2.0 * qnet->num_actions * qnet->dense_in();
    }

    cost.conv_mflops = conv / 1e6;
    cost.fixed_mflops = fixed / 1e6;
    return cost;
}

inline double count_flops(const StreamModel& model, const QNet* qnet = nullptr) {
    return count_model_flops(model, false, qnet).total();
}

// One benchmark configuration. interval K runs the model on keyframes K
// apart; delay d pipelines a keyframe's work over d+1 frames, which caps the
// peak at T/(d+1) and stretches the refresh period to K*(d+1).
struct VariantSpec {
    std::string id = "base";
    std::string method = "single-frame";
    double depth_multiplier = 1.0;
    bool flip = false;
    double resolution_scale = 1.0;
    int interval = 1;
    int delay = 0;
    std::optional<ActionSpace> attention;
    std::optional<double> base_mflops;  // overrides the model-derived cost
    std::optional<double> metric;       // measured accuracy, when known

    void validate() const {
        if (depth_multiplier <= 0.0) throw std::invalid_argument("variant: depth must be positive");
        if (resolution_scale <= 0.0 || resolution_scale > 1.0)
            throw std::invalid_argument("variant: resolution must be in (0,1]");
        if (interval < 1) throw std::invalid_argument("variant: interval must be >= 1");
        if (delay < 0) throw std::invalid_argument("variant: negative delay");
        if (delay > 0 && delay >= interval)
            throw std::invalid_argument("variant '" + id + "': delay must be below the interval");
    }
};

struct LatencyProfile {
    std::vector<double> per_frame;  // MFLOPs
    double max_mflops = 0.0;
    double avg_mflops = 0.0;
};

// Spreads the keyframe cost T over min(delay+1, K) frames. The pipelined
// burst repeats every K*(delay+1) frames, so the delay both caps the peak
// and divides the average.
inline LatencyProfile latency_profile(const CostBreakdown& base, const VariantSpec& v,
                                      int num_frames = 0) {
    v.validate();
    double cost = base.conv_mflops * v.depth_multiplier * v.depth_multiplier + base.fixed_mflops;
    cost *= v.resolution_scale * v.resolution_scale;
    if (v.flip) cost *= 2.0;

    const int burst = std::min(v.delay + 1, v.interval);
    const int period = v.interval * burst;
    LatencyProfile p;
    p.max_mflops = cost / burst;
    p.avg_mflops = cost / period;
    if (num_frames > 0) {
        p.per_frame.resize(static_cast<std::size_t>(num_frames), 0.0);
        for (int t = 0; t < num_frames; ++t)
            if (t % period < burst) p.per_frame[static_cast<std::size_t>(t)] = cost / burst;
    }
    return p;
}

struct FrontierRow {
    std::string id;
    std::string method;
    double max_mflops = 0.0;
    double avg_mflops = 0.0;
    double metric = 0.0;
    bool pareto = false;
};

// Rows sorted by rising peak cost; a row is Pareto-optimal when no other row
// is at least as cheap and at least as accurate with one strict inequality.
inline std::vector<FrontierRow> frontier(std::vector<FrontierRow> rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const FrontierRow& a, const FrontierRow& b) {
        return a.max_mflops < b.max_mflops;
    });
    for (std::size_t i = 0; i < rows.size(); ++i) {
        bool dominated = false;
        for (std::size_t j = 0; j < rows.size() && !dominated; ++j) {
            if (i == j) continue;
            const bool cheaper_eq = rows[j].max_mflops <= rows[i].max_mflops;
            const bool better_eq = rows[j].metric >= rows[i].metric;
            const bool strict =
                rows[j].max_mflops < rows[i].max_mflops || rows[j].metric > rows[i].metric;
            dominated = cheaper_eq && better_eq && strict;
        }
        rows[i].pareto = !dominated;
    }
    return rows;
}

inline std::string frontier_csv(const std::vector<FrontierRow>& rows) {
    std::ostringstream out;
    out << "id,method,max_mflops,avg_mflops,metric,pareto\n";
    char buf[160];
    for (const FrontierRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.0f,%.0f,%.4f,%d\n", r.id.c_str(),
                      r.method.c_str(), std::round(r.max_mflops), std::round(r.avg_mflops),
                      r.metric, r.pareto ? 1 : 0);
        out << buf;
    }
    return out.str();
}

}  // namespace patchwork
