#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace patchwork {

// Axis-aligned box in relative [0,1] coordinates, class-agnostic. score is
// meaningful for predictions only.
struct Box {
    float ymin = 0.0f;
    float xmin = 0.0f;
    float ymax = 0.0f;
    float xmax = 0.0f;
    float score = 1.0f;

    bool valid() const { return ymin < ymax && xmin < xmax; }
    float area() const { return (ymax - ymin) * (xmax - xmin); }
};

inline double iou(const Box& a, const Box& b) {
    const double iy = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
    const double ix = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
    if (iy <= 0.0 || ix <= 0.0) return 0.0;
    const double inter = iy * ix;
    const double uni = static_cast<double>(a.area()) + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

// Average best-overlap over ground-truth boxes. Predictions with score <= 0.5
// are dropped; the rest are greedily matched (highest IoU first, one
// prediction per ground truth). Unmatched ground truth contributes zero.
// With no ground truth the metric is 1 when nothing survives the score
// filter and 0 otherwise, so empty scenes reward silence.
inline double box_overlap_metric(const std::vector<Box>& gt, const std::vector<Box>& preds) {
    std::vector<int> surviving;
    for (int i = 0; i < static_cast<int>(preds.size()); ++i)
        if (preds[static_cast<std::size_t>(i)].score > 0.5f) surviving.push_back(i);

    if (gt.empty()) return surviving.empty() ? 1.0 : 0.0;

    struct Pair {
        double overlap;
        int g, p;
    };
    std::vector<Pair> pairs;
    pairs.reserve(gt.size() * surviving.size());
    for (int g = 0; g < static_cast<int>(gt.size()); ++g) {
        for (int p : surviving) {
            const double o = iou(gt[static_cast<std::size_t>(g)], preds[static_cast<std::size_t>(p)]);
            if (o > 0.0) pairs.push_back({o, g, p});
        }
    }
    // Descending IoU; lexicographic (gt, pred) tie-break keeps matching
    // deterministic.
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        if (a.overlap != b.overlap) return a.overlap > b.overlap;
        if (a.g != b.g) return a.g < b.g;
        return a.p < b.p;
    });

    std::vector<bool> gt_used(gt.size(), false), pred_used(preds.size(), false);
    double total = 0.0;
    for (const Pair& pr : pairs) {
        if (gt_used[static_cast<std::size_t>(pr.g)] || pred_used[static_cast<std::size_t>(pr.p)])
            continue;
        gt_used[static_cast<std::size_t>(pr.g)] = true;
        pred_used[static_cast<std::size_t>(pr.p)] = true;
        total += pr.overlap;
    }
    return total / static_cast<double>(gt.size());
}

// Binary mask on a pixel grid.
struct Mask {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0) {}

    std::uint8_t& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    std::uint8_t at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    bool same_shape(const Mask& o) const { return rows == o.rows && cols == o.cols; }
};

// Region similarity (J measure): |a AND b| / |a OR b|; empty union counts as
// a perfect match.
inline double mask_miou(const Mask& gt, const Mask& pred) {
    if (!gt.same_shape(pred)) throw std::invalid_argument("mask_miou: shape mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
        const bool g = gt.data[i] != 0, p = pred.data[i] != 0;
        inter += static_cast<std::size_t>(g && p);
        uni += static_cast<std::size_t>(g || p);
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace detail {

// Foreground pixels with a background (or out-of-grid) 4-neighbour.
inline std::vector<std::pair<int, int>> boundary_pixels(const Mask& m) {
    std::vector<std::pair<int, int>> out;
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) {
            if (!m.at(r, c)) continue;
            const bool edge = r == 0 || r == m.rows - 1 || c == 0 || c == m.cols - 1 ||
                              !m.at(r - 1, c) || !m.at(r + 1, c) || !m.at(r, c - 1) ||
                              !m.at(r, c + 1);
            if (edge) out.emplace_back(r, c);
        }
    }
    return out;
}

inline double matched_fraction(const std::vector<std::pair<int, int>>& from,
                               const std::vector<std::pair<int, int>>& to, int tol) {
    if (from.empty()) return 0.0;
    const double tol2 = static_cast<double>(tol) * tol;
    std::size_t matched = 0;
    for (const auto& [r, c] : from) {
        for (const auto& [tr, tc] : to) {
            const double dr = r - tr, dc = c - tc;
            if (dr * dr + dc * dc <= tol2) {
                ++matched;
                break;
            }
        }
    }
    return static_cast<double>(matched) / static_cast<double>(from.size());
}

}  // namespace detail

// Boundary F measure: harmonic mean of boundary precision and recall with a
// Euclidean tolerance radius in pixels.
inline double boundary_f_measure(const Mask& gt, const Mask& pred, int tolerance_px = 1) {
    if (!gt.same_shape(pred)) throw std::invalid_argument("boundary_f_measure: shape mismatch");
    const auto gb = detail::boundary_pixels(gt);
    const auto pb = detail::boundary_pixels(pred);
    if (gb.empty() && pb.empty()) return 1.0;
    if (gb.empty() || pb.empty()) return 0.0;
    const double precision = detail::matched_fraction(pb, gb, tolerance_px);
    const double recall = detail::matched_fraction(gb, pb, tolerance_px);
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

// Non-negative one-step improvement of the task metric over keeping the
// previous frame's predictions.
inline double td0_reward(double f_curr, double f_prev) {
    return std::max(0.0, f_curr - f_prev);
}

}  // namespace patchwork
