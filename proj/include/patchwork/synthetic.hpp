#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchwork/rewards.hpp"
#include "patchwork/rng.hpp"
#include "patchwork/tensor.hpp"

namespace patchwork {

// A frame sequence with exact ground truth. Frames are rows x cols x 3 in
// [0,1]; masks mark the union of foreground objects.
struct Episode {
    std::vector<Tensor> frames;
    std::vector<std::vector<Box>> gt_boxes;
    std::vector<Mask> gt_masks;
    std::uint64_t seed = 0;
};

// Scenario families for generated scenes: an object that stays put, an
// object too large for one attention window, and several objects spread far
// apart.
enum class Scenario { stay, large, multi };

inline Scenario parse_scenario(const std::string& s) {
    if (s == "stay") return Scenario::stay;
    if (s == "large") return Scenario::large;
    if (s == "multi") return Scenario::multi;
    throw std::invalid_argument("unknown scenario '" + s + "'");
}

inline const char* scenario_name(Scenario s) {
    switch (s) {
        case Scenario::stay: return "stay";
        case Scenario::large: return "large";
        case Scenario::multi: return "multi";
    }
    return "?";
}

namespace detail {

struct Shape {
    bool ellipse = false;
    float color[3] = {0, 0, 0};
    double half_h = 4, half_w = 4;
    double cy = 0, cx = 0;       // center, pixel coordinates
    double vy = 0, vx = 0;       // velocity, pixels per frame
    double min_cy = 0, max_cy = 0, min_cx = 0, max_cx = 0;  // center bounds

    bool covers(int r, int c) const {
        const double dy = (r + 0.5 - cy) / half_h;
        const double dx = (c + 0.5 - cx) / half_w;
        if (ellipse) return dy * dy + dx * dx <= 1.0;
        return std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
    }

    void advance(Rng& rng, double jitter) {
        vy += rng.uniform(-jitter, jitter);
        vx += rng.uniform(-jitter, jitter);
        cy += vy;
        cx += vx;
        if (cy < min_cy) { cy = 2 * min_cy - cy; vy = -vy; }
        if (cy > max_cy) { cy = 2 * max_cy - cy; vy = -vy; }
        if (cx < min_cx) { cx = 2 * min_cx - cx; vx = -vx; }
        if (cx > max_cx) { cx = 2 * max_cx - cx; vx = -vx; }
        cy = std::clamp(cy, min_cy, max_cy);
        cx = std::clamp(cx, min_cx, max_cx);
    }
};

inline Tensor textured_background(int rows, int cols, Rng& rng) {
    float corner[4][3];
    for (auto& c : corner)
        for (int ch = 0; ch < 3; ++ch) c[ch] = static_cast<float>(rng.uniform(0.25, 0.55));
    Tensor bg(rows, cols, 3);
    for (int r = 0; r < rows; ++r) {
        const float fy = rows > 1 ? static_cast<float>(r) / (rows - 1) : 0.0f;
        for (int c = 0; c < cols; ++c) {
            const float fx = cols > 1 ? static_cast<float>(c) / (cols - 1) : 0.0f;
            for (int ch = 0; ch < 3; ++ch) {
                const float top = corner[0][ch] * (1 - fx) + corner[1][ch] * fx;
                const float bot = corner[2][ch] * (1 - fx) + corner[3][ch] * fx;
                bg.at(r, c, ch) = top * (1 - fy) + bot * fy;
            }
        }
    }
    for (auto& v : bg.data)
        v = std::clamp(v + static_cast<float>(rng.normal(0.0, 0.02)), 0.0f, 1.0f);
    return bg;
}

inline void pick_contrasting_color(Shape& s, Rng& rng) {
    for (int tries = 0; tries < 64; ++tries) {
        double dist = 0.0;
        for (int ch = 0; ch < 3; ++ch) {
            s.color[ch] = static_cast<float>(rng.uniform(0.0, 1.0));
            const double d = s.color[ch] - 0.4;
            dist += d * d;
        }
        if (dist >= 0.25) return;  // far enough from the background band
    }
}

// Rasterizes one shape; returns its tight bounding box in relative
// coordinates, or an invalid box when nothing landed on the grid.
inline Box rasterize(const Shape& s, Tensor& frame, Mask& mask) {
    const int rows = frame.rows, cols = frame.cols;
    const int r0 = std::max(0, static_cast<int>(std::floor(s.cy - s.half_h - 1)));
    const int r1 = std::min(rows - 1, static_cast<int>(std::ceil(s.cy + s.half_h + 1)));
    const int c0 = std::max(0, static_cast<int>(std::floor(s.cx - s.half_w - 1)));
    const int c1 = std::min(cols - 1, static_cast<int>(std::ceil(s.cx + s.half_w + 1)));
    int ymin = rows, ymax = -1, xmin = cols, xmax = -1;
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
            if (!s.covers(r, c)) continue;
            for (int ch = 0; ch < 3; ++ch) frame.at(r, c, ch) = s.color[ch];
            mask.at(r, c) = 1;
            ymin = std::min(ymin, r);
            ymax = std::max(ymax, r);
            xmin = std::min(xmin, c);
            xmax = std::max(xmax, c);
        }
    if (ymax < 0) return Box{};
    return Box{static_cast<float>(ymin) / rows, static_cast<float>(xmin) / cols,
               static_cast<float>(ymax + 1) / rows, static_cast<float>(xmax + 1) / cols, 1.0f};
}

}  // namespace detail

// Moving colored rectangles/ellipses over a textured background, with exact
// boxes and masks. Object count, size and motion depend on the scenario:
//   stay  - objects barely move (total drift stays under half a frame)
//   large - one object spanning several attention windows
//   multi - objects pinned to distinct frame quadrants, moderate motion
inline Episode moving_shapes_scene(std::uint64_t seed, int num_frames, int num_objects, int rows,
                                   int cols, Scenario scenario = Scenario::multi) {
    if (num_frames < 1) throw std::invalid_argument("moving_shapes_scene: need at least one frame");
    if (num_objects < 0) throw std::invalid_argument("moving_shapes_scene: negative object count");
    Rng rng(mix_seed(seed, 0x5ce9e5));

    const Tensor bg = detail::textured_background(rows, cols, rng);

    std::vector<detail::Shape> shapes;
    std::vector<int> quadrants = {0, 1, 2, 3};
    for (int i = quadrants.size() - 1; i > 0; --i)
        std::swap(quadrants[static_cast<std::size_t>(i)],
                  quadrants[static_cast<std::size_t>(rng.uniform_int(i + 1))]);

    for (int i = 0; i < num_objects; ++i) {
        detail::Shape s;
        s.ellipse = rng.bernoulli(0.5);
        detail::pick_contrasting_color(s, rng);
        switch (scenario) {
            case Scenario::stay: {
                s.half_h = rng.uniform(0.09, 0.14) * rows;
                s.half_w = rng.uniform(0.09, 0.14) * cols;
                s.cy = rng.uniform(0.25, 0.75) * rows;
                s.cx = rng.uniform(0.25, 0.75) * cols;
                s.vy = rng.uniform(-0.15, 0.15);
                s.vx = rng.uniform(-0.15, 0.15);
                // drift box small enough that total displacement stays well
                // under one window extent
                s.min_cy = s.cy - 0.04 * rows;
                s.max_cy = s.cy + 0.04 * rows;
                s.min_cx = s.cx - 0.04 * cols;
                s.max_cx = s.cx + 0.04 * cols;
                break;
            }
            case Scenario::large: {
                s.half_h = rng.uniform(0.26, 0.34) * rows;
                s.half_w = rng.uniform(0.26, 0.34) * cols;
                s.cy = rng.uniform(0.35, 0.65) * rows;
                s.cx = rng.uniform(0.35, 0.65) * cols;
                s.vy = rng.uniform(-1.0, 1.0);
                s.vx = rng.uniform(-1.0, 1.0);
                s.min_cy = 0.30 * rows;
                s.max_cy = 0.70 * rows;
                s.min_cx = 0.30 * cols;
                s.max_cx = 0.70 * cols;
                break;
            }
            case Scenario::multi: {
                const int q = quadrants[static_cast<std::size_t>(i % 4)];
                const double qy = (q / 2) * 0.5, qx = (q % 2) * 0.5;
                s.half_h = rng.uniform(0.08, 0.13) * rows;
                s.half_w = rng.uniform(0.08, 0.13) * cols;
                s.min_cy = (qy + 0.13) * rows;
                s.max_cy = (qy + 0.37) * rows;
                s.min_cx = (qx + 0.13) * cols;
                s.max_cx = (qx + 0.37) * cols;
                s.cy = rng.uniform(s.min_cy, s.max_cy);
                s.cx = rng.uniform(s.min_cx, s.max_cx);
                const double speed = rng.uniform(1.1, 2.3);
                const double angle = rng.uniform(0.0, 6.283185307179586);
                s.vy = speed * std::sin(angle);
                s.vx = speed * std::cos(angle);
                break;
            }
        }
        shapes.push_back(s);
    }

    Episode ep;
    ep.seed = seed;
    const double jitter = scenario == Scenario::stay ? 0.02 : 0.08;
    for (int t = 0; t < num_frames; ++t) {
        Tensor frame = bg;
        Mask mask(rows, cols);
        std::vector<Box> boxes;
        for (auto& s : shapes) {
            if (t > 0) s.advance(rng, jitter);
            const Box b = detail::rasterize(s, frame, mask);
            if (b.valid()) boxes.push_back(b);
        }
        ep.frames.push_back(std::move(frame));
        ep.gt_boxes.push_back(std::move(boxes));
        ep.gt_masks.push_back(std::move(mask));
    }
    return ep;
}

namespace detail {

// Fraction of a ground-truth box's area that falls inside a view rectangle.
inline double contained_fraction(const Box& gt, double top, double left, double h, double w) {
    const double iy = std::min(static_cast<double>(gt.ymax), top + h) -
                      std::max(static_cast<double>(gt.ymin), top);
    const double ix = std::min(static_cast<double>(gt.xmax), left + w) -
                      std::max(static_cast<double>(gt.xmin), left);
    if (iy <= 0 || ix <= 0) return 0.0;
    return iy * ix / gt.area();
}

inline float sample_bilinear(const Tensor& img, double r, double c, int ch) {
    const double rr = std::clamp(r, 0.0, static_cast<double>(img.rows - 1));
    const double cc = std::clamp(c, 0.0, static_cast<double>(img.cols - 1));
    const int r0 = static_cast<int>(rr), c0 = static_cast<int>(cc);
    const int r1 = std::min(r0 + 1, img.rows - 1), c1 = std::min(c0 + 1, img.cols - 1);
    const double fy = rr - r0, fx = cc - c0;
    const double top = img.at(r0, c0, ch) * (1 - fx) + img.at(r0, c1, ch) * fx;
    const double bot = img.at(r1, c0, ch) * (1 - fx) + img.at(r1, c1, ch) * fx;
    return static_cast<float>(top * (1 - fy) + bot * fy);
}

}  // namespace detail

// Builds a fake video from one still image by gliding a view rectangle
// between two sampled boxes; per-step speed is Gaussian (truncated at three
// sigma). Ground truth is mapped into each view's coordinates. At least one
// sampled box must contain min_gt_overlap of some ground-truth box's area
// (when ground truth exists at all).
inline Episode pan_scan_video(const Tensor& image, const std::vector<Box>& gt_boxes,
                              const Mask& gt_mask, int num_frames, double speed_sigma,
                              std::uint64_t seed, int out_rows, int out_cols,
                              double min_gt_overlap = 0.3) {
    if (image.channels != 3) throw std::invalid_argument("pan_scan_video: color image required");
    if (num_frames < 1) throw std::invalid_argument("pan_scan_video: need at least one frame");
    if (image.rows < 8 || image.cols < 8)
        throw std::invalid_argument("pan_scan_video: image too small to sample views from");
    if (gt_mask.rows != image.rows || gt_mask.cols != image.cols)
        throw std::invalid_argument("pan_scan_video: mask and image dims differ");
    Rng rng(mix_seed(seed, 0xfa4e));

    struct View {
        double top, left, h, w;
    };
    auto sample_view = [&]() {
        View v;
        v.h = rng.uniform(0.5, 0.8);
        v.w = v.h;
        v.top = rng.uniform(0.0, 1.0 - v.h);
        v.left = rng.uniform(0.0, 1.0 - v.w);
        return v;
    };
    auto content_ok = [&](const View& v) {
        if (gt_boxes.empty()) return true;
        for (const Box& b : gt_boxes)
            if (detail::contained_fraction(b, v.top, v.left, v.h, v.w) >= min_gt_overlap)
                return true;
        return false;
    };

    View a = sample_view(), b = sample_view();
    for (int tries = 0; tries < 256 && !(content_ok(a) || content_ok(b)); ++tries) {
        a = sample_view();
        b = sample_view();
    }
    if (!(content_ok(a) || content_ok(b)))
        throw std::runtime_error("pan_scan_video: could not sample a view overlapping ground truth");

    // monotone progress 0 -> 1 with Gaussian step sizes
    std::vector<double> progress(static_cast<std::size_t>(num_frames), 0.0);
    if (num_frames > 1) {
        const double mu = 1.0 / (num_frames - 1);
        double total = 0.0;
        std::vector<double> steps(static_cast<std::size_t>(num_frames - 1));
        for (auto& s : steps) {
            s = std::max(0.0, rng.normal_truncated(mu, speed_sigma * mu));
            total += s;
        }
        double acc = 0.0;
        for (int t = 1; t < num_frames; ++t) {
            acc += steps[static_cast<std::size_t>(t - 1)];
            progress[static_cast<std::size_t>(t)] = total > 0.0 ? acc / total : 0.0;
        }
    }

    Episode ep;
    ep.seed = seed;
    for (int t = 0; t < num_frames; ++t) {
        const double s = progress[static_cast<std::size_t>(t)];
        const View v{a.top + (b.top - a.top) * s, a.left + (b.left - a.left) * s,
                     a.h + (b.h - a.h) * s, a.w + (b.w - a.w) * s};

        Tensor frame(out_rows, out_cols, 3);
        Mask mask(out_rows, out_cols);
        for (int r = 0; r < out_rows; ++r) {
            const double sy = (v.top + v.h * (r + 0.5) / out_rows) * image.rows - 0.5;
            for (int c = 0; c < out_cols; ++c) {
                const double sx = (v.left + v.w * (c + 0.5) / out_cols) * image.cols - 0.5;
                for (int ch = 0; ch < 3; ++ch)
                    frame.at(r, c, ch) = detail::sample_bilinear(image, sy, sx, ch);
                const int mr = std::clamp(static_cast<int>(std::floor(sy + 0.5)), 0, image.rows - 1);
                const int mc = std::clamp(static_cast<int>(std::floor(sx + 0.5)), 0, image.cols - 1);
                mask.at(r, c) = gt_mask.at(mr, mc);
            }
        }

        std::vector<Box> boxes;
        for (const Box& g : gt_boxes) {
            Box out;
            out.ymin = static_cast<float>(std::clamp((g.ymin - v.top) / v.h, 0.0, 1.0));
            out.ymax = static_cast<float>(std::clamp((g.ymax - v.top) / v.h, 0.0, 1.0));
            out.xmin = static_cast<float>(std::clamp((g.xmin - v.left) / v.w, 0.0, 1.0));
            out.xmax = static_cast<float>(std::clamp((g.xmax - v.left) / v.w, 0.0, 1.0));
            out.score = 1.0f;
            if (out.ymax - out.ymin > 1e-3f && out.xmax - out.xmin > 1e-3f) boxes.push_back(out);
        }
        ep.frames.push_back(std::move(frame));
        ep.gt_boxes.push_back(std::move(boxes));
        ep.gt_masks.push_back(std::move(mask));
    }
    return ep;
}

// A constant-input episode; handy for context-recovery checks.
inline Episode constant_episode(const Tensor& frame, int num_frames) {
    Episode ep;
    for (int t = 0; t < num_frames; ++t) {
        ep.frames.push_back(frame);
        ep.gt_boxes.emplace_back();
        ep.gt_masks.emplace_back(frame.rows, frame.cols);
    }
    return ep;
}

}  // namespace patchwork
