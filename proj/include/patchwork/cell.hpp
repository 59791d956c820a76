#pragma once

#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "patchwork/frac.hpp"
#include "patchwork/io.hpp"
#include "patchwork/tensor.hpp"

namespace patchwork {

// Geometry of one stateful convolution site. The cell sees crops of
// crop_rows x crop_cols that cover a (rel_height x rel_width) share of the
// frame at this layer's resolution, and keeps a full-frame memory of
// crop/rel extent. context_radius is the VALID kernel radius k.
struct CellGeometry {
    int crop_rows = 1;
    int crop_cols = 1;
    Frac rel_height{1, 1};
    Frac rel_width{1, 1};
    int context_radius = 0;

    CellGeometry() = default;
    CellGeometry(int h, int w, Frac rh, Frac rw, int k)
        : crop_rows(h), crop_cols(w), rel_height(rh), rel_width(rw), context_radius(k) {
        if (h < 1 || w < 1) throw std::invalid_argument("CellGeometry: crop dims must be >= 1");
        if (rh.num < 1 || rh.num > rh.den || rw.num < 1 || rw.num > rw.den)
            throw std::invalid_argument("CellGeometry: relative size must be in (0,1]");
        if (k < 0) throw std::invalid_argument("CellGeometry: negative context radius");
        if (static_cast<long long>(h) * rh.den % rh.num != 0 ||
            static_cast<long long>(w) * rw.den % rw.num != 0)
            throw std::invalid_argument("CellGeometry: crop/rel must give integer state dims");
    }

    int state_rows() const { return crop_rows * rel_height.den / rel_height.num; }
    int state_cols() const { return crop_cols * rel_width.den / rel_width.num; }

    // Integer state coordinates of a window's top-left corner; throws on
    // misalignment.
    std::pair<int, int> window_origin(const Frac& a, const Frac& b) const {
        const int top = frac_mul_exact(a, state_rows());
        const int left = frac_mul_exact(b, state_cols());
        if (top < 0 || left < 0 || top + crop_rows > state_rows() || left + crop_cols > state_cols())
            throw std::invalid_argument("window (" + a.str() + "," + b.str() +
                                        ") out of state bounds");
        return {top, left};
    }
};

// Full-frame memory of one cell plus the last window written into it.
struct CellState {
    CellGeometry geometry;
    Tensor memory;
    std::optional<std::pair<Frac, Frac>> last_window;

    CellState() = default;
    CellState(const CellGeometry& g, int channels)
        : geometry(g), memory(g.state_rows(), g.state_cols(), channels) {}
};

inline CellState reset(const CellState& state) {
    CellState out = state;
    std::fill(out.memory.data.begin(), out.memory.data.end(), 0.0f);
    out.last_window.reset();
    return out;
}

inline void reset_inplace(CellState& state) {
    std::fill(state.memory.data.begin(), state.memory.data.end(), 0.0f);
    state.last_window.reset();
}

// Overwrites the window block of the memory with the crop features x; the
// rest of the memory is untouched.
inline void state_update_inplace(CellState& state, const Tensor& x, const Frac& a, const Frac& b) {
    const CellGeometry& g = state.geometry;
    if (x.rows != g.crop_rows || x.cols != g.crop_cols || x.channels != state.memory.channels)
        throw std::invalid_argument("state_update: crop " + x.shape_str() +
                                    " does not match geometry");
    const auto [top, left] = g.window_origin(a, b);
    paste_inplace(state.memory, x, top, left);
    state.last_window = std::make_pair(a, b);
}

inline CellState state_update(const CellState& prev, const Tensor& x, const Frac& a,
                              const Frac& b) {
    CellState next = prev;
    state_update_inplace(next, x, a, b);
    return next;
}

// Reads the (crop + 2k)-sized block around the window back out of the
// memory: interior is the freshly written crop, the k-wide ring holds past
// state where in bounds and zeros beyond the state edge. With
// use_state_ring=false the ring is zero-filled regardless, which turns the
// cell into a plain zero-padded crop (the ablation mode).
inline Tensor feature_propagate(const CellState& state, const Frac& a, const Frac& b,
                                bool use_state_ring = true) {
    const CellGeometry& g = state.geometry;
    const auto [top, left] = g.window_origin(a, b);
    const int k = g.context_radius;
    const Tensor& mem = state.memory;
    Tensor out(g.crop_rows + 2 * k, g.crop_cols + 2 * k, mem.channels);
    for (int i = 0; i < out.rows; ++i) {
        const int sr = top + i - k;
        const bool row_in_crop = i >= k && i < k + g.crop_rows;
        if (sr < 0 || sr >= mem.rows) continue;
        for (int j = 0; j < out.cols; ++j) {
            const int sc = left + j - k;
            if (sc < 0 || sc >= mem.cols) continue;
            const bool in_crop = row_in_crop && j >= k && j < k + g.crop_cols;
            if (!use_state_ring && !in_crop) continue;
            std::copy_n(&mem.data[mem.index(sr, sc, 0)], mem.channels,
                        &out.data[out.index(i, j, 0)]);
        }
    }
    return out;
}

struct PatchworkConvResult {
    Tensor output;
    CellState next;
};

// Stateful replacement for a SAME-padded convolution: write the crop into
// the memory, read it back enlarged by the context ring, then convolve with
// VALID padding. Dispatches on dense vs depthwise weights.
inline PatchworkConvResult patchwork_conv(const Tensor& x, const Frac& a, const Frac& b,
                                          const CellState& prev, const ConvWeights& w,
                                          int stride = 1, bool use_state_ring = true) {
    if (w.radius_rows() != prev.geometry.context_radius ||
        w.radius_cols() != prev.geometry.context_radius)
        throw std::invalid_argument("patchwork_conv: kernel radius does not match cell geometry");
    PatchworkConvResult result;
    result.next = prev;
    state_update_inplace(result.next, x, a, b);
    const Tensor enlarged = feature_propagate(result.next, a, b, use_state_ring);
    result.output = w.depthwise ? depthwise_conv_valid(enlarged, w, stride)
                                : conv2d_valid(enlarged, w, stride);
    return result;
}

// ---- checkpoint/resume of a cell mid-stream ----
// Text header (geometry and last window) followed by the PWT1 memory block.

inline void write_cell_state(std::ostream& out, const CellState& state) {
    const CellGeometry& g = state.geometry;
    out << "PWCELL v1\n";
    out << "crop " << g.crop_rows << " " << g.crop_cols << "\n";
    out << "rel " << g.rel_height.str() << " " << g.rel_width.str() << "\n";
    out << "k " << g.context_radius << "\n";
    if (state.last_window)
        out << "last " << state.last_window->first.str() << " " << state.last_window->second.str()
            << "\n";
    else
        out << "last none\n";
    out << "memory\n";
    write_pwt1(out, state.memory);
}

inline CellState read_cell_state(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "PWCELL v1")
        throw std::runtime_error("cell state: bad header");
    int ch = 1, cw = 1, k = 0;
    Frac rh{1, 1}, rw{1, 1};
    std::optional<std::pair<Frac, Frac>> last;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        if (key == "crop") {
            ss >> ch >> cw;
        } else if (key == "rel") {
            std::string a, b;
            ss >> a >> b;
            rh = parse_frac(a);
            rw = parse_frac(b);
        } else if (key == "k") {
            ss >> k;
        } else if (key == "last") {
            std::string a;
            ss >> a;
            if (a != "none") {
                std::string b;
                ss >> b;
                last = std::make_pair(parse_frac(a), parse_frac(b));
            }
        } else if (key == "memory") {
            break;
        } else {
            throw std::runtime_error("cell state: unknown field '" + key + "'");
        }
    }
    CellState state;
    state.geometry = CellGeometry(ch, cw, rh, rw, k);
    state.memory = read_pwt1(in);
    if (state.memory.rows != state.geometry.state_rows() ||
        state.memory.cols != state.geometry.state_cols())
        throw std::runtime_error("cell state: memory shape does not match geometry");
    state.last_window = last;
    return state;
}

}  // namespace patchwork
