#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchwork/rng.hpp"

namespace patchwork {

// Dense rank-3 feature map, row-major (row, col, channel). Values are float;
// convolution inner loops accumulate in double.
struct Tensor {
    int rows = 1;
    int cols = 1;
    int channels = 1;
    std::vector<float> data;

    Tensor() : data(1, 0.0f) {}
    Tensor(int r, int c, int ch, float fill = 0.0f)
        : rows(r), cols(c), channels(ch),
          data(static_cast<std::size_t>(check_dims(r, c, ch)) , fill) {}

    static std::size_t check_dims(int r, int c, int ch) {
        if (r < 1 || c < 1 || ch < 1) throw std::invalid_argument("Tensor: dims must be >= 1");
        return static_cast<std::size_t>(r) * c * ch;
    }

    std::size_t size() const { return data.size(); }

    std::size_t index(int r, int c, int ch) const {
        return (static_cast<std::size_t>(r) * cols + c) * channels + ch;
    }

    float& at(int r, int c, int ch) { return data[index(r, c, ch)]; }
    float at(int r, int c, int ch) const { return data[index(r, c, ch)]; }

    bool same_shape(const Tensor& o) const {
        return rows == o.rows && cols == o.cols && channels == o.channels;
    }

    std::string shape_str() const {
        return std::to_string(rows) + "x" + std::to_string(cols) + "x" + std::to_string(channels);
    }

    static Tensor random(int r, int c, int ch, Rng& rng, double lo = -1.0, double hi = 1.0) {
        Tensor t(r, c, ch);
        for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
        return t;
    }
};

// Convolution weights. Dense layout: values[((dr*kc + dc)*in + ci)*out + co].
// Depthwise layout (one kernel per channel, in == out): values[(dr*kc + dc)*ch + c].
struct ConvWeights {
    int kernel_rows = 1;
    int kernel_cols = 1;
    int in_channels = 1;
    int out_channels = 1;
    bool depthwise = false;
    std::vector<float> values;
    std::vector<float> bias;

    int radius_rows() const { return (kernel_rows - 1) / 2; }
    int radius_cols() const { return (kernel_cols - 1) / 2; }

    std::size_t expected_values() const {
        const std::size_t k = static_cast<std::size_t>(kernel_rows) * kernel_cols;
        return depthwise ? k * out_channels
                         : k * in_channels * out_channels;
    }

    void validate() const {
        if (kernel_rows < 1 || kernel_cols < 1 || kernel_rows % 2 == 0 || kernel_cols % 2 == 0)
            throw std::invalid_argument("ConvWeights: kernel dims must be odd and >= 1");
        if (in_channels < 1 || out_channels < 1)
            throw std::invalid_argument("ConvWeights: channel counts must be >= 1");
        if (depthwise && in_channels != out_channels)
            throw std::invalid_argument("ConvWeights: depthwise requires in == out channels");
        if (values.size() != expected_values())
            throw std::invalid_argument("ConvWeights: values size mismatch");
        if (bias.size() != static_cast<std::size_t>(out_channels))
            throw std::invalid_argument("ConvWeights: bias size mismatch");
    }

    static ConvWeights dense(int kr, int kc, int in, int out) {
        ConvWeights w;
        w.kernel_rows = kr;
        w.kernel_cols = kc;
        w.in_channels = in;
        w.out_channels = out;
        w.values.assign(w.expected_values(), 0.0f);
        w.bias.assign(static_cast<std::size_t>(out), 0.0f);
        return w;
    }

    static ConvWeights make_depthwise(int kr, int kc, int ch) {
        ConvWeights w;
        w.kernel_rows = kr;
        w.kernel_cols = kc;
        w.in_channels = ch;
        w.out_channels = ch;
        w.depthwise = true;
        w.values.assign(w.expected_values(), 0.0f);
        w.bias.assign(static_cast<std::size_t>(ch), 0.0f);
        return w;
    }

    // He-style init; biases stay zero.
    static ConvWeights dense_random(int kr, int kc, int in, int out, Rng& rng) {
        ConvWeights w = dense(kr, kc, in, out);
        const double scale = std::sqrt(2.0 / (static_cast<double>(kr) * kc * in));
        for (auto& v : w.values) v = static_cast<float>(rng.normal(0.0, scale));
        return w;
    }

    static ConvWeights depthwise_random(int kr, int kc, int ch, Rng& rng) {
        ConvWeights w = make_depthwise(kr, kc, ch);
        const double scale = std::sqrt(2.0 / (static_cast<double>(kr) * kc));
        for (auto& v : w.values) v = static_cast<float>(rng.normal(0.0, scale));
        return w;
    }
};

inline int same_out_extent(int in, int stride) { return (in + stride - 1) / stride; }
inline int valid_out_extent(int in, int kernel, int stride) {
    return (in - kernel) / stride + 1;
}

// Zero-pads by pad_r rows and pad_c cols on every side.
inline Tensor zero_pad(const Tensor& x, int pad_r, int pad_c) {
    if (pad_r < 0 || pad_c < 0) throw std::invalid_argument("zero_pad: negative pad");
    Tensor out(x.rows + 2 * pad_r, x.cols + 2 * pad_c, x.channels);
    const std::size_t row_bytes = static_cast<std::size_t>(x.cols) * x.channels;
    for (int r = 0; r < x.rows; ++r) {
        std::copy_n(&x.data[x.index(r, 0, 0)], row_bytes, &out.data[out.index(r + pad_r, pad_c, 0)]);
    }
    return out;
}

inline Tensor zero_pad(const Tensor& x, int pad) { return zero_pad(x, pad, pad); }

// SAME convolution: output extent ceil(in/stride), output (i,j) centered on
// input (i*stride, j*stride), zeros outside the input.
inline Tensor conv2d_same(const Tensor& x, const ConvWeights& w, int stride = 1) {
    w.validate();
    if (w.depthwise) throw std::invalid_argument("conv2d_same: dense weights required");
    if (x.channels != w.in_channels)
        throw std::invalid_argument("conv2d_same: input has " + std::to_string(x.channels) +
                                    " channels, weights expect " + std::to_string(w.in_channels));
    if (stride < 1) throw std::invalid_argument("conv2d_same: stride must be >= 1");

    const int kr = w.radius_rows(), kc = w.radius_cols();
    Tensor out(same_out_extent(x.rows, stride), same_out_extent(x.cols, stride), w.out_channels);
    std::vector<double> acc(static_cast<std::size_t>(w.out_channels));
    for (int orow = 0; orow < out.rows; ++orow) {
        for (int ocol = 0; ocol < out.cols; ++ocol) {
            for (int co = 0; co < w.out_channels; ++co) acc[co] = w.bias[co];
            for (int dr = -kr; dr <= kr; ++dr) {
                const int ir = orow * stride + dr;
                if (ir < 0 || ir >= x.rows) continue;
                for (int dc = -kc; dc <= kc; ++dc) {
                    const int ic = ocol * stride + dc;
                    if (ic < 0 || ic >= x.cols) continue;
                    const float* xin = &x.data[x.index(ir, ic, 0)];
                    const float* wv =
                        &w.values[(static_cast<std::size_t>(dr + kr) * w.kernel_cols + (dc + kc)) *
                                  w.in_channels * w.out_channels];
                    for (int ci = 0; ci < w.in_channels; ++ci) {
                        const double xv = xin[ci];
                        const float* wrow = wv + static_cast<std::size_t>(ci) * w.out_channels;
                        for (int co = 0; co < w.out_channels; ++co) acc[co] += xv * wrow[co];
                    }
                }
            }
            float* orow_ptr = &out.data[out.index(orow, ocol, 0)];
            for (int co = 0; co < w.out_channels; ++co) orow_ptr[co] = static_cast<float>(acc[co]);
        }
    }
    return out;
}

// VALID convolution: no padding, output extent (in - kernel)/stride + 1.
inline Tensor conv2d_valid(const Tensor& x, const ConvWeights& w, int stride = 1) {
    w.validate();
    if (w.depthwise) throw std::invalid_argument("conv2d_valid: dense weights required");
    if (x.channels != w.in_channels)
        throw std::invalid_argument("conv2d_valid: channel mismatch");
    if (stride < 1) throw std::invalid_argument("conv2d_valid: stride must be >= 1");
    if (x.rows < w.kernel_rows || x.cols < w.kernel_cols)
        throw std::invalid_argument("conv2d_valid: input " + x.shape_str() + " smaller than kernel");

    Tensor out(valid_out_extent(x.rows, w.kernel_rows, stride),
               valid_out_extent(x.cols, w.kernel_cols, stride), w.out_channels);
    std::vector<double> acc(static_cast<std::size_t>(w.out_channels));
    for (int orow = 0; orow < out.rows; ++orow) {
        for (int ocol = 0; ocol < out.cols; ++ocol) {
            for (int co = 0; co < w.out_channels; ++co) acc[co] = w.bias[co];
            for (int dr = 0; dr < w.kernel_rows; ++dr) {
                for (int dc = 0; dc < w.kernel_cols; ++dc) {
                    const float* xin = &x.data[x.index(orow * stride + dr, ocol * stride + dc, 0)];
                    const float* wv =
                        &w.values[(static_cast<std::size_t>(dr) * w.kernel_cols + dc) *
                                  w.in_channels * w.out_channels];
                    for (int ci = 0; ci < w.in_channels; ++ci) {
                        const double xv = xin[ci];
                        const float* wrow = wv + static_cast<std::size_t>(ci) * w.out_channels;
                        for (int co = 0; co < w.out_channels; ++co) acc[co] += xv * wrow[co];
                    }
                }
            }
            float* optr = &out.data[out.index(orow, ocol, 0)];
            for (int co = 0; co < w.out_channels; ++co) optr[co] = static_cast<float>(acc[co]);
        }
    }
    return out;
}

// One kernel per channel, VALID padding.
inline Tensor depthwise_conv_valid(const Tensor& x, const ConvWeights& w, int stride = 1) {
    w.validate();
    if (!w.depthwise) throw std::invalid_argument("depthwise_conv_valid: depthwise weights required");
    if (x.channels != w.in_channels)
        throw std::invalid_argument("depthwise_conv_valid: channel mismatch");
    if (stride < 1) throw std::invalid_argument("depthwise_conv_valid: stride must be >= 1");
    if (x.rows < w.kernel_rows || x.cols < w.kernel_cols)
        throw std::invalid_argument("depthwise_conv_valid: input smaller than kernel");

    Tensor out(valid_out_extent(x.rows, w.kernel_rows, stride),
               valid_out_extent(x.cols, w.kernel_cols, stride), x.channels);
    std::vector<double> acc(static_cast<std::size_t>(x.channels));
    for (int orow = 0; orow < out.rows; ++orow) {
        for (int ocol = 0; ocol < out.cols; ++ocol) {
            for (int c = 0; c < x.channels; ++c) acc[c] = w.bias[c];
            for (int dr = 0; dr < w.kernel_rows; ++dr) {
                for (int dc = 0; dc < w.kernel_cols; ++dc) {
                    const float* xin = &x.data[x.index(orow * stride + dr, ocol * stride + dc, 0)];
                    const float* wv = &w.values[(static_cast<std::size_t>(dr) * w.kernel_cols + dc) *
                                                x.channels];
                    for (int c = 0; c < x.channels; ++c) acc[c] += static_cast<double>(xin[c]) * wv[c];
                }
            }
            float* optr = &out.data[out.index(orow, ocol, 0)];
            for (int c = 0; c < x.channels; ++c) optr[c] = static_cast<float>(acc[c]);
        }
    }
    return out;
}

// 1x1 dense convolution; shape preserved.
inline Tensor pointwise_conv(const Tensor& x, const ConvWeights& w) {
    if (w.kernel_rows != 1 || w.kernel_cols != 1)
        throw std::invalid_argument("pointwise_conv: kernel must be 1x1");
    return conv2d_same(x, w, 1);
}

inline Tensor crop(const Tensor& x, int top, int left, int h, int w) {
    if (h < 1 || w < 1 || top < 0 || left < 0 || top + h > x.rows || left + w > x.cols)
        throw std::invalid_argument("crop: window (" + std::to_string(top) + "," +
                                    std::to_string(left) + "," + std::to_string(h) + "," +
                                    std::to_string(w) + ") out of bounds for " + x.shape_str());
    Tensor out(h, w, x.channels);
    const std::size_t row_elems = static_cast<std::size_t>(w) * x.channels;
    for (int r = 0; r < h; ++r) {
        std::copy_n(&x.data[x.index(top + r, left, 0)], row_elems, &out.data[out.index(r, 0, 0)]);
    }
    return out;
}

inline void paste_inplace(Tensor& dst, const Tensor& src, int top, int left) {
    if (src.channels != dst.channels)
        throw std::invalid_argument("paste: channel mismatch");
    if (top < 0 || left < 0 || top + src.rows > dst.rows || left + src.cols > dst.cols)
        throw std::invalid_argument("paste: source " + src.shape_str() + " does not fit in " +
                                    dst.shape_str() + " at (" + std::to_string(top) + "," +
                                    std::to_string(left) + ")");
    const std::size_t row_elems = static_cast<std::size_t>(src.cols) * src.channels;
    for (int r = 0; r < src.rows; ++r) {
        std::copy_n(&src.data[src.index(r, 0, 0)], row_elems, &dst.data[dst.index(top + r, left, 0)]);
    }
}

inline Tensor paste(const Tensor& dst, const Tensor& src, int top, int left) {
    Tensor out = dst;
    paste_inplace(out, src, top, left);
    return out;
}

// ---- elementwise helpers used by the model stack ----

inline Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (auto& v : out.data) v = v > 0.0f ? v : 0.0f;
    return out;
}

inline void relu_inplace(Tensor& x) {
    for (auto& v : x.data) v = v > 0.0f ? v : 0.0f;
}

// Leaky variant used by the task model; the small negative slope keeps
// channels recoverable when frozen-statistics normalization lets a bias
// drift push them fully negative.
inline void leaky_relu_inplace(Tensor& x, float slope) {
    for (auto& v : x.data) v = v > 0.0f ? v : slope * v;
}

inline Tensor leaky_relu(const Tensor& x, float slope) {
    Tensor out = x;
    leaky_relu_inplace(out, slope);
    return out;
}

inline void add_inplace(Tensor& x, const Tensor& y) {
    if (!x.same_shape(y)) throw std::invalid_argument("add: shape mismatch");
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += y.data[i];
}

// Per-channel affine y = x * scale[c] + shift[c]; stands in for batch norm
// with frozen statistics.
struct ChannelAffine {
    std::vector<float> scale;
    std::vector<float> shift;

    static ChannelAffine identity(int channels) {
        ChannelAffine a;
        a.scale.assign(static_cast<std::size_t>(channels), 1.0f);
        a.shift.assign(static_cast<std::size_t>(channels), 0.0f);
        return a;
    }
};

inline void affine_inplace(Tensor& x, const ChannelAffine& a) {
    if (a.scale.size() != static_cast<std::size_t>(x.channels))
        throw std::invalid_argument("affine: channel mismatch");
    float* p = x.data.data();
    const std::size_t n = static_cast<std::size_t>(x.rows) * x.cols;
    for (std::size_t i = 0; i < n; ++i, p += x.channels) {
        for (int c = 0; c < x.channels; ++c) p[c] = p[c] * a.scale[c] + a.shift[c];
    }
}

// Nearest-neighbour upsample by an integer factor.
inline Tensor upsample_nearest(const Tensor& x, int factor) {
    if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
    Tensor out(x.rows * factor, x.cols * factor, x.channels);
    for (int r = 0; r < out.rows; ++r) {
        for (int c = 0; c < out.cols; ++c) {
            const float* src = &x.data[x.index(r / factor, c / factor, 0)];
            std::copy_n(src, x.channels, &out.data[out.index(r, c, 0)]);
        }
    }
    return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - b.data[i]));
    return m;
}

inline double mean_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mean_abs_diff: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        s += std::abs(static_cast<double>(a.data[i]) - b.data[i]);
    return s / static_cast<double>(a.data.size());
}

// Relative max deviation: max |a-b| / max(1, max|a|, max|b|).
inline double rel_deviation(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("rel_deviation: shape mismatch");
    double diff = 0.0, mag = 1.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        diff = std::max(diff, std::abs(static_cast<double>(a.data[i]) - b.data[i]));
        mag = std::max({mag, std::abs(static_cast<double>(a.data[i])),
                        std::abs(static_cast<double>(b.data[i]))});
    }
    return diff / mag;
}

}  // namespace patchwork
