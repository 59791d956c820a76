#pragma once

// Hand-derived backward passes for the convolution primitives. There is no
// graph engine: each routine takes the forward input, the upstream gradient,
// and accumulates parameter gradients into caller-owned buffers.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "patchwork/tensor.hpp"

namespace patchwork {

// Gradient buffer matching one ConvWeights.
struct ConvGrad {
    std::vector<float> values;
    std::vector<float> bias;

    ConvGrad() = default;
    explicit ConvGrad(const ConvWeights& w)
        : values(w.values.size(), 0.0f), bias(w.bias.size(), 0.0f) {}

    void zero() {
        std::fill(values.begin(), values.end(), 0.0f);
        std::fill(bias.begin(), bias.end(), 0.0f);
    }
};

// 1x1 convolution backward. Accumulates into grad, returns d/d(input).
inline Tensor pointwise_backward(const Tensor& x, const ConvWeights& w, const Tensor& grad_out,
                                 ConvGrad& grad) {
    if (grad_out.channels != w.out_channels || x.channels != w.in_channels)
        throw std::invalid_argument("pointwise_backward: channel mismatch");
    Tensor dx(x.rows, x.cols, x.channels);
    const std::size_t positions = static_cast<std::size_t>(x.rows) * x.cols;
    for (std::size_t p = 0; p < positions; ++p) {
        const float* xin = &x.data[p * x.channels];
        const float* dout = &grad_out.data[p * w.out_channels];
        float* dxp = &dx.data[p * x.channels];
        for (int co = 0; co < w.out_channels; ++co)
            grad.bias[static_cast<std::size_t>(co)] += dout[co];
        for (int ci = 0; ci < w.in_channels; ++ci) {
            float* gw = &grad.values[static_cast<std::size_t>(ci) * w.out_channels];
            const float* wv = &w.values[static_cast<std::size_t>(ci) * w.out_channels];
            double acc = 0.0;
            for (int co = 0; co < w.out_channels; ++co) {
                gw[co] += xin[ci] * dout[co];
                acc += static_cast<double>(wv[co]) * dout[co];
            }
            dxp[ci] = static_cast<float>(acc);
        }
    }
    return dx;
}

// Depthwise VALID convolution backward.
inline Tensor depthwise_valid_backward(const Tensor& x, const ConvWeights& w, int stride,
                                       const Tensor& grad_out, ConvGrad& grad) {
    if (!w.depthwise) throw std::invalid_argument("depthwise_valid_backward: depthwise required");
    Tensor dx(x.rows, x.cols, x.channels);
    for (int orow = 0; orow < grad_out.rows; ++orow)
        for (int ocol = 0; ocol < grad_out.cols; ++ocol) {
            const float* dout = &grad_out.data[grad_out.index(orow, ocol, 0)];
            for (int c = 0; c < x.channels; ++c)
                grad.bias[static_cast<std::size_t>(c)] += dout[c];
            for (int dr = 0; dr < w.kernel_rows; ++dr)
                for (int dc = 0; dc < w.kernel_cols; ++dc) {
                    const std::size_t widx =
                        (static_cast<std::size_t>(dr) * w.kernel_cols + dc) * x.channels;
                    const float* xin = &x.data[x.index(orow * stride + dr, ocol * stride + dc, 0)];
                    float* dxp = &dx.data[dx.index(orow * stride + dr, ocol * stride + dc, 0)];
                    for (int c = 0; c < x.channels; ++c) {
                        grad.values[widx + c] += xin[c] * dout[c];
                        dxp[c] += w.values[widx + c] * dout[c];
                    }
                }
        }
    return dx;
}

// Dense SAME convolution backward (centered padding, as the forward).
inline Tensor conv2d_same_backward(const Tensor& x, const ConvWeights& w, int stride,
                                   const Tensor& grad_out, ConvGrad& grad) {
    const int kr = w.radius_rows(), kc = w.radius_cols();
    Tensor dx(x.rows, x.cols, x.channels);
    for (int orow = 0; orow < grad_out.rows; ++orow)
        for (int ocol = 0; ocol < grad_out.cols; ++ocol) {
            const float* dout = &grad_out.data[grad_out.index(orow, ocol, 0)];
            for (int co = 0; co < w.out_channels; ++co)
                grad.bias[static_cast<std::size_t>(co)] += dout[co];
            for (int dr = -kr; dr <= kr; ++dr) {
                const int ir = orow * stride + dr;
                if (ir < 0 || ir >= x.rows) continue;
                for (int dc = -kc; dc <= kc; ++dc) {
                    const int ic = ocol * stride + dc;
                    if (ic < 0 || ic >= x.cols) continue;
                    const float* xin = &x.data[x.index(ir, ic, 0)];
                    float* dxp = &dx.data[dx.index(ir, ic, 0)];
                    const std::size_t base =
                        (static_cast<std::size_t>(dr + kr) * w.kernel_cols + (dc + kc)) *
                        w.in_channels * w.out_channels;
                    for (int ci = 0; ci < w.in_channels; ++ci) {
                        float* gw = &grad.values[base + static_cast<std::size_t>(ci) * w.out_channels];
                        const float* wv = &w.values[base + static_cast<std::size_t>(ci) * w.out_channels];
                        double acc = 0.0;
                        for (int co = 0; co < w.out_channels; ++co) {
                            gw[co] += xin[ci] * dout[co];
                            acc += static_cast<double>(wv[co]) * dout[co];
                        }
                        dxp[ci] += static_cast<float>(acc);
                    }
                }
            }
        }
    return dx;
}

// Masks the gradient by the sign of the pre-activation.
inline void relu_backward_inplace(Tensor& grad, const Tensor& prerelu) {
    if (!grad.same_shape(prerelu)) throw std::invalid_argument("relu_backward: shape mismatch");
    for (std::size_t i = 0; i < grad.data.size(); ++i)
        if (prerelu.data[i] <= 0.0f) grad.data[i] = 0.0f;
}

inline void leaky_relu_backward_inplace(Tensor& grad, const Tensor& prerelu, float slope) {
    if (!grad.same_shape(prerelu))
        throw std::invalid_argument("leaky_relu_backward: shape mismatch");
    for (std::size_t i = 0; i < grad.data.size(); ++i)
        if (prerelu.data[i] <= 0.0f) grad.data[i] *= slope;
}

// Backward of the fixed per-channel affine: only the scale touches the
// gradient (statistics are frozen, never trained).
inline void affine_backward_inplace(Tensor& grad, const ChannelAffine& a) {
    float* p = grad.data.data();
    const std::size_t n = static_cast<std::size_t>(grad.rows) * grad.cols;
    for (std::size_t i = 0; i < n; ++i, p += grad.channels)
        for (int c = 0; c < grad.channels; ++c) p[c] *= a.scale[c];
}

// SGD with momentum; grads are averaged by `scale` before applying.
struct SgdState {
    std::vector<float> velocity;
};

inline void sgd_step(std::vector<float>& params, const std::vector<float>& grads, SgdState& state,
                     double lr, double momentum, double scale) {
    if (state.velocity.size() != params.size()) state.velocity.assign(params.size(), 0.0f);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i] * scale;
        const double v = momentum * state.velocity[i] - lr * g;
        state.velocity[i] = static_cast<float>(v);
        params[i] = static_cast<float>(params[i] + v);
    }
}

inline double grad_l2_norm(const std::vector<float>& g) {
    double s = 0.0;
    for (const float v : g) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

}  // namespace patchwork
