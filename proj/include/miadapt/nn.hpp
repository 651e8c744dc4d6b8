#pragma once

// Dense layer primitives with explicit backward passes. Activations are stored
// as (channels x height*width) matrices, one column per spatial cell in
// row-major (y, x) order.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "miadapt/datamodel.hpp"

namespace miadapt::nn {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct Shape {
    int height = 0;
    int width = 0;
    int cells() const { return height * width; }
};

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

/// 3x3, stride 1, zero padding 1. Row index of the result is c*9 + ky*3 + kx.
template <typename Scalar>
Mat<Scalar> im2col3x3(const Mat<Scalar>& x, Shape s) {
    const auto channels = x.rows();
    Mat<Scalar> cols = Mat<Scalar>::Zero(channels * 9, s.cells());
    for (int y = 0; y < s.height; ++y) {
        for (int xx = 0; xx < s.width; ++xx) {
            const int p = y * s.width + xx;
            for (int ky = 0; ky < 3; ++ky) {
                const int sy = y + ky - 1;
                if (sy < 0 || sy >= s.height) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int sx = xx + kx - 1;
                    if (sx < 0 || sx >= s.width) continue;
                    const int q = sy * s.width + sx;
                    const int k = ky * 3 + kx;
                    for (Eigen::Index c = 0; c < channels; ++c) cols(c * 9 + k, p) = x(c, q);
                }
            }
        }
    }
    return cols;
}

/// Adjoint of im2col3x3.
template <typename Scalar>
Mat<Scalar> col2im3x3(const Mat<Scalar>& cols, Eigen::Index channels, Shape s) {
    Mat<Scalar> x = Mat<Scalar>::Zero(channels, s.cells());
    for (int y = 0; y < s.height; ++y) {
        for (int xx = 0; xx < s.width; ++xx) {
            const int p = y * s.width + xx;
            for (int ky = 0; ky < 3; ++ky) {
                const int sy = y + ky - 1;
                if (sy < 0 || sy >= s.height) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int sx = xx + kx - 1;
                    if (sx < 0 || sx >= s.width) continue;
                    const int q = sy * s.width + sx;
                    const int k = ky * 3 + kx;
                    for (Eigen::Index c = 0; c < channels; ++c) x(c, q) += cols(c * 9 + k, p);
                }
            }
        }
    }
    return x;
}

/// Affine map applied per column: weight * x + bias.
template <typename Scalar>
Mat<Scalar> affine(const Mat<Scalar>& weight, const Mat<Scalar>& bias, const Mat<Scalar>& x) {
    Mat<Scalar> y = weight * x;
    y.colwise() += bias.col(0);
    return y;
}

template <typename Scalar>
void affine_backward(const Mat<Scalar>& weight, const Mat<Scalar>& x, const Mat<Scalar>& dy,
                     Mat<Scalar>& dweight, Mat<Scalar>& dbias, Mat<Scalar>* dx) {
    dweight.noalias() += dy * x.transpose();
    dbias.col(0) += dy.rowwise().sum();
    if (dx) *dx = weight.transpose() * dy;
}

template <typename Scalar>
Mat<Scalar> relu(const Mat<Scalar>& z) {
    return z.cwiseMax(Scalar(0));
}

/// Gradient through relu given the pre-activation.
template <typename Scalar>
Mat<Scalar> relu_backward(const Mat<Scalar>& z, const Mat<Scalar>& dy) {
    return (z.array() > Scalar(0)).select(dy, Scalar(0));
}

/// 2x2 average pooling, stride 2, output ceil(H/2) x ceil(W/2); partial
/// windows at the border average only the cells they cover.
template <typename Scalar>
Mat<Scalar> avgpool2(const Mat<Scalar>& x, Shape in) {
    const Shape out{ceil_div(in.height, 2), ceil_div(in.width, 2)};
    Mat<Scalar> y = Mat<Scalar>::Zero(x.rows(), out.cells());
    for (int oy = 0; oy < out.height; ++oy) {
        for (int ox = 0; ox < out.width; ++ox) {
            const int y1 = std::min(2 * oy + 2, in.height);
            const int x1 = std::min(2 * ox + 2, in.width);
            const Scalar inv = Scalar(1) / Scalar((y1 - 2 * oy) * (x1 - 2 * ox));
            auto col = y.col(oy * out.width + ox);
            for (int iy = 2 * oy; iy < y1; ++iy)
                for (int ix = 2 * ox; ix < x1; ++ix) col += x.col(iy * in.width + ix);
            col *= inv;
        }
    }
    return y;
}

template <typename Scalar>
Mat<Scalar> avgpool2_backward(const Mat<Scalar>& dy, Shape in) {
    const Shape out{ceil_div(in.height, 2), ceil_div(in.width, 2)};
    Mat<Scalar> dx(dy.rows(), in.cells());
    for (int oy = 0; oy < out.height; ++oy) {
        for (int ox = 0; ox < out.width; ++ox) {
            const int y1 = std::min(2 * oy + 2, in.height);
            const int x1 = std::min(2 * ox + 2, in.width);
            const Scalar inv = Scalar(1) / Scalar((y1 - 2 * oy) * (x1 - 2 * ox));
            const auto g = (dy.col(oy * out.width + ox) * inv).eval();
            for (int iy = 2 * oy; iy < y1; ++iy)
                for (int ix = 2 * ox; ix < x1; ++ix) dx.col(iy * in.width + ix) = g;
        }
    }
    return dx;
}

/// One bilinear tap: up to four (cell, weight) pairs.
struct BilinearTap {
    int cell[4];
    double weight[4];
};

inline BilinearTap bilinear_tap(double fx, double fy, Shape s) {
    fx = std::clamp(fx, 0.0, s.width - 1.0);
    fy = std::clamp(fy, 0.0, s.height - 1.0);
    const int x0 = static_cast<int>(fx);
    const int y0 = static_cast<int>(fy);
    const int x1 = std::min(x0 + 1, s.width - 1);
    const int y1 = std::min(y0 + 1, s.height - 1);
    const double tx = fx - x0;
    const double ty = fy - y0;
    return {{y0 * s.width + x0, y0 * s.width + x1, y1 * s.width + x0, y1 * s.width + x1},
            {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty}};
}

/// Region feature extraction on a grid x grid layout with samples x samples
/// bilinear taps per bin. Returns (channels*grid*grid) x boxes; row index is
/// bin * channels + channel.
struct RoiAlignSpec {
    int grid = 3;
    int samples = 2;
    int stride = 8;
};

inline std::vector<BilinearTap> roi_align_taps(const BBox& b, Shape s, const RoiAlignSpec& spec) {
    std::vector<BilinearTap> taps;
    taps.reserve(static_cast<std::size_t>(spec.grid * spec.grid * spec.samples * spec.samples));
    const double bw = b.width() / spec.grid;
    const double bh = b.height() / spec.grid;
    for (int gy = 0; gy < spec.grid; ++gy)
        for (int gx = 0; gx < spec.grid; ++gx)
            for (int sy = 0; sy < spec.samples; ++sy)
                for (int sx = 0; sx < spec.samples; ++sx) {
                    const double x = b.x_min + (gx + (sx + 0.5) / spec.samples) * bw;
                    const double y = b.y_min + (gy + (sy + 0.5) / spec.samples) * bh;
                    taps.push_back(bilinear_tap(x / spec.stride - 0.5, y / spec.stride - 0.5, s));
                }
    return taps;
}

template <typename Scalar>
Mat<Scalar> roi_align(const Mat<Scalar>& fm, Shape s, const std::vector<BBox>& boxes,
                      const RoiAlignSpec& spec) {
    const auto channels = fm.rows();
    const int bins = spec.grid * spec.grid;
    const int per_bin = spec.samples * spec.samples;
    const Scalar inv = Scalar(1) / Scalar(per_bin);
    Mat<Scalar> out = Mat<Scalar>::Zero(channels * bins, static_cast<Eigen::Index>(boxes.size()));
    for (std::size_t n = 0; n < boxes.size(); ++n) {
        const auto taps = roi_align_taps(boxes[n], s, spec);
        for (int bin = 0; bin < bins; ++bin) {
            auto seg = out.col(static_cast<Eigen::Index>(n)).segment(bin * channels, channels);
            for (int k = 0; k < per_bin; ++k) {
                const auto& t = taps[static_cast<std::size_t>(bin * per_bin + k)];
                for (int i = 0; i < 4; ++i)
                    if (t.weight[i] != 0.0) seg += (Scalar(t.weight[i]) * inv) * fm.col(t.cell[i]);
            }
        }
    }
    return out;
}

/// Accumulates the feature-map gradient of roi_align into dfm.
template <typename Scalar>
void roi_align_backward(const Mat<Scalar>& dout, Shape s, const std::vector<BBox>& boxes,
                        const RoiAlignSpec& spec, Mat<Scalar>& dfm) {
    const auto channels = dfm.rows();
    const int bins = spec.grid * spec.grid;
    const int per_bin = spec.samples * spec.samples;
    const Scalar inv = Scalar(1) / Scalar(per_bin);
    for (std::size_t n = 0; n < boxes.size(); ++n) {
        const auto taps = roi_align_taps(boxes[n], s, spec);
        for (int bin = 0; bin < bins; ++bin) {
            const auto seg = dout.col(static_cast<Eigen::Index>(n)).segment(bin * channels, channels);
            for (int k = 0; k < per_bin; ++k) {
                const auto& t = taps[static_cast<std::size_t>(bin * per_bin + k)];
                for (int i = 0; i < 4; ++i)
                    if (t.weight[i] != 0.0) dfm.col(t.cell[i]) += (Scalar(t.weight[i]) * inv) * seg;
            }
        }
    }
}

// Losses on logits.

template <typename Scalar>
Scalar sigmoid(Scalar z) {
    return z >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-z)) : std::exp(z) / (Scalar(1) + std::exp(z));
}

/// Binary cross-entropy on a logit, numerically stable.
template <typename Scalar>
Scalar bce_with_logit(Scalar z, Scalar target) {
    return std::max(z, Scalar(0)) - z * target + std::log1p(std::exp(-std::abs(z)));
}

template <typename Scalar>
Scalar smooth_l1(Scalar x, Scalar beta) {
    const Scalar a = std::abs(x);
    return a < beta ? Scalar(0.5) * a * a / beta : a - Scalar(0.5) * beta;
}

template <typename Scalar>
Scalar smooth_l1_grad(Scalar x, Scalar beta) {
    const Scalar a = std::abs(x);
    if (a < beta) return x / beta;
    return x > 0 ? Scalar(1) : Scalar(-1);
}

/// Column-wise softmax.
template <typename Scalar>
Mat<Scalar> softmax_cols(const Mat<Scalar>& logits) {
    Mat<Scalar> p(logits.rows(), logits.cols());
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        const Scalar m = logits.col(j).maxCoeff();
        p.col(j) = (logits.col(j).array() - m).exp().matrix();
        p.col(j) /= p.col(j).sum();
    }
    return p;
}

/// Column-wise log-softmax.
template <typename Scalar>
Mat<Scalar> log_softmax_cols(const Mat<Scalar>& logits) {
    Mat<Scalar> out(logits.rows(), logits.cols());
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
        const Scalar m = logits.col(j).maxCoeff();
        const Scalar lse = m + std::log((logits.col(j).array() - m).exp().sum());
        out.col(j) = logits.col(j).array() - lse;
    }
    return out;
}

}  // namespace miadapt::nn
