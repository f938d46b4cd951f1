#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sparta/common.hpp"

namespace sparta {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Dense N-dimensional array of doubles, row-major in the declared axis
/// order. Feature maps use the N x H x W x C layout throughout.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(Shape s) : shape(std::move(s)) {
        data.assign(count(shape), 0.0);
    }

    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (count(shape) != data.size())
            throw ShapeError(detail::concat("tensor: shape ", shape_str(shape),
                                            " expects ", count(shape),
                                            " values, got ", data.size()));
        for (const std::size_t e : shape)
            if (e == 0) throw ShapeError("tensor: zero extent in " + shape_str(shape));
    }

    static std::size_t count(const Shape& s) {
        std::size_t n = 1;
        for (const std::size_t e : s) n *= e;
        return n;
    }

    static Tensor full(Shape s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    // NHWC accessors; valid for rank-4 tensors only.
    std::size_t n() const { return shape[0]; }
    std::size_t h() const { return shape[1]; }
    std::size_t w() const { return shape[2]; }
    std::size_t c() const { return shape[3]; }

    double& at4(std::size_t n_, std::size_t h_, std::size_t w_, std::size_t c_) {
        return data[((n_ * shape[1] + h_) * shape[2] + w_) * shape[3] + c_];
    }
    const double& at4(std::size_t n_, std::size_t h_, std::size_t w_, std::size_t c_) const {
        return data[((n_ * shape[1] + h_) * shape[2] + w_) * shape[3] + c_];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (const double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    return std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------
// Elementwise ops with trailing-axis broadcasting (NumPy alignment rule:
// shapes are right-aligned, extents must match or be 1).
// ---------------------------------------------------------------------------

enum class BinaryOp { Add, Sub, Mul, Div, Min, Max };
enum class UnaryOp { Neg, Abs, Exp, Log, Sqrt, Relu, Sigmoid, Tanh, Softplus, Sign };

namespace detail {

inline double apply(BinaryOp op, double a, double b) {
    switch (op) {
        case BinaryOp::Add: return a + b;
        case BinaryOp::Sub: return a - b;
        case BinaryOp::Mul: return a * b;
        case BinaryOp::Div: return a / b;
        case BinaryOp::Min: return std::min(a, b);
        case BinaryOp::Max: return std::max(a, b);
    }
    return 0.0;
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(1+e^x) without overflow for large |x|.
inline double stable_softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double apply(UnaryOp op, double x) {
    switch (op) {
        case UnaryOp::Neg: return -x;
        case UnaryOp::Abs: return std::abs(x);
        case UnaryOp::Exp: return std::exp(x);  // may overflow to inf for x > ~709
        case UnaryOp::Log: return std::log(x);
        case UnaryOp::Sqrt: return std::sqrt(x);
        case UnaryOp::Relu: return x > 0.0 ? x : 0.0;
        case UnaryOp::Sigmoid: return stable_sigmoid(x);
        case UnaryOp::Tanh: return std::tanh(x);
        case UnaryOp::Softplus: return stable_softplus(x);
        case UnaryOp::Sign: return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    }
    return 0.0;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::size_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError(detail::concat("elementwise: shapes ", shape_str(a),
                                            " and ", shape_str(b),
                                            " are not broadcastable"));
        out[r - 1 - i] = std::max(ea, eb);
    }
    return out;
}

// Strides of `s` viewed as shape `out` (0 where broadcast).
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t acc = 1;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const std::size_t axis = s.size() - 1 - i;
        const std::size_t out_axis = out.size() - 1 - i;
        strides[out_axis] = (s[axis] == 1 && out[out_axis] != 1) ? 0 : acc;
        acc *= s[axis];
    }
    return strides;
}

} // namespace detail

inline Tensor elementwise(UnaryOp op, const Tensor& a) {
    Tensor out(a.shape);
    const double* src = a.ptr();
    double* dst = out.ptr();
    const std::size_t n = a.size();
    parallel_for(n, [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) dst[i] = detail::apply(op, src[i]);
    });
    return out;
}

inline Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
    if (a.shape == b.shape) {
        Tensor out(a.shape);
        const double* pa = a.ptr();
        const double* pb = b.ptr();
        double* dst = out.ptr();
        parallel_for(a.size(), [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) dst[i] = detail::apply(op, pa[i], pb[i]);
        });
        return out;
    }
    const Shape os = detail::broadcast_shape(a.shape, b.shape);
    const auto sa = detail::broadcast_strides(a.shape, os);
    const auto sb = detail::broadcast_strides(b.shape, os);
    Tensor out(os);
    const std::size_t r = os.size();
    std::vector<std::size_t> idx(r, 0);
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < out.size(); ++o) {
        out.data[o] = detail::apply(op, pa[ia], pb[ib]);
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            ia += sa[ax];
            ib += sb[ax];
            if (idx[ax] < os[ax]) break;
            ia -= sa[ax] * os[ax];
            ib -= sb[ax] * os[ax];
            idx[ax] = 0;
        }
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Div, a, b); }

inline Tensor scale(const Tensor& a, double k) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * k;
    return out;
}

inline double sum(const Tensor& a) {
    double s = 0.0;
    for (const double v : a.data) s += v;
    return s;
}

/// Reduces a gradient computed at the broadcast shape back onto the operand
/// shape by summing over every broadcast axis.
inline Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
    if (g.shape == target) return g;
    const auto strides = detail::broadcast_strides(target, g.shape);
    Tensor out(target);
    const std::size_t r = g.shape.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t it = 0;
    for (std::size_t o = 0; o < g.size(); ++o) {
        out.data[it] += g.data[o];
        for (std::size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            it += strides[ax];
            if (idx[ax] < g.shape[ax]) break;
            it -= strides[ax] * g.shape[ax];
            idx[ax] = 0;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Small blocked GEMM. Row-major, C(M x N) += A(M x K) * B(K x N). The 4-row
// block keeps B rows hot and gives the compiler independent streams to
// vectorize; accumulation order is fixed, so results are deterministic.
// ---------------------------------------------------------------------------

namespace detail {

inline void gemm_accum_rows(std::size_t i_begin, std::size_t i_end, std::size_t K,
                            std::size_t N, const double* A, const double* B, double* C) {
    std::size_t i = i_begin;
    for (; i + 4 <= i_end; i += 4) {
        const double* a0 = A + i * K;
        const double* a1 = a0 + K;
        const double* a2 = a1 + K;
        const double* a3 = a2 + K;
        double* c0 = C + i * N;
        double* c1 = c0 + N;
        double* c2 = c1 + N;
        double* c3 = c2 + N;
        for (std::size_t k = 0; k < K; ++k) {
            const double* b = B + k * N;
            const double v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
            for (std::size_t j = 0; j < N; ++j) {
                const double bj = b[j];
                c0[j] += v0 * bj;
                c1[j] += v1 * bj;
                c2[j] += v2 * bj;
                c3[j] += v3 * bj;
            }
        }
    }
    for (; i < i_end; ++i) {
        const double* a = A + i * K;
        double* c = C + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const double v = a[k];
            const double* b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += v * b[j];
        }
    }
}

inline void gemm_accum(std::size_t M, std::size_t K, std::size_t N, const double* A,
                       const double* B, double* C) {
    if (M >= 64 && thread_count() > 1) {
        parallel_for(M, [&](std::size_t b, std::size_t e) {
            gemm_accum_rows(b, e, K, N, A, B, C);
        });
    } else {
        gemm_accum_rows(0, M, K, N, A, B, C);
    }
}

// C(M x K) = A(M x N) * B^T where B is (K x N): rows of A dotted with rows
// of B. Four accumulators keep the reduction order fixed while letting the
// compiler use SIMD lanes.
inline void gemm_abt_rows(std::size_t i_begin, std::size_t i_end, std::size_t N,
                          std::size_t K, const double* A, const double* B, double* C) {
    for (std::size_t i = i_begin; i < i_end; ++i) {
        const double* a = A + i * N;
        double* c = C + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const double* b = B + k * N;
            double acc[4] = {0.0, 0.0, 0.0, 0.0};
            std::size_t j = 0;
            for (; j + 4 <= N; j += 4) {
                acc[0] += a[j] * b[j];
                acc[1] += a[j + 1] * b[j + 1];
                acc[2] += a[j + 2] * b[j + 2];
                acc[3] += a[j + 3] * b[j + 3];
            }
            double s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
            for (; j < N; ++j) s += a[j] * b[j];
            c[k] = s;
        }
    }
}

inline void gemm_abt(std::size_t M, std::size_t N, std::size_t K, const double* A,
                     const double* B, double* C) {
    if (M >= 64 && thread_count() > 1) {
        parallel_for(M, [&](std::size_t b, std::size_t e) {
            gemm_abt_rows(b, e, N, K, A, B, C);
        });
    } else {
        gemm_abt_rows(0, M, N, K, A, B, C);
    }
}

// C(K x N) += A^T * B where A is (M x K), B is (M x N).
inline void gemm_atb(std::size_t M, std::size_t K, std::size_t N, const double* A,
                     const double* B, double* C) {
    std::size_t i = 0;
    for (; i + 4 <= M; i += 4) {
        const double* a0 = A + i * K;
        const double* a1 = a0 + K;
        const double* a2 = a1 + K;
        const double* a3 = a2 + K;
        const double* b0 = B + i * N;
        const double* b1 = b0 + N;
        const double* b2 = b1 + N;
        const double* b3 = b2 + N;
        for (std::size_t k = 0; k < K; ++k) {
            double* c = C + k * N;
            const double v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
            for (std::size_t j = 0; j < N; ++j)
                c[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
        }
    }
    for (; i < M; ++i) {
        const double* a = A + i * K;
        const double* b = B + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const double v = a[k];
            double* c = C + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += v * b[j];
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation), NHWC activations, KKIO weights.
// ---------------------------------------------------------------------------

struct ConvSpec {
    int stride = 1;
    int pad = 0;
};

namespace detail {

inline void check_conv_args(const Tensor& x, const Tensor& w, const Tensor& b,
                            const ConvSpec& cs) {
    if (x.rank() != 4)
        throw ShapeError("conv2d: input must be rank 4 (NxHxWxC), got " + shape_str(x.shape));
    if (w.rank() != 4)
        throw ShapeError("conv2d: weights must be rank 4 (KxKxCinxCout), got " + shape_str(w.shape));
    if (w.shape[0] != w.shape[1])
        throw ShapeError("conv2d: kernel must be square, got " + shape_str(w.shape));
    if (w.shape[0] % 2 == 0)
        throw ShapeError(detail::concat("conv2d: kernel size must be odd, got ", w.shape[0]));
    if (x.shape[3] != w.shape[2])
        throw ShapeError(detail::concat("conv2d: channel mismatch, input has ", x.shape[3],
                                        " channels but weights expect ", w.shape[2]));
    if (b.size() > 0 && (b.rank() != 1 || b.shape[0] != w.shape[3]))
        throw ShapeError(detail::concat("conv2d: bias shape ", shape_str(b.shape),
                                        " does not match ", w.shape[3], " output channels"));
    if (cs.stride < 1) throw ValueError("conv2d: stride must be >= 1");
    if (cs.pad < 0) throw ValueError("conv2d: pad must be >= 0");
    if (cs.pad == 0 && (x.shape[1] < w.shape[0] || x.shape[2] < w.shape[0]))
        throw ShapeError(detail::concat("conv2d: spatial extents ", x.shape[1], "x", x.shape[2],
                                        " smaller than kernel ", w.shape[0], " with pad=0"));
}

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, const ConvSpec& cs) {
    return (in + 2 * static_cast<std::size_t>(cs.pad) - k) / static_cast<std::size_t>(cs.stride) + 1;
}

// One image's receptive fields as rows: (Ho*Wo) x (K*K*Cin).
inline void im2col(const double* x, std::size_t H, std::size_t W, std::size_t C,
                   std::size_t K, const ConvSpec& cs, std::size_t Ho, std::size_t Wo,
                   double* cols) {
    const long pad = cs.pad;
    const long stride = cs.stride;
    double* row = cols;
    for (std::size_t ho = 0; ho < Ho; ++ho) {
        for (std::size_t wo = 0; wo < Wo; ++wo) {
            for (std::size_t kh = 0; kh < K; ++kh) {
                const long hi = static_cast<long>(ho) * stride + static_cast<long>(kh) - pad;
                for (std::size_t kw = 0; kw < K; ++kw) {
                    const long wi = static_cast<long>(wo) * stride + static_cast<long>(kw) - pad;
                    if (hi < 0 || hi >= static_cast<long>(H) || wi < 0 ||
                        wi >= static_cast<long>(W)) {
                        std::fill(row, row + C, 0.0);
                    } else {
                        const double* src = x + (static_cast<std::size_t>(hi) * W +
                                                 static_cast<std::size_t>(wi)) * C;
                        std::copy(src, src + C, row);
                    }
                    row += C;
                }
            }
        }
    }
}

// Scatter-add of column gradients back to image layout.
inline void col2im(const double* cols, std::size_t H, std::size_t W, std::size_t C,
                   std::size_t K, const ConvSpec& cs, std::size_t Ho, std::size_t Wo,
                   double* dx) {
    const long pad = cs.pad;
    const long stride = cs.stride;
    const double* row = cols;
    for (std::size_t ho = 0; ho < Ho; ++ho) {
        for (std::size_t wo = 0; wo < Wo; ++wo) {
            for (std::size_t kh = 0; kh < K; ++kh) {
                const long hi = static_cast<long>(ho) * stride + static_cast<long>(kh) - pad;
                for (std::size_t kw = 0; kw < K; ++kw) {
                    const long wi = static_cast<long>(wo) * stride + static_cast<long>(kw) - pad;
                    if (hi >= 0 && hi < static_cast<long>(H) && wi >= 0 &&
                        wi < static_cast<long>(W)) {
                        double* dst = dx + (static_cast<std::size_t>(hi) * W +
                                            static_cast<std::size_t>(wi)) * C;
                        for (std::size_t c = 0; c < C; ++c) dst[c] += row[c];
                    }
                    row += C;
                }
            }
        }
    }
}

} // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                     const ConvSpec& cs = {}) {
    detail::check_conv_args(x, w, b, cs);
    const std::size_t N = x.shape[0], H = x.shape[1], W = x.shape[2], Cin = x.shape[3];
    const std::size_t K = w.shape[0], Cout = w.shape[3];
    const std::size_t Ho = detail::conv_out_extent(H, K, cs);
    const std::size_t Wo = detail::conv_out_extent(W, K, cs);
    Tensor out({N, Ho, Wo, Cout});

    const std::size_t M = Ho * Wo;
    const std::size_t Kdim = K * K * Cin;
    const bool direct = (K == 1 && cs.stride == 1 && cs.pad == 0);
    std::vector<double> cols;
    if (!direct) cols.resize(M * Kdim);

    for (std::size_t n = 0; n < N; ++n) {
        const double* img = x.ptr() + n * H * W * Cin;
        double* dst = out.ptr() + n * M * Cout;
        if (b.size() > 0) {
            for (std::size_t m = 0; m < M; ++m)
                std::copy(b.ptr(), b.ptr() + Cout, dst + m * Cout);
        }
        const double* A = img;
        if (!direct) {
            detail::im2col(img, H, W, Cin, K, cs, Ho, Wo, cols.data());
            A = cols.data();
        }
        detail::gemm_accum(M, Kdim, Cout, A, w.ptr(), dst);
    }
    return out;
}

inline Tensor conv2d_grad_input(const Tensor& dy, const Tensor& w, const Shape& x_shape,
                                const ConvSpec& cs) {
    const std::size_t N = x_shape[0], H = x_shape[1], W = x_shape[2], Cin = x_shape[3];
    const std::size_t K = w.shape[0], Cout = w.shape[3];
    const std::size_t Ho = dy.shape[1], Wo = dy.shape[2];
    const std::size_t M = Ho * Wo;
    const std::size_t Kdim = K * K * Cin;
    Tensor dx({N, H, W, Cin});
    const bool direct = (K == 1 && cs.stride == 1 && cs.pad == 0);
    std::vector<double> dcols;
    if (!direct) dcols.resize(M * Kdim);
    for (std::size_t n = 0; n < N; ++n) {
        const double* g = dy.ptr() + n * M * Cout;
        double* img = dx.ptr() + n * H * W * Cin;
        if (direct) {
            detail::gemm_abt(M, Cout, Kdim, g, w.ptr(), img);
        } else {
            detail::gemm_abt(M, Cout, Kdim, g, w.ptr(), dcols.data());
            detail::col2im(dcols.data(), H, W, Cin, K, cs, Ho, Wo, img);
        }
    }
    return dx;
}

inline Tensor conv2d_grad_weights(const Tensor& x, const Tensor& dy, std::size_t K,
                                  const ConvSpec& cs) {
    const std::size_t N = x.shape[0], H = x.shape[1], W = x.shape[2], Cin = x.shape[3];
    const std::size_t Cout = dy.shape[3];
    const std::size_t Ho = dy.shape[1], Wo = dy.shape[2];
    const std::size_t M = Ho * Wo;
    const std::size_t Kdim = K * K * Cin;
    Tensor dw({K, K, Cin, Cout});
    const bool direct = (K == 1 && cs.stride == 1 && cs.pad == 0);
    std::vector<double> cols;
    if (!direct) cols.resize(M * Kdim);
    for (std::size_t n = 0; n < N; ++n) {
        const double* img = x.ptr() + n * H * W * Cin;
        const double* g = dy.ptr() + n * M * Cout;
        const double* A = img;
        if (!direct) {
            detail::im2col(img, H, W, Cin, K, cs, Ho, Wo, cols.data());
            A = cols.data();
        }
        detail::gemm_atb(M, Kdim, Cout, A, g, dw.ptr());
    }
    return dw;
}

inline Tensor conv2d_grad_bias(const Tensor& dy) {
    const std::size_t Cout = dy.shape[3];
    Tensor db({Cout});
    const std::size_t M = dy.size() / Cout;
    for (std::size_t m = 0; m < M; ++m) {
        const double* g = dy.ptr() + m * Cout;
        for (std::size_t c = 0; c < Cout; ++c) db.data[c] += g[c];
    }
    return db;
}

// ---------------------------------------------------------------------------
// Pooling, fusion and layout helpers.
// ---------------------------------------------------------------------------

/// Per-channel mean over the spatial extent: N x H x W x C -> N x 1 x 1 x C.
inline Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4)
        throw ShapeError("global_avg_pool: input must be rank 4, got " + shape_str(x.shape));
    const std::size_t N = x.shape[0], HW = x.shape[1] * x.shape[2], C = x.shape[3];
    Tensor out({N, 1, 1, C});
    for (std::size_t n = 0; n < N; ++n) {
        const double* src = x.ptr() + n * HW * C;
        double* dst = out.ptr() + n * C;
        for (std::size_t m = 0; m < HW; ++m)
            for (std::size_t c = 0; c < C; ++c) dst[c] += src[m * C + c];
        const double inv = 1.0 / static_cast<double>(HW);
        for (std::size_t c = 0; c < C; ++c) dst[c] *= inv;
    }
    return out;
}

/// Non-overlapping f x f mean pooling. f must divide both spatial extents.
inline Tensor avg_pool(const Tensor& x, std::size_t f) {
    if (x.rank() != 4)
        throw ShapeError("avg_pool: input must be rank 4, got " + shape_str(x.shape));
    if (f == 0) throw ValueError("avg_pool: factor must be >= 1");
    if (f == 1) return x;
    const std::size_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
    if (H % f != 0 || W % f != 0)
        throw ShapeError(detail::concat("avg_pool: factor ", f, " does not divide ", H, "x", W));
    const std::size_t Ho = H / f, Wo = W / f;
    Tensor out({N, Ho, Wo, C});
    const double inv = 1.0 / static_cast<double>(f * f);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t ho = 0; ho < Ho; ++ho)
            for (std::size_t wo = 0; wo < Wo; ++wo) {
                double* dst = &out.at4(n, ho, wo, 0);
                for (std::size_t dh = 0; dh < f; ++dh)
                    for (std::size_t dw = 0; dw < f; ++dw) {
                        const double* src = &x.at4(n, ho * f + dh, wo * f + dw, 0);
                        for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
                    }
                for (std::size_t c = 0; c < C; ++c) dst[c] *= inv;
            }
    return out;
}

/// Nearest-neighbor upsampling by factor f (each value replicated f x f).
inline Tensor upsample_nearest(const Tensor& x, std::size_t f) {
    if (x.rank() != 4)
        throw ShapeError("upsample_nearest: input must be rank 4, got " + shape_str(x.shape));
    if (f == 0) throw ValueError("upsample_nearest: factor must be >= 1");
    if (f == 1) return x;
    const std::size_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
    Tensor out({N, H * f, W * f, C});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t h = 0; h < H * f; ++h)
            for (std::size_t w = 0; w < W * f; ++w) {
                const double* src = &x.at4(n, h / f, w / f, 0);
                double* dst = &out.at4(n, h, w, 0);
                std::copy(src, src + C, dst);
            }
    return out;
}

/// out[n,h,w,c] = s[n,h,w,0] * v[n,0,0,c]. No sigmoid is applied here.
inline Tensor outer_fuse(const Tensor& s, const Tensor& v) {
    if (s.rank() != 4 || s.shape[3] != 1)
        throw ShapeError("outer_fuse: spatial map must be N x H x W x 1, got " + shape_str(s.shape));
    if (v.rank() != 4 || v.shape[1] != 1 || v.shape[2] != 1)
        throw ShapeError("outer_fuse: channel vector must be N x 1 x 1 x C, got " + shape_str(v.shape));
    if (s.shape[0] != v.shape[0])
        throw ShapeError(detail::concat("outer_fuse: batch mismatch, ", s.shape[0],
                                        " vs ", v.shape[0]));
    const std::size_t N = s.shape[0], H = s.shape[1], W = s.shape[2], C = v.shape[3];
    Tensor out({N, H, W, C});
    for (std::size_t n = 0; n < N; ++n) {
        const double* vs = v.ptr() + n * C;
        for (std::size_t m = 0; m < H * W; ++m) {
            const double sv = s.data[n * H * W + m];
            double* dst = out.ptr() + (n * H * W + m) * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] = sv * vs[c];
        }
    }
    return out;
}

/// Sum over the channel axis, keeping it as extent 1.
inline Tensor sum_channels(const Tensor& x) {
    if (x.rank() != 4)
        throw ShapeError("sum_channels: input must be rank 4, got " + shape_str(x.shape));
    const std::size_t M = x.shape[0] * x.shape[1] * x.shape[2], C = x.shape[3];
    Tensor out({x.shape[0], x.shape[1], x.shape[2], 1});
    for (std::size_t m = 0; m < M; ++m) {
        const double* src = x.ptr() + m * C;
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) acc += src[c];
        out.data[m] = acc;
    }
    return out;
}

inline Tensor slice_channels(const Tensor& x, std::size_t from, std::size_t to) {
    if (x.rank() != 4)
        throw ShapeError("slice_channels: input must be rank 4, got " + shape_str(x.shape));
    if (from >= to || to > x.shape[3])
        throw ShapeError(detail::concat("slice_channels: range [", from, ", ", to,
                                        ") invalid for ", x.shape[3], " channels"));
    const std::size_t M = x.shape[0] * x.shape[1] * x.shape[2], C = x.shape[3];
    const std::size_t Cs = to - from;
    Tensor out({x.shape[0], x.shape[1], x.shape[2], Cs});
    for (std::size_t m = 0; m < M; ++m)
        std::copy(x.ptr() + m * C + from, x.ptr() + m * C + to, out.ptr() + m * Cs);
    return out;
}

/// K x K receptive fields as channels: N x H x W x C -> N x H x W x (K*K*C),
/// zero-padded so the spatial extent is preserved (pad = (K-1)/2).
inline Tensor unfold(const Tensor& x, std::size_t K) {
    if (x.rank() != 4)
        throw ShapeError("unfold: input must be rank 4, got " + shape_str(x.shape));
    if (K % 2 == 0) throw ValueError("unfold: kernel size must be odd");
    const std::size_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
    const ConvSpec cs{1, static_cast<int>((K - 1) / 2)};
    Tensor out({N, H, W, K * K * C});
    for (std::size_t n = 0; n < N; ++n)
        detail::im2col(x.ptr() + n * H * W * C, H, W, C, K, cs, H, W,
                       out.ptr() + n * H * W * K * K * C);
    return out;
}

inline Tensor fold_grad(const Tensor& dcols, const Shape& x_shape, std::size_t K) {
    const std::size_t N = x_shape[0], H = x_shape[1], W = x_shape[2], C = x_shape[3];
    const ConvSpec cs{1, static_cast<int>((K - 1) / 2)};
    Tensor dx({N, H, W, C});
    for (std::size_t n = 0; n < N; ++n)
        detail::col2im(dcols.ptr() + n * H * W * K * K * C, H, W, C, K, cs, H, W,
                       dx.ptr() + n * H * W * C);
    return dx;
}

inline Tensor reshape(const Tensor& x, Shape s) {
    if (Tensor::count(s) != x.size())
        throw ShapeError(detail::concat("reshape: ", shape_str(x.shape), " to ", shape_str(s),
                                        " changes element count"));
    return Tensor(std::move(s), x.data);
}

/// Mirrors the W axis (horizontal flip) of every image in the batch.
inline Tensor flip_horizontal(const Tensor& x) {
    if (x.rank() != 4)
        throw ShapeError("flip_horizontal: input must be rank 4, got " + shape_str(x.shape));
    Tensor out(x.shape);
    const std::size_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3];
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) {
                const double* src = &x.at4(n, h, w, 0);
                double* dst = &out.at4(n, h, W - 1 - w, 0);
                std::copy(src, src + C, dst);
            }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization: little-endian header (u32 rank, u32 extents...) followed by
// raw 64-bit IEEE-754 values, row-major.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("tensor read: truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (const std::size_t e : t.shape) detail::put_u32(os, static_cast<std::uint32_t>(e));
    std::vector<char> buf(t.size() * 8);
    for (std::size_t i = 0; i < t.size(); ++i) {
        std::uint64_t v;
        std::memcpy(&v, &t.data[i], 8);
        for (int k = 0; k < 8; ++k) buf[i * 8 + k] = static_cast<char>((v >> (8 * k)) & 0xff);
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline Tensor read_tensor(std::istream& is) {
    const std::uint32_t rank = detail::get_u32(is);
    if (rank > 8) throw IoError(detail::concat("tensor read: implausible rank ", rank));
    Shape s(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
        s[i] = detail::get_u32(is);
        if (s[i] == 0) throw IoError("tensor read: zero extent");
    }
    const std::size_t n = Tensor::count(s);
    std::vector<char> buf(n * 8);
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!is) throw IoError("tensor read: truncated payload");
    Tensor t(std::move(s));
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t v = 0;
        for (int k = 0; k < 8; ++k)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i * 8 + k])) << (8 * k);
        std::memcpy(&t.data[i], &v, 8);
    }
    return t;
}

inline void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path);
    return read_tensor(is);
}

} // namespace sparta
