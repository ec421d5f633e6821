#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "refonce/tensor.hpp"

namespace refonce {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
    if (s.size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "add", [a, b](const std::vector<T>& g) {
        if (auto* ga = detail::grad_of(a))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (auto* gb = detail::grad_of(b))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
    });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "sub", [a, b](const std::vector<T>& g) {
        if (auto* ga = detail::grad_of(a))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (auto* gb = detail::grad_of(b))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "mul", [a, b](const std::vector<T>& g) {
        if (auto* ga = detail::grad_of(a))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b[i];
        if (auto* gb = detail::grad_of(b))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a[i];
    });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return detail::make_result<T>(a.shape(), std::move(out), {a}, "scale", [a, s](const std::vector<T>& g) {
        if (auto* ga = detail::grad_of(a))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * s;
    });
}

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
    double acc = 0;
    for (T v : a.data()) acc += v;
    return detail::make_result<T>({1}, {static_cast<T>(acc)}, {a}, "sum", [a](const std::vector<T>& g) {
        if (auto* ga = detail::grad_of(a))
            for (auto& v : *ga) v += g[0];
    });
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Weighted sum <a, w> with w treated as a constant.
template <typename T>
TensorT<T> dot_const(const TensorT<T>& a, const std::vector<T>& w) {
    if (w.size() != a.numel()) throw ShapeError("dot_const: weight length mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < w.size(); ++i) acc += static_cast<double>(a[i]) * w[i];
    return detail::make_result<T>({1}, {static_cast<T>(acc)}, {a}, "dot_const", [a, w](const std::vector<T>& g) {
        if (auto* ga = detail::grad_of(a))
            for (std::size_t i = 0; i < w.size(); ++i) (*ga)[i] += g[0] * w[i];
    });
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    return detail::make_result<T>(std::move(shape), a.vec(), {a}, "reshape", [a](const std::vector<T>& g) {
        if (auto* ga = detail::grad_of(a))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    });
}

/// 2-D transpose.
template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
    detail::require_rank(a.shape(), 2, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    return detail::make_result<T>({c, r}, std::move(out), {a}, "transpose", [a, r, c](const std::vector<T>& g) {
        if (auto* ga = detail::grad_of(a))
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[j * r + i];
    });
}

/// Concatenate two C_i x H x W maps along the channel axis.
template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_rank(a.shape(), 3, "concat_channels");
    detail::require_rank(b.shape(), 3, "concat_channels");
    if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
        throw ShapeError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<T> out(a.vec());
    out.insert(out.end(), b.data().begin(), b.data().end());
    const std::size_t na = a.numel();
    return detail::make_result<T>({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(out), {a, b}, "concat",
                                  [a, b, na](const std::vector<T>& g) {
                                      if (auto* ga = detail::grad_of(a))
                                          for (std::size_t i = 0; i < na; ++i) (*ga)[i] += g[i];
                                      if (auto* gb = detail::grad_of(b))
                                          for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += g[na + i];
                                  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n);
    kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data(), false);
    return detail::make_result<T>({m, n}, std::move(out), {a, b}, "matmul", [a, b, m, n, k](const std::vector<T>& g) {
        if (auto* ga = detail::grad_of(a)) kernels::gemm_nt(m, k, n, g.data(), b.data().data(), ga->data(), true);
        if (auto* gb = detail::grad_of(b)) kernels::gemm_tn(k, n, m, a.data().data(), g.data(), gb->data(), true);
    });
}

/// Row-wise affine map y = x W^T (+ b) for x of shape N x in (or a vector of
/// length in), W of shape out x in.
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias = nullptr) {
    const bool vec = x.rank() == 1;
    const std::size_t in = vec ? x.dim(0) : x.dim(1);
    const std::size_t rows = vec ? 1 : x.dim(0);
    if (x.rank() > 2 || w.rank() != 2 || w.dim(1) != in) {
        throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
    }
    const std::size_t out_dim = w.dim(0);
    if (bias && (bias->rank() != 1 || bias->dim(0) != out_dim)) {
        throw ShapeError("linear: bias shape " + shape_str(bias->shape()) + " does not match output " +
                         std::to_string(out_dim));
    }
    std::vector<T> out(rows * out_dim);
    kernels::gemm_nt(rows, out_dim, in, x.data().data(), w.data().data(), out.data(), false);
    if (bias) {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out_dim; ++o) out[r * out_dim + o] += (*bias)[o];
    }
    Shape shape = vec ? Shape{out_dim} : Shape{rows, out_dim};
    std::vector<TensorT<T>> inputs{x, w};
    TensorT<T> b = bias ? *bias : TensorT<T>();
    if (bias) inputs.push_back(b);
    return detail::make_result<T>(
        std::move(shape), std::move(out), std::move(inputs), "linear",
        [x, w, b, rows, in, out_dim](const std::vector<T>& g) {
            if (auto* gx = detail::grad_of(x))
                kernels::gemm_nn(rows, in, out_dim, g.data(), w.data().data(), gx->data(), true);
            if (auto* gw = detail::grad_of(w))
                kernels::gemm_tn(out_dim, in, rows, g.data(), x.data().data(), gw->data(), true);
            if (b.defined()) {
                if (auto* gb = detail::grad_of(b))
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t o = 0; o < out_dim; ++o) (*gb)[o] += g[r * out_dim + o];
            }
        });
}

// ---------------------------------------------------------------------------
// Normalization and softmax

namespace detail {

struct AxisSplit {
    std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, int axis, const char* op) {
    const int rank = static_cast<int>(s.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ShapeError(std::string(op) + ": axis out of range for " + shape_str(s));
    AxisSplit sp{1, s[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < rank; ++i) sp.inner *= s[static_cast<std::size_t>(i)];
    return sp;
}

}  // namespace detail

/// Softmax along `axis` (default: last), with max subtraction.
template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis = -1) {
    const auto sp = detail::split_axis(x.shape(), axis, "softmax");
    if (sp.n == 0) throw ShapeError("softmax: empty axis");
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.n * sp.inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t i = 0; i < sp.n; ++i) mx = std::max(mx, x[base + i * sp.inner]);
            double z = 0;
            for (std::size_t i = 0; i < sp.n; ++i) {
                const T e = std::exp(x[base + i * sp.inner] - mx);
                out[base + i * sp.inner] = e;
                z += e;
            }
            for (std::size_t i = 0; i < sp.n; ++i)
                out[base + i * sp.inner] = static_cast<T>(out[base + i * sp.inner] / z);
        }
    }
    auto y = std::make_shared<std::vector<T>>(out);
    return detail::make_result<T>(x.shape(), std::move(out), {x}, "softmax", [x, y, sp](const std::vector<T>& g) {
        auto* gx = detail::grad_of(x);
        if (!gx) return;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t in = 0; in < sp.inner; ++in) {
                const std::size_t base = o * sp.n * sp.inner + in;
                double dot = 0;
                for (std::size_t i = 0; i < sp.n; ++i) dot += g[base + i * sp.inner] * (*y)[base + i * sp.inner];
                for (std::size_t i = 0; i < sp.n; ++i) {
                    const std::size_t idx = base + i * sp.inner;
                    (*gx)[idx] += static_cast<T>((*y)[idx] * (g[idx] - dot));
                }
            }
        }
    });
}

/// Layer normalization over the last axis with per-channel gain and bias.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias, T eps = T(1e-5)) {
    if (eps <= T(0)) throw ValueError("layer_norm: eps must be positive");
    const std::size_t c = x.shape().back();
    if (gain.numel() != c || bias.numel() != c) {
        throw ShapeError("layer_norm: affine parameters " + shape_str(gain.shape()) + " do not match channels " +
                         std::to_string(c));
    }
    const std::size_t rows = x.numel() / c;
    std::vector<T> out(x.numel());
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * c;
        double mu = 0;
        for (std::size_t i = 0; i < c; ++i) mu += xr[i];
        mu /= static_cast<double>(c);
        double var = 0;
        for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
        (*inv_std)[r] = static_cast<T>(is);
        for (std::size_t i = 0; i < c; ++i) {
            const T h = static_cast<T>((xr[i] - mu) * is);
            (*xhat)[r * c + i] = h;
            out[r * c + i] = h * gain[i] + bias[i];
        }
    }
    return detail::make_result<T>(
        x.shape(), std::move(out), {x, gain, bias}, "layer_norm",
        [x, gain, bias, xhat, inv_std, rows, c](const std::vector<T>& g) {
            auto* gx = detail::grad_of(x);
            auto* gg = detail::grad_of(gain);
            auto* gb = detail::grad_of(bias);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = g.data() + r * c;
                const T* hr = xhat->data() + r * c;
                if (gg)
                    for (std::size_t i = 0; i < c; ++i) (*gg)[i] += gr[i] * hr[i];
                if (gb)
                    for (std::size_t i = 0; i < c; ++i) (*gb)[i] += gr[i];
                if (gx) {
                    double m1 = 0, m2 = 0;
                    for (std::size_t i = 0; i < c; ++i) {
                        const double dh = static_cast<double>(gr[i]) * gain[i];
                        m1 += dh;
                        m2 += dh * hr[i];
                    }
                    m1 /= static_cast<double>(c);
                    m2 /= static_cast<double>(c);
                    for (std::size_t i = 0; i < c; ++i) {
                        const double dh = static_cast<double>(gr[i]) * gain[i];
                        (*gx)[r * c + i] += static_cast<T>((*inv_std)[r] * (dh - m1 - hr[i] * m2));
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { kTanh, kRelu, kGelu, kSigmoid };

inline Activation parse_activation(std::string_view name) {
    if (name == "tanh") return Activation::kTanh;
    if (name == "relu") return Activation::kRelu;
    if (name == "gelu") return Activation::kGelu;
    if (name == "sigmoid") return Activation::kSigmoid;
    throw ValueError("unknown activation '" + std::string(name) + "'");
}

namespace detail {

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
constexpr double kGeluCoef = 0.044715;
constexpr double kSqrt2OverPi = 0.7978845608028654;

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
void activation_forward(Activation kind, T x, T& y, T& dy) {
    switch (kind) {
        case Activation::kTanh:
            y = std::tanh(x);
            dy = T(1) - y * y;
            break;
        case Activation::kRelu:
            y = x > T(0) ? x : T(0);
            dy = x > T(0) ? T(1) : T(0);
            break;
        case Activation::kGelu: {
            const T u = static_cast<T>(kSqrt2OverPi) * (x + static_cast<T>(kGeluCoef) * x * x * x);
            const T t = std::tanh(u);
            y = T(0.5) * x * (T(1) + t);
            const T du = static_cast<T>(kSqrt2OverPi) * (T(1) + T(3) * static_cast<T>(kGeluCoef) * x * x);
            dy = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
            break;
        }
        case Activation::kSigmoid:
            y = sigmoid_scalar(x);
            dy = y * (T(1) - y);
            break;
    }
}

}  // namespace detail

template <typename T>
TensorT<T> activation(const TensorT<T>& x, Activation kind) {
    std::vector<T> out(x.numel());
    auto deriv = std::make_shared<std::vector<T>>(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) detail::activation_forward(kind, x[i], out[i], (*deriv)[i]);
    return detail::make_result<T>(x.shape(), std::move(out), {x}, "activation", [x, deriv](const std::vector<T>& g) {
        if (auto* gx = detail::grad_of(x))
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * (*deriv)[i];
    });
}

template <typename T>
TensorT<T> tanh(const TensorT<T>& x) {
    return activation(x, Activation::kTanh);
}
template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
    return activation(x, Activation::kRelu);
}
template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
    return activation(x, Activation::kGelu);
}
template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
    return activation(x, Activation::kSigmoid);
}

// ---------------------------------------------------------------------------
// Spatial operations on C x H x W maps

/// Cross-correlation with a square kernel and padding k/2. w is
/// C_out x C_in x k x k, b has C_out entries (may be undefined).
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, std::size_t stride = 1) {
    detail::require_rank(x.shape(), 3, "conv2d");
    detail::require_rank(w.shape(), 4, "conv2d");
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin) {
        throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels but kernel " +
                         shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
    }
    if (w.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square and odd, got " + shape_str(w.shape()));
    if (stride == 0) throw ValueError("conv2d: stride must be positive");
    if (b.defined() && b.numel() != cout) throw ShapeError("conv2d: bias length mismatch");
    const std::size_t pad = k / 2;
    const std::size_t ho = (h + 2 * pad - k) / stride + 1;
    const std::size_t wo = (wd + 2 * pad - k) / stride + 1;
    const std::size_t np = ho * wo, ck = cin * k * k;

    auto cols = std::make_shared<std::vector<T>>(ck * np, T(0));
    for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                T* crow = cols->data() + ((ci * k + ky) * k + kx) * np;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                        crow[oy * wo + ox] = x[(ci * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)];
                    }
                }
            }
    std::vector<T> out(cout * np);
    kernels::gemm_nn(cout, np, ck, w.data().data(), cols->data(), out.data(), false);
    if (b.defined())
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t p = 0; p < np; ++p) out[co * np + p] += b[co];

    std::vector<TensorT<T>> inputs{x, w};
    if (b.defined()) inputs.push_back(b);
    return detail::make_result<T>(
        {cout, ho, wo}, std::move(out), std::move(inputs), "conv2d",
        [x, w, b, cols, cin, h, wd, cout, k, stride, pad, ho, wo, np, ck](const std::vector<T>& g) {
            if (auto* gw = detail::grad_of(w)) kernels::gemm_nt(cout, ck, np, g.data(), cols->data(), gw->data(), true);
            if (b.defined()) {
                if (auto* gb = detail::grad_of(b))
                    for (std::size_t co = 0; co < cout; ++co) {
                        double acc = 0;
                        for (std::size_t p = 0; p < np; ++p) acc += g[co * np + p];
                        (*gb)[co] += static_cast<T>(acc);
                    }
            }
            auto* gx = detail::grad_of(x);
            if (!gx) return;
            std::vector<T> dcols(ck * np);
            kernels::gemm_tn(ck, np, cout, w.data().data(), g.data(), dcols.data(), false);
            for (std::size_t ci = 0; ci < cin; ++ci)
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const T* drow = dcols.data() + ((ci * k + ky) * k + kx) * np;
                        for (std::size_t oy = 0; oy < ho; ++oy) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                (*gx)[(ci * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)] +=
                                    drow[oy * wo + ox];
                            }
                        }
                    }
        });
}

namespace detail {

// Source taps for 2x bilinear upsampling with half-pixel centers
// (align_corners = false): src = max(0, (dst + 0.5) / 2 - 0.5).
struct Taps {
    std::vector<std::size_t> i0, i1;
    std::vector<double> w1;
};

inline Taps upsample_taps(std::size_t in) {
    Taps t;
    const std::size_t out = 2 * in;
    t.i0.resize(out);
    t.i1.resize(out);
    t.w1.resize(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        if (src < 0) src = 0;
        const auto i0 = static_cast<std::size_t>(src);
        t.i0[o] = i0;
        t.i1[o] = i0 + 1 < in ? i0 + 1 : i0;
        t.w1[o] = src - static_cast<double>(i0);
    }
    return t;
}

}  // namespace detail

template <typename T>
TensorT<T> upsample_bilinear_2x(const TensorT<T>& x) {
    detail::require_rank(x.shape(), 3, "upsample_bilinear_2x");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t ho = 2 * h, wo = 2 * w;
    auto ty = std::make_shared<detail::Taps>(detail::upsample_taps(h));
    auto tx = std::make_shared<detail::Taps>(detail::upsample_taps(w));
    std::vector<T> out(c * ho * wo);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T* src = x.data().data() + ch * h * w;
        T* dst = out.data() + ch * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
            const double wy1 = ty->w1[oy], wy0 = 1.0 - wy1;
            const T* r0 = src + ty->i0[oy] * w;
            const T* r1 = src + ty->i1[oy] * w;
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const double wx1 = tx->w1[ox], wx0 = 1.0 - wx1;
                const std::size_t a = tx->i0[ox], bb = tx->i1[ox];
                dst[oy * wo + ox] = static_cast<T>(wy0 * (wx0 * r0[a] + wx1 * r0[bb]) + wy1 * (wx0 * r1[a] + wx1 * r1[bb]));
            }
        }
    }
    return detail::make_result<T>({c, ho, wo}, std::move(out), {x}, "upsample2x",
                                  [x, ty, tx, c, h, w, ho, wo](const std::vector<T>& g) {
                                      auto* gx = detail::grad_of(x);
                                      if (!gx) return;
                                      for (std::size_t ch = 0; ch < c; ++ch) {
                                          T* dst = gx->data() + ch * h * w;
                                          const T* gg = g.data() + ch * ho * wo;
                                          for (std::size_t oy = 0; oy < ho; ++oy) {
                                              const double wy1 = ty->w1[oy], wy0 = 1.0 - wy1;
                                              T* r0 = dst + ty->i0[oy] * w;
                                              T* r1 = dst + ty->i1[oy] * w;
                                              for (std::size_t ox = 0; ox < wo; ++ox) {
                                                  const double wx1 = tx->w1[ox], wx0 = 1.0 - wx1;
                                                  const double v = gg[oy * wo + ox];
                                                  r0[tx->i0[ox]] += static_cast<T>(v * wy0 * wx0);
                                                  r0[tx->i1[ox]] += static_cast<T>(v * wy0 * wx1);
                                                  r1[tx->i0[ox]] += static_cast<T>(v * wy1 * wx0);
                                                  r1[tx->i1[ox]] += static_cast<T>(v * wy1 * wx1);
                                              }
                                          }
                                      }
                                  });
}

/// Non-overlapping average pooling by an integer factor.
template <typename T>
TensorT<T> avg_pool(const TensorT<T>& x, std::size_t factor) {
    detail::require_rank(x.shape(), 3, "avg_pool");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (factor == 0 || h % factor || w % factor) {
        throw ShapeError("avg_pool: factor " + std::to_string(factor) + " does not divide " + shape_str(x.shape()));
    }
    const std::size_t ho = h / factor, wo = w / factor;
    const double inv = 1.0 / static_cast<double>(factor * factor);
    std::vector<T> out(c * ho * wo);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                double acc = 0;
                for (std::size_t dy = 0; dy < factor; ++dy)
                    for (std::size_t dx = 0; dx < factor; ++dx)
                        acc += x[(ch * h + oy * factor + dy) * w + ox * factor + dx];
                out[(ch * ho + oy) * wo + ox] = static_cast<T>(acc * inv);
            }
    return detail::make_result<T>({c, ho, wo}, std::move(out), {x}, "avg_pool",
                                  [x, c, h, w, ho, wo, factor, inv](const std::vector<T>& g) {
                                      auto* gx = detail::grad_of(x);
                                      if (!gx) return;
                                      for (std::size_t ch = 0; ch < c; ++ch)
                                          for (std::size_t y = 0; y < h; ++y)
                                              for (std::size_t xx = 0; xx < w; ++xx)
                                                  (*gx)[(ch * h + y) * w + xx] +=
                                                      static_cast<T>(g[(ch * ho + y / factor) * wo + xx / factor] * inv);
                                  });
}

/// Per-channel mean of a C x H x W map.
template <typename T>
TensorT<T> global_average_pool(const TensorT<T>& x) {
    detail::require_rank(x.shape(), 3, "global_average_pool");
    const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
    std::vector<T> out(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (std::size_t p = 0; p < n; ++p) acc += x[ch * n + p];
        out[ch] = static_cast<T>(acc / static_cast<double>(n));
    }
    return detail::make_result<T>({c}, std::move(out), {x}, "gap", [x, c, n](const std::vector<T>& g) {
        if (auto* gx = detail::grad_of(x)) {
            const T inv = T(1) / static_cast<T>(n);
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t p = 0; p < n; ++p) (*gx)[ch * n + p] += g[ch] * inv;
        }
    });
}

/// Multiply a C x H x W map by a 1 x H x W map broadcast over channels.
template <typename T>
TensorT<T> mul_spatial(const TensorT<T>& x, const TensorT<T>& m) {
    detail::require_rank(x.shape(), 3, "mul_spatial");
    const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
    if (m.numel() != n) throw ShapeError("mul_spatial: map " + shape_str(m.shape()) + " vs " + shape_str(x.shape()));
    std::vector<T> out(x.numel());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < n; ++p) out[ch * n + p] = x[ch * n + p] * m[p];
    return detail::make_result<T>(x.shape(), std::move(out), {x, m}, "mul_spatial", [x, m, c, n](const std::vector<T>& g) {
        if (auto* gx = detail::grad_of(x))
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t p = 0; p < n; ++p) (*gx)[ch * n + p] += g[ch * n + p] * m[p];
        if (auto* gm = detail::grad_of(m))
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t p = 0; p < n; ++p) (*gm)[p] += g[ch * n + p] * x[ch * n + p];
    });
}

/// X + G * ((1 + gamma) * X + beta) with G broadcast over channels and
/// gamma/beta broadcast over positions. X is C x H x W, G has H*W entries.
template <typename T>
TensorT<T> modulate(const TensorT<T>& x, const TensorT<T>& gate, const TensorT<T>& gamma, const TensorT<T>& beta) {
    detail::require_rank(x.shape(), 3, "modulate");
    const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
    if (gate.numel() != n) throw ShapeError("modulate: gate " + shape_str(gate.shape()) + " vs features " + shape_str(x.shape()));
    if (gamma.numel() != c || beta.numel() != c) {
        throw ShapeError("modulate: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " vs channels " + std::to_string(c));
    }
    std::vector<T> out(x.numel());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < n; ++p) {
            const T xv = x[ch * n + p];
            out[ch * n + p] = xv + gate[p] * ((T(1) + gamma[ch]) * xv + beta[ch]);
        }
    return detail::make_result<T>(
        x.shape(), std::move(out), {x, gate, gamma, beta}, "modulate",
        [x, gate, gamma, beta, c, n](const std::vector<T>& g) {
            auto* gx = detail::grad_of(x);
            auto* gg = detail::grad_of(gate);
            auto* gga = detail::grad_of(gamma);
            auto* gbe = detail::grad_of(beta);
            for (std::size_t ch = 0; ch < c; ++ch) {
                double dgam = 0, dbet = 0;
                for (std::size_t p = 0; p < n; ++p) {
                    const T go = g[ch * n + p];
                    const T xv = x[ch * n + p];
                    if (gx) (*gx)[ch * n + p] += go * (T(1) + gate[p] * (T(1) + gamma[ch]));
                    if (gg) (*gg)[p] += go * ((T(1) + gamma[ch]) * xv + beta[ch]);
                    dgam += static_cast<double>(go) * gate[p] * xv;
                    dbet += static_cast<double>(go) * gate[p];
                }
                if (gga) (*gga)[ch] += static_cast<T>(dgam);
                if (gbe) (*gbe)[ch] += static_cast<T>(dbet);
            }
        });
}

/// Cosine correlation of every position of a C x H x W map with a vector:
/// <x_p, v> / (|x_p| |v| + eps). Returns 1 x H x W.
template <typename T>
TensorT<T> cosine_map(const TensorT<T>& x, const TensorT<T>& v, T eps = T(1e-6)) {
    detail::require_rank(x.shape(), 3, "cosine_map");
    const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
    if (v.numel() != c) throw ShapeError("cosine_map: vector " + shape_str(v.shape()) + " vs " + shape_str(x.shape()));
    double vn2 = 0;
    for (std::size_t ch = 0; ch < c; ++ch) vn2 += static_cast<double>(v[ch]) * v[ch];
    const double vn = std::sqrt(vn2);
    auto dots = std::make_shared<std::vector<double>>(n, 0.0);
    auto norms = std::make_shared<std::vector<double>>(n, 0.0);
    std::vector<T> out(n);
    for (std::size_t p = 0; p < n; ++p) {
        double d = 0, xn2 = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double xv = x[ch * n + p];
            d += xv * v[ch];
            xn2 += xv * xv;
        }
        (*dots)[p] = d;
        (*norms)[p] = std::sqrt(xn2);
        out[p] = static_cast<T>(d / ((*norms)[p] * vn + eps));
    }
    return detail::make_result<T>(
        {1, x.dim(1), x.dim(2)}, std::move(out), {x, v}, "cosine_map",
        [x, v, dots, norms, vn, c, n, eps](const std::vector<T>& g) {
            auto* gx = detail::grad_of(x);
            auto* gv = detail::grad_of(v);
            for (std::size_t p = 0; p < n; ++p) {
                const double xn = (*norms)[p];
                const double den = xn * vn + eps;
                const double gp = g[p];
                const double d = (*dots)[p];
                // d/dx_p: v/den - d * vn * x_p / (xn * den^2)
                // d/dv:   x_p/den - d * xn * v / (vn * den^2)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double xv = x[ch * n + p];
                    if (gx) {
                        double t = v[ch] / den;
                        if (xn > 0) t -= d * vn * xv / (xn * den * den);
                        (*gx)[ch * n + p] += static_cast<T>(gp * t);
                    }
                    if (gv) {
                        double t = xv / den;
                        if (vn > 0) t -= d * xn * v[ch] / (vn * den * den);
                        (*gv)[ch] += static_cast<T>(gp * t);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Losses

/// -log softmax(logits)_target, evaluated with log-sum-exp.
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, std::size_t target) {
    const std::size_t k = logits.numel();
    if (target >= k) {
        throw ValueError("cross_entropy: target " + std::to_string(target) + " out of range for " + std::to_string(k) +
                         " classes");
    }
    T mx = -std::numeric_limits<T>::infinity();
    for (T a : logits.data()) mx = std::max(mx, a);
    double z = 0;
    for (T a : logits.data()) z += std::exp(static_cast<double>(a - mx));
    const double lse = static_cast<double>(mx) + std::log(z);
    const double loss = lse - static_cast<double>(logits[target]);
    return detail::make_result<T>({1}, {static_cast<T>(loss)}, {logits}, "cross_entropy",
                                  [logits, target, lse, k](const std::vector<T>& g) {
                                      if (auto* gl = detail::grad_of(logits))
                                          for (std::size_t i = 0; i < k; ++i) {
                                              const double p = std::exp(static_cast<double>(logits[i]) - lse);
                                              (*gl)[i] += static_cast<T>(g[0] * (p - (i == target ? 1.0 : 0.0)));
                                          }
                                  });
}

/// Mean binary cross-entropy on raw logits against a constant {0,1} target.
template <typename T>
TensorT<T> bce_with_logits(const TensorT<T>& logits, const TensorT<T>& target) {
    if (logits.numel() != target.numel()) {
        throw ShapeError("bce_with_logits: logits " + shape_str(logits.shape()) + " vs target " +
                         shape_str(target.shape()));
    }
    const std::size_t n = logits.numel();
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = logits[i], y = target[i];
        // max(z,0) - z*y + log(1 + exp(-|z|))
        acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    return detail::make_result<T>({1}, {static_cast<T>(acc / static_cast<double>(n))}, {logits}, "bce",
                                  [logits, target, n](const std::vector<T>& g) {
                                      if (auto* gl = detail::grad_of(logits)) {
                                          const double s = g[0] / static_cast<double>(n);
                                          for (std::size_t i = 0; i < n; ++i)
                                              (*gl)[i] += static_cast<T>(
                                                  s * (detail::sigmoid_scalar(static_cast<double>(logits[i])) - target[i]));
                                      }
                                  });
}

}  // namespace refonce
