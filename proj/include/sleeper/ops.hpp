#pragma once

// Differentiable ops. Each backward rule is itself expressed with these ops,
// which is what makes second-order gradients available.

#include <sleeper/autodiff.hpp>
#include <sleeper/tensor.hpp>

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sleeper {

/// Flat source index per output element; -1 yields zero.
using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

inline void require_same(const char* op, const Var& a, const Var& b) {
    if (a.shape() != b.shape()) throw ShapeError(op, {a.shape(), b.shape()});
}

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
    Tensor out(a.shape());
    auto src = a.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
    return out;
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
    Tensor out(a.shape());
    auto x = a.data();
    auto y = b.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
    return out;
}

struct ConvGeometry {
    std::size_t batch, in_ch, height, width, out_ch, kernel, pad, out_h, out_w;

    static ConvGeometry from(const Shape& x, const Shape& w, std::size_t pad) {
        if (x.size() != 4 || w.size() != 4 || x[1] != w[1] || w[2] != w[3])
            throw ShapeError("conv2d", {x, w});
        if (x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3])
            throw ShapeError("conv2d", {x, w}, "kernel larger than padded input");
        return {x[0], x[1], x[2], x[3], w[0], w[2], pad, x[2] + 2 * pad - w[2] + 1, x[3] + 2 * pad - w[3] + 1};
    }
    std::size_t patch() const { return in_ch * kernel * kernel; }
    std::size_t pixels() const { return out_h * out_w; }
};

inline void im2col(const double* img, const ConvGeometry& g, double* cols) {
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        const double* plane = img + c * g.height * g.width;
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel; ++kj, ++row) {
                double* dst = cols + row * g.pixels();
                for (std::size_t oi = 0; oi < g.out_h; ++oi) {
                    const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi + ki) - pad;
                    for (std::size_t oj = 0; oj < g.out_w; ++oj) {
                        const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj + kj) - pad;
                        const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<std::ptrdiff_t>(g.height) &&
                                            jj < static_cast<std::ptrdiff_t>(g.width);
                        dst[oi * g.out_w + oj] = inside ? plane[ii * static_cast<std::ptrdiff_t>(g.width) + jj] : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im(const double* cols, const ConvGeometry& g, double* img) {
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        double* plane = img + c * g.height * g.width;
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            for (std::size_t kj = 0; kj < g.kernel; ++kj, ++row) {
                const double* src = cols + row * g.pixels();
                for (std::size_t oi = 0; oi < g.out_h; ++oi) {
                    const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi + ki) - pad;
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    for (std::size_t oj = 0; oj < g.out_w; ++oj) {
                        const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj + kj) - pad;
                        if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.width)) continue;
                        plane[ii * static_cast<std::ptrdiff_t>(g.width) + jj] += src[oi * g.out_w + oj];
                    }
                }
            }
        }
    }
}

inline Tensor conv_forward(const Tensor& x, const Tensor& w, std::size_t pad) {
    const auto g = ConvGeometry::from(x.shape(), w.shape(), pad);
    Tensor out(Shape{g.batch, g.out_ch, g.out_h, g.out_w});
    std::vector<double> cols(g.patch() * g.pixels());
    ConstMatMap wm(w.data().data(), g.out_ch, g.patch());
    for (std::size_t b = 0; b < g.batch; ++b) {
        im2col(x.data().data() + b * g.in_ch * g.height * g.width, g, cols.data());
        MatMap om(out.data().data() + b * g.out_ch * g.pixels(), g.out_ch, g.pixels());
        om.noalias() = wm * ConstMatMap(cols.data(), g.patch(), g.pixels());
    }
    return out;
}

inline Tensor conv_input_grad(const Tensor& gy, const Tensor& w, std::size_t pad, const Shape& in_shape) {
    const auto g = ConvGeometry::from(in_shape, w.shape(), pad);
    if (gy.shape() != Shape{g.batch, g.out_ch, g.out_h, g.out_w})
        throw ShapeError("conv2d_input_grad", {gy.shape(), w.shape(), in_shape});
    Tensor gx(in_shape);
    RowMat cols(g.patch(), g.pixels());
    ConstMatMap wm(w.data().data(), g.out_ch, g.patch());
    for (std::size_t b = 0; b < g.batch; ++b) {
        cols.noalias() = wm.transpose() * ConstMatMap(gy.data().data() + b * g.out_ch * g.pixels(), g.out_ch, g.pixels());
        col2im(cols.data(), g, gx.data().data() + b * g.in_ch * g.height * g.width);
    }
    return gx;
}

inline Tensor conv_weight_grad(const Tensor& x, const Tensor& gy, std::size_t pad, const Shape& w_shape) {
    const auto g = ConvGeometry::from(x.shape(), w_shape, pad);
    if (gy.shape() != Shape{g.batch, g.out_ch, g.out_h, g.out_w})
        throw ShapeError("conv2d_weight_grad", {x.shape(), gy.shape(), w_shape});
    Tensor gw(w_shape);
    MatMap gm(gw.data().data(), g.out_ch, g.patch());
    std::vector<double> cols(g.patch() * g.pixels());
    for (std::size_t b = 0; b < g.batch; ++b) {
        im2col(x.data().data() + b * g.in_ch * g.height * g.width, g, cols.data());
        gm.noalias() += ConstMatMap(gy.data().data() + b * g.out_ch * g.pixels(), g.out_ch, g.pixels()) *
                        ConstMatMap(cols.data(), g.patch(), g.pixels()).transpose();
    }
    return gw;
}

inline Tensor gather_kernel(const Tensor& x, const std::vector<std::int64_t>& map, const Shape& out_shape) {
    Tensor out(out_shape);
    auto src = x.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < map.size(); ++i) dst[i] = map[i] >= 0 ? src[static_cast<std::size_t>(map[i])] : 0.0;
    return out;
}

inline Tensor scatter_kernel(const Tensor& u, const std::vector<std::int64_t>& map, const Shape& in_shape) {
    Tensor out(in_shape);
    auto src = u.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < map.size(); ++i)
        if (map[i] >= 0) dst[static_cast<std::size_t>(map[i])] += src[i];
    return out;
}

inline Tensor softmax_rows(const Tensor& z) {
    const std::size_t rows = z.dim(0), cols = z.dim(1);
    Tensor out(z.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = z.data().data() + r * cols;
        double* o = out.data().data() + r * cols;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, in[c]);
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += (o[c] = std::exp(in[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) o[c] /= s;
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var neg(const Var& a);
inline Var scale(const Var& a, double c);
inline Var mul(const Var& a, const Var& b);
inline Var div(const Var& a, const Var& b);
inline Var sum(const Var& a);
inline Var matmul(const Var& a, const Var& b);
inline Var transpose(const Var& a);

inline Var add(const Var& a, const Var& b) {
    detail::require_same("add", a, b);
    return make_op("add", detail::map_binary(a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
                   [](const Var& g, const NeedsMask&) { return std::vector<Var>{g, g}; });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same("sub", a, b);
    return make_op("sub", detail::map_binary(a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
                   [](const Var& g, const NeedsMask& needs) {
                       return std::vector<Var>{g, needs[1] ? neg(g) : Var{}};
                   });
}

inline Var mul(const Var& a, const Var& b) {
    detail::require_same("mul", a, b);
    return make_op("mul", detail::map_binary(a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
                   [a, b](const Var& g, const NeedsMask& needs) {
                       return std::vector<Var>{needs[0] ? mul(g, b) : Var{}, needs[1] ? mul(g, a) : Var{}};
                   });
}

inline Var div(const Var& a, const Var& b) {
    detail::require_same("div", a, b);
    return make_op("div", detail::map_binary(a.value(), b.value(), [](double x, double y) { return x / y; }), {a, b},
                   [a, b](const Var& g, const NeedsMask& needs) {
                       return std::vector<Var>{needs[0] ? div(g, b) : Var{},
                                               needs[1] ? neg(div(mul(g, a), mul(b, b))) : Var{}};
                   });
}

inline Var neg(const Var& a) {
    return make_op("neg", detail::map_unary(a.value(), [](double x) { return -x; }), {a},
                   [](const Var& g, const NeedsMask&) { return std::vector<Var>{neg(g)}; });
}

inline Var scale(const Var& a, double c) {
    return make_op("scale", detail::map_unary(a.value(), [c](double x) { return c * x; }), {a},
                   [c](const Var& g, const NeedsMask&) { return std::vector<Var>{scale(g, c)}; });
}

/// s * a for a rank-0 s.
inline Var scale_by(const Var& a, const Var& s) {
    if (s.value().rank() != 0) throw ShapeError("scale_by", {a.shape(), s.shape()}, "factor must be rank-0");
    const double c = s.item();
    return make_op("scale_by", detail::map_unary(a.value(), [c](double x) { return c * x; }), {a, s},
                   [a, s](const Var& g, const NeedsMask& needs) {
                       return std::vector<Var>{needs[0] ? scale_by(g, s) : Var{}, needs[1] ? sum(mul(g, a)) : Var{}};
                   });
}

inline Var sqrt(const Var& a) {
    return make_op("sqrt", detail::map_unary(a.value(), [](double x) { return std::sqrt(x); }), {a},
                   [a](const Var& g, const NeedsMask&) { return std::vector<Var>{div(g, scale(sqrt(a), 2.0))}; });
}

inline Var relu(const Var& a) {
    Tensor mask = detail::map_unary(a.value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
    Var m = Var::constant(mask);
    return make_op("relu", detail::map_unary(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a},
                   [m](const Var& g, const NeedsMask&) { return std::vector<Var>{mul(g, m)}; });
}

/// Elementwise clamp. First-order only: no double-backward rule.
inline Var clamp(const Var& a, double lo, double hi) {
    Tensor mask = detail::map_unary(a.value(), [lo, hi](double x) { return x > lo && x < hi ? 1.0 : 0.0; });
    return make_op(
        "clamp", detail::map_unary(a.value(), [lo, hi](double x) { return std::min(hi, std::max(lo, x)); }), {a},
        [mask](const Var& g, const NeedsMask&) {
            return std::vector<Var>{Var::constant(detail::map_binary(g.value(), mask, std::multiplies<>()))};
        },
        /*twice_differentiable=*/false);
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

inline Var broadcast(const Var& s, const Shape& shape) {
    if (s.value().rank() != 0) throw ShapeError("broadcast", {s.shape(), shape}, "source must be rank-0");
    return make_op("broadcast", Tensor::full(shape, s.item()), {s},
                   [](const Var& g, const NeedsMask&) { return std::vector<Var>{sum(g)}; });
}

inline Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const Shape shape = a.shape();
    return make_op("sum", Tensor::scalar(s), {a},
                   [shape](const Var& g, const NeedsMask&) { return std::vector<Var>{broadcast(g, shape)}; });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }
inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }
inline Var l2_norm(const Var& a) { return sqrt(dot(a, a)); }

inline Var channel_sum(const Var& a);

/// Expands b[C] along axis 1 of `shape`.
inline Var channel_broadcast(const Var& b, const Shape& shape) {
    if (b.value().rank() != 1 || shape.size() < 2 || shape[1] != b.shape()[0])
        throw ShapeError("channel_broadcast", {b.shape(), shape});
    const std::size_t outer = shape[0], ch = shape[1], inner = shape_numel(shape) / (outer * ch);
    Tensor out(shape);
    auto dst = out.data();
    for (std::size_t n = 0; n < outer; ++n)
        for (std::size_t c = 0; c < ch; ++c)
            std::fill_n(dst.begin() + static_cast<std::ptrdiff_t>((n * ch + c) * inner), inner, b.value()[c]);
    return make_op("channel_broadcast", std::move(out), {b},
                   [](const Var& g, const NeedsMask&) { return std::vector<Var>{channel_sum(g)}; });
}

/// Sums every axis except axis 1.
inline Var channel_sum(const Var& a) {
    const Shape shape = a.shape();
    if (shape.size() < 2) throw ShapeError("channel_sum", {shape});
    const std::size_t outer = shape[0], ch = shape[1], inner = a.numel() / (outer * ch);
    Tensor out(Shape{ch});
    auto src = a.value().data();
    for (std::size_t n = 0; n < outer; ++n)
        for (std::size_t c = 0; c < ch; ++c) {
            double s = 0.0;
            for (std::size_t i = 0; i < inner; ++i) s += src[(n * ch + c) * inner + i];
            out[c] += s;
        }
    return make_op("channel_sum", std::move(out), {a},
                   [shape](const Var& g, const NeedsMask&) { return std::vector<Var>{channel_broadcast(g, shape)}; });
}

inline Var row_sum(const Var& a);

/// v[B] -> [B, cols].
inline Var row_broadcast(const Var& v, std::size_t cols) {
    if (v.value().rank() != 1) throw ShapeError("row_broadcast", {v.shape()});
    const std::size_t rows = v.shape()[0];
    Tensor out(Shape{rows, cols});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = v.value()[r];
    return make_op("row_broadcast", std::move(out), {v},
                   [](const Var& g, const NeedsMask&) { return std::vector<Var>{row_sum(g)}; });
}

/// [B, K] -> [B].
inline Var row_sum(const Var& a) {
    if (a.value().rank() != 2) throw ShapeError("row_sum", {a.shape()});
    const std::size_t rows = a.shape()[0], cols = a.shape()[1];
    Tensor out(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += a.value()[r * cols + c];
        out[r] = s;
    }
    return make_op("row_sum", std::move(out), {a},
                   [cols](const Var& g, const NeedsMask&) { return std::vector<Var>{row_broadcast(g, cols)}; });
}

// ---------------------------------------------------------------------------
// Linear algebra and shape

inline Var matmul(const Var& a, const Var& b) {
    if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul", {a.shape(), b.shape()});
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out(Shape{m, n});
    detail::MatMap(out.data().data(), m, n).noalias() =
        detail::ConstMatMap(a.value().data().data(), m, k) * detail::ConstMatMap(b.value().data().data(), k, n);
    return make_op("matmul", std::move(out), {a, b}, [a, b](const Var& g, const NeedsMask& needs) {
        return std::vector<Var>{needs[0] ? matmul(g, transpose(b)) : Var{}, needs[1] ? matmul(transpose(a), g) : Var{}};
    });
}

inline Var transpose(const Var& a) {
    if (a.value().rank() != 2) throw ShapeError("transpose", {a.shape()});
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.value()[i * n + j];
    return make_op("transpose", std::move(out), {a},
                   [](const Var& g, const NeedsMask&) { return std::vector<Var>{transpose(g)}; });
}

inline Var reshape(const Var& a, const Shape& shape) {
    if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", {a.shape(), shape});
    const Shape original = a.shape();
    return make_op("reshape", a.value().reshaped(shape), {a},
                   [original](const Var& g, const NeedsMask&) { return std::vector<Var>{reshape(g, original)}; });
}

inline Var scatter(const Var& u, const IndexMap& map, const Shape& in_shape);

/// out[i] = x[map[i]] (or 0 where map[i] < 0).
inline Var gather(const Var& x, const IndexMap& map, const Shape& out_shape, const std::string& op = "gather") {
    if (map->size() != shape_numel(out_shape)) throw ShapeError(op, {x.shape(), out_shape}, "index map length");
    const Shape in_shape = x.shape();
    return make_op(op, detail::gather_kernel(x.value(), *map, out_shape), {x},
                   [map, in_shape](const Var& g, const NeedsMask&) {
                       return std::vector<Var>{scatter(g, map, in_shape)};
                   });
}

/// Adjoint of gather: out[map[i]] += u[i].
inline Var scatter(const Var& u, const IndexMap& map, const Shape& in_shape) {
    if (map->size() != u.numel()) throw ShapeError("scatter", {u.shape(), in_shape}, "index map length");
    const Shape out_shape = u.shape();
    return make_op("scatter", detail::scatter_kernel(u.value(), *map, in_shape), {u},
                   [map, out_shape](const Var& g, const NeedsMask&) {
                       return std::vector<Var>{gather(g, map, out_shape)};
                   });
}

/// Rows [begin, end) along axis 0.
inline Var slice_batch(const Var& x, std::size_t begin, std::size_t end) {
    if (x.value().rank() < 1 || begin > end || end > x.shape()[0]) throw ShapeError("slice_batch", {x.shape()});
    Shape out_shape = x.shape();
    out_shape[0] = end - begin;
    const std::size_t inner = x.numel() / std::max<std::size_t>(x.shape()[0], 1);
    auto map = std::make_shared<std::vector<std::int64_t>>(shape_numel(out_shape));
    for (std::size_t i = 0; i < map->size(); ++i) (*map)[i] = static_cast<std::int64_t>(begin * inner + i);
    return gather(x, map, out_shape, "slice_batch");
}

/// Concatenates along axis 0.
inline Var concat_batch(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_batch", {}, "no inputs");
    Shape out_shape = parts[0].shape();
    out_shape[0] = 0;
    for (const Var& p : parts) {
        Shape s = p.shape();
        if (s.size() != out_shape.size() || !std::equal(s.begin() + 1, s.end(), out_shape.begin() + 1))
            throw ShapeError("concat_batch", {parts[0].shape(), s});
        out_shape[0] += s[0];
    }
    Tensor out(out_shape);
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const Var& p : parts) {
        offsets.push_back(offset);
        std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
        offset += p.numel();
    }
    std::vector<std::size_t> rows;
    for (const Var& p : parts) rows.push_back(p.shape()[0]);
    return make_op("concat_batch", std::move(out), parts, [rows](const Var& g, const NeedsMask& needs) {
        std::vector<Var> grads(rows.size());
        std::size_t r = 0;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (needs[i]) grads[i] = slice_batch(g, r, r + rows[i]);
            r += rows[i];
        }
        return grads;
    });
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, symmetric zero padding)

inline Var conv2d_input_grad(const Var& gy, const Var& w, std::size_t pad, const Shape& in_shape);
inline Var conv2d_weight_grad(const Var& x, const Var& gy, std::size_t pad, const Shape& w_shape);

/// x[B,C,H,W] * w[O,C,k,k] -> [B,O,H+2p-k+1,W+2p-k+1].
inline Var conv2d(const Var& x, const Var& w, std::size_t pad) {
    return make_op("conv2d", detail::conv_forward(x.value(), w.value(), pad), {x, w},
                   [x, w, pad](const Var& g, const NeedsMask& needs) {
                       return std::vector<Var>{needs[0] ? conv2d_input_grad(g, w, pad, x.shape()) : Var{},
                                               needs[1] ? conv2d_weight_grad(x, g, pad, w.shape()) : Var{}};
                   });
}

inline Var conv2d_input_grad(const Var& gy, const Var& w, std::size_t pad, const Shape& in_shape) {
    return make_op("conv2d_input_grad", detail::conv_input_grad(gy.value(), w.value(), pad, in_shape), {gy, w},
                   [gy, w, pad](const Var& u, const NeedsMask& needs) {
                       return std::vector<Var>{needs[0] ? conv2d(u, w, pad) : Var{},
                                               needs[1] ? conv2d_weight_grad(u, gy, pad, w.shape()) : Var{}};
                   });
}

inline Var conv2d_weight_grad(const Var& x, const Var& gy, std::size_t pad, const Shape& w_shape) {
    return make_op("conv2d_weight_grad", detail::conv_weight_grad(x.value(), gy.value(), pad, w_shape), {x, gy},
                   [x, gy, pad](const Var& u, const NeedsMask& needs) {
                       return std::vector<Var>{needs[0] ? conv2d_input_grad(gy, u, pad, x.shape()) : Var{},
                                               needs[1] ? conv2d(x, u, pad) : Var{}};
                   });
}

// ---------------------------------------------------------------------------
// Pooling and spatial gathers on [B,C,H,W]

/// 2x2 stride-2 max pooling; ties resolve to the first element in row-major order.
/// Derivatives of all orders use the forward argmax.
inline Var max_pool2d(const Var& x) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw ShapeError("max_pool2d", {s}, "spatial extents must be even");
    const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / 2, ow = w / 2;
    auto map = std::make_shared<std::vector<std::int64_t>>(planes * oh * ow);
    auto src = x.value().data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t best = p * h * w + (2 * i) * w + 2 * j;
                for (std::size_t di = 0; di < 2; ++di)
                    for (std::size_t dj = 0; dj < 2; ++dj) {
                        const std::size_t idx = p * h * w + (2 * i + di) * w + 2 * j + dj;
                        if (src[idx] > src[best]) best = idx;
                    }
                (*map)[(p * oh + i) * ow + j] = static_cast<std::int64_t>(best);
            }
    return gather(x, map, Shape{s[0], s[1], oh, ow}, "max_pool2d");
}

/// 2x2 stride-2 average pooling, expressed as a fixed linear map.
inline Var avg_pool2d(const Var& x);

inline Var avg_unpool2d(const Var& g, const Shape& in_shape) {
    const std::size_t planes = in_shape[0] * in_shape[1], h = in_shape[2], w = in_shape[3];
    Tensor out(in_shape);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                out[(p * h + i) * w + j] = 0.25 * g.value()[(p * (h / 2) + i / 2) * (w / 2) + j / 2];
    return make_op("avg_unpool2d", std::move(out), {g},
                   [](const Var& u, const NeedsMask&) { return std::vector<Var>{avg_pool2d(u)}; });
}

inline Var avg_pool2d(const Var& x) {
    const Shape s = x.shape();
    if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw ShapeError("avg_pool2d", {s}, "spatial extents must be even");
    const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / 2, ow = w / 2;
    Tensor out(Shape{s[0], s[1], oh, ow});
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                double acc = 0.0;
                for (std::size_t di = 0; di < 2; ++di)
                    for (std::size_t dj = 0; dj < 2; ++dj) acc += x.value()[(p * h + 2 * i + di) * w + 2 * j + dj];
                out[(p * oh + i) * ow + j] = 0.25 * acc;
            }
    return make_op("avg_pool2d", std::move(out), {x},
                   [s](const Var& g, const NeedsMask&) { return std::vector<Var>{avg_unpool2d(g, s)}; });
}

/// Zero-pads the two spatial axes by `pad` on every side.
inline Var pad2d(const Var& x, std::size_t pad) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("pad2d", {s});
    const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], ph = h + 2 * pad, pw = w + 2 * pad;
    auto map = std::make_shared<std::vector<std::int64_t>>(planes * ph * pw, -1);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                (*map)[(p * ph + i + pad) * pw + j + pad] = static_cast<std::int64_t>((p * h + i) * w + j);
    return gather(x, map, Shape{s[0], s[1], ph, pw}, "pad2d");
}

/// Spatial window [top, top+h) x [left, left+w).
inline Var crop2d(const Var& x, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
    const Shape& s = x.shape();
    if (s.size() != 4 || top + h > s[2] || left + w > s[3]) throw ShapeError("crop2d", {s, Shape{top, left, h, w}});
    const std::size_t planes = s[0] * s[1];
    auto map = std::make_shared<std::vector<std::int64_t>>(planes * h * w);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                (*map)[(p * h + i) * w + j] = static_cast<std::int64_t>((p * s[2] + top + i) * s[3] + left + j);
    return gather(x, map, Shape{s[0], s[1], h, w}, "crop2d");
}

inline Var flip_horizontal(const Var& x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("flip_horizontal", {s});
    const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
    auto map = std::make_shared<std::vector<std::int64_t>>(planes * h * w);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                (*map)[(p * h + i) * w + j] = static_cast<std::int64_t>((p * h + i) * w + (w - 1 - j));
    return gather(x, map, s, "flip_horizontal");
}

// ---------------------------------------------------------------------------
// Classification heads

inline Var softmax(const Var& z) {
    if (z.value().rank() != 2) throw ShapeError("softmax", {z.shape()});
    return make_op("softmax", detail::softmax_rows(z.value()), {z}, [z](const Var& g, const NeedsMask&) {
        const Var s = softmax(z);
        const Var inner = row_sum(mul(g, s));
        return std::vector<Var>{mul(s, sub(g, row_broadcast(inner, z.shape()[1])))};
    });
}

/// Mean softmax cross-entropy of logits z[B,K] against integer labels.
inline Var softmax_cross_entropy(const Var& z, std::span<const int> labels) {
    if (z.value().rank() != 2 || z.shape()[0] != labels.size() || z.shape()[0] == 0)
        throw ShapeError("softmax_cross_entropy", {z.shape(), Shape{labels.size()}});
    const std::size_t rows = z.shape()[0], cols = z.shape()[1];
    Tensor onehot(z.shape());
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const int y = labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= cols)
            throw ShapeError("softmax_cross_entropy", {z.shape()}, "label " + std::to_string(y) + " out of range");
        const double* in = z.value().data().data() + r * cols;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, in[c]);
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += std::exp(in[c] - mx);
        loss += mx + std::log(s) - in[y];
        onehot[r * cols + static_cast<std::size_t>(y)] = 1.0;
    }
    const double inv = 1.0 / static_cast<double>(rows);
    Var target = Var::constant(std::move(onehot));
    return make_op("softmax_cross_entropy", Tensor::scalar(loss * inv), {z}, [z, target, inv](const Var& g, const NeedsMask&) {
        return std::vector<Var>{scale_by(scale(sub(softmax(z), target), inv), g)};
    });
}

} // namespace sleeper
