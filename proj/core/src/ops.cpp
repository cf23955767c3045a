#include "flowssc/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "autograd_internal.hpp"
#include "flowssc/error.hpp"

namespace flowssc::ops {

namespace {

using detail::dispatch;
using detail::grad_span;
using detail::needs_grad;
using detail::record;
using detail::Storage;
using detail::TensorImpl;

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using MutMap = Eigen::Map<RowMatrix<T>>;

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype()) {
        throw ShapeError(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                         dtype_name(b.dtype()));
    }
}

void check_finite(const Tensor& t, const char* op) {
    const bool ok = dispatch(t.dtype(), [&]<class T>() {
        auto d = t.data<T>();
        return Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(d.data(), static_cast<Eigen::Index>(d.size()))
            .allFinite();
    });
    if (!ok) {
        throw NumericalError(std::string(op) + " produced a non-finite value");
    }
}

template <class T>
std::span<const T> cdata(const std::shared_ptr<TensorImpl>& impl) {
    return std::as_const(*impl->data).template span<T>();
}

template <class T>
std::span<const T> gdata(const Storage& g) {
    return g.template span<T>();
}

// ---------------------------------------------------------------------------
// Broadcasting binary ops
// ---------------------------------------------------------------------------

// Index pairing for broadcasting. Besides equal shapes, the common case of
// one operand matching the trailing dims of the other (bias rows, scalars)
// is handled by tiling without index tables.
struct Broadcast {
    enum class Mode { kSame, kTileA, kTileB, kGeneral };
    Shape out_shape;
    Mode mode = Mode::kGeneral;
    std::size_t period = 1;
    std::vector<std::size_t> ia;
    std::vector<std::size_t> ib;
};

bool is_trailing(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) {
        return false;
    }
    std::size_t skip = 0;
    while (skip < small.size() && small[skip] == 1) {
        ++skip;
    }
    return std::equal(small.begin() + static_cast<std::ptrdiff_t>(skip), small.end(),
                      big.end() - static_cast<std::ptrdiff_t>(small.size() - skip));
}

Broadcast make_broadcast(const Shape& a, const Shape& b, const char* op) {
    Broadcast bc;
    if (a == b) {
        bc.out_shape = a;
        bc.mode = Broadcast::Mode::kSame;
        return bc;
    }
    const std::size_t rank = std::max(a.size(), b.size());
    Shape pa(rank, 1), pb(rank, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
    bc.out_shape.resize(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " +
                             shape_string(b));
        }
        bc.out_shape[i] = std::max(pa[i], pb[i]);
    }
    if (pa == bc.out_shape && is_trailing(b, a)) {
        bc.mode = Broadcast::Mode::kTileB;
        bc.period = shape_numel(b);
        return bc;
    }
    if (pb == bc.out_shape && is_trailing(a, b)) {
        bc.mode = Broadcast::Mode::kTileA;
        bc.period = shape_numel(a);
        return bc;
    }
    const std::size_t n = shape_numel(bc.out_shape);
    bc.ia.resize(n);
    bc.ib.resize(n);
    std::vector<std::size_t> sa(rank, 0), sb(rank, 0);
    std::size_t stride_a = 1, stride_b = 1;
    for (std::size_t i = rank; i-- > 0;) {
        sa[i] = pa[i] == 1 ? 0 : stride_a;
        sb[i] = pb[i] == 1 ? 0 : stride_b;
        stride_a *= pa[i];
        stride_b *= pb[i];
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
        bc.ia[flat] = oa;
        bc.ib[flat] = ob;
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < bc.out_shape[d]) {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
    return bc;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_pair(const Broadcast& bc, std::size_t n, F&& f) {
    switch (bc.mode) {
        case Broadcast::Mode::kSame:
            for (std::size_t i = 0; i < n; ++i) {
                f(i, i, i);
            }
            break;
        case Broadcast::Mode::kTileB:
            for (std::size_t r = 0; r < n; r += bc.period) {
                for (std::size_t j = 0; j < bc.period; ++j) {
                    f(r + j, r + j, j);
                }
            }
            break;
        case Broadcast::Mode::kTileA:
            for (std::size_t r = 0; r < n; r += bc.period) {
                for (std::size_t j = 0; j < bc.period; ++j) {
                    f(r + j, j, r + j);
                }
            }
            break;
        case Broadcast::Mode::kGeneral:
            for (std::size_t i = 0; i < n; ++i) {
                f(i, bc.ia[i], bc.ib[i]);
            }
            break;
    }
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

template <BinOp kind, class T>
void binary_forward(const Broadcast& bc, std::span<const T> x, std::span<const T> y, std::span<T> o) {
    for_each_pair(bc, o.size(), [&](std::size_t i, std::size_t p, std::size_t q) {
        if constexpr (kind == BinOp::kAdd) {
            o[i] = x[p] + y[q];
        } else if constexpr (kind == BinOp::kSub) {
            o[i] = x[p] - y[q];
        } else if constexpr (kind == BinOp::kMul) {
            o[i] = x[p] * y[q];
        } else {
            o[i] = x[p] / y[q];
        }
    });
}

template <BinOp kind, class T>
void binary_backward(const Broadcast& bc, std::span<const T> go, std::span<const T> x, std::span<const T> y,
                     TensorImpl& ai, TensorImpl& bi) {
    if (ai.requires_grad) {
        auto ga = grad_span<T>(ai);
        for_each_pair(bc, go.size(), [&](std::size_t i, std::size_t p, std::size_t q) {
            if constexpr (kind == BinOp::kAdd || kind == BinOp::kSub) {
                ga[p] += go[i];
            } else if constexpr (kind == BinOp::kMul) {
                ga[p] += go[i] * y[q];
            } else {
                ga[p] += go[i] / y[q];
            }
        });
    }
    if (bi.requires_grad) {
        auto gb = grad_span<T>(bi);
        for_each_pair(bc, go.size(), [&](std::size_t i, std::size_t p, std::size_t q) {
            if constexpr (kind == BinOp::kAdd) {
                gb[q] += go[i];
            } else if constexpr (kind == BinOp::kSub) {
                gb[q] -= go[i];
            } else if constexpr (kind == BinOp::kMul) {
                gb[q] += go[i] * x[p];
            } else {
                gb[q] -= go[i] * x[p] / (y[q] * y[q]);
            }
        });
    }
}

template <BinOp kind>
Tensor binary(const Tensor& a, const Tensor& b, const char* name) {
    require_same_dtype(a, b, name);
    auto bc = std::make_shared<Broadcast>(make_broadcast(a.shape(), b.shape(), name));
    Tensor out = Tensor::empty(bc->out_shape, a.dtype());
    dispatch(a.dtype(), [&]<class T>() { binary_forward<kind, T>(*bc, a.data<T>(), b.data<T>(), out.mutable_data<T>()); });
    check_finite(out, name);
    if (needs_grad({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        record(out, [ai, bi, bc](const Storage& g) {
            dispatch(g.dtype, [&]<class T>() {
                binary_backward<kind, T>(*bc, gdata<T>(g), cdata<T>(ai), cdata<T>(bi), *ai, *bi);
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise unary ops: forward f(x), derivative df(x, y)
// ---------------------------------------------------------------------------

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
    Tensor out = Tensor::empty(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        auto o = out.mutable_data<T>();
        for (std::size_t i = 0; i < o.size(); ++i) {
            o[i] = static_cast<T>(fwd(static_cast<double>(in[i])));
        }
    });
    check_finite(out, name);
    if (needs_grad({&x})) {
        auto xi = x.impl();
        auto oi = std::weak_ptr<TensorImpl>(out.impl());
        record(out, [xi, oi, deriv](const Storage& g) {
            auto outp = oi.lock();
            dispatch(g.dtype, [&]<class T>() {
                auto go = gdata<T>(g);
                auto in = cdata<T>(xi);
                auto y = cdata<T>(outp);
                auto gx = grad_span<T>(*xi);
                for (std::size_t i = 0; i < go.size(); ++i) {
                    gx[i] += go[i] * static_cast<T>(deriv(static_cast<double>(in[i]), static_cast<double>(y[i])));
                }
            });
        });
    }
    return out;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// Decomposes `shape` around `axis` into (outer, axis, inner) extents.
void split_axis(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& mid, std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= shape[i];
    }
    mid = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) {
        inner *= shape[i];
    }
}

void require_rows(const Tensor& x, const char* name) {
    if (x.rank() < 1) {
        throw ShapeError(std::string(name) + ": needs rank >= 1");
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary<BinOp::kAdd>(a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary<BinOp::kSub>(a, b, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary<BinOp::kMul>(a, b, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary<BinOp::kDiv>(a, b, "div"); }

Tensor add_scalar(const Tensor& x, double value) {
    return unary(x, "add_scalar", [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double value) {
    return unary(x, "mul_scalar", [value](double v) { return v * value; }, [value](double, double) { return value; });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor rsub_scalar(double value, const Tensor& x) {
    return unary(x, "rsub_scalar", [value](double v) { return value - v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
    return unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x, double floor) {
    return unary(
        x, "log", [floor](double v) { return std::log(std::max(v, floor)); },
        [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

Tensor square(const Tensor& x) {
    return unary(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor tanh(const Tensor& x) {
    return unary(x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
    return unary(
        x, "silu", [](double v) { return v / (1.0 + std::exp(-v)); },
        [](double v, double) {
            const double s = 1.0 / (1.0 + std::exp(-v));
            return s * (1.0 + v * (1.0 - s));
        });
}

Tensor gelu(const Tensor& x) {
    Tensor out = Tensor::empty(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        auto o = out.mutable_data<T>();
        const auto n = static_cast<Eigen::Index>(in.size());
        Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> v(in.data(), n);
        Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> y(o.data(), n);
        y = T(0.5) * v * (T(1) + (T(kGeluC) * (v + T(kGeluA) * v.cube())).tanh());
    });
    check_finite(out, "gelu");
    if (needs_grad({&x})) {
        auto xi = x.impl();
        record(out, [xi](const Storage& g) {
            dispatch(g.dtype, [&]<class T>() {
                auto go = gdata<T>(g);
                auto in = cdata<T>(xi);
                auto gx = grad_span<T>(*xi);
                const auto n = static_cast<Eigen::Index>(in.size());
                using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
                Eigen::Map<const Arr> v(in.data(), n), dy(go.data(), n);
                Eigen::Map<Arr> dx(gx.data(), n);
                const Arr th = (T(kGeluC) * (v + T(kGeluA) * v.cube())).tanh();
                const Arr du = T(kGeluC) * (T(1) + T(3 * kGeluA) * v.square());
                dx += dy * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th.square()) * du);
            });
        });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    Tensor out = Tensor::zeros({}, x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
        T acc = 0;
        for (T v : x.data<T>()) {
            acc += v;
        }
        out.mutable_data<T>()[0] = acc;
    });
    check_finite(out, "sum");
    if (needs_grad({&x})) {
        auto xi = x.impl();
        record(out, [xi](const Storage& g) {
            dispatch(g.dtype, [&]<class T>() {
                const T go = gdata<T>(g)[0];
                for (T& v : grad_span<T>(*xi)) {
                    v += go;
                }
            });
        });
    }
    return out;
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_axis(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw ShapeError("sum_axis: axis out of range for " + shape_string(x.shape()));
    }
    std::size_t outer, mid, inner;
    split_axis(x.shape(), axis, outer, mid, inner);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor out = Tensor::zeros(out_shape, x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        auto o = out.mutable_data<T>();
        for (std::size_t a = 0; a < outer; ++a) {
            for (std::size_t m = 0; m < mid; ++m) {
                const T* src = in.data() + (a * mid + m) * inner;
                T* dst = o.data() + a * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    dst[i] += src[i];
                }
            }
        }
    });
    check_finite(out, "sum_axis");
    if (needs_grad({&x})) {
        auto xi = x.impl();
        record(out, [xi, outer, mid, inner](const Storage& g) {
            dispatch(g.dtype, [&]<class T>() {
                auto go = gdata<T>(g);
                auto gx = grad_span<T>(*xi);
                for (std::size_t a = 0; a < outer; ++a) {
                    for (std::size_t m = 0; m < mid; ++m) {
                        T* dst = gx.data() + (a * mid + m) * inner;
                        const T* src = go.data() + a * inner;
                        for (std::size_t i = 0; i < inner; ++i) {
                            dst[i] += src[i];
                        }
                    }
                }
            });
        });
    }
    return out;
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
    return mul_scalar(sum_axis(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_same_dtype(a, b, "matmul");
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: " + shape_string(a.shape()) + " . " + shape_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::empty({m, n}, a.dtype());
    dispatch(a.dtype(), [&]<class T>() {
        ConstMap<T> A(a.data<T>().data(), m, k);
        ConstMap<T> B(b.data<T>().data(), k, n);
        MutMap<T> C(out.mutable_data<T>().data(), m, n);
        C.noalias() = A * B;
    });
    check_finite(out, "matmul");
    if (needs_grad({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        record(out, [ai, bi, m, k, n](const Storage& g) {
            dispatch(g.dtype, [&]<class T>() {
                ConstMap<T> G(gdata<T>(g).data(), m, n);
                if (ai->requires_grad) {
                    ConstMap<T> B(cdata<T>(bi).data(), k, n);
                    MutMap<T> GA(grad_span<T>(*ai).data(), m, k);
                    GA.noalias() += G * B.transpose();
                }
                if (bi->requires_grad) {
                    ConstMap<T> A(cdata<T>(ai).data(), m, k);
                    MutMap<T> GB(grad_span<T>(*bi).data(), k, n);
                    GB.noalias() += A.transpose() * G;
                }
            });
        });
    }
    return out;
}

Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("transpose: expects rank 2, got " + shape_string(x.shape()));
    }
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor out = Tensor::empty({c, r}, x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
        MutMap<T>(out.mutable_data<T>().data(), c, r) = ConstMap<T>(x.data<T>().data(), r, c).transpose();
    });
    if (needs_grad({&x})) {
        auto xi = x.impl();
        record(out, [xi, r, c](const Storage& g) {
            dispatch(g.dtype, [&]<class T>() {
                MutMap<T>(grad_span<T>(*xi).data(), r, c) += ConstMap<T>(gdata<T>(g).data(), c, r).transpose();
            });
        });
    }
    return out;
}

Tensor softmax_lastdim(const Tensor& x) {
    require_rows(x, "softmax_lastdim");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.numel() / cols;
    Tensor out = Tensor::empty(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        auto o = out.mutable_data<T>();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* src = in.data() + r * cols;
            T* dst = o.data() + r * cols;
            const T mx = *std::max_element(src, src + cols);
            const auto n = static_cast<Eigen::Index>(cols);
            Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> row(dst, n);
            row = (Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(src, n) - mx).exp();
            T total = 0;
            for (std::size_t c = 0; c < cols; ++c) {
                total += dst[c];
            }
            row *= T(1) / total;
        }
    });
    check_finite(out, "softmax_lastdim");
    if (needs_grad({&x})) {
        auto xi = x.impl();
        auto oi = std::weak_ptr<TensorImpl>(out.impl());
        record(out, [xi, oi, rows, cols](const Storage& g) {
            auto outp = oi.lock();
            dispatch(g.dtype, [&]<class T>() {
                auto go = gdata<T>(g);
                auto y = cdata<T>(outp);
                auto gx = grad_span<T>(*xi);
                for (std::size_t r = 0; r < rows; ++r) {
                    const std::size_t base = r * cols;
                    T dot = 0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        dot += go[base + c] * y[base + c];
                    }
                    for (std::size_t c = 0; c < cols; ++c) {
                        gx[base + c] += y[base + c] * (go[base + c] - dot);
                    }
                }
            });
        });
    }
    return out;
}

Tensor log_softmax_lastdim(const Tensor& x) {
    require_rows(x, "log_softmax_lastdim");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.numel() / cols;
    Tensor out = Tensor::empty(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        auto o = out.mutable_data<T>();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* src = in.data() + r * cols;
            T* dst = o.data() + r * cols;
            const T mx = *std::max_element(src, src + cols);
            T total = 0;
            for (std::size_t c = 0; c < cols; ++c) {
                total += std::exp(src[c] - mx);
            }
            const T lse = mx + std::log(total);
            for (std::size_t c = 0; c < cols; ++c) {
                dst[c] = src[c] - lse;
            }
        }
    });
    check_finite(out, "log_softmax_lastdim");
    if (needs_grad({&x})) {
        auto xi = x.impl();
        auto oi = std::weak_ptr<TensorImpl>(out.impl());
        record(out, [xi, oi, rows, cols](const Storage& g) {
            auto outp = oi.lock();
            dispatch(g.dtype, [&]<class T>() {
                auto go = gdata<T>(g);
                auto y = cdata<T>(outp);
                auto gx = grad_span<T>(*xi);
                for (std::size_t r = 0; r < rows; ++r) {
                    const std::size_t base = r * cols;
                    T total = 0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        total += go[base + c];
                    }
                    for (std::size_t c = 0; c < cols; ++c) {
                        gx[base + c] += go[base + c] - std::exp(y[base + c]) * total;
                    }
                }
            });
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, double eps) {
    require_rows(x, "layer_norm");
    const std::size_t cols = x.shape().back();
    if (cols < 2) {
        throw ShapeError("layer_norm: last dimension must be >= 2");
    }
    const std::size_t rows = x.numel() / cols;
    Tensor out = Tensor::empty(x.shape(), x.dtype());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        auto o = out.mutable_data<T>();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* src = in.data() + r * cols;
            T* dst = o.data() + r * cols;
            T mu = 0;
            for (std::size_t c = 0; c < cols; ++c) {
                mu += src[c];
            }
            mu /= static_cast<T>(cols);
            T var = 0;
            for (std::size_t c = 0; c < cols; ++c) {
                const T d = src[c] - mu;
                var += d * d;
            }
            var /= static_cast<T>(cols);
            const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
            (*inv_std)[r] = static_cast<double>(is);
            for (std::size_t c = 0; c < cols; ++c) {
                dst[c] = (src[c] - mu) * is;
            }
        }
    });
    check_finite(out, "layer_norm");
    if (needs_grad({&x})) {
        auto xi = x.impl();
        auto oi = std::weak_ptr<TensorImpl>(out.impl());
        record(out, [xi, oi, inv_std, rows, cols](const Storage& g) {
            auto outp = oi.lock();
            dispatch(g.dtype, [&]<class T>() {
                auto go = gdata<T>(g);
                auto y = cdata<T>(outp);
                auto gx = grad_span<T>(*xi);
                const T inv_n = T(1) / static_cast<T>(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    const std::size_t base = r * cols;
                    T mg = 0, mgy = 0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        mg += go[base + c];
                        mgy += go[base + c] * y[base + c];
                    }
                    mg *= inv_n;
                    mgy *= inv_n;
                    const T is = static_cast<T>((*inv_std)[r]);
                    for (std::size_t c = 0; c < cols; ++c) {
                        gx[base + c] += is * (go[base + c] - mg - y[base + c] * mgy);
                    }
                }
            });
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = x.impl()->data;
    Tensor out(std::move(impl));
    if (needs_grad({&x})) {
        auto xi = x.impl();
        record(out, [xi](const Storage& g) {
            dispatch(g.dtype, [&]<class T>() {
                auto go = gdata<T>(g);
                auto gx = grad_span<T>(*xi);
                for (std::size_t i = 0; i < go.size(); ++i) {
                    gx[i] += go[i];
                }
            });
        });
    }
    return out;
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    if (axis >= x.rank() || length == 0 || start + length > x.dim(axis)) {
        throw ShapeError("narrow: axis " + std::to_string(axis) + " range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") on " + shape_string(x.shape()));
    }
    std::size_t outer, mid, inner;
    split_axis(x.shape(), axis, outer, mid, inner);
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    Tensor out = Tensor::empty(out_shape, x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        auto o = out.mutable_data<T>();
        for (std::size_t a = 0; a < outer; ++a) {
            const T* src = in.data() + (a * mid + start) * inner;
            std::copy(src, src + length * inner, o.data() + a * length * inner);
        }
    });
    if (needs_grad({&x})) {
        auto xi = x.impl();
        record(out, [xi, outer, mid, inner, start, length](const Storage& g) {
            dispatch(g.dtype, [&]<class T>() {
                auto go = gdata<T>(g);
                auto gx = grad_span<T>(*xi);
                for (std::size_t a = 0; a < outer; ++a) {
                    T* dst = gx.data() + (a * mid + start) * inner;
                    const T* src = go.data() + a * length * inner;
                    for (std::size_t i = 0; i < length * inner; ++i) {
                        dst[i] += src[i];
                    }
                }
            });
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) {
        throw ShapeError("concat: no inputs");
    }
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) {
        throw ShapeError("concat: axis out of range");
    }
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const Tensor& p : parts) {
        require_same_dtype(parts.front(), p, "concat");
        if (p.rank() != ref.size()) {
            throw ShapeError("concat: rank mismatch");
        }
        for (std::size_t d = 0; d < ref.size(); ++d) {
            if (d != axis && p.dim(d) != ref[d]) {
                throw ShapeError("concat: " + shape_string(p.shape()) + " vs " + shape_string(ref));
            }
        }
        out_shape[axis] += p.dim(axis);
    }
    std::size_t outer, mid_total, inner;
    split_axis(out_shape, axis, outer, mid_total, inner);
    Tensor out = Tensor::empty(out_shape, parts.front().dtype());
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        offsets.push_back(offset);
        offset += p.dim(axis);
    }
    dispatch(out.dtype(), [&]<class T>() {
        auto o = out.mutable_data<T>();
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
            auto in = parts[pi].data<T>();
            const std::size_t len = parts[pi].dim(axis) * inner;
            for (std::size_t a = 0; a < outer; ++a) {
                std::copy(in.data() + a * len, in.data() + (a + 1) * len,
                          o.data() + (a * mid_total + offsets[pi]) * inner);
            }
        }
    });
    bool any = false;
    for (const Tensor& p : parts) {
        any = any || needs_grad({&p});
    }
    if (any) {
        std::vector<std::shared_ptr<TensorImpl>> impls;
        std::vector<std::size_t> lens;
        for (const Tensor& p : parts) {
            impls.push_back(p.impl());
            lens.push_back(p.dim(axis));
        }
        record(out, [impls, lens, offsets, outer, mid_total, inner](const Storage& g) {
            dispatch(g.dtype, [&]<class T>() {
                auto go = gdata<T>(g);
                for (std::size_t pi = 0; pi < impls.size(); ++pi) {
                    if (!impls[pi]->requires_grad) {
                        continue;
                    }
                    auto gp = grad_span<T>(*impls[pi]);
                    const std::size_t len = lens[pi] * inner;
                    for (std::size_t a = 0; a < outer; ++a) {
                        const T* src = go.data() + (a * mid_total + offsets[pi]) * inner;
                        T* dst = gp.data() + a * len;
                        for (std::size_t i = 0; i < len; ++i) {
                            dst[i] += src[i];
                        }
                    }
                }
            });
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> indices) {
    if (table.rank() != 2) {
        throw ShapeError("gather_rows: table must be rank 2");
    }
    const std::size_t rows = table.dim(0), cols = table.dim(1);
    for (std::int32_t i : indices) {
        if (i < 0 || static_cast<std::size_t>(i) >= rows) {
            throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
        }
    }
    Tensor out = Tensor::empty({indices.size(), cols}, table.dtype());
    dispatch(table.dtype(), [&]<class T>() {
        auto in = table.data<T>();
        auto o = out.mutable_data<T>();
        for (std::size_t r = 0; r < indices.size(); ++r) {
            const T* src = in.data() + static_cast<std::size_t>(indices[r]) * cols;
            std::copy(src, src + cols, o.data() + r * cols);
        }
    });
    if (needs_grad({&table})) {
        auto ti = table.impl();
        auto idx = std::make_shared<std::vector<std::int32_t>>(indices.begin(), indices.end());
        record(out, [ti, idx, cols](const Storage& g) {
            dispatch(g.dtype, [&]<class T>() {
                auto go = gdata<T>(g);
                auto gt = grad_span<T>(*ti);
                for (std::size_t r = 0; r < idx->size(); ++r) {
                    T* dst = gt.data() + static_cast<std::size_t>((*idx)[r]) * cols;
                    const T* src = go.data() + r * cols;
                    for (std::size_t c = 0; c < cols; ++c) {
                        dst[c] += src[c];
                    }
                }
            });
        });
    }
    return out;
}

Tensor index_select_flat(const Tensor& x, std::span<const std::size_t> indices, Shape out_shape) {
    if (shape_numel(out_shape) != indices.size()) {
        throw ShapeError("index_select_flat: index count does not match " + shape_string(out_shape));
    }
    const std::size_t n = x.numel();
    for (std::size_t i : indices) {
        if (i >= n) {
            throw ShapeError("index_select_flat: index out of range");
        }
    }
    Tensor out = Tensor::empty(std::move(out_shape), x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
        auto in = x.data<T>();
        auto o = out.mutable_data<T>();
        for (std::size_t i = 0; i < indices.size(); ++i) {
            o[i] = in[indices[i]];
        }
    });
    if (needs_grad({&x})) {
        auto xi = x.impl();
        auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
        record(out, [xi, idx](const Storage& g) {
            dispatch(g.dtype, [&]<class T>() {
                auto go = gdata<T>(g);
                auto gx = grad_span<T>(*xi);
                for (std::size_t i = 0; i < idx->size(); ++i) {
                    gx[(*idx)[i]] += go[i];
                }
            });
        });
    }
    return out;
}

namespace {

struct BilinearTap {
    std::size_t i0, i1, j0, j1;
    double a, b;  // fractional offsets along H and W
};

BilinearTap bilinear_tap(double u, double v, std::size_t h, std::size_t w) {
    auto axis = [](double coord, std::size_t size, std::size_t& lo, std::size_t& hi, double& frac) {
        double c = coord * static_cast<double>(size) - 0.5;
        c = std::clamp(c, 0.0, static_cast<double>(size - 1));
        const double fl = std::floor(c);
        lo = static_cast<std::size_t>(fl);
        hi = std::min(lo + 1, size - 1);
        frac = c - fl;
    };
    BilinearTap tap{};
    axis(u, h, tap.i0, tap.i1, tap.a);
    axis(v, w, tap.j0, tap.j1, tap.b);
    return tap;
}

}  // namespace

Tensor bilinear_sample_2d(const Tensor& plane, const Tensor& uv) {
    if (plane.rank() != 3 || uv.rank() != 2 || uv.dim(1) != 2) {
        throw ShapeError("bilinear_sample_2d: plane " + shape_string(plane.shape()) + ", uv " +
                         shape_string(uv.shape()));
    }
    const std::size_t h = plane.dim(0), w = plane.dim(1), c = plane.dim(2), n = uv.dim(0);
    const std::vector<double> coords = uv.values();
    auto taps = std::make_shared<std::vector<BilinearTap>>(n);
    for (std::size_t q = 0; q < n; ++q) {
        (*taps)[q] = bilinear_tap(coords[2 * q], coords[2 * q + 1], h, w);
    }
    Tensor out = Tensor::empty({n, c}, plane.dtype());
    dispatch(plane.dtype(), [&]<class T>() {
        auto p = plane.data<T>();
        auto o = out.mutable_data<T>();
        for (std::size_t q = 0; q < n; ++q) {
            const BilinearTap& t = (*taps)[q];
            const T w00 = static_cast<T>((1 - t.a) * (1 - t.b)), w01 = static_cast<T>((1 - t.a) * t.b);
            const T w10 = static_cast<T>(t.a * (1 - t.b)), w11 = static_cast<T>(t.a * t.b);
            const T* p00 = p.data() + (t.i0 * w + t.j0) * c;
            const T* p01 = p.data() + (t.i0 * w + t.j1) * c;
            const T* p10 = p.data() + (t.i1 * w + t.j0) * c;
            const T* p11 = p.data() + (t.i1 * w + t.j1) * c;
            T* dst = o.data() + q * c;
            for (std::size_t k = 0; k < c; ++k) {
                dst[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
            }
        }
    });
    check_finite(out, "bilinear_sample_2d");
    if (needs_grad({&plane})) {
        auto pi = plane.impl();
        record(out, [pi, taps, w, c](const Storage& g) {
            dispatch(g.dtype, [&]<class T>() {
                auto go = gdata<T>(g);
                auto gp = grad_span<T>(*pi);
                for (std::size_t q = 0; q < taps->size(); ++q) {
                    const BilinearTap& t = (*taps)[q];
                    const T w00 = static_cast<T>((1 - t.a) * (1 - t.b)), w01 = static_cast<T>((1 - t.a) * t.b);
                    const T w10 = static_cast<T>(t.a * (1 - t.b)), w11 = static_cast<T>(t.a * t.b);
                    const T* src = go.data() + q * c;
                    T* p00 = gp.data() + (t.i0 * w + t.j0) * c;
                    T* p01 = gp.data() + (t.i0 * w + t.j1) * c;
                    T* p10 = gp.data() + (t.i1 * w + t.j0) * c;
                    T* p11 = gp.data() + (t.i1 * w + t.j1) * c;
                    for (std::size_t k = 0; k < c; ++k) {
                        p00[k] += w00 * src[k];
                        p01[k] += w01 * src[k];
                        p10[k] += w10 * src[k];
                        p11[k] += w11 * src[k];
                    }
                }
            });
        });
    }
    return out;
}

namespace {

struct ConvGeometry {
    std::size_t in[3];
    std::size_t out[3];
    std::size_t cin, cout, k, stride, pad;
    std::size_t out_voxels() const { return out[0] * out[1] * out[2]; }
    std::size_t patch() const { return k * k * k * cin; }
};

// Unfolds x into a [out_voxels x k^3*cin] patch matrix (zero padding).
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
    const std::size_t patch = g.patch();
    std::size_t row = 0;
    for (std::size_t ox = 0; ox < g.out[0]; ++ox) {
        for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
            for (std::size_t oz = 0; oz < g.out[2]; ++oz, ++row) {
                T* dst = cols + row * patch;
                std::size_t col = 0;
                for (std::size_t dx = 0; dx < g.k; ++dx) {
                    const long ix = static_cast<long>(ox * g.stride + dx) - static_cast<long>(g.pad);
                    for (std::size_t dy = 0; dy < g.k; ++dy) {
                        const long iy = static_cast<long>(oy * g.stride + dy) - static_cast<long>(g.pad);
                        for (std::size_t dz = 0; dz < g.k; ++dz, col += g.cin) {
                            const long iz = static_cast<long>(oz * g.stride + dz) - static_cast<long>(g.pad);
                            if (ix < 0 || iy < 0 || iz < 0 || ix >= static_cast<long>(g.in[0]) ||
                                iy >= static_cast<long>(g.in[1]) || iz >= static_cast<long>(g.in[2])) {
                                std::fill(dst + col, dst + col + g.cin, T(0));
                            } else {
                                const T* src =
                                    x + ((static_cast<std::size_t>(ix) * g.in[1] + static_cast<std::size_t>(iy)) *
                                             g.in[2] +
                                         static_cast<std::size_t>(iz)) *
                                            g.cin;
                                std::copy(src, src + g.cin, dst + col);
                            }
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* gx) {
    const std::size_t patch = g.patch();
    std::size_t row = 0;
    for (std::size_t ox = 0; ox < g.out[0]; ++ox) {
        for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
            for (std::size_t oz = 0; oz < g.out[2]; ++oz, ++row) {
                const T* src = cols + row * patch;
                std::size_t col = 0;
                for (std::size_t dx = 0; dx < g.k; ++dx) {
                    const long ix = static_cast<long>(ox * g.stride + dx) - static_cast<long>(g.pad);
                    for (std::size_t dy = 0; dy < g.k; ++dy) {
                        const long iy = static_cast<long>(oy * g.stride + dy) - static_cast<long>(g.pad);
                        for (std::size_t dz = 0; dz < g.k; ++dz, col += g.cin) {
                            const long iz = static_cast<long>(oz * g.stride + dz) - static_cast<long>(g.pad);
                            if (ix < 0 || iy < 0 || iz < 0 || ix >= static_cast<long>(g.in[0]) ||
                                iy >= static_cast<long>(g.in[1]) || iz >= static_cast<long>(g.in[2])) {
                                continue;
                            }
                            T* dst = gx + ((static_cast<std::size_t>(ix) * g.in[1] + static_cast<std::size_t>(iy)) *
                                               g.in[2] +
                                           static_cast<std::size_t>(iz)) *
                                              g.cin;
                            for (std::size_t ci = 0; ci < g.cin; ++ci) {
                                dst[ci] += src[col + ci];
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding) {
    require_same_dtype(x, weight, "conv3d");
    require_same_dtype(x, bias, "conv3d");
    if (x.rank() != 4 || weight.rank() != 5 || bias.rank() != 1 || weight.dim(0) != weight.dim(1) ||
        weight.dim(1) != weight.dim(2) || weight.dim(3) != x.dim(3) || bias.dim(0) != weight.dim(4) || stride == 0) {
        throw ShapeError("conv3d: x " + shape_string(x.shape()) + ", weight " + shape_string(weight.shape()) +
                         ", bias " + shape_string(bias.shape()));
    }
    ConvGeometry g{};
    g.k = weight.dim(0);
    g.cin = x.dim(3);
    g.cout = weight.dim(4);
    g.stride = stride;
    g.pad = padding;
    for (int a = 0; a < 3; ++a) {
        g.in[a] = x.dim(static_cast<std::size_t>(a));
        if (g.in[a] + 2 * padding < g.k) {
            throw ShapeError("conv3d: kernel larger than padded input");
        }
        g.out[a] = (g.in[a] + 2 * padding - g.k) / stride + 1;
    }
    Tensor out = Tensor::empty({g.out[0], g.out[1], g.out[2], g.cout}, x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
        std::vector<T, detail::UninitAllocator<T>> cols(g.out_voxels() * g.patch());
        im2col(x.data<T>().data(), g, cols.data());
        ConstMap<T> C(cols.data(), g.out_voxels(), g.patch());
        ConstMap<T> W(weight.data<T>().data(), g.patch(), g.cout);
        MutMap<T> O(out.mutable_data<T>().data(), g.out_voxels(), g.cout);
        O.noalias() = C * W;
        O.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data<T>().data(), g.cout);
    });
    check_finite(out, "conv3d");
    if (needs_grad({&x, &weight, &bias})) {
        auto xi = x.impl();
        auto wi = weight.impl();
        auto bi = bias.impl();
        record(out, [xi, wi, bi, g](const Storage& grad) {
            dispatch(grad.dtype, [&]<class T>() {
                ConstMap<T> G(gdata<T>(grad).data(), g.out_voxels(), g.cout);
                std::vector<T, detail::UninitAllocator<T>> cols(g.out_voxels() * g.patch());
                if (wi->requires_grad) {
                    im2col(cdata<T>(xi).data(), g, cols.data());
                    ConstMap<T> C(cols.data(), g.out_voxels(), g.patch());
                    MutMap<T>(grad_span<T>(*wi).data(), g.patch(), g.cout).noalias() += C.transpose() * G;
                }
                if (bi->requires_grad) {
                    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(grad_span<T>(*bi).data(), g.cout) +=
                        G.colwise().sum();
                }
                if (xi->requires_grad) {
                    ConstMap<T> W(cdata<T>(wi).data(), g.patch(), g.cout);
                    MutMap<T> GC(cols.data(), g.out_voxels(), g.patch());
                    GC.noalias() = G * W.transpose();
                    col2im_add(cols.data(), g, grad_span<T>(*xi).data());
                }
            });
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels,
                     const std::optional<Tensor>& class_weights, std::optional<std::int32_t> ignore_label) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("cross_entropy: logits " + shape_string(logits.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<double> weights(k, 1.0);
    if (class_weights) {
        if (class_weights->rank() != 1 || class_weights->dim(0) != k) {
            throw ShapeError("cross_entropy: class_weights must have shape [K]");
        }
        weights = class_weights->values();
    }
    double total_weight = 0.0;
    for (std::int32_t y : labels) {
        if (ignore_label && y == *ignore_label) {
            continue;
        }
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw ShapeError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
        }
        total_weight += weights[static_cast<std::size_t>(y)];
    }
    if (total_weight <= 0.0) {
        throw Error("cross_entropy: no non-ignored entries");
    }
    auto lbl = std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
    auto probs = std::make_shared<std::vector<double>>(n * k);
    double loss = 0.0;
    dispatch(logits.dtype(), [&]<class T>() {
        auto x = logits.data<T>();
        for (std::size_t r = 0; r < n; ++r) {
            const T* row = x.data() + r * k;
            const double mx = static_cast<double>(*std::max_element(row, row + k));
            double total = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
                total += std::exp(static_cast<double>(row[c]) - mx);
            }
            for (std::size_t c = 0; c < k; ++c) {
                (*probs)[r * k + c] = std::exp(static_cast<double>(row[c]) - mx) / total;
            }
            const std::int32_t y = (*lbl)[r];
            if (ignore_label && y == *ignore_label) {
                continue;
            }
            const double lse = mx + std::log(total);
            loss += weights[static_cast<std::size_t>(y)] * (lse - static_cast<double>(row[y]));
        }
    });
    Tensor out = Tensor::scalar(loss / total_weight, logits.dtype());
    check_finite(out, "cross_entropy");
    if (needs_grad({&logits})) {
        auto li = logits.impl();
        record(out, [li, lbl, probs, weights, ignore_label, total_weight, k](const Storage& g) {
            dispatch(g.dtype, [&]<class T>() {
                const double go = static_cast<double>(gdata<T>(g)[0]);
                auto gl = grad_span<T>(*li);
                for (std::size_t r = 0; r < lbl->size(); ++r) {
                    const std::int32_t y = (*lbl)[r];
                    if (ignore_label && y == *ignore_label) {
                        continue;
                    }
                    const double scale = go * weights[static_cast<std::size_t>(y)] / total_weight;
                    for (std::size_t c = 0; c < k; ++c) {
                        const double target = static_cast<std::size_t>(y) == c ? 1.0 : 0.0;
                        gl[r * k + c] += static_cast<T>(scale * ((*probs)[r * k + c] - target));
                    }
                }
            });
        });
    }
    return out;
}

}  // namespace flowssc::ops
