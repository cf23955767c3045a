#include "flowssc/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

#include "flowssc/error.hpp"

namespace flowssc {

namespace {
std::atomic<DType> g_default_dtype{DType::f32};
}  // namespace

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

DType default_dtype() { return g_default_dtype.load(); }
void set_default_dtype(DType dtype) { g_default_dtype.store(dtype); }

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "x" : "") << shape[i];
    }
    out << ']';
    return out.str();
}

namespace detail {

Storage::Storage(DType dt, std::size_t n, bool zero) : dtype(dt) {
    if (dt == DType::f32) {
        f32.resize(n);
        if (zero) {
            std::fill(f32.begin(), f32.end(), 0.0f);
        }
    } else {
        f64.resize(n);
        if (zero) {
            std::fill(f64.begin(), f64.end(), 0.0);
        }
    }
}

}  // namespace detail

namespace {

Tensor make(Shape shape, DType dtype, bool zero = true) {
    for (std::size_t d : shape) {
        if (d == 0) {
            throw ShapeError("zero-sized dimension in " + shape_string(shape));
        }
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    const std::size_t n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data = std::make_shared<detail::Storage>(dtype, n, zero);
    return Tensor(std::move(impl));
}

}  // namespace

Tensor Tensor::zeros(Shape shape, DType dtype) { return make(std::move(shape), dtype); }

Tensor Tensor::empty(Shape shape, DType dtype) { return make(std::move(shape), dtype, false); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    Tensor t = make(std::move(shape), dtype, false);
    detail::dispatch(dtype, [&]<class T>() {
        auto d = t.mutable_data<T>();
        std::fill(d.begin(), d.end(), static_cast<T>(value));
    });
    return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("from_values: " + std::to_string(values.size()) + " values for shape " +
                         shape_string(shape));
    }
    Tensor t = make(std::move(shape), dtype, false);
    detail::dispatch(dtype, [&]<class T>() {
        auto d = t.mutable_data<T>();
        std::transform(values.begin(), values.end(), d.begin(), [](double v) { return static_cast<T>(v); });
    });
    return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype) {
    return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, DType dtype) {
    Tensor t = make(std::move(shape), dtype, false);
    std::normal_distribution<double> normal(0.0, stddev);
    detail::dispatch(dtype, [&]<class T>() {
        for (T& v : t.mutable_data<T>()) {
            v = static_cast<T>(normal(rng));
        }
    });
    return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, DType dtype) {
    Tensor t = make(std::move(shape), dtype, false);
    std::uniform_real_distribution<double> uni(lo, hi);
    detail::dispatch(dtype, [&]<class T>() {
        for (T& v : t.mutable_data<T>()) {
            v = static_cast<T>(uni(rng));
        }
    });
    return t;
}

const Shape& Tensor::shape() const {
    if (!impl_) {
        throw Error("use of undefined tensor");
    }
    return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
    }
    return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const {
    shape();
    return impl_->data->dtype;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
    shape();
    if (!impl_->is_leaf) {
        throw Error("set_requires_grad on a non-leaf tensor");
    }
    impl_->requires_grad = value;
    return *this;
}

bool Tensor::is_leaf() const { return impl_ && impl_->is_leaf; }

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

Tensor Tensor::grad() const {
    if (!has_grad()) {
        throw Error("tensor has no gradient");
    }
    auto g = std::make_shared<detail::TensorImpl>();
    g->shape = impl_->shape;
    g->data = std::make_shared<detail::Storage>(*impl_->grad);
    return Tensor(std::move(g));
}

void Tensor::zero_grad() {
    if (impl_) {
        impl_->grad.reset();
    }
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    }
    return at(0);
}

double Tensor::at(std::size_t flat_index) const {
    if (flat_index >= numel()) {
        throw ShapeError("flat index out of range");
    }
    return detail::dispatch(dtype(), [&]<class T>() { return static_cast<double>(data<T>()[flat_index]); });
}

std::vector<double> Tensor::values() const {
    std::vector<double> out(numel());
    detail::dispatch(dtype(), [&]<class T>() {
        auto d = data<T>();
        std::transform(d.begin(), d.end(), out.begin(), [](T v) { return static_cast<double>(v); });
    });
    return out;
}

void Tensor::assign(const Tensor& other) {
    if (shape() != other.shape()) {
        throw ShapeError("assign: " + shape_string(other.shape()) + " into " + shape_string(shape()));
    }
    if (dtype() == other.dtype()) {
        *impl_->data = *other.impl()->data;
        return;
    }
    const std::vector<double> v = other.values();
    detail::dispatch(dtype(), [&]<class T>() {
        auto d = mutable_data<T>();
        std::transform(v.begin(), v.end(), d.begin(), [](double x) { return static_cast<T>(x); });
    });
}

void Tensor::set_flat(std::size_t flat_index, double value) {
    if (flat_index >= numel()) {
        throw ShapeError("flat index out of range");
    }
    detail::dispatch(dtype(), [&]<class T>() { mutable_data<T>()[flat_index] = static_cast<T>(value); });
}

Tensor Tensor::detach() const {
    auto d = std::make_shared<detail::TensorImpl>();
    d->shape = shape();
    d->data = impl_->data;
    return Tensor(std::move(d));
}

Tensor Tensor::clone() const {
    auto d = std::make_shared<detail::TensorImpl>();
    d->shape = shape();
    d->data = std::make_shared<detail::Storage>(*impl_->data);
    return Tensor(std::move(d));
}

Tensor Tensor::to(DType dtype) const {
    if (dtype == this->dtype()) {
        return clone();
    }
    const std::vector<double> v = values();
    return from_values(shape(), v, dtype);
}

bool same_values(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) {
        return false;
    }
    return detail::dispatch(a.dtype(), [&]<class T>() {
        auto x = a.data<T>();
        auto y = b.data<T>();
        return std::equal(x.begin(), x.end(), y.begin(), [](T p, T q) {
            return std::memcmp(&p, &q, sizeof(T)) == 0;
        });
    });
}

}  // namespace flowssc
