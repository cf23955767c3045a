#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "flowssc/rng.hpp"

namespace flowssc {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* dtype_name(DType dtype);

// Precision used for newly created tensors. Defaults to f32; the
// FLOWSSC_FLOAT64 environment variable (read by the harness) switches to f64.
DType default_dtype();
void set_default_dtype(DType dtype);

class DTypeScope {
public:
    explicit DTypeScope(DType dtype) : saved_(default_dtype()) { set_default_dtype(dtype); }
    ~DTypeScope() { set_default_dtype(saved_); }
    DTypeScope(const DTypeScope&) = delete;
    DTypeScope& operator=(const DTypeScope&) = delete;

private:
    DType saved_;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

// 64-byte aligned allocator whose value-initialization is a no-op, so
// buffers that are about to be overwritten skip the zero fill. The fixed
// alignment also keeps vectorized reductions on the same summation order for
// every allocation, which bit-exact reproducibility depends on.
template <class T>
struct UninitAllocator : std::allocator<T> {
    static constexpr std::align_val_t kAlign{64};
    template <class U>
    struct rebind {
        using other = UninitAllocator<U>;
    };
    UninitAllocator() = default;
    template <class U>
    UninitAllocator(const UninitAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <class U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

struct Storage {
    DType dtype = DType::f32;
    std::vector<float, UninitAllocator<float>> f32;
    std::vector<double, UninitAllocator<double>> f64;

    // Zero-filled unless `zero` is false (contents then unspecified).
    Storage(DType dt, std::size_t n, bool zero = true);
    std::size_t size() const { return dtype == DType::f32 ? f32.size() : f64.size(); }

    template <class T>
    std::span<T> span() {
        if constexpr (std::is_same_v<T, float>) {
            return f32;
        } else {
            return f64;
        }
    }
    template <class T>
    std::span<const T> span() const {
        if constexpr (std::is_same_v<T, float>) {
            return f32;
        } else {
            return f64;
        }
    }
};

struct GraphState;

struct TensorImpl {
    Shape shape;
    std::shared_ptr<Storage> data;
    std::shared_ptr<Storage> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::weak_ptr<GraphState> graph;
    std::size_t node = 0;
};

// Invokes f.template operator()<T>() with T = float or double.
template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
    if (dtype == DType::f32) {
        return f.template operator()<float>();
    }
    return f.template operator()<double>();
}

}  // namespace detail

// Dense row-major tensor handle. Copies share the underlying value; ops
// always produce new tensors, so values are immutable once produced except
// through explicit parameter updates (optimizer, checkpoint load).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, DType dtype = default_dtype());
    // Unspecified contents; for outputs that are fully overwritten.
    static Tensor empty(Shape shape, DType dtype = default_dtype());
    static Tensor full(Shape shape, double value, DType dtype = default_dtype());
    static Tensor from_values(Shape shape, std::span<const double> values, DType dtype = default_dtype());
    static Tensor from_values(Shape shape, std::initializer_list<double> values, DType dtype = default_dtype());
    static Tensor scalar(double value, DType dtype = default_dtype());
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, DType dtype = default_dtype());
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, DType dtype = default_dtype());

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;
    DType dtype() const;

    bool requires_grad() const;
    // Marks a leaf tensor as a trainable input. Throws on non-leaf tensors.
    Tensor& set_requires_grad(bool value = true);
    bool is_leaf() const;
    bool has_grad() const;
    // Gradient accumulated by backward(), as an untracked tensor.
    Tensor grad() const;
    void zero_grad();

    double item() const;
    double at(std::size_t flat_index) const;
    std::vector<double> values() const;

    template <class T>
    std::span<const T> data() const {
        return std::as_const(*impl_->data).template span<T>();
    }
    // Direct mutable access for optimizers and loaders; bypasses autograd.
    template <class T>
    std::span<T> mutable_data() {
        return impl_->data->template span<T>();
    }
    // Requires has_grad().
    template <class T>
    std::span<T> mutable_grad() {
        return impl_->grad->template span<T>();
    }

    // Copies values from another tensor of equal shape (any dtype).
    void assign(const Tensor& other);
    void set_flat(std::size_t flat_index, double value);

    Tensor detach() const;
    Tensor clone() const;
    Tensor to(DType dtype) const;

    // Internal handle used by ops and autograd.
    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

bool same_values(const Tensor& a, const Tensor& b);

}  // namespace flowssc
