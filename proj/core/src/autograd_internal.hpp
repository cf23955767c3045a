#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "flowssc/tensor.hpp"

namespace flowssc::detail {

using BackwardFn = std::function<void(const Storage& grad_output)>;

struct Node {
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
};

struct GraphState {
    std::uint64_t id = 0;
    std::vector<Node> nodes;
    bool consumed = false;
};

// True when the active graph should record an op over these inputs.
bool needs_grad(std::initializer_list<const Tensor*> inputs);

// Attaches `out` to the active graph with the given backward function.
void record(const Tensor& out, BackwardFn backward);

// Gradient buffer of `impl`, allocated as zeros on first use.
Storage& grad_storage(TensorImpl& impl);

template <class T>
std::span<T> grad_span(TensorImpl& impl) {
    return grad_storage(impl).template span<T>();
}

}  // namespace flowssc::detail
