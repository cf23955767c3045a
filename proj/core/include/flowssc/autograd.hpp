#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>

#include "flowssc/tensor.hpp"

namespace flowssc::autograd {

// A tape of executed primitive ops. Constructing a Graph makes it the active
// tape for the current thread; ops whose inputs require gradients record a
// node on it. backward() walks nodes in exact reverse execution order and then
// releases every saved activation. Graphs nest: the innermost is active.
class Graph {
public:
    Graph();
    ~Graph();
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    std::size_t size() const;
    bool consumed() const;
    // Drops all recorded nodes; tensors produced earlier lose their graph.
    void clear();

    const std::shared_ptr<detail::GraphState>& state() const { return state_; }

private:
    std::shared_ptr<detail::GraphState> state_;
    Graph* previous_ = nullptr;
};

// Suspends recording on the current thread (stop-gradient region).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool recording_enabled();

// Populates .grad() of every requires_grad leaf reachable from `loss`.
// Errors: non-scalar loss, loss without a live graph, graph already consumed.
void backward(const Tensor& loss);

}  // namespace flowssc::autograd
