#include "flowssc/autograd.hpp"

#include <atomic>

#include "autograd_internal.hpp"
#include "flowssc/error.hpp"

namespace flowssc::autograd {

namespace {

thread_local Graph* t_active = nullptr;
thread_local bool t_no_grad = false;
std::atomic<std::uint64_t> g_next_graph_id{1};

}  // namespace

Graph::Graph() : state_(std::make_shared<detail::GraphState>()), previous_(t_active) {
    state_->id = g_next_graph_id.fetch_add(1);
    t_active = this;
}

Graph::~Graph() { t_active = previous_; }

std::size_t Graph::size() const { return state_->nodes.size(); }

bool Graph::consumed() const { return state_->consumed; }

void Graph::clear() {
    state_->nodes.clear();
    state_->nodes.shrink_to_fit();
    // Tensors that pointed into the old tape now see an expired graph.
    auto fresh = std::make_shared<detail::GraphState>();
    fresh->id = g_next_graph_id.fetch_add(1);
    state_ = std::move(fresh);
}

NoGradGuard::NoGradGuard() : previous_(t_no_grad) { t_no_grad = true; }

NoGradGuard::~NoGradGuard() { t_no_grad = previous_; }

bool recording_enabled() { return t_active != nullptr && !t_no_grad; }

void backward(const Tensor& loss) {
    if (!loss.defined()) {
        throw Error("backward on undefined tensor");
    }
    if (loss.numel() != 1) {
        throw ShapeError("backward requires a scalar loss, got " + shape_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw Error("backward: loss does not depend on any tensor requiring gradients");
    }
    auto& impl = *loss.impl();
    if (impl.is_leaf) {
        detail::dispatch(loss.dtype(), [&]<class T>() { detail::grad_span<T>(impl)[0] += T(1); });
        return;
    }
    auto state = impl.graph.lock();
    if (!state) {
        throw Error("backward: the graph that produced this loss is no longer alive");
    }
    if (state->consumed) {
        throw Error("backward: graph already consumed; re-run the forward pass");
    }
    detail::dispatch(loss.dtype(), [&]<class T>() { detail::grad_span<T>(impl)[0] += T(1); });
    for (std::size_t i = impl.node + 1; i-- > 0;) {
        detail::Node& node = state->nodes[i];
        if (node.output->grad) {
            node.backward(*node.output->grad);
        }
    }
    state->consumed = true;
    state->nodes.clear();
    state->nodes.shrink_to_fit();
}

}  // namespace flowssc::autograd

namespace flowssc::detail {

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
    if (!autograd::recording_enabled()) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t != nullptr && t->defined() && t->requires_grad()) {
            return true;
        }
    }
    return false;
}

void record(const Tensor& out, BackwardFn backward) {
    auto& state = autograd::t_active->state();
    if (state->consumed) {
        throw Error("recording onto a consumed graph; clear() it or open a new Graph");
    }
    auto& impl = *out.impl();
    impl.requires_grad = true;
    impl.is_leaf = false;
    impl.graph = state;
    impl.node = state->nodes.size();
    state->nodes.push_back(Node{out.impl(), std::move(backward)});
}

Storage& grad_storage(TensorImpl& impl) {
    if (!impl.grad) {
        impl.grad = std::make_shared<Storage>(impl.data->dtype, impl.data->size());
    }
    return *impl.grad;
}

}  // namespace flowssc::detail
