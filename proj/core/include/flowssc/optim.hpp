#pragma once

#include <cstddef>
#include <vector>

#include "flowssc/nn.hpp"

namespace flowssc::optim {

// Linear warmup to base_lr, then cosine annealing to min_lr at total_steps.
struct WarmupCosine {
    double base_lr = 1e-3;
    double min_lr = 0.0;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 1;

    double at(std::size_t step) const;
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam over a fixed parameter list.
class AdamW {
public:
    AdamW(nn::ParamList params, AdamWConfig config);

    void step(double lr);
    void zero_grad();
    std::size_t steps_taken() const { return steps_; }

    // First/second moments, exposed for checkpointing.
    nn::ParamList state() const;
    void set_steps_taken(std::size_t steps) { steps_ = steps; }

private:
    nn::ParamList params_;
    AdamWConfig config_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::size_t steps_ = 0;
};

// Rescales gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(const nn::ParamList& params, double max_norm);

}  // namespace flowssc::optim
