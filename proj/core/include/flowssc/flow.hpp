#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "flowssc/rng.hpp"
#include "flowssc/tensor.hpp"

namespace flowssc::flow {

// Dyadic step sizes {1/M, 2/M, 4/M, ..., 1} on a base resolution M (a power of two).
struct StepSchedule {
    std::size_t base = 128;

    void validate() const;
    double delta() const { return 1.0 / static_cast<double>(base); }
    // Number of admissible halvings: base == 2^levels().
    std::size_t levels() const;
    // True when n uniform steps of size 1/n stay on the dyadic grid.
    bool admits_steps(std::size_t n) const;
    // Step size fed to the network: the finest step delta() is served by the
    // instantaneous field (d = 0), which anchors the bootstrap chain.
    double query_d(double d) const { return d <= delta() ? 0.0 : d; }
};

struct TimeStep {
    double t = 0.0;
    double d = 0.0;
    bool consistency = false;
};

// With probability `fraction`: d uniform over the dyadic sizes with 2d <= 1,
// then t uniform over the multiples of d in [0, 1 - 2d]. Otherwise d = 0 and
// t uniform in [0, 1).
TimeStep sample_t_d(const StepSchedule& schedule, double fraction, Rng& rng);

// (1 - t) * noise + t * gt.
Tensor interpolate(const Tensor& noise, const Tensor& gt, double t);
// Row-wise blend of [N x F] batches with one t per row.
Tensor interpolate_rows(const Tensor& noise, const Tensor& gt, std::span<const double> t);

// Velocity field over [N x F] states, one (t, d) per row.
using VelocityFn = std::function<Tensor(const Tensor& x, std::span<const double> t, std::span<const double> d)>;

struct FlowBatch {
    Tensor noise;  // [N x F] draws from the standard Gaussian
    Tensor gt;     // [N x F] data endpoints
    std::vector<TimeStep> steps;

    std::size_t size() const { return steps.size(); }
};

// Mean squared error over rows and the valid features of an optional [1 x F] 0/1 mask.
Tensor masked_mse(const Tensor& pred, const Tensor& target, const std::optional<Tensor>& mask = std::nullopt);

// Plain flow matching on a batch whose steps all have d = 0.
Tensor flow_matching_loss(const VelocityFn& net, const FlowBatch& batch,
                          const std::optional<Tensor>& mask = std::nullopt);

// Two chained steps of size d with gradients blocked: (s1 + s2) / 2 where
// s1 = net(x, t, d) and s2 = net(x + d * s1, t + d, d), the network being
// queried at schedule.query_d(d). Throws for t + 2d > 1.
Tensor self_consistency_target(const VelocityFn& net, const Tensor& x_t, std::span<const double> t,
                               std::span<const double> d, const StepSchedule& schedule = {});

struct ShortcutLoss {
    Tensor total;       // masked mean over every element of the batch
    double fm = 0.0;    // mean over the flow-matching rows (0 when none)
    double sc = 0.0;    // mean over the self-consistency rows (0 when none)
    std::size_t fm_rows = 0;
    std::size_t sc_rows = 0;
};

// Flow-matching rows regress net(h_t, t, 0) onto gt - noise; consistency rows
// regress net(h_t, t, 2d) onto the stop-gradient two-step target, built from
// `target` when given (e.g. an averaged copy) and from `net` otherwise.
ShortcutLoss shortcut_loss(const VelocityFn& net, const FlowBatch& batch,
                           const std::optional<Tensor>& mask = std::nullopt, const StepSchedule& schedule = {},
                           const VelocityFn& target = {});

// n uniform shortcut steps from x0: x <- x + d * net(x, k d, query_d(d)) with d = 1/n.
// Throws ConfigError when n is not admitted by the schedule.
Tensor integrate(const VelocityFn& net, const Tensor& x0, std::size_t n_steps, const StepSchedule& schedule);
// Draws x0 ~ N(0, I) of the given shape, then integrates.
Tensor sample(const VelocityFn& net, const Shape& shape, std::size_t n_steps, const StepSchedule& schedule, Rng& rng);
// Euler integration of the instantaneous field net(x, t, 0).
Tensor euler_oracle(const VelocityFn& net, const Tensor& x0, std::size_t n_steps = 512);

// Time of step k out of n, computed as k / n rather than by accumulation.
inline double step_time(std::size_t k, std::size_t n) { return static_cast<double>(k) / static_cast<double>(n); }

}  // namespace flowssc::flow
