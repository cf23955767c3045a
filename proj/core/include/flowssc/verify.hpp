#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowssc/dit.hpp"
#include "flowssc/flow_oracles.hpp"
#include "flowssc/refine.hpp"
#include "flowssc/tensor.hpp"

namespace flowssc::verify {

// ------------------------------------------------ finite differences

struct GradCheckResult {
    // max_i |analytic_i - numeric_i| / max_i |numeric_i|, worst over inputs
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Central-difference oracle: perturbs raw values and evaluates forward passes
// without recording, then compares with autodiff gradients of the scalar f.
// With `sample` set, only that many random coordinates per input are probed.
// Inputs must be f64.
GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor> inputs, double h = 1e-5,
                           std::optional<std::size_t> sample = std::nullopt, Rng* rng = nullptr);

// sum(y * w): scalarizes y with fixed weights so every element contributes.
Tensor project(const Tensor& y, const Tensor& w);

// ------------------------------------------------ check reports

struct Check {
    std::string name;
    double value = 0.0;
    double threshold = 0.0;
    bool pass = false;
    std::string detail;
    // Negative control: passes when the value does NOT meet the threshold.
    bool expect_fail = false;
};

// "PASS name value (threshold < t) detail"
std::string format(const Check& c);
// Turns a check into its negative control.
Check expect_failure(Check c);
bool all_pass(std::span<const Check> checks);

// Worst relative error over `trials` random draws per differentiable primitive.
std::vector<Check> primitive_gradient_checks(std::size_t trials = 100, std::uint64_t seed = 0,
                                             double threshold = 1e-4);
// Micro DiT, gradients w.r.t. both triplanes and every parameter tensor at
// random (t, d) per trial; `coords` coordinates probed per tensor.
Check dit_gradient_check(std::size_t trials = 100, std::uint64_t seed = 0, double threshold = 1e-3,
                         std::size_t coords = 8);

Check gaussian_check(const flow::GaussianOracleConfig& cfg = {}, double threshold = 0.05);

struct ToyConfig {
    std::size_t hidden = 128;
    std::size_t depth = 3;
    std::size_t iterations = 3000;
    double lr = 2e-3;
    std::size_t samples = 10000;
    std::size_t euler_steps = 512;
    std::uint64_t seed = 1;
};
// 1-step shortcut samples vs d = 0 Euler samples from the same noise on the
// 2-D mixture: mean (< 5%) and covariance (< 10%) lines.
std::vector<Check> toy_one_step_checks(const ToyConfig& cfg = {});

// Freshly initialized DiT with every parameter redrawn from N(0, stddev^2),
// breaking the zero-initialized output head. Small draws leave the net nearly
// affine and hence trivially self-consistent; 0.3 puts it in the nonlinear
// regime where the residual discriminates.
dit::ShortcutDiT random_dit(const dit::DiTConfig& cfg, std::uint64_t seed, double stddev = 0.3);

Check consistency_check(const std::string& name, const dit::ShortcutDiT& net,
                        std::span<const refine::LatentPair> pairs, const flow::StepSchedule& schedule,
                        std::size_t samples, std::uint64_t seed, double threshold = 0.10);

}  // namespace flowssc::verify
