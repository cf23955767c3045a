#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowssc/codec.hpp"
#include "flowssc/dit.hpp"
#include "flowssc/flow.hpp"
#include "flowssc/optim.hpp"
#include "flowssc/scene.hpp"

namespace flowssc::refine {

// Per-channel affine whitening of codec latents, fitted on training targets
// so the flow sees unit-scale channels.
struct LatentStats {
    std::vector<double> mean;
    std::vector<double> stddev;

    static LatentStats identity(std::size_t channels);
    static LatentStats fit(std::span<const Triplane> latents);
    std::size_t channels() const { return mean.size(); }
    Triplane normalize(const Triplane& h) const;
    Triplane denormalize(const Triplane& h) const;
};

// Normalized (target, condition) latents of one scene.
struct LatentPair {
    Triplane gt;
    Triplane coarse;
};

// Encodes both grids of each record with the frozen codec (no gradients).
std::vector<LatentPair> encode_records(const codec::Codec& codec, std::span<const scene::Record> records);
// Fits stats on the gt latents and normalizes every pair in place.
LatentStats normalize_pairs(std::vector<LatentPair>& pairs);
void apply_stats(const LatentStats& stats, std::vector<LatentPair>& pairs);

struct FlowTrainConfig {
    std::size_t iterations = 3000;
    std::size_t batch = 8;
    double lr = 5e-4;
    double min_lr = 5e-6;
    std::size_t warmup = 100;
    double weight_decay = 0.0;
    double grad_clip = 1.0;
    double fraction = 0.25;
    flow::StepSchedule schedule{};
    // Decay of an averaged copy used for self-consistency targets; 0 uses the
    // current parameters with gradients blocked.
    double target_ema = 0.0;
    std::uint64_t seed = 0;
};

struct FlowLogRow {
    std::size_t iteration = 0;
    double lr = 0.0;
    double total = 0.0;
    double fm = 0.0;  // mean over the flow-matching elements of the batch
    double sc = 0.0;  // mean over the self-consistency elements
    std::size_t fm_rows = 0;
    std::size_t sc_rows = 0;
};

// AdamW + warmup/cosine training of the shortcut DiT on (gt, coarse) latent
// pairs. Batches derive from (seed, iteration) so resumed runs match.
class FlowTrainer {
public:
    FlowTrainer(dit::ShortcutDiT& net, FlowTrainConfig cfg);

    FlowLogRow step(std::span<const LatentPair> train);
    void run(std::span<const LatentPair> train, std::size_t until,
             const std::function<void(const FlowLogRow&)>& log = {});

    std::size_t iteration() const { return optimizer_.steps_taken(); }
    const FlowTrainConfig& config() const { return cfg_; }
    optim::AdamW& optimizer() { return optimizer_; }
    // Averaged copy when target_ema > 0, else null.
    const dit::ShortcutDiT* target() const { return target_ ? &*target_ : nullptr; }

private:
    dit::ShortcutDiT& net_;
    FlowTrainConfig cfg_;
    nn::ParamList params_;
    optim::AdamW optimizer_;
    optim::WarmupCosine schedule_;
    std::optional<dit::ShortcutDiT> target_;
};

struct ConsistencyResidual {
    double residual = 0.0;  // E|s(x, t, 2d) - target|^2
    double energy = 0.0;    // E|s(x, t, 2d)|^2
    double ratio() const { return energy > 0.0 ? residual / energy : std::numeric_limits<double>::infinity(); }
};

// Held-out residual of the two-half-steps identity over `samples` draws of
// (pair, noise, t, d) with d on the dyadic schedule.
ConsistencyResidual consistency_residual(const dit::ShortcutDiT& net, std::span<const LatentPair> pairs,
                                         const flow::StepSchedule& schedule, std::size_t samples, std::uint64_t seed);

// coarse grid -> encode -> normalize -> n-step shortcut sample -> denormalize -> decode.
class Refiner {
public:
    Refiner(const codec::Codec& codec, const dit::ShortcutDiT& net, LatentStats stats, flow::StepSchedule schedule);

    // Noise is drawn from the (seed, "refine.noise", index) stream.
    VoxelGrid refine(const VoxelGrid& coarse, std::size_t n_steps, std::uint64_t seed, std::uint64_t index) const;
    Triplane sample_latent(const Triplane& cond, std::size_t n_steps, std::uint64_t seed, std::uint64_t index) const;
    // Network evaluations since construction.
    std::size_t net_calls() const { return calls_->load(); }

private:
    const codec::Codec& codec_;
    const dit::ShortcutDiT& net_;
    LatentStats stats_;
    flow::StepSchedule schedule_;
    std::shared_ptr<std::atomic<std::size_t>> calls_;
};

struct AblationRow {
    std::string experiment;
    std::string variant;
    double iou = 0.0;
    double miou = 0.0;
    std::vector<double> per_class_iou;  // non-empty classes 1..K-1, NaN when absent
    double wall_ms = 0.0;               // mean per scene
};

// Rows: coarse (the condition itself), refined (n_steps), delta (refined - coarse).
// Refined grids are appended to `predictions` when given.
std::vector<AblationRow> refiner_ablation(const Refiner& refiner, std::span<const scene::Record> records,
                                          std::size_t n_steps, std::uint64_t seed,
                                          std::vector<VoxelGrid>* predictions = nullptr);
// One row per step count; every count sees the same noise per scene.
std::vector<AblationRow> steps_ablation(const Refiner& refiner, std::span<const scene::Record> records,
                                        std::span<const std::size_t> steps, std::uint64_t seed);

// Header: experiment,variant,iou,miou,iou_<class>...,wall_ms, preceded by a
// comment line stating the mIoU convention.
std::string ablation_csv(std::span<const AblationRow> rows, int num_classes);
void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationRow> rows, int num_classes);

}  // namespace flowssc::refine
