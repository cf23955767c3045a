#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "flowssc/codec.hpp"
#include "flowssc/optim.hpp"

namespace flowssc::codec {

struct TrainConfig {
    std::size_t iterations = 3000;
    std::size_t batch = 4;
    double lr = 2e-3;
    double min_lr = 2e-5;
    std::size_t warmup = 100;
    double weight_decay = 0.0;
    double grad_clip = 1.0;
    bool augment = true;
    std::size_t eval_every = 500;
    std::size_t eval_scenes = 20;
    std::uint64_t seed = 0;
};

struct TrainLogRow {
    std::size_t iteration = 0;
    double lr = 0.0;
    double loss = 0.0;
    double ce = 0.0;
    double geo = 0.0;
    double sem = 0.0;
    // NaN on iterations without an evaluation pass.
    double iou = std::numeric_limits<double>::quiet_NaN();
    double miou = std::numeric_limits<double>::quiet_NaN();
};

struct ReconstructionScore {
    double iou = 0.0;
    double miou = 0.0;
};

ReconstructionScore evaluate_reconstruction(const Codec& codec, std::span<const VoxelGrid> scenes);

// AdamW + warmup/cosine training of any codec on the reconstruction loss.
// Each iteration's minibatch and augmentation derive from (seed, iteration),
// so a run resumed from a checkpoint continues exactly as an unbroken one.
class CodecTrainer {
public:
    CodecTrainer(Codec& codec, TrainConfig cfg);

    // Trains until `iteration() == until` (capped at cfg.iterations).
    void run(std::span<const VoxelGrid> train, std::span<const VoxelGrid> eval, std::size_t until,
             const std::function<void(const TrainLogRow&)>& log = {});
    TrainLogRow step(std::span<const VoxelGrid> train);

    std::size_t iteration() const { return optimizer_.steps_taken(); }
    const TrainConfig& config() const { return cfg_; }
    optim::AdamW& optimizer() { return optimizer_; }

private:
    Codec& codec_;
    TrainConfig cfg_;
    nn::ParamList params_;
    optim::AdamW optimizer_;
    optim::WarmupCosine schedule_;
};

}  // namespace flowssc::codec
