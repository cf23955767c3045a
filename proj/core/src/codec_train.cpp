#include "flowssc/codec_train.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flowssc/autograd.hpp"
#include "flowssc/error.hpp"
#include "flowssc/metrics.hpp"
#include "flowssc/ops.hpp"
#include "flowssc/scene.hpp"

namespace flowssc::codec {

ReconstructionScore evaluate_reconstruction(const Codec& codec, std::span<const VoxelGrid> scenes) {
    metrics::ConfusionStats stats(codec.config().num_classes);
    for (const auto& g : scenes) {
        metrics::accumulate(codec.reconstruct(g), g, stats);
    }
    return {metrics::iou(stats), metrics::miou(stats)};
}

CodecTrainer::CodecTrainer(Codec& codec, TrainConfig cfg)
    : codec_(codec),
      cfg_(cfg),
      params_(codec.parameters()),
      optimizer_(params_, optim::AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay}),
      schedule_{cfg.lr, cfg.min_lr, cfg.warmup, std::max<std::size_t>(cfg.iterations, 1)} {
    if (cfg_.batch == 0) {
        throw ConfigError("codec batch size must be positive");
    }
    nn::set_trainable(params_);
}

TrainLogRow CodecTrainer::step(std::span<const VoxelGrid> train) {
    if (train.empty()) {
        throw DataError("codec training set is empty");
    }
    const std::size_t it = iteration();
    Rng rng = make_stream(cfg_.seed, "codec.batch", it);
    TrainLogRow row;
    row.iteration = it;
    row.lr = schedule_.at(it);
    optimizer_.zero_grad();
    const double inv_b = 1.0 / static_cast<double>(cfg_.batch);
    for (std::size_t b = 0; b < cfg_.batch; ++b) {
        const std::size_t idx = uniform_index(rng, train.size());
        const int element = static_cast<int>(uniform_index(rng, 8));
        const VoxelGrid grid = cfg_.augment ? scene::dihedral(train[idx], element) : train[idx];
        autograd::Graph graph;
        const Tensor logits = codec_.decode_grid(codec_.encode_grid(grid), grid.dims());
        const LossTerms t = codec_loss(logits, grid, codec_.config().loss);
        autograd::backward(ops::mul_scalar(t.total, inv_b));
        row.loss += t.total.item() * inv_b;
        row.ce += t.ce.item() * inv_b;
        row.geo += t.geo.item() * inv_b;
        row.sem += t.sem.item() * inv_b;
    }
    if (!std::isfinite(row.loss)) {
        throw NumericalError("codec loss diverged at iteration " + std::to_string(it));
    }
    if (cfg_.grad_clip > 0.0) {
        optim::clip_grad_norm(params_, cfg_.grad_clip);
    }
    optimizer_.step(row.lr);
    return row;
}

void CodecTrainer::run(std::span<const VoxelGrid> train, std::span<const VoxelGrid> eval, std::size_t until,
                       const std::function<void(const TrainLogRow&)>& log) {
    until = std::min(until, cfg_.iterations);
    while (iteration() < until) {
        TrainLogRow row = step(train);
        const std::size_t done = iteration();
        if (!eval.empty() && cfg_.eval_every > 0 && (done % cfg_.eval_every == 0 || done == cfg_.iterations)) {
            const auto n = std::min(eval.size(), cfg_.eval_scenes);
            const auto score = evaluate_reconstruction(codec_, eval.first(n));
            row.iou = score.iou;
            row.miou = score.miou;
        }
        if (log) {
            log(row);
        }
    }
}

}  // namespace flowssc::codec
