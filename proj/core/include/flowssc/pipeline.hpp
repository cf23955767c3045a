#pragma once

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
#include "flowssc/config.hpp"
#include "flowssc/dit.hpp"
#include "flowssc/refine.hpp"
#include "flowssc/scene.hpp"

// End-to-end stages over a resolved RunConfig: data, codec training, flow
// training, refinement. Every artifact lands in cfg.output_dir.
namespace flowssc::pipeline {

using Progress = std::function<void(const std::string&)>;

// ------------------------------------------------ data

struct Dataset {
    std::vector<scene::Record> records;
    scene::Split split;

    // Records at the given indices, at most `cap` of them (0 = all).
    std::vector<scene::Record> subset(std::span<const std::size_t> indices, std::size_t cap = 0) const;
    std::vector<VoxelGrid> gt(std::span<const std::size_t> indices, std::size_t cap = 0) const;
};

std::vector<scene::Record> generate(const config::RunConfig& cfg);
// Reads cfg.data.path and splits it with the global seed. Grid dims or class
// count differing from the config raise ConfigError.
Dataset load_dataset(const config::RunConfig& cfg);

struct Census {
    std::size_t scenes = 0;
    std::vector<std::uint64_t> gt_voxels;      // per class
    std::vector<std::uint64_t> coarse_voxels;  // per class
    double coarse_iou = 0.0;
    double coarse_miou = 0.0;
};
Census census(std::span<const scene::Record> records);
std::string format_census(const Census& c);

// ------------------------------------------------ codec stage

std::unique_ptr<codec::Codec> make_codec(const config::RunConfig& cfg);
// Restores weights from a codec checkpoint after checking its digest.
std::unique_ptr<codec::Codec> load_codec(const config::RunConfig& cfg, const std::filesystem::path& path);

struct CodecRunResult {
    std::size_t iterations = 0;
    double best_miou = -1.0;
    double last_iou = 0.0;
    double last_miou = 0.0;
};

// Trains on the train split with periodic validation. Writes codec_final.fssc,
// codec_best.fssc (best validation mIoU) and codec_metrics.csv. With `resume`
// the optimizer state and iteration count continue from that checkpoint and
// the CSV is appended to.
CodecRunResult train_codec(const config::RunConfig& cfg, const Dataset& data,
                           const std::optional<std::filesystem::path>& resume = std::nullopt,
                           const Progress& progress = {});

// ------------------------------------------------ flow stage

struct FlowModel {
    dit::ShortcutDiT net;
    refine::LatentStats stats;
};

FlowModel load_flow(const config::RunConfig& cfg, const std::filesystem::path& path);

struct FlowRunResult {
    std::size_t iterations = 0;
    double last_fm = 0.0;
    double last_sc = 0.0;
};

// Encodes the train split through the frozen codec, fits latent statistics
// and trains the shortcut DiT. Writes flow_final.fssc and flow_metrics.csv.
FlowRunResult train_flow(const config::RunConfig& cfg, const Dataset& data, const codec::Codec& codec,
                         const std::optional<std::filesystem::path>& resume = std::nullopt,
                         const Progress& progress = {});

// Encoded, normalized pairs of the test split (capped by eval.max_scenes).
std::vector<refine::LatentPair> heldout_pairs(const config::RunConfig& cfg, const Dataset& data,
                                              const codec::Codec& codec, const refine::LatentStats& stats);

// ------------------------------------------------ refinement

struct RefineResult {
    std::vector<scene::Record> predictions;  // (gt, refined) per test scene
    std::vector<refine::AblationRow> rows;   // coarse, refined, delta
    std::size_t net_calls = 0;
};

// Refines every test scene with `n_steps`, writes predictions.voxd (dataset
// format, refined grid in the coarse slot) and refine_metrics.csv.
RefineResult refine_split(const config::RunConfig& cfg, const Dataset& data, const codec::Codec& codec,
                          const FlowModel& model, std::size_t n_steps);

// Steps sweep over the test split; writes steps_ablation.csv.
std::vector<refine::AblationRow> ablate_steps(const config::RunConfig& cfg, const Dataset& data,
                                              const codec::Codec& codec, const FlowModel& model);

}  // namespace flowssc::pipeline
