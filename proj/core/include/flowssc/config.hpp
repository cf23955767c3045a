#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "flowssc/codec.hpp"
#include "flowssc/codec_train.hpp"
#include "flowssc/dit.hpp"
#include "flowssc/refine.hpp"
#include "flowssc/scene.hpp"

namespace flowssc::config {

struct DataConfig {
    std::string path = "data/scenes.voxd";
    std::size_t scenes = 1000;
    std::array<double, 3> split{0.8, 0.1, 0.1};
    scene::SceneSpec scene{};
    scene::DegradeSpec degrade{};
};

struct EvalConfig {
    std::vector<std::size_t> steps{1, 2, 4, 8, 16};
    std::size_t refine_steps = 1;
    // Cap on evaluated test scenes; 0 evaluates the whole split.
    std::size_t max_scenes = 0;
    std::size_t residual_samples = 256;
    double residual_threshold = 0.10;
};

// Every hyperparameter of every stage. Sub-seeds are not configurable: each
// stage draws from named streams of the global seed.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";
    DataConfig data{};
    std::string codec_kind = "cross_attention";
    codec::CodecConfig codec{};
    codec::TrainConfig codec_train{};
    dit::DiTConfig dit{};
    refine::FlowTrainConfig flow{};
    EvalConfig eval{};

    // Copies shared values (grid dims, class count, seeds, plane dims) into
    // the stage configs and validates them. Throws ConfigError.
    void resolve();
    std::filesystem::path out(std::string_view file) const { return std::filesystem::path(output_dir) / file; }
};

// Strict JSON reader: unknown keys and type mismatches raise ConfigError
// naming the offending key path. Missing keys keep their defaults.
RunConfig parse(std::string_view json_text, std::string_view origin = "<config>");
RunConfig load(const std::filesystem::path& path);
// Full resolved configuration as pretty JSON; parse(dump(c)) reproduces c.
std::string dump(const RunConfig& cfg);
// "flow.iterations=200" style override; the value is read as JSON when it
// parses, otherwise as a string.
void apply_override(RunConfig& cfg, std::string_view assignment);

// Structural digests guarding checkpoint compatibility: the codec digest
// covers the codec architecture, the flow digest additionally covers the DiT
// and the step schedule.
std::uint64_t codec_digest(const RunConfig& cfg);
std::uint64_t flow_digest(const RunConfig& cfg);

}  // namespace flowssc::config
