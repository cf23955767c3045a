#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "flowssc/flow.hpp"
#include "flowssc/nn.hpp"
#include "flowssc/triplane.hpp"

namespace flowssc::dit {

struct DiTConfig {
    TriplaneDims planes{16, 16, 4, 16};
    std::size_t patch = 2;
    std::size_t embed = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    // Sinusoidal features per scalar input (t or d) before its MLP.
    std::size_t freq_dims = 32;

    // Noisy and condition triplanes are concatenated along channels.
    std::size_t in_channels() const { return 2 * planes.c; }
    std::size_t tokens() const;
    void validate() const;
};

// Per-row validity of a [rows x C] feature layout; masked-out rows carry no loss.
struct ValidMask {
    std::vector<std::uint8_t> rows;

    std::size_t size() const { return rows.size(); }
    std::size_t count() const;
    bool all() const { return count() == size(); }
    // [rows x 1] 0/1 column for broadcasting against features.
    Tensor column(DType dtype = default_dtype()) const;
};

// Mask of the three-plane token layout used by the network: every row is a real plane cell.
ValidMask valid_mask(const DiTConfig& cfg);

// Triplane rolled out into one (h + d) x (w + d) image: xy top-left, xz to
// its right, yz transposed below it. The bottom-right d x d corner holds no
// plane cell.
struct ComposedLayout {
    std::size_t height = 0;
    std::size_t width = 0;
    ValidMask mask;  // row-major over the composed image
};

ComposedLayout composed_layout(const TriplaneDims& dims);
// [rows x C] -> [(h+d)(w+d) x C] with zeros in the empty corner, and back.
Tensor compose(const Triplane& h);
Triplane decompose(const Tensor& composed, const TriplaneDims& dims);

// Pure re-indexing between triplane rows [rows x ch] and patch tokens
// [tokens x patch*patch*ch]; each plane is cut into non-overlapping patches.
Tensor patchify(const Tensor& rows, const TriplaneDims& dims, std::size_t patch);
Tensor unpatchify(const Tensor& tokens, const TriplaneDims& dims, std::size_t patch);

// gamma * LayerNorm(z) + beta, with gamma/beta [1 x E] broadcast over tokens.
Tensor adaln_modulate(const Tensor& z, const Tensor& gamma, const Tensor& beta);

// Sinusoidal features of a scalar in [0, 1], [1 x dims].
Tensor timestep_features(double value, std::size_t dims, DType dtype = default_dtype());

// Transformer over the patch tokens of (noisy, condition) triplane pairs,
// modulated by a joint (t, d) embedding through adaptive LayerNorm.
class ShortcutDiT {
public:
    static ShortcutDiT create(const DiTConfig& cfg, std::uint64_t seed);
    // Independent copy of the parameters.
    ShortcutDiT clone() const;

    const DiTConfig& config() const { return cfg_; }
    // Sum of the separate t and d embeddings, [1 x E].
    Tensor embed_time_step(double t, double d) const;
    // Velocity triplane with the shapes of h_t, zero on masked-out rows.
    Triplane forward(const Triplane& h_t, const Triplane& cond, double t, double d) const;
    // Velocity field over flattened triplanes [N x rows*C], all conditioned
    // on `cond`. The returned function references this network.
    flow::VelocityFn velocity(const Triplane& cond) const;
    // [1 x rows*C] 0/1 loss mask expanded from valid_mask.
    Tensor feature_mask(DType dtype = default_dtype()) const;
    nn::ParamList parameters() const;

private:
    struct Block {
        nn::Linear modulation;  // E -> 6E: shift, scale, gate for attention and MLP
        nn::Linear qkv, proj, fc1, fc2;
    };
    struct ScalarEmbed {
        nn::Linear l1, l2;
    };

    Tensor embed_scalar(const ScalarEmbed& e, double value) const;

    DiTConfig cfg_;
    nn::Linear patch_embed_;
    std::vector<Tensor> pos_embed_;  // one [tokens_p x E] table per plane
    ScalarEmbed t_embed_, d_embed_;
    std::vector<Block> blocks_;
    nn::Linear final_modulation_;  // E -> 2E: shift, scale
    nn::Linear head_;              // E -> patch*patch*C
    ValidMask mask_;
};

// Exact trainable-parameter count of a ShortcutDiT with this configuration.
std::size_t param_count(const DiTConfig& cfg);

}  // namespace flowssc::dit
