#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "flowssc/nn.hpp"
#include "flowssc/triplane.hpp"
#include "flowssc/voxel_grid.hpp"

namespace flowssc::codec {

struct LossWeights {
    double ce = 1.0;
    double geo = 0.5;
    double sem = 0.5;
};

struct CodecConfig {
    GridDims grid{32, 32, 8};
    int num_classes = 5;
    TriplaneDims planes{16, 16, 4, 16};
    std::size_t class_embed = 16;
    // Fourier bands per axis, log-spaced angular frequencies from
    // pi * freq_lo to pi * freq_hi over normalized coordinates.
    std::size_t fourier_bands = 8;
    double freq_lo = 1.0;
    double freq_hi = 32.0;
    std::size_t heads = 2;
    std::size_t self_blocks = 2;
    std::size_t mlp_ratio = 2;
    std::size_t value_hidden = 64;
    // Sharpness of the initial query-key affinity (see CrossAttentionCodec).
    double attention_scale = 3.0;
    std::size_t decoder_hidden = 64;
    bool decoder_conv = true;
    // Conv baseline widths.
    std::size_t conv_hidden = 32;
    LossWeights loss{};

    std::size_t fourier_dims() const { return 6 * fourier_bands; }
    // Token / query width of the cross-attention encoder.
    std::size_t width() const { return class_embed + fourier_dims(); }
    void validate() const;
};

// Sin/cos features per axis: [sin(w0 p), cos(w0 p), sin(w1 p), ...] for x, then y, then z.
Tensor fourier_encode(std::span<const std::array<double, 3>> positions, const CodecConfig& cfg);
// Encoding of every triplane cell center; the axis a plane does not span is zeroed.
Tensor plane_query_encoding(const CodecConfig& cfg);

std::array<double, 3> voxel_center(const GridDims& dims, std::size_t x, std::size_t y, std::size_t z);
// Normalized centers of every voxel in grid order, as an [N x 3] tensor.
Tensor voxel_center_grid(const GridDims& dims, DType dtype = default_dtype());

// Triplane decoder shared by both codecs: three bilinear plane samples are
// summed, optionally refined by a residual 3-D conv block on the voxel grid,
// and mapped to class logits by an MLP.
struct Decoder {
    nn::Linear l1, l2, l3;
    Tensor conv_a_w, conv_a_b, conv_b_w, conv_b_b;
    bool use_conv = true;

    static Decoder create(const CodecConfig& cfg, Rng& rng);
    // xyz[N x 3] in [0,1]^3 (clamped) -> summed features [N x C].
    Tensor point_features(const Triplane& h, const Tensor& xyz) const;
    Tensor head(const Tensor& features) const;
    Tensor decode_point(const Triplane& h, const Tensor& xyz) const;
    // Logits [X x Y x Z x K].
    Tensor decode_grid(const Triplane& h, const GridDims& dims) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;
};

class Codec {
public:
    virtual ~Codec() = default;
    const CodecConfig& config() const { return cfg_; }
    virtual std::string kind() const = 0;
    virtual Triplane encode_grid(const VoxelGrid& grid) const = 0;
    // Throws ConfigError when dims differ from the configured grid.
    Tensor decode_grid(const Triplane& h, const GridDims& dims) const;
    Tensor decode_point(const Triplane& h, const Tensor& xyz) const { return decoder_.decode_point(h, xyz); }
    // encode -> decode -> argmax, without recording gradients.
    VoxelGrid reconstruct(const VoxelGrid& grid) const;
    VoxelGrid decode_labels(const Triplane& h) const;
    nn::ParamList parameters() const;
    Decoder& decoder() { return decoder_; }

protected:
    Codec(CodecConfig cfg, Decoder decoder) : cfg_(std::move(cfg)), decoder_(std::move(decoder)) {}
    virtual void collect_encoder(nn::ParamList& out) const = 0;
    CodecConfig cfg_;
    Decoder decoder_;
};

struct TokenSet {
    std::vector<std::array<double, 3>> positions;
    std::vector<std::int32_t> labels;
    Tensor features;  // [N x width]: class embedding then Fourier features
    std::size_t size() const { return labels.size(); }
};

// Set encoder: learnable triplane queries cross-attend to the tokens of the
// occupied voxels, followed by self-attention blocks over the queries.
// Queries start as the Fourier encoding of their cell centers and the
// query/key projections start as a scaled copy of the Fourier slots, so the
// initial attention concentrates on voxels that project onto each cell.
class CrossAttentionCodec : public Codec {
public:
    static std::unique_ptr<CrossAttentionCodec> create(const CodecConfig& cfg, std::uint64_t seed);
    std::string kind() const override { return "cross_attention"; }

    // Throws DataError for an all-empty grid.
    TokenSet voxelize_tokens(const VoxelGrid& grid) const;
    // Invariant to token order: tokens are put in canonical position order first.
    Triplane encode(const TokenSet& tokens) const;
    Triplane encode_grid(const VoxelGrid& grid) const override { return encode(voxelize_tokens(grid)); }

private:
    struct Block {
        nn::LayerNorm ln1, ln2;
        nn::Linear qkv, proj, fc1, fc2;
    };
    explicit CrossAttentionCodec(const CodecConfig& cfg, Decoder decoder) : Codec(cfg, std::move(decoder)) {}
    void collect_encoder(nn::ParamList& out) const override;

    Tensor class_embedding_;  // [K x E]
    Tensor queries_;          // [M x width]
    Tensor w_q_, w_k_;        // [width x width]
    nn::Linear value1_, value2_, attn_out_;
    std::vector<Block> blocks_;
    nn::LayerNorm ln_out_;
    nn::Linear out_;
};

// Dense baseline: class embedding -> 3x3x3 conv -> strided 3x3x3 conv ->
// 1x1 projection -> mean pooling along each axis into the three planes.
class ConvCodec : public Codec {
public:
    static std::unique_ptr<ConvCodec> create(const CodecConfig& cfg, std::uint64_t seed);
    std::string kind() const override { return "conv_baseline"; }
    Triplane encode_grid(const VoxelGrid& grid) const override;

private:
    explicit ConvCodec(const CodecConfig& cfg, Decoder decoder) : Codec(cfg, std::move(decoder)) {}
    void collect_encoder(nn::ParamList& out) const override;

    Tensor class_embedding_;
    Tensor conv1_w_, conv1_b_, conv2_w_, conv2_b_;
    nn::Linear proj_;
};

std::unique_ptr<Codec> make_codec(const std::string& kind, const CodecConfig& cfg, std::uint64_t seed);

// Per-voxel argmax of logits [X x Y x Z x K].
VoxelGrid argmax_labels(const Tensor& logits, int num_classes);

struct LossTerms {
    Tensor total;
    Tensor ce;
    Tensor geo;  // scene-class affinity on occupied-vs-empty
    Tensor sem;  // scene-class affinity per class
};

// logits[N x K] against labels: soft precision / recall / specificity
// affinity terms, each as -log(value), summed.
Tensor geo_scal_loss(const Tensor& logits, std::span<const std::int32_t> labels);
// Same three terms per class, averaged over classes present in labels.
Tensor sem_scal_loss(const Tensor& logits, std::span<const std::int32_t> labels);
// logits [X x Y x Z x K] (or [N x K]) against gt.
LossTerms codec_loss(const Tensor& logits, const VoxelGrid& gt, const LossWeights& weights);

}  // namespace flowssc::codec
