#include "flowssc/codec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flowssc/autograd.hpp"
#include "flowssc/error.hpp"
#include "flowssc/ops.hpp"

namespace flowssc::codec {

void CodecConfig::validate() const {
    if (num_classes < 2 || num_classes > 256) {
        throw ConfigError("codec class count must be in [2, 256]");
    }
    if (grid.total() == 0 || planes.h == 0 || planes.w == 0 || planes.d == 0 || planes.c == 0) {
        throw ConfigError("codec grid and plane dims must be positive");
    }
    if (fourier_bands < 1 || !(freq_lo > 0.0) || !(freq_hi >= freq_lo)) {
        throw ConfigError("invalid Fourier band settings");
    }
    if (heads == 0 || width() % heads != 0) {
        throw ConfigError("codec head count must divide the encoder width " + std::to_string(width()));
    }
    if (decoder_hidden == 0 || value_hidden == 0 || mlp_ratio == 0) {
        throw ConfigError("codec hidden sizes must be positive");
    }
}

namespace {

std::vector<double> band_frequencies(const CodecConfig& cfg) {
    std::vector<double> w(cfg.fourier_bands);
    for (std::size_t b = 0; b < w.size(); ++b) {
        const double f = cfg.fourier_bands == 1
                             ? cfg.freq_lo
                             : cfg.freq_lo * std::pow(cfg.freq_hi / cfg.freq_lo,
                                                      static_cast<double>(b) / static_cast<double>(w.size() - 1));
        w[b] = std::numbers::pi * f;
    }
    return w;
}

// Fourier features with per-axis enable flags.
std::vector<double> encode_point(const std::array<double, 3>& p, const std::vector<double>& freqs,
                                 std::array<bool, 3> axes) {
    std::vector<double> out;
    out.reserve(6 * freqs.size());
    for (int a = 0; a < 3; ++a) {
        for (double w : freqs) {
            out.push_back(axes[static_cast<std::size_t>(a)] ? std::sin(w * p[static_cast<std::size_t>(a)]) : 0.0);
            out.push_back(axes[static_cast<std::size_t>(a)] ? std::cos(w * p[static_cast<std::size_t>(a)]) : 0.0);
        }
    }
    return out;
}

Tensor conv_weight(std::size_t k, std::size_t cin, std::size_t cout, Rng& rng) {
    return nn::variance_scaled({k, k, k, cin, cout}, k * k * k * cin, rng);
}

}  // namespace

Tensor fourier_encode(std::span<const std::array<double, 3>> positions, const CodecConfig& cfg) {
    const auto freqs = band_frequencies(cfg);
    std::vector<double> values;
    values.reserve(positions.size() * cfg.fourier_dims());
    for (const auto& p : positions) {
        const auto f = encode_point(p, freqs, {true, true, true});
        values.insert(values.end(), f.begin(), f.end());
    }
    return Tensor::from_values({positions.size(), cfg.fourier_dims()}, values);
}

Tensor plane_query_encoding(const CodecConfig& cfg) {
    const auto freqs = band_frequencies(cfg);
    const auto& t = cfg.planes;
    std::vector<double> values;
    values.reserve(t.rows() * cfg.fourier_dims());
    auto center = [](std::size_t i, std::size_t n) { return (static_cast<double>(i) + 0.5) / static_cast<double>(n); };
    auto push = [&](const std::array<double, 3>& p, std::array<bool, 3> axes) {
        const auto f = encode_point(p, freqs, axes);
        values.insert(values.end(), f.begin(), f.end());
    };
    for (std::size_t i = 0; i < t.h; ++i) {
        for (std::size_t j = 0; j < t.w; ++j) {
            push({center(i, t.h), center(j, t.w), 0.0}, {true, true, false});
        }
    }
    for (std::size_t i = 0; i < t.h; ++i) {
        for (std::size_t k = 0; k < t.d; ++k) {
            push({center(i, t.h), 0.0, center(k, t.d)}, {true, false, true});
        }
    }
    for (std::size_t j = 0; j < t.w; ++j) {
        for (std::size_t k = 0; k < t.d; ++k) {
            push({0.0, center(j, t.w), center(k, t.d)}, {false, true, true});
        }
    }
    return Tensor::from_values({t.rows(), cfg.fourier_dims()}, values);
}

std::array<double, 3> voxel_center(const GridDims& dims, std::size_t x, std::size_t y, std::size_t z) {
    return {(static_cast<double>(x) + 0.5) / static_cast<double>(dims.x),
            (static_cast<double>(y) + 0.5) / static_cast<double>(dims.y),
            (static_cast<double>(z) + 0.5) / static_cast<double>(dims.z)};
}

Tensor voxel_center_grid(const GridDims& dims, DType dtype) {
    std::vector<double> values;
    values.reserve(dims.total() * 3);
    for (std::size_t x = 0; x < dims.x; ++x) {
        for (std::size_t y = 0; y < dims.y; ++y) {
            for (std::size_t z = 0; z < dims.z; ++z) {
                const auto c = voxel_center(dims, x, y, z);
                values.insert(values.end(), c.begin(), c.end());
            }
        }
    }
    return Tensor::from_values({dims.total(), 3}, values, dtype);
}

// ---------------------------------------------------------------- decoder

Decoder Decoder::create(const CodecConfig& cfg, Rng& rng) {
    const std::size_t c = cfg.planes.c, hid = cfg.decoder_hidden;
    Decoder d;
    d.l1 = nn::Linear::create(c, hid, rng, 2.0);
    d.l2 = nn::Linear::create(hid, hid, rng, 2.0);
    d.l3 = nn::Linear::create(hid, static_cast<std::size_t>(cfg.num_classes), rng);
    d.use_conv = cfg.decoder_conv;
    if (d.use_conv) {
        d.conv_a_w = conv_weight(3, c, c, rng);
        d.conv_a_b = Tensor::zeros({c});
        // Zero-initialized second conv: the residual block starts as identity.
        d.conv_b_w = Tensor::zeros({3, 3, 3, c, c});
        d.conv_b_b = Tensor::zeros({c});
    }
    return d;
}

Tensor Decoder::point_features(const Triplane& h, const Tensor& xyz) const {
    if (xyz.rank() != 2 || xyz.dim(1) != 3) {
        throw ShapeError("decoder query points must be [N x 3], got " + shape_string(xyz.shape()));
    }
    const Tensor x = ops::narrow(xyz, 1, 0, 1);
    const Tensor y = ops::narrow(xyz, 1, 1, 1);
    const Tensor z = ops::narrow(xyz, 1, 2, 1);
    Tensor f = ops::bilinear_sample_2d(h.plane(Plane::xy), ops::concat({x, y}, 1));
    f = ops::add(f, ops::bilinear_sample_2d(h.plane(Plane::xz), ops::concat({x, z}, 1)));
    return ops::add(f, ops::bilinear_sample_2d(h.plane(Plane::yz), ops::concat({y, z}, 1)));
}

Tensor Decoder::head(const Tensor& features) const {
    return l3(ops::gelu(l2(ops::gelu(l1(features)))));
}

Tensor Decoder::decode_point(const Triplane& h, const Tensor& xyz) const { return head(point_features(h, xyz)); }

Tensor Decoder::decode_grid(const Triplane& h, const GridDims& dims) const {
    const std::size_t c = h.dims().c;
    Tensor f = point_features(h, voxel_center_grid(dims, h.data().dtype()));
    if (use_conv) {
        Tensor g = ops::reshape(f, {dims.x, dims.y, dims.z, c});
        Tensor r = ops::gelu(ops::conv3d(g, conv_a_w, conv_a_b, 1, 1));
        r = ops::conv3d(r, conv_b_w, conv_b_b, 1, 1);
        f = ops::add(f, ops::reshape(r, {dims.total(), c}));
    }
    Tensor logits = head(f);
    return ops::reshape(logits, {dims.x, dims.y, dims.z, logits.dim(1)});
}

void Decoder::collect(const std::string& prefix, nn::ParamList& out) const {
    l1.collect(prefix + ".mlp1", out);
    l2.collect(prefix + ".mlp2", out);
    l3.collect(prefix + ".mlp3", out);
    if (use_conv) {
        out.push_back({prefix + ".conv_a.weight", conv_a_w});
        out.push_back({prefix + ".conv_a.bias", conv_a_b});
        out.push_back({prefix + ".conv_b.weight", conv_b_w});
        out.push_back({prefix + ".conv_b.bias", conv_b_b});
    }
}

// ------------------------------------------------------------------ codec

Tensor Codec::decode_grid(const Triplane& h, const GridDims& dims) const {
    if (dims != cfg_.grid) {
        throw ConfigError("decode dims " + std::to_string(dims.x) + "x" + std::to_string(dims.y) + "x" +
                          std::to_string(dims.z) + " differ from the codec grid");
    }
    if (h.dims() != cfg_.planes) {
        throw ShapeError("triplane dims do not match the codec configuration");
    }
    return decoder_.decode_grid(h, dims);
}

VoxelGrid Codec::decode_labels(const Triplane& h) const {
    autograd::NoGradGuard guard;
    return argmax_labels(decode_grid(h, cfg_.grid), cfg_.num_classes);
}

VoxelGrid Codec::reconstruct(const VoxelGrid& grid) const {
    autograd::NoGradGuard guard;
    return decode_labels(encode_grid(grid));
}

nn::ParamList Codec::parameters() const {
    nn::ParamList out;
    collect_encoder(out);
    decoder_.collect("decoder", out);
    return out;
}

VoxelGrid argmax_labels(const Tensor& logits, int num_classes) {
    if (logits.rank() != 4 || logits.dim(3) != static_cast<std::size_t>(num_classes)) {
        throw ShapeError("argmax expects [X x Y x Z x K] logits, got " + shape_string(logits.shape()));
    }
    const GridDims dims{logits.dim(0), logits.dim(1), logits.dim(2)};
    const auto k = static_cast<std::size_t>(num_classes);
    std::vector<std::uint8_t> labels(dims.total());
    detail::dispatch(logits.dtype(), [&]<class T>() {
        auto v = logits.data<T>();
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const T* row = v.data() + i * k;
            labels[i] = static_cast<std::uint8_t>(std::max_element(row, row + k) - row);
        }
    });
    return VoxelGrid(dims, num_classes, std::move(labels));
}

// ------------------------------------------------- cross-attention codec

std::unique_ptr<CrossAttentionCodec> CrossAttentionCodec::create(const CodecConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng = make_stream(seed, "codec.init");
    auto codec = std::unique_ptr<CrossAttentionCodec>(new CrossAttentionCodec(cfg, Decoder::create(cfg, rng)));
    CrossAttentionCodec& c = *codec;
    const std::size_t width = cfg.width(), e = cfg.class_embed, m = cfg.planes.rows();
    const auto k = static_cast<std::size_t>(cfg.num_classes);

    c.class_embedding_ = Tensor::randn({k, e}, rng, 1.0);

    // Queries: zeros in the class slots, Fourier encoding of the cell center in the rest.
    std::vector<double> q(m * width, 0.0);
    const Tensor pe = plane_query_encoding(cfg);
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t j = 0; j < cfg.fourier_dims(); ++j) {
            q[r * width + e + j] = pe.at(r * cfg.fourier_dims() + j);
        }
    }
    c.queries_ = Tensor::from_values({m, width}, q);

    // Route Fourier slot (axis, band, sin/cos) to head (band % heads) so every
    // head sees all three axes; scale so that the initial score is
    // attention_scale * sum_bands cos(w * (p_query - p_token)).
    const std::size_t dh = width / cfg.heads;
    std::vector<std::size_t> next_slot(cfg.heads, 0);
    std::vector<double> wq(width * width), wk(width * width);
    {
        const double noise = 0.02 / std::sqrt(static_cast<double>(width));
        std::normal_distribution<double> n(0.0, noise);
        for (std::size_t i = 0; i < wq.size(); ++i) {
            wq[i] = n(rng);
            wk[i] = n(rng);
        }
    }
    const double amp = std::sqrt(cfg.attention_scale * std::sqrt(static_cast<double>(dh)));
    for (std::size_t b = 0; b < cfg.fourier_bands; ++b) {
        const std::size_t head = b % cfg.heads;
        for (std::size_t a = 0; a < 3; ++a) {
            for (std::size_t s = 0; s < 2; ++s) {
                const std::size_t src = e + a * 2 * cfg.fourier_bands + 2 * b + s;
                if (next_slot[head] >= dh) {
                    throw ConfigError("encoder head width too small for the Fourier slots");
                }
                const std::size_t dst = head * dh + next_slot[head]++;
                wq[src * width + dst] += amp;
                wk[src * width + dst] += amp;
            }
        }
    }
    c.w_q_ = Tensor::from_values({width, width}, wq);
    c.w_k_ = Tensor::from_values({width, width}, wk);

    c.value1_ = nn::Linear::create(width, cfg.value_hidden, rng, 2.0);
    c.value2_ = nn::Linear::create(cfg.value_hidden, width, rng);
    c.attn_out_ = nn::Linear::create(width, width, rng);
    for (std::size_t i = 0; i < cfg.self_blocks; ++i) {
        Block blk;
        blk.ln1 = nn::LayerNorm::create(width);
        blk.ln2 = nn::LayerNorm::create(width);
        blk.qkv = nn::Linear::create(width, 3 * width, rng);
        blk.proj = nn::Linear::create(width, width, rng, 0.5);
        blk.fc1 = nn::Linear::create(width, cfg.mlp_ratio * width, rng, 2.0);
        blk.fc2 = nn::Linear::create(cfg.mlp_ratio * width, width, rng, 0.5);
        c.blocks_.push_back(std::move(blk));
    }
    c.ln_out_ = nn::LayerNorm::create(width);
    c.out_ = nn::Linear::create(width, cfg.planes.c, rng);
    return codec;
}

TokenSet CrossAttentionCodec::voxelize_tokens(const VoxelGrid& grid) const {
    if (grid.dims() != cfg_.grid || grid.num_classes() != cfg_.num_classes) {
        throw ConfigError("grid layout does not match the codec configuration");
    }
    TokenSet tokens;
    const auto& d = grid.dims();
    for (std::size_t x = 0; x < d.x; ++x) {
        for (std::size_t y = 0; y < d.y; ++y) {
            for (std::size_t z = 0; z < d.z; ++z) {
                const auto label = grid.at(x, y, z);
                if (label != 0) {
                    tokens.positions.push_back(voxel_center(d, x, y, z));
                    tokens.labels.push_back(label);
                }
            }
        }
    }
    if (tokens.labels.empty()) {
        throw DataError("cannot encode an all-empty grid");
    }
    tokens.features = ops::concat(
        {ops::gather_rows(class_embedding_, tokens.labels), fourier_encode(tokens.positions, cfg_)}, 1);
    return tokens;
}

Triplane CrossAttentionCodec::encode(const TokenSet& tokens) const {
    if (tokens.size() == 0) {
        throw DataError("cannot encode an empty token set");
    }
    if (tokens.features.rank() != 2 || tokens.features.dim(0) != tokens.size() ||
        tokens.features.dim(1) != cfg_.width()) {
        throw ShapeError("token features " + shape_string(tokens.features.shape()) + " do not match the codec width");
    }
    // Canonical order (position, then label) so reductions run in the same
    // order whatever the input permutation.
    std::vector<std::int32_t> order(tokens.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
        const auto ia = static_cast<std::size_t>(a), ib = static_cast<std::size_t>(b);
        if (tokens.positions[ia] != tokens.positions[ib]) {
            return tokens.positions[ia] < tokens.positions[ib];
        }
        return tokens.labels[ia] < tokens.labels[ib];
    });
    const Tensor f = ops::gather_rows(tokens.features, order);

    const Tensor keys = ops::matmul(f, w_k_);
    const Tensor values = value2_(ops::gelu(value1_(f)));
    const Tensor q = ops::matmul(queries_, w_q_);
    Tensor x = ops::add(queries_, attn_out_(nn::multi_head_attention(q, keys, values, cfg_.heads)));

    const std::size_t width = cfg_.width();
    for (const auto& blk : blocks_) {
        const Tensor qkv = blk.qkv(blk.ln1(x));
        const Tensor a = nn::multi_head_attention(ops::narrow(qkv, 1, 0, width), ops::narrow(qkv, 1, width, width),
                                                  ops::narrow(qkv, 1, 2 * width, width), cfg_.heads);
        x = ops::add(x, blk.proj(a));
        x = ops::add(x, blk.fc2(ops::gelu(blk.fc1(blk.ln2(x)))));
    }
    return Triplane(cfg_.planes, out_(ln_out_(x)));
}

void CrossAttentionCodec::collect_encoder(nn::ParamList& out) const {
    out.push_back({"encoder.class_embedding", class_embedding_});
    out.push_back({"encoder.queries", queries_});
    out.push_back({"encoder.w_q", w_q_});
    out.push_back({"encoder.w_k", w_k_});
    value1_.collect("encoder.value1", out);
    value2_.collect("encoder.value2", out);
    attn_out_.collect("encoder.attn_out", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "encoder.block" + std::to_string(i);
        blocks_[i].ln1.collect(p + ".ln1", out);
        blocks_[i].qkv.collect(p + ".qkv", out);
        blocks_[i].proj.collect(p + ".proj", out);
        blocks_[i].ln2.collect(p + ".ln2", out);
        blocks_[i].fc1.collect(p + ".fc1", out);
        blocks_[i].fc2.collect(p + ".fc2", out);
    }
    ln_out_.collect("encoder.ln_out", out);
    out_.collect("encoder.out", out);
}

// -------------------------------------------------------- conv baseline

std::unique_ptr<ConvCodec> ConvCodec::create(const CodecConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (cfg.grid.x != 2 * cfg.planes.h || cfg.grid.y != 2 * cfg.planes.w || cfg.grid.z != 2 * cfg.planes.d) {
        throw ConfigError("conv baseline needs plane dims at exactly half the grid resolution");
    }
    Rng rng = make_stream(seed, "codec.init");
    auto codec = std::unique_ptr<ConvCodec>(new ConvCodec(cfg, Decoder::create(cfg, rng)));
    ConvCodec& c = *codec;
    const std::size_t e = cfg.class_embed, hid = cfg.conv_hidden;
    c.class_embedding_ = Tensor::randn({static_cast<std::size_t>(cfg.num_classes), e}, rng, 1.0);
    c.conv1_w_ = conv_weight(3, e, hid, rng);
    c.conv1_b_ = Tensor::zeros({hid});
    c.conv2_w_ = conv_weight(3, hid, hid, rng);
    c.conv2_b_ = Tensor::zeros({hid});
    c.proj_ = nn::Linear::create(hid, cfg.planes.c, rng);
    return codec;
}

Triplane ConvCodec::encode_grid(const VoxelGrid& grid) const {
    if (grid.dims() != cfg_.grid || grid.num_classes() != cfg_.num_classes) {
        throw ConfigError("grid layout does not match the codec configuration");
    }
    const auto& d = grid.dims();
    std::vector<std::int32_t> labels(grid.labels().begin(), grid.labels().end());
    Tensor x = ops::reshape(ops::gather_rows(class_embedding_, labels), {d.x, d.y, d.z, cfg_.class_embed});
    x = ops::gelu(ops::conv3d(x, conv1_w_, conv1_b_, 1, 1));
    x = ops::gelu(ops::conv3d(x, conv2_w_, conv2_b_, 2, 1));
    const auto& t = cfg_.planes;
    x = ops::reshape(proj_(ops::reshape(x, {t.h * t.w * t.d, cfg_.conv_hidden})), {t.h, t.w, t.d, t.c});
    return Triplane::from_planes(ops::mean_axis(x, 2), ops::mean_axis(x, 1), ops::mean_axis(x, 0));
}

void ConvCodec::collect_encoder(nn::ParamList& out) const {
    out.push_back({"encoder.class_embedding", class_embedding_});
    out.push_back({"encoder.conv1.weight", conv1_w_});
    out.push_back({"encoder.conv1.bias", conv1_b_});
    out.push_back({"encoder.conv2.weight", conv2_w_});
    out.push_back({"encoder.conv2.bias", conv2_b_});
    proj_.collect("encoder.proj", out);
}

std::unique_ptr<Codec> make_codec(const std::string& kind, const CodecConfig& cfg, std::uint64_t seed) {
    if (kind == "cross_attention") {
        return CrossAttentionCodec::create(cfg, seed);
    }
    if (kind == "conv_baseline") {
        return ConvCodec::create(cfg, seed);
    }
    throw ConfigError("unknown codec kind '" + kind + "'");
}

}  // namespace flowssc::codec
