#include "flowssc/dit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flowssc/error.hpp"
#include "flowssc/ops.hpp"
#include "flowssc/rng.hpp"

namespace flowssc::dit {

namespace {

constexpr Plane kPlanes[] = {Plane::xy, Plane::xz, Plane::yz};

// Flat source index (into [rows x ch]) of every token feature, in token order.
std::vector<std::size_t> patch_map(const TriplaneDims& dims, std::size_t patch, std::size_t ch) {
    std::vector<std::size_t> map;
    map.reserve(dims.rows() * ch);
    for (Plane p : kPlanes) {
        const auto [a, b] = dims.extent(p);
        const std::size_t off = dims.row_offset(p);
        for (std::size_t i = 0; i < a / patch; ++i) {
            for (std::size_t j = 0; j < b / patch; ++j) {
                for (std::size_t u = 0; u < patch; ++u) {
                    for (std::size_t v = 0; v < patch; ++v) {
                        const std::size_t row = off + (i * patch + u) * b + (j * patch + v);
                        for (std::size_t c = 0; c < ch; ++c) {
                            map.push_back(row * ch + c);
                        }
                    }
                }
            }
        }
    }
    return map;
}

std::vector<std::size_t> invert(const std::vector<std::size_t>& map) {
    std::vector<std::size_t> inv(map.size());
    for (std::size_t i = 0; i < map.size(); ++i) {
        inv[map[i]] = i;
    }
    return inv;
}

void check_patchable(const TriplaneDims& dims, std::size_t patch) {
    if (patch == 0 || dims.h % patch != 0 || dims.w % patch != 0 || dims.d % patch != 0) {
        throw ConfigError("plane dims " + std::to_string(dims.h) + "x" + std::to_string(dims.w) + "x" +
                          std::to_string(dims.d) + " are not divisible by patch size " + std::to_string(patch));
    }
}

// Composed-image cell -> triplane row, or dims.rows() for the empty corner.
std::vector<std::size_t> composed_rows(const TriplaneDims& dims) {
    const std::size_t height = dims.h + dims.d, width = dims.w + dims.d;
    std::vector<std::size_t> rows(height * width);
    for (std::size_t r = 0; r < height; ++r) {
        for (std::size_t s = 0; s < width; ++s) {
            std::size_t src = dims.rows();
            if (r < dims.h && s < dims.w) {
                src = dims.row_offset(Plane::xy) + r * dims.w + s;
            } else if (r < dims.h) {
                src = dims.row_offset(Plane::xz) + r * dims.d + (s - dims.w);
            } else if (s < dims.w) {
                src = dims.row_offset(Plane::yz) + s * dims.d + (r - dims.h);
            }
            rows[r * width + s] = src;
        }
    }
    return rows;
}

}  // namespace

std::size_t DiTConfig::tokens() const {
    return (planes.h * planes.w + planes.h * planes.d + planes.w * planes.d) / (patch * patch);
}

void DiTConfig::validate() const {
    check_patchable(planes, patch);
    if (planes.c == 0 || embed == 0 || depth == 0 || mlp_ratio == 0) {
        throw ConfigError("DiT sizes must be positive");
    }
    if (heads == 0 || embed % heads != 0) {
        throw ConfigError("DiT head count must divide the embed dim " + std::to_string(embed));
    }
    if (freq_dims < 2 || freq_dims % 2 != 0) {
        throw ConfigError("DiT timestep feature dims must be even");
    }
}

std::size_t ValidMask::count() const { return static_cast<std::size_t>(std::count(rows.begin(), rows.end(), 1)); }

Tensor ValidMask::column(DType dtype) const {
    std::vector<double> v(rows.begin(), rows.end());
    return Tensor::from_values({rows.size(), 1}, v, dtype);
}

ValidMask valid_mask(const DiTConfig& cfg) { return ValidMask{std::vector<std::uint8_t>(cfg.planes.rows(), 1)}; }

ComposedLayout composed_layout(const TriplaneDims& dims) {
    ComposedLayout layout;
    layout.height = dims.h + dims.d;
    layout.width = dims.w + dims.d;
    for (std::size_t src : composed_rows(dims)) {
        layout.mask.rows.push_back(src < dims.rows() ? 1 : 0);
    }
    return layout;
}

Tensor compose(const Triplane& h) {
    const TriplaneDims& dims = h.dims();
    const std::size_t c = dims.c;
    // Append one zero row for the corner cells to gather from.
    const Tensor padded = ops::concat({h.data(), Tensor::zeros({1, c}, h.data().dtype())}, 0);
    const auto rows = composed_rows(dims);
    std::vector<std::size_t> idx;
    idx.reserve(rows.size() * c);
    for (std::size_t r : rows) {
        for (std::size_t k = 0; k < c; ++k) {
            idx.push_back(r * c + k);
        }
    }
    return ops::index_select_flat(padded, idx, {rows.size(), c});
}

Triplane decompose(const Tensor& composed, const TriplaneDims& dims) {
    const auto rows = composed_rows(dims);
    if (composed.rank() != 2 || composed.dim(0) != rows.size() || composed.dim(1) != dims.c) {
        throw ShapeError("composed triplane " + shape_string(composed.shape()) + " does not match the plane dims");
    }
    std::vector<std::size_t> idx(dims.numel());
    for (std::size_t cell = 0; cell < rows.size(); ++cell) {
        if (rows[cell] < dims.rows()) {
            for (std::size_t k = 0; k < dims.c; ++k) {
                idx[rows[cell] * dims.c + k] = cell * dims.c + k;
            }
        }
    }
    return Triplane(dims, ops::index_select_flat(composed, idx, {dims.rows(), dims.c}));
}

Tensor patchify(const Tensor& rows, const TriplaneDims& dims, std::size_t patch) {
    check_patchable(dims, patch);
    if (rows.rank() != 2 || rows.dim(0) != dims.rows()) {
        throw ShapeError("patchify: " + shape_string(rows.shape()) + " is not a triplane row layout");
    }
    const std::size_t ch = rows.dim(1);
    const std::size_t tokens = dims.rows() / (patch * patch);
    return ops::index_select_flat(rows, patch_map(dims, patch, ch), {tokens, patch * patch * ch});
}

Tensor unpatchify(const Tensor& tokens, const TriplaneDims& dims, std::size_t patch) {
    check_patchable(dims, patch);
    const std::size_t n = dims.rows() / (patch * patch);
    if (tokens.rank() != 2 || tokens.dim(0) != n || tokens.dim(1) % (patch * patch) != 0) {
        throw ShapeError("unpatchify: " + shape_string(tokens.shape()) + " does not match the token layout");
    }
    const std::size_t ch = tokens.dim(1) / (patch * patch);
    return ops::index_select_flat(tokens, invert(patch_map(dims, patch, ch)), {dims.rows(), ch});
}

Tensor adaln_modulate(const Tensor& z, const Tensor& gamma, const Tensor& beta) {
    return ops::add(ops::mul(ops::layer_norm(z, 1e-6), gamma), beta);
}

Tensor timestep_features(double value, std::size_t dims, DType dtype) {
    return nn::sinusoidal_features(std::span<const double>(&value, 1), dims, dtype);
}

ShortcutDiT ShortcutDiT::create(const DiTConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng = make_stream(seed, "dit.init");
    ShortcutDiT net;
    net.cfg_ = cfg;
    const std::size_t e = cfg.embed, p2 = cfg.patch * cfg.patch;
    net.patch_embed_ = nn::Linear::create(p2 * cfg.in_channels(), e, rng);
    for (Plane p : kPlanes) {
        const auto [a, b] = cfg.planes.extent(p);
        net.pos_embed_.push_back(Tensor::randn({a * b / p2, e}, rng, 0.02));
    }
    for (ScalarEmbed* s : {&net.t_embed_, &net.d_embed_}) {
        s->l1 = nn::Linear::create(cfg.freq_dims, e, rng);
        s->l2 = nn::Linear::create(e, e, rng);
    }
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        Block blk;
        blk.modulation = nn::Linear::zeros(e, 6 * e);
        blk.qkv = nn::Linear::create(e, 3 * e, rng);
        blk.proj = nn::Linear::create(e, e, rng);
        blk.fc1 = nn::Linear::create(e, cfg.mlp_ratio * e, rng, 2.0);
        blk.fc2 = nn::Linear::create(cfg.mlp_ratio * e, e, rng);
        net.blocks_.push_back(std::move(blk));
    }
    net.final_modulation_ = nn::Linear::zeros(e, 2 * e);
    net.head_ = nn::Linear::zeros(e, p2 * cfg.planes.c);
    net.mask_ = valid_mask(cfg);
    return net;
}

ShortcutDiT ShortcutDiT::clone() const {
    DTypeScope scope(patch_embed_.weight.dtype());
    ShortcutDiT copy = create(cfg_, 0);
    const auto src = parameters();
    const auto dst = copy.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
        Tensor t = dst[i].tensor;
        t.assign(src[i].tensor);
    }
    return copy;
}

Tensor ShortcutDiT::embed_scalar(const ScalarEmbed& e, double value) const {
    const Tensor f = timestep_features(value, cfg_.freq_dims, e.l1.weight.dtype());
    return e.l2(ops::silu(e.l1(f)));
}

Tensor ShortcutDiT::embed_time_step(double t, double d) const {
    return ops::add(embed_scalar(t_embed_, t), embed_scalar(d_embed_, d));
}

Triplane ShortcutDiT::forward(const Triplane& h_t, const Triplane& cond, double t, double d) const {
    if (h_t.dims() != cfg_.planes || cond.dims() != cfg_.planes) {
        throw ShapeError("DiT inputs must match the configured plane dims");
    }
    const std::size_t e = cfg_.embed;
    auto chunk = [e](const Tensor& m, std::size_t i) { return ops::narrow(m, 1, i * e, e); };

    const Tensor tokens = patchify(ops::concat({h_t.data(), cond.data()}, 1), cfg_.planes, cfg_.patch);
    Tensor z = ops::add(patch_embed_(tokens), ops::concat(pos_embed_, 0));
    const Tensor c = ops::silu(embed_time_step(t, d));

    for (const auto& blk : blocks_) {
        const Tensor m = blk.modulation(c);
        const Tensor qkv = blk.qkv(adaln_modulate(z, ops::add_scalar(chunk(m, 1), 1.0), chunk(m, 0)));
        const Tensor a = nn::multi_head_attention(ops::narrow(qkv, 1, 0, e), ops::narrow(qkv, 1, e, e),
                                                  ops::narrow(qkv, 1, 2 * e, e), cfg_.heads);
        z = ops::add(z, ops::mul(chunk(m, 2), blk.proj(a)));
        const Tensor hin = adaln_modulate(z, ops::add_scalar(chunk(m, 4), 1.0), chunk(m, 3));
        z = ops::add(z, ops::mul(chunk(m, 5), blk.fc2(ops::gelu(blk.fc1(hin)))));
    }
    const Tensor fm = final_modulation_(c);
    const Tensor out = head_(adaln_modulate(z, ops::add_scalar(chunk(fm, 1), 1.0), chunk(fm, 0)));
    Tensor rows = unpatchify(out, cfg_.planes, cfg_.patch);
    if (!mask_.all()) {
        rows = ops::mul(rows, mask_.column(rows.dtype()));
    }
    return Triplane(cfg_.planes, rows);
}

flow::VelocityFn ShortcutDiT::velocity(const Triplane& cond) const {
    return [this, cond](const Tensor& x, std::span<const double> t, std::span<const double> d) {
        const TriplaneDims& dims = cfg_.planes;
        if (x.rank() != 2 || x.dim(1) != dims.numel() || t.size() != x.dim(0) || d.size() != x.dim(0)) {
            throw ShapeError("DiT velocity: state " + shape_string(x.shape()) + " is not [N x " +
                             std::to_string(dims.numel()) + "]");
        }
        std::vector<Tensor> rows;
        for (std::size_t i = 0; i < x.dim(0); ++i) {
            const Tensor xi = x.dim(0) == 1 ? x : ops::narrow(x, 0, i, 1);
            const Triplane h(dims, ops::reshape(xi, {dims.rows(), dims.c}));
            rows.push_back(ops::reshape(forward(h, cond, t[i], d[i]).data(), {1, dims.numel()}));
        }
        return rows.size() == 1 ? rows.front() : ops::concat(rows, 0);
    };
}

Tensor ShortcutDiT::feature_mask(DType dtype) const {
    std::vector<double> v;
    v.reserve(cfg_.planes.numel());
    for (auto r : mask_.rows) {
        v.insert(v.end(), cfg_.planes.c, static_cast<double>(r));
    }
    return Tensor::from_values({1, v.size()}, v, dtype);
}

nn::ParamList ShortcutDiT::parameters() const {
    nn::ParamList out;
    patch_embed_.collect("dit.patch_embed", out);
    const char* names[] = {"xy", "xz", "yz"};
    for (std::size_t i = 0; i < pos_embed_.size(); ++i) {
        out.push_back({std::string("dit.pos_embed.") + names[i], pos_embed_[i]});
    }
    t_embed_.l1.collect("dit.t_embed.l1", out);
    t_embed_.l2.collect("dit.t_embed.l2", out);
    d_embed_.l1.collect("dit.d_embed.l1", out);
    d_embed_.l2.collect("dit.d_embed.l2", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "dit.block" + std::to_string(i);
        blocks_[i].modulation.collect(p + ".modulation", out);
        blocks_[i].qkv.collect(p + ".qkv", out);
        blocks_[i].proj.collect(p + ".proj", out);
        blocks_[i].fc1.collect(p + ".fc1", out);
        blocks_[i].fc2.collect(p + ".fc2", out);
    }
    final_modulation_.collect("dit.final_modulation", out);
    head_.collect("dit.head", out);
    return out;
}

std::size_t param_count(const DiTConfig& cfg) {
    const std::size_t e = cfg.embed, p2 = cfg.patch * cfg.patch, hid = cfg.mlp_ratio * e;
    auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };
    std::size_t n = linear(p2 * cfg.in_channels(), e) + cfg.tokens() * e;
    n += 2 * (linear(cfg.freq_dims, e) + linear(e, e));
    n += cfg.depth * (linear(e, 6 * e) + linear(e, 3 * e) + linear(e, e) + linear(e, hid) + linear(hid, e));
    n += linear(e, 2 * e) + linear(e, p2 * cfg.planes.c);
    return n;
}

}  // namespace flowssc::dit
