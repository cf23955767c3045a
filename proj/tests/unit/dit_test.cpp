#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "flowssc/autograd.hpp"
#include "flowssc/dit.hpp"
#include "flowssc/error.hpp"
#include "flowssc/flow.hpp"
#include "flowssc/ops.hpp"
#include "gradcheck.hpp"

namespace flowssc::dit {
namespace {

DiTConfig micro_config() {
    DiTConfig cfg;
    cfg.planes = {4, 4, 2, 2};
    cfg.patch = 2;
    cfg.embed = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.freq_dims = 8;
    return cfg;
}

Triplane random_triplane(const TriplaneDims& dims, Rng& rng) {
    return Triplane(dims, Tensor::randn({dims.rows(), dims.c}, rng));
}

// Overwrites every parameter so the zero-initialized gates and head are live.
void randomize(const ShortcutDiT& net, std::uint64_t seed, double stddev = 0.2) {
    Rng rng(seed);
    for (auto p : net.parameters()) {
        p.tensor.assign(Tensor::randn(p.tensor.shape(), rng, stddev, p.tensor.dtype()));
    }
}

Tensor param(const nn::ParamList& params, const std::string& name) {
    for (const auto& p : params) {
        if (p.name == name) {
            return p.tensor;
        }
    }
    throw std::runtime_error("no parameter " + name);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    const auto va = a.values(), vb = b.values();
    double m = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) {
        m = std::max(m, std::abs(va[i] - vb[i]));
    }
    return m;
}

double l2_diff(const Tensor& a, const Tensor& b) {
    const auto va = a.values(), vb = b.values();
    double s = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) {
        s += (va[i] - vb[i]) * (va[i] - vb[i]);
    }
    return std::sqrt(s);
}

TEST(DiTLayout, DefaultTokenCount) {
    const DiTConfig cfg;
    EXPECT_EQ(cfg.tokens(), 96u);
    EXPECT_EQ(cfg.in_channels(), 32u);
}

TEST(DiTLayout, PatchifyRoundTrip) {
    const TriplaneDims dims{4, 6, 2, 3};
    std::vector<double> v(dims.numel());
    std::iota(v.begin(), v.end(), 0.0);
    const Tensor rows = Tensor::from_values({dims.rows(), dims.c}, v);
    const Tensor tokens = patchify(rows, dims, 2);
    EXPECT_EQ(tokens.shape(), (Shape{dims.rows() / 4, 12}));
    EXPECT_TRUE(same_values(unpatchify(tokens, dims, 2), rows));
}

TEST(DiTLayout, PatchifyGroupsSpatialNeighbours) {
    // Hand index: first xy token covers cells (0,0), (0,1), (1,0), (1,1).
    const TriplaneDims dims{4, 6, 2, 1};
    std::vector<double> v(dims.numel());
    std::iota(v.begin(), v.end(), 0.0);
    const Tensor tokens = patchify(Tensor::from_values({dims.rows(), 1}, v), dims, 2);
    EXPECT_EQ(tokens.at(0), 0.0);
    EXPECT_EQ(tokens.at(1), 1.0);
    EXPECT_EQ(tokens.at(2), 6.0);
    EXPECT_EQ(tokens.at(3), 7.0);
    // Token 1 is the next patch along y.
    EXPECT_EQ(tokens.at(4), 2.0);
    // The first xz token starts at row offset h*w.
    const std::size_t first_xz = (4 * 6) / 4;
    EXPECT_EQ(tokens.at(first_xz * 4), 24.0);
    EXPECT_EQ(tokens.at(first_xz * 4 + 2), 26.0);
}

TEST(DiTLayout, IndivisibleDimsThrow) {
    const TriplaneDims dims{4, 6, 3, 2};
    const Tensor rows = Tensor::zeros({dims.rows(), dims.c});
    EXPECT_THROW(patchify(rows, dims, 2), ConfigError);
    DiTConfig cfg;
    cfg.planes = dims;
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_THROW(ShortcutDiT::create(cfg, 0), ConfigError);
}

TEST(DiTLayout, ValidMaskCoversEveryRow) {
    const DiTConfig cfg;
    const ValidMask m = valid_mask(cfg);
    EXPECT_EQ(m.size(), cfg.planes.rows());
    EXPECT_TRUE(m.all());
}

TEST(DiTLayout, ComposedCornerIsEmpty) {
    const TriplaneDims dims{4, 6, 2, 3};
    const ComposedLayout layout = composed_layout(dims);
    EXPECT_EQ(layout.height, 6u);
    EXPECT_EQ(layout.width, 8u);
    EXPECT_EQ(layout.mask.count(), dims.rows());
    for (std::size_t r = 0; r < layout.height; ++r) {
        for (std::size_t s = 0; s < layout.width; ++s) {
            const bool corner = r >= dims.h && s >= dims.w;
            EXPECT_EQ(layout.mask.rows[r * layout.width + s], corner ? 0 : 1) << r << "," << s;
        }
    }
}

TEST(DiTLayout, ComposeDecomposeRoundTrip) {
    const TriplaneDims dims{4, 6, 2, 3};
    Rng rng(5);
    const Triplane h = random_triplane(dims, rng);
    const Tensor composed = compose(h);
    EXPECT_EQ(composed.shape(), (Shape{6 * 8, 3}));
    EXPECT_TRUE(same_values(decompose(composed, dims).data(), h.data()));
    // yz is transposed below xy: composed (h + z, y) holds yz cell (y, z).
    const std::size_t y = 5, z = 1;
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_EQ(composed.at(((4 + z) * 8 + y) * 3 + c),
                  h.data().at((dims.row_offset(Plane::yz) + y * dims.d + z) * 3 + c));
    }
}

TEST(DiTLayout, MaskedLossIgnoresTheEmptyCorner) {
    const TriplaneDims dims{4, 6, 2, 1};
    Rng rng(6);
    const Tensor target = compose(random_triplane(dims, rng));
    std::vector<double> pv = target.values();
    const ComposedLayout layout = composed_layout(dims);
    for (std::size_t i = 0; i < pv.size(); ++i) {
        if (!layout.mask.rows[i]) {
            pv[i] += 10.0;
        }
    }
    const std::size_t n = pv.size();
    const Tensor pred = Tensor::from_values({1, n}, pv);
    const Tensor flat_target = ops::reshape(target, {1, n});
    const Tensor mask = ops::reshape(layout.mask.column(), {1, n});
    EXPECT_EQ(flow::masked_mse(pred, flat_target, mask).item(), 0.0);
    EXPECT_GT(flow::masked_mse(pred, flat_target).item(), 0.0);
}

TEST(DiTBlocks, AdaLnWithUnitScaleIsLayerNorm) {
    Rng rng(1);
    const Tensor z = Tensor::randn({5, 8}, rng);
    const Tensor out = adaln_modulate(z, Tensor::full({1, 8}, 1.0), Tensor::zeros({1, 8}));
    // Hand LayerNorm with eps 1e-6.
    const auto v = z.values();
    for (std::size_t i = 0; i < 5; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < 8; ++j) {
            mean += v[i * 8 + j] / 8.0;
        }
        for (std::size_t j = 0; j < 8; ++j) {
            var += (v[i * 8 + j] - mean) * (v[i * 8 + j] - mean) / 8.0;
        }
        for (std::size_t j = 0; j < 8; ++j) {
            EXPECT_NEAR(out.at(i * 8 + j), (v[i * 8 + j] - mean) / std::sqrt(var + 1e-6), 1e-5);
        }
    }
}

TEST(DiTBlocks, AdaLnAppliesScaleAndShift) {
    Rng rng(2);
    const Tensor z = Tensor::randn({3, 4}, rng);
    const Tensor g = Tensor::from_values({1, 4}, {0.5, 2.0, -1.0, 3.0});
    const Tensor b = Tensor::from_values({1, 4}, {1.0, 0.0, -2.0, 0.25});
    const Tensor ln = ops::layer_norm(z, 1e-6);
    const Tensor out = adaln_modulate(z, g, b);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            EXPECT_NEAR(out.at(i * 4 + j), ln.at(i * 4 + j) * g.at(j) + b.at(j), 1e-6);
        }
    }
}

TEST(ShortcutDiT, OutputIsZeroAtInit) {
    const DiTConfig cfg;
    const ShortcutDiT net = ShortcutDiT::create(cfg, 3);
    Rng rng(4);
    const Triplane out = net.forward(random_triplane(cfg.planes, rng), random_triplane(cfg.planes, rng), 0.4, 0.25);
    EXPECT_EQ(out.dims(), cfg.planes);
    for (double v : out.data().values()) {
        ASSERT_EQ(v, 0.0);
    }
}

TEST(ShortcutDiT, ZeroGatesLeaveTheTokenStreamUntouched) {
    // With zero modulation every block is the identity, so the output is
    // head(LayerNorm(patch_embed(tokens) + pos)). Rebuilt here by hand.
    DTypeScope f64(DType::f64);
    const DiTConfig cfg = micro_config();
    const ShortcutDiT net = ShortcutDiT::create(cfg, 7);
    const auto params = net.parameters();
    Rng rng(8);
    param(params, "dit.head.weight").assign(Tensor::randn({cfg.embed, 4 * cfg.planes.c}, rng));
    param(params, "dit.head.bias").assign(Tensor::randn({4 * cfg.planes.c}, rng));
    const Triplane h = random_triplane(cfg.planes, rng), cond = random_triplane(cfg.planes, rng);
    const Triplane out = net.forward(h, cond, 0.3, 0.5);

    const TriplaneDims& dims = cfg.planes;
    const std::size_t c = dims.c, in = 2 * c, e = cfg.embed;
    const auto hv = h.data().values(), cv = cond.data().values();
    const auto pw = param(params, "dit.patch_embed.weight").values();
    const auto pb = param(params, "dit.patch_embed.bias").values();
    const auto hw = param(params, "dit.head.weight").values();
    const auto hb = param(params, "dit.head.bias").values();
    std::vector<double> pos;
    for (const char* n : {"dit.pos_embed.xy", "dit.pos_embed.xz", "dit.pos_embed.yz"}) {
        const auto v = param(params, n).values();
        pos.insert(pos.end(), v.begin(), v.end());
    }
    std::vector<double> expected(dims.numel(), 0.0);
    std::size_t token = 0;
    for (Plane p : {Plane::xy, Plane::xz, Plane::yz}) {
        const auto [a, b] = dims.extent(p);
        for (std::size_t i = 0; i < a; i += 2) {
            for (std::size_t j = 0; j < b; j += 2, ++token) {
                std::vector<std::size_t> cells;
                for (std::size_t u = 0; u < 2; ++u) {
                    for (std::size_t v = 0; v < 2; ++v) {
                        cells.push_back(dims.row_offset(p) + (i + u) * b + (j + v));
                    }
                }
                std::vector<double> z(e);
                for (std::size_t k = 0; k < e; ++k) {
                    double s = pb[k] + pos[token * e + k];
                    for (std::size_t q = 0; q < 4; ++q) {
                        for (std::size_t ch = 0; ch < in; ++ch) {
                            const double x = ch < c ? hv[cells[q] * c + ch] : cv[cells[q] * c + ch - c];
                            s += x * pw[(q * in + ch) * e + k];
                        }
                    }
                    z[k] = s;
                }
                double mean = 0.0, var = 0.0;
                for (double v : z) {
                    mean += v / static_cast<double>(e);
                }
                for (double v : z) {
                    var += (v - mean) * (v - mean) / static_cast<double>(e);
                }
                for (double& v : z) {
                    v = (v - mean) / std::sqrt(var + 1e-6);
                }
                for (std::size_t q = 0; q < 4; ++q) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        double s = hb[q * c + ch];
                        for (std::size_t k = 0; k < e; ++k) {
                            s += z[k] * hw[k * 4 * c + q * c + ch];
                        }
                        expected[cells[q] * c + ch] = s;
                    }
                }
            }
        }
    }
    const auto got = out.data().values();
    for (std::size_t i = 0; i < got.size(); ++i) {
        EXPECT_NEAR(got[i], expected[i], 1e-10) << i;
    }
}

TEST(ShortcutDiT, TimeAndStepEmbeddingsAreSeparate) {
    const ShortcutDiT net = ShortcutDiT::create(DiTConfig{}, 9);
    const Tensor a = net.embed_time_step(0.25, 0.5);
    const Tensor b = net.embed_time_step(0.5, 0.25);
    EXPECT_GT(max_abs_diff(a, b), 1e-3);
    EXPECT_TRUE(same_values(a, net.embed_time_step(0.25, 0.5)));
}

TEST(ShortcutDiT, DeterministicForAFixedSeed) {
    const DiTConfig cfg = micro_config();
    const ShortcutDiT a = ShortcutDiT::create(cfg, 11), b = ShortcutDiT::create(cfg, 11);
    const ShortcutDiT c = ShortcutDiT::create(cfg, 12);
    EXPECT_EQ(nn::checksum(a.parameters()), nn::checksum(b.parameters()));
    EXPECT_NE(nn::checksum(a.parameters()), nn::checksum(c.parameters()));
    randomize(a, 1);
    randomize(b, 1);
    Rng rng(13);
    const Triplane h = random_triplane(cfg.planes, rng), cond = random_triplane(cfg.planes, rng);
    EXPECT_TRUE(same_values(a.forward(h, cond, 0.3, 0.125).data(), b.forward(h, cond, 0.3, 0.125).data()));
}

TEST(ShortcutDiT, RespondsToStepSize) {
    const DiTConfig cfg = micro_config();
    const ShortcutDiT net = ShortcutDiT::create(cfg, 14);
    randomize(net, 2);
    Rng rng(15);
    const Triplane h = random_triplane(cfg.planes, rng), cond = random_triplane(cfg.planes, rng);
    const Tensor base = net.forward(h, cond, 0.25, 0.0).data();
    for (double d : {1.0 / 128, 0.125, 0.5}) {
        EXPECT_GT(max_abs_diff(base, net.forward(h, cond, 0.25, d).data()), 1e-4) << d;
    }
}

TEST(ShortcutDiT, SmoothInTime) {
    DTypeScope f64(DType::f64);
    const DiTConfig cfg = micro_config();
    const ShortcutDiT net = ShortcutDiT::create(cfg, 16);
    randomize(net, 3);
    Rng rng(17);
    const Triplane h = random_triplane(cfg.planes, rng), cond = random_triplane(cfg.planes, rng);
    const double t = 0.4, eps = 1e-3;
    const Tensor at = net.forward(h, cond, t, 0.25).data();
    const double full = l2_diff(net.forward(h, cond, t + eps, 0.25).data(), at);
    const double half = l2_diff(net.forward(h, cond, t + eps / 2, 0.25).data(), at);
    ASSERT_GT(half, 0.0);
    // First-order change: halving the step halves the response.
    EXPECT_NEAR(full / half, 2.0, 0.25);
    EXPECT_LT(full / eps, 1e4);
}

TEST(ShortcutDiT, GradientsMatchCentralDifferences) {
    DTypeScope f64(DType::f64);
    const DiTConfig cfg = micro_config();
    const ShortcutDiT net = ShortcutDiT::create(cfg, 18);
    randomize(net, 4, 0.3);
    const auto params = net.parameters();
    Rng rng(19);
    const Tensor w = Tensor::randn({cfg.planes.rows(), cfg.planes.c}, rng);
    auto f = [&](const std::vector<Tensor>& in) {
        const Triplane out = net.forward(Triplane(cfg.planes, in[0]), Triplane(cfg.planes, in[1]), 0.3, 0.125);
        return testing::project(out.data(), w);
    };
    std::vector<Tensor> inputs{Tensor::randn({cfg.planes.rows(), cfg.planes.c}, rng),
                               Tensor::randn({cfg.planes.rows(), cfg.planes.c}, rng)};
    for (const char* n : {"dit.block0.modulation.weight", "dit.block0.qkv.weight", "dit.t_embed.l1.weight",
                          "dit.d_embed.l2.bias", "dit.pos_embed.xz", "dit.final_modulation.weight",
                          "dit.head.weight"}) {
        inputs.push_back(param(params, n));
    }
    const auto r = testing::grad_check(f, inputs, 1e-5);
    EXPECT_LT(r.max_rel_err, 1e-3);
}

TEST(ShortcutDiT, ParamCountMatchesTheModule) {
    for (DiTConfig cfg : {DiTConfig{}, micro_config()}) {
        EXPECT_EQ(param_count(cfg), nn::count_elements(ShortcutDiT::create(cfg, 0).parameters()));
    }
    DiTConfig a, b;
    b.depth = 2 * a.depth;
    const std::size_t e = a.embed, hid = a.mlp_ratio * e;
    const std::size_t per_block = (e * 6 * e + 6 * e) + (e * 3 * e + 3 * e) + (e * e + e) + (e * hid + hid) +
                                  (hid * e + e);
    EXPECT_EQ(param_count(b) - param_count(a), a.depth * per_block);
}

TEST(ShortcutDiT, RejectsMismatchedTriplanes) {
    const DiTConfig cfg = micro_config();
    const ShortcutDiT net = ShortcutDiT::create(cfg, 20);
    const TriplaneDims other{4, 4, 2, 3};
    EXPECT_THROW(net.forward(Triplane::zeros(other), Triplane::zeros(cfg.planes), 0.1, 0.0), ShapeError);
    EXPECT_THROW(net.forward(Triplane::zeros(cfg.planes), Triplane::zeros(other), 0.1, 0.0), ShapeError);
    const auto v = net.velocity(Triplane::zeros(cfg.planes));
    const std::vector<double> t{0.0};
    EXPECT_THROW(v(Tensor::zeros({1, 5}), t, t), ShapeError);
}

TEST(ShortcutDiT, VelocityAdapterMatchesForwardPerRow) {
    const DiTConfig cfg = micro_config();
    const ShortcutDiT net = ShortcutDiT::create(cfg, 21);
    randomize(net, 5);
    Rng rng(22);
    const Triplane cond = random_triplane(cfg.planes, rng);
    const std::size_t f = cfg.planes.numel();
    const Tensor x = Tensor::randn({2, f}, rng);
    const std::vector<double> t{0.25, 0.75}, d{0.0, 0.125};
    const Tensor v = net.velocity(cond)(x, t, d);
    ASSERT_EQ(v.shape(), (Shape{2, f}));
    for (std::size_t i = 0; i < 2; ++i) {
        const Triplane hi(cfg.planes, ops::reshape(ops::narrow(x, 0, i, 1), {cfg.planes.rows(), cfg.planes.c}));
        const auto ref = net.forward(hi, cond, t[i], d[i]).data().values();
        for (std::size_t j = 0; j < f; ++j) {
            ASSERT_EQ(v.at(i * f + j), ref[j]);
        }
    }
    const Tensor m = net.feature_mask();
    EXPECT_EQ(m.shape(), (Shape{1, f}));
    EXPECT_EQ(ops::sum(m).item(), static_cast<double>(f));
}

}  // namespace
}  // namespace flowssc::dit
