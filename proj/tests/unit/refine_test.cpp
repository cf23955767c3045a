#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "flowssc/autograd.hpp"
#include "flowssc/error.hpp"
#include "flowssc/metrics.hpp"
#include "flowssc/ops.hpp"
#include "flowssc/refine.hpp"

namespace flowssc::refine {
namespace {

constexpr int kClasses = 5;

codec::CodecConfig micro_codec() {
    codec::CodecConfig cfg;
    cfg.grid = {8, 8, 4};
    cfg.num_classes = kClasses;
    cfg.planes = {4, 4, 2, 6};
    cfg.fourier_bands = 4;
    cfg.class_embed = 8;
    cfg.value_hidden = 16;
    cfg.decoder_hidden = 16;
    cfg.conv_hidden = 8;
    cfg.self_blocks = 1;
    return cfg;
}

dit::DiTConfig micro_dit() {
    dit::DiTConfig cfg;
    cfg.planes = micro_codec().planes;
    cfg.patch = 2;
    cfg.embed = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.freq_dims = 8;
    return cfg;
}

VoxelGrid random_grid(Rng& rng) {
    const GridDims dims = micro_codec().grid;
    std::vector<std::uint8_t> labels(dims.total());
    for (auto& l : labels) {
        l = uniform_index(rng, 2) == 0 ? 0 : static_cast<std::uint8_t>(1 + uniform_index(rng, kClasses - 1));
    }
    return VoxelGrid(dims, kClasses, labels);
}

std::vector<scene::Record> random_records(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<scene::Record> out;
    for (std::size_t i = 0; i < n; ++i) {
        VoxelGrid gt = random_grid(rng);
        std::vector<std::uint8_t> coarse(gt.labels().begin(), gt.labels().end());
        for (std::size_t v = 0; v < coarse.size(); v += 3) {
            coarse[v] = 0;
        }
        out.push_back({gt, VoxelGrid(gt.dims(), kClasses, coarse)});
    }
    return out;
}

Triplane random_triplane(const TriplaneDims& dims, Rng& rng, double scale, double offset) {
    return Triplane(dims, ops::add_scalar(Tensor::randn({dims.rows(), dims.c}, rng, scale), offset));
}

std::vector<LatentPair> random_pairs(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<LatentPair> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back({random_triplane(micro_dit().planes, rng, 1.0, 0.0), random_triplane(micro_dit().planes, rng, 1.0, 0.0)});
    }
    return out;
}

void randomize(const dit::ShortcutDiT& net, std::uint64_t seed, double stddev) {
    Rng rng(seed);
    for (auto p : net.parameters()) {
        p.tensor.assign(Tensor::randn(p.tensor.shape(), rng, stddev, p.tensor.dtype()));
    }
}

TEST(LatentStats, FitMatchesPerChannelMoments) {
    DTypeScope scope(DType::f64);
    const TriplaneDims dims{2, 2, 2, 2};
    Rng rng(1);
    std::vector<Triplane> hs{random_triplane(dims, rng, 2.0, 3.0), random_triplane(dims, rng, 0.5, -1.0)};
    const LatentStats s = LatentStats::fit(hs);
    for (std::size_t c = 0; c < 2; ++c) {
        std::vector<double> col;
        for (const auto& h : hs) {
            const auto v = h.data().values();
            for (std::size_t i = c; i < v.size(); i += 2) {
                col.push_back(v[i]);
            }
        }
        const double mean = std::accumulate(col.begin(), col.end(), 0.0) / static_cast<double>(col.size());
        double var = 0.0;
        for (double x : col) {
            var += (x - mean) * (x - mean);
        }
        EXPECT_NEAR(s.mean[c], mean, 1e-12);
        EXPECT_NEAR(s.stddev[c], std::sqrt(var / static_cast<double>(col.size())), 1e-12);
    }
}

TEST(LatentStats, NormalizedTargetsAreStandardAndRoundTrip) {
    DTypeScope scope(DType::f64);
    Rng rng(2);
    const TriplaneDims dims{4, 4, 2, 3};
    std::vector<LatentPair> pairs;
    for (int i = 0; i < 4; ++i) {
        pairs.push_back({random_triplane(dims, rng, 3.0, 5.0), random_triplane(dims, rng, 1.0, 0.0)});
    }
    const auto original = pairs;
    const LatentStats s = normalize_pairs(pairs);
    std::vector<Triplane> normalized;
    for (const auto& p : pairs) {
        normalized.push_back(p.gt);
    }
    const LatentStats again = LatentStats::fit(normalized);
    for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_NEAR(again.mean[c], 0.0, 1e-12);
        EXPECT_NEAR(again.stddev[c], 1.0, 1e-12);
    }
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto back = s.denormalize(pairs[i].coarse).data().values();
        const auto ref = original[i].coarse.data().values();
        for (std::size_t k = 0; k < ref.size(); ++k) {
            EXPECT_NEAR(back[k], ref[k], 1e-12);
        }
    }
    const LatentStats id = LatentStats::identity(3);
    EXPECT_TRUE(same_values(id.normalize(original[0].gt).data(), original[0].gt.data()));
    EXPECT_THROW(LatentStats::identity(2).normalize(original[0].gt), ShapeError);
    EXPECT_THROW(LatentStats::fit({}), DataError);
}

TEST(FlowTrainer, SameSeedSameParameters) {
    const auto pairs = random_pairs(4, 3);
    FlowTrainConfig cfg;
    cfg.iterations = 6;
    cfg.batch = 3;
    cfg.seed = 11;
    auto run = [&](std::uint64_t seed) {
        auto net = dit::ShortcutDiT::create(micro_dit(), 5);
        FlowTrainConfig c = cfg;
        c.seed = seed;
        FlowTrainer tr(net, c);
        tr.run(pairs, 100);
        EXPECT_EQ(tr.iteration(), 6u);
        return nn::checksum(net.parameters());
    };
    const auto a = run(11);
    EXPECT_EQ(a, run(11));
    EXPECT_NE(a, run(12));
}

TEST(FlowTrainer, FlowMatchingLossDecreases) {
    const auto pairs = random_pairs(2, 4);
    auto net = dit::ShortcutDiT::create(micro_dit(), 1);
    FlowTrainConfig cfg;
    cfg.iterations = 400;
    cfg.batch = 4;
    cfg.lr = 3e-3;
    cfg.min_lr = 3e-4;
    cfg.warmup = 20;
    FlowTrainer tr(net, cfg);
    double head = 0.0, tail = 0.0;
    std::size_t nh = 0, nt = 0;
    tr.run(pairs, cfg.iterations, [&](const FlowLogRow& r) {
        EXPECT_TRUE(std::isfinite(r.total));
        EXPECT_EQ(r.fm_rows + r.sc_rows, cfg.batch);
        if (r.fm_rows == 0) {
            return;
        }
        if (r.iteration < 50) {
            head += r.fm;
            ++nh;
        } else if (r.iteration >= 350) {
            tail += r.fm;
            ++nt;
        }
    });
    EXPECT_LT(tail / static_cast<double>(nt), 0.8 * head / static_cast<double>(nh));
}

TEST(FlowTrainer, EmaTargetBlendsParameters) {
    const auto pairs = random_pairs(2, 6);
    auto net = dit::ShortcutDiT::create(micro_dit(), 2);
    randomize(net, 3, 0.1);
    const auto before = net.clone();
    FlowTrainConfig cfg;
    cfg.iterations = 1;
    cfg.batch = 2;
    cfg.target_ema = 0.75;
    FlowTrainer tr(net, cfg);
    ASSERT_NE(tr.target(), nullptr);
    tr.step(pairs);
    const auto now = net.parameters(), old = before.parameters(), tgt = tr.target()->parameters();
    for (std::size_t i = 0; i < now.size(); ++i) {
        const auto a = old[i].tensor.values(), b = now[i].tensor.values(), t = tgt[i].tensor.values();
        for (std::size_t k = 0; k < a.size(); ++k) {
            ASSERT_NEAR(t[k], 0.75 * a[k] + 0.25 * b[k], 1e-6) << now[i].name;
        }
    }
    FlowTrainConfig plain = cfg;
    plain.target_ema = 0.0;
    EXPECT_EQ(FlowTrainer(net, plain).target(), nullptr);
}

TEST(FlowTrainer, RejectsMismatchedLatentsAndBadConfig) {
    auto net = dit::ShortcutDiT::create(micro_dit(), 1);
    const TriplaneDims other{4, 4, 2, 3};
    const std::vector<LatentPair> wrong{{Triplane::zeros(other), Triplane::zeros(other)}};
    FlowTrainer tr(net, FlowTrainConfig{});
    EXPECT_THROW(tr.step(wrong), ConfigError);
    EXPECT_THROW(tr.step({}), DataError);
    FlowTrainConfig bad;
    bad.fraction = 2.0;
    EXPECT_THROW(FlowTrainer(net, bad), ConfigError);
}

TEST(ConsistencyResidual, ZeroForZeroInitAndPositiveForRandomNet) {
    const auto pairs = random_pairs(3, 8);
    const flow::StepSchedule schedule{};
    auto net = dit::ShortcutDiT::create(micro_dit(), 1);
    const auto zero = consistency_residual(net, pairs, schedule, 16, 1);
    EXPECT_EQ(zero.residual, 0.0);
    EXPECT_EQ(zero.energy, 0.0);
    randomize(net, 4, 0.3);
    const auto r = consistency_residual(net, pairs, schedule, 16, 1);
    EXPECT_GT(r.energy, 0.0);
    EXPECT_GT(r.ratio(), 0.0);
    EXPECT_TRUE(std::isfinite(r.ratio()));
    const auto again = consistency_residual(net, pairs, schedule, 16, 1);
    EXPECT_EQ(r.residual, again.residual);
}

struct RefinerFixture : ::testing::Test {
    std::unique_ptr<codec::Codec> codec = codec::make_codec("cross_attention", micro_codec(), 3);
    dit::ShortcutDiT net = dit::ShortcutDiT::create(micro_dit(), 4);
    std::vector<scene::Record> records = random_records(3, 9);
    void SetUp() override { randomize(net, 6, 0.2); }
};

TEST_F(RefinerFixture, OneNetworkCallPerStep) {
    const Refiner r(*codec, net, LatentStats::identity(micro_dit().planes.c), {});
    for (std::size_t n : {1u, 2u, 8u}) {
        const std::size_t before = r.net_calls();
        const VoxelGrid out = r.refine(records[0].coarse, n, 1, 0);
        EXPECT_EQ(r.net_calls() - before, n);
        EXPECT_EQ(out.dims(), records[0].gt.dims());
        EXPECT_EQ(out.num_classes(), kClasses);
    }
    EXPECT_THROW(r.refine(records[0].coarse, 3, 1, 0), ConfigError);
}

TEST_F(RefinerFixture, NoiseIsKeyedBySeedAndIndex) {
    const Refiner r(*codec, net, LatentStats::identity(micro_dit().planes.c), {});
    const Triplane cond = codec->encode_grid(records[0].coarse);
    const Tensor a = r.sample_latent(cond, 2, 5, 0).data();
    EXPECT_TRUE(same_values(a, r.sample_latent(cond, 2, 5, 0).data()));
    EXPECT_FALSE(same_values(a, r.sample_latent(cond, 2, 5, 1).data()));
    EXPECT_FALSE(same_values(a, r.sample_latent(cond, 2, 6, 0).data()));
}

TEST_F(RefinerFixture, AblationRowsMatchIndependentScoring) {
    const Refiner r(*codec, net, LatentStats::identity(micro_dit().planes.c), {});
    const auto rows = refiner_ablation(r, records, 1, 2);
    ASSERT_EQ(rows.size(), 3u);
    metrics::ConfusionStats coarse(kClasses), refined(kClasses);
    for (std::size_t i = 0; i < records.size(); ++i) {
        metrics::accumulate(records[i].coarse, records[i].gt, coarse);
        metrics::accumulate(r.refine(records[i].coarse, 1, 2, i), records[i].gt, refined);
    }
    EXPECT_EQ(rows[0].variant, "coarse");
    EXPECT_DOUBLE_EQ(rows[0].miou, metrics::miou(coarse));
    EXPECT_DOUBLE_EQ(rows[1].miou, metrics::miou(refined));
    EXPECT_DOUBLE_EQ(rows[1].iou, metrics::iou(refined));
    EXPECT_DOUBLE_EQ(rows[2].miou, rows[1].miou - rows[0].miou);
    EXPECT_EQ(rows[0].per_class_iou.size(), static_cast<std::size_t>(kClasses - 1));

    const std::size_t steps[] = {1, 4};
    const auto sweep = steps_ablation(r, records, steps, 2);
    ASSERT_EQ(sweep.size(), 2u);
    EXPECT_DOUBLE_EQ(sweep[0].miou, rows[1].miou);
    EXPECT_EQ(sweep[1].variant, "4");
}

TEST(AblationCsv, HeaderAndEmptyCellsForAbsentClasses) {
    AblationRow row{"steps", "1", 0.5, 0.25, {0.1, std::nan(""), 0.3, 0.4}, 12.5};
    const std::vector<AblationRow> rows{row};
    const std::string csv = ablation_csv(rows, kClasses);
    std::istringstream is(csv);
    std::string comment, header, line;
    std::getline(is, comment);
    std::getline(is, header);
    std::getline(is, line);
    EXPECT_EQ(comment.front(), '#');
    EXPECT_EQ(header.rfind("experiment,variant,iou,miou,iou_", 0), 0u);
    EXPECT_EQ(std::count(header.begin(), header.end(), ','), 4 + kClasses - 1);
    EXPECT_EQ(header.substr(header.size() - 8), ",wall_ms");
    EXPECT_EQ(line, "steps,1,0.5,0.25,0.1,,0.3,0.4,12.5");
}

}  // namespace
}  // namespace flowssc::refine
