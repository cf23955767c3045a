#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "flowssc/checkpoint.hpp"
#include "flowssc/config.hpp"
#include "flowssc/error.hpp"
#include "flowssc/rng.hpp"

namespace flowssc {
namespace {

ckpt::Checkpoint sample_checkpoint() {
    Rng rng(3);
    ckpt::Checkpoint c;
    c.digest = 0x0123456789abcdefULL;
    c.add("a.weight", Tensor::randn({3, 5}, rng, 1.0, DType::f32));
    c.add("a.bias", Tensor::randn({5}, rng, 1.0, DType::f64));
    c.add("scalar", Tensor::scalar(-2.5, DType::f64));
    c.add("block.conv", Tensor::randn({2, 1, 3, 3, 3}, rng, 1.0, DType::f32));
    return c;
}

void expect_same(const ckpt::Checkpoint& a, const ckpt::Checkpoint& b) {
    EXPECT_EQ(a.digest, b.digest);
    ASSERT_EQ(a.tensors.size(), b.tensors.size());
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
        EXPECT_EQ(a.tensors[i].name, b.tensors[i].name);
        EXPECT_EQ(a.tensors[i].tensor.dtype(), b.tensors[i].tensor.dtype());
        EXPECT_EQ(a.tensors[i].tensor.shape(), b.tensors[i].tensor.shape());
        EXPECT_TRUE(same_values(a.tensors[i].tensor, b.tensors[i].tensor)) << a.tensors[i].name;
    }
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto c = sample_checkpoint();
    const auto bytes = ckpt::encode(c);
    const auto back = ckpt::decode(bytes);
    expect_same(c, back);
    EXPECT_EQ(ckpt::encode(back), bytes);
}

TEST(Checkpoint, ByteLayoutHeader) {
    const auto bytes = ckpt::encode(sample_checkpoint());
    ASSERT_GE(bytes.size(), 18u);
    EXPECT_EQ(std::memcmp(bytes.data(), "FSSC", 4), 0);
    EXPECT_EQ(bytes[4] | (bytes[5] << 8), ckpt::kVersion);
    EXPECT_EQ(bytes[6], 0xef);
    EXPECT_EQ(bytes[13], 0x01);
    EXPECT_EQ(bytes[14], 4);
    // 4 tensors: payload bytes 15*4 + 5*8 + 8 + 54*4, names, headers, CRC.
    std::size_t expected = 4 + 2 + 8 + 4 + 4;
    for (const auto& [name, rank, payload] : {std::tuple{"a.weight", 2, 60}, {"a.bias", 1, 40}, {"scalar", 0, 8},
                                              std::tuple{"block.conv", 5, 216}}) {
        expected += 2 + std::strlen(name) + 1 + 1 + 8 * static_cast<std::size_t>(rank) + payload;
    }
    EXPECT_EQ(bytes.size(), expected);
}

TEST(Checkpoint, EverySingleByteCorruptionIsDetected) {
    const auto bytes = ckpt::encode(sample_checkpoint());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        auto bad = bytes;
        bad[i] ^= 0x40;
        EXPECT_THROW(ckpt::decode(bad), ParseError) << "byte " << i;
    }
}

TEST(Checkpoint, TruncationIsDetected) {
    const auto bytes = ckpt::encode(sample_checkpoint());
    for (std::size_t n : {std::size_t{0}, std::size_t{3}, std::size_t{17}, bytes.size() / 2, bytes.size() - 1}) {
        EXPECT_THROW(ckpt::decode(std::span(bytes).first(n)), ParseError) << n;
    }
}

TEST(Checkpoint, SaveLoadThroughFile) {
    const auto dir = std::filesystem::temp_directory_path() / "flowssc_io_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "c.fssc";
    const auto c = sample_checkpoint();
    ckpt::save(path, c);
    expect_same(c, ckpt::load(path));
    EXPECT_THROW(ckpt::load(dir / "missing.fssc"), DataError);
    std::filesystem::remove_all(dir);
}

TEST(Checkpoint, DigestMismatchIsConfigError) {
    const auto c = sample_checkpoint();
    EXPECT_NO_THROW(ckpt::check_digest(c, c.digest, "codec"));
    EXPECT_THROW(ckpt::check_digest(c, c.digest + 1, "codec"), ConfigError);
}

TEST(Checkpoint, RestoreCopiesValuesAndRejectsMismatch) {
    const auto c = sample_checkpoint();
    nn::ParamList params{{"weight", Tensor::zeros({3, 5}, DType::f32)}, {"bias", Tensor::zeros({5}, DType::f64)}};
    ckpt::restore(c, params, "a.");
    EXPECT_TRUE(same_values(params[0].tensor, c.at("a.weight")));
    EXPECT_TRUE(same_values(params[1].tensor, c.at("a.bias")));

    nn::ParamList wrong_shape{{"weight", Tensor::zeros({5, 3}, DType::f32)}};
    EXPECT_THROW(ckpt::restore(c, wrong_shape, "a."), ConfigError);
    nn::ParamList missing{{"gamma", Tensor::zeros({5}, DType::f32)}};
    EXPECT_THROW(ckpt::restore(c, missing, "a."), ConfigError);
    EXPECT_THROW(c.at("nope"), DataError);
}

TEST(Checkpoint, AddDetachesFromSource) {
    Tensor t = Tensor::zeros({2}, DType::f64);
    ckpt::Checkpoint c;
    c.add("t", t);
    t.assign(Tensor::full({2}, 7.0, DType::f64));
    EXPECT_EQ(c.at("t").values(), (std::vector<double>{0.0, 0.0}));
}

TEST(Checkpoint, DigestIsFnv1a) {
    EXPECT_EQ(ckpt::digest(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(ckpt::digest("a"), 0xaf63dc4c8601ec8cULL);
}

// ------------------------------------------------ config

TEST(Config, DefaultsResolve) {
    config::RunConfig cfg;
    cfg.resolve();
    EXPECT_EQ(cfg.codec.grid.x, cfg.data.scene.dims.x);
    EXPECT_EQ(cfg.codec.num_classes, cfg.data.scene.num_classes);
    EXPECT_EQ(cfg.dit.planes.c, cfg.codec.planes.c);
}

TEST(Config, DumpParseRoundTrip) {
    config::RunConfig cfg;
    cfg.seed = 42;
    cfg.flow.iterations = 77;
    cfg.codec.decoder_conv = false;
    cfg.data.degrade.occluded_drop = 0.25;
    cfg.eval.steps = {1, 4};
    cfg.resolve();
    const auto text = config::dump(cfg);
    const auto back = config::parse(text);
    EXPECT_EQ(config::dump(back), text);
    EXPECT_EQ(back.seed, 42u);
    EXPECT_EQ(back.flow.seed, 42u);
    EXPECT_EQ(back.codec_train.seed, 42u);
    EXPECT_EQ(back.flow.iterations, 77u);
    EXPECT_FALSE(back.codec.decoder_conv);
    EXPECT_EQ(back.eval.steps, (std::vector<std::size_t>{1, 4}));
}

TEST(Config, UnknownKeyIsRejectedWithPath) {
    try {
        config::parse(R"({"flow": {"iterations": 10, "itertions": 5}})");
        FAIL() << "no throw";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("flow.itertions"), std::string::npos) << e.what();
    }
    EXPECT_THROW(config::parse(R"({"bogus": 1})"), ConfigError);
}

TEST(Config, TypeMismatchesAreRejected) {
    EXPECT_THROW(config::parse(R"({"seed": -1})"), ConfigError);
    EXPECT_THROW(config::parse(R"({"flow": {"lr": "fast"}})"), ConfigError);
    EXPECT_THROW(config::parse(R"({"codec": {"decoder_conv": 1}})"), ConfigError);
    EXPECT_THROW(config::parse(R"({"data": {"grid": [32, 32]}})"), ConfigError);
    EXPECT_THROW(config::parse(R"({"data": 3})"), ConfigError);
    EXPECT_THROW(config::parse("{not json"), ConfigError);
}

TEST(Config, SemanticValidation) {
    EXPECT_THROW(config::parse(R"({"eval": {"steps": [3]}})"), ConfigError);
    EXPECT_THROW(config::parse(R"({"codec": {"kind": "mlp"}})"), ConfigError);
    EXPECT_THROW(config::parse(R"({"data": {"split": [0.5, 0.1, 0.1]}})"), ConfigError);
    EXPECT_THROW(config::parse(R"({"flow": {"fraction": 1.5}})"), ConfigError);
}

TEST(Config, OverridesUseDottedPaths) {
    config::RunConfig cfg;
    cfg.resolve();
    config::apply_override(cfg, "flow.iterations=200");
    config::apply_override(cfg, "codec.kind=conv_baseline");
    config::apply_override(cfg, "eval.steps=[1,2]");
    config::apply_override(cfg, "seed=9");
    EXPECT_EQ(cfg.flow.iterations, 200u);
    EXPECT_EQ(cfg.codec_kind, "conv_baseline");
    EXPECT_EQ(cfg.eval.steps, (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(cfg.flow.seed, 9u);
    EXPECT_THROW(config::apply_override(cfg, "flow.iters=1"), ConfigError);
    EXPECT_THROW(config::apply_override(cfg, "flow"), ConfigError);
    EXPECT_THROW(config::apply_override(cfg, "flow.lr=abc"), ConfigError);
}

TEST(Config, DigestsTrackStructureOnly) {
    config::RunConfig a;
    a.resolve();
    config::RunConfig b = a;
    b.flow.iterations = 5;
    b.codec_train.lr = 1.0;
    EXPECT_EQ(config::codec_digest(a), config::codec_digest(b));
    EXPECT_EQ(config::flow_digest(a), config::flow_digest(b));
    b.dit.depth += 1;
    EXPECT_EQ(config::codec_digest(a), config::codec_digest(b));
    EXPECT_NE(config::flow_digest(a), config::flow_digest(b));
    b = a;
    b.codec_kind = "conv_baseline";
    EXPECT_NE(config::codec_digest(a), config::codec_digest(b));
    EXPECT_NE(config::flow_digest(a), config::flow_digest(b));
}

}  // namespace
}  // namespace flowssc
