#include "flowssc/refine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "flowssc/autograd.hpp"
#include "flowssc/error.hpp"
#include "flowssc/metrics.hpp"
#include "flowssc/ops.hpp"

namespace flowssc::refine {

namespace {

Tensor channel_row(const std::vector<double>& v, DType dtype) { return Tensor::from_values({1, v.size()}, v, dtype); }

Tensor flat(const Triplane& h) { return ops::reshape(h.data(), {1, h.dims().numel()}); }

double squared_norm(const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) {
        s += v * v;
    }
    return s;
}

AblationRow score_row(std::string experiment, std::string variant, const metrics::ConfusionStats& stats,
                      double wall_ms) {
    AblationRow row{std::move(experiment), std::move(variant), metrics::iou(stats), metrics::miou(stats), {}, wall_ms};
    const auto per = metrics::per_class_iou(stats);
    row.per_class_iou.assign(per.begin() + 1, per.end());
    return row;
}

constexpr int kTimingRepeats = 3;

double elapsed_ms(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

// ------------------------------------------------------------ latents

LatentStats LatentStats::identity(std::size_t channels) {
    return LatentStats{std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

LatentStats LatentStats::fit(std::span<const Triplane> latents) {
    if (latents.empty()) {
        throw DataError("cannot fit latent statistics on an empty set");
    }
    const std::size_t c = latents.front().dims().c;
    std::vector<double> sum(c, 0.0), sq(c, 0.0);
    std::size_t n = 0;
    for (const Triplane& h : latents) {
        const auto v = h.data().values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            sum[i % c] += v[i];
        }
        n += h.dims().rows();
    }
    LatentStats s;
    s.mean.resize(c);
    s.stddev.resize(c);
    for (std::size_t k = 0; k < c; ++k) {
        s.mean[k] = sum[k] / static_cast<double>(n);
    }
    for (const Triplane& h : latents) {
        const auto v = h.data().values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double d = v[i] - s.mean[i % c];
            sq[i % c] += d * d;
        }
    }
    for (std::size_t k = 0; k < c; ++k) {
        s.stddev[k] = std::max(std::sqrt(sq[k] / static_cast<double>(n)), 1e-6);
    }
    return s;
}

Triplane LatentStats::normalize(const Triplane& h) const {
    if (h.dims().c != channels()) {
        throw ShapeError("latent stats have " + std::to_string(channels()) + " channels, triplane has " +
                         std::to_string(h.dims().c));
    }
    std::vector<double> inv(stddev.size());
    for (std::size_t k = 0; k < inv.size(); ++k) {
        inv[k] = 1.0 / stddev[k];
    }
    const DType dt = h.data().dtype();
    return Triplane(h.dims(), ops::mul(ops::sub(h.data(), channel_row(mean, dt)), channel_row(inv, dt)));
}

Triplane LatentStats::denormalize(const Triplane& h) const {
    if (h.dims().c != channels()) {
        throw ShapeError("latent stats do not match the triplane channels");
    }
    const DType dt = h.data().dtype();
    return Triplane(h.dims(), ops::add(ops::mul(h.data(), channel_row(stddev, dt)), channel_row(mean, dt)));
}

std::vector<LatentPair> encode_records(const codec::Codec& codec, std::span<const scene::Record> records) {
    autograd::NoGradGuard guard;
    std::vector<LatentPair> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        out.push_back({codec.encode_grid(r.gt), codec.encode_grid(r.coarse)});
    }
    return out;
}

LatentStats normalize_pairs(std::vector<LatentPair>& pairs) {
    std::vector<Triplane> gts;
    gts.reserve(pairs.size());
    for (const auto& p : pairs) {
        gts.push_back(p.gt);
    }
    const LatentStats stats = LatentStats::fit(gts);
    apply_stats(stats, pairs);
    return stats;
}

void apply_stats(const LatentStats& stats, std::vector<LatentPair>& pairs) {
    autograd::NoGradGuard guard;
    for (auto& p : pairs) {
        p.gt = stats.normalize(p.gt);
        p.coarse = stats.normalize(p.coarse);
    }
}

// ------------------------------------------------------------ training

FlowTrainer::FlowTrainer(dit::ShortcutDiT& net, FlowTrainConfig cfg)
    : net_(net),
      cfg_(cfg),
      params_(net.parameters()),
      optimizer_(params_, optim::AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay}),
      schedule_{cfg.lr, cfg.min_lr, cfg.warmup, std::max<std::size_t>(cfg.iterations, 1)} {
    cfg_.schedule.validate();
    if (cfg_.batch == 0) {
        throw ConfigError("flow batch size must be positive");
    }
    if (!(cfg_.fraction >= 0.0 && cfg_.fraction <= 1.0)) {
        throw ConfigError("self-consistency fraction must be in [0, 1]");
    }
    if (!(cfg_.target_ema >= 0.0 && cfg_.target_ema < 1.0)) {
        throw ConfigError("target EMA decay must be in [0, 1)");
    }
    nn::set_trainable(params_);
    if (cfg_.target_ema > 0.0) {
        target_ = net.clone();
    }
}

FlowLogRow FlowTrainer::step(std::span<const LatentPair> train) {
    if (train.empty()) {
        throw DataError("flow training set is empty");
    }
    const std::size_t it = iteration();
    Rng rng = make_stream(cfg_.seed, "flow.batch", it);
    const TriplaneDims& dims = net_.config().planes;
    if (train.front().gt.dims() != dims || train.front().coarse.dims() != dims) {
        throw ConfigError("codec latents do not match the DiT plane dims");
    }
    FlowLogRow row;
    row.iteration = it;
    row.lr = schedule_.at(it);
    const Tensor mask = net_.feature_mask();
    const std::optional<Tensor> loss_mask = dit::valid_mask(net_.config()).all() ? std::nullopt
                                                                                  : std::optional<Tensor>(mask);
    optimizer_.zero_grad();
    const double inv_b = 1.0 / static_cast<double>(cfg_.batch);
    for (std::size_t b = 0; b < cfg_.batch; ++b) {
        const LatentPair& pair = train[uniform_index(rng, train.size())];
        flow::FlowBatch batch;
        batch.gt = flat(pair.gt);
        batch.noise = Tensor::randn(batch.gt.shape(), rng, 1.0, batch.gt.dtype());
        batch.steps.push_back(flow::sample_t_d(cfg_.schedule, cfg_.fraction, rng));
        autograd::Graph graph;
        const flow::VelocityFn target = target_ ? target_->velocity(pair.coarse) : flow::VelocityFn{};
        const flow::ShortcutLoss loss =
            flow::shortcut_loss(net_.velocity(pair.coarse), batch, loss_mask, cfg_.schedule, target);
        autograd::backward(ops::mul_scalar(loss.total, inv_b));
        row.total += loss.total.item() * inv_b;
        row.fm += loss.fm;
        row.sc += loss.sc;
        row.fm_rows += loss.fm_rows;
        row.sc_rows += loss.sc_rows;
    }
    row.fm = row.fm_rows ? row.fm / static_cast<double>(row.fm_rows) : 0.0;
    row.sc = row.sc_rows ? row.sc / static_cast<double>(row.sc_rows) : 0.0;
    if (!std::isfinite(row.total)) {
        throw NumericalError("flow loss diverged at iteration " + std::to_string(it));
    }
    if (cfg_.grad_clip > 0.0) {
        optim::clip_grad_norm(params_, cfg_.grad_clip);
    }
    optimizer_.step(row.lr);
    if (target_) {
        const auto dst = target_->parameters();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            Tensor t = dst[i].tensor;
            t.assign(ops::add(ops::mul_scalar(t, cfg_.target_ema),
                              ops::mul_scalar(params_[i].tensor.detach(), 1.0 - cfg_.target_ema)));
        }
    }
    return row;
}

void FlowTrainer::run(std::span<const LatentPair> train, std::size_t until,
                      const std::function<void(const FlowLogRow&)>& log) {
    until = std::min(until, cfg_.iterations);
    while (iteration() < until) {
        const FlowLogRow row = step(train);
        if (log) {
            log(row);
        }
    }
}

ConsistencyResidual consistency_residual(const dit::ShortcutDiT& net, std::span<const LatentPair> pairs,
                                         const flow::StepSchedule& schedule, std::size_t samples,
                                         std::uint64_t seed) {
    if (pairs.empty() || samples == 0) {
        throw DataError("consistency residual needs at least one pair and one sample");
    }
    autograd::NoGradGuard guard;
    Rng rng = make_stream(seed, "flow.residual");
    ConsistencyResidual out;
    for (std::size_t i = 0; i < samples; ++i) {
        const LatentPair& pair = pairs[uniform_index(rng, pairs.size())];
        const Tensor gt = flat(pair.gt);
        const Tensor noise = Tensor::randn(gt.shape(), rng, 1.0, gt.dtype());
        const flow::TimeStep s = flow::sample_t_d(schedule, 1.0, rng);
        const flow::VelocityFn v = net.velocity(pair.coarse);
        const Tensor x_t = flow::interpolate(noise, gt, s.t);
        const std::vector<double> t{s.t}, d{s.d}, d2{2.0 * s.d};
        const Tensor big = v(x_t, t, d2);
        const Tensor target = flow::self_consistency_target(v, x_t, t, d, schedule);
        out.residual += squared_norm(ops::sub(big, target));
        out.energy += squared_norm(big);
    }
    out.residual /= static_cast<double>(samples);
    out.energy /= static_cast<double>(samples);
    return out;
}

// ------------------------------------------------------------ refinement

Refiner::Refiner(const codec::Codec& codec, const dit::ShortcutDiT& net, LatentStats stats,
                 flow::StepSchedule schedule)
    : codec_(codec),
      net_(net),
      stats_(std::move(stats)),
      schedule_(schedule),
      calls_(std::make_shared<std::atomic<std::size_t>>(0)) {
    schedule_.validate();
    if (codec.config().planes != net.config().planes) {
        throw ConfigError("codec and DiT plane dims differ");
    }
    if (stats_.channels() != net.config().planes.c) {
        throw ConfigError("latent stats do not match the DiT channels");
    }
}

Triplane Refiner::sample_latent(const Triplane& cond, std::size_t n_steps, std::uint64_t seed,
                                std::uint64_t index) const {
    autograd::NoGradGuard guard;
    const flow::VelocityFn v = net_.velocity(cond);
    auto counter = calls_;
    const flow::VelocityFn counted = [v, counter](const Tensor& x, std::span<const double> t,
                                                  std::span<const double> d) {
        counter->fetch_add(1);
        return v(x, t, d);
    };
    Rng rng = make_stream(seed, "refine.noise", index);
    const TriplaneDims& dims = net_.config().planes;
    const Tensor x1 = flow::sample(counted, {1, dims.numel()}, n_steps, schedule_, rng);
    return Triplane(dims, ops::reshape(x1, {dims.rows(), dims.c}));
}

VoxelGrid Refiner::refine(const VoxelGrid& coarse, std::size_t n_steps, std::uint64_t seed,
                          std::uint64_t index) const {
    autograd::NoGradGuard guard;
    const Triplane cond = stats_.normalize(codec_.encode_grid(coarse));
    return codec_.decode_labels(stats_.denormalize(sample_latent(cond, n_steps, seed, index)));
}

std::vector<AblationRow> refiner_ablation(const Refiner& refiner, std::span<const scene::Record> records,
                                          std::size_t n_steps, std::uint64_t seed,
                                          std::vector<VoxelGrid>* predictions) {
    if (records.empty()) {
        throw DataError("refiner ablation needs at least one scene");
    }
    const int k = records.front().gt.num_classes();
    metrics::ConfusionStats coarse(k), refined(k);
    double ms = 0.0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        metrics::accumulate(records[i].coarse, records[i].gt, coarse);
        const auto t0 = std::chrono::steady_clock::now();
        const VoxelGrid pred = refiner.refine(records[i].coarse, n_steps, seed, i);
        ms += elapsed_ms(t0);
        metrics::accumulate(pred, records[i].gt, refined);
        if (predictions) {
            predictions->push_back(pred);
        }
    }
    std::vector<AblationRow> rows;
    rows.push_back(score_row("refiner", "coarse", coarse, 0.0));
    rows.push_back(score_row("refiner", "refined_" + std::to_string(n_steps) + "step", refined,
                             ms / static_cast<double>(records.size())));
    AblationRow delta = rows[1];
    delta.variant = "delta";
    delta.iou -= rows[0].iou;
    delta.miou -= rows[0].miou;
    for (std::size_t c = 0; c < delta.per_class_iou.size(); ++c) {
        delta.per_class_iou[c] -= rows[0].per_class_iou[c];
    }
    rows.push_back(delta);
    return rows;
}

std::vector<AblationRow> steps_ablation(const Refiner& refiner, std::span<const scene::Record> records,
                                        std::span<const std::size_t> steps, std::uint64_t seed) {
    if (records.empty() || steps.empty()) {
        throw DataError("steps ablation needs scenes and step counts");
    }
    const int k = records.front().gt.num_classes();
    std::vector<AblationRow> rows;
    for (std::size_t n : steps) {
        metrics::ConfusionStats stats(k);
        double ms = 0.0;
        for (std::size_t i = 0; i < records.size(); ++i) {
            // Best of a few identical runs: one extra step costs less than
            // the jitter of a single encode/decode pass.
            VoxelGrid pred;
            double best = std::numeric_limits<double>::infinity();
            for (int r = 0; r < kTimingRepeats; ++r) {
                const auto t0 = std::chrono::steady_clock::now();
                pred = refiner.refine(records[i].coarse, n, seed, i);
                best = std::min(best, elapsed_ms(t0));
            }
            ms += best;
            metrics::accumulate(pred, records[i].gt, stats);
        }
        rows.push_back(score_row("steps", std::to_string(n), stats, ms / static_cast<double>(records.size())));
    }
    return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows, int num_classes) {
    std::ostringstream os;
    os.precision(6);
    os << "# miou averages non-empty classes present in gt or prediction; absent classes are excluded\n";
    os << "experiment,variant,iou,miou";
    for (int c = 1; c < num_classes; ++c) {
        os << ",iou_" << scene::label_name(c);
    }
    os << ",wall_ms\n";
    for (const auto& r : rows) {
        os << r.experiment << ',' << r.variant << ',' << r.iou << ',' << r.miou;
        for (double v : r.per_class_iou) {
            os << ',';
            if (std::isfinite(v)) {
                os << v;
            }
        }
        os << ',' << r.wall_ms << '\n';
    }
    return os.str();
}

void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationRow> rows, int num_classes) {
    std::ofstream f(path);
    if (!f) {
        throw DataError("cannot write " + path.string());
    }
    f << ablation_csv(rows, num_classes);
}

}  // namespace flowssc::refine
