#include "flowssc/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "flowssc/checkpoint.hpp"
#include "flowssc/codec_train.hpp"
#include "flowssc/error.hpp"
#include "flowssc/metrics.hpp"

namespace flowssc::pipeline {

namespace {

void say(const Progress& progress, const std::string& line) {
    if (progress) {
        progress(line);
    }
}

std::ofstream open_csv(const std::filesystem::path& path, bool append) {
    std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
    if (!f) {
        throw DataError("cannot write " + path.string());
    }
    f.precision(8);
    return f;
}

void ensure_output_dir(const config::RunConfig& cfg) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.output_dir, ec);
    if (ec) {
        throw DataError("cannot create output directory " + cfg.output_dir + ": " + ec.message());
    }
}

void put_optional(std::ostream& os, double v) {
    os << ',';
    if (std::isfinite(v)) {
        os << v;
    }
}

double scalar_at(const ckpt::Checkpoint& c, std::string_view name) { return c.at(name).item(); }

ckpt::Checkpoint codec_checkpoint(const config::RunConfig& cfg, const codec::Codec& codec,
                                  codec::CodecTrainer& trainer, double best_miou) {
    ckpt::Checkpoint c;
    c.digest = config::codec_digest(cfg);
    c.add(codec.parameters(), "codec.");
    c.add(trainer.optimizer().state(), "opt.");
    c.add("meta.iteration", Tensor::scalar(static_cast<double>(trainer.iteration()), DType::f64));
    c.add("meta.best_miou", Tensor::scalar(best_miou, DType::f64));
    return c;
}

std::vector<refine::LatentPair> encode(const codec::Codec& codec, std::span<const scene::Record> records) {
    return refine::encode_records(codec, records);
}

}  // namespace

// ------------------------------------------------------------ data

std::vector<scene::Record> Dataset::subset(std::span<const std::size_t> indices, std::size_t cap) const {
    const std::size_t n = cap == 0 ? indices.size() : std::min(cap, indices.size());
    std::vector<scene::Record> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(records.at(indices[i]));
    }
    return out;
}

std::vector<VoxelGrid> Dataset::gt(std::span<const std::size_t> indices, std::size_t cap) const {
    const std::size_t n = cap == 0 ? indices.size() : std::min(cap, indices.size());
    std::vector<VoxelGrid> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(records.at(indices[i]).gt);
    }
    return out;
}

std::vector<scene::Record> generate(const config::RunConfig& cfg) {
    return scene::generate_records(cfg.data.scene, cfg.data.degrade, cfg.data.scenes, cfg.seed);
}

Dataset load_dataset(const config::RunConfig& cfg) {
    Dataset d;
    d.records = scene::read_dataset(cfg.data.path);
    if (d.records.empty()) {
        throw DataError(cfg.data.path + ": dataset has no scenes");
    }
    const VoxelGrid& first = d.records.front().gt;
    if (first.dims() != cfg.data.scene.dims || first.num_classes() != cfg.data.scene.num_classes) {
        throw ConfigError(cfg.data.path + ": grid dims or class count differ from the configuration");
    }
    d.split = scene::split_dataset(d.records.size(), cfg.data.split, cfg.seed);
    return d;
}

Census census(std::span<const scene::Record> records) {
    Census c;
    c.scenes = records.size();
    if (records.empty()) {
        return c;
    }
    const int k = records.front().gt.num_classes();
    c.gt_voxels.assign(static_cast<std::size_t>(k), 0);
    c.coarse_voxels.assign(static_cast<std::size_t>(k), 0);
    metrics::ConfusionStats stats(k);
    for (const auto& r : records) {
        for (auto l : r.gt.labels()) {
            ++c.gt_voxels[l];
        }
        for (auto l : r.coarse.labels()) {
            ++c.coarse_voxels[l];
        }
        metrics::accumulate(r.coarse, r.gt, stats);
    }
    c.coarse_iou = metrics::iou(stats);
    c.coarse_miou = metrics::miou(stats);
    return c;
}

std::string format_census(const Census& c) {
    std::ostringstream os;
    os.precision(4);
    os << "scenes " << c.scenes << "\n";
    os << "class         gt_voxels  coarse_voxels\n";
    for (std::size_t k = 0; k < c.gt_voxels.size(); ++k) {
        char line[96];
        std::snprintf(line, sizeof line, "%-12s %10llu %14llu\n", scene::label_name(static_cast<int>(k)),
                      static_cast<unsigned long long>(c.gt_voxels[k]),
                      static_cast<unsigned long long>(c.coarse_voxels[k]));
        os << line;
    }
    os << "coarse vs gt: iou " << c.coarse_iou << " miou " << c.coarse_miou << "\n";
    return os.str();
}

// ------------------------------------------------------------ codec stage

std::unique_ptr<codec::Codec> make_codec(const config::RunConfig& cfg) {
    return codec::make_codec(cfg.codec_kind, cfg.codec, cfg.seed);
}

std::unique_ptr<codec::Codec> load_codec(const config::RunConfig& cfg, const std::filesystem::path& path) {
    const ckpt::Checkpoint c = ckpt::load(path);
    ckpt::check_digest(c, config::codec_digest(cfg), "codec " + path.string());
    auto codec = make_codec(cfg);
    ckpt::restore(c, codec->parameters(), "codec.");
    return codec;
}

CodecRunResult train_codec(const config::RunConfig& cfg, const Dataset& data,
                           const std::optional<std::filesystem::path>& resume, const Progress& progress) {
    ensure_output_dir(cfg);
    auto codec = make_codec(cfg);
    codec::CodecTrainer trainer(*codec, cfg.codec_train);
    CodecRunResult result;
    if (resume) {
        const ckpt::Checkpoint c = ckpt::load(*resume);
        ckpt::check_digest(c, config::codec_digest(cfg), "codec " + resume->string());
        ckpt::restore(c, codec->parameters(), "codec.");
        ckpt::restore(c, trainer.optimizer().state(), "opt.");
        trainer.optimizer().set_steps_taken(static_cast<std::size_t>(scalar_at(c, "meta.iteration")));
        result.best_miou = scalar_at(c, "meta.best_miou");
        say(progress, "resumed codec training at iteration " + std::to_string(trainer.iteration()));
    }
    const auto train = data.gt(data.split.train);
    const auto val = data.gt(data.split.val);
    std::ofstream csv = open_csv(cfg.out("codec_metrics.csv"), resume.has_value());
    if (!resume) {
        csv << "iteration,lr,loss,ce,geo,sem,iou,miou\n";
    }
    trainer.run(train, val, cfg.codec_train.iterations, [&](const codec::TrainLogRow& r) {
        csv << r.iteration << ',' << r.lr << ',' << r.loss << ',' << r.ce << ',' << r.geo << ',' << r.sem;
        put_optional(csv, r.iou);
        put_optional(csv, r.miou);
        csv << '\n';
        if (std::isfinite(r.miou)) {
            csv.flush();
            result.last_iou = r.iou;
            result.last_miou = r.miou;
            char line[128];
            std::snprintf(line, sizeof line, "codec it %zu loss %.4f val iou %.4f miou %.4f", r.iteration + 1,
                          r.loss, r.iou, r.miou);
            say(progress, line);
            if (r.miou > result.best_miou) {
                result.best_miou = r.miou;
                ckpt::save(cfg.out("codec_best.fssc"), codec_checkpoint(cfg, *codec, trainer, result.best_miou));
            }
        }
    });
    result.iterations = trainer.iteration();
    ckpt::save(cfg.out("codec_final.fssc"), codec_checkpoint(cfg, *codec, trainer, result.best_miou));
    return result;
}

// ------------------------------------------------------------ flow stage

namespace {

ckpt::Checkpoint flow_checkpoint(const config::RunConfig& cfg, const dit::ShortcutDiT& net,
                                 refine::FlowTrainer& trainer, const refine::LatentStats& stats) {
    ckpt::Checkpoint c;
    c.digest = config::flow_digest(cfg);
    c.add(net.parameters(), "dit.");
    c.add(trainer.optimizer().state(), "opt.");
    if (trainer.target()) {
        c.add(trainer.target()->parameters(), "target.");
    }
    c.add("stats.mean", Tensor::from_values({stats.channels()}, stats.mean, DType::f64));
    c.add("stats.std", Tensor::from_values({stats.channels()}, stats.stddev, DType::f64));
    c.add("meta.iteration", Tensor::scalar(static_cast<double>(trainer.iteration()), DType::f64));
    return c;
}

refine::LatentStats stats_from(const ckpt::Checkpoint& c) {
    return refine::LatentStats{c.at("stats.mean").values(), c.at("stats.std").values()};
}

}  // namespace

FlowModel load_flow(const config::RunConfig& cfg, const std::filesystem::path& path) {
    const ckpt::Checkpoint c = ckpt::load(path);
    ckpt::check_digest(c, config::flow_digest(cfg), "flow " + path.string());
    FlowModel m{dit::ShortcutDiT::create(cfg.dit, cfg.seed), stats_from(c)};
    ckpt::restore(c, m.net.parameters(), "dit.");
    if (m.stats.channels() != cfg.dit.planes.c) {
        throw ConfigError("flow checkpoint latent stats do not match the DiT channels");
    }
    return m;
}

FlowRunResult train_flow(const config::RunConfig& cfg, const Dataset& data, const codec::Codec& codec,
                         const std::optional<std::filesystem::path>& resume, const Progress& progress) {
    ensure_output_dir(cfg);
    if (codec.config().planes != cfg.dit.planes) {
        throw ConfigError("codec latent planes differ from the DiT planes");
    }
    say(progress, "encoding " + std::to_string(data.split.train.size()) + " training scenes");
    auto pairs = encode(codec, data.subset(data.split.train));
    refine::LatentStats stats = refine::normalize_pairs(pairs);
    dit::ShortcutDiT net = dit::ShortcutDiT::create(cfg.dit, cfg.seed);
    std::optional<ckpt::Checkpoint> resumed;
    if (resume) {
        resumed = ckpt::load(*resume);
        ckpt::check_digest(*resumed, config::flow_digest(cfg), "flow " + resume->string());
        ckpt::restore(*resumed, net.parameters(), "dit.");
    }
    refine::FlowTrainer trainer(net, cfg.flow);
    if (resumed) {
        ckpt::restore(*resumed, trainer.optimizer().state(), "opt.");
        if (trainer.target()) {
            ckpt::restore(*resumed, trainer.target()->parameters(), "target.");
        }
        trainer.optimizer().set_steps_taken(static_cast<std::size_t>(scalar_at(*resumed, "meta.iteration")));
        say(progress, "resumed flow training at iteration " + std::to_string(trainer.iteration()));
    }
    std::ofstream csv = open_csv(cfg.out("flow_metrics.csv"), resume.has_value());
    if (!resume) {
        csv << "iteration,lr,fm_loss,sc_loss,total,fm_rows,sc_rows\n";
    }
    FlowRunResult result;
    double fm_sum = 0.0, sc_sum = 0.0;
    std::size_t fm_n = 0, sc_n = 0;
    trainer.run(pairs, cfg.flow.iterations, [&](const refine::FlowLogRow& r) {
        csv << r.iteration << ',' << r.lr;
        put_optional(csv, r.fm_rows ? r.fm : NAN);
        put_optional(csv, r.sc_rows ? r.sc : NAN);
        csv << ',' << r.total << ',' << r.fm_rows << ',' << r.sc_rows << '\n';
        if (r.fm_rows) {
            fm_sum += r.fm;
            ++fm_n;
        }
        if (r.sc_rows) {
            sc_sum += r.sc;
            ++sc_n;
        }
        if ((r.iteration + 1) % 100 == 0 || r.iteration + 1 == cfg.flow.iterations) {
            result.last_fm = fm_n ? fm_sum / static_cast<double>(fm_n) : 0.0;
            result.last_sc = sc_n ? sc_sum / static_cast<double>(sc_n) : 0.0;
            fm_sum = sc_sum = 0.0;
            fm_n = sc_n = 0;
            char line[128];
            std::snprintf(line, sizeof line, "flow it %zu fm %.4f sc %.4f", r.iteration + 1, result.last_fm,
                          result.last_sc);
            say(progress, line);
            csv.flush();
        }
    });
    result.iterations = trainer.iteration();
    ckpt::save(cfg.out("flow_final.fssc"), flow_checkpoint(cfg, net, trainer, stats));
    return result;
}

std::vector<refine::LatentPair> heldout_pairs(const config::RunConfig& cfg, const Dataset& data,
                                              const codec::Codec& codec, const refine::LatentStats& stats) {
    auto pairs = encode(codec, data.subset(data.split.test, cfg.eval.max_scenes));
    refine::apply_stats(stats, pairs);
    return pairs;
}

// ------------------------------------------------------------ refinement

RefineResult refine_split(const config::RunConfig& cfg, const Dataset& data, const codec::Codec& codec,
                          const FlowModel& model, std::size_t n_steps) {
    ensure_output_dir(cfg);
    const auto test = data.subset(data.split.test, cfg.eval.max_scenes);
    if (test.empty()) {
        throw DataError("test split is empty");
    }
    const refine::Refiner refiner(codec, model.net, model.stats, cfg.flow.schedule);
    RefineResult result;
    std::vector<VoxelGrid> refined;
    result.rows = refine::refiner_ablation(refiner, test, n_steps, cfg.seed, &refined);
    result.net_calls = refiner.net_calls();
    for (std::size_t i = 0; i < test.size(); ++i) {
        result.predictions.push_back({test[i].gt, refined[i]});
    }
    scene::write_dataset(cfg.out("predictions.voxd"), result.predictions);
    refine::write_ablation_csv(cfg.out("refine_metrics.csv"), result.rows, cfg.data.scene.num_classes);
    return result;
}

std::vector<refine::AblationRow> ablate_steps(const config::RunConfig& cfg, const Dataset& data,
                                              const codec::Codec& codec, const FlowModel& model) {
    ensure_output_dir(cfg);
    const auto test = data.subset(data.split.test, cfg.eval.max_scenes);
    if (test.empty()) {
        throw DataError("test split is empty");
    }
    const refine::Refiner refiner(codec, model.net, model.stats, cfg.flow.schedule);
    auto rows = refine::steps_ablation(refiner, test, cfg.eval.steps, cfg.seed);
    refine::write_ablation_csv(cfg.out("steps_ablation.csv"), rows, cfg.data.scene.num_classes);
    return rows;
}

}  // namespace flowssc::pipeline
