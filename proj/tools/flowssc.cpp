#include <malloc.h>

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "flowssc/config.hpp"
#include "flowssc/error.hpp"
#include "flowssc/pipeline.hpp"
#include "flowssc/verify.hpp"

using namespace flowssc;

namespace {

struct Options {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string output_dir;
    std::optional<std::uint64_t> seed;

    std::string data_path;
    std::optional<std::size_t> scenes;
    std::optional<std::size_t> iterations;
    std::optional<std::size_t> steps;
    std::vector<std::size_t> step_list;
    std::string resume;
    std::string codec;
    std::string flow;
};

void say(const std::string& s) { std::cout << s << std::endl; }

// Config file, then --set overrides; dedicated flags are applied by the caller.
config::RunConfig resolve_config(const Options& o) {
    config::RunConfig cfg = o.config_file.empty() ? config::RunConfig{} : config::load(o.config_file);
    cfg.resolve();
    for (const auto& a : o.overrides) {
        config::apply_override(cfg, a);
    }
    if (!o.output_dir.empty()) {
        cfg.output_dir = o.output_dir;
    }
    if (o.seed) {
        cfg.seed = *o.seed;
    }
    return cfg;
}

// The resolved configuration alone reproduces the command.
void dump_config(const config::RunConfig& cfg, const std::string& command) {
    std::filesystem::create_directories(cfg.output_dir);
    const auto path = cfg.out(command + ".config.json");
    std::ofstream f(path);
    if (!f) {
        throw DataError("cannot write " + path.string());
    }
    f << config::dump(cfg);
}

std::filesystem::path pick(const std::string& given, const std::filesystem::path& fallback) {
    return given.empty() ? fallback : std::filesystem::path(given);
}

void print_rows(const std::vector<refine::AblationRow>& rows) {
    for (const auto& r : rows) {
        std::printf("%-8s %-14s iou %.4f miou %.4f wall_ms %.1f\n", r.experiment.c_str(), r.variant.c_str(), r.iou,
                    r.miou, r.wall_ms);
    }
}

int cmd_gen_data(const config::RunConfig& cfg) {
    const auto records = pipeline::generate(cfg);
    const std::filesystem::path path(cfg.data.path);
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    scene::write_dataset(path, records);
    std::cout << "wrote " << records.size() << " scenes to " << path.string() << "\n"
              << pipeline::format_census(pipeline::census(records));
    return 0;
}

int cmd_train_codec(const config::RunConfig& cfg, const Options& o) {
    const auto data = pipeline::load_dataset(cfg);
    std::optional<std::filesystem::path> resume;
    if (!o.resume.empty()) {
        resume = o.resume;
    }
    const auto r = pipeline::train_codec(cfg, data, resume, say);
    std::printf("codec %s: %zu iterations, best val miou %.4f, final val iou %.4f miou %.4f\n", cfg.codec_kind.c_str(),
                r.iterations, r.best_miou, r.last_iou, r.last_miou);
    return 0;
}

int cmd_train_flow(const config::RunConfig& cfg, const Options& o) {
    const auto data = pipeline::load_dataset(cfg);
    const auto codec = pipeline::load_codec(cfg, pick(o.codec, cfg.out("codec_final.fssc")));
    std::optional<std::filesystem::path> resume;
    if (!o.resume.empty()) {
        resume = o.resume;
    }
    const auto r = pipeline::train_flow(cfg, data, *codec, resume, say);
    std::printf("flow: %zu iterations, last fm %.4f sc %.4f\n", r.iterations, r.last_fm, r.last_sc);
    return 0;
}

int cmd_refine(const config::RunConfig& cfg, const Options& o) {
    const auto data = pipeline::load_dataset(cfg);
    const auto codec = pipeline::load_codec(cfg, pick(o.codec, cfg.out("codec_final.fssc")));
    const auto model = pipeline::load_flow(cfg, pick(o.flow, cfg.out("flow_final.fssc")));
    const auto r = pipeline::refine_split(cfg, data, *codec, model, cfg.eval.refine_steps);
    print_rows(r.rows);
    std::printf("%zu scenes, %zu network calls; wrote %s and %s\n", r.predictions.size(), r.net_calls,
                cfg.out("predictions.voxd").c_str(), cfg.out("refine_metrics.csv").c_str());
    return 0;
}

int cmd_ablate_steps(const config::RunConfig& cfg, const Options& o) {
    const auto data = pipeline::load_dataset(cfg);
    const auto codec = pipeline::load_codec(cfg, pick(o.codec, cfg.out("codec_final.fssc")));
    const auto model = pipeline::load_flow(cfg, pick(o.flow, cfg.out("flow_final.fssc")));
    print_rows(pipeline::ablate_steps(cfg, data, *codec, model));
    std::printf("wrote %s\n", cfg.out("steps_ablation.csv").c_str());
    return 0;
}

int cmd_verify(const config::RunConfig& cfg, const Options& o) {
    std::vector<verify::Check> checks;
    auto report = [&](const verify::Check& c) {
        say(verify::format(c));
        checks.push_back(c);
    };
    for (const auto& c : verify::primitive_gradient_checks(100, cfg.seed)) {
        report(c);
    }
    report(verify::dit_gradient_check(100, cfg.seed));
    report(verify::gaussian_check());
    for (const auto& c : verify::toy_one_step_checks()) {
        report(c);
    }
    const auto codec_path = pick(o.codec, cfg.out("codec_final.fssc"));
    const auto flow_path = pick(o.flow, cfg.out("flow_final.fssc"));
    if (std::filesystem::exists(codec_path) && std::filesystem::exists(flow_path) &&
        std::filesystem::exists(cfg.data.path)) {
        const auto data = pipeline::load_dataset(cfg);
        const auto codec = pipeline::load_codec(cfg, codec_path);
        const auto model = pipeline::load_flow(cfg, flow_path);
        const auto pairs = pipeline::heldout_pairs(cfg, data, *codec, model.stats);
        const auto& sched = cfg.flow.schedule;
        const std::size_t n = cfg.eval.residual_samples;
        const double thr = cfg.eval.residual_threshold;
        report(verify::consistency_check("residual_trained", model.net, pairs, sched, n, cfg.seed, thr));
        const auto untrained = dit::ShortcutDiT::create(cfg.dit, cfg.seed);
        report(verify::expect_failure(
            verify::consistency_check("residual_untrained", untrained, pairs, sched, n, cfg.seed, thr)));
        const auto random = verify::random_dit(cfg.dit, cfg.seed);
        report(verify::expect_failure(
            verify::consistency_check("residual_random_init", random, pairs, sched, n, cfg.seed, thr)));
    } else {
        say("SKIP residual checks: need " + codec_path.string() + ", " + flow_path.string() + " and " +
            cfg.data.path);
    }
    const bool ok = verify::all_pass(checks);
    std::printf("%s: %zu checks\n", ok ? "ALL PASS" : "FAILURES", checks.size());
    return ok ? 0 : static_cast<int>(ExitCode::kFailure);
}

int run(int argc, char** argv) {
    CLI::App app{"Semantic scene completion with triplane latents and shortcut-flow refinement"};
    app.require_subcommand(1);
    Options o;
    app.add_option("-c,--config", o.config_file, "JSON configuration file")->check(CLI::ExistingFile);
    app.add_option("-s,--set", o.overrides, "Override a config key, e.g. -s flow.iterations=200");
    app.add_option("-o,--output-dir", o.output_dir, "Output directory (overrides output_dir)");
    app.add_option("--seed", o.seed, "Global seed (overrides seed)");

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic (gt, coarse) dataset and print a census");
    gen->add_option("--out", o.data_path, "Dataset path (overrides data.path)");
    gen->add_option("--scenes", o.scenes, "Scene count (overrides data.scenes)");

    auto* codec = app.add_subcommand("train-codec", "Train the triplane codec");
    codec->add_option("--iterations", o.iterations, "Overrides codec.train.iterations");
    codec->add_option("--resume", o.resume, "Continue from a codec checkpoint")->check(CLI::ExistingFile);

    auto* flow = app.add_subcommand("train-flow", "Train the shortcut flow on frozen codec latents");
    flow->add_option("--iterations", o.iterations, "Overrides flow.iterations");
    flow->add_option("--codec", o.codec, "Codec checkpoint (default <output>/codec_final.fssc)");
    flow->add_option("--resume", o.resume, "Continue from a flow checkpoint")->check(CLI::ExistingFile);

    auto* refine = app.add_subcommand("refine", "Refine the held-out coarse grids");
    refine->add_option("--steps", o.steps, "Sampling steps (overrides eval.refine_steps)");
    refine->add_option("--codec", o.codec, "Codec checkpoint (default <output>/codec_final.fssc)");
    refine->add_option("--flow", o.flow, "Flow checkpoint (default <output>/flow_final.fssc)");

    auto* ablate = app.add_subcommand("ablate-steps", "Held-out metrics and wall-clock per sampling step count");
    ablate->add_option("--steps", o.step_list, "Comma-separated step counts (overrides eval.steps)")->delimiter(',');
    ablate->add_option("--codec", o.codec, "Codec checkpoint");
    ablate->add_option("--flow", o.flow, "Flow checkpoint");

    auto* verify = app.add_subcommand("verify", "Run the oracle suite; nonzero exit on any failing check");
    verify->add_option("--codec", o.codec, "Codec checkpoint for the consistency residual");
    verify->add_option("--flow", o.flow, "Flow checkpoint for the consistency residual");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
    }

    if (const char* f64 = std::getenv("FLOWSSC_FLOAT64"); f64 && *f64 != '\0' && std::string(f64) != "0") {
        set_default_dtype(DType::f64);
    }

    config::RunConfig cfg = resolve_config(o);
    if (!o.data_path.empty()) {
        cfg.data.path = o.data_path;
    }
    if (o.scenes) {
        cfg.data.scenes = *o.scenes;
    }
    if (o.iterations) {
        (*codec ? cfg.codec_train.iterations : cfg.flow.iterations) = *o.iterations;
    }
    if (o.steps) {
        cfg.eval.refine_steps = *o.steps;
    }
    if (!o.step_list.empty()) {
        cfg.eval.steps = o.step_list;
    }
    cfg.resolve();

    const std::string name = app.get_subcommands().front()->get_name();
    dump_config(cfg, name);
    if (*gen) {
        return cmd_gen_data(cfg);
    }
    if (*codec) {
        return cmd_train_codec(cfg, o);
    }
    if (*flow) {
        return cmd_train_flow(cfg, o);
    }
    if (*refine) {
        return cmd_refine(cfg, o);
    }
    if (*ablate) {
        return cmd_ablate_steps(cfg, o);
    }
    return cmd_verify(cfg, o);
}

}  // namespace

int main(int argc, char** argv) {
    // Keep freed training buffers in the heap instead of returning them to the OS.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    try {
        return run(argc, argv);
    } catch (const Error& e) {
        std::cerr << "flowssc: " << e.what() << "\n";
        return static_cast<int>(e.code());
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "flowssc: data error: " << e.what() << "\n";
        return static_cast<int>(ExitCode::kData);
    } catch (const std::exception& e) {
        std::cerr << "flowssc: " << e.what() << "\n";
        return static_cast<int>(ExitCode::kFailure);
    }
}
