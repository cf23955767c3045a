#include "flowssc/config.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <type_traits>

#include "flowssc/checkpoint.hpp"
#include "flowssc/error.hpp"

namespace flowssc::config {

namespace {

using json = nlohmann::ordered_json;

// ------------------------------------------------ value <-> json

json to_json_value(const GridDims& d) { return json::array({d.x, d.y, d.z}); }
json to_json_value(const TriplaneDims& d) { return json::array({d.h, d.w, d.d, d.c}); }
json to_json_value(const scene::IntRange& r) { return json::array({r.lo, r.hi}); }
json to_json_value(const scene::Point3& p) { return json::array({p.x, p.y, p.z}); }
template <class T>
json to_json_value(const T& v) {
    return json(v);
}

[[noreturn]] void type_error(const std::string& path, const char* expected) {
    throw ConfigError("key '" + path + "' must be " + expected);
}

template <class T>
T read_scalar(const json& j, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
        if (!j.is_boolean()) {
            type_error(path, "a boolean");
        }
        return j.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
        if (!j.is_string()) {
            type_error(path, "a string");
        }
        return j.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!j.is_number()) {
            type_error(path, "a number");
        }
        return j.get<T>();
    } else if constexpr (std::is_unsigned_v<T>) {
        if (!j.is_number_unsigned()) {
            type_error(path, "a non-negative integer");
        }
        return j.get<T>();
    } else {
        static_assert(std::is_integral_v<T>);
        if (!j.is_number_integer()) {
            type_error(path, "an integer");
        }
        return j.get<T>();
    }
}

template <class T>
std::vector<T> read_array(const json& j, const std::string& path, std::size_t n = 0) {
    if (!j.is_array() || (n != 0 && j.size() != n)) {
        throw ConfigError("key '" + path + "' must be an array" + (n ? " of " + std::to_string(n) + " values" : ""));
    }
    std::vector<T> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        out.push_back(read_scalar<T>(j[i], path + "[" + std::to_string(i) + "]"));
    }
    return out;
}

void from_json_value(const json& j, const std::string& path, GridDims& d) {
    const auto v = read_array<std::size_t>(j, path, 3);
    d = {v[0], v[1], v[2]};
}
void from_json_value(const json& j, const std::string& path, TriplaneDims& d) {
    const auto v = read_array<std::size_t>(j, path, 4);
    d = {v[0], v[1], v[2], v[3]};
}
void from_json_value(const json& j, const std::string& path, scene::IntRange& r) {
    const auto v = read_array<int>(j, path, 2);
    r = {v[0], v[1]};
}
void from_json_value(const json& j, const std::string& path, scene::Point3& p) {
    const auto v = read_array<double>(j, path, 3);
    p = {v[0], v[1], v[2]};
}
void from_json_value(const json& j, const std::string& path, std::array<double, 3>& a) {
    const auto v = read_array<double>(j, path, 3);
    a = {v[0], v[1], v[2]};
}
void from_json_value(const json& j, const std::string& path, std::vector<std::size_t>& v) {
    v = read_array<std::size_t>(j, path);
}
template <class T>
void from_json_value(const json& j, const std::string& path, T& v) {
    v = read_scalar<T>(j, path);
}

// ------------------------------------------------ visitors

class Writer {
public:
    explicit Writer(json& root) { stack_.push_back(&root); }

    template <class T>
    void field(const char* key, T& v) {
        (*stack_.back())[key] = to_json_value(v);
    }
    template <class F>
    void section(const char* key, F&& body) {
        json& child = (*stack_.back())[key] = json::object();
        stack_.push_back(&child);
        body();
        stack_.pop_back();
    }

private:
    std::vector<json*> stack_;
};

class Reader {
public:
    explicit Reader(const json& root) { push(root, ""); }

    template <class T>
    void field(const char* key, T& v) {
        Frame& f = frames_.back();
        f.known.insert(key);
        if (f.j->contains(key)) {
            from_json_value((*f.j)[key], join(f.path, key), v);
        }
    }
    template <class F>
    void section(const char* key, F&& body) {
        Frame& f = frames_.back();
        f.known.insert(key);
        if (!f.j->contains(key)) {
            return;
        }
        const std::string path = join(f.path, key);
        const json& child = (*f.j)[key];
        if (!child.is_object()) {
            throw ConfigError("key '" + path + "' must be an object");
        }
        push(child, path);
        body();
        pop();
    }
    void finish() { pop(); }

private:
    struct Frame {
        const json* j;
        std::string path;
        std::set<std::string> known;
    };
    static std::string join(const std::string& a, const char* b) { return a.empty() ? b : a + "." + b; }
    void push(const json& j, std::string path) {
        if (!j.is_object()) {
            throw ConfigError("configuration root must be an object");
        }
        frames_.push_back({&j, std::move(path), {}});
    }
    void pop() {
        const Frame& f = frames_.back();
        for (const auto& [k, _] : f.j->items()) {
            if (!f.known.count(k)) {
                throw ConfigError("unknown key '" + join(f.path, k.c_str()) + "'");
            }
        }
        frames_.pop_back();
    }
    std::vector<Frame> frames_;
};

template <class V>
void visit(V& v, RunConfig& c) {
    v.field("seed", c.seed);
    v.field("output_dir", c.output_dir);
    v.section("data", [&] {
        v.field("path", c.data.path);
        v.field("scenes", c.data.scenes);
        v.field("split", c.data.split);
        v.field("grid", c.data.scene.dims);
        v.section("scene", [&] {
            v.field("buildings", c.data.scene.buildings);
            v.field("vehicles", c.data.scene.vehicles);
            v.field("vegetation", c.data.scene.vegetation);
            v.field("raised_ground", c.data.scene.raised_ground);
            v.field("wall_behind_blob", c.data.scene.wall_behind_blob);
        });
        v.section("degrade", [&] {
            v.field("use_default_camera", c.data.degrade.use_default_camera);
            v.field("camera", c.data.degrade.camera);
            v.field("occluded_drop", c.data.degrade.occluded_drop);
            v.field("occluded_mislabel", c.data.degrade.occluded_mislabel);
            v.field("visible_noise", c.data.degrade.visible_noise);
        });
    });
    v.section("codec", [&] {
        v.field("kind", c.codec_kind);
        v.field("planes", c.codec.planes);
        v.field("class_embed", c.codec.class_embed);
        v.field("fourier_bands", c.codec.fourier_bands);
        v.field("freq_lo", c.codec.freq_lo);
        v.field("freq_hi", c.codec.freq_hi);
        v.field("heads", c.codec.heads);
        v.field("self_blocks", c.codec.self_blocks);
        v.field("mlp_ratio", c.codec.mlp_ratio);
        v.field("value_hidden", c.codec.value_hidden);
        v.field("attention_scale", c.codec.attention_scale);
        v.field("decoder_hidden", c.codec.decoder_hidden);
        v.field("decoder_conv", c.codec.decoder_conv);
        v.field("conv_hidden", c.codec.conv_hidden);
        v.section("loss", [&] {
            v.field("ce", c.codec.loss.ce);
            v.field("geo", c.codec.loss.geo);
            v.field("sem", c.codec.loss.sem);
        });
        v.section("train", [&] {
            v.field("iterations", c.codec_train.iterations);
            v.field("batch", c.codec_train.batch);
            v.field("lr", c.codec_train.lr);
            v.field("min_lr", c.codec_train.min_lr);
            v.field("warmup", c.codec_train.warmup);
            v.field("weight_decay", c.codec_train.weight_decay);
            v.field("grad_clip", c.codec_train.grad_clip);
            v.field("augment", c.codec_train.augment);
            v.field("eval_every", c.codec_train.eval_every);
            v.field("eval_scenes", c.codec_train.eval_scenes);
        });
    });
    v.section("dit", [&] {
        v.field("patch", c.dit.patch);
        v.field("embed", c.dit.embed);
        v.field("depth", c.dit.depth);
        v.field("heads", c.dit.heads);
        v.field("mlp_ratio", c.dit.mlp_ratio);
        v.field("freq_dims", c.dit.freq_dims);
    });
    v.section("flow", [&] {
        v.field("iterations", c.flow.iterations);
        v.field("batch", c.flow.batch);
        v.field("lr", c.flow.lr);
        v.field("min_lr", c.flow.min_lr);
        v.field("warmup", c.flow.warmup);
        v.field("weight_decay", c.flow.weight_decay);
        v.field("grad_clip", c.flow.grad_clip);
        v.field("fraction", c.flow.fraction);
        v.field("schedule_base", c.flow.schedule.base);
        v.field("target_ema", c.flow.target_ema);
    });
    v.section("eval", [&] {
        v.field("steps", c.eval.steps);
        v.field("refine_steps", c.eval.refine_steps);
        v.field("max_scenes", c.eval.max_scenes);
        v.field("residual_samples", c.eval.residual_samples);
        v.field("residual_threshold", c.eval.residual_threshold);
    });
}

json to_json(const RunConfig& cfg) {
    json root = json::object();
    Writer w(root);
    visit(w, const_cast<RunConfig&>(cfg));
    return root;
}

RunConfig from_json(const json& root) {
    RunConfig cfg;
    Reader r(root);
    visit(r, cfg);
    r.finish();
    cfg.resolve();
    return cfg;
}

json codec_structure(const RunConfig& c) {
    return json{{"kind", c.codec_kind},
                {"grid", to_json_value(c.codec.grid)},
                {"classes", c.codec.num_classes},
                {"planes", to_json_value(c.codec.planes)},
                {"class_embed", c.codec.class_embed},
                {"fourier_bands", c.codec.fourier_bands},
                {"freq", {c.codec.freq_lo, c.codec.freq_hi}},
                {"heads", c.codec.heads},
                {"self_blocks", c.codec.self_blocks},
                {"mlp_ratio", c.codec.mlp_ratio},
                {"value_hidden", c.codec.value_hidden},
                {"decoder_hidden", c.codec.decoder_hidden},
                {"decoder_conv", c.codec.decoder_conv},
                {"conv_hidden", c.codec.conv_hidden}};
}

}  // namespace

void RunConfig::resolve() {
    if (data.scenes == 0) {
        throw ConfigError("data.scenes must be positive");
    }
    if (std::abs(data.split[0] + data.split[1] + data.split[2] - 1.0) > 1e-9 || data.split[0] <= 0.0 ||
        data.split[1] < 0.0 || data.split[2] <= 0.0) {
        throw ConfigError("data.split must be non-negative, sum to 1 and leave train and test nonempty");
    }
    if (codec_kind != "cross_attention" && codec_kind != "conv_baseline") {
        throw ConfigError("codec.kind must be cross_attention or conv_baseline, got '" + codec_kind + "'");
    }
    codec.grid = data.scene.dims;
    codec.num_classes = data.scene.num_classes;
    codec.validate();
    codec_train.seed = seed;
    if (codec_train.batch == 0) {
        throw ConfigError("codec.train.batch must be positive");
    }
    if (codec_train.augment && data.scene.dims.x != data.scene.dims.y) {
        throw ConfigError("flip/rotation augmentation needs a square grid footprint");
    }
    dit.planes = codec.planes;
    dit.validate();
    flow.seed = seed;
    flow.schedule.validate();
    if (flow.batch == 0) {
        throw ConfigError("flow.batch must be positive");
    }
    if (!(flow.fraction >= 0.0 && flow.fraction <= 1.0)) {
        throw ConfigError("flow.fraction must be in [0, 1]");
    }
    if (!(flow.target_ema >= 0.0 && flow.target_ema < 1.0)) {
        throw ConfigError("flow.target_ema must be in [0, 1)");
    }
    for (std::size_t n : eval.steps) {
        if (!flow.schedule.admits_steps(n)) {
            throw ConfigError("eval.steps entry " + std::to_string(n) + " is not on the dyadic schedule");
        }
    }
    if (!flow.schedule.admits_steps(eval.refine_steps)) {
        throw ConfigError("eval.refine_steps is not on the dyadic schedule");
    }
}

RunConfig parse(std::string_view json_text, std::string_view origin) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string(origin) + ": " + e.what());
    }
    try {
        return from_json(root);
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(origin) + ": " + e.what());
    }
}

RunConfig load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw ConfigError("cannot read config file " + path.string());
    }
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path.string());
}

std::string dump(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

void apply_override(RunConfig& cfg, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("override '" + std::string(assignment) + "' is not of the form key=value");
    }
    const std::string key(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    json root = to_json(cfg);
    json* node = &root;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!node->is_object() || !node->contains(part)) {
            throw ConfigError("unknown key '" + key + "'");
        }
        node = &(*node)[part];
        if (dot == std::string::npos) {
            break;
        }
        start = dot + 1;
    }
    *node = value;
    cfg = from_json(root);
}

std::uint64_t codec_digest(const RunConfig& cfg) { return ckpt::digest(codec_structure(cfg).dump()); }

std::uint64_t flow_digest(const RunConfig& cfg) {
    const json s{{"codec", codec_structure(cfg)},
                 {"dit",
                  {cfg.dit.patch, cfg.dit.embed, cfg.dit.depth, cfg.dit.heads, cfg.dit.mlp_ratio, cfg.dit.freq_dims}},
                 {"schedule_base", cfg.flow.schedule.base}};
    return ckpt::digest(s.dump());
}

}  // namespace flowssc::config
