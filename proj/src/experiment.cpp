#include "gdpd/experiment.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "gdpd/checkpoint.hpp"

namespace gdpd {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- config parsing -----------------------------------------------------------------

namespace {

struct Problems {
    std::vector<std::string> items;
    void add(const std::string& s) { items.push_back(s); }
    void raise_if_any() const {
        if (items.empty()) return;
        std::string msg = "invalid config:";
        for (const auto& s : items) msg += "\n  - " + s;
        throw ConfigError(msg);
    }
};

void check_keys(const json& obj, const std::string& where, const std::set<std::string>& allowed,
                Problems& problems) {
    if (!obj.is_object()) {
        problems.add(where + ": expected an object");
        return;
    }
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key())) problems.add(where + ": unknown key '" + it.key() + "'");
}

template <typename T>
T get_or(const json& obj, const std::string& key, const T& fallback) {
    if (!obj.contains(key)) return fallback;
    return obj.at(key).get<T>();
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

ClassifierSpec parse_spec(const json& j, const std::string& where, Problems& problems) {
    check_keys(j, where, {"family", "depth", "width", "feature_layer"}, problems);
    ClassifierSpec s;
    try {
        s.family = family_from_string(get_or<std::string>(j, "family", "recurrent"));
    } catch (const ArgumentError& e) {
        problems.add(where + ": " + e.what());
    }
    s.depth = get_or(j, "depth", 1);
    s.width = get_or(j, "width", 8);
    s.feature_layer = get_or(j, "feature_layer", s.depth);
    if (s.depth < 1 || s.width < 1) problems.add(where + ": depth and width must be >= 1");
    if (s.feature_layer < 1 || s.feature_layer > s.depth)
        problems.add(where + ": feature_layer must be in [1, depth]");
    return s;
}

json spec_to_json(const ClassifierSpec& s) {
    json j;
    j["family"] = family_to_string(s.family);
    j["depth"] = s.depth;
    j["width"] = s.width;
    j["feature_layer"] = s.feature_layer;
    return j;
}

json dataset_to_json(const ExperimentConfig::DatasetCfg& d) {
    json j;
    j["kind"] = d.synthetic ? "synthetic" : "files";
    if (d.synthetic) {
        j["n"] = d.synth.n;
        j["channels"] = d.synth.channels;
        j["length"] = d.synth.length;
        j["classes"] = d.synth.class_count;
        j["prefix_snr"] = d.synth.prefix_snr;
        j["suffix_snr"] = d.synth.suffix_snr;
        j["seed"] = d.synth.seed;
        j["test_fraction"] = d.synth.test_fraction;
    } else {
        j["train_path"] = d.train_path;
        j["test_path"] = d.test_path;
        j["name"] = d.name;
        j["multivariate"] = d.multivariate;
    }
    j["resample_length"] = d.resample_length;
    j["normalize"] = d.normalize;
    j["val_fraction"] = d.val_fraction;
    j["val_seed"] = d.val_seed;
    return j;
}

json train_to_json(const TrainSchedule& t) {
    json j;
    j["epochs"] = t.total_epochs;
    j["warmup"] = t.warmup_epochs;
    j["lambda_task"] = t.lambda_task;
    j["lambda_kd"] = t.lambda_kd;
    j["j_samples"] = t.j_samples;
    j["nfe"] = t.nfe;
    j["batch_size"] = t.batch_size;
    j["lr"] = t.lr;
    j["lr_decay_factor"] = t.lr_decay_factor;
    j["lr_decay_epochs"] = t.lr_decay_epochs;
    j["temperature"] = t.temperature;
    j["diffusion_steps"] = t.diffusion_steps;
    j["beta_start"] = t.beta_start;
    j["beta_end"] = t.beta_end;
    j["beta_shape"] = t.schedule_shape == ScheduleShape::Linear ? "linear" : "cosine";
    j["denoiser_lr"] = t.denoiser_lr;
    j["denoiser_hidden"] = t.denoiser_hidden;
    j["denoiser_time_dim"] = t.denoiser_time_dim;
    return j;
}

}  // namespace

std::string mode_to_string(ExperimentConfig::Mode m) {
    using M = ExperimentConfig::Mode;
    switch (m) {
        case M::Standard: return "standard";
        case M::EarlinessSweep: return "earliness-sweep";
        case M::ChannelPartial: return "channel-partial";
        case M::Compression: return "compression";
        case M::SelfDistill: return "self-distill";
        case M::WeakTeacher: return "weak-teacher";
        case M::Transferability: return "transferability";
        case M::AblationWarmup: return "ablation:warmup";
        case M::AblationLambda: return "ablation:lambda";
        case M::AblationT: return "ablation:T";
        case M::AblationNfe: return "ablation:nfe";
        case M::AblationJ: return "ablation:J";
        case M::AblationLayer: return "ablation:layer";
    }
    return "?";
}

ExperimentConfig::Mode mode_from_string(const std::string& s) {
    using M = ExperimentConfig::Mode;
    static const std::map<std::string, M> table = {
        {"standard", M::Standard},
        {"earliness-sweep", M::EarlinessSweep},
        {"channel-partial", M::ChannelPartial},
        {"compression", M::Compression},
        {"self-distill", M::SelfDistill},
        {"weak-teacher", M::WeakTeacher},
        {"transferability", M::Transferability},
        {"ablation:warmup", M::AblationWarmup},
        {"ablation:lambda", M::AblationLambda},
        {"ablation:T", M::AblationT},
        {"ablation:nfe", M::AblationNfe},
        {"ablation:J", M::AblationJ},
        {"ablation:layer", M::AblationLayer},
    };
    auto it = table.find(s);
    if (it == table.end()) throw ConfigError("unknown mode: " + s);
    return it->second;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), {});
    return from_json_text(text);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }

    Problems problems;
    check_keys(j, "config",
               {"mode", "output_dir", "seeds", "methods", "dataset", "partialness", "teacher",
                "student", "train", "mode_params"},
               problems);

    ExperimentConfig cfg;
    try {
        cfg.mode = mode_from_string(get_or<std::string>(j, "mode", "standard"));
    } catch (const ConfigError& e) {
        problems.add(e.what());
    }
    cfg.output_dir = get_or<std::string>(j, "output_dir", "out");

    if (!j.contains("seeds") || !j["seeds"].is_array() || j["seeds"].empty())
        problems.add("seeds: required non-empty array");
    else {
        for (const auto& v : j["seeds"]) cfg.seeds.push_back(v.get<std::uint64_t>());
        std::set<std::uint64_t> uniq(cfg.seeds.begin(), cfg.seeds.end());
        if (uniq.size() != cfg.seeds.size()) problems.add("seeds: entries must be distinct");
    }

    if (!j.contains("methods") || !j["methods"].is_array() || j["methods"].empty())
        problems.add("methods: required non-empty array");
    else {
        for (const auto& v : j["methods"]) {
            const auto m = v.get<std::string>();
            if (m != "base" && m != "logit-kd" && m != "feature-kd" && m != "gdpd")
                problems.add("methods: unknown method '" + m + "'");
            cfg.methods.push_back(m);
        }
    }

    if (j.contains("dataset")) {
        const auto& d = j["dataset"];
        check_keys(d, "dataset",
                   {"kind", "train_path", "test_path", "name", "multivariate", "n", "channels",
                    "length", "classes", "prefix_snr", "suffix_snr", "seed", "test_fraction",
                    "resample_length", "normalize", "val_fraction", "val_seed"},
                   problems);
        const auto kind = get_or<std::string>(d, "kind", "synthetic");
        if (kind == "synthetic") {
            cfg.dataset.synthetic = true;
            cfg.dataset.synth.n = get_or(d, "n", 600);
            cfg.dataset.synth.channels = get_or(d, "channels", 1);
            cfg.dataset.synth.length = get_or(d, "length", 100);
            cfg.dataset.synth.class_count = get_or(d, "classes", 2);
            cfg.dataset.synth.prefix_snr = get_or(d, "prefix_snr", 0.5);
            cfg.dataset.synth.suffix_snr = get_or(d, "suffix_snr", 4.0);
            cfg.dataset.synth.seed = get_or<std::uint64_t>(d, "seed", 1);
            cfg.dataset.synth.test_fraction = get_or(d, "test_fraction", 0.5);
        } else if (kind == "files") {
            cfg.dataset.synthetic = false;
            cfg.dataset.train_path = get_or<std::string>(d, "train_path", "");
            cfg.dataset.test_path = get_or<std::string>(d, "test_path", "");
            cfg.dataset.name = get_or<std::string>(d, "name", "");
            cfg.dataset.multivariate = get_or(d, "multivariate", false);
            if (cfg.dataset.train_path.empty()) problems.add("dataset.train_path: required for kind=files");
            if (cfg.dataset.test_path.empty()) problems.add("dataset.test_path: required for kind=files");
        } else {
            problems.add("dataset.kind: must be 'synthetic' or 'files'");
        }
        cfg.dataset.resample_length = get_or(d, "resample_length", 100);
        cfg.dataset.normalize = get_or<std::string>(d, "normalize", "per-series");
        if (cfg.dataset.normalize != "per-series" && cfg.dataset.normalize != "train-set" &&
            cfg.dataset.normalize != "none")
            problems.add("dataset.normalize: must be per-series, train-set or none");
        cfg.dataset.val_fraction = get_or(d, "val_fraction", 0.2);
        cfg.dataset.val_seed = get_or<std::uint64_t>(d, "val_seed", 17);
    } else {
        problems.add("dataset: required section");
    }

    if (j.contains("partialness")) {
        const auto& p = j["partialness"];
        check_keys(p, "partialness", {"earliness", "channel_fraction", "channel_rule", "channels", "seed"},
                   problems);
        cfg.partialness.earliness = get_or(p, "earliness", 0.5);
        cfg.partialness.channel_fraction = get_or(p, "channel_fraction", 1.0);
        const auto rule = get_or<std::string>(p, "channel_rule", "keep-first-k");
        if (rule == "keep-first-k")
            cfg.partialness.channel_rule = PartialnessSpec::ChannelRule::KeepFirstK;
        else if (rule == "keep-explicit-list")
            cfg.partialness.channel_rule = PartialnessSpec::ChannelRule::KeepExplicitList;
        else
            problems.add("partialness.channel_rule: must be keep-first-k or keep-explicit-list");
        if (p.contains("channels"))
            for (const auto& v : p["channels"]) cfg.partialness.explicit_channels.push_back(v.get<int>());
        cfg.partialness.seed = get_or<std::uint64_t>(p, "seed", 0);
        if (!(cfg.partialness.earliness > 0 && cfg.partialness.earliness <= 1))
            problems.add("partialness.earliness: must be in (0,1]");
        if (!(cfg.partialness.channel_fraction > 0 && cfg.partialness.channel_fraction <= 1))
            problems.add("partialness.channel_fraction: must be in (0,1]");
    }

    if (j.contains("teacher")) {
        const auto& t = j["teacher"];
        check_keys(t, "teacher", {"family", "depth", "width", "feature_layer", "inits", "epochs", "lr"},
                   problems);
        json spec_part = t;
        spec_part.erase("inits");
        spec_part.erase("epochs");
        spec_part.erase("lr");
        cfg.teacher.spec = parse_spec(spec_part, "teacher", problems);
        cfg.teacher.inits = get_or(t, "inits", 5);
        cfg.teacher.epochs = get_or(t, "epochs", -1);
        cfg.teacher.lr = get_or(t, "lr", -1.0);
        if (cfg.teacher.inits < 1) problems.add("teacher.inits: must be >= 1");
    } else {
        problems.add("teacher: required section");
    }

    if (j.contains("student"))
        cfg.student = parse_spec(j["student"], "student", problems);
    else
        problems.add("student: required section");

    if (j.contains("train")) {
        const auto& t = j["train"];
        check_keys(t, "train",
                   {"epochs", "warmup", "lambda_task", "lambda_kd", "j_samples", "nfe", "batch_size",
                    "lr", "lr_decay_factor", "lr_decay_epochs", "temperature", "diffusion_steps",
                    "beta_start", "beta_end", "beta_shape", "denoiser_lr", "denoiser_hidden",
                    "denoiser_time_dim"},
                   problems);
        auto& ts = cfg.train;
        ts.total_epochs = get_or(t, "epochs", 600);
        ts.warmup_epochs = get_or(t, "warmup", 300);
        ts.lambda_task = get_or(t, "lambda_task", 1.0);
        ts.lambda_kd = get_or(t, "lambda_kd", 1.0);
        ts.j_samples = get_or(t, "j_samples", 1);
        ts.nfe = get_or(t, "nfe", 5);
        ts.batch_size = get_or(t, "batch_size", 64);
        ts.lr = get_or(t, "lr", 0.01);
        ts.lr_decay_factor = get_or(t, "lr_decay_factor", 0.5);
        ts.lr_decay_epochs = get_or(t, "lr_decay_epochs", std::vector<int>{25, 30, 35});
        ts.temperature = get_or(t, "temperature", 4.0);
        ts.diffusion_steps = get_or(t, "diffusion_steps", 1000);
        ts.beta_start = get_or(t, "beta_start", 1e-4);
        ts.beta_end = get_or(t, "beta_end", 0.02);
        const auto shape = get_or<std::string>(t, "beta_shape", "linear");
        if (shape == "linear")
            ts.schedule_shape = ScheduleShape::Linear;
        else if (shape == "cosine")
            ts.schedule_shape = ScheduleShape::Cosine;
        else
            problems.add("train.beta_shape: must be linear or cosine");
        ts.denoiser_lr = get_or(t, "denoiser_lr", 1e-3);
        ts.denoiser_hidden = get_or(t, "denoiser_hidden", 256);
        ts.denoiser_time_dim = get_or(t, "denoiser_time_dim", 64);
        try {
            ts.validate();
        } catch (const ArgumentError& e) {
            problems.add(std::string("train: ") + e.what());
        }
    } else {
        problems.add("train: required section");
    }

    if (j.contains("mode_params")) {
        const auto& m = j["mode_params"];
        check_keys(m, "mode_params",
                   {"earliness_grid", "channel_fraction", "weak_teacher_grid", "warmup_grid",
                    "lambda_grid", "t_grid", "nfe_grid", "j_grid", "layer_grid", "suffix_fraction"},
                   problems);
        auto& mp = cfg.mode_params;
        if (m.contains("earliness_grid")) mp.earliness_grid = m["earliness_grid"].get<std::vector<double>>();
        mp.channel_fraction = get_or(m, "channel_fraction", 0.5);
        if (m.contains("weak_teacher_grid")) {
            mp.weak_teacher_grid.clear();
            for (const auto& pair : m["weak_teacher_grid"]) {
                if (!pair.is_array() || pair.size() != 2)
                    problems.add("mode_params.weak_teacher_grid: entries must be [keep, noise] pairs");
                else
                    mp.weak_teacher_grid.emplace_back(pair[0].get<double>(), pair[1].get<double>());
            }
        }
        if (m.contains("warmup_grid")) mp.warmup_grid = m["warmup_grid"].get<std::vector<int>>();
        if (m.contains("lambda_grid")) mp.lambda_grid = m["lambda_grid"].get<std::vector<double>>();
        if (m.contains("t_grid")) mp.t_grid = m["t_grid"].get<std::vector<int>>();
        if (m.contains("nfe_grid")) mp.nfe_grid = m["nfe_grid"].get<std::vector<int>>();
        if (m.contains("j_grid")) mp.j_grid = m["j_grid"].get<std::vector<int>>();
        if (m.contains("layer_grid")) {
            mp.layer_grid.clear();
            for (const auto& pair : m["layer_grid"]) {
                if (!pair.is_array() || pair.size() != 2)
                    problems.add("mode_params.layer_grid: entries must be [teacher, student] pairs");
                else
                    mp.layer_grid.emplace_back(pair[0].get<int>(), pair[1].get<int>());
            }
        }
        mp.suffix_fraction = get_or(m, "suffix_fraction", 0.5);
    }

    // mode-specific completeness, checked before any training
    using M = ExperimentConfig::Mode;
    switch (cfg.mode) {
        case M::EarlinessSweep:
            if (cfg.mode_params.earliness_grid.empty()) problems.add("mode_params.earliness_grid: required");
            break;
        case M::ChannelPartial:
            if (!(cfg.mode_params.channel_fraction > 0 && cfg.mode_params.channel_fraction <= 1))
                problems.add("mode_params.channel_fraction: must be in (0,1]");
            break;
        case M::SelfDistill:
            if (cfg.partialness.earliness != 1.0)
                problems.add("partialness.earliness: self-distill requires e = 1.0");
            if (j.contains("teacher") && j.contains("student") &&
                spec_to_json(cfg.teacher.spec) != spec_to_json(cfg.student))
                problems.add("student: self-distill requires the teacher architecture");
            break;
        case M::WeakTeacher:
            if (cfg.mode_params.weak_teacher_grid.empty())
                problems.add("mode_params.weak_teacher_grid: required");
            break;
        case M::AblationWarmup:
            if (cfg.mode_params.warmup_grid.empty()) problems.add("mode_params.warmup_grid: required");
            for (int w : cfg.mode_params.warmup_grid)
                if (w < 0 || w > cfg.train.total_epochs)
                    problems.add("mode_params.warmup_grid: entries must be in [0, epochs]");
            break;
        case M::AblationLambda:
            if (cfg.mode_params.lambda_grid.empty()) problems.add("mode_params.lambda_grid: required");
            break;
        case M::AblationT:
            if (cfg.mode_params.t_grid.empty()) problems.add("mode_params.t_grid: required");
            for (int t : cfg.mode_params.t_grid)
                if (t < std::max(1, cfg.train.nfe)) problems.add("mode_params.t_grid: entries must be >= nfe");
            break;
        case M::AblationNfe:
            if (cfg.mode_params.nfe_grid.empty()) problems.add("mode_params.nfe_grid: required");
            for (int v : cfg.mode_params.nfe_grid)
                if (v < 0 || v > cfg.train.diffusion_steps)
                    problems.add("mode_params.nfe_grid: entries must be in [0, T]");
            break;
        case M::AblationJ:
            if (cfg.mode_params.j_grid.empty()) problems.add("mode_params.j_grid: required");
            for (int v : cfg.mode_params.j_grid)
                if (v < 1) problems.add("mode_params.j_grid: entries must be >= 1");
            break;
        case M::AblationLayer:
            if (cfg.mode_params.layer_grid.empty()) problems.add("mode_params.layer_grid: required");
            for (auto [tl, sl] : cfg.mode_params.layer_grid) {
                if (tl < 1 || tl > cfg.teacher.spec.depth)
                    problems.add("mode_params.layer_grid: teacher layer out of range");
                if (sl < 1 || sl > cfg.student.depth)
                    problems.add("mode_params.layer_grid: student layer out of range");
            }
            break;
        default: break;
    }

    problems.raise_if_any();
    return cfg;
}

std::string ExperimentConfig::canonical_json() const {
    json j;
    j["mode"] = mode_to_string(mode);
    j["output_dir"] = output_dir;
    j["seeds"] = seeds;
    j["methods"] = methods;
    j["dataset"] = dataset_to_json(dataset);
    json p;
    p["earliness"] = partialness.earliness;
    p["channel_fraction"] = partialness.channel_fraction;
    p["channel_rule"] = partialness.channel_rule == PartialnessSpec::ChannelRule::KeepFirstK
                            ? "keep-first-k"
                            : "keep-explicit-list";
    p["channels"] = partialness.explicit_channels;
    p["seed"] = partialness.seed;
    j["partialness"] = p;
    json t = spec_to_json(teacher.spec);
    t["inits"] = teacher.inits;
    t["epochs"] = teacher.epochs;
    t["lr"] = teacher.lr;
    j["teacher"] = t;
    j["student"] = spec_to_json(student);
    j["train"] = train_to_json(train);
    json m;
    m["earliness_grid"] = mode_params.earliness_grid;
    m["channel_fraction"] = mode_params.channel_fraction;
    m["weak_teacher_grid"] = mode_params.weak_teacher_grid;
    m["warmup_grid"] = mode_params.warmup_grid;
    m["lambda_grid"] = mode_params.lambda_grid;
    m["t_grid"] = mode_params.t_grid;
    m["nfe_grid"] = mode_params.nfe_grid;
    m["j_grid"] = mode_params.j_grid;
    m["layer_grid"] = mode_params.layer_grid;
    m["suffix_fraction"] = mode_params.suffix_fraction;
    j["mode_params"] = m;
    return j.dump(2);
}

std::string ExperimentConfig::config_hash() const { return hex64(fnv1a(canonical_json())); }

std::string ExperimentConfig::teacher_hash() const {
    json j;
    j["dataset"] = dataset_to_json(dataset);
    j["teacher"] = spec_to_json(teacher.spec);
    j["inits"] = teacher.inits;
    j["epochs"] = teacher.epochs > 0 ? teacher.epochs : train.total_epochs;
    j["lr"] = teacher.lr > 0 ? teacher.lr : train.lr;
    j["batch_size"] = train.batch_size;
    j["lr_decay_factor"] = train.lr_decay_factor;
    j["lr_decay_epochs"] = train.lr_decay_epochs;
    return hex64(fnv1a(j.dump()));
}

// ---- running ------------------------------------------------------------------------

namespace {

struct SubSetting {
    std::string key;
    PartialnessSpec part;
    TrainSchedule train;
    int teacher_layer = 0;
    int student_layer = 0;
    double teacher_keep = 1.0, teacher_noise = 0.0;
    bool degraded_teacher = false;
    bool want_transfer = false;
};

std::vector<SubSetting> expand_mode(const ExperimentConfig& cfg) {
    using M = ExperimentConfig::Mode;
    std::vector<SubSetting> subs;
    SubSetting base;
    base.key = "main";
    base.part = cfg.partialness;
    base.train = cfg.train;
    base.teacher_layer = cfg.teacher.spec.feature_layer;
    base.student_layer = cfg.student.feature_layer;

    char buf[64];
    switch (cfg.mode) {
        case M::Standard:
        case M::Compression: subs.push_back(base); break;
        case M::SelfDistill:
            base.part.earliness = 1.0;
            base.part.channel_fraction = 1.0;
            subs.push_back(base);
            break;
        case M::Transferability:
            base.want_transfer = true;
            subs.push_back(base);
            break;
        case M::EarlinessSweep:
            for (double e : cfg.mode_params.earliness_grid) {
                SubSetting s = base;
                std::snprintf(buf, sizeof buf, "e_%.2f", e);
                s.key = buf;
                s.part.earliness = e;
                subs.push_back(s);
            }
            break;
        case M::ChannelPartial: {
            SubSetting t = base;
            t.key = "time_only";
            t.part.channel_fraction = 1.0;
            subs.push_back(t);
            SubSetting tc = base;
            tc.key = "time_channel";
            tc.part.channel_fraction = cfg.mode_params.channel_fraction;
            subs.push_back(tc);
            break;
        }
        case M::WeakTeacher: {
            int i = 0;
            for (auto [keep, noise] : cfg.mode_params.weak_teacher_grid) {
                SubSetting s = base;
                std::snprintf(buf, sizeof buf, "wt_%d", ++i);
                s.key = buf;
                s.teacher_keep = keep;
                s.teacher_noise = noise;
                s.degraded_teacher = keep < 1.0 || noise > 0.0;
                subs.push_back(s);
            }
            break;
        }
        case M::AblationWarmup:
            for (int w : cfg.mode_params.warmup_grid) {
                SubSetting s = base;
                std::snprintf(buf, sizeof buf, "warmup_%d", w);
                s.key = buf;
                s.train.warmup_epochs = w;
                subs.push_back(s);
            }
            break;
        case M::AblationLambda:
            for (double v : cfg.mode_params.lambda_grid) {
                SubSetting s = base;
                std::snprintf(buf, sizeof buf, "lambda_%g", v);
                s.key = buf;
                s.train.lambda_kd = v;
                subs.push_back(s);
            }
            break;
        case M::AblationT:
            for (int v : cfg.mode_params.t_grid) {
                SubSetting s = base;
                std::snprintf(buf, sizeof buf, "t_%d", v);
                s.key = buf;
                s.train.diffusion_steps = v;
                s.train.nfe = std::min(s.train.nfe, v);
                subs.push_back(s);
            }
            break;
        case M::AblationNfe:
            for (int v : cfg.mode_params.nfe_grid) {
                SubSetting s = base;
                std::snprintf(buf, sizeof buf, "nfe_%d", v);
                s.key = buf;
                s.train.nfe = v;
                subs.push_back(s);
            }
            break;
        case M::AblationJ:
            for (int v : cfg.mode_params.j_grid) {
                SubSetting s = base;
                std::snprintf(buf, sizeof buf, "j_%d", v);
                s.key = buf;
                s.train.j_samples = v;
                subs.push_back(s);
            }
            break;
        case M::AblationLayer:
            for (auto [tl, sl] : cfg.mode_params.layer_grid) {
                SubSetting s = base;
                std::snprintf(buf, sizeof buf, "tl%d_sl%d", tl, sl);
                s.key = buf;
                s.teacher_layer = tl;
                s.student_layer = sl;
                subs.push_back(s);
            }
            break;
    }
    return subs;
}

TimeSeriesDataset prepare_dataset(const ExperimentConfig::DatasetCfg& d) {
    TimeSeriesDataset ds;
    if (d.synthetic) {
        ds = make_synthetic_late_signal(d.synth);
    } else {
        ds = load_train_test_pair(d.train_path, d.test_path,
                                  d.multivariate ? DataLayout::Multivariate : DataLayout::Univariate,
                                  d.name);
    }
    if (d.resample_length > 0 && d.resample_length != ds.length())
        ds = resample_to_length(ds, d.resample_length);
    if (d.normalize == "per-series")
        ds = z_normalize(ds, NormScope::PerSeries);
    else if (d.normalize == "train-set")
        ds = z_normalize(ds, NormScope::TrainSet);
    if (d.val_fraction > 0.0) ds = carve_validation(ds, d.val_fraction, d.val_seed);
    return ds;
}

void atomic_write(const fs::path& path, const std::string& content) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << content;
    }
    fs::rename(tmp, path);
}

std::string cell_hash(const std::string& teacher_hash, const SubSetting& sub, const ClassifierSpec& student,
                      const std::string& method, std::uint64_t seed, double suffix_fraction) {
    json j;
    j["teacher"] = teacher_hash;
    j["sub"] = sub.key;
    j["earliness"] = sub.part.earliness;
    j["channel_fraction"] = sub.part.channel_fraction;
    j["channels"] = sub.part.explicit_channels;
    j["student"] = spec_to_json(student);
    j["student_layer"] = sub.student_layer;
    j["teacher_layer"] = sub.teacher_layer;
    j["train"] = train_to_json(sub.train);
    j["method"] = method;
    j["seed"] = seed;
    j["teacher_keep"] = sub.teacher_keep;
    j["teacher_noise"] = sub.teacher_noise;
    if (sub.want_transfer) j["suffix_fraction"] = suffix_fraction;
    return hex64(fnv1a(j.dump()));
}

struct TransferRow {
    std::string method;
    int seed = 0;
    double linear_probe = 0, zero_shot = 0;
};

void write_transfer_rows(const std::vector<TransferRow>& rows, const fs::path& path) {
    std::ostringstream ss;
    ss << "method\tseed\tlinear_probe_auc_prc\tzero_shot_auc_prc\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s\t%d\t%.6f\t%.6f\n", r.method.c_str(), r.seed, r.linear_probe,
                      r.zero_shot);
        ss << buf;
    }
    atomic_write(path, ss.str());
}

std::string row_to_text(const ReportRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s\t%s\t%d\t%.6f\t%.6f\t%.6f\t%.6f\n", r.dataset.c_str(),
                  r.method.c_str(), r.seed, r.auc_prc, r.auc_roc, r.accuracy, r.fidelity);
    return std::string("dataset\tmethod\tseed\tauc_prc\tauc_roc\taccuracy\tfidelity\n") + buf;
}

}  // namespace

MetricsReport load_report(const fs::path& sub_dir) {
    MetricsReport rep;
    rep.rows = read_report_rows((sub_dir / "report.tsv").string());
    rep.aggregates = aggregate(rep.rows);
    return rep;
}

RunOutput run(const ExperimentConfig& cfg) {
    RunOutput out;
    const char* root_env = std::getenv("GDPD_OUTPUT_ROOT");
    const fs::path root = root_env && *root_env ? fs::path(root_env) : fs::current_path();
    out.out_dir = root / cfg.output_dir;
    fs::create_directories(out.out_dir);
    atomic_write(out.out_dir / "config.json", cfg.canonical_json());

    const TimeSeriesDataset full = prepare_dataset(cfg.dataset);
    const std::string dataset_name = full.name;

    const auto subs = expand_mode(cfg);
    for (const auto& sub : subs) {
        const fs::path sub_dir = out.out_dir / sub.key;
        fs::create_directories(sub_dir / "cells");

        // teacher: reuse by content hash when present
        ClassifierSpec tspec = cfg.teacher.spec;
        tspec.class_count = full.class_count;
        tspec.input_channels = full.channels();

        TrainSchedule tsched = cfg.train;
        tsched.total_epochs = cfg.teacher.epochs > 0 ? cfg.teacher.epochs : cfg.train.total_epochs;
        tsched.warmup_epochs = 0;
        if (cfg.teacher.lr > 0) tsched.lr = cfg.teacher.lr;
        tsched.teacher_inits = cfg.teacher.inits;

        std::string thash = cfg.teacher_hash();
        TimeSeriesDataset teacher_data = full;
        if (sub.degraded_teacher) {
            teacher_data = degrade_supervision(full, sub.teacher_keep, sub.teacher_noise,
                                               cfg.dataset.val_seed ^ 0x77740000u);
            json extra;
            extra["base"] = thash;
            extra["keep"] = sub.teacher_keep;
            extra["noise"] = sub.teacher_noise;
            thash = hex64(fnv1a(extra.dump()));
        }
        tsched.seed = fnv1a(thash);

        const fs::path teacher_path = out.out_dir / ("teacher_" + thash + ".ckpt");
        Classifier teacher = [&]() {
            if (fs::exists(teacher_path)) return load_classifier(teacher_path.string());
            auto res = train_teacher(tspec, teacher_data, tsched);
            save_classifier(res.model, (teacher_path.string() + ".tmp"));
            fs::rename(teacher_path.string() + ".tmp", teacher_path);
            return std::move(res.model);
        }();

        // distillation targets always come from the clean full-length data
        const auto cache = cache_teacher_features(teacher, full, sub.teacher_layer);

        // student view and evaluation targets
        const TimeSeriesDataset partial = apply_partialness(full, sub.part);
        const auto test_idx = full.indices_of(Split::Test);
        std::vector<int> test_labels;
        for (int i : test_idx) test_labels.push_back(full.labels[i]);
        const auto teacher_top1 = argmax_rows(predict_scores(teacher, full, test_idx));

        ClassifierSpec sspec = cfg.student;
        sspec.feature_layer = sub.student_layer;
        sspec.class_count = full.class_count;
        sspec.input_channels = partial.channels();

        std::vector<ReportRow> rows;
        std::vector<TransferRow> transfer_rows;
        for (const auto& method : cfg.methods) {
            for (std::uint64_t seed : cfg.seeds) {
                const std::string hash =
                    cell_hash(thash, sub, sspec, method, seed, cfg.mode_params.suffix_fraction);
                const fs::path row_path = sub_dir / "cells" / (hash + ".row.tsv");
                const fs::path transfer_path = sub_dir / "cells" / (hash + ".transfer.tsv");

                if (fs::exists(row_path) && (!sub.want_transfer || fs::exists(transfer_path))) {
                    auto prev = read_report_rows(row_path.string());
                    if (prev.size() == 1) {
                        rows.push_back(prev[0]);
                        if (sub.want_transfer) {
                            std::ifstream in(transfer_path);
                            std::string line;
                            std::getline(in, line);
                            TransferRow tr;
                            in >> tr.method >> tr.seed >> tr.linear_probe >> tr.zero_shot;
                            tr.method = method;
                            transfer_rows.push_back(tr);
                        }
                        ++out.cells_reused;
                        continue;
                    }
                }

                TrainSchedule cell_sched = sub.train;
                cell_sched.seed = seed;
                TrainResult res = [&]() {
                    if (method == "gdpd") return train_student_gdpd(sspec, cache, partial, cell_sched);
                    return train_student_baseline(sspec, partial, baseline_from_string(method),
                                                  cell_sched, &cache);
                }();

                ReportRow row;
                row.dataset = dataset_name;
                row.method = method;
                row.seed = static_cast<int>(seed);
                const Mat scores = predict_scores(res.model, partial, test_idx);
                row.auc_prc = auc_prc(scores, test_labels);
                row.auc_roc = auc_roc(scores, test_labels);
                row.accuracy = accuracy(scores, test_labels);
                row.fidelity = top1_agreement(argmax_rows(scores), teacher_top1);

                write_epoch_log(res.log, (sub_dir / "cells" / (hash + ".log.tsv")).string());
                save_classifier(res.model, (sub_dir / "cells" / (hash + ".ckpt")).string());
                if (res.denoiser) save_denoiser(*res.denoiser, (sub_dir / "cells" / (hash + ".den.ckpt")).string());

                if (sub.want_transfer) {
                    TransferRow tr;
                    tr.method = method;
                    tr.seed = static_cast<int>(seed);
                    tr.linear_probe = linear_probe_suffix(res.model, full, cfg.mode_params.suffix_fraction);
                    tr.zero_shot = zero_shot_suffix(res.model, full, cfg.mode_params.suffix_fraction);
                    transfer_rows.push_back(tr);
                    char buf[160];
                    std::snprintf(buf, sizeof buf, "%s\t%d\t%.6f\t%.6f\n", method.c_str(), tr.seed,
                                  tr.linear_probe, tr.zero_shot);
                    atomic_write(transfer_path,
                                 std::string("method\tseed\tlinear_probe_auc_prc\tzero_shot_auc_prc\n") + buf);
                }

                atomic_write(row_path, row_to_text(row));
                rows.push_back(row);
                ++out.cells_trained;
            }
        }

        MetricsReport rep;
        rep.rows = rows;
        rep.aggregates = aggregate(rows);
        write_report_rows(rep.rows, (sub_dir / "report.tsv").string());
        write_report_aggregates(rep.aggregates, (sub_dir / "aggregates.tsv").string());
        if (sub.want_transfer) write_transfer_rows(transfer_rows, sub_dir / "transfer.tsv");

        out.subs.push_back({sub.key, std::move(rep), sub_dir});
    }
    return out;
}

// ---- plotting -------------------------------------------------------------------------

namespace {

const std::map<std::string, std::string> kMethodColor = {
    {"base", "#7f7f7f"},
    {"logit-kd", "#1f77b4"},
    {"feature-kd", "#2ca02c"},
    {"gdpd", "#d62728"},
};

std::string color_of(const std::string& method) {
    auto it = kMethodColor.find(method);
    return it == kMethodColor.end() ? "#9467bd" : it->second;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

// minimal deterministic svg text builder
struct Svg {
    std::ostringstream ss;
    Svg(int w, int h) {
        ss << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
           << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
        ss << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
    }
    void rect(double x, double y, double w, double h, const std::string& fill) {
        ss << "<rect class=\"bar\" x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(w)
           << "\" height=\"" << fmt(h) << "\" fill=\"" << fill << "\"/>\n";
    }
    void line(double x1, double y1, double x2, double y2, const std::string& stroke, double width = 1.0) {
        ss << "<line x1=\"" << fmt(x1) << "\" y1=\"" << fmt(y1) << "\" x2=\"" << fmt(x2) << "\" y2=\""
           << fmt(y2) << "\" stroke=\"" << stroke << "\" stroke-width=\"" << fmt(width) << "\"/>\n";
    }
    void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
        ss << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"2\" points=\"";
        for (const auto& [x, y] : pts) ss << fmt(x) << "," << fmt(y) << " ";
        ss << "\"/>\n";
    }
    void circle(double x, double y, const std::string& fill) {
        ss << "<circle cx=\"" << fmt(x) << "\" cy=\"" << fmt(y) << "\" r=\"3\" fill=\"" << fill << "\"/>\n";
    }
    void text(double x, double y, const std::string& s, int size = 11,
              const std::string& anchor = "middle") {
        ss << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" font-size=\"" << size
           << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\">" << s << "</text>\n";
    }
    std::string finish() {
        ss << "</svg>\n";
        return ss.str();
    }
};

struct SubData {
    std::string key;
    std::vector<ReportRow> rows;
};

// per-method mean of a column over all rows of a sub-report
double method_mean(const std::vector<ReportRow>& rows, const std::string& method, bool fidelity) {
    double sum = 0;
    int n = 0;
    for (const auto& r : rows)
        if (r.method == method) {
            sum += fidelity ? r.fidelity : r.auc_prc;
            ++n;
        }
    return n ? sum / n : 0.0;
}

void grouped_bars(const std::vector<SubData>& subs, const std::vector<std::string>& methods,
                  bool fidelity, const std::string& title, const fs::path& path) {
    const int W = 640, H = 360, ml = 50, mr = 20, mt = 40, mb = 60;
    Svg svg(W, H);
    svg.text(W / 2.0, 22, title, 14);
    const double plot_w = W - ml - mr, plot_h = H - mt - mb;
    for (int g = 0; g <= 5; ++g) {
        const double y = mt + plot_h * (1.0 - g / 5.0);
        svg.line(ml, y, W - mr, y, "#dddddd");
        svg.text(ml - 6, y + 4, fmt(g / 5.0), 10, "end");
    }
    const double group_w = plot_w / subs.size();
    const double bar_w = group_w * 0.8 / methods.size();
    for (std::size_t si = 0; si < subs.size(); ++si) {
        for (std::size_t mi = 0; mi < methods.size(); ++mi) {
            const double v = method_mean(subs[si].rows, methods[mi], fidelity);
            const double x = ml + group_w * si + group_w * 0.1 + bar_w * mi;
            const double h = plot_h * v;
            svg.rect(x, mt + plot_h - h, bar_w * 0.9, h, color_of(methods[mi]));
        }
        svg.text(ml + group_w * (si + 0.5), H - mb + 16, subs[si].key, 10);
    }
    // legend
    double lx = ml;
    for (const auto& m : methods) {
        svg.rect(lx, H - 24, 10, 10, color_of(m));
        svg.text(lx + 14, H - 15, m, 10, "start");
        lx += 14 + 8.0 * m.size() + 18;
    }
    atomic_write(path, svg.finish());
}

void sweep_lines(const std::vector<SubData>& subs, const std::vector<std::string>& methods,
                 const std::string& xlabel, const std::string& title, const fs::path& path) {
    const int W = 640, H = 360, ml = 50, mr = 20, mt = 40, mb = 60;
    Svg svg(W, H);
    svg.text(W / 2.0, 22, title, 14);
    const double plot_w = W - ml - mr, plot_h = H - mt - mb;
    for (int g = 0; g <= 5; ++g) {
        const double y = mt + plot_h * (1.0 - g / 5.0);
        svg.line(ml, y, W - mr, y, "#dddddd");
        svg.text(ml - 6, y + 4, fmt(g / 5.0), 10, "end");
    }
    const double step = subs.size() > 1 ? plot_w / (subs.size() - 1) : 0.0;
    for (const auto& m : methods) {
        std::vector<std::pair<double, double>> pts;
        for (std::size_t si = 0; si < subs.size(); ++si) {
            const double v = method_mean(subs[si].rows, m, false);
            pts.emplace_back(ml + step * si, mt + plot_h * (1.0 - v));
        }
        svg.polyline(pts, color_of(m));
        for (const auto& [x, y] : pts) svg.circle(x, y, color_of(m));
    }
    for (std::size_t si = 0; si < subs.size(); ++si)
        svg.text(ml + step * si, H - mb + 16, subs[si].key, 10);
    svg.text(W / 2.0, H - mb + 34, xlabel, 11);
    double lx = ml;
    for (const auto& m : methods) {
        svg.rect(lx, H - 24, 10, 10, color_of(m));
        svg.text(lx + 14, H - 15, m, 10, "start");
        lx += 14 + 8.0 * m.size() + 18;
    }
    atomic_write(path, svg.finish());
}

}  // namespace

std::vector<fs::path> emit_plots(const fs::path& out_dir) {
    std::vector<SubData> subs;
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(out_dir))
        if (entry.is_directory() && fs::exists(entry.path() / "report.tsv")) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) subs.push_back({d.filename().string(), read_report_rows((d / "report.tsv").string())});

    std::set<std::string> method_set;
    for (const auto& s : subs)
        for (const auto& r : s.rows) method_set.insert(r.method);
    std::vector<std::string> methods(method_set.begin(), method_set.end());

    std::vector<fs::path> written;
    if (subs.empty() || methods.empty()) {
        std::cerr << "[gdpd] warning: nothing to plot under " << out_dir << "\n";
        return written;
    }
    const fs::path plot_dir = out_dir / "plots";
    fs::create_directories(plot_dir);

    grouped_bars(subs, methods, /*fidelity=*/true, "Teacher-student top-1 agreement",
                 plot_dir / "fidelity_bars.svg");
    written.push_back(plot_dir / "fidelity_bars.svg");

    const bool earliness = subs.size() > 1 && subs[0].key.rfind("e_", 0) == 0;
    const bool weak = subs.size() > 1 && subs[0].key.rfind("wt_", 0) == 0;
    if (earliness) {
        sweep_lines(subs, methods, "earliness fraction", "AUC-PRC vs earliness",
                    plot_dir / "auc_prc_vs_earliness.svg");
        written.push_back(plot_dir / "auc_prc_vs_earliness.svg");
    }
    if (weak) {
        sweep_lines(subs, methods, "weak-teacher setting", "AUC-PRC under degraded teachers",
                    plot_dir / "weak_teacher.svg");
        written.push_back(plot_dir / "weak_teacher.svg");
    }
    return written;
}

}  // namespace gdpd
