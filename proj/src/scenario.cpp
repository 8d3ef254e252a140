#include "evimerge/scenario.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "evimerge/errors.hpp"
#include "evimerge/rng.hpp"

namespace evimerge {

using nlohmann::json;

Severity parse_severity(const std::string& s) {
    if (s == "L1") return Severity::L1;
    if (s == "L2") return Severity::L2;
    if (s == "L3") return Severity::L3;
    throw ConfigError("unknown severity '" + s + "' (expected L1, L2 or L3)");
}

std::string severity_name(Severity s) {
    switch (s) {
        case Severity::L1: return "L1";
        case Severity::L2: return "L2";
        case Severity::L3: return "L3";
    }
    return "?";
}

std::vector<CorruptionKind> all_corruption_kinds() {
    return {CorruptionKind::GaussianNoise, CorruptionKind::SaltPepper, CorruptionKind::Brightness,
            CorruptionKind::ColorShift,    CorruptionKind::MotionBlur, CorruptionKind::Fog,
            CorruptionKind::Contrast,      CorruptionKind::Quantize,   CorruptionKind::Pixelate};
}

CorruptionKind parse_corruption_kind(const std::string& s) {
    for (CorruptionKind k : all_corruption_kinds())
        if (corruption_kind_name(k) == s) return k;
    throw ConfigError("unknown corruption kind '" + s + "'");
}

std::string corruption_kind_name(CorruptionKind k) {
    switch (k) {
        case CorruptionKind::GaussianNoise: return "gaussian-noise";
        case CorruptionKind::SaltPepper: return "salt-pepper";
        case CorruptionKind::Brightness: return "brightness";
        case CorruptionKind::ColorShift: return "color-shift";
        case CorruptionKind::MotionBlur: return "motion-blur";
        case CorruptionKind::Fog: return "fog";
        case CorruptionKind::Contrast: return "contrast";
        case CorruptionKind::Quantize: return "quantize";
        case CorruptionKind::Pixelate: return "pixelate";
    }
    return "?";
}

namespace {

std::string entropy_sign_name(EntropySign s) {
    return s == EntropySign::AsWritten ? "as-written" : "minimize-entropy";
}

EntropySign parse_entropy_sign(const std::string& s) {
    if (s == "as-written") return EntropySign::AsWritten;
    if (s == "minimize-entropy") return EntropySign::MinimizeEntropy;
    throw ConfigError("unknown entropy_sign '" + s + "'");
}

std::string weight_mode_name(WeightMode m) {
    return m == WeightMode::TaskWise ? "task-wise" : "layer-wise";
}

WeightMode parse_weight_mode(const std::string& s) {
    if (s == "task-wise") return WeightMode::TaskWise;
    if (s == "layer-wise") return WeightMode::LayerWise;
    throw ConfigError("unknown router mode '" + s + "'");
}

// Strict deserialization: every key in the file must be consumed.
void check_known_keys(const json& j, const std::vector<std::string>& known,
                      const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : known)
            if (it.key() == k) ok = true;
        if (!ok) throw ConfigError("unknown key '" + where + it.key() + "' in scenario");
    }
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void ScenarioConfig::validate() const {
    if (tasks.count < 1) throw ConfigError("tasks.count must be >= 1");
    if (tasks.classes_per_task < 2) throw ConfigError("tasks.classes_per_task must be >= 2");
    if (tasks.feature_dim < 2) throw ConfigError("tasks.feature_dim must be >= 2");
    if (model.hidden.empty()) throw ConfigError("model.hidden must not be empty");
    if (corruption.fraction < 0.0 || corruption.fraction > 1.0)
        throw ConfigError("corruption.fraction must lie in [0, 1]");
    if (tasks.class_dir_shared < 0.0 || tasks.class_dir_shared > 1.0)
        throw ConfigError("tasks.class_dir_shared must lie in [0, 1]");
    if (tasks.hard_fraction < 0.0 || tasks.hard_fraction > 1.0)
        throw ConfigError("tasks.hard_fraction must lie in [0, 1]");
    const std::size_t need = corruption.severity == Severity::L1
                                 ? 1
                                 : corruption.severity == Severity::L2 ? 5 : 8;
    if (corruption.kinds.size() < need)
        throw ConfigError("corruption.kinds needs at least " + std::to_string(need) +
                          " kinds for severity " + severity_name(corruption.severity));
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    for (std::size_t t : unseen.seen_tasks)
        if (t >= tasks.count) throw ConfigError("unseen.seen_tasks has task id out of range");
    if (unseen.seen_tasks.empty()) throw ConfigError("unseen.seen_tasks must not be empty");
    if (router.eta < 0.0) throw ConfigError("router.eta must be non-negative");
    if (!(router.temperature > 0.0)) throw ConfigError("router.temperature must be positive");
    if (head.lambda < 0.0 || head.gamma < 0.0)
        throw ConfigError("head.lambda and head.gamma must be non-negative");
}

std::string ScenarioConfig::to_json() const {
    json j;
    j["tasks"] = {{"count", tasks.count},
                  {"classes_per_task", tasks.classes_per_task},
                  {"feature_dim", tasks.feature_dim},
                  {"samples_ft", tasks.samples_ft},
                  {"samples_aux", tasks.samples_aux},
                  {"samples_te", tasks.samples_te},
                  {"pretrain_per_class", tasks.pretrain_per_class},
                  {"task_offset", tasks.task_offset},
                  {"class_spread", tasks.class_spread},
                  {"noise_sigma", tasks.noise_sigma},
                  {"hard_fraction", tasks.hard_fraction},
                  {"hard_noise_scale", tasks.hard_noise_scale},
                  {"class_dir_shared", tasks.class_dir_shared},
                  {"last_task_blend", tasks.last_task_blend},
                  {"geometry_seed", tasks.geometry_seed}};
    j["model"] = {{"hidden", model.hidden}};
    j["pretrain"] = {{"epochs", pretrain.epochs}, {"lr", pretrain.lr}, {"batch", pretrain.batch}};
    j["finetune"] = {{"epochs", finetune.epochs}, {"lr", finetune.lr}, {"batch", finetune.batch}};
    j["head"] = {{"epochs", head.epochs},
                 {"lr", head.lr},
                 {"batch", head.batch},
                 {"lambda", head.lambda},
                 {"gamma", head.gamma},
                 {"iec_clip", head.iec_clip},
                 {"entropy_sign", entropy_sign_name(head.entropy_sign)}};
    j["adjacency"] = {
        {"radius_policy",
         adjacency.radius.kind == RadiusPolicy::Kind::Percentile ? "percentile" : "fixed"},
        {"fixed_radius", adjacency.radius.fixed_radius},
        {"target_mean_neighbors", adjacency.radius.target_mean_neighbors},
        {"epsilon_policy",
         adjacency.epsilon.kind == EpsilonPolicy::Kind::BatchMedian ? "median" : "fixed"},
        {"fixed_epsilon", adjacency.epsilon.fixed_epsilon}};
    j["router"] = {{"mode", weight_mode_name(router.mode)}, {"hidden", router.hidden},
                   {"epochs", router.epochs},               {"lr", router.lr},
                   {"batch", router.batch},                 {"eta", router.eta},
                   {"temperature", router.temperature}};
    j["baselines"] = {{"task_arithmetic_scale", baselines.task_arithmetic_scale},
                      {"static_epochs", baselines.static_epochs},
                      {"static_lr", baselines.static_lr},
                      {"static_batch", baselines.static_batch}};
    json kinds = json::array();
    for (CorruptionKind k : corruption.kinds) kinds.push_back(corruption_kind_name(k));
    j["corruption"] = {{"fraction", corruption.fraction},
                       {"severity", severity_name(corruption.severity)},
                       {"kinds", kinds}};
    j["unseen"] = {{"seen_tasks", unseen.seen_tasks}};
    j["seeds"] = seeds;
    return j.dump(2);
}

std::string ScenarioConfig::config_hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(to_json())));
    return std::string(buf);
}

ScenarioConfig ScenarioConfig::from_json_text(const std::string& text, const std::string& origin) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    ScenarioConfig sc;
    check_known_keys(j, {"tasks", "model", "pretrain", "finetune", "head", "adjacency", "router",
                         "baselines", "corruption", "unseen", "seeds"},
                     "");
    if (j.contains("tasks")) {
        const json& t = j["tasks"];
        check_known_keys(t,
                         {"count", "classes_per_task", "feature_dim", "samples_ft", "samples_aux",
                          "samples_te", "pretrain_per_class", "task_offset", "class_spread",
                          "noise_sigma", "hard_fraction", "hard_noise_scale",
                          "class_dir_shared", "last_task_blend", "geometry_seed"},
                         "tasks.");
        read_if(t, "count", sc.tasks.count);
        read_if(t, "classes_per_task", sc.tasks.classes_per_task);
        read_if(t, "feature_dim", sc.tasks.feature_dim);
        read_if(t, "samples_ft", sc.tasks.samples_ft);
        read_if(t, "samples_aux", sc.tasks.samples_aux);
        read_if(t, "samples_te", sc.tasks.samples_te);
        read_if(t, "pretrain_per_class", sc.tasks.pretrain_per_class);
        read_if(t, "task_offset", sc.tasks.task_offset);
        read_if(t, "class_spread", sc.tasks.class_spread);
        read_if(t, "noise_sigma", sc.tasks.noise_sigma);
        read_if(t, "hard_fraction", sc.tasks.hard_fraction);
        read_if(t, "hard_noise_scale", sc.tasks.hard_noise_scale);
        read_if(t, "class_dir_shared", sc.tasks.class_dir_shared);
        read_if(t, "last_task_blend", sc.tasks.last_task_blend);
        read_if(t, "geometry_seed", sc.tasks.geometry_seed);
    }
    if (j.contains("model")) {
        check_known_keys(j["model"], {"hidden"}, "model.");
        read_if(j["model"], "hidden", sc.model.hidden);
    }
    auto read_stage = [](const json& s, const char* where, Stage& out) {
        check_known_keys(s, {"epochs", "lr", "batch"}, where);
        read_if(s, "epochs", out.epochs);
        read_if(s, "lr", out.lr);
        read_if(s, "batch", out.batch);
    };
    if (j.contains("pretrain")) read_stage(j["pretrain"], "pretrain.", sc.pretrain);
    if (j.contains("finetune")) read_stage(j["finetune"], "finetune.", sc.finetune);
    if (j.contains("head")) {
        const json& h = j["head"];
        check_known_keys(h, {"epochs", "lr", "batch", "lambda", "gamma", "iec_clip", "entropy_sign"},
                         "head.");
        read_if(h, "epochs", sc.head.epochs);
        read_if(h, "lr", sc.head.lr);
        read_if(h, "batch", sc.head.batch);
        read_if(h, "lambda", sc.head.lambda);
        read_if(h, "gamma", sc.head.gamma);
        read_if(h, "iec_clip", sc.head.iec_clip);
        if (h.contains("entropy_sign"))
            sc.head.entropy_sign = parse_entropy_sign(h["entropy_sign"].get<std::string>());
    }
    if (j.contains("adjacency")) {
        const json& a = j["adjacency"];
        check_known_keys(a,
                         {"radius_policy", "fixed_radius", "target_mean_neighbors",
                          "epsilon_policy", "fixed_epsilon"},
                         "adjacency.");
        if (a.contains("radius_policy")) {
            const std::string p = a["radius_policy"].get<std::string>();
            if (p == "percentile")
                sc.adjacency.radius.kind = RadiusPolicy::Kind::Percentile;
            else if (p == "fixed")
                sc.adjacency.radius.kind = RadiusPolicy::Kind::Fixed;
            else
                throw ConfigError("unknown adjacency.radius_policy '" + p + "'");
        }
        read_if(a, "fixed_radius", sc.adjacency.radius.fixed_radius);
        read_if(a, "target_mean_neighbors", sc.adjacency.radius.target_mean_neighbors);
        if (a.contains("epsilon_policy")) {
            const std::string p = a["epsilon_policy"].get<std::string>();
            if (p == "median")
                sc.adjacency.epsilon.kind = EpsilonPolicy::Kind::BatchMedian;
            else if (p == "fixed")
                sc.adjacency.epsilon.kind = EpsilonPolicy::Kind::Fixed;
            else
                throw ConfigError("unknown adjacency.epsilon_policy '" + p + "'");
        }
        read_if(a, "fixed_epsilon", sc.adjacency.epsilon.fixed_epsilon);
    }
    if (j.contains("router")) {
        const json& r = j["router"];
        check_known_keys(r, {"mode", "hidden", "epochs", "lr", "batch", "eta", "temperature"},
                         "router.");
        if (r.contains("mode")) sc.router.mode = parse_weight_mode(r["mode"].get<std::string>());
        read_if(r, "hidden", sc.router.hidden);
        read_if(r, "epochs", sc.router.epochs);
        read_if(r, "lr", sc.router.lr);
        read_if(r, "batch", sc.router.batch);
        read_if(r, "eta", sc.router.eta);
        read_if(r, "temperature", sc.router.temperature);
    }
    if (j.contains("baselines")) {
        const json& b = j["baselines"];
        check_known_keys(b, {"task_arithmetic_scale", "static_epochs", "static_lr", "static_batch"},
                         "baselines.");
        read_if(b, "task_arithmetic_scale", sc.baselines.task_arithmetic_scale);
        read_if(b, "static_epochs", sc.baselines.static_epochs);
        read_if(b, "static_lr", sc.baselines.static_lr);
        read_if(b, "static_batch", sc.baselines.static_batch);
    }
    if (j.contains("corruption")) {
        const json& c = j["corruption"];
        check_known_keys(c, {"fraction", "severity", "kinds"}, "corruption.");
        read_if(c, "fraction", sc.corruption.fraction);
        if (c.contains("severity"))
            sc.corruption.severity = parse_severity(c["severity"].get<std::string>());
        if (c.contains("kinds")) {
            sc.corruption.kinds.clear();
            for (const auto& k : c["kinds"])
                sc.corruption.kinds.push_back(parse_corruption_kind(k.get<std::string>()));
        }
    }
    if (j.contains("unseen")) {
        check_known_keys(j["unseen"], {"seen_tasks"}, "unseen.");
        read_if(j["unseen"], "seen_tasks", sc.unseen.seen_tasks);
    }
    read_if(j, "seeds", sc.seeds);
    sc.validate();
    return sc;
}

ScenarioConfig ScenarioConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FileNotFound("scenario file '" + path + "' not found");
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_json_text(ss.str(), path);
}

void ScenarioConfig::apply_override(const std::string& key_eq_value) {
    const std::size_t eq = key_eq_value.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + key_eq_value + "' is not of the form key=value");
    const std::string key = key_eq_value.substr(0, eq);
    const std::string value = key_eq_value.substr(eq + 1);

    // Route the override through the JSON form so one strict parser handles
    // both files and overrides.
    json j = json::parse(to_json());
    json* cursor = &j;
    std::size_t pos = 0;
    std::vector<std::string> parts;
    while (true) {
        const std::size_t dot = key.find('.', pos);
        parts.push_back(key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos));
        if (dot == std::string::npos) break;
        pos = dot + 1;
    }
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!cursor->contains(parts[i]))
            throw ConfigError("unknown override key '" + key + "'");
        cursor = &(*cursor)[parts[i]];
    }
    const std::string& leaf = parts.back();
    if (!cursor->contains(leaf)) throw ConfigError("unknown override key '" + key + "'");

    json& slot = (*cursor)[leaf];
    auto parse_scalar = [](const std::string& v) -> json {
        if (v == "true") return true;
        if (v == "false") return false;
        try {
            std::size_t used = 0;
            if (v.find_first_of(".eE") != std::string::npos) {
                double d = std::stod(v, &used);
                if (used == v.size()) return d;
            } else {
                long long i = std::stoll(v, &used);
                if (used == v.size()) return i;
            }
        } catch (...) {
        }
        return v;
    };
    if (slot.is_array()) {
        json arr = json::array();
        std::size_t start = 0;
        if (!value.empty()) {
            while (true) {
                const std::size_t comma = value.find(',', start);
                arr.push_back(parse_scalar(value.substr(
                    start, comma == std::string::npos ? std::string::npos : comma - start)));
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
        }
        slot = arr;
    } else {
        slot = parse_scalar(value);
    }
    *this = from_json_text(j.dump(), "override '" + key + "'");
}

HeadConfig head_config_for(const ScenarioConfig& sc, std::size_t unified_label_count) {
    HeadConfig hc;
    hc.unified_label_count = unified_label_count;
    hc.lambda = sc.head.lambda;
    hc.gamma = sc.head.gamma;
    hc.iec_clip = sc.head.iec_clip;
    hc.entropy_sign = sc.head.entropy_sign;
    return hc;
}

BDConfig bd_config_for(const ScenarioConfig& sc) {
    BDConfig bd;
    bd.mode = sc.router.mode;
    bd.eta = sc.router.eta;
    bd.temperature = sc.router.temperature;
    bd.radius = sc.adjacency.radius;
    bd.epsilon = sc.adjacency.epsilon;
    bd.router_hidden = sc.router.hidden;
    bd.epochs = sc.router.epochs;
    bd.batch = sc.router.batch;
    bd.learning_rate = sc.router.lr;
    return bd;
}

}  // namespace evimerge
