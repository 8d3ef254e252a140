#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evimerge/adjacency.hpp"
#include "evimerge/evidential.hpp"
#include "evimerge/router.hpp"

namespace evimerge {

enum class Severity { L1, L2, L3 };

Severity parse_severity(const std::string& s);
std::string severity_name(Severity s);

enum class CorruptionKind {
    GaussianNoise,
    SaltPepper,
    Brightness,
    ColorShift,
    MotionBlur,
    Fog,
    Contrast,
    Quantize,
    Pixelate,
};

CorruptionKind parse_corruption_kind(const std::string& s);
std::string corruption_kind_name(CorruptionKind k);
std::vector<CorruptionKind> all_corruption_kinds();

// Scenario file: JSON key-value tree with defaults for every knob the
// pipeline exposes. Unknown keys, in the file or in --set overrides, are
// hard errors.
struct ScenarioConfig {
    struct Tasks {
        std::size_t count = 4;
        std::size_t classes_per_task = 3;
        std::size_t feature_dim = 16;
        std::size_t samples_ft = 160;
        std::size_t samples_aux = 240;
        std::size_t samples_te = 200;
        std::size_t pretrain_per_class = 12;
        double task_offset = 3.0;
        double class_spread = 1.5;
        double noise_sigma = 0.55;
        // share of samples drawn with hard_noise_scale-times wider noise
        double hard_fraction = 0.0;
        double hard_noise_scale = 2.0;
        // 0 gives every task its own class geometry; 1 translates one shared
        // geometry across task regions, so tasks transfer to each other.
        double class_dir_shared = 0.0;
        // The last task borrows each class direction from one of the earlier
        // tasks in rotation, making it a blend of their structures (the
        // held-out task of the unseen protocol relates to the merged ones
        // the way overlapping real datasets do).
        bool last_task_blend = true;
        // Geometry has its own seed: the benchmark "datasets" stay fixed
        // across run seeds, which only vary sampling and training.
        std::uint64_t geometry_seed = 0xBDBD;
    } tasks;

    struct Model {
        std::vector<std::size_t> hidden = {24, 16};
    } model;

    struct Stage {
        std::size_t epochs = 0;
        double lr = 0.0;
        std::size_t batch = 0;
    };

    Stage pretrain{40, 0.05, 32};
    Stage finetune{150, 0.08, 32};

    struct Head {
        std::size_t epochs = 80;
        double lr = 0.3;
        std::size_t batch = 32;
        double lambda = 0.1;
        double gamma = 0.1;
        bool iec_clip = true;
        EntropySign entropy_sign = EntropySign::MinimizeEntropy;
    } head;

    struct Adjacency {
        RadiusPolicy radius;
        EpsilonPolicy epsilon;
    } adjacency;

    struct Router {
        WeightMode mode = WeightMode::TaskWise;
        std::size_t hidden = 16;
        std::size_t epochs = 120;
        double lr = 0.05;
        std::size_t batch = 24;
        double eta = 0.1;
        double temperature = 0.5;
    } router;

    struct Baselines {
        double task_arithmetic_scale = 0.3;
        std::size_t static_epochs = 120;
        double static_lr = 0.05;
        std::size_t static_batch = 24;
    } baselines;

    struct Corruption {
        double fraction = 0.2;
        Severity severity = Severity::L2;
        std::vector<CorruptionKind> kinds = all_corruption_kinds();
    } corruption;

    struct Unseen {
        std::vector<std::size_t> seen_tasks = {0, 1, 2};
    } unseen;

    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};

    void validate() const;
    std::string to_json() const;       // canonical form, all defaults resolved
    std::string config_hash() const;   // fnv1a64 of to_json(), hex

    static ScenarioConfig from_json_text(const std::string& text, const std::string& origin);
    static ScenarioConfig load(const std::string& path);

    // Dotted-key overrides, e.g. "router.epochs=200". Unknown keys throw.
    void apply_override(const std::string& key_eq_value);
};

HeadConfig head_config_for(const ScenarioConfig& sc, std::size_t unified_label_count);
BDConfig bd_config_for(const ScenarioConfig& sc);

}  // namespace evimerge
