#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "evimerge/archive.hpp"
#include "evimerge/model.hpp"
#include "evimerge/router.hpp"
#include "evimerge/scenario.hpp"

namespace evimerge {

struct Dataset {
    Tensor inputs;            // [n x d]
    std::vector<int> labels;  // unified label ids

    std::size_t size() const { return labels.size(); }
};

// Generator parameters for one synthetic classification task: a Gaussian
// mixture whose class means share one feature space but sit in a
// task-specific region.
struct TaskSpec {
    std::size_t task_id = 0;
    std::vector<int> labels;                      // unified ids of this task's classes
    std::size_t feature_dim = 0;
    std::vector<std::vector<double>> class_means; // one mean per class
    double noise_sigma = 0.5;
    double hard_fraction = 0.0;     // share of wide-noise samples
    double hard_noise_scale = 1.0;  // noise multiplier for those samples
};

struct GeneratedTasks {
    std::vector<TaskSpec> specs;
    std::vector<Dataset> ft, aux, te;  // disjoint splits, one per task
    Dataset pretrain;                  // small mixture over every task
    std::size_t unified_label_count = 0;
};

GeneratedTasks generate_tasks(const ScenarioConfig& sc, std::uint64_t seed);

// Dataset archives round-trip through the EVMG container.
ParameterArchive dataset_to_archive(const Dataset& data,
                                    std::map<std::string, std::string> metadata = {});
Dataset dataset_from_archive(const ParameterArchive& archive);

// --- model stages ---

ParameterArchive pretrain_base(const ScenarioConfig& sc, const GeneratedTasks& tasks,
                               std::uint64_t seed);

// Supervised fine-tuning restricted to the task's own label space (the
// softmax runs over `task_labels` only, mirroring per-task classification
// heads). The returned archive is snapped to base-delta-reachable form so
// the task-vector algebra is exact. Empty `task_labels` trains over the
// full unified space.
ParameterArchive finetune_task_model(const ParameterArchive& base, const Dataset& ft,
                                     std::size_t epochs, double lr, std::size_t batch,
                                     RngStream& rng, const std::vector<int>& task_labels = {});

// --- corruption ---

struct CorruptionSpec {
    std::vector<CorruptionKind> kinds = all_corruption_kinds();
    Severity severity = Severity::L2;
    double fraction = 0.2;
};

struct CorruptionResult {
    Dataset data;
    std::vector<bool> mask;               // exactly floor(fraction * n) true entries
    std::vector<int> kinds_applied;       // per corrupted sample, in mask order
};

CorruptionResult apply_corruption(const Dataset& clean, const CorruptionSpec& spec, RngStream& rng);

// --- evaluation ---

using LogitsFn = std::function<Tensor(const Tensor&)>;

LogitsFn model_fn(const ParameterArchive& archive);
LogitsFn static_merge_fn(const ParameterArchive& base, std::span<const TaskVector> vectors,
                         const MergeWeights& weights);
LogitsFn routed_fn(const ParameterArchive& base, std::span<const TaskVector> vectors,
                   const RouterParams& router);

// Per-task and averaged accuracy under one condition tag plus loss traces
// is assembled by the pipeline; this is the per-method row.
struct EvalReport {
    std::string method;
    std::string condition;  // clean | corrupted | seen | unseen
    std::string severity;   // "-", or L1..L3 under corruption
    std::uint64_t seed = 0;
    std::vector<std::size_t> task_ids;
    std::vector<double> per_task_accuracy;
    double averaged_accuracy = 0.0;
    // Accuracy over the corrupted subset alone (the paper leaves the
    // measurement set ambiguous, so both columns are reported).
    std::vector<double> per_task_subset_accuracy;
    std::optional<double> averaged_subset_accuracy;
    double wall_seconds = 0.0;
};

EvalReport evaluate_merged(const LogitsFn& model, const std::vector<Dataset>& task_datasets,
                           const std::vector<std::size_t>& task_ids, const std::string& method,
                           const std::string& condition, const std::string& severity,
                           std::uint64_t seed,
                           const std::vector<std::vector<bool>>* corrupted_masks = nullptr);

}  // namespace evimerge
