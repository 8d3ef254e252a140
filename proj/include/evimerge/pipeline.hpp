#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "evimerge/harness.hpp"
#include "evimerge/scenario.hpp"

namespace evimerge {

// Everything derived from one seed before any merging happens: data,
// pretrained base, per-task fine-tuned archives and task vectors.
struct SeedModels {
    std::uint64_t seed = 0;
    GeneratedTasks tasks;
    ParameterArchive base;
    std::vector<ParameterArchive> finetuned;
    std::vector<TaskVector> vectors;
};

SeedModels build_seed_models(const ScenarioConfig& sc, std::uint64_t seed);

// Merge-stage inputs for a task subset: subset vectors plus the shuffled
// concatenation of the subset's auxiliary sets. Stream names depend only on
// (seed, subset) so ablation variants reuse identical randomness.
struct MergeInputs {
    std::vector<std::size_t> subset;
    std::string subset_tag;
    std::vector<TaskVector> vectors;
    Tensor aux_inputs;
};

MergeInputs make_merge_inputs(const SeedModels& models, const std::vector<std::size_t>& subset,
                              std::uint64_t seed);

enum class AblationVariant { Full, NoSharp, NoDiv, NoConf, NoAds, NoRouter, NoLinv, NoLdis };

AblationVariant parse_ablation_variant(const std::string& name);
std::string ablation_variant_name(AblationVariant v);

// Applies a factor ablation to ADS records: the named factor is replaced by
// 1 (NoAds zeroes the product entirely) and d_ik is recomputed.
void apply_ads_variant(std::vector<std::vector<DiscrepancyRecord>>& records, AblationVariant v);

struct BDStageResult {
    HeadTrainResult head;
    BDTrainResult router;
};

// Steps 1-3 for one seed and subset; `variant` tweaks the pieces the
// ablation study removes.
BDStageResult run_bd_stage(const ScenarioConfig& sc, const SeedModels& models,
                           const MergeInputs& inputs, AblationVariant variant);

StaticAdaptiveResult run_static_stage(const ScenarioConfig& sc, const SeedModels& models,
                                      const MergeInputs& inputs);

// Corrupted copies of every task's test set, one stream per task.
struct CorruptedTests {
    std::vector<Dataset> datasets;
    std::vector<std::vector<bool>> masks;
};

CorruptedTests corrupt_tests(const ScenarioConfig& sc, const SeedModels& models,
                             std::uint64_t seed);

// One method's clean + corrupted rows for one seed.
struct MethodReports {
    std::vector<EvalReport> rows;
    double train_seconds = 0.0;
    std::vector<double> head_trace;
    std::vector<RouterEpoch> router_trace;
    std::vector<double> static_trace;
};

struct SeedRun {
    std::uint64_t seed = 0;
    std::vector<MethodReports> methods;
};

struct PipelineResult {
    ScenarioConfig scenario;
    std::vector<SeedRun> seeds;
};

// Main protocol: BD-Merging plus the three baselines, clean and corrupted.
// A non-empty `methods` list restricts the run to those methods.
PipelineResult run_pipeline(const ScenarioConfig& sc,
                            std::optional<std::uint64_t> seed_override = std::nullopt,
                            const std::vector<std::string>& methods = {});

// Table-3-style ablations (clean + corrupted rows per variant).
PipelineResult run_ablations(const ScenarioConfig& sc, const std::vector<AblationVariant>& variants,
                             std::optional<std::uint64_t> seed_override = std::nullopt);

// Table-2-style protocol: merge the configured seen subset, evaluate seen
// and held-out tasks on clean data.
PipelineResult run_unseen(const ScenarioConfig& sc,
                          std::optional<std::uint64_t> seed_override = std::nullopt,
                          const std::vector<std::string>& methods = {});

// ADS diagnostic dump over the aux batches of the given subset.
std::string compute_ads_csv(const ScenarioConfig& sc, const SeedModels& models,
                            const MergeInputs& inputs, AblationVariant variant);

// --- report files ---
// Deterministic artifacts: report.csv, long.csv, summary.json, manifest.json,
// scenario.json and per-seed traces. Wall-clock goes to timing.json, which is
// deliberately the only non-reproducible file.
void write_report_files(const std::string& outdir, const PipelineResult& result,
                        const std::string& command);

std::string project_version();

// Runs fn(i) for i in [0, count) with at most EVIMERGE_THREADS workers
// (default 1); results must be written to index-addressed slots.
void parallel_runs(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace evimerge
