#include "evimerge/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "evimerge/errors.hpp"

namespace evimerge {

namespace fs = std::filesystem;
using nlohmann::json;

std::string project_version() { return "0.1.0"; }

SeedModels build_seed_models(const ScenarioConfig& sc, std::uint64_t seed) {
    SeedModels m;
    m.seed = seed;
    m.tasks = generate_tasks(sc, seed);
    m.base = pretrain_base(sc, m.tasks, seed);
    for (std::size_t k = 0; k < sc.tasks.count; ++k) {
        RngStream ft = named_stream(seed, "finetune" + std::to_string(k) + "/train");
        m.finetuned.push_back(finetune_task_model(m.base, m.tasks.ft[k], sc.finetune.epochs,
                                                  sc.finetune.lr, sc.finetune.batch, ft,
                                                  m.tasks.specs[k].labels));
        m.vectors.push_back(compute_task_vector(m.base, m.finetuned.back()));
    }
    return m;
}

MergeInputs make_merge_inputs(const SeedModels& models, const std::vector<std::size_t>& subset,
                              std::uint64_t seed) {
    if (subset.empty()) throw ContractViolation("make_merge_inputs: empty task subset");
    MergeInputs mi;
    mi.subset = subset;
    std::string tag = "s";
    for (std::size_t t : subset) tag += std::to_string(t);
    mi.subset_tag = tag;

    std::size_t rows = 0;
    const std::size_t dim = models.tasks.aux[0].inputs.cols();
    for (std::size_t t : subset) {
        if (t >= models.tasks.aux.size())
            throw ContractViolation("make_merge_inputs: task id out of range");
        rows += models.tasks.aux[t].size();
        mi.vectors.push_back(models.vectors[t]);
    }
    mi.aux_inputs = Tensor::zeros({rows, dim});
    std::size_t row = 0;
    for (std::size_t t : subset) {
        const Tensor& x = models.tasks.aux[t].inputs;
        for (std::size_t i = 0; i < x.rows(); ++i, ++row)
            for (std::size_t c = 0; c < dim; ++c) mi.aux_inputs.at(row, c) = x.at(i, c);
    }
    // one seeded shuffle mixes tasks inside batches; frozen thereafter
    std::vector<std::size_t> order(rows);
    for (std::size_t i = 0; i < rows; ++i) order[i] = i;
    RngStream shuffle_rng = named_stream(seed, "aux-shuffle/" + tag);
    shuffle_rng.shuffle(order);
    Tensor shuffled = Tensor::zeros({rows, dim});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t c = 0; c < dim; ++c) shuffled.at(i, c) = mi.aux_inputs.at(order[i], c);
    mi.aux_inputs = std::move(shuffled);
    return mi;
}

AblationVariant parse_ablation_variant(const std::string& name) {
    if (name == "full") return AblationVariant::Full;
    if (name == "no-sharp") return AblationVariant::NoSharp;
    if (name == "no-div") return AblationVariant::NoDiv;
    if (name == "no-conf") return AblationVariant::NoConf;
    if (name == "no-ads") return AblationVariant::NoAds;
    if (name == "no-router") return AblationVariant::NoRouter;
    if (name == "no-linv") return AblationVariant::NoLinv;
    if (name == "no-ldis") return AblationVariant::NoLdis;
    throw ConfigError("unknown ablation variant '" + name + "'");
}

std::string ablation_variant_name(AblationVariant v) {
    switch (v) {
        case AblationVariant::Full: return "full";
        case AblationVariant::NoSharp: return "no-sharp";
        case AblationVariant::NoDiv: return "no-div";
        case AblationVariant::NoConf: return "no-conf";
        case AblationVariant::NoAds: return "no-ads";
        case AblationVariant::NoRouter: return "no-router";
        case AblationVariant::NoLinv: return "no-linv";
        case AblationVariant::NoLdis: return "no-ldis";
    }
    return "?";
}

void apply_ads_variant(std::vector<std::vector<DiscrepancyRecord>>& records, AblationVariant v) {
    if (v == AblationVariant::Full || v == AblationVariant::NoRouter ||
        v == AblationVariant::NoLinv || v == AblationVariant::NoLdis)
        return;
    for (auto& per_anchor : records)
        for (auto& r : per_anchor) {
            switch (v) {
                case AblationVariant::NoSharp: r.sharp = 1.0; break;
                case AblationVariant::NoDiv: r.div = 1.0; break;
                case AblationVariant::NoConf: r.conf = 1.0; break;
                case AblationVariant::NoAds: break;
                default: break;
            }
            r.ads = v == AblationVariant::NoAds ? 0.0 : r.sharp * r.div * r.conf;
        }
}

namespace {

// train_bd_merging computes ADS internally for the Full variant; factor
// ablations need the hook below, so the pipeline prepares batches itself.
struct PreparedRouterBatch {
    Tensor inputs;
    Tensor features;
    std::vector<NeighborPartition> partitions;
};

std::vector<PreparedRouterBatch> prepare_router_batches(const MlpParams& base_params,
                                                        const Tensor& aux, const HeadParams& head,
                                                        const BDConfig& bd,
                                                        AblationVariant variant) {
    std::vector<PreparedRouterBatch> out;
    const std::size_t n = aux.rows(), d = aux.cols();
    for (std::size_t start = 0; start < n; start += bd.batch) {
        const std::size_t m = std::min(bd.batch, n - start);
        PreparedRouterBatch pb;
        pb.inputs = Tensor::zeros({m, d});
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < d; ++c) pb.inputs.at(r, c) = aux.at(start + r, c);
        pb.features = mlp_features(base_params, pb.inputs);
        const Tensor evidence = head_evidence(head, pb.features);
        const auto opinions = opinions_from_evidence(evidence);
        const auto adjacency = build_adjacency(pb.features, bd.radius);
        auto records = ads_all(opinions, adjacency);
        apply_ads_variant(records, variant);
        const double eps = resolve_epsilon(records, bd.epsilon);
        pb.partitions = partition_neighbors(records, eps);
        out.push_back(std::move(pb));
    }
    return out;
}

BDTrainResult train_router_prepared(const ScenarioConfig& sc, const SeedModels& models,
                                    const MergeInputs& inputs,
                                    const std::vector<PreparedRouterBatch>& batches,
                                    const BDConfig& bd, RngStream& init_rng) {
    const MlpParams base_params = mlp_from_archive(models.base);
    std::vector<MlpParams> deltas;
    for (const auto& v : inputs.vectors) deltas.push_back(mlp_delta_from_task_vector(v));

    RouterConfig rc;
    rc.input_dim = base_params.spec.feature_dim();
    rc.hidden_dim = bd.router_hidden;
    rc.task_count = inputs.vectors.size();
    rc.layer_count = base_params.spec.layer_count();
    rc.mode = bd.mode;

    BDTrainResult result;
    result.router = init_router(rc, init_rng);
    for (std::size_t epoch = 0; epoch < bd.epochs; ++epoch) {
        RouterEpoch ep;
        std::size_t samples = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const PreparedRouterBatch& pb = batches[bi];
            const std::size_t m = pb.inputs.rows();
            Tape tape;
            RouterNodes nodes = router_leaves(tape, result.router, true);
            NodeId w = router_forward(tape, nodes, rc, tape.constant(pb.features));
            NodeId logits =
                merged_forward(tape, base_params, deltas, w, bd.mode, tape.constant(pb.inputs));
            NodeId l_unsup = loss_unsup_node(tape, tape.softmax_rows(logits));
            NodeId l_dis = loss_discrepancy_node(tape, tape.row_normalize(logits), pb.partitions,
                                                 bd.temperature);
            NodeId l_bd = tape.add(l_unsup, tape.scale(l_dis, bd.eta));
            const double lv = tape.value(l_bd).values[0];
            if (!std::isfinite(lv)) {
                std::ostringstream os;
                os << "router training: non-finite loss at epoch " << epoch << ", batch " << bi;
                throw TrainingDiverged(os.str());
            }
            ep.l_unsup += tape.value(l_unsup).values[0];
            ep.l_dis += tape.value(l_dis).values[0];
            ep.l_bd += lv;
            samples += m;
            tape.backward(l_bd);
            const double step = bd.learning_rate / static_cast<double>(m);
            auto apply = [&](NodeId id, Tensor& param) {
                const Tensor& g = tape.grad(id);
                for (std::size_t i = 0; i < g.size(); ++i) param.values[i] -= step * g.values[i];
            };
            apply(nodes.w1, result.router.w1);
            apply(nodes.b1, result.router.b1);
            apply(nodes.w2, result.router.w2);
            apply(nodes.b2, result.router.b2);
        }
        if (samples > 0) {
            ep.l_unsup /= static_cast<double>(samples);
            ep.l_dis /= static_cast<double>(samples);
            ep.l_bd /= static_cast<double>(samples);
        }
        result.trace.push_back(ep);
    }
    (void)sc;
    return result;
}

}  // namespace

BDStageResult run_bd_stage(const ScenarioConfig& sc, const SeedModels& models,
                           const MergeInputs& inputs, AblationVariant variant) {
    const MlpParams base_params = mlp_from_archive(models.base);
    HeadConfig hc = head_config_for(sc, models.tasks.unified_label_count);
    if (variant == AblationVariant::NoLinv) hc.gamma = 0.0;

    RngStream head_init = named_stream(models.seed, "head/init/" + inputs.subset_tag);
    HeadParams head0 =
        init_head(base_params.spec.feature_dim(), models.tasks.unified_label_count, head_init);
    HeadTrainOptions hopts;
    hopts.epochs = sc.head.epochs;
    hopts.learning_rate = sc.head.lr;
    hopts.batch = sc.head.batch;
    RngStream head_train = named_stream(models.seed, "head/train/" + inputs.subset_tag);

    BDStageResult result;
    result.head = train_head(base_params, std::move(head0), inputs.aux_inputs, hc, hopts, head_train);

    BDConfig bd = bd_config_for(sc);
    if (variant == AblationVariant::NoLdis) bd.eta = 0.0;
    const auto batches = prepare_router_batches(base_params, inputs.aux_inputs, result.head.head,
                                                bd, variant);
    RngStream router_init = named_stream(models.seed, "router/init/" + inputs.subset_tag);
    result.router = train_router_prepared(sc, models, inputs, batches, bd, router_init);
    return result;
}

StaticAdaptiveResult run_static_stage(const ScenarioConfig& sc, const SeedModels& models,
                                      const MergeInputs& inputs) {
    RngStream rng = named_stream(models.seed, "static/train/" + inputs.subset_tag);
    return train_static_adaptive(models.base, inputs.vectors, inputs.aux_inputs,
                                 sc.baselines.static_epochs, sc.baselines.static_lr,
                                 sc.baselines.static_batch, rng);
}

CorruptedTests corrupt_tests(const ScenarioConfig& sc, const SeedModels& models,
                             std::uint64_t seed) {
    CorruptionSpec spec;
    spec.kinds = sc.corruption.kinds;
    spec.severity = sc.corruption.severity;
    spec.fraction = sc.corruption.fraction;
    CorruptedTests out;
    for (std::size_t k = 0; k < models.tasks.te.size(); ++k) {
        RngStream rng = named_stream(seed, "corrupt/task" + std::to_string(k));
        CorruptionResult cr = apply_corruption(models.tasks.te[k], spec, rng);
        out.datasets.push_back(std::move(cr.data));
        out.masks.push_back(std::move(cr.mask));
    }
    return out;
}

std::string compute_ads_csv(const ScenarioConfig& sc, const SeedModels& models,
                            const MergeInputs& inputs, AblationVariant variant) {
    const MlpParams base_params = mlp_from_archive(models.base);
    HeadConfig hc = head_config_for(sc, models.tasks.unified_label_count);
    if (variant == AblationVariant::NoLinv) hc.gamma = 0.0;
    RngStream head_init = named_stream(models.seed, "head/init/" + inputs.subset_tag);
    HeadParams head0 =
        init_head(base_params.spec.feature_dim(), models.tasks.unified_label_count, head_init);
    HeadTrainOptions hopts{sc.head.epochs, sc.head.lr, sc.head.batch};
    RngStream head_train = named_stream(models.seed, "head/train/" + inputs.subset_tag);
    HeadTrainResult head = train_head(base_params, std::move(head0), inputs.aux_inputs, hc, hopts,
                                      head_train);

    const BDConfig bd = bd_config_for(sc);
    std::ostringstream os;
    os << "batch,anchor,neighbor,sharp,div,conf,ads,partition\n";
    os.precision(17);
    const std::size_t n = inputs.aux_inputs.rows(), d = inputs.aux_inputs.cols();
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += bd.batch, ++batch_index) {
        const std::size_t m = std::min(bd.batch, n - start);
        Tensor bx = Tensor::zeros({m, d});
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < d; ++c) bx.at(r, c) = inputs.aux_inputs.at(start + r, c);
        const Tensor features = mlp_features(base_params, bx);
        const Tensor evidence = head_evidence(head.head, features);
        const auto opinions = opinions_from_evidence(evidence);
        const auto adjacency = build_adjacency(features, bd.radius);
        auto records = ads_all(opinions, adjacency);
        apply_ads_variant(records, variant);
        const double eps = resolve_epsilon(records, bd.epsilon);
        const auto partitions = partition_neighbors(records, eps);
        for (std::size_t i = 0; i < records.size(); ++i)
            for (const auto& r : records[i]) {
                const auto& pos = partitions[i].positives;
                const bool positive =
                    std::find(pos.begin(), pos.end(), r.neighbor) != pos.end();
                os << batch_index << ',' << (start + r.anchor) << ',' << (start + r.neighbor) << ','
                   << r.sharp << ',' << r.div << ',' << r.conf << ',' << r.ads << ','
                   << (positive ? "positive" : "negative") << '\n';
            }
    }
    return os.str();
}

namespace {

std::vector<std::size_t> all_task_ids(const ScenarioConfig& sc) {
    std::vector<std::size_t> ids(sc.tasks.count);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    return ids;
}

std::vector<Dataset> select_tests(const GeneratedTasks& tasks, const std::vector<std::size_t>& ids) {
    std::vector<Dataset> out;
    for (std::size_t t : ids) out.push_back(tasks.te[t]);
    return out;
}

MethodReports eval_clean_corrupted(const LogitsFn& fn, const ScenarioConfig& sc,
                                   const SeedModels& models, const CorruptedTests& corrupted,
                                   const std::string& method, std::uint64_t seed) {
    MethodReports mr;
    const auto ids = all_task_ids(sc);
    mr.rows.push_back(evaluate_merged(fn, select_tests(models.tasks, ids), ids, method, "clean",
                                      "-", seed));
    mr.rows.push_back(evaluate_merged(fn, corrupted.datasets, ids, method, "corrupted",
                                      severity_name(sc.corruption.severity), seed,
                                      &corrupted.masks));
    return mr;
}

std::uint64_t env_thread_cap() {
    const char* env = std::getenv("EVIMERGE_THREADS");
    if (!env) return 1;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || v == 0) return 1;
    return static_cast<std::uint64_t>(v);
}

}  // namespace

void parallel_runs(std::size_t count, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = static_cast<std::size_t>(
        std::min<std::uint64_t>(env_thread_cap(), static_cast<std::uint64_t>(count)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w]() {
            try {
                for (std::size_t i = w; i < count; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool method_wanted(const std::vector<std::string>& filter, const std::string& name) {
    if (filter.empty()) return true;
    return std::find(filter.begin(), filter.end(), name) != filter.end();
}

SeedRun run_main_seed(const ScenarioConfig& sc, std::uint64_t seed,
                      const std::vector<std::string>& methods) {
    SeedRun run;
    run.seed = seed;
    const SeedModels models = build_seed_models(sc, seed);
    const MergeInputs inputs = make_merge_inputs(models, all_task_ids(sc), seed);
    const CorruptedTests corrupted = corrupt_tests(sc, models, seed);

    if (method_wanted(methods, "bd-merging")) {
        const auto t0 = Clock::now();
        BDStageResult bd = run_bd_stage(sc, models, inputs, AblationVariant::Full);
        LogitsFn fn = routed_fn(models.base, inputs.vectors, bd.router.router);
        MethodReports mr = eval_clean_corrupted(fn, sc, models, corrupted, "bd-merging", seed);
        mr.train_seconds = seconds_since(t0);
        mr.head_trace = bd.head.loss_trace;
        mr.router_trace = bd.router.trace;
        run.methods.push_back(std::move(mr));
    }
    if (method_wanted(methods, "uniform-average")) {
        const auto t0 = Clock::now();
        LogitsFn fn = static_merge_fn(models.base, inputs.vectors,
                                      MergeWeights::uniform(inputs.vectors.size()));
        MethodReports mr = eval_clean_corrupted(fn, sc, models, corrupted, "uniform-average", seed);
        mr.train_seconds = seconds_since(t0);
        run.methods.push_back(std::move(mr));
    }
    if (method_wanted(methods, "task-arithmetic")) {
        const auto t0 = Clock::now();
        MergeWeights w = MergeWeights::task_wise(std::vector<double>(
            inputs.vectors.size(), sc.baselines.task_arithmetic_scale));
        LogitsFn fn = static_merge_fn(models.base, inputs.vectors, w);
        MethodReports mr = eval_clean_corrupted(fn, sc, models, corrupted, "task-arithmetic", seed);
        mr.train_seconds = seconds_since(t0);
        run.methods.push_back(std::move(mr));
    }
    if (method_wanted(methods, "static-adaptive")) {
        const auto t0 = Clock::now();
        StaticAdaptiveResult st = run_static_stage(sc, models, inputs);
        LogitsFn fn = static_merge_fn(models.base, inputs.vectors, st.weights);
        MethodReports mr = eval_clean_corrupted(fn, sc, models, corrupted, "static-adaptive", seed);
        mr.train_seconds = seconds_since(t0);
        mr.static_trace = st.trace;
        run.methods.push_back(std::move(mr));
    }
    if (run.methods.empty())
        throw ConfigError("no recognized method in filter (expected bd-merging, uniform-average, "
                          "task-arithmetic or static-adaptive)");
    return run;
}

SeedRun run_ablation_seed(const ScenarioConfig& sc, std::uint64_t seed,
                          const std::vector<AblationVariant>& variants) {
    SeedRun run;
    run.seed = seed;
    const SeedModels models = build_seed_models(sc, seed);
    const MergeInputs inputs = make_merge_inputs(models, all_task_ids(sc), seed);
    const CorruptedTests corrupted = corrupt_tests(sc, models, seed);

    for (AblationVariant v : variants) {
        const auto t0 = Clock::now();
        MethodReports mr;
        if (v == AblationVariant::NoRouter) {
            StaticAdaptiveResult st = run_static_stage(sc, models, inputs);
            LogitsFn fn = static_merge_fn(models.base, inputs.vectors, st.weights);
            mr = eval_clean_corrupted(fn, sc, models, corrupted, ablation_variant_name(v), seed);
            mr.static_trace = st.trace;
        } else {
            BDStageResult bd = run_bd_stage(sc, models, inputs, v);
            LogitsFn fn = routed_fn(models.base, inputs.vectors, bd.router.router);
            mr = eval_clean_corrupted(fn, sc, models, corrupted, ablation_variant_name(v), seed);
            mr.head_trace = bd.head.loss_trace;
            mr.router_trace = bd.router.trace;
        }
        mr.train_seconds = seconds_since(t0);
        run.methods.push_back(std::move(mr));
    }
    return run;
}

SeedRun run_unseen_seed(const ScenarioConfig& sc, std::uint64_t seed,
                        const std::vector<std::string>& methods) {
    SeedRun run;
    run.seed = seed;
    const SeedModels models = build_seed_models(sc, seed);
    std::vector<std::size_t> seen = sc.unseen.seen_tasks;
    std::sort(seen.begin(), seen.end());
    std::vector<std::size_t> unseen;
    for (std::size_t t = 0; t < sc.tasks.count; ++t)
        if (std::find(seen.begin(), seen.end(), t) == seen.end()) unseen.push_back(t);
    if (unseen.empty()) throw ConfigError("unseen protocol: no held-out tasks");
    const MergeInputs inputs = make_merge_inputs(models, seen, seed);

    auto eval_both = [&](const LogitsFn& fn, const std::string& method) {
        MethodReports mr;
        mr.rows.push_back(evaluate_merged(fn, select_tests(models.tasks, seen), seen, method,
                                          "seen", "-", seed));
        mr.rows.push_back(evaluate_merged(fn, select_tests(models.tasks, unseen), unseen, method,
                                          "unseen", "-", seed));
        return mr;
    };

    if (method_wanted(methods, "bd-merging")) {
        const auto t0 = Clock::now();
        BDStageResult bd = run_bd_stage(sc, models, inputs, AblationVariant::Full);
        MethodReports mr = eval_both(routed_fn(models.base, inputs.vectors, bd.router.router),
                                     "bd-merging");
        mr.train_seconds = seconds_since(t0);
        mr.head_trace = bd.head.loss_trace;
        mr.router_trace = bd.router.trace;
        run.methods.push_back(std::move(mr));
    }
    if (method_wanted(methods, "uniform-average")) {
        const auto t0 = Clock::now();
        MethodReports mr =
            eval_both(static_merge_fn(models.base, inputs.vectors,
                                      MergeWeights::uniform(inputs.vectors.size())),
                      "uniform-average");
        mr.train_seconds = seconds_since(t0);
        run.methods.push_back(std::move(mr));
    }
    if (method_wanted(methods, "static-adaptive")) {
        const auto t0 = Clock::now();
        StaticAdaptiveResult st = run_static_stage(sc, models, inputs);
        MethodReports mr = eval_both(static_merge_fn(models.base, inputs.vectors, st.weights),
                                     "static-adaptive");
        mr.train_seconds = seconds_since(t0);
        mr.static_trace = st.trace;
        run.methods.push_back(std::move(mr));
    }
    if (method_wanted(methods, "pretrained")) {
        const auto t0 = Clock::now();
        MethodReports mr = eval_both(model_fn(models.base), "pretrained");
        mr.train_seconds = seconds_since(t0);
        run.methods.push_back(std::move(mr));
    }
    if (run.methods.empty())
        throw ConfigError("no recognized method in filter for the unseen protocol");
    return run;
}

std::vector<std::uint64_t> resolve_seeds(const ScenarioConfig& sc,
                                         std::optional<std::uint64_t> seed_override) {
    if (seed_override) return {*seed_override};
    return sc.seeds;
}

}  // namespace

PipelineResult run_pipeline(const ScenarioConfig& sc, std::optional<std::uint64_t> seed_override,
                            const std::vector<std::string>& methods) {
    PipelineResult result;
    result.scenario = sc;
    const auto seeds = resolve_seeds(sc, seed_override);
    result.seeds.resize(seeds.size());
    parallel_runs(seeds.size(),
                  [&](std::size_t i) { result.seeds[i] = run_main_seed(sc, seeds[i], methods); });
    return result;
}

PipelineResult run_ablations(const ScenarioConfig& sc, const std::vector<AblationVariant>& variants,
                             std::optional<std::uint64_t> seed_override) {
    PipelineResult result;
    result.scenario = sc;
    const auto seeds = resolve_seeds(sc, seed_override);
    result.seeds.resize(seeds.size());
    parallel_runs(seeds.size(), [&](std::size_t i) {
        result.seeds[i] = run_ablation_seed(sc, seeds[i], variants);
    });
    return result;
}

PipelineResult run_unseen(const ScenarioConfig& sc, std::optional<std::uint64_t> seed_override,
                          const std::vector<std::string>& methods) {
    PipelineResult result;
    result.scenario = sc;
    const auto seeds = resolve_seeds(sc, seed_override);
    result.seeds.resize(seeds.size());
    parallel_runs(seeds.size(),
                  [&](std::size_t i) { result.seeds[i] = run_unseen_seed(sc, seeds[i], methods); });
    return result;
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path.string() + "'");
    f << text;
}

}  // namespace

void write_report_files(const std::string& outdir, const PipelineResult& result,
                        const std::string& command) {
    fs::create_directories(fs::path(outdir) / "reports");

    std::ostringstream report, longcsv;
    report << "method,condition,severity,seed,task,accuracy,corrupted_subset_accuracy\n";
    longcsv << "method,condition,severity,accuracy,seed\n";
    for (const auto& run : result.seeds) {
        for (const auto& mr : run.methods) {
            for (const auto& row : mr.rows) {
                for (std::size_t t = 0; t < row.task_ids.size(); ++t) {
                    report << row.method << ',' << row.condition << ',' << row.severity << ','
                           << row.seed << ',' << row.task_ids[t] << ','
                           << fmt(row.per_task_accuracy[t]) << ',';
                    if (t < row.per_task_subset_accuracy.size())
                        report << fmt(row.per_task_subset_accuracy[t]);
                    report << '\n';
                }
                longcsv << row.method << ',' << row.condition << ',' << row.severity << ','
                        << fmt(row.averaged_accuracy) << ',' << row.seed << '\n';
            }
        }
    }
    write_text(fs::path(outdir) / "reports" / "report.csv", report.str());
    write_text(fs::path(outdir) / "reports" / "long.csv", longcsv.str());

    // summary: mean/std of averaged accuracy per method x condition
    json summary;
    {
        std::vector<std::string> keys;
        std::map<std::string, std::vector<double>> acc;
        std::map<std::string, std::vector<double>> sub;
        for (const auto& run : result.seeds)
            for (const auto& mr : run.methods)
                for (const auto& row : mr.rows) {
                    const std::string key = row.method + "|" + row.condition;
                    if (!acc.count(key)) keys.push_back(key);
                    acc[key].push_back(row.averaged_accuracy);
                    if (row.averaged_subset_accuracy)
                        sub[key].push_back(*row.averaged_subset_accuracy);
                }
        auto stats = [](const std::vector<double>& v) {
            double mean = 0.0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            double var = 0.0;
            for (double x : v) var += (x - mean) * (x - mean);
            var = v.size() > 1 ? var / static_cast<double>(v.size() - 1) : 0.0;
            return std::pair<double, double>(mean, std::sqrt(var));
        };
        json methods = json::object();
        for (const auto& key : keys) {
            const auto bar = key.find('|');
            const std::string method = key.substr(0, bar);
            const std::string condition = key.substr(bar + 1);
            auto [mean, sd] = stats(acc[key]);
            json cell = {{"mean", mean}, {"std", sd}, {"seeds", acc[key].size()}};
            if (sub.count(key)) {
                auto [smean, ssd] = stats(sub[key]);
                cell["corrupted_subset_mean"] = smean;
                cell["corrupted_subset_std"] = ssd;
            }
            methods[method][condition] = cell;
        }
        summary["methods"] = methods;
        std::vector<std::uint64_t> seeds;
        for (const auto& run : result.seeds) seeds.push_back(run.seed);
        summary["seeds"] = seeds;
        summary["config_hash"] = result.scenario.config_hash();
    }
    write_text(fs::path(outdir) / "reports" / "summary.json", summary.dump(2) + "\n");

    // per-seed loss traces
    for (const auto& run : result.seeds) {
        const fs::path tdir = fs::path(outdir) / ("seed_" + std::to_string(run.seed)) / "traces";
        fs::create_directories(tdir);
        for (const auto& mr : run.methods) {
            const std::string method = mr.rows.empty() ? "method" : mr.rows.front().method;
            if (!mr.head_trace.empty()) {
                std::ostringstream os;
                os << "epoch,loss\n";
                for (std::size_t e = 0; e < mr.head_trace.size(); ++e)
                    os << e << ',' << fmt(mr.head_trace[e]) << '\n';
                write_text(tdir / (method + "_head.csv"), os.str());
            }
            if (!mr.router_trace.empty()) {
                std::ostringstream os;
                os << "epoch,l_unsup,l_dis,l_bd\n";
                for (std::size_t e = 0; e < mr.router_trace.size(); ++e)
                    os << e << ',' << fmt(mr.router_trace[e].l_unsup) << ','
                       << fmt(mr.router_trace[e].l_dis) << ',' << fmt(mr.router_trace[e].l_bd)
                       << '\n';
                write_text(tdir / (method + "_router.csv"), os.str());
            }
            if (!mr.static_trace.empty()) {
                std::ostringstream os;
                os << "epoch,l_unsup\n";
                for (std::size_t e = 0; e < mr.static_trace.size(); ++e)
                    os << e << ',' << fmt(mr.static_trace[e]) << '\n';
                write_text(tdir / (method + "_static.csv"), os.str());
            }
        }
    }

    // manifest: everything needed to reproduce the run bit-exactly
    json manifest;
    manifest["version"] = project_version();
    manifest["command"] = command;
    manifest["config_hash"] = result.scenario.config_hash();
    {
        std::vector<std::uint64_t> seeds;
        for (const auto& run : result.seeds) seeds.push_back(run.seed);
        manifest["seeds"] = seeds;
    }
    write_text(fs::path(outdir) / "manifest.json", manifest.dump(2) + "\n");
    write_text(fs::path(outdir) / "scenario.json", result.scenario.to_json() + "\n");

    // timing is the one deliberately non-deterministic artifact
    json timing = json::object();
    for (const auto& run : result.seeds) {
        json per = json::object();
        for (const auto& mr : run.methods) {
            const std::string method = mr.rows.empty() ? "method" : mr.rows.front().method;
            double eval_s = 0.0;
            for (const auto& row : mr.rows) eval_s += row.wall_seconds;
            per[method] = {{"train_seconds", mr.train_seconds}, {"eval_seconds", eval_s}};
        }
        timing["seed_" + std::to_string(run.seed)] = per;
    }
    write_text(fs::path(outdir) / "timing.json", timing.dump(2) + "\n");
}

}  // namespace evimerge
