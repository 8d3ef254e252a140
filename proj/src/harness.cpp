#include "evimerge/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "evimerge/errors.hpp"

namespace evimerge {

namespace {

std::vector<double> random_unit_vector(std::size_t dim, RngStream& rng) {
    std::vector<double> v(dim);
    double norm = 0.0;
    for (double& x : v) {
        x = rng.normal();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
        v.assign(dim, 0.0);
        v[0] = 1.0;
        return v;
    }
    for (double& x : v) x /= norm;
    return v;
}

Dataset sample_task(const TaskSpec& spec, std::size_t per_class, RngStream& rng) {
    const std::size_t classes = spec.labels.size();
    Dataset d;
    d.inputs = Tensor::zeros({per_class * classes, spec.feature_dim});
    d.labels.reserve(per_class * classes);
    std::size_t row = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t s = 0; s < per_class; ++s, ++row) {
            // a minority of wide-noise samples mimics the hard/ambiguous
            // fringe every real dataset carries
            const double sigma = rng.uniform01() < spec.hard_fraction
                                     ? spec.noise_sigma * spec.hard_noise_scale
                                     : spec.noise_sigma;
            for (std::size_t j = 0; j < spec.feature_dim; ++j)
                d.inputs.at(row, j) = spec.class_means[c][j] + sigma * rng.normal();
            d.labels.push_back(spec.labels[c]);
        }
    }
    return d;
}

}  // namespace

GeneratedTasks generate_tasks(const ScenarioConfig& sc, std::uint64_t seed) {
    GeneratedTasks out;
    const std::size_t K = sc.tasks.count;
    const std::size_t C = sc.tasks.classes_per_task;
    const std::size_t dim = sc.tasks.feature_dim;
    out.unified_label_count = K * C;  // disjoint label ids across tasks

    // Task and class geometry comes from its own seed so the benchmark's
    // "datasets" stay fixed while run seeds vary sampling, initialization,
    // training order and corruption draws (repeated runs over one bench,
    // not a fresh world per run).
    const std::uint64_t geom = sc.tasks.geometry_seed;
    std::vector<std::vector<double>> shared_dirs;
    {
        RngStream shared = named_stream(geom, "geometry/class-dirs");
        for (std::size_t c = 0; c < C; ++c) shared_dirs.push_back(random_unit_vector(dim, shared));
    }

    std::vector<std::vector<std::vector<double>>> task_dirs(K);
    for (std::size_t k = 0; k < K; ++k) {
        RngStream means = named_stream(geom, "geometry/task" + std::to_string(k) + "/dirs");
        const double rho = sc.tasks.class_dir_shared;
        for (std::size_t c = 0; c < C; ++c) {
            std::vector<double> own = random_unit_vector(dim, means);
            std::vector<double> dir(dim);
            double norm = 0.0;
            for (std::size_t j = 0; j < dim; ++j) {
                dir[j] = rho * shared_dirs[c][j] + (1.0 - rho) * own[j];
                norm += dir[j] * dir[j];
            }
            norm = std::sqrt(norm);
            if (norm < 1e-12) norm = 1.0;
            for (double& v : dir) v /= norm;
            task_dirs[k].push_back(std::move(dir));
        }
    }
    if (sc.tasks.last_task_blend && K >= 2) {
        for (std::size_t c = 0; c < C; ++c) task_dirs[K - 1][c] = task_dirs[c % (K - 1)][c];
    }

    for (std::size_t k = 0; k < K; ++k) {
        TaskSpec spec;
        spec.task_id = k;
        spec.feature_dim = dim;
        spec.noise_sigma = sc.tasks.noise_sigma;
        spec.hard_fraction = sc.tasks.hard_fraction;
        spec.hard_noise_scale = sc.tasks.hard_noise_scale;
        for (std::size_t c = 0; c < C; ++c) spec.labels.push_back(static_cast<int>(k * C + c));

        RngStream means = named_stream(geom, "geometry/task" + std::to_string(k) + "/center");
        std::vector<double> center = random_unit_vector(dim, means);
        for (double& x : center) x *= sc.tasks.task_offset;
        for (std::size_t c = 0; c < C; ++c) {
            std::vector<double> mean(dim);
            for (std::size_t j = 0; j < dim; ++j)
                mean[j] = center[j] + sc.tasks.class_spread * task_dirs[k][c][j];
            spec.class_means.push_back(std::move(mean));
        }

        const std::size_t per_ft = std::max<std::size_t>(1, sc.tasks.samples_ft / C);
        const std::size_t per_aux = std::max<std::size_t>(1, sc.tasks.samples_aux / C);
        const std::size_t per_te = std::max<std::size_t>(1, sc.tasks.samples_te / C);
        RngStream ft = named_stream(seed, "task" + std::to_string(k) + "/ft");
        RngStream aux = named_stream(seed, "task" + std::to_string(k) + "/aux");
        RngStream te = named_stream(seed, "task" + std::to_string(k) + "/te");
        out.ft.push_back(sample_task(spec, per_ft, ft));
        out.aux.push_back(sample_task(spec, per_aux, aux));
        out.te.push_back(sample_task(spec, per_te, te));
        out.specs.push_back(std::move(spec));
    }

    // pretraining mixture: a thin slice of every task so the base model has
    // some (deliberately mediocre) knowledge of the whole label space
    RngStream pre = named_stream(seed, "pretrain/data");
    const std::size_t per_class = std::max<std::size_t>(1, sc.tasks.pretrain_per_class);
    std::size_t rows = K * C * per_class;
    out.pretrain.inputs = Tensor::zeros({rows, dim});
    std::size_t row = 0;
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < per_class; ++s, ++row) {
                for (std::size_t j = 0; j < dim; ++j)
                    out.pretrain.inputs.at(row, j) =
                        out.specs[k].class_means[c][j] + sc.tasks.noise_sigma * pre.normal();
                out.pretrain.labels.push_back(out.specs[k].labels[c]);
            }
    return out;
}

ParameterArchive dataset_to_archive(const Dataset& data, std::map<std::string, std::string> metadata) {
    ParameterArchive a;
    a.metadata = std::move(metadata);
    a.metadata["role"] = "dataset";
    ArchiveEntry x;
    x.name = "features";
    x.layer_index = 0;
    x.dims = {data.inputs.rows(), data.inputs.cols()};
    x.values = data.inputs.values;
    a.add(std::move(x));
    ArchiveEntry y;
    y.name = "labels";
    y.layer_index = 0;
    y.dims = {data.labels.size()};
    y.values.reserve(data.labels.size());
    for (int l : data.labels) y.values.push_back(static_cast<double>(l));
    a.add(std::move(y));
    return a;
}

Dataset dataset_from_archive(const ParameterArchive& archive) {
    const ArchiveEntry* x = archive.find("features");
    const ArchiveEntry* y = archive.find("labels");
    if (!x || !y) throw FormatError("dataset archive missing features/labels entries");
    Dataset d;
    d.inputs = Tensor::matrix(x->dims[0], x->dims[1], x->values);
    d.labels.reserve(y->values.size());
    for (double v : y->values) d.labels.push_back(static_cast<int>(v));
    return d;
}

ParameterArchive pretrain_base(const ScenarioConfig& sc, const GeneratedTasks& tasks,
                               std::uint64_t seed) {
    MlpSpec spec;
    spec.input_dim = sc.tasks.feature_dim;
    spec.hidden = sc.model.hidden;
    spec.label_count = tasks.unified_label_count;
    RngStream init = named_stream(seed, "pretrain/init");
    MlpParams params = init_mlp(spec, init);
    RngStream train = named_stream(seed, "pretrain/train");
    fit_cross_entropy(params, tasks.pretrain.inputs, tasks.pretrain.labels, sc.pretrain.epochs,
                      sc.pretrain.lr, sc.pretrain.batch, train);
    return mlp_to_archive(params, {{"role", "base"}});
}

ParameterArchive finetune_task_model(const ParameterArchive& base, const Dataset& ft,
                                     std::size_t epochs, double lr, std::size_t batch,
                                     RngStream& rng, const std::vector<int>& task_labels) {
    MlpParams params = mlp_from_archive(base);
    fit_cross_entropy(params, ft.inputs, ft.labels, epochs, lr, batch, rng, task_labels);
    return snap_to_delta_reachable(base, mlp_to_archive(params, {{"role", "finetuned"}}));
}

namespace {

struct DatasetStats {
    double min = 0.0, max = 0.0, mean_scalar = 0.0;
    std::vector<double> mean_vec;
};

DatasetStats dataset_stats(const Dataset& d) {
    DatasetStats s;
    const std::size_t n = d.inputs.rows(), dim = d.inputs.cols();
    s.min = d.inputs.values[0];
    s.max = d.inputs.values[0];
    s.mean_vec.assign(dim, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dim; ++j) {
            const double v = d.inputs.at(i, j);
            s.min = std::min(s.min, v);
            s.max = std::max(s.max, v);
            s.mean_vec[j] += v;
            total += v;
        }
    for (double& v : s.mean_vec) v /= static_cast<double>(n);
    s.mean_scalar = total / static_cast<double>(n * dim);
    return s;
}

void apply_kind(CorruptionKind kind, std::vector<double>& x, const DatasetStats& stats,
                RngStream& rng) {
    const std::size_t dim = x.size();
    // Magnitude ranges keep one application mild; severity comes from the
    // number of stacked kinds (1 at L1, up to 8 at L3).
    switch (kind) {
        case CorruptionKind::GaussianNoise: {
            const double sigma = rng.uniform(0.55, 0.95);
            for (double& v : x) v += sigma * rng.normal();
            break;
        }
        case CorruptionKind::SaltPepper: {
            const double frac = rng.uniform(0.05, 0.15);
            for (double& v : x)
                if (rng.uniform01() < frac) v = rng.uniform01() < 0.5 ? stats.min : stats.max;
            break;
        }
        case CorruptionKind::Brightness: {
            const double off = (rng.uniform01() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.25, 0.5);
            for (double& v : x) v += off;
            break;
        }
        case CorruptionKind::ColorShift: {
            // three contiguous coordinate blocks stand in for channels
            const std::size_t block = std::max<std::size_t>(1, dim / 3);
            for (std::size_t b = 0; b < 3; ++b) {
                const double off = (rng.uniform01() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 0.45);
                const std::size_t lo = b * block;
                const std::size_t hi = b == 2 ? dim : std::min(dim, (b + 1) * block);
                for (std::size_t j = lo; j < hi; ++j) x[j] += off;
            }
            break;
        }
        case CorruptionKind::MotionBlur: {
            // 3-tap box blur along the coordinate axis, blended
            const double t = rng.uniform(0.5, 0.9);
            std::vector<double> orig = x;
            for (std::size_t j = 0; j < dim; ++j) {
                const std::size_t lo = j >= 1 ? j - 1 : 0;
                const std::size_t hi = std::min(dim - 1, j + 1);
                double acc = 0.0;
                for (std::size_t k = lo; k <= hi; ++k) acc += orig[k];
                x[j] = (1.0 - t) * orig[j] + t * acc / static_cast<double>(hi - lo + 1);
            }
            break;
        }
        case CorruptionKind::Fog: {
            const double t = rng.uniform(0.05, 0.14);
            for (std::size_t j = 0; j < dim; ++j) x[j] = (1.0 - t) * x[j] + t * stats.mean_vec[j];
            break;
        }
        case CorruptionKind::Contrast: {
            const double s = rng.uniform(0.78, 1.28);
            for (double& v : x) v = stats.mean_scalar + s * (v - stats.mean_scalar);
            break;
        }
        case CorruptionKind::Quantize: {
            const double q = rng.uniform(0.35, 0.65);
            for (double& v : x) v = std::round(v / q) * q;
            break;
        }
        case CorruptionKind::Pixelate: {
            // pairwise block averaging, blended
            const double t = rng.uniform(0.5, 0.9);
            for (std::size_t start = 0; start + 1 < dim; start += 2) {
                const double mean = 0.5 * (x[start] + x[start + 1]);
                x[start] = (1.0 - t) * x[start] + t * mean;
                x[start + 1] = (1.0 - t) * x[start + 1] + t * mean;
            }
            break;
        }
    }
}

}  // namespace

CorruptionResult apply_corruption(const Dataset& clean, const CorruptionSpec& spec, RngStream& rng) {
    if (spec.fraction < 0.0 || spec.fraction > 1.0)
        throw ContractViolation("apply_corruption: fraction must lie in [0, 1]");
    const std::size_t n = clean.size();
    // floor(fraction * n); the 1e-9 nudge keeps products like 0.3 * 10 from
    // landing just below their intended integer
    const std::size_t corrupt_count =
        static_cast<std::size_t>(spec.fraction * static_cast<double>(n) + 1e-9);
    const std::size_t max_kinds =
        spec.severity == Severity::L1 ? 1 : spec.severity == Severity::L2 ? 5 : 8;
    if (spec.kinds.size() < max_kinds)
        throw ContractViolation("apply_corruption: severity " + severity_name(spec.severity) +
                                " needs at least " + std::to_string(max_kinds) + " kinds");

    CorruptionResult out;
    out.data = clean;
    out.mask.assign(n, false);
    if (corrupt_count == 0) return out;

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<long>(corrupt_count));
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t i : chosen) out.mask[i] = true;

    const DatasetStats stats = dataset_stats(clean);
    const std::size_t dim = clean.inputs.cols();
    for (std::size_t i : chosen) {
        const std::size_t count =
            spec.severity == Severity::L1
                ? 1
                : static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(max_kinds)));
        // draw `count` distinct kinds via partial Fisher-Yates
        std::vector<std::size_t> kidx(spec.kinds.size());
        for (std::size_t j = 0; j < kidx.size(); ++j) kidx[j] = j;
        std::vector<double> x(dim);
        for (std::size_t j = 0; j < dim; ++j) x[j] = out.data.inputs.at(i, j);
        for (std::size_t pick = 0; pick < count; ++pick) {
            const std::size_t j =
                pick + static_cast<std::size_t>(rng.uniform_index(kidx.size() - pick));
            std::swap(kidx[pick], kidx[j]);
            apply_kind(spec.kinds[kidx[pick]], x, stats, rng);
        }
        for (std::size_t j = 0; j < dim; ++j) out.data.inputs.at(i, j) = x[j];
        out.kinds_applied.push_back(static_cast<int>(count));
    }
    return out;
}

LogitsFn model_fn(const ParameterArchive& archive) {
    MlpParams params = mlp_from_archive(archive);
    return [params](const Tensor& x) { return mlp_logits(params, x); };
}

LogitsFn static_merge_fn(const ParameterArchive& base, std::span<const TaskVector> vectors,
                         const MergeWeights& weights) {
    MlpParams merged = mlp_from_archive(merge_parameters(base, vectors, weights));
    return [merged](const Tensor& x) { return mlp_logits(merged, x); };
}

LogitsFn routed_fn(const ParameterArchive& base, std::span<const TaskVector> vectors,
                   const RouterParams& router) {
    MlpParams base_params = mlp_from_archive(base);
    std::vector<MlpParams> deltas;
    for (const auto& v : vectors) deltas.push_back(mlp_delta_from_task_vector(v));
    RouterParams r = router;
    return [base_params, deltas, r](const Tensor& x) {
        const Tensor feats = mlp_features(base_params, x);
        const Tensor w = router_weights(r, feats);
        return merged_logits(base_params, deltas, w, r.config.mode, x);
    };
}

EvalReport evaluate_merged(const LogitsFn& model, const std::vector<Dataset>& task_datasets,
                           const std::vector<std::size_t>& task_ids, const std::string& method,
                           const std::string& condition, const std::string& severity,
                           std::uint64_t seed,
                           const std::vector<std::vector<bool>>* corrupted_masks) {
    if (task_datasets.empty()) throw ContractViolation("evaluate_merged: no datasets");
    const auto start = std::chrono::steady_clock::now();
    EvalReport report;
    report.method = method;
    report.condition = condition;
    report.severity = severity;
    report.seed = seed;
    report.task_ids = task_ids;
    double acc_sum = 0.0, subset_sum = 0.0;
    bool any_subset = false;
    for (std::size_t t = 0; t < task_datasets.size(); ++t) {
        const Dataset& d = task_datasets[t];
        if (d.size() == 0) throw ContractViolation("evaluate_merged: empty dataset");
        const Tensor logits = model(d.inputs);
        const double acc = top1_accuracy(logits, d.labels);
        report.per_task_accuracy.push_back(acc);
        acc_sum += acc;
        if (corrupted_masks) {
            const std::vector<bool>& mask = (*corrupted_masks)[t];
            std::size_t hits = 0, total = 0;
            for (std::size_t i = 0; i < d.size(); ++i) {
                if (!mask[i]) continue;
                ++total;
                std::size_t best = 0;
                for (std::size_t c = 1; c < logits.cols(); ++c)
                    if (logits.at(i, c) > logits.at(i, best)) best = c;
                if (static_cast<int>(best) == d.labels[i]) ++hits;
            }
            const double sub =
                total == 0 ? report.per_task_accuracy.back()
                           : static_cast<double>(hits) / static_cast<double>(total);
            report.per_task_subset_accuracy.push_back(sub);
            subset_sum += sub;
            any_subset = true;
        }
    }
    report.averaged_accuracy = acc_sum / static_cast<double>(task_datasets.size());
    if (any_subset)
        report.averaged_subset_accuracy = subset_sum / static_cast<double>(task_datasets.size());
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

}  // namespace evimerge
