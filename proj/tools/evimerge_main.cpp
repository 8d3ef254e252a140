// evimerge — synthetic multi-task merging workbench.
//
// Subcommands cover the pipeline stages (generate, finetune, train-head,
// compute-ads, train-router), the merge/evaluate/ablate entry points and the
// one-shot `pipeline` run. Every stage is a pure function of
// (scenario, seed): stages recompute their prerequisites deterministically
// instead of reading earlier stages' output files, so no subcommand ever
// mutates its inputs.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "evimerge/errors.hpp"
#include "evimerge/pipeline.hpp"

namespace fs = std::filesystem;
using namespace evimerge;

namespace {

struct CommonArgs {
    std::string scenario_path;
    std::string outdir = "out";
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool scenario_required = true) {
    auto* sc = cmd->add_option("--scenario", args.scenario_path, "scenario JSON file");
    if (scenario_required) sc->required();
    cmd->add_option("--out", args.outdir, "output directory");
    cmd->add_option("--seed", args.seed, "run a single seed instead of the scenario's list");
    cmd->add_option("--set", args.overrides,
                    "override scenario keys, e.g. --set router.epochs=200");
}

ScenarioConfig load_scenario(const CommonArgs& args) {
    ScenarioConfig sc = args.scenario_path.empty() ? ScenarioConfig{}
                                                   : ScenarioConfig::load(args.scenario_path);
    for (const auto& o : args.overrides) sc.apply_override(o);
    sc.validate();
    return sc;
}

void write_file(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path.string() + "'");
    f << text;
}

void write_stage_manifest(const std::string& outdir, const ScenarioConfig& sc,
                          const std::vector<std::uint64_t>& seeds, const std::string& command) {
    std::string seeds_json = "[";
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        if (i) seeds_json += ", ";
        seeds_json += std::to_string(seeds[i]);
    }
    seeds_json += "]";
    write_file(fs::path(outdir) / "manifest.json",
               std::string("{\n  \"command\": \"") + command + "\",\n  \"config_hash\": \"" +
                   sc.config_hash() + "\",\n  \"seeds\": " + seeds_json + ",\n  \"version\": \"" +
                   project_version() + "\"\n}\n");
    write_file(fs::path(outdir) / "scenario.json", sc.to_json() + "\n");
}

std::vector<std::uint64_t> seeds_for(const ScenarioConfig& sc, const CommonArgs& args) {
    if (args.seed) return {*args.seed};
    return sc.seeds;
}

fs::path seed_dir(const std::string& outdir, std::uint64_t seed) {
    return fs::path(outdir) / ("seed_" + std::to_string(seed));
}

int cmd_generate(const CommonArgs& args) {
    const ScenarioConfig sc = load_scenario(args);
    const auto seeds = seeds_for(sc, args);
    for (std::uint64_t seed : seeds) {
        const GeneratedTasks tasks = generate_tasks(sc, seed);
        const fs::path dir = seed_dir(args.outdir, seed) / "data";
        fs::create_directories(dir);
        for (std::size_t k = 0; k < tasks.specs.size(); ++k) {
            const std::string ks = std::to_string(k);
            save_archive(dataset_to_archive(tasks.ft[k], {{"task", ks}, {"split", "ft"}}),
                         (dir / ("task" + ks + "_ft.evmg")).string());
            save_archive(dataset_to_archive(tasks.aux[k], {{"task", ks}, {"split", "aux"}}),
                         (dir / ("task" + ks + "_aux.evmg")).string());
            save_archive(dataset_to_archive(tasks.te[k], {{"task", ks}, {"split", "te"}}),
                         (dir / ("task" + ks + "_te.evmg")).string());
        }
        save_archive(dataset_to_archive(tasks.pretrain, {{"split", "pretrain"}}),
                     (dir / "pretrain.evmg").string());
    }
    write_stage_manifest(args.outdir, sc, seeds, "generate");
    std::cout << "generated " << seeds.size() << " seed dataset(s) under " << args.outdir << "\n";
    return 0;
}

int cmd_finetune(const CommonArgs& args) {
    const ScenarioConfig sc = load_scenario(args);
    const auto seeds = seeds_for(sc, args);
    for (std::uint64_t seed : seeds) {
        const SeedModels models = build_seed_models(sc, seed);
        const fs::path dir = seed_dir(args.outdir, seed) / "models";
        fs::create_directories(dir);
        save_archive(models.base, (dir / "base.evmg").string());
        for (std::size_t k = 0; k < models.finetuned.size(); ++k) {
            save_archive(models.finetuned[k],
                         (dir / ("task" + std::to_string(k) + ".evmg")).string());
            save_archive(models.vectors[k].data,
                         (dir / ("vector" + std::to_string(k) + ".evmg")).string());
        }
    }
    write_stage_manifest(args.outdir, sc, seeds, "finetune");
    std::cout << "pretrained and fine-tuned models written under " << args.outdir << "\n";
    return 0;
}

int cmd_train_head(const CommonArgs& args) {
    const ScenarioConfig sc = load_scenario(args);
    const auto seeds = seeds_for(sc, args);
    for (std::uint64_t seed : seeds) {
        const SeedModels models = build_seed_models(sc, seed);
        std::vector<std::size_t> all(sc.tasks.count);
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        const MergeInputs inputs = make_merge_inputs(models, all, seed);
        BDStageResult bd;
        {
            // only the head is needed; reuse the stage with zero router epochs
            ScenarioConfig head_only = sc;
            head_only.router.epochs = 0;
            bd = run_bd_stage(head_only, models, inputs, AblationVariant::Full);
        }
        const fs::path dir = seed_dir(args.outdir, seed);
        fs::create_directories(dir / "models");
        save_archive(head_to_archive(bd.head.head), (dir / "models" / "head.evmg").string());
        std::string trace = "epoch,loss\n";
        for (std::size_t e = 0; e < bd.head.loss_trace.size(); ++e)
            trace += std::to_string(e) + "," + std::to_string(bd.head.loss_trace[e]) + "\n";
        write_file(dir / "traces" / "head.csv", trace);
    }
    write_stage_manifest(args.outdir, sc, seeds, "train-head");
    std::cout << "evidential head(s) written under " << args.outdir << "\n";
    return 0;
}

int cmd_compute_ads(const CommonArgs& args) {
    const ScenarioConfig sc = load_scenario(args);
    const auto seeds = seeds_for(sc, args);
    for (std::uint64_t seed : seeds) {
        const SeedModels models = build_seed_models(sc, seed);
        std::vector<std::size_t> all(sc.tasks.count);
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        const MergeInputs inputs = make_merge_inputs(models, all, seed);
        const std::string csv = compute_ads_csv(sc, models, inputs, AblationVariant::Full);
        write_file(seed_dir(args.outdir, seed) / "ads.csv", csv);
    }
    write_stage_manifest(args.outdir, sc, seeds, "compute-ads");
    std::cout << "ADS dumps written under " << args.outdir << "\n";
    return 0;
}

int cmd_train_router(const CommonArgs& args) {
    const ScenarioConfig sc = load_scenario(args);
    const auto seeds = seeds_for(sc, args);
    for (std::uint64_t seed : seeds) {
        const SeedModels models = build_seed_models(sc, seed);
        std::vector<std::size_t> all(sc.tasks.count);
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        const MergeInputs inputs = make_merge_inputs(models, all, seed);
        const BDStageResult bd = run_bd_stage(sc, models, inputs, AblationVariant::Full);
        const fs::path dir = seed_dir(args.outdir, seed);
        fs::create_directories(dir / "models");
        save_archive(router_to_archive(bd.router.router), (dir / "models" / "router.evmg").string());
        std::string trace = "epoch,l_unsup,l_dis,l_bd\n";
        for (std::size_t e = 0; e < bd.router.trace.size(); ++e)
            trace += std::to_string(e) + "," + std::to_string(bd.router.trace[e].l_unsup) + "," +
                     std::to_string(bd.router.trace[e].l_dis) + "," +
                     std::to_string(bd.router.trace[e].l_bd) + "\n";
        write_file(dir / "traces" / "router.csv", trace);
    }
    write_stage_manifest(args.outdir, sc, seeds, "train-router");
    std::cout << "router(s) written under " << args.outdir << "\n";
    return 0;
}

struct MergeArgs {
    std::string base_path;
    std::vector<std::string> task_paths;
    std::string out_path;
    std::vector<double> weights;
    bool uniform = false;
    std::optional<double> scale;
    std::string mode = "task";
};

int cmd_merge(const MergeArgs& args) {
    const ParameterArchive base = load_archive(args.base_path);
    std::vector<TaskVector> vectors;
    for (const auto& p : args.task_paths) {
        const ParameterArchive ft = load_archive(p);
        vectors.push_back(compute_task_vector(base, ft));
    }
    if (vectors.empty()) throw ConfigError("merge: at least one --task archive is required");

    MergeWeights w;
    const std::size_t K = vectors.size();
    if (args.uniform) {
        w = MergeWeights::uniform(K);
    } else if (args.scale) {
        w = MergeWeights::task_wise(std::vector<double>(K, *args.scale));
    } else if (!args.weights.empty()) {
        if (args.mode == "layer") {
            const std::uint32_t lc = base.layer_count();
            w = MergeWeights::layer_wise(K, lc, args.weights);
        } else {
            w = MergeWeights::task_wise(args.weights);
        }
    } else {
        throw ConfigError("merge: provide --weights, --uniform or --scale");
    }
    ParameterArchive merged = merge_parameters(base, vectors, w);
    merged.metadata["role"] = "merged";
    save_archive(merged, args.out_path);
    std::cout << "merged archive written to " << args.out_path << "\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& method, const std::string& protocol) {
    const ScenarioConfig sc = load_scenario(args);
    PipelineResult result;
    if (protocol == "unseen")
        result = run_unseen(sc, args.seed, {method});
    else
        result = run_pipeline(sc, args.seed, {method});
    write_report_files(args.outdir, result, "evaluate");
    std::cout << "evaluation reports written under " << args.outdir << "\n";
    return 0;
}

int cmd_ablate(const CommonArgs& args, const std::vector<std::string>& variant_names) {
    const ScenarioConfig sc = load_scenario(args);
    std::vector<AblationVariant> variants;
    if (variant_names.empty()) {
        variants = {AblationVariant::Full,    AblationVariant::NoSharp, AblationVariant::NoDiv,
                    AblationVariant::NoConf,  AblationVariant::NoAds,   AblationVariant::NoRouter,
                    AblationVariant::NoLinv,  AblationVariant::NoLdis};
    } else {
        for (const auto& n : variant_names) variants.push_back(parse_ablation_variant(n));
    }
    const PipelineResult result = run_ablations(sc, variants, args.seed);
    write_report_files(args.outdir, result, "ablate");
    std::cout << "ablation reports written under " << args.outdir << "\n";
    return 0;
}

int cmd_pipeline(const CommonArgs& args, const std::string& protocol) {
    const ScenarioConfig sc = load_scenario(args);
    if (protocol == "main" || protocol == "both") {
        const PipelineResult result = run_pipeline(sc, args.seed);
        write_report_files(protocol == "both" ? (fs::path(args.outdir) / "main").string()
                                              : args.outdir,
                           result, "pipeline");
    }
    if (protocol == "unseen" || protocol == "both") {
        const PipelineResult result = run_unseen(sc, args.seed);
        write_report_files(protocol == "both" ? (fs::path(args.outdir) / "unseen").string()
                                              : args.outdir,
                           result, "pipeline");
    }
    std::cout << "pipeline reports written under " << args.outdir << "\n";
    return 0;
}

int cmd_archive_inspect(const std::string& path) {
    const ParameterArchive a = load_archive(path);
    std::cout << inspect_archive(a) << "\n";
    return 0;
}

bool is_validation_code(const std::string& code) {
    return code == "CONFIG_ERROR" || code == "FILE_NOT_FOUND" || code == "USAGE";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"evimerge: evidential model merging on synthetic multi-task benches"};
    app.require_subcommand(1);

    CommonArgs gen_args, ft_args, head_args, ads_args, router_args, eval_args, ablate_args,
        pipe_args;

    auto* gen = app.add_subcommand("generate", "generate synthetic task datasets");
    add_common(gen, gen_args);

    auto* ft = app.add_subcommand("finetune", "pretrain the base and fine-tune per-task models");
    add_common(ft, ft_args);

    auto* head = app.add_subcommand("train-head", "train the joint evidential head");
    add_common(head, head_args);

    auto* ads = app.add_subcommand("compute-ads", "dump adjacency discrepancy scores as CSV");
    add_common(ads, ads_args);

    auto* router = app.add_subcommand("train-router", "train the debiased router");
    add_common(router, router_args);

    MergeArgs merge_args;
    auto* merge = app.add_subcommand("merge", "materialize a merged archive from static weights");
    merge->add_option("--base", merge_args.base_path, "base (pretrained) archive")->required();
    merge->add_option("--task", merge_args.task_paths, "fine-tuned task archive (repeatable)")
        ->required();
    merge->add_option("--out", merge_args.out_path, "output archive path")->required();
    merge->add_option("--weights", merge_args.weights, "comma-separated merge weights")
        ->delimiter(',');
    merge->add_flag("--uniform", merge_args.uniform, "uniform 1/K weights");
    merge->add_option("--scale", merge_args.scale, "task-arithmetic scale applied to every vector");
    merge->add_option("--mode", merge_args.mode, "task | layer (layout of --weights)")
        ->check(CLI::IsMember({"task", "layer"}));

    std::string eval_method = "bd-merging", eval_protocol = "main";
    auto* eval = app.add_subcommand("evaluate", "train if needed and evaluate one method");
    add_common(eval, eval_args);
    eval->add_option("--method", eval_method,
                     "bd-merging | uniform-average | task-arithmetic | static-adaptive | pretrained");
    eval->add_option("--protocol", eval_protocol, "main | unseen")
        ->check(CLI::IsMember({"main", "unseen"}));

    std::vector<std::string> ablate_variants;
    auto* ablate = app.add_subcommand("ablate", "run ablation variants");
    add_common(ablate, ablate_args);
    ablate->add_option("--variants", ablate_variants,
                       "subset of: full,no-sharp,no-div,no-conf,no-ads,no-router,no-linv,no-ldis")
        ->delimiter(',');

    std::string pipe_protocol = "main";
    auto* pipe = app.add_subcommand("pipeline", "full run: steps 1-3, baselines and reports");
    add_common(pipe, pipe_args);
    pipe->add_option("--protocol", pipe_protocol, "main | unseen | both")
        ->check(CLI::IsMember({"main", "unseen", "both"}));

    std::string inspect_path;
    auto* inspect = app.add_subcommand("archive-inspect", "print an archive's entry table as JSON");
    inspect->add_option("path", inspect_path, "EVMG archive path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        app.exit(e);
        std::cerr << "evimerge: error USAGE: " << e.what() << "\n";
        return 1;
    }

    try {
        if (*gen) return cmd_generate(gen_args);
        if (*ft) return cmd_finetune(ft_args);
        if (*head) return cmd_train_head(head_args);
        if (*ads) return cmd_compute_ads(ads_args);
        if (*router) return cmd_train_router(router_args);
        if (*merge) return cmd_merge(merge_args);
        if (*eval) return cmd_evaluate(eval_args, eval_method, eval_protocol);
        if (*ablate) return cmd_ablate(ablate_args, ablate_variants);
        if (*pipe) return cmd_pipeline(pipe_args, pipe_protocol);
        if (*inspect) return cmd_archive_inspect(inspect_path);
    } catch (const Error& e) {
        std::cerr << "evimerge: error " << e.code() << ": " << e.what() << "\n";
        return is_validation_code(e.code()) ? 1 : 2;
    } catch (const std::exception& e) {
        std::cerr << "evimerge: error INTERNAL: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
