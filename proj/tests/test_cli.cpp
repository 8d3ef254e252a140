// End-to-end checks of the evimerge binary: exit codes, error lines,
// determinism of report files, and the archive subcommands.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

using namespace std;
namespace fs = std::filesystem;

namespace {

const char* kTinyScenario = R"({
  "tasks": {"count": 2, "classes_per_task": 2, "feature_dim": 6,
            "samples_ft": 40, "samples_aux": 48, "samples_te": 40,
            "pretrain_per_class": 8},
  "model": {"hidden": [10, 8]},
  "pretrain": {"epochs": 15, "lr": 0.05, "batch": 16},
  "finetune": {"epochs": 40, "lr": 0.08, "batch": 16},
  "head": {"epochs": 10},
  "router": {"epochs": 8, "batch": 16},
  "baselines": {"static_epochs": 8},
  "unseen": {"seen_tasks": [0]},
  "seeds": [7]
})";

struct RunResult {
    int exit_code;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) return "<missing:" + p.string() + ">";
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

RunResult run_cli(const std::string& args) {
    const fs::path dir = fs::temp_directory_path() / "evimerge_cli_io";
    fs::create_directories(dir);
    const fs::path out = dir / "stdout.txt";
    const fs::path err = dir / "stderr.txt";
    const std::string cmd = std::string(EVIMERGE_BIN) + " " + args + " > " + out.string() +
                            " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

fs::path write_tiny_scenario() {
    const fs::path p = fs::temp_directory_path() / "evimerge_tiny_scenario.json";
    std::ofstream f(p);
    f << kTinyScenario;
    return p;
}

}  // namespace

TEST_CASE("--help lists the subcommands and exits 0") {
    const RunResult r = run_cli("--help");
    CHECK(r.exit_code == 0);
    for (const char* sub : {"generate", "finetune", "train-head", "compute-ads", "train-router",
                            "merge", "evaluate", "ablate", "pipeline", "archive-inspect"})
        CHECK(r.out.find(sub) != std::string::npos);
}

TEST_CASE("unknown subcommand exits 1 with usage") {
    const RunResult r = run_cli("frobnicate");
    CHECK(r.exit_code == 1);
}

TEST_CASE("missing scenario file exits 1 with FILE_NOT_FOUND") {
    const RunResult r = run_cli("evaluate --scenario missing.toml --out /tmp/evimerge_nowhere");
    CHECK(r.exit_code == 1);
    CHECK(r.err.find("FILE_NOT_FOUND") != std::string::npos);
    CHECK(r.err.find("missing.toml") != std::string::npos);
}

TEST_CASE("unknown override key exits 1 with CONFIG_ERROR") {
    const fs::path scenario = write_tiny_scenario();
    const RunResult r = run_cli("pipeline --scenario " + scenario.string() +
                                " --set router.bogus=1 --out /tmp/evimerge_nowhere2");
    CHECK(r.exit_code == 1);
    CHECK(r.err.find("CONFIG_ERROR") != std::string::npos);
}

TEST_CASE("pipeline runs twice bitwise-identically") {
    const fs::path scenario = write_tiny_scenario();
    const fs::path out1 = fs::temp_directory_path() / "evimerge_pipe1";
    const fs::path out2 = fs::temp_directory_path() / "evimerge_pipe2";
    fs::remove_all(out1);
    fs::remove_all(out2);
    const RunResult r1 =
        run_cli("pipeline --scenario " + scenario.string() + " --seed 7 --out " + out1.string());
    REQUIRE(r1.exit_code == 0);
    const RunResult r2 =
        run_cli("pipeline --scenario " + scenario.string() + " --seed 7 --out " + out2.string());
    REQUIRE(r2.exit_code == 0);
    for (const char* rel : {"reports/report.csv", "reports/long.csv", "reports/summary.json",
                            "manifest.json", "scenario.json"}) {
        INFO(rel);
        CHECK(slurp(out1 / rel) == slurp(out2 / rel));
    }
    // all four methods show up in the long table
    const std::string longcsv = slurp(out1 / "reports" / "long.csv");
    for (const char* m : {"bd-merging", "uniform-average", "task-arithmetic", "static-adaptive"})
        CHECK(longcsv.find(m) != std::string::npos);
    fs::remove_all(out1);
    fs::remove_all(out2);
}

TEST_CASE("stage subcommands, merge and archive-inspect cooperate") {
    const fs::path scenario = write_tiny_scenario();
    const fs::path out = fs::temp_directory_path() / "evimerge_stages";
    fs::remove_all(out);

    REQUIRE(run_cli("generate --scenario " + scenario.string() + " --seed 7 --out " + out.string())
                .exit_code == 0);
    CHECK(fs::exists(out / "seed_7" / "data" / "task0_aux.evmg"));

    REQUIRE(run_cli("finetune --scenario " + scenario.string() + " --seed 7 --out " + out.string())
                .exit_code == 0);
    const fs::path base = out / "seed_7" / "models" / "base.evmg";
    const fs::path task0 = out / "seed_7" / "models" / "task0.evmg";
    const fs::path task1 = out / "seed_7" / "models" / "task1.evmg";
    REQUIRE(fs::exists(base));

    const fs::path merged = out / "merged.evmg";
    REQUIRE(run_cli("merge --base " + base.string() + " --task " + task0.string() + " --task " +
                    task1.string() + " --uniform --out " + merged.string())
                .exit_code == 0);
    const RunResult inspect = run_cli("archive-inspect " + merged.string());
    CHECK(inspect.exit_code == 0);
    CHECK(inspect.out.find("layer0.weight") != std::string::npos);
    CHECK(inspect.out.find("\"role\": \"merged\"") != std::string::npos);

    REQUIRE(run_cli("compute-ads --scenario " + scenario.string() + " --seed 7 --out " +
                    out.string())
                .exit_code == 0);
    const std::string ads = slurp(out / "seed_7" / "ads.csv");
    CHECK(ads.find("anchor,neighbor,sharp,div,conf,ads,partition") != std::string::npos);

    REQUIRE(run_cli("train-router --scenario " + scenario.string() + " --seed 7 --out " +
                    out.string())
                .exit_code == 0);
    const RunResult router_inspect =
        run_cli("archive-inspect " + (out / "seed_7" / "models" / "router.evmg").string());
    CHECK(router_inspect.exit_code == 0);
    CHECK(router_inspect.out.find("\"role\": \"router\"") != std::string::npos);

    fs::remove_all(out);
}

TEST_CASE("archive-inspect on a bad file exits 2 with FORMAT_ERROR") {
    const fs::path bad = fs::temp_directory_path() / "evimerge_bad.evmg";
    {
        std::ofstream f(bad, std::ios::binary);
        f << "garbage";
    }
    const RunResult r = run_cli("archive-inspect " + bad.string());
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("FORMAT_ERROR") != std::string::npos);
    fs::remove(bad);
}
