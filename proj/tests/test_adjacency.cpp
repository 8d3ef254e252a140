#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "evimerge/adjacency.hpp"
#include "evimerge/errors.hpp"
#include "evimerge/rng.hpp"

using namespace evimerge;

namespace {

RadiusPolicy fixed_radius(double r) {
    RadiusPolicy p;
    p.kind = RadiusPolicy::Kind::Fixed;
    p.fixed_radius = r;
    return p;
}

// Brute-force re-evaluation of the three ADS factors straight from their
// definitions, independent of the adjacency module's implementation.
double oracle_sharp(const std::vector<DirichletOpinion>& ops, std::size_t anchor,
                    const std::vector<std::size_t>& neighbors) {
    std::vector<std::size_t> set{anchor};
    set.insert(set.end(), neighbors.begin(), neighbors.end());
    double acc = 0.0;
    for (std::size_t j : set) {
        double mx = 0.0;
        for (double a : ops[j].alpha) mx = std::max(mx, a);
        double arg = ops[j].strength / mx - 1.0;
        if (arg < 1e-12) arg = 1e-12;
        acc += std::log(arg);
    }
    return acc / static_cast<double>(set.size());
}

double oracle_div(const std::vector<DirichletOpinion>& ops, std::size_t anchor,
                  const std::vector<std::size_t>& neighbors) {
    if (neighbors.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t j : neighbors) {
        double l1 = 0.0;
        for (std::size_t c = 0; c < ops[anchor].label_count; ++c)
            l1 += std::fabs(ops[anchor].alpha[c] / ops[anchor].strength -
                            ops[j].alpha[c] / ops[j].strength);
        acc += l1;
    }
    return acc / static_cast<double>(neighbors.size());
}

double oracle_conf(const DirichletOpinion& a, const DirichletOpinion& b) {
    double l1 = 0.0;
    for (std::size_t c = 0; c < a.label_count; ++c)
        l1 += std::fabs(a.probability[c] - b.probability[c]);
    return l1 * (1.0 - a.uncertainty) * (1.0 - b.uncertainty);
}

}  // namespace

TEST_CASE("build_adjacency basics") {
    SUBCASE("singleton batch has an empty neighborhood") {
        const auto sets = build_adjacency(Tensor::matrix(1, 2, {0.0, 0.0}), fixed_radius(1.0));
        REQUIRE(sets.size() == 1);
        CHECK(sets[0].neighbors.empty());
        CHECK(sets[0].anchor == 0);
    }
    SUBCASE("identical vectors are mutual neighbors") {
        const auto sets =
            build_adjacency(Tensor::matrix(2, 2, {1.0, 2.0, 1.0, 2.0}), fixed_radius(0.5));
        CHECK(sets[0].neighbors == std::vector<std::size_t>{1});
        CHECK(sets[1].neighbors == std::vector<std::size_t>{0});
    }
    SUBCASE("line points 0, 1, 10 with r = 2") {
        const auto sets =
            build_adjacency(Tensor::matrix(3, 1, {0.0, 1.0, 10.0}), fixed_radius(2.0));
        CHECK(sets[0].neighbors == std::vector<std::size_t>{1});
        CHECK(sets[1].neighbors == std::vector<std::size_t>{0});
        CHECK(sets[2].neighbors.empty());
    }
}

TEST_CASE("shrinking the radius never adds neighbors") {
    RngStream rng(41);
    Tensor feats = Tensor::zeros({20, 3});
    for (double& v : feats.values) v = rng.normal();
    double r = 2.5;
    auto bigger = build_adjacency(feats, fixed_radius(r));
    for (int step = 0; step < 5; ++step) {
        r *= 0.7;
        auto smaller = build_adjacency(feats, fixed_radius(r));
        for (std::size_t i = 0; i < feats.rows(); ++i)
            for (std::size_t n : smaller[i].neighbors)
                CHECK(std::find(bigger[i].neighbors.begin(), bigger[i].neighbors.end(), n) !=
                      bigger[i].neighbors.end());
        bigger = std::move(smaller);
    }
}

TEST_CASE("percentile radius tracks the target neighborhood size") {
    RngStream rng(42);
    Tensor feats = Tensor::zeros({40, 4});
    for (double& v : feats.values) v = rng.normal();
    RadiusPolicy p;
    p.kind = RadiusPolicy::Kind::Percentile;
    p.target_mean_neighbors = 10.0;
    const auto sets = build_adjacency(feats, p);
    double mean = 0.0;
    for (const auto& s : sets) mean += static_cast<double>(s.neighbors.size());
    mean /= static_cast<double>(sets.size());
    CHECK(mean > 5.0);
    CHECK(mean < 16.0);
}

TEST_CASE("sharpness hand values") {
    AdjacencySet lone{0, {}, 1.0};
    {
        std::vector<DirichletOpinion> ops{evidence_to_opinion(std::vector<double>{0, 0}, 2)};
        CHECK(sharpness(ops, lone) == doctest::Approx(0.0));
    }
    {
        std::vector<DirichletOpinion> ops{evidence_to_opinion(std::vector<double>{3, 1}, 2)};
        CHECK(sharpness(ops, lone) == doctest::Approx(-std::log(2.0)).epsilon(1e-6));
    }
    {
        std::vector<DirichletOpinion> ops{evidence_to_opinion(std::vector<double>{0, 0, 0}, 3)};
        CHECK(sharpness(ops, lone) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    }
}

TEST_CASE("divergence hand values") {
    {
        std::vector<DirichletOpinion> ops{evidence_to_opinion(std::vector<double>{2, 1}, 2),
                                          evidence_to_opinion(std::vector<double>{2, 1}, 2)};
        AdjacencySet set{0, {1}, 1.0};
        CHECK(divergence(ops, set) == doctest::Approx(0.0));
    }
    {
        // opposing near-one-hot opinions
        std::vector<DirichletOpinion> ops{
            evidence_to_opinion(std::vector<double>{1e9, 0}, 2),
            evidence_to_opinion(std::vector<double>{0, 1e9}, 2)};
        AdjacencySet set{0, {1}, 1.0};
        CHECK(divergence(ops, set) == doctest::Approx(2.0).epsilon(1e-6));
    }
    {
        // mean of two neighbor distances 0.4 and 0.8
        // p = alpha/S; pick alpha ratios that land exactly at those L1 gaps
        std::vector<DirichletOpinion> ops{
            evidence_to_opinion(std::vector<double>{4, 4}, 2),    // p = (0.5, 0.5)
            evidence_to_opinion(std::vector<double>{6, 2}, 2),    // p = (0.7, 0.3), L1 = 0.4
            evidence_to_opinion(std::vector<double>{8, 0}, 2)};   // p = (0.9, 0.1), L1 = 0.8
        AdjacencySet set{0, {1, 2}, 1.0};
        CHECK(divergence(ops, set) == doctest::Approx(0.6).epsilon(1e-9));
        CHECK(divergence(ops, AdjacencySet{0, {}, 1.0}) == doctest::Approx(0.0));
    }
}

TEST_CASE("conflict hand values and symmetry") {
    {
        const auto op = evidence_to_opinion(std::vector<double>{3, 2}, 2);
        CHECK(conflict(op, op) == doctest::Approx(0.0));
    }
    {
        const auto vac = evidence_to_opinion(std::vector<double>{0, 0}, 2);  // u = 1
        const auto conf_op = evidence_to_opinion(std::vector<double>{50, 0}, 2);
        CHECK(conflict(vac, conf_op) == doctest::Approx(0.0));
    }
    {
        // p=(0.9,0.1) and (0.1,0.9) with u=0.2 each: alpha=(9,1) vs (1,9)
        const auto a = evidence_to_opinion(std::vector<double>{8, 0}, 2);
        const auto b = evidence_to_opinion(std::vector<double>{0, 8}, 2);
        CHECK(a.uncertainty == doctest::Approx(0.2));
        CHECK(conflict(a, b) == doctest::Approx(1.024).epsilon(1e-9));
        CHECK(conflict(a, b) == doctest::Approx(conflict(b, a)).epsilon(1e-15));
    }
}

TEST_CASE("divergence and conflict are class-permutation invariant") {
    RngStream rng(43);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> ea(4), eb(4);
        for (double& v : ea) v = rng.uniform(0.0, 10.0);
        for (double& v : eb) v = rng.uniform(0.0, 10.0);
        std::vector<std::size_t> perm{2, 0, 3, 1};
        std::vector<double> pa(4), pb(4);
        for (std::size_t c = 0; c < 4; ++c) {
            pa[c] = ea[perm[c]];
            pb[c] = eb[perm[c]];
        }
        const auto a = evidence_to_opinion(ea, 4), b = evidence_to_opinion(eb, 4);
        const auto ap = evidence_to_opinion(pa, 4), bp = evidence_to_opinion(pb, 4);
        CHECK(conflict(a, b) == doctest::Approx(conflict(ap, bp)).epsilon(1e-12));
        std::vector<DirichletOpinion> ops{a, b}, opsp{ap, bp};
        AdjacencySet set{0, {1}, 1.0};
        CHECK(divergence(ops, set) == doctest::Approx(divergence(opsp, set)).epsilon(1e-12));
    }
}

TEST_CASE("ads degeneracies and contract") {
    std::vector<DirichletOpinion> ops{evidence_to_opinion(std::vector<double>{5, 1}, 2),
                                      evidence_to_opinion(std::vector<double>{5, 1}, 2)};
    std::vector<AdjacencySet> sets{{0, {1}, 1.0}, {1, {0}, 1.0}};
    const auto rec = ads(0, 1, ops, sets);
    CHECK(rec.conf == doctest::Approx(0.0));
    CHECK(rec.ads == doctest::Approx(0.0));
    CHECK_THROWS_AS(ads(0, 0, ops, sets), ContractViolation);
}

TEST_CASE("ads equals brute-force evaluation on random batches") {
    RngStream rng(44);
    for (int batch = 0; batch < 100; ++batch) {
        const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_index(31));
        const std::size_t L = 2 + static_cast<std::size_t>(rng.uniform_index(4));
        Tensor feats = Tensor::zeros({n, 3});
        for (double& v : feats.values) v = rng.normal();
        std::vector<DirichletOpinion> ops;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> e(L);
            for (double& v : e) v = rng.uniform(0.0, 12.0);
            ops.push_back(evidence_to_opinion(e, L));
        }
        const auto sets = build_adjacency(feats, fixed_radius(1.8));
        const auto records = ads_all(ops, sets);
        for (std::size_t i = 0; i < n; ++i) {
            for (const auto& r : records[i]) {
                const double sharp = oracle_sharp(ops, i, sets[i].neighbors);
                const double div = oracle_div(ops, i, sets[i].neighbors);
                const double conf = oracle_conf(ops[i], ops[r.neighbor]);
                CHECK(std::fabs(r.ads - sharp * div * conf) < 1e-10);
            }
        }
    }
}

TEST_CASE("partition boundary rules") {
    std::vector<std::vector<DiscrepancyRecord>> records(1);
    SUBCASE("all-zero scores with epsilon 0 land in the negative set") {
        for (std::size_t k = 1; k <= 3; ++k)
            records[0].push_back({0, k, 0.0, 0.0, 0.0, 0.0});
        const auto parts = partition_neighbors(records, 0.0);
        CHECK(parts[0].positives.empty());
        CHECK(parts[0].negatives.size() == 3);
    }
    SUBCASE("sign split at epsilon 0") {
        records[0].push_back({0, 1, 1.0, 1.0, 1.0, -0.1});
        records[0].push_back({0, 2, 1.0, 1.0, 1.0, 0.3});
        const auto parts = partition_neighbors(records, 0.0);
        CHECK(parts[0].positives == std::vector<std::size_t>{1});
        CHECK(parts[0].negatives == std::vector<std::size_t>{2});
    }
    SUBCASE("empty neighborhood gives two empty sets") {
        const auto parts = partition_neighbors(records, 0.0);
        CHECK(parts[0].positives.empty());
        CHECK(parts[0].negatives.empty());
    }
}

TEST_CASE("partitions are disjoint and exhaustive for any epsilon") {
    RngStream rng(45);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_index(20));
        Tensor feats = Tensor::zeros({n, 2});
        for (double& v : feats.values) v = rng.normal();
        std::vector<DirichletOpinion> ops;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> e{rng.uniform(0.0, 8.0), rng.uniform(0.0, 8.0),
                                  rng.uniform(0.0, 8.0)};
            ops.push_back(evidence_to_opinion(e, 3));
        }
        const auto sets = build_adjacency(feats, fixed_radius(rng.uniform(0.3, 3.0)));
        const auto records = ads_all(ops, sets);
        const double eps = rng.uniform(-0.5, 0.5);
        const auto parts = partition_neighbors(records, eps);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(parts[i].positives.size() + parts[i].negatives.size() ==
                  sets[i].neighbors.size());
            for (std::size_t p : parts[i].positives)
                CHECK(std::find(parts[i].negatives.begin(), parts[i].negatives.end(), p) ==
                      parts[i].negatives.end());
        }
    }
}

TEST_CASE("median epsilon splits records around the middle") {
    std::vector<std::vector<DiscrepancyRecord>> records(1);
    for (std::size_t k = 0; k < 5; ++k)
        records[0].push_back({0, k + 1, 1.0, 1.0, 1.0, static_cast<double>(k)});  // 0..4
    EpsilonPolicy p;
    p.kind = EpsilonPolicy::Kind::BatchMedian;
    CHECK(resolve_epsilon(records, p) == doctest::Approx(2.0));
    EpsilonPolicy fixed;
    fixed.kind = EpsilonPolicy::Kind::Fixed;
    fixed.fixed_epsilon = 7.5;
    CHECK(resolve_epsilon(records, fixed) == doctest::Approx(7.5));
}

TEST_CASE("ads csv dump is well formed") {
    std::vector<std::vector<DiscrepancyRecord>> records(2);
    records[0].push_back({0, 1, 0.5, 0.2, 0.1, 0.01});
    records[1].push_back({1, 0, -0.5, 0.2, 0.1, -0.01});
    std::vector<NeighborPartition> parts(2);
    parts[0].negatives = {1};
    parts[1].positives = {0};
    const std::string csv = ads_csv(records, parts);
    CHECK(csv.find("anchor,neighbor,sharp,div,conf,ads,partition") == 0);
    CHECK(csv.find("0,1,") != std::string::npos);
    CHECK(csv.find("negative") != std::string::npos);
    CHECK(csv.find("positive") != std::string::npos);
}
