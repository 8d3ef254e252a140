#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "evimerge/errors.hpp"
#include "evimerge/router.hpp"

using namespace evimerge;

namespace {

MlpParams tiny_mlp(std::uint64_t seed, std::size_t in = 3, std::vector<std::size_t> hidden = {4, 3},
                   std::size_t labels = 3) {
    RngStream rng(seed);
    MlpSpec spec;
    spec.input_dim = in;
    spec.hidden = std::move(hidden);
    spec.label_count = labels;
    return init_mlp(spec, rng);
}

std::vector<TaskVector> tiny_vectors(const MlpParams& base, std::size_t K, std::uint64_t seed) {
    RngStream rng(seed);
    const ParameterArchive base_arch = mlp_to_archive(base);
    std::vector<TaskVector> out;
    for (std::size_t k = 0; k < K; ++k) {
        MlpParams ft = base;
        for (auto& w : ft.weights)
            for (double& v : w.values) v += 0.2 * rng.normal();
        for (auto& b : ft.biases)
            for (double& v : b.values) v += 0.2 * rng.normal();
        out.push_back(compute_task_vector(base_arch, mlp_to_archive(ft)));
    }
    return out;
}

Tensor unit_rows(std::vector<std::vector<double>> rows) {
    const std::size_t n = rows.size(), d = rows[0].size();
    Tensor z = Tensor::zeros({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        double norm = 0.0;
        for (double v : rows[i]) norm += v * v;
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < d; ++j) z.at(i, j) = rows[i][j] / norm;
    }
    return z;
}

}  // namespace

TEST_CASE("zero-initialized router emits uniform weights") {
    RngStream rng(51);
    RouterConfig rc;
    rc.input_dim = 5;
    rc.hidden_dim = 8;
    rc.task_count = 4;
    RouterParams router = init_router(rc, rng);
    Tensor feats = Tensor::zeros({3, 5});
    for (double& v : feats.values) v = rng.normal();
    const Tensor w = router_weights(router, feats);
    for (double v : w.values) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("layer-wise router output normalizes every K-group") {
    RngStream rng(52);
    RouterConfig rc;
    rc.input_dim = 4;
    rc.hidden_dim = 6;
    rc.task_count = 2;
    rc.layer_count = 3;
    rc.mode = WeightMode::LayerWise;
    RouterParams router = init_router(rc, rng);
    for (double& v : router.w2.values) v = rng.normal();  // break the uniform init
    for (double& v : router.b2.values) v = rng.normal();
    Tensor feats = Tensor::zeros({5, 4});
    for (double& v : feats.values) v = rng.normal();
    const Tensor w = router_weights(router, feats);
    REQUIRE(w.cols() == 6);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t l = 0; l < 3; ++l) {
            const double s = w.at(i, l * 2) + w.at(i, l * 2 + 1);
            CHECK(std::fabs(s - 1.0) < 1e-9);
        }
}

TEST_CASE("router softmax hand value") {
    RouterConfig rc;
    rc.input_dim = 2;
    rc.hidden_dim = 1;
    rc.task_count = 2;
    RngStream rng(53);
    RouterParams router = init_router(rc, rng);
    for (double& v : router.w1.values) v = 0.0;  // hidden activation is tanh(0) = 0
    router.b2.values = {1.0, 0.0};               // logits (1, 0) for every sample
    const Tensor w = router_weights(router, Tensor::matrix(1, 2, {0.4, -0.9}));
    CHECK(w.values[0] == doctest::Approx(0.7311).epsilon(1e-4));
    CHECK(w.values[1] == doctest::Approx(0.2689).epsilon(1e-4));
}

TEST_CASE("router archive round trip") {
    RngStream rng(54);
    RouterConfig rc;
    rc.input_dim = 5;
    rc.hidden_dim = 7;
    rc.task_count = 3;
    rc.layer_count = 4;
    rc.mode = WeightMode::LayerWise;
    RouterParams router = init_router(rc, rng);
    for (double& v : router.w2.values) v = rng.normal();
    const ParameterArchive a = router_to_archive(router);
    CHECK(a.metadata.at("role") == "router");
    CHECK(a.metadata.at("mode") == "layer");
    RouterParams back = router_from_archive(a);
    CHECK(back.config.mode == WeightMode::LayerWise);
    CHECK(back.config.task_count == 3);
    CHECK(back.w2.values == router.w2.values);
}

TEST_CASE("partition function hand values") {
    ContrastiveBatch batch;
    batch.temperature = 1.0;
    batch.z = unit_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    batch.partitions.resize(3);
    batch.partitions[0].positives = {1};
    batch.partitions[0].negatives = {2};
    // both similarities are zero
    CHECK(partition_function(0, batch) == doctest::Approx(2.0));

    ContrastiveBatch one;
    one.temperature = 1.0;
    one.z = unit_rows({{1, 0}, {1, 0}});
    one.partitions.resize(2);
    one.partitions[0].positives = {1};
    CHECK(partition_function(0, one) == doctest::Approx(std::exp(1.0)).epsilon(1e-9));

    one.temperature = 0.5;
    CHECK(partition_function(0, one) == doctest::Approx(std::exp(2.0)).epsilon(1e-9));

    ContrastiveBatch empty;
    empty.z = unit_rows({{1, 0}});
    empty.partitions.resize(1);
    CHECK_THROWS_AS(partition_function(0, empty), ContractViolation);
}

TEST_CASE("discrepancy loss degeneracies") {
    SUBCASE("no negatives means exactly zero loss") {
        ContrastiveBatch batch;
        batch.temperature = 0.7;
        batch.z = unit_rows({{1, 0}, {0.6, 0.8}});
        batch.partitions.resize(2);
        batch.partitions[0].positives = {1};
        CHECK(loss_discrepancy(batch) == 0.0);
    }
    SUBCASE("equal-similarity positive and negative give log 2") {
        ContrastiveBatch batch;
        batch.temperature = 1.0;
        batch.z = unit_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
        batch.partitions.resize(3);
        batch.partitions[0].positives = {1};
        batch.partitions[0].negatives = {2};
        CHECK(loss_discrepancy(batch) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    }
    SUBCASE("no positives with one negative hits the ratio floor") {
        ContrastiveBatch batch;
        batch.temperature = 1.0;
        batch.z = unit_rows({{1, 0}, {0, 1}});
        batch.partitions.resize(2);
        batch.partitions[0].negatives = {1};
        CHECK(loss_discrepancy(batch) == doctest::Approx(-std::log(1e-6)).epsilon(1e-6));
    }
}

TEST_CASE("discrepancy loss node agrees with the scalar form and stays non-negative") {
    RngStream rng(55);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t n = 3 + static_cast<std::size_t>(rng.uniform_index(6));
        Tensor raw = Tensor::zeros({n, 4});
        for (double& v : raw.values) v = rng.normal();
        ContrastiveBatch batch;
        batch.temperature = 0.5;
        batch.partitions.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const double coin = rng.uniform01();
                if (coin < 0.35)
                    batch.partitions[i].positives.push_back(j);
                else if (coin < 0.7)
                    batch.partitions[i].negatives.push_back(j);
            }
        Tape tape;
        NodeId z = tape.row_normalize(tape.constant(raw));
        batch.z = tape.value(z);
        NodeId node = loss_discrepancy_node(tape, z, batch.partitions, batch.temperature);
        const double scalar = loss_discrepancy(batch);
        CHECK(tape.value(node).values[0] == doctest::Approx(scalar).epsilon(1e-9));
        CHECK(scalar >= 0.0);
    }
}

TEST_CASE("discrepancy loss is invariant to sample reordering") {
    RngStream rng(56);
    const std::size_t n = 6;
    Tensor raw = Tensor::zeros({n, 3});
    for (double& v : raw.values) v = rng.normal();
    ContrastiveBatch batch;
    batch.temperature = 0.8;
    batch.partitions.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double coin = rng.uniform01();
            if (coin < 0.4)
                batch.partitions[i].positives.push_back(j);
            else if (coin < 0.8)
                batch.partitions[i].negatives.push_back(j);
        }
    {
        Tape t;
        batch.z = t.value(t.row_normalize(t.constant(raw)));
    }
    const double base = loss_discrepancy(batch);

    std::vector<std::size_t> perm{3, 1, 5, 0, 4, 2};
    std::vector<std::size_t> inv(n);
    for (std::size_t i = 0; i < n; ++i) inv[perm[i]] = i;
    ContrastiveBatch permuted;
    permuted.temperature = batch.temperature;
    permuted.z = Tensor::zeros({n, 3});
    permuted.partitions.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < 3; ++c) permuted.z.at(inv[i], c) = batch.z.at(i, c);
        for (std::size_t j : batch.partitions[i].positives)
            permuted.partitions[inv[i]].positives.push_back(inv[j]);
        for (std::size_t j : batch.partitions[i].negatives)
            permuted.partitions[inv[i]].negatives.push_back(inv[j]);
    }
    CHECK(loss_discrepancy(permuted) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("unsupervised entropy loss hand values") {
    CHECK(loss_unsup(Tensor::matrix(1, 3, {1.0, 0.0, 0.0})) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(loss_unsup(Tensor::matrix(1, 4, {0.25, 0.25, 0.25, 0.25})) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-9));
    CHECK(loss_unsup(Tensor::matrix(1, 2, {0.5, 0.5})) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("loss_bd arithmetic") {
    CHECK(loss_bd(1.7, 123.0, 0.0) == doctest::Approx(1.7));
    CHECK(loss_bd(1.0, 2.0, 0.1) == doctest::Approx(1.2));
    CHECK_THROWS_AS(loss_bd(1.0, 1.0, -0.5), ContractViolation);
}

TEST_CASE("functional merge equals materialized merge-then-forward") {
    const MlpParams base = tiny_mlp(61);
    const ParameterArchive base_arch = mlp_to_archive(base);
    const auto vectors = tiny_vectors(base, 3, 62);
    std::vector<MlpParams> deltas;
    for (const auto& v : vectors) deltas.push_back(mlp_delta_from_task_vector(v));

    RngStream rng(63);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_index(8));
        Tensor x = Tensor::zeros({n, 3});
        for (double& v : x.values) v = rng.normal();

        // task-wise
        Tensor wt = Tensor::zeros({n, 3});
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < 3; ++k) {
                wt.at(i, k) = rng.uniform(0.0, 1.0);
                s += wt.at(i, k);
            }
            for (std::size_t k = 0; k < 3; ++k) wt.at(i, k) /= s;
        }
        const Tensor fast = merged_logits(base, deltas, wt, WeightMode::TaskWise, x);
        const Tensor oracle =
            merged_logits_materialized(base_arch, vectors, wt, WeightMode::TaskWise, x);
        REQUIRE(fast.size() == oracle.size());
        for (std::size_t i = 0; i < fast.size(); ++i)
            CHECK(std::fabs(fast.values[i] - oracle.values[i]) < 1e-10);

        // layer-wise
        const std::size_t lc = base.spec.layer_count();
        Tensor wl = Tensor::zeros({n, lc * 3});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t l = 0; l < lc; ++l) {
                double s = 0.0;
                for (std::size_t k = 0; k < 3; ++k) {
                    wl.at(i, l * 3 + k) = rng.uniform(0.0, 1.0);
                    s += wl.at(i, l * 3 + k);
                }
                for (std::size_t k = 0; k < 3; ++k) wl.at(i, l * 3 + k) /= s;
            }
        const Tensor fast_l = merged_logits(base, deltas, wl, WeightMode::LayerWise, x);
        const Tensor oracle_l =
            merged_logits_materialized(base_arch, vectors, wl, WeightMode::LayerWise, x);
        for (std::size_t i = 0; i < fast_l.size(); ++i)
            CHECK(std::fabs(fast_l.values[i] - oracle_l.values[i]) < 1e-10);
    }
}

TEST_CASE("bd loss gradient w.r.t. router parameters matches finite differences") {
    const MlpParams base = tiny_mlp(64);
    const auto vectors = tiny_vectors(base, 2, 65);
    std::vector<MlpParams> deltas;
    for (const auto& v : vectors) deltas.push_back(mlp_delta_from_task_vector(v));

    RngStream rng(66);
    const std::size_t n = 4;
    Tensor x = Tensor::zeros({n, 3});
    for (double& v : x.values) v = rng.normal();
    const Tensor feats = mlp_features(base, x);

    std::vector<NeighborPartition> partitions(n);
    partitions[0].positives = {1};
    partitions[0].negatives = {2, 3};
    partitions[1].positives = {0, 2};
    partitions[2].negatives = {0, 1};
    // anchor 3 has no neighbors and must contribute nothing

    RouterConfig rc;
    rc.input_dim = base.spec.feature_dim();
    rc.hidden_dim = 5;
    rc.task_count = 2;
    rc.layer_count = base.spec.layer_count();

    for (WeightMode mode : {WeightMode::TaskWise, WeightMode::LayerWise}) {
        rc.mode = mode;
        RouterParams router = init_router(rc, rng);
        for (double& v : router.w2.values) v = 0.3 * rng.normal();
        for (double& v : router.b2.values) v = 0.3 * rng.normal();

        auto build_with = [&](Tape& t, NodeId w1_leaf, const RouterParams& r) {
            RouterNodes nodes;
            nodes.w1 = w1_leaf;
            nodes.b1 = t.constant(r.b1);
            nodes.w2 = t.constant(r.w2);
            nodes.b2 = t.constant(r.b2);
            NodeId w = router_forward(t, nodes, rc, t.constant(feats));
            NodeId logits = merged_forward(t, base, deltas, w, mode, t.constant(x));
            NodeId l_unsup = loss_unsup_node(t, t.softmax_rows(logits));
            NodeId l_dis = loss_discrepancy_node(t, t.row_normalize(logits), partitions, 0.5);
            return t.add(l_unsup, t.scale(l_dis, 0.1));
        };
        const double err = finite_diff_check(
            [&](Tape& t, NodeId leaf) { return build_with(t, leaf, router); }, router.w1, 1e-5);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("train_bd_merging degenerate cases") {
    const MlpParams base = tiny_mlp(67);
    const ParameterArchive base_arch = mlp_to_archive(base);
    const auto vectors = tiny_vectors(base, 2, 68);

    RngStream rng(69);
    Tensor aux = Tensor::zeros({12, 3});
    for (double& v : aux.values) v = rng.normal();
    RngStream hrng(70);
    HeadParams head = init_head(base.spec.feature_dim(), 3, hrng);

    BDConfig cfg;
    cfg.epochs = 0;
    cfg.batch = 6;
    RngStream trng(71);
    SUBCASE("zero epochs keeps the router at uniform") {
        BDTrainResult r = train_bd_merging(base_arch, vectors, aux, head, cfg, trng);
        const Tensor w = router_weights(r.router, mlp_features(base, aux));
        for (double v : w.values) CHECK(v == doctest::Approx(0.5));
        CHECK(r.trace.empty());
    }
    SUBCASE("K = 1 forces weight 1 and nothing observable changes") {
        std::vector<TaskVector> one{vectors[0]};
        cfg.epochs = 3;
        BDTrainResult r = train_bd_merging(base_arch, one, aux, head, cfg, trng);
        const Tensor w = router_weights(r.router, mlp_features(base, aux));
        for (double v : w.values) CHECK(v == doctest::Approx(1.0));
        std::vector<MlpParams> delta{mlp_delta_from_task_vector(one[0])};
        const Tensor merged = merged_logits(base, delta, w, WeightMode::TaskWise, aux);
        const Tensor direct =
            mlp_logits(mlp_from_archive(add_task_vector(base_arch, one[0])), aux);
        for (std::size_t i = 0; i < merged.size(); ++i)
            CHECK(merged.values[i] == doctest::Approx(direct.values[i]).epsilon(1e-9));
    }
    SUBCASE("empty task vector list is rejected") {
        CHECK_THROWS_AS(train_bd_merging(base_arch, {}, aux, head, cfg, trng), ContractViolation);
    }
}

TEST_CASE("bd training reduces its own loss on a small instance") {
    const MlpParams base = tiny_mlp(72, 4, {6, 5}, 4);
    const ParameterArchive base_arch = mlp_to_archive(base);
    const auto vectors = tiny_vectors(base, 3, 73);
    RngStream rng(74);
    Tensor aux = Tensor::zeros({24, 4});
    for (double& v : aux.values) v = rng.normal();
    RngStream hrng(75);
    HeadParams head = init_head(base.spec.feature_dim(), 4, hrng);

    BDConfig cfg;
    cfg.epochs = 25;
    cfg.batch = 12;
    cfg.learning_rate = 0.1;
    RngStream trng(76);
    BDTrainResult r = train_bd_merging(base_arch, vectors, aux, head, cfg, trng);
    REQUIRE(r.trace.size() == 25);
    CHECK(r.trace.back().l_bd < r.trace.front().l_bd);
}
