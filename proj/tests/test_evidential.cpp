#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "evimerge/errors.hpp"
#include "evimerge/evidential.hpp"
#include "evimerge/rng.hpp"

using namespace evimerge;

TEST_CASE("evidence_to_opinion hand values") {
    {
        const auto op = evidence_to_opinion(std::vector<double>{0, 0, 0}, 3);
        CHECK(op.alpha[0] == doctest::Approx(1.0));
        CHECK(op.strength == doctest::Approx(3.0));
        CHECK(op.belief[0] == doctest::Approx(0.0));
        CHECK(op.uncertainty == doctest::Approx(1.0));
        for (double p : op.probability) CHECK(p == doctest::Approx(1.0 / 3.0));
    }
    {
        const auto op = evidence_to_opinion(std::vector<double>{3, 1}, 2);
        CHECK(op.alpha[0] == doctest::Approx(4.0));
        CHECK(op.alpha[1] == doctest::Approx(2.0));
        CHECK(op.strength == doctest::Approx(6.0));
        CHECK(op.belief[0] == doctest::Approx(0.5));
        CHECK(op.belief[1] == doctest::Approx(1.0 / 6.0).epsilon(1e-4));
        CHECK(op.uncertainty == doctest::Approx(1.0 / 3.0).epsilon(1e-4));
        CHECK(op.probability[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-4));
        CHECK(op.probability[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-4));
    }
    {
        const auto op = evidence_to_opinion(std::vector<double>{9, 0, 0}, 3);
        CHECK(op.strength == doctest::Approx(12.0));
        CHECK(op.belief[0] == doctest::Approx(0.75));
        CHECK(op.belief[1] == doctest::Approx(0.0));
        CHECK(op.uncertainty == doctest::Approx(0.25));
        CHECK(op.probability[0] == doctest::Approx(10.0 / 12.0));
        CHECK(op.probability[1] == doctest::Approx(1.0 / 12.0));
    }
}

TEST_CASE("evidence_to_opinion rejects negative evidence") {
    CHECK_THROWS_AS(evidence_to_opinion(std::vector<double>{1.0, -0.5}, 2), ContractViolation);
}

TEST_CASE("opinion invariants hold on random evidence") {
    RngStream rng(21);
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t L = 2 + static_cast<std::size_t>(rng.uniform_index(9));
        std::vector<double> e(L);
        for (double& v : e) v = rng.uniform(0.0, 50.0);
        const auto op = evidence_to_opinion(e, L);
        double bsum = op.uncertainty;
        for (double b : op.belief) bsum += b;
        double psum = 0.0;
        for (double p : op.probability) psum += p;
        CHECK(std::fabs(bsum - 1.0) < 1e-9);
        CHECK(std::fabs(psum - 1.0) < 1e-9);
        CHECK(op.uncertainty > 0.0);
        CHECK(op.uncertainty <= 1.0);
    }
}

TEST_CASE("scaling evidence strictly decreases uncertainty") {
    RngStream rng(22);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t L = 2 + static_cast<std::size_t>(rng.uniform_index(6));
        std::vector<double> e(L);
        for (double& v : e) v = rng.uniform(0.0, 5.0);
        e[0] += 0.1;  // at least some evidence so scaling matters
        const double t = rng.uniform(1.01, 4.0);
        std::vector<double> scaled = e;
        for (double& v : scaled) v *= t;
        CHECK(evidence_to_opinion(scaled, L).uncertainty < evidence_to_opinion(e, L).uncertainty);
    }
}

TEST_CASE("iec hand values and clipping") {
    {
        const auto op = evidence_to_opinion(std::vector<double>{3, 1}, 2);  // alpha (4,2)
        CHECK(iec_score(op, true) == doctest::Approx(0.25));
    }
    {
        const auto op = evidence_to_opinion(std::vector<double>{9, 0, 0}, 3);  // alpha (10,1,1)
        CHECK(iec_score(op, true) == doctest::Approx(0.03));
    }
    {
        const auto op = evidence_to_opinion(std::vector<double>{0, 0}, 2);  // alpha (1,1)
        CHECK(iec_score(op, false) == doctest::Approx(2.0));
        CHECK(iec_score(op, true) == doctest::Approx(1.0));
    }
}

TEST_CASE("iec ignores permutations of the non-top-two classes") {
    const auto a = evidence_to_opinion(std::vector<double>{9, 4, 1, 2, 0.5}, 5);
    const auto b = evidence_to_opinion(std::vector<double>{9, 4, 0.5, 1, 2}, 5);
    CHECK(iec_score(a, false) == doctest::Approx(iec_score(b, false)));
}

TEST_CASE("loss_inverse hand values and non-negativity") {
    {
        std::vector<double> nu{1.0}, u{1e-13};
        CHECK(loss_inverse(nu, u) == doctest::Approx(0.0).epsilon(1e-6));
    }
    {
        std::vector<double> nu{0.0}, u{1.0};
        CHECK(loss_inverse(nu, u) == doctest::Approx(0.0));
    }
    {
        std::vector<double> nu{0.5}, u{0.5};
        CHECK(loss_inverse(nu, u) == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    }
    RngStream rng(23);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> nu{rng.uniform01()}, u{rng.uniform(1e-6, 1.0)};
        CHECK(loss_inverse(nu, u) >= 0.0);
    }
}

TEST_CASE("dirichlet KL to uniform") {
    {
        std::vector<double> alpha{1, 1, 1, 1};
        CHECK(kl_dirichlet_uniform(alpha) == doctest::Approx(0.0).epsilon(1e-12));
    }
    {
        std::vector<double> alpha{2, 1};
        CHECK(kl_dirichlet_uniform(alpha) == doctest::Approx(0.1931).epsilon(1e-3));
    }
    RngStream rng(24);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t L = 2 + static_cast<std::size_t>(rng.uniform_index(5));
        std::vector<double> alpha(L);
        for (double& a : alpha) a = rng.uniform(1.0, 20.0);
        CHECK(kl_dirichlet_uniform(alpha) >= -1e-12);
    }
}

TEST_CASE("loss_entropy_kl hand values") {
    {
        // zero evidence over L=4: p uniform, KL = 0
        std::vector<DirichletOpinion> batch{evidence_to_opinion(std::vector<double>{0, 0, 0, 0}, 4)};
        const double v = loss_entropy_kl(batch, 0.1, EntropySign::AsWritten);
        CHECK(v == doctest::Approx(-std::log(4.0)).epsilon(1e-6));
    }
    {
        // near one-hot p = (0.999, 0.001): alpha = (999, 1), S = 1000
        std::vector<DirichletOpinion> batch{evidence_to_opinion(std::vector<double>{998, 0}, 2)};
        const double plogp = 0.999 * std::log(0.999) + 0.001 * std::log(0.001);
        const double kl = kl_dirichlet_uniform(batch[0].alpha);
        const double v = loss_entropy_kl(batch, 0.1, EntropySign::AsWritten);
        CHECK(v == doctest::Approx(plogp + 0.1 * kl).epsilon(1e-9));
        CHECK(plogp == doctest::Approx(-0.0079).epsilon(1e-2));
    }
    {
        // lambda = 0 leaves only the p log p term
        std::vector<DirichletOpinion> batch{evidence_to_opinion(std::vector<double>{3, 1}, 2)};
        double plogp = 0.0;
        for (double p : batch[0].probability) plogp += p * std::log(p);
        CHECK(loss_entropy_kl(batch, 0.0, EntropySign::AsWritten) ==
              doctest::Approx(plogp).epsilon(1e-12));
        CHECK(loss_entropy_kl(batch, 0.0, EntropySign::MinimizeEntropy) ==
              doctest::Approx(-plogp).epsilon(1e-12));
    }
}

TEST_CASE("loss_head composes its two terms") {
    HeadConfig cfg;
    cfg.unified_label_count = 3;
    cfg.lambda = 0.1;
    cfg.gamma = 0.0;
    std::vector<DirichletOpinion> batch{evidence_to_opinion(std::vector<double>{2, 1, 0}, 3),
                                        evidence_to_opinion(std::vector<double>{0, 0, 5}, 3)};
    const double ent = loss_entropy_kl(batch, cfg.lambda, cfg.entropy_sign);
    CHECK(loss_head(batch, cfg) == doctest::Approx(ent).epsilon(1e-12));

    cfg.gamma = 1.0;
    std::vector<double> nu, u;
    for (const auto& op : batch) {
        nu.push_back(iec_score(op, cfg.iec_clip));
        u.push_back(op.uncertainty);
    }
    CHECK(loss_head(batch, cfg) == doctest::Approx(ent + loss_inverse(nu, u)).epsilon(1e-12));
}

TEST_CASE("head_loss_node forward agrees with the scalar formulas") {
    RngStream rng(25);
    for (int trial = 0; trial < 10; ++trial) {
        HeadConfig cfg;
        cfg.unified_label_count = 4;
        cfg.lambda = 0.1;
        cfg.gamma = 0.1;
        cfg.entropy_sign = trial % 2 == 0 ? EntropySign::AsWritten : EntropySign::MinimizeEntropy;
        Tensor logits = Tensor::zeros({3, 4});
        for (double& v : logits.values) v = rng.uniform(-2.0, 2.0);
        Tape tape;
        NodeId loss = head_loss_node(tape, tape.constant(logits), cfg);

        Tensor evidence = logits;
        for (double& v : evidence.values) v = std::log1p(std::exp(v));
        const auto batch = opinions_from_evidence(evidence);
        CHECK(tape.value(loss).values[0] == doctest::Approx(loss_head(batch, cfg)).epsilon(1e-9));
    }
}

TEST_CASE("head loss gradient matches finite differences") {
    RngStream rng(26);
    HeadConfig cfg;
    cfg.unified_label_count = 3;
    Tensor features = Tensor::zeros({4, 5});
    for (double& v : features.values) v = rng.normal();
    Tensor bias = Tensor::zeros({3});
    for (double& v : bias.values) v = 0.3 * rng.normal();

    Tensor weight = Tensor::zeros({5, 3});
    for (double& v : weight.values) v = 0.5 * rng.normal();

    // pin nu at the base point: it is a constant of the objective
    Tensor nu;
    {
        Tape t;
        NodeId logits = t.linear(t.constant(features), t.constant(weight), t.constant(bias));
        nu = iec_scores_for(t.value(t.softplus(logits)), cfg.iec_clip);
    }
    auto build = [&](Tape& t, NodeId w) {
        NodeId logits = t.linear(t.constant(features), w, t.constant(bias));
        return head_loss_node(t, logits, cfg, &nu);
    };
    CHECK(finite_diff_check(build, weight, 1e-5) < 1e-4);
}

TEST_CASE("head archive round trip carries its role") {
    RngStream rng(27);
    HeadParams head = init_head(6, 4, rng);
    ParameterArchive a = head_to_archive(head);
    CHECK(a.metadata.at("role") == "evidential_head");
    HeadParams back = head_from_archive(a);
    CHECK(back.weight.values == head.weight.values);
    CHECK(back.bias.values == head.bias.values);
}

TEST_CASE("train_head contract") {
    // backbone: 4 -> 8 -> 6 tanh net, frozen by construction
    RngStream init(28);
    MlpSpec spec;
    spec.input_dim = 4;
    spec.hidden = {8, 6};
    spec.label_count = 4;
    MlpParams backbone = init_mlp(spec, init);

    // two well-separated clusters in input space
    RngStream data(29);
    const std::size_t per = 60;
    Tensor aux = Tensor::zeros({2 * per, 4});
    std::vector<double> c1{2.0, 1.5, -1.0, 0.5}, c2{-2.0, -1.0, 1.5, -0.5};
    for (std::size_t i = 0; i < per; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            aux.at(i, j) = c1[j] + 0.3 * data.normal();
            aux.at(per + i, j) = c2[j] + 0.3 * data.normal();
        }

    HeadConfig cfg;
    cfg.unified_label_count = 4;
    cfg.entropy_sign = EntropySign::MinimizeEntropy;
    HeadTrainOptions opts;
    opts.epochs = 80;
    opts.learning_rate = 0.5;
    opts.batch = 30;

    RngStream hinit(30);
    HeadParams head0 = init_head(6, 4, hinit);
    const Tensor w0 = head0.weight;

    SUBCASE("zero epochs returns the head unchanged") {
        HeadTrainOptions none = opts;
        none.epochs = 0;
        RngStream rng(31);
        HeadTrainResult r = train_head(backbone, head0, aux, cfg, none, rng);
        CHECK(r.head.weight.values == w0.values);
        CHECK(r.loss_trace.empty());
    }

    SUBCASE("uncertainty separates support from far probes") {
        const Tensor backbone_w0 = backbone.weights[0];
        RngStream rng(32);
        HeadTrainResult r = train_head(backbone, head0, aux, cfg, opts, rng);
        CHECK(backbone.weights[0].values == backbone_w0.values);  // frozen contract

        Tensor centers = Tensor::zeros({2, 4});
        for (std::size_t j = 0; j < 4; ++j) {
            centers.at(0, j) = c1[j];
            centers.at(1, j) = c2[j];
        }
        RngStream probe_rng(33);
        const std::size_t n_probe = 40;
        Tensor probes = Tensor::zeros({n_probe, 4});
        for (std::size_t i = 0; i < n_probe; ++i)
            for (std::size_t j = 0; j < 4; ++j) probes.at(i, j) = 10.0 * probe_rng.normal();

        auto mean_u = [&](const Tensor& x) {
            const Tensor feats = mlp_features(backbone, x);
            const auto ops = opinions_from_evidence(head_evidence(r.head, feats));
            double acc = 0.0;
            for (const auto& op : ops) acc += op.uncertainty;
            return acc / static_cast<double>(ops.size());
        };
        CHECK(mean_u(centers) < mean_u(probes));
    }
}
