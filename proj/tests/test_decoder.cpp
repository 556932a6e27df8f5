#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "gptr/decoder.hpp"

using namespace gptr;

namespace {

Tensor random_features(std::size_t n, std::size_t d, Rng& rng, bool grad = false) {
    Tensor f = Tensor::zeros({n, d}, grad);
    for (double& v : f.data()) v = rng.uniform(-1.0, 1.0);
    return f;
}

} // namespace

TEST_CASE("multi-scale scores") {
    Rng rng(91);
    ParameterStore store;
    declare_score_mlp(store, "sc", 3, rng);

    SECTION("a zero map scores every node uniformly") {
        store.get("sc.w").data().assign(3, 0.0);
        BranchPool pool = multiscale_scores(store, "sc", {Tensor::zeros({2, 3}),
                                                          Tensor::zeros({1, 3})});
        REQUIRE(pool.scores.numel() == 3);
        for (double v : pool.scores.data()) CHECK(v == 1.0 / 3.0);
        CHECK(pool.features.shape() == Shape{3, 3});
    }
    SECTION("hand-set logits reproduce a closed-form softmax") {
        // identity-ish map: w = e_0, so the logit is the first feature entry
        store.get("sc.w").data() = {1.0, 0.0, 0.0};
        store.get("sc.b").data() = {0.0};
        Tensor l1 = Tensor::from_data({2, 3}, {1, 9, 9, 2, 9, 9});
        Tensor l2 = Tensor::from_data({1, 3}, {3, 9, 9});
        BranchPool pool = multiscale_scores(store, "sc", {l1, l2});
        const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
        CHECK(pool.scores.data()[0] == Catch::Approx(std::exp(1.0) / z).margin(1e-12));
        CHECK(pool.scores.data()[1] == Catch::Approx(std::exp(2.0) / z).margin(1e-12));
        CHECK(pool.scores.data()[2] == Catch::Approx(std::exp(3.0) / z).margin(1e-12));
    }
    SECTION("scores sum to one for random features") {
        BranchPool pool = multiscale_scores(store, "sc", {random_features(4, 3, rng),
                                                          random_features(2, 3, rng)});
        double acc = 0.0;
        for (double v : pool.scores.data()) acc += v;
        CHECK(acc == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("an empty layer list is rejected") {
        CHECK_THROWS_AS(multiscale_scores(store, "sc", {}), ConfigError);
    }
}

TEST_CASE("top-M selection") {
    SECTION("distinct scores select by rank") {
        Tensor s = Tensor::from_data({3}, {0.5, 0.3, 0.2});
        CHECK(select_topM(s, 2) == std::vector<std::size_t>{0, 1});
        Tensor t = Tensor::from_data({3}, {0.1, 0.9, 0.5});
        CHECK(select_topM(t, 3) == std::vector<std::size_t>{1, 2, 0});
    }
    SECTION("ties break toward the lower index") {
        Tensor s = Tensor::from_data({4}, {0.25, 0.25, 0.25, 0.25});
        CHECK(select_topM(s, 2) == std::vector<std::size_t>{0, 1});
        Tensor t = Tensor::from_data({3}, {0.5, 0.9, 0.5});
        CHECK(select_topM(t, 3) == std::vector<std::size_t>{1, 0, 2});
    }
    SECTION("requesting the whole pool returns it score-sorted") {
        Tensor s = Tensor::from_data({3}, {0.2, 0.5, 0.3});
        CHECK(select_topM(s, 3) == std::vector<std::size_t>{1, 2, 0});
    }
    SECTION("requesting more than the pool is a configuration error") {
        Tensor s = Tensor::from_data({3}, {0.2, 0.5, 0.3});
        CHECK_THROWS_AS(select_topM(s, 4), ConfigError);
    }
}

TEST_CASE("summing selected branch rows") {
    Rng rng(92);
    ParameterStore store;
    declare_score_mlp(store, "sc", 4, rng);
    std::vector<BranchPool> pools;
    for (int b = 0; b < 3; ++b)
        pools.push_back(multiscale_scores(store, "sc", {random_features(5, 4, rng),
                                                        random_features(3, 4, rng)}));
    Tensor sum = sum_selected(pools, 4);
    CHECK(sum.shape() == Shape{4, 4});

    SECTION("presentation order of the branches does not matter") {
        Tensor rev = sum_selected({pools[2], pools[0], pools[1]}, 4);
        for (std::size_t i = 0; i < sum.numel(); ++i)
            CHECK(rev.data()[i] == Catch::Approx(sum.data()[i]).margin(1e-12));
    }
    SECTION("matches a by-hand gather and add") {
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t j = 0; j < 4; ++j) {
                double expect = 0.0;
                for (const auto& p : pools)
                    expect += p.features.data()[select_topM(p.scores, 4)[r] * 4 + j];
                CHECK(sum.data()[r * 4 + j] == Catch::Approx(expect).margin(1e-12));
            }
    }
    SECTION("gradients flow into the pooled features") {
        Tensor f = random_features(5, 4, rng, true);
        BranchPool p{f, Tensor::from_data({5}, {0.1, 0.3, 0.2, 0.25, 0.15})};
        auto res = grad_check([&] { return mean_all(pow_const(sum_selected({p}, 3), 2.0)); },
                              {{"f", f}});
        CHECK(res.max_rel_err < 1e-3);
    }
}

TEST_CASE("query initialization") {
    Rng rng(93);
    const std::size_t m = 3, t = 5, d = 8;
    ParameterStore store;
    declare_query_init(store, "qi", d, 2, rng);
    Tensor selected = random_features(m, d, rng, true);
    Tensor encoded = random_features(t, d, rng, true);

    SECTION("returns one query per selected row") {
        CHECK(init_queries(store, "qi", selected, encoded, 2).shape() == Shape{m, d});
    }
    SECTION("the encoder tokens inform the queries") {
        Tensor a = init_queries(store, "qi", selected, encoded, 2);
        Tensor b = init_queries(store, "qi", selected, add_scalar(encoded, 0.25), 2);
        double diff = 0.0;
        for (std::size_t i = 0; i < a.numel(); ++i)
            diff = std::max(diff, std::fabs(a.data()[i] - b.data()[i]));
        CHECK(diff > 1e-6);
    }
    SECTION("width mismatch is rejected") {
        CHECK_THROWS_AS(init_queries(store, "qi", selected, random_features(t, d + 1, rng), 2),
                        std::invalid_argument);
    }
    SECTION("finite differences through both inputs") {
        auto res = grad_check(
            [&] {
                return mean_all(pow_const(init_queries(store, "qi", selected, encoded, 2), 2.0));
            },
            {{"selected", selected}, {"encoded", encoded}});
        CHECK(res.max_rel_err < 1e-3);
    }
}

TEST_CASE("set-prediction decoder") {
    Rng rng(94);
    const std::size_t m = 4, t = 6, d = 8, layers = 2, classes = 3;
    ParameterStore store;
    declare_decoder(store, "dec", d, 2, 16, layers, m, classes, rng);
    Tensor queries = random_features(m, d, rng, true);
    Tensor memory = random_features(t, d, rng, true);

    SECTION("shapes and ranges per layer") {
        DecoderOutput out = decode(store, "dec", queries, memory, layers, 2);
        REQUIRE(out.boxes.size() == layers);
        REQUIRE(out.class_probs.size() == layers);
        for (std::size_t l = 0; l < layers; ++l) {
            CHECK(out.boxes[l].shape() == Shape{m, 4});
            CHECK(out.class_probs[l].shape() == Shape{m, classes});
            for (double v : out.boxes[l].data()) {
                CHECK(v > 0.0);
                CHECK(v < 1.0);
            }
            for (double v : out.class_probs[l].data()) {
                CHECK(v > 0.0);
                CHECK(v < 1.0);
            }
        }
    }
    SECTION("query shape must match the positional table") {
        CHECK_THROWS_AS(decode(store, "dec", random_features(m + 1, d, rng), memory, layers, 2),
                        std::invalid_argument);
    }
    SECTION("permuting queries with their per-slot state permutes predictions") {
        DecoderOutput base = decode(store, "dec", queries, memory, layers, 2);
        const std::vector<std::size_t> perm = {2, 0, 3, 1};
        Tensor qp = Tensor::zeros({m, d});
        Tensor pos = store.get("dec.pos");
        Tensor anchor = store.get("dec.anchor");
        const std::vector<double> saved_pos = pos.data();
        const std::vector<double> saved_anchor = anchor.data();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                qp.data()[i * d + j] = queries.data()[perm[i] * d + j];
                pos.data()[i * d + j] = saved_pos[perm[i] * d + j];
            }
            for (std::size_t j = 0; j < 4; ++j)
                anchor.data()[i * 4 + j] = saved_anchor[perm[i] * 4 + j];
        }
        DecoderOutput permuted = decode(store, "dec", qp, memory, layers, 2);
        pos.data() = saved_pos;
        anchor.data() = saved_anchor;
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < 4; ++j)
                CHECK(permuted.boxes.back().data()[i * 4 + j] ==
                      Catch::Approx(base.boxes.back().data()[perm[i] * 4 + j]).margin(1e-12));
            for (std::size_t j = 0; j < classes; ++j)
                CHECK(permuted.class_probs.back().data()[i * classes + j] ==
                      Catch::Approx(base.class_probs.back().data()[perm[i] * classes + j])
                          .margin(1e-12));
        }
    }
    SECTION("finite differences from the final predictions") {
        auto res = grad_check(
            [&] {
                DecoderOutput out = decode(store, "dec", queries, memory, layers, 2);
                return add(mean_all(out.boxes.back()), mean_all(out.class_probs.back()));
            },
            {{"queries", queries},
             {"memory", memory},
             {"dec.pos", store.get("dec.pos")},
             {"dec.cls.b", store.get("dec.cls.b")}});
        CHECK(res.max_rel_err < 1e-3);
    }
    SECTION("auxiliary layers differ from the final one") {
        DecoderOutput out = decode(store, "dec", queries, memory, layers, 2);
        double diff = 0.0;
        for (std::size_t i = 0; i < out.boxes[0].numel(); ++i)
            diff = std::max(diff,
                            std::fabs(out.boxes[0].data()[i] - out.boxes[1].data()[i]));
        CHECK(diff > 1e-9);
    }
}
