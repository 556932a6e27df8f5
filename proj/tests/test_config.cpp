#include <catch2/catch_amalgamated.hpp>

#include <string>

#include "gptr/config.hpp"

using namespace gptr;
using Catch::Matchers::ContainsSubstring;

TEST_CASE("defaults are valid and round-trip through the text form") {
    RunConfig cfg;
    REQUIRE_NOTHROW(validate_config(cfg));

    const std::string text = write_config_text(cfg);
    RunConfig back;
    back.d = 1;  // scribble so the parse has to restore every field
    back.layers = 1;
    back.heads = 1;
    parse_config_text(text, back);
    REQUIRE(back == cfg);
}

TEST_CASE("every field survives a write/parse cycle") {
    RunConfig cfg;
    cfg.d = 64;
    cfg.layers = 2;
    cfg.heads = 4;
    cfg.queries = 10;
    cfg.pool_ratio = 0.25;
    cfg.delta = 0.05;
    cfg.dropout = 0.0;
    cfg.lr = 3e-4;
    cfg.weight_decay = 1e-5;
    cfg.batch_size = 8;
    cfg.epochs = 50;
    cfg.seed = 7;
    cfg.branch_cb = true;
    cfg.branch_pb = false;
    cfg.branch_eb = true;
    cfg.adaptive_fusion = false;
    cfg.vq = false;
    cfg.msa = false;
    cfg.normalize_w = false;
    cfg.aux_loss = false;
    cfg.dataset = "data/train.json";
    cfg.checkpoint = "out/model.json";
    cfg.output = "out";

    RunConfig back;
    parse_config_text(write_config_text(cfg), back);
    REQUIRE(back == cfg);
}

TEST_CASE("parsing accepts comments, blank lines and whitespace") {
    RunConfig cfg;
    parse_config_text("# a comment\n"
                      "\n"
                      "  d = 64   # trailing comment\n"
                      "branches = cb , eb\n"
                      "seed=9\n",
                      cfg);
    REQUIRE(cfg.d == 64);
    REQUIRE(cfg.seed == 9);
    REQUIRE(cfg.branch_cb);
    REQUIRE(!cfg.branch_pb);
    REQUIRE(cfg.branch_eb);
}

TEST_CASE("malformed input is rejected with the offending line") {
    RunConfig cfg;

    SECTION("unknown key") {
        REQUIRE_THROWS_MATCHES(parse_config_text("depth = 3\n", cfg), ConfigError,
                               Catch::Matchers::MessageMatches(ContainsSubstring("depth")));
    }
    SECTION("missing separator") {
        REQUIRE_THROWS_MATCHES(parse_config_text("d 64\n", cfg), ConfigError,
                               Catch::Matchers::MessageMatches(ContainsSubstring("line 1")));
    }
    SECTION("non-numeric value") {
        REQUIRE_THROWS_AS(parse_config_text("d = twelve\n", cfg), ConfigError);
    }
    SECTION("bad boolean") {
        REQUIRE_THROWS_AS(parse_config_text("vq = maybe\n", cfg), ConfigError);
    }
    SECTION("bad branch name") {
        REQUIRE_THROWS_MATCHES(parse_config_text("branches = cb,xx\n", cfg), ConfigError,
                               Catch::Matchers::MessageMatches(ContainsSubstring("xx")));
    }
    SECTION("negative learning rate") {
        parse_config_text("lr = -1.0\n", cfg);
        REQUIRE_THROWS_MATCHES(validate_config(cfg), ConfigError,
                               Catch::Matchers::MessageMatches(ContainsSubstring("lr")));
    }
}

TEST_CASE("validation names the field that is out of range") {
    auto expect_reject = [](const char* line, const char* field) {
        RunConfig cfg;
        parse_config_text(line, cfg);
        REQUIRE_THROWS_MATCHES(validate_config(cfg), ConfigError,
                               Catch::Matchers::MessageMatches(ContainsSubstring(field)));
    };
    expect_reject("d = 0\n", "d");
    expect_reject("heads = 0\n", "heads");
    expect_reject("d = 10\n", "heads");  // 10 % 4 != 0
    expect_reject("layers = 0\n", "layers");
    expect_reject("queries = 0\n", "queries");
    expect_reject("pool_ratio = 1.0\n", "pool_ratio");
    expect_reject("pool_ratio = 0.0\n", "pool_ratio");
    expect_reject("delta = 0.0\n", "delta");
    expect_reject("dropout = 1.0\n", "dropout");
    expect_reject("batch_size = 0\n", "batch_size");
    expect_reject("branches = \n", "branches");
}

TEST_CASE("query count must fit the pooled node budget") {
    RunConfig cfg;
    cfg.layers = 1;  // pool is just the 196 base nodes
    cfg.queries = 196;
    REQUIRE_NOTHROW(validate_config(cfg));
    cfg.queries = 197;
    REQUIRE_THROWS_AS(validate_config(cfg), ConfigError);
}

TEST_CASE("pooling schedule halves and never repeats") {
    RunConfig cfg;
    cfg.layers = 4;
    REQUIRE(config_schedule(cfg) == std::vector<std::size_t>{196, 98, 49, 25});
    cfg.pool_ratio = 0.9;
    cfg.layers = 3;
    REQUIRE(config_schedule(cfg) == std::vector<std::size_t>{196, 177, 160});
}
