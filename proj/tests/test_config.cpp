#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ctm/config.hpp"

using namespace ctm;

TEST_CASE("defaults validate and map onto the desk-scale model") {
    Config cfg;
    validate_config(cfg);
    ModelConfig m = to_model_config(cfg);
    ModelDims dims = compute_dims(m);
    CHECK(dims.m1 == 32);
    CHECK(dims.d1 == 8);
    CHECK(dims.m3 == 16);
    CHECK(dims.d3 == 4);
    CHECK(m.n_way == 5);
    EpisodeSpec spec = to_episode_spec(cfg);
    CHECK(spec.q == 15);
}

TEST_CASE("parse(serialize(c)) == c") {
    Config cfg;
    cfg.episode_n = 7;
    cfg.episode_q = 4;
    cfg.toy_family = "shape_relevant";
    cfg.model_channels = {16, 24, 32};
    cfg.model_pools = {1, 0, 1};
    cfg.ctm_variant = "cluster_wise";
    cfg.train_lr = 0.00325;
    cfg.train_lr_decay_factor = 0.5;
    cfg.head_kind = "relation";
    cfg.data_root = "/data/somewhere";
    const std::string text = serialize_config(cfg);
    Config back = parse_config_text(text);
    CHECK(serialize_config(back) == text);
    CHECK(config_hash(back) == config_hash(cfg));
    CHECK(back.episode_n == 7);
    CHECK(back.model_channels == std::vector<std::int64_t>{16, 24, 32});
    CHECK(back.train_lr == 0.00325);
}

TEST_CASE("unknown keys are rejected by name") {
    try {
        (void)parse_config_text("trian.lr = 0.001\n");
        FAIL("expected ConfigParseError");
    } catch (const ConfigParseError& e) {
        CHECK(std::string(e.what()).find("trian.lr") != std::string::npos);
    }
}

TEST_CASE("comments, blanks and spacing are tolerated") {
    Config cfg = parse_config_text(
        "# a comment\n"
        "\n"
        "episode.n=4   # trailing comment\n"
        "  train.lr =  0.01\n"
        "ctm.enabled = false\n");
    CHECK(cfg.episode_n == 4);
    CHECK(cfg.train_lr == 0.01);
    CHECK(cfg.ctm_enabled == false);
}

TEST_CASE("malformed values report the key") {
    CHECK_THROWS_AS((void)parse_config_text("episode.n = five\n"), ConfigParseError);
    CHECK_THROWS_AS((void)parse_config_text("ctm.enabled = yes\n"), ConfigParseError);
    CHECK_THROWS_AS((void)parse_config_text("model.channels = \n"), ConfigParseError);
    CHECK_THROWS_AS((void)parse_config_text("just a line\n"), ConfigParseError);
}

TEST_CASE("semantic validation catches cross-field issues") {
    Config cfg;
    cfg.episode_n = 1;
    CHECK_THROWS_AS(validate_config(cfg), ConfigError);

    Config cfg2;
    cfg2.data_source = "dir";  // missing data.root
    CHECK_THROWS_AS(validate_config(cfg2), ConfigError);

    Config cfg3;
    cfg3.toy_size = 64;  // toy source must match the model input size
    CHECK_THROWS_AS(validate_config(cfg3), ConfigError);

    Config cfg4;
    cfg4.model_image_size = 30;  // pooling needs divisibility
    cfg4.toy_size = 30;
    CHECK_THROWS_AS(validate_config(cfg4), ConfigError);

    Config cfg5;
    cfg5.train_loss = "hinge";
    CHECK_THROWS_AS(validate_config(cfg5), ConfigError);
}

TEST_CASE("config hash is sensitive to any field change") {
    Config a;
    Config b;
    b.train_seed = 2;
    CHECK(config_hash(a) != config_hash(b));
    Config c;
    c.ctm_no_projector = true;
    CHECK(config_hash(a) != config_hash(c));
}
