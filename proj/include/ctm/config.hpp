#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctm/episodes.hpp"
#include "ctm/model.hpp"
#include "ctm/synth.hpp"

namespace ctm {

struct ConfigParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Every run-time knob, one flat key per field. parse(serialize(c)) == c.
struct Config {
    std::string data_source = "toy";  // toy | dir
    std::string data_root;

    std::int64_t episode_n = 5;
    std::int64_t episode_k = 1;
    std::int64_t episode_q = 15;
    std::uint64_t episode_seed = 0;

    std::int64_t toy_size = 32;
    std::int64_t toy_palette = 8;
    std::int64_t toy_shapes = 8;
    std::string toy_family = "mixed";
    double toy_jitter_pos = 2.0;
    double toy_jitter_scale = 0.10;

    std::int64_t model_image_size = 32;
    std::vector<std::int64_t> model_channels = {32, 32, 32, 32};
    std::vector<std::int64_t> model_pools = {1, 1, 0, 0};
    std::int64_t model_extra_block_channels = 0;

    bool ctm_enabled = true;
    std::string ctm_variant = "sample_wise";    // sample_wise | cluster_wise
    std::string ctm_softmax = "per_location";   // per_location | all_locations
    bool ctm_no_concentrator = false;
    bool ctm_no_projector = false;
    std::int64_t concentrator_channels = 16, concentrator_kernel = 3;
    std::int64_t concentrator_stride = 2, concentrator_pad = 1;
    std::int64_t reshaper_channels = 16, reshaper_kernel = 3;
    std::int64_t reshaper_stride = 2, reshaper_pad = 1;
    std::int64_t projector_channels = 16, projector_kernel = 1;

    std::string head_kind = "prototypical";  // matching | prototypical | relation
    std::int64_t relation_channels = 32, relation_hidden = 64;

    std::string train_loss = "cross_entropy";  // cross_entropy | mse
    std::int64_t train_episodes = 20000;
    std::uint64_t train_seed = 1;
    double train_lr = 0.001;
    std::int64_t train_lr_drop_every = 5000;
    double train_lr_decay_factor = 0.1;
    double train_weight_decay = 0.0005;
    double train_clip_max_norm = 10.0;
    double train_adam_beta1 = 0.9;
    double train_adam_beta2 = 0.999;
    double train_adam_eps = 1e-8;
    double train_bn_momentum = 0.1;
    std::string train_bn_policy = "running";  // running | batch
    std::int64_t train_log_every = 50;

    std::int64_t eval_every = 5000;
    std::int64_t eval_episodes = 150;
    std::int64_t eval_q = 15;
    std::int64_t eval_workers = 0;  // 0 = pool, 1 = serial

    std::int64_t synth_train_classes = 10;
    std::int64_t synth_val_classes = 5;
    std::int64_t synth_test_classes = 5;
    std::int64_t synth_images_per_class = 50;
};

// `key = value` lines, '#' comments, booleans true/false, decimal numbers,
// comma lists. Unknown keys are rejected by name.
Config parse_config_text(const std::string& text);
Config load_config_file(const std::string& path);
std::string serialize_config(const Config& c);
std::uint64_t config_hash(const Config& c);

// Cross-field validation; throws ConfigError with a message.
void validate_config(const Config& c);

ModelConfig to_model_config(const Config& c);
ToySpec to_toy_spec(const Config& c);
EpisodeSpec to_episode_spec(const Config& c);
LossKind loss_kind_of(const Config& c);

}  // namespace ctm
