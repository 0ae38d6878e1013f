#include "ctm/config.hpp"

#include <cstdio>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace ctm {

namespace {

struct Entry {
    const char* key;
    std::function<std::string(const Config&)> get;
    std::function<void(Config&, const std::string&)> set;
};

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
    std::int64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        throw ConfigParseError("key '" + key + "': expected integer, got '" + v + "'");
    return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        throw ConfigParseError("key '" + key + "': expected unsigned integer, got '" + v + "'");
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigParseError("key '" + key + "': expected number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigParseError("key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<std::int64_t> parse_list(const std::string& key, const std::string& v) {
    std::vector<std::int64_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        // trim
        size_t b = item.find_first_not_of(" \t");
        size_t e = item.find_last_not_of(" \t");
        if (b == std::string::npos)
            throw ConfigParseError("key '" + key + "': empty list element");
        out.push_back(parse_int(key, item.substr(b, e - b + 1)));
    }
    if (out.empty()) throw ConfigParseError("key '" + key + "': empty list");
    return out;
}

std::string fmt_list(const std::vector<std::int64_t>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

#define FIELD_INT(key, member)                                                     \
    Entry{key, [](const Config& c) { return std::to_string(c.member); },           \
          [](Config& c, const std::string& v) { c.member = parse_int(key, v); }}
#define FIELD_UINT(key, member)                                                    \
    Entry{key, [](const Config& c) { return std::to_string(c.member); },           \
          [](Config& c, const std::string& v) { c.member = parse_uint(key, v); }}
#define FIELD_DOUBLE(key, member)                                                  \
    Entry{key, [](const Config& c) { return fmt_double(c.member); },               \
          [](Config& c, const std::string& v) { c.member = parse_double(key, v); }}
#define FIELD_BOOL(key, member)                                                    \
    Entry{key, [](const Config& c) { return c.member ? "true" : "false"; },        \
          [](Config& c, const std::string& v) { c.member = parse_bool(key, v); }}
#define FIELD_STR(key, member)                                          \
    Entry{key, [](const Config& c) { return c.member; },                \
          [](Config& c, const std::string& v) { c.member = v; }}
#define FIELD_LIST(key, member)                                                    \
    Entry{key, [](const Config& c) { return fmt_list(c.member); },                 \
          [](Config& c, const std::string& v) { c.member = parse_list(key, v); }}

const std::vector<Entry>& registry() {
    static const std::vector<Entry> entries = {
        FIELD_STR("data.source", data_source),
        FIELD_STR("data.root", data_root),
        FIELD_INT("episode.n", episode_n),
        FIELD_INT("episode.k", episode_k),
        FIELD_INT("episode.q", episode_q),
        FIELD_UINT("episode.seed", episode_seed),
        FIELD_INT("toy.size", toy_size),
        FIELD_INT("toy.palette", toy_palette),
        FIELD_INT("toy.shapes", toy_shapes),
        FIELD_STR("toy.family", toy_family),
        FIELD_DOUBLE("toy.jitter_pos", toy_jitter_pos),
        FIELD_DOUBLE("toy.jitter_scale", toy_jitter_scale),
        FIELD_INT("model.image_size", model_image_size),
        FIELD_LIST("model.channels", model_channels),
        FIELD_LIST("model.pools", model_pools),
        FIELD_INT("model.extra_block_channels", model_extra_block_channels),
        FIELD_BOOL("ctm.enabled", ctm_enabled),
        FIELD_STR("ctm.variant", ctm_variant),
        FIELD_STR("ctm.softmax", ctm_softmax),
        FIELD_BOOL("ctm.no_concentrator", ctm_no_concentrator),
        FIELD_BOOL("ctm.no_projector", ctm_no_projector),
        FIELD_INT("ctm.concentrator.channels", concentrator_channels),
        FIELD_INT("ctm.concentrator.kernel", concentrator_kernel),
        FIELD_INT("ctm.concentrator.stride", concentrator_stride),
        FIELD_INT("ctm.concentrator.pad", concentrator_pad),
        FIELD_INT("ctm.reshaper.channels", reshaper_channels),
        FIELD_INT("ctm.reshaper.kernel", reshaper_kernel),
        FIELD_INT("ctm.reshaper.stride", reshaper_stride),
        FIELD_INT("ctm.reshaper.pad", reshaper_pad),
        FIELD_INT("ctm.projector.channels", projector_channels),
        FIELD_INT("ctm.projector.kernel", projector_kernel),
        FIELD_STR("head.kind", head_kind),
        FIELD_INT("head.relation_channels", relation_channels),
        FIELD_INT("head.relation_hidden", relation_hidden),
        FIELD_STR("train.loss", train_loss),
        FIELD_INT("train.episodes", train_episodes),
        FIELD_UINT("train.seed", train_seed),
        FIELD_DOUBLE("train.lr", train_lr),
        FIELD_INT("train.lr_drop_every", train_lr_drop_every),
        FIELD_DOUBLE("train.lr_decay_factor", train_lr_decay_factor),
        FIELD_DOUBLE("train.weight_decay", train_weight_decay),
        FIELD_DOUBLE("train.clip_max_norm", train_clip_max_norm),
        FIELD_DOUBLE("train.adam_beta1", train_adam_beta1),
        FIELD_DOUBLE("train.adam_beta2", train_adam_beta2),
        FIELD_DOUBLE("train.adam_eps", train_adam_eps),
        FIELD_DOUBLE("train.bn_momentum", train_bn_momentum),
        FIELD_STR("train.bn_policy", train_bn_policy),
        FIELD_INT("train.log_every", train_log_every),
        FIELD_INT("eval.every", eval_every),
        FIELD_INT("eval.episodes", eval_episodes),
        FIELD_INT("eval.q", eval_q),
        FIELD_INT("eval.workers", eval_workers),
        FIELD_INT("synth.train_classes", synth_train_classes),
        FIELD_INT("synth.val_classes", synth_val_classes),
        FIELD_INT("synth.test_classes", synth_test_classes),
        FIELD_INT("synth.images_per_class", synth_images_per_class),
    };
    return entries;
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

Config parse_config_text(const std::string& text) {
    Config c;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigParseError("line " + std::to_string(lineno) +
                                   ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        bool found = false;
        for (const auto& e : registry()) {
            if (key == e.key) {
                e.set(c, value);
                found = true;
                break;
            }
        }
        if (!found) throw ConfigParseError("unknown key '" + key + "'");
    }
    return c;
}

Config load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigParseError("cannot open config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str());
}

std::string serialize_config(const Config& c) {
    std::string out;
    for (const auto& e : registry()) {
        out += e.key;
        out += " = ";
        out += e.get(c);
        out += "\n";
    }
    return out;
}

std::uint64_t config_hash(const Config& c) {
    const std::string s = serialize_config(c);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

void validate_config(const Config& c) {
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (c.data_source != "toy" && c.data_source != "dir")
        fail("data.source must be toy or dir");
    if (c.data_source == "dir" && c.data_root.empty())
        fail("data.root is required when data.source = dir");
    if (c.episode_n < 2) fail("episode.n must be >= 2");
    if (c.episode_k < 1) fail("episode.k must be >= 1");
    if (c.episode_q < 1) fail("episode.q must be >= 1");
    if (c.toy_palette < 1 || c.toy_palette > kToyPaletteSize)
        fail("toy.palette must be in [1," + std::to_string(kToyPaletteSize) + "]");
    if (c.toy_shapes < 1 || c.toy_shapes > kToyShapeCount)
        fail("toy.shapes must be in [1," + std::to_string(kToyShapeCount) + "]");
    (void)parse_family(c.toy_family);
    if (c.data_source == "toy" && c.toy_size != c.model_image_size)
        fail("toy.size must equal model.image_size");
    if (c.ctm_variant != "sample_wise" && c.ctm_variant != "cluster_wise")
        fail("ctm.variant must be sample_wise or cluster_wise");
    if (c.ctm_softmax != "per_location" && c.ctm_softmax != "all_locations")
        fail("ctm.softmax must be per_location or all_locations");
    if (c.head_kind != "matching" && c.head_kind != "prototypical" &&
        c.head_kind != "relation")
        fail("head.kind must be matching, prototypical or relation");
    if (c.train_loss != "cross_entropy" && c.train_loss != "mse")
        fail("train.loss must be cross_entropy or mse");
    if (c.train_bn_policy != "running" && c.train_bn_policy != "batch")
        fail("train.bn_policy must be running or batch");
    if (c.train_episodes < 0) fail("train.episodes must be >= 0");
    if (c.train_lr_drop_every < 1) fail("train.lr_drop_every must be >= 1");
    if (c.train_lr_decay_factor <= 0 || c.train_lr_decay_factor > 1)
        fail("train.lr_decay_factor must be in (0,1]");
    if (c.train_clip_max_norm <= 0) fail("train.clip_max_norm must be > 0");
    if (c.eval_episodes < 1) fail("eval.episodes must be >= 1");
    if (c.eval_q < 1) fail("eval.q must be >= 1");
    if (c.train_log_every < 1) fail("train.log_every must be >= 1");
    (void)compute_dims(to_model_config(c));  // shape contract at build time
}

ModelConfig to_model_config(const Config& c) {
    ModelConfig m;
    m.image_size = static_cast<int>(c.model_image_size);
    m.backbone_channels.assign(c.model_channels.begin(), c.model_channels.end());
    m.backbone_pools.assign(c.model_pools.begin(), c.model_pools.end());
    m.extra_block_channels = static_cast<int>(c.model_extra_block_channels);
    m.ctm_enabled = c.ctm_enabled;
    m.no_concentrator = c.ctm_no_concentrator;
    m.no_projector = c.ctm_no_projector;
    m.concentrator = {static_cast<int>(c.concentrator_channels),
                      static_cast<int>(c.concentrator_kernel),
                      static_cast<int>(c.concentrator_stride),
                      static_cast<int>(c.concentrator_pad)};
    m.reshaper = {static_cast<int>(c.reshaper_channels),
                  static_cast<int>(c.reshaper_kernel),
                  static_cast<int>(c.reshaper_stride), static_cast<int>(c.reshaper_pad)};
    m.projector_channels = static_cast<int>(c.projector_channels);
    m.projector_kernel = static_cast<int>(c.projector_kernel);
    m.mask_variant = c.ctm_variant == "cluster_wise" ? MaskVariant::cluster_wise
                                                     : MaskVariant::sample_wise;
    m.softmax_mode = c.ctm_softmax == "all_locations" ? SoftmaxMode::all_locations
                                                      : SoftmaxMode::per_location;
    m.head = c.head_kind == "matching"
                 ? HeadKind::matching
                 : (c.head_kind == "relation" ? HeadKind::relation
                                              : HeadKind::prototypical);
    m.relation_channels = static_cast<int>(c.relation_channels);
    m.relation_hidden = static_cast<int>(c.relation_hidden);
    m.loss = c.train_loss == "mse" ? LossKind::mse : LossKind::cross_entropy;
    m.n_way = static_cast<int>(c.episode_n);
    m.bn_momentum = static_cast<float>(c.train_bn_momentum);
    m.bn_policy = c.train_bn_policy == "batch" ? BnPolicy::batch_stats
                                               : BnPolicy::running_stats;
    return m;
}

ToySpec to_toy_spec(const Config& c) {
    ToySpec t;
    t.size = static_cast<int>(c.toy_size);
    t.palette = static_cast<int>(c.toy_palette);
    t.shapes = static_cast<int>(c.toy_shapes);
    t.family = parse_family(c.toy_family);
    t.jitter_pos = c.toy_jitter_pos;
    t.jitter_scale = c.toy_jitter_scale;
    t.seed = c.train_seed;
    return t;
}

EpisodeSpec to_episode_spec(const Config& c) {
    EpisodeSpec e;
    e.n = static_cast<int>(c.episode_n);
    e.k = static_cast<int>(c.episode_k);
    e.q = static_cast<int>(c.episode_q);
    e.seed = c.episode_seed;
    return e;
}

LossKind loss_kind_of(const Config& c) {
    return c.train_loss == "mse" ? LossKind::mse : LossKind::cross_entropy;
}

}  // namespace ctm
