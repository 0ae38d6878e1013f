#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ctm/heads.hpp"
#include "ctm/nn.hpp"
#include "ctm/ops.hpp"
#include "ctm/rng.hpp"

namespace ctm {

struct ConvStageCfg {
    int channels = 16;
    int kernel = 3;
    int stride = 2;
    int pad = 1;
};

struct ModelConfig {
    int image_size = 32;
    int in_channels = 3;
    std::vector<int> backbone_channels = {32, 32, 32, 32};
    std::vector<int> backbone_pools = {1, 1, 0, 0};
    // Extra trailing backbone block (no pool) used by capacity-matched
    // baselines; 0 disables it.
    int extra_block_channels = 0;

    bool ctm_enabled = true;
    bool no_concentrator = false;  // replace the concentrator CNN by class
                                   // averaging of reshaper-path features
    bool no_projector = false;     // support uses o, query uses r(Q), no mask
    ConvStageCfg concentrator{16, 3, 2, 1};
    ConvStageCfg reshaper{16, 3, 2, 1};
    int projector_channels = 16;
    int projector_kernel = 1;  // odd; pad (k-1)/2 keeps spatial dims
    MaskVariant mask_variant = MaskVariant::sample_wise;
    SoftmaxMode softmax_mode = SoftmaxMode::per_location;

    HeadKind head = HeadKind::prototypical;
    int relation_channels = 32;
    int relation_hidden = 64;
    LossKind loss = LossKind::cross_entropy;

    int n_way = 5;
    float bn_momentum = 0.1f;
    // training-time normalization; running_stats keeps training consistent
    // with running-stat evaluation (see BnPolicy)
    BnPolicy bn_policy = BnPolicy::running_stats;
};

struct ModelDims {
    int m1 = 0, d1 = 0;  // backbone output
    int m2 = 0, d2 = 0;  // concentrator output
    int m3 = 0, d3 = 0;  // projector mask / reshaper output
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Output extents are a pure function of the configuration.
inline ModelDims compute_dims(const ModelConfig& cfg) {
    if (cfg.backbone_channels.empty())
        throw ConfigError("backbone needs at least one block");
    if (cfg.backbone_pools.size() != cfg.backbone_channels.size())
        throw ConfigError("backbone pools list must match channel list");
    ModelDims dims;
    int spatial = cfg.image_size;
    for (size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
        if (cfg.backbone_pools[i]) {
            if (spatial % 2 != 0)
                throw ConfigError("spatial size " + std::to_string(spatial) +
                                  " not divisible by 2 at backbone block " +
                                  std::to_string(i));
            spatial /= 2;
        }
    }
    dims.m1 = cfg.extra_block_channels > 0 ? cfg.extra_block_channels
                                           : cfg.backbone_channels.back();
    dims.d1 = spatial;

    auto conv_out = [](int in, const ConvStageCfg& s) {
        const int out = (in + 2 * s.pad - s.kernel) / s.stride + 1;
        if (out <= 0) throw ConfigError("conv stage output extent is non-positive");
        return out;
    };
    dims.m2 = cfg.concentrator.channels;
    dims.d2 = conv_out(dims.d1, cfg.concentrator);
    dims.m3 = cfg.projector_channels;
    dims.d3 = dims.d2;  // projector stride 1 with size-preserving pad
    const int reshaper_out = conv_out(dims.d1, cfg.reshaper);

    if (cfg.projector_kernel < 1 || cfg.projector_kernel % 2 == 0)
        throw ConfigError("projector kernel must be odd");
    if (cfg.reshaper.channels != dims.m3 || reshaper_out != dims.d3)
        throw ConfigError("reshaper output (" + std::to_string(cfg.reshaper.channels) +
                          "," + std::to_string(reshaper_out) +
                          ") must match projector mask dims (" + std::to_string(dims.m3) +
                          "," + std::to_string(dims.d3) + ")");
    const bool needs_shared_dims = cfg.mask_variant == MaskVariant::cluster_wise ||
                                   cfg.no_projector || cfg.no_concentrator;
    if (cfg.ctm_enabled && needs_shared_dims &&
        (dims.m2 != dims.m3 || dims.d2 != dims.d3))
        throw ConfigError("this configuration requires concentrator dims (m2,d2) == "
                          "projector dims (m3,d3)");
    return dims;
}

template <class T>
struct Backbone {
    std::vector<ConvBlock<T>> blocks;

    Backbone() = default;

    Backbone(const ModelConfig& cfg, Rng& rng) {
        int in_c = cfg.in_channels;
        for (size_t i = 0; i < cfg.backbone_channels.size(); ++i) {
            blocks.emplace_back(in_c, cfg.backbone_channels[i], 3, 1, 1,
                                cfg.backbone_pools[i] != 0, rng,
                                static_cast<T>(cfg.bn_momentum), cfg.bn_policy);
            in_c = cfg.backbone_channels[i];
        }
        if (cfg.extra_block_channels > 0)
            blocks.emplace_back(in_c, cfg.extra_block_channels, 3, 1, 1, false, rng,
                                static_cast<T>(cfg.bn_momentum), cfg.bn_policy);
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        Tensor<T> y = x;
        for (auto& b : blocks) y = b.forward(y, training);
        return y;
    }

    std::int64_t param_count() const {
        std::int64_t c = 0;
        for (const auto& b : blocks) c += b.param_count();
        return c;
    }

    void collect_params(NamedTensors<T>& out) {
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect_params("backbone.block" + std::to_string(i), out);
    }
    void collect_buffers(NamedTensors<T>& out) {
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect_buffers("backbone.block" + std::to_string(i), out);
    }
};

// Averages the K samples of each class; identity over one element when K=1.
template <class T>
Tensor<T> class_mean(const Tensor<T>& x, int n, int k) {
    if (x.dim(0) != static_cast<std::int64_t>(n) * k)
        throw_shape("class_mean", "leading extent " + std::to_string(x.dim(0)) +
                                      " not divisible as n*k");
    if (k == 1) return x;
    Shape grouped{static_cast<std::int64_t>(n), static_cast<std::int64_t>(k)};
    for (int i = 1; i < x.rank(); ++i) grouped.push_back(x.dim(i));
    return mean_axis(reshape(x, grouped), 1);
}

template <class T>
struct EpisodeForward {
    ScoreMatrix<T> scores;
    Tensor<T> improved_support, improved_query;
    Tensor<T> mask;  // defined iff the projector ran
};

// Backbone + category traversal + metric head over one episode.
template <class T>
class FewShotModel {
public:
    FewShotModel(const ModelConfig& cfg, std::uint64_t seed)
        : cfg_(cfg), dims_(compute_dims(cfg)) {
        Rng rng(mix_seed(seed, 0x1217));
        backbone_ = Backbone<T>(cfg, rng);
        const T bn_mom = static_cast<T>(cfg.bn_momentum);
        if (cfg.ctm_enabled) {
            if (!cfg.no_concentrator)
                concentrator_.emplace(dims_.m1, cfg.concentrator.channels,
                                      cfg.concentrator.kernel, cfg.concentrator.stride,
                                      cfg.concentrator.pad, false, rng, bn_mom,
                                      cfg.bn_policy);
            if (!cfg.no_projector) {
                projector_conv_ = Conv2dLayer<T>(
                    static_cast<std::int64_t>(cfg.n_way) * dims_.m2, dims_.m3,
                    cfg.projector_kernel, 1, (cfg.projector_kernel - 1) / 2, rng,
                    /*bias=*/false);
                projector_bn_ = BatchNorm2dLayer<T>(dims_.m3, bn_mom, cfg.bn_policy);
            }
        }
        reshaper_.emplace(dims_.m1, cfg.reshaper.channels, cfg.reshaper.kernel,
                          cfg.reshaper.stride, cfg.reshaper.pad, false, rng, bn_mom,
                          cfg.bn_policy);
        if (cfg.head == HeadKind::relation)
            relation_.emplace(dims_.m3, cfg.relation_channels, dims_.d3,
                              cfg.relation_hidden, rng, bn_mom, cfg.bn_policy);
    }

    const ModelConfig& config() const { return cfg_; }
    const ModelDims& dims() const { return dims_; }

    // support (N*K, 3, H, W) and query (N*Q, 3, H, W), both class-major and
    // in [0,1]; normalization to mean 0.5 / std 0.5 happens here.
    EpisodeForward<T> forward_episode(const Tensor<T>& support, const Tensor<T>& query,
                                      bool training) {
        const int n = cfg_.n_way;
        if (support.dim(0) % n != 0)
            throw_shape("forward_episode", "support extent not divisible by n_way");
        const int k = static_cast<int>(support.dim(0)) / n;

        auto batch = concat0<T>({support, query});
        batch = scale(sub(batch, T(0.5)), T(2));
        auto feats = backbone_.forward(batch, training);
        auto f_s = narrow0(feats, 0, support.dim(0));
        auto f_q = narrow0(feats, support.dim(0), query.dim(0));

        auto r_all = reshaper_->forward(feats, training);
        auto r_s = narrow0(r_all, 0, support.dim(0));
        auto r_q = narrow0(r_all, support.dim(0), query.dim(0));

        EpisodeForward<T> out;
        ImprovedFeatures<T> sup, que;
        que = {r_q, RowKind::per_sample, n, k};

        if (!cfg_.ctm_enabled) {
            sup = {r_s, RowKind::per_sample, n, k};
        } else {
            Tensor<T> o = cfg_.no_concentrator
                              ? class_mean(r_s, n, k)
                              : class_mean(concentrator_->forward(f_s, training), n, k);
            if (cfg_.no_projector) {
                sup = {o, RowKind::per_class, n, k};
            } else {
                out.mask = project(o, training);
                que.features = mul(r_q, out.mask);
                if (cfg_.mask_variant == MaskVariant::sample_wise)
                    sup = {mul(r_s, out.mask), RowKind::per_sample, n, k};
                else
                    sup = {mul(o, out.mask), RowKind::per_class, n, k};
            }
        }

        out.improved_support = sup.features;
        out.improved_query = que.features;
        switch (cfg_.head) {
            case HeadKind::matching:
                out.scores = cosine_scores(sup, que);
                break;
            case HeadKind::prototypical:
                out.scores = euclidean_scores(sup, que);
                break;
            case HeadKind::relation:
                out.scores = relation_scores(sup, que, *relation_,
                                             cfg_.loss == LossKind::mse, training);
                break;
        }
        return out;
    }

    // Task-relevance mask from the class-stacked concentrator output.
    Tensor<T> project(const Tensor<T>& o, bool training) {
        auto ohat = reshape(o, {1, o.dim(0) * o.dim(1), o.dim(2), o.dim(3)});
        auto z = relu(projector_bn_.forward(projector_conv_.forward(ohat), training));
        if (cfg_.softmax_mode == SoftmaxMode::per_location) return softmax_axis(z, 1);
        auto flat = reshape(z, {1, z.numel()});
        return reshape(softmax_axis(flat, 1), z.shape());
    }

    std::vector<Tensor<T>> parameters() {
        NamedTensors<T> named;
        collect_params(named);
        std::vector<Tensor<T>> out;
        out.reserve(named.size());
        for (auto& [k, t] : named) out.push_back(t);
        return out;
    }

    void collect_params(NamedTensors<T>& out) {
        backbone_.collect_params(out);
        if (concentrator_) concentrator_->collect_params("ctm.concentrator", out);
        if (cfg_.ctm_enabled && !cfg_.no_projector) {
            projector_conv_.collect_params("ctm.projector.conv", out);
            projector_bn_.collect_params("ctm.projector.bn", out);
        }
        reshaper_->collect_params("ctm.reshaper", out);
        if (relation_) relation_->collect_params("head.relation", out);
    }

    void collect_buffers(NamedTensors<T>& out) {
        backbone_.collect_buffers(out);
        if (concentrator_) concentrator_->collect_buffers("ctm.concentrator", out);
        if (cfg_.ctm_enabled && !cfg_.no_projector)
            projector_bn_.collect_buffers("ctm.projector.bn", out);
        reshaper_->collect_buffers("ctm.reshaper", out);
        if (relation_) relation_->collect_buffers("head.relation", out);
    }

    std::int64_t param_count() {
        std::int64_t c = 0;
        for (auto& p : parameters()) c += p.numel();
        return c;
    }

    Backbone<T>& backbone() { return backbone_; }
    ConvBlock<T>& concentrator() { return *concentrator_; }
    ConvBlock<T>& reshaper() { return *reshaper_; }
    RelationHead<T>& relation() { return *relation_; }

private:
    ModelConfig cfg_;
    ModelDims dims_;
    Backbone<T> backbone_;
    std::optional<ConvBlock<T>> concentrator_;
    Conv2dLayer<T> projector_conv_;
    BatchNorm2dLayer<T> projector_bn_;
    std::optional<ConvBlock<T>> reshaper_;
    std::optional<RelationHead<T>> relation_;
};

}  // namespace ctm
