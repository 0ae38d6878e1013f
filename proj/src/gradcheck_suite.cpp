#include <functional>

#include "ctm/gradcheck.hpp"
#include "ctm/heads.hpp"
#include "ctm/model.hpp"
#include "ctm/ops.hpp"
#include "ctm/synth.hpp"

namespace ctm {

namespace {

TensorD randn(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// squared output keeps every check sensitive to sign errors
TensorD sq(const TensorD& t) { return sum_all(mul(t, t)); }

struct Suite {
    std::vector<GradCheckResult> results;
    Rng rng{20240501};

    void check(const std::string& name, TensorD x,
               const std::function<TensorD(const TensorD&)>& f) {
        results.push_back({name, gradcheck(f, x)});
    }
};

// Tiny episode config used for the composed-graph checks: 8x8 images,
// 4-channel blocks, N=3, K=2.
ModelConfig tiny_config(HeadKind head) {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.backbone_channels = {4, 4};
    cfg.backbone_pools = {1, 0};
    cfg.concentrator = {4, 3, 2, 1};
    cfg.reshaper = {4, 3, 2, 1};
    cfg.projector_channels = 4;
    cfg.head = head;
    cfg.relation_channels = 4;
    cfg.relation_hidden = 8;
    cfg.n_way = 3;
    cfg.bn_momentum = 0.0f;  // keeps forward passes pure for differencing
    return cfg;
}

// Max relative error over the input images and every parameter tensor of the
// composed backbone -> concentrator -> projector -> mask -> head graph.
// The relation head is checked in its sigmoid+MSE mode: under softmax
// cross-entropy its bias directions shift every logit equally, giving
// structurally zero gradients that finite differences cannot resolve.
double composite_check(HeadKind head, MaskVariant variant,
                       BnPolicy policy = BnPolicy::running_stats) {
    ModelConfig cfg = tiny_config(head);
    cfg.mask_variant = variant;
    cfg.bn_policy = policy;
    cfg.loss = head == HeadKind::relation ? LossKind::mse : LossKind::cross_entropy;
    FewShotModel<double> model(cfg, 7);

    ToySpec toy;
    toy.size = 8;
    EpisodeSpec spec;
    spec.n = 3;
    spec.k = 2;
    spec.q = 2;
    Rng rng(101);
    Episode ep = gen_toy_episode(toy, spec, rng).episode;
    TensorD support = ep.support_images.cast<double>();
    TensorD query = ep.query_images.cast<double>();
    // Rendered images have flat color regions, i.e. exact maxpool ties; a
    // per-pixel dither keeps central differences away from the kinks.
    Rng dither(555);
    for (auto& v : support.data()) v = v * 0.9 + 0.02 + dither.uniform(0.0, 0.02);
    for (auto& v : query.data()) v = v * 0.9 + 0.02 + dither.uniform(0.0, 0.02);

    auto forward_loss = [&]() {
        auto fwd = model.forward_episode(support, query, true);
        return episode_loss(fwd.scores, ep.query_labels, cfg.loss);
    };
    // A weight perturbation shifts every downstream pre-activation, so the
    // composite uses a smaller step than the per-op default to keep the
    // differencing interval clear of relu/maxpool kinks.
    const double h = 2e-5;
    double worst = 0.0;
    worst = std::max(
        worst, gradcheck([&](const TensorD&) { return forward_loss(); }, support, h));
    NamedTensors<double> params;
    model.collect_params(params);
    for (auto& [key, tensor] : params) {
        Tensor<double> t = tensor;
        worst = std::max(
            worst, gradcheck([&](const TensorD&) { return forward_loss(); }, t, h));
    }
    return worst;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite() {
    Suite s;

    s.check("add", randn({3, 4}, s.rng),
            [&](const TensorD& t) { return sq(add(t, t)); });
    {
        TensorD b = randn({1, 4, 2}, s.rng);
        s.check("add_broadcast", randn({3, 4, 2}, s.rng),
                [b](const TensorD& t) { return sq(add(t, b)); });
        s.check("add_broadcast_rhs", b.clone(), [&, a = randn({3, 4, 2}, s.rng)](
                                                    const TensorD& t) {
            return sq(add(a, t));
        });
    }
    {
        TensorD b = randn({2, 5}, s.rng);
        s.check("sub", randn({2, 5}, s.rng),
                [b](const TensorD& t) { return sq(sub(t, b)); });
        s.check("mul", randn({2, 5}, s.rng),
                [b](const TensorD& t) { return sq(mul(t, b)); });
        TensorD denom = randn({2, 5}, s.rng, 0.5, 1.5);
        s.check("div", randn({2, 5}, s.rng),
                [denom](const TensorD& t) { return sq(divide(t, denom)); });
        s.check("div_rhs", denom.clone(), [&, a = randn({2, 5}, s.rng)](const TensorD& t) {
            return sq(divide(a, t));
        });
    }
    s.check("scale", randn({6}, s.rng),
            [](const TensorD& t) { return sq(scale(t, 1.7)); });
    {
        TensorD b = randn({4, 3}, s.rng);
        s.check("matmul", randn({2, 4}, s.rng),
                [b](const TensorD& t) { return sq(matmul(t, b)); });
        s.check("matmul_rhs", b.clone(), [a = randn({2, 4}, s.rng)](const TensorD& t) {
            return sq(matmul(a, t));
        });
    }
    {
        TensorD w = randn({3, 5}, s.rng);
        TensorD b = randn({3}, s.rng);
        s.check("linear", randn({4, 5}, s.rng),
                [w, b](const TensorD& t) { return sq(linear(t, w, b)); });
        s.check("linear_w", w.clone(), [b, x = randn({4, 5}, s.rng)](const TensorD& t) {
            return sq(linear(x, t, b));
        });
        s.check("linear_b", b.clone(), [w, x = randn({4, 5}, s.rng)](const TensorD& t) {
            return sq(linear(x, w, t));
        });
    }
    {
        TensorD w = randn({4, 3, 3, 3}, s.rng);
        TensorD b = randn({4}, s.rng);
        TensorD x = randn({2, 3, 6, 6}, s.rng);
        s.check("conv2d_s1p1", x.clone(),
                [w, b](const TensorD& t) { return sq(conv2d(t, w, b, 1, 1)); });
        s.check("conv2d_s2p1", x.clone(),
                [w, b](const TensorD& t) { return sq(conv2d(t, w, b, 2, 1)); });
        s.check("conv2d_s2p0", x.clone(),
                [w, b](const TensorD& t) { return sq(conv2d(t, w, b, 2, 0)); });
        s.check("conv2d_w", w.clone(),
                [x, b](const TensorD& t) { return sq(conv2d(x, t, b, 1, 1)); });
        s.check("conv2d_b", b.clone(),
                [x, w](const TensorD& t) { return sq(conv2d(x, w, t, 2, 1)); });
    }
    {
        TensorD x({1, 2, 6, 6});
        for (std::int64_t i = 0; i < x.numel(); ++i)
            x.data()[i] = s.rng.uniform(-1, 1) + 0.013 * static_cast<double>(i);
        s.check("maxpool2", x.clone(), [](const TensorD& t) { return sq(maxpool2(t)); });
        TensorD odd({1, 2, 5, 5});
        for (std::int64_t i = 0; i < odd.numel(); ++i)
            odd.data()[i] = s.rng.uniform(-1, 1) + 0.017 * static_cast<double>(i);
        s.check("maxpool2_odd", odd.clone(),
                [](const TensorD& t) { return sq(maxpool2(t)); });
    }
    {
        TensorD x({12});
        for (auto& v : x.data()) {
            v = s.rng.uniform(-1, 1);
            if (std::abs(v) < 0.15) v += v < 0 ? -0.2 : 0.2;
        }
        s.check("relu", x.clone(), [](const TensorD& t) { return sq(relu(t)); });
    }
    s.check("sigmoid", randn({10}, s.rng, -2, 2),
            [](const TensorD& t) { return sum_all(sigmoid(t)); });
    {
        TensorD gamma = randn({3}, s.rng, 0.5, 1.5);
        TensorD beta = randn({3}, s.rng, -0.3, 0.3);
        // Linear readout with random weights: a squared readout of normalized
        // activations is nearly constant in x, leaving nothing to difference.
        TensorD readout = randn({4, 3, 3, 3}, s.rng);
        auto bn = [gamma, beta, readout](const TensorD& t, bool training) {
            TensorD rm({3}, 0.05), rv({3}, 1.1);
            auto y = batchnorm2d(t, gamma, beta, rm, rv, training, 0.0, 1e-5);
            return sum_all(mul(y, readout));
        };
        s.check("batchnorm_train", randn({4, 3, 3, 3}, s.rng),
                [bn](const TensorD& t) { return bn(t, true); });
        s.check("batchnorm_eval", randn({4, 3, 3, 3}, s.rng),
                [bn](const TensorD& t) { return bn(t, false); });
        s.check("batchnorm_gamma", gamma.clone(),
                [beta, readout, x = randn({4, 3, 3, 3}, s.rng)](const TensorD& t) {
                    TensorD rm({3}, 0.0), rv({3}, 1.0);
                    auto y = batchnorm2d(x, t, beta, rm, rv, true, 0.0, 1e-5);
                    return sum_all(mul(y, readout));
                });
        s.check("batchnorm_beta", beta.clone(),
                [gamma, readout, x = randn({4, 3, 3, 3}, s.rng)](const TensorD& t) {
                    TensorD rm({3}, 0.0), rv({3}, 1.0);
                    auto y = batchnorm2d(x, gamma, t, rm, rv, true, 0.0, 1e-5);
                    return sum_all(mul(y, readout));
                });
    }
    s.check("softmax_axis", randn({2, 5, 3}, s.rng, -2, 2),
            [](const TensorD& t) { return sq(softmax_axis(t, 1)); });
    s.check("softmax_all", randn({1, 4, 2, 2}, s.rng, -2, 2), [](const TensorD& t) {
        auto flat = reshape(t, {1, t.numel()});
        return sq(softmax_axis(flat, 1));
    });
    s.check("cross_entropy", randn({4, 5}, s.rng, -2, 2), [](const TensorD& t) {
        return cross_entropy_rows(t, {0, 2, 4, 1});
    });
    {
        TensorD target = randn({3, 4}, s.rng);
        s.check("mse", randn({3, 4}, s.rng),
                [target](const TensorD& t) { return mse(t, target); });
    }
    s.check("reshape", randn({3, 4}, s.rng),
            [](const TensorD& t) { return sq(reshape(t, {2, 6})); });
    s.check("transpose2d", randn({3, 4}, s.rng),
            [](const TensorD& t) { return sq(transpose2d(t)); });
    s.check("narrow0", randn({5, 3}, s.rng),
            [](const TensorD& t) { return sq(narrow0(t, 1, 3)); });
    s.check("concat0", randn({3, 2}, s.rng), [](const TensorD& t) {
        return sq(concat0<double>({t, scale(t, -0.5)}));
    });
    s.check("mean_axis", randn({3, 4, 2}, s.rng),
            [](const TensorD& t) { return sq(mean_axis(t, 1)); });
    s.check("sum_all", randn({7}, s.rng),
            [](const TensorD& t) { return mul(sum_all(t), sum_all(t)); });
    {
        TensorD b = randn({4, 6}, s.rng);
        s.check("pairwise_sqdist", randn({3, 6}, s.rng),
                [b](const TensorD& t) { return sq(pairwise_sqdist(t, b)); });
        s.check("pairwise_sqdist_rhs", b.clone(),
                [a = randn({3, 6}, s.rng)](const TensorD& t) {
                    return sq(pairwise_sqdist(a, t));
                });
        s.check("pairwise_cosine", randn({3, 6}, s.rng),
                [b](const TensorD& t) { return sq(pairwise_cosine(t, b)); });
        s.check("pairwise_cosine_rhs", b.clone(),
                [a = randn({3, 6}, s.rng)](const TensorD& t) {
                    return sq(pairwise_cosine(a, t));
                });
    }
    s.check("pair_concat", randn({2, 3, 2, 2}, s.rng),
            [q = randn({3, 3, 2, 2}, s.rng)](const TensorD& t) {
                return sq(pair_concat(t, q));
            });

    s.results.push_back(
        {"composite_euclidean_i1",
         composite_check(HeadKind::prototypical, MaskVariant::sample_wise)});
    s.results.push_back(
        {"composite_euclidean_i1_batchstat",
         composite_check(HeadKind::prototypical, MaskVariant::sample_wise,
                         BnPolicy::batch_stats)});
    s.results.push_back(
        {"composite_euclidean_i2",
         composite_check(HeadKind::prototypical, MaskVariant::cluster_wise)});
    s.results.push_back(
        {"composite_relation",
         composite_check(HeadKind::relation, MaskVariant::sample_wise)});
    s.results.push_back(
        {"composite_cosine",
         composite_check(HeadKind::matching, MaskVariant::sample_wise)});
    return s.results;
}

}  // namespace ctm
