#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ctm/ops.hpp"
#include "ctm/rng.hpp"
#include "ctm/tensor.hpp"

namespace ctm {

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

// Kaiming-uniform fan-in: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
template <class T>
void kaiming_uniform(Tensor<T>& w, std::int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

// Bias is omitted when the conv feeds a batchnorm (the mean subtraction
// makes it a dead parameter).
template <class T>
struct Conv2dLayer {
    Tensor<T> w, b;
    std::int64_t stride = 1, pad = 0;

    Conv2dLayer() = default;

    Conv2dLayer(std::int64_t in_c, std::int64_t out_c, std::int64_t kernel,
                std::int64_t stride_, std::int64_t pad_, Rng& rng, bool bias = true)
        : w({out_c, in_c, kernel, kernel}), stride(stride_), pad(pad_) {
        kaiming_uniform(w, in_c * kernel * kernel, rng);
        w.set_requires_grad(true);
        if (bias) {
            b = Tensor<T>({out_c});
            b.set_requires_grad(true);
        }
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }

    static std::int64_t out_extent(std::int64_t in, std::int64_t kernel,
                                   std::int64_t stride, std::int64_t pad) {
        return (in + 2 * pad - kernel) / stride + 1;
    }

    std::int64_t param_count() const { return w.numel() + (b.defined() ? b.numel() : 0); }

    void collect_params(const std::string& prefix, NamedTensors<T>& out) {
        out.emplace_back(prefix + ".w", w);
        if (b.defined()) out.emplace_back(prefix + ".b", b);
    }
};

// How a batchnorm layer normalizes while training. batch_stats is the
// classic mode. running_stats normalizes by the pre-update running estimates
// and then folds the batch statistics in, which keeps the training-time
// forward identical to evaluation and denies the network any use of
// episode-level batch composition (a leak that a few-shot episode's class
// palette makes unusually informative).
enum class BnPolicy { batch_stats, running_stats };

template <class T>
struct BatchNorm2dLayer {
    Tensor<T> gamma, beta;
    Tensor<T> running_mean, running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);
    BnPolicy policy = BnPolicy::batch_stats;

    BatchNorm2dLayer() = default;

    explicit BatchNorm2dLayer(std::int64_t channels, T momentum_ = T(0.1),
                              BnPolicy policy_ = BnPolicy::batch_stats)
        : gamma({channels}, T(1)),
          beta({channels}, T(0)),
          running_mean({channels}, T(0)),
          running_var({channels}, T(1)),
          momentum(momentum_),
          policy(policy_) {
        gamma.set_requires_grad(true);
        beta.set_requires_grad(true);
    }

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        if (training && policy == BnPolicy::running_stats) {
            Tensor<T> y = batchnorm2d(x, gamma, beta, running_mean, running_var,
                                      /*training=*/false, momentum, eps);
            batchnorm2d_update_stats(x, running_mean, running_var, momentum);
            return y;
        }
        return batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum,
                           eps);
    }

    std::int64_t param_count() const { return gamma.numel() + beta.numel(); }

    void collect_params(const std::string& prefix, NamedTensors<T>& out) {
        out.emplace_back(prefix + ".gamma", gamma);
        out.emplace_back(prefix + ".beta", beta);
    }

    void collect_buffers(const std::string& prefix, NamedTensors<T>& out) {
        out.emplace_back(prefix + ".running_mean", running_mean);
        out.emplace_back(prefix + ".running_var", running_var);
    }
};

template <class T>
struct LinearLayer {
    Tensor<T> w, b;

    LinearLayer() = default;

    LinearLayer(std::int64_t in, std::int64_t out, Rng& rng) : w({out, in}), b({out}) {
        kaiming_uniform(w, in, rng);
        w.set_requires_grad(true);
        b.set_requires_grad(true);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return linear(x, w, b); }

    std::int64_t param_count() const { return w.numel() + b.numel(); }

    void collect_params(const std::string& prefix, NamedTensors<T>& out) {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

// conv -> batchnorm -> relu -> optional 2x2 maxpool.
template <class T>
struct ConvBlock {
    Conv2dLayer<T> conv;
    BatchNorm2dLayer<T> bn;
    bool pool = false;

    ConvBlock() = default;

    ConvBlock(std::int64_t in_c, std::int64_t out_c, std::int64_t kernel,
              std::int64_t stride, std::int64_t pad, bool pool_, Rng& rng,
              T bn_momentum = T(0.1), BnPolicy bn_policy = BnPolicy::batch_stats)
        : conv(in_c, out_c, kernel, stride, pad, rng, /*bias=*/false),
          bn(out_c, bn_momentum, bn_policy),
          pool(pool_) {}

    Tensor<T> forward(const Tensor<T>& x, bool training) {
        Tensor<T> y = relu(bn.forward(conv.forward(x), training));
        return pool ? maxpool2(y) : y;
    }

    std::int64_t param_count() const { return conv.param_count() + bn.param_count(); }

    void collect_params(const std::string& prefix, NamedTensors<T>& out) {
        conv.collect_params(prefix + ".conv", out);
        bn.collect_params(prefix + ".bn", out);
    }

    void collect_buffers(const std::string& prefix, NamedTensors<T>& out) {
        bn.collect_buffers(prefix + ".bn", out);
    }
};

}  // namespace ctm
