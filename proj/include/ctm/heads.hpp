#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "ctm/nn.hpp"
#include "ctm/ops.hpp"

namespace ctm {

enum class HeadKind { matching, prototypical, relation };
enum class LossKind { cross_entropy, mse };
enum class MaskVariant { sample_wise, cluster_wise };
enum class SoftmaxMode { per_location, all_locations };

enum class RowKind { per_sample, per_class };

// Masked (or pass-through) feature batch fed to a metric head. Rows are
// class-major: sample i of a per_sample batch belongs to class i / k.
template <class T>
struct ImprovedFeatures {
    Tensor<T> features;  // (N*K, C, H, W) per_sample or (N, C, H, W) per_class
    RowKind rows = RowKind::per_sample;
    int n = 0, k = 1;
};

// Query-vs-support comparison scores; higher means more similar.
template <class T>
struct ScoreMatrix {
    Tensor<T> scores;  // (N*K or N, #queries)
    RowKind rows = RowKind::per_sample;
    int n = 0, k = 1;
};

// Learned pairwise comparator: two conv blocks (second with maxpool) over
// channel-concatenated support/query maps, then two fully-connected layers
// producing one scalar per pair.
template <class T>
struct RelationHead {
    ConvBlock<T> block0, block1;
    LinearLayer<T> fc0, fc1;

    RelationHead() = default;

    RelationHead(std::int64_t in_channels, std::int64_t channels, std::int64_t spatial,
                 std::int64_t hidden, Rng& rng, T bn_momentum = T(0.1),
                 BnPolicy bn_policy = BnPolicy::batch_stats)
        : block0(2 * in_channels, channels, 3, 1, 1, false, rng, bn_momentum, bn_policy),
          block1(channels, channels, 3, 1, 1, true, rng, bn_momentum, bn_policy),
          fc0(channels * ((spatial + 1) / 2) * ((spatial + 1) / 2), hidden, rng),
          fc1(hidden, 1, rng) {}

    std::int64_t param_count() const {
        return block0.param_count() + block1.param_count() + fc0.param_count() +
               fc1.param_count();
    }

    void collect_params(const std::string& prefix, NamedTensors<T>& out) {
        block0.collect_params(prefix + ".block0", out);
        block1.collect_params(prefix + ".block1", out);
        fc0.collect_params(prefix + ".fc0", out);
        fc1.collect_params(prefix + ".fc1", out);
    }

    void collect_buffers(const std::string& prefix, NamedTensors<T>& out) {
        block0.collect_buffers(prefix + ".block0", out);
        block1.collect_buffers(prefix + ".block1", out);
    }
};

namespace detail {
template <class T>
void check_head_inputs(const ImprovedFeatures<T>& s, const ImprovedFeatures<T>& q,
                       const char* op) {
    if (s.features.numel() / s.features.dim(0) != q.features.numel() / q.features.dim(0))
        throw_shape(op, "support and query feature lengths differ: " +
                            shape_str(s.features.shape()) + " vs " +
                            shape_str(q.features.shape()));
}
}  // namespace detail

// y_ij = -||flat(s_i) - flat(q_j)||^2.
template <class T>
ScoreMatrix<T> euclidean_scores(const ImprovedFeatures<T>& s, const ImprovedFeatures<T>& q) {
    detail::check_head_inputs(s, q, "euclidean_scores");
    auto d = pairwise_sqdist(flatten2(s.features), flatten2(q.features));
    return {scale(d, T(-1)), s.rows, s.n, s.k};
}

// y_ij = cos(flat(s_i), flat(q_j)) in [-1, 1].
template <class T>
ScoreMatrix<T> cosine_scores(const ImprovedFeatures<T>& s, const ImprovedFeatures<T>& q) {
    detail::check_head_inputs(s, q, "cosine_scores");
    return {pairwise_cosine(flatten2(s.features), flatten2(q.features)), s.rows, s.n, s.k};
}

// One scalar per (support row, query) pair; sigmoid output for MSE training,
// raw logit for cross-entropy.
template <class T>
ScoreMatrix<T> relation_scores(const ImprovedFeatures<T>& s, const ImprovedFeatures<T>& q,
                               RelationHead<T>& head, bool sigmoid_output, bool training) {
    detail::check_head_inputs(s, q, "relation_scores");
    const std::int64_t rows = s.features.dim(0), cols = q.features.dim(0);
    auto pairs = pair_concat(s.features, q.features);
    auto z = head.block1.forward(head.block0.forward(pairs, training), training);
    auto out = head.fc1.forward(relu(head.fc0.forward(flatten2(z))));
    auto scores = reshape(out, {rows, cols});
    if (sigmoid_output) scores = sigmoid(scores);
    return {scores, s.rows, s.n, s.k};
}

// Reduces per_sample scores to per-class scores by averaging the K rows that
// share a support label (the inner mean of the prediction rule).
template <class T>
Tensor<T> class_scores(const ScoreMatrix<T>& sm) {
    if (sm.rows == RowKind::per_class || sm.k == 1) {
        if (sm.scores.dim(0) != sm.n && sm.rows == RowKind::per_class)
            throw_shape("class_scores", "row count does not match n");
        return sm.rows == RowKind::per_class
                   ? sm.scores
                   : reshape(sm.scores, {sm.n, sm.scores.dim(1)});
    }
    if (sm.scores.dim(0) != static_cast<std::int64_t>(sm.n) * sm.k)
        throw_shape("class_scores", "per_sample rows != n*k");
    auto grouped = reshape(sm.scores, {sm.n, sm.k, sm.scores.dim(1)});
    return mean_axis(grouped, 1);
}

// Episode loss over the score matrix. Cross-entropy treats the N per-class
// scores of each query as logits; MSE regresses sigmoid-range scores onto
// 1 for the matching class and 0 otherwise.
template <class T>
Tensor<T> episode_loss(const ScoreMatrix<T>& sm, const std::vector<int>& query_labels,
                       LossKind kind) {
    auto cls = class_scores(sm);  // (N, Q)
    const std::int64_t q = cls.dim(1);
    if (static_cast<std::int64_t>(query_labels.size()) != q)
        throw_shape("episode_loss", "query label count mismatch");
    for (int l : query_labels)
        if (l < 0 || l >= sm.n)
            throw std::out_of_range("episode_loss: label " + std::to_string(l));
    if (kind == LossKind::cross_entropy)
        return cross_entropy_rows(transpose2d(cls), query_labels);
    Tensor<T> targets({static_cast<std::int64_t>(sm.n), q});
    for (std::int64_t j = 0; j < q; ++j)
        targets.data()[query_labels[static_cast<size_t>(j)] * q + j] = T(1);
    return mse(cls, targets);
}

// argmax_c of the class-averaged scores; ties resolve to the lowest class.
template <class T>
std::vector<int> predict_labels(const ScoreMatrix<T>& sm) {
    std::vector<int> out;
    const std::int64_t q = sm.scores.dim(1);
    const std::int64_t rows = sm.scores.dim(0);
    const std::int64_t k = sm.rows == RowKind::per_class ? 1 : sm.k;
    auto sd = sm.scores.data();
    out.reserve(static_cast<size_t>(q));
    for (std::int64_t j = 0; j < q; ++j) {
        int best_c = 0;
        T best = -std::numeric_limits<T>::infinity();
        for (int c = 0; c < sm.n; ++c) {
            T acc = T(0);
            for (std::int64_t i = 0; i < k; ++i) acc += sd[(c * k + i) * q + j];
            acc /= static_cast<T>(k);
            if (acc > best) {
                best = acc;
                best_c = c;
            }
        }
        (void)rows;
        out.push_back(best_c);
    }
    return out;
}

template <class T>
double episode_accuracy(const ScoreMatrix<T>& sm, const std::vector<int>& query_labels) {
    auto pred = predict_labels(sm);
    std::int64_t hit = 0;
    for (size_t j = 0; j < pred.size(); ++j)
        if (pred[j] == query_labels[j]) ++hit;
    return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace ctm
