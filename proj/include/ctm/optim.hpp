#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ctm/tensor.hpp"

namespace ctm {

// Adam with classic L2 weight decay added to the gradient before the moment
// update. Moment buffers are allocated lazily to match the parameter list.
template <class T>
struct AdamState {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0);
    std::int64_t t = 0;
    std::vector<std::vector<T>> m, v;

    void init(const std::vector<Tensor<T>>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(static_cast<size_t>(p.numel()), T(0));
            v.emplace_back(static_cast<size_t>(p.numel()), T(0));
        }
        t = 0;
    }
};

template <class T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& st) {
    if (st.m.size() != params.size())
        throw std::invalid_argument("adam_step: state not initialized for these params");
    st.t += 1;
    const T bc1 = T(1) - std::pow(st.beta1, static_cast<T>(st.t));
    const T bc2 = T(1) - std::pow(st.beta2, static_cast<T>(st.t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto pd = params[pi].data();
        auto pg = params[pi].grad();
        auto& m = st.m[pi];
        auto& v = st.v[pi];
        for (size_t i = 0; i < m.size(); ++i) {
            const T g = pg[i] + st.weight_decay * pd[i];
            m[i] = st.beta1 * m[i] + (T(1) - st.beta1) * g;
            v[i] = st.beta2 * v[i] + (T(1) - st.beta2) * g * g;
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            pd[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

// Joint L2-norm clipping over all gradients; returns the applied scale
// (exactly 1 and bit-identical grads when the norm is within bounds).
template <class T>
T clip_grad_norm(std::vector<Tensor<T>>& params, T max_norm) {
    double sq = 0;
    for (auto& p : params)
        for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (norm <= static_cast<double>(max_norm) || norm == 0.0) return T(1);
    const T s = static_cast<T>(static_cast<double>(max_norm) / norm);
    for (auto& p : params)
        for (auto& g : p.grad()) g *= s;
    return s;
}

template <class T>
void zero_grads(std::vector<Tensor<T>>& params) {
    for (auto& p : params) p.zero_grad();
}

template <class T>
double grad_norm(const std::vector<Tensor<T>>& params) {
    double sq = 0;
    for (const auto& p : params)
        for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(sq);
}

}  // namespace ctm
