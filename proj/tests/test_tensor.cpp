#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "ctm/gradcheck.hpp"
#include "ctm/nn.hpp"
#include "ctm/ops.hpp"
#include "ctm/optim.hpp"
#include "ctm/rng.hpp"
#include "ctm/serialize.hpp"
#include "ctm/tensor.hpp"

using namespace ctm;

namespace {

TensorD random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

TensorF random_tensor_f(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
    TensorF t(std::move(shape));
    for (auto& v : t.data())
        v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

}  // namespace

TEST_CASE("elementwise mul on vectors") {
    auto a = TensorF::from_data({3}, {1, 2, 3});
    auto b = TensorF::from_data({3}, {2, 2, 2});
    auto y = mul(a, b);
    CHECK(y.data()[0] == 2.0f);
    CHECK(y.data()[1] == 4.0f);
    CHECK(y.data()[2] == 6.0f);
}

TEST_CASE("mul broadcasts a leading extent-1 axis over the sample axis") {
    TensorF a({25, 16, 4, 4}, 2.0f);
    TensorF b({1, 16, 4, 4}, 0.5f);
    auto y = mul(a, b);
    CHECK(y.shape() == Shape{25, 16, 4, 4});
    for (auto v : y.data()) CHECK(v == 1.0f);
}

TEST_CASE("add with scalar zero is bit-identical") {
    Rng rng(7);
    auto x = random_tensor_f({4, 5}, rng);
    auto y = add(x, 0.0f);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("incompatible elementwise shapes throw") {
    TensorF a({2, 3});
    TensorF b({2, 4});
    CHECK_THROWS_AS((void)add(a, b), ShapeError);
    TensorF c({3});
    CHECK_THROWS_AS((void)add(a, c), ShapeError);
}

TEST_CASE("matmul identity and forced arithmetic") {
    auto eye = TensorF::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto x = TensorF::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
    auto y = matmul(eye, x);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

    auto a = TensorF::from_data({2, 2}, {1, 2, 3, 4});
    auto b = TensorF::from_data({2, 1}, {1, 1});
    auto c = matmul(a, b);
    CHECK(c.data()[0] == 3.0f);
    CHECK(c.data()[1] == 7.0f);

    CHECK_THROWS_AS((void)matmul(a, TensorF({3, 2})), ShapeError);
}

TEST_CASE("matmul matches naive triple loop") {
    Rng rng(11);
    auto a = random_tensor({5, 7}, rng);
    auto b = random_tensor({7, 3}, rng);
    auto y = matmul(a, b);
    for (std::int64_t i = 0; i < 5; ++i)
        for (std::int64_t j = 0; j < 3; ++j) {
            double acc = 0;
            for (std::int64_t k = 0; k < 7; ++k)
                acc += a.data()[i * 7 + k] * b.data()[k * 3 + j];
            CHECK(std::abs(y.data()[i * 3 + j] - acc) < 1e-6);
        }
}

TEST_CASE("conv2d all-ones 3x3, pad 1: center output is 9") {
    TensorF x({1, 1, 3, 3}, 1.0f);
    TensorF w({1, 1, 3, 3}, 1.0f);
    TensorF b({1}, 0.0f);
    auto y = conv2d(x, w, b, 1, 1);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y.at({0, 0, 1, 1}) == 9.0f);
    CHECK(y.at({0, 0, 0, 0}) == 4.0f);
}

TEST_CASE("conv2d 64->32 stride 2 reduces 21x21 to 10x10") {
    // 3x3 kernel, stride 2, no padding: (21 - 3) / 2 + 1 = 10.
    TensorF x({2, 64, 21, 21}, 0.5f);
    Rng rng(3);
    auto w = random_tensor_f({32, 64, 3, 3}, rng);
    TensorF b({32}, 0.0f);
    auto y = conv2d(x, w, b, 2, 0);
    CHECK(y.shape() == Shape{2, 32, 10, 10});
}

TEST_CASE("conv2d matches naive reference on random input") {
    Rng rng(17);
    auto x = random_tensor({2, 3, 6, 7}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    auto b = random_tensor({4}, rng);
    auto y = conv2d(x, w, b, 2, 1);
    // naive direct convolution
    const std::int64_t oh = 3, ow = 4;  // (6+2-3)/2+1, (7+2-3)/2+1
    CHECK(y.shape() == Shape{2, 4, oh, ow});
    for (std::int64_t s = 0; s < 2; ++s)
        for (std::int64_t o = 0; o < 4; ++o)
            for (std::int64_t oy = 0; oy < oh; ++oy)
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    double acc = b.data()[o];
                    for (std::int64_t c = 0; c < 3; ++c)
                        for (std::int64_t ky = 0; ky < 3; ++ky)
                            for (std::int64_t kx = 0; kx < 3; ++kx) {
                                const std::int64_t iy = oy * 2 - 1 + ky;
                                const std::int64_t ix = ox * 2 - 1 + kx;
                                if (iy < 0 || iy >= 6 || ix < 0 || ix >= 7) continue;
                                acc += x.at({s, c, iy, ix}) * w.at({o, c, ky, kx});
                            }
                    CHECK(std::abs(y.at({s, o, oy, ox}) - acc) < 1e-10);
                }
}

TEST_CASE("conv2d rejects kernels larger than the padded input") {
    TensorF x({1, 1, 2, 2});
    TensorF w({1, 1, 5, 5});
    TensorF b({1});
    CHECK_THROWS_AS((void)conv2d(x, w, b, 1, 0), ShapeError);
}

TEST_CASE("conv2d gradcheck") {
    Rng rng(23);
    auto x = random_tensor({2, 3, 5, 5}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    auto bias = random_tensor({4}, rng);
    w.set_requires_grad(true);
    bias.set_requires_grad(true);
    auto fx = [&](const TensorD& t) { return sum_all(mul(conv2d(t, w, bias, 2, 1),
                                                         conv2d(t, w, bias, 2, 1))); };
    CHECK(gradcheck(fx, x) < 1e-4);
    auto fw = [&](const TensorD& t) { return sum_all(mul(conv2d(x, t, bias, 1, 1),
                                                         conv2d(x, t, bias, 1, 1))); };
    CHECK(gradcheck(fw, w) < 1e-4);
    auto fb = [&](const TensorD& t) { return sum_all(mul(conv2d(x, w, t, 1, 0),
                                                         conv2d(x, w, t, 1, 0))); };
    CHECK(gradcheck(fb, bias) < 1e-4);
}

TEST_CASE("maxpool2 forced arithmetic and tie-breaking") {
    auto x = TensorF::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = maxpool2(x);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 4.0f);

    // constant input: gradient concentrates on the first window element
    TensorF c({1, 1, 2, 2}, 5.0f);
    c.set_requires_grad(true);
    Tape<float> tape;
    {
        TapeScope<float> scope(tape);
        auto out = sum_all(maxpool2(c));
        tape.backward(out);
    }
    CHECK(c.grad()[0] == 1.0f);
    CHECK(c.grad()[1] == 0.0f);
    CHECK(c.grad()[2] == 0.0f);
    CHECK(c.grad()[3] == 0.0f);
}

TEST_CASE("maxpool2 ceil mode on odd extents") {
    auto x = TensorF::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto y = maxpool2(x);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    CHECK(y.at({0, 0, 0, 0}) == 5.0f);
    CHECK(y.at({0, 0, 0, 1}) == 6.0f);
    CHECK(y.at({0, 0, 1, 0}) == 8.0f);
    CHECK(y.at({0, 0, 1, 1}) == 9.0f);
}

TEST_CASE("maxpool2 gradcheck away from ties") {
    Rng rng(29);
    TensorD x({1, 2, 4, 4});
    for (std::int64_t i = 0; i < x.numel(); ++i)
        x.data()[i] = rng.uniform(-1, 1) + 0.01 * static_cast<double>(i);
    auto f = [](const TensorD& t) { return sum_all(mul(maxpool2(t), maxpool2(t))); };
    CHECK(gradcheck(f, x) < 1e-4);
}

TEST_CASE("relu definition and gradcheck") {
    auto x = TensorF::from_data({3}, {-1, 0, 2});
    auto y = relu(x);
    CHECK(y.data()[0] == 0.0f);
    CHECK(y.data()[1] == 0.0f);
    CHECK(y.data()[2] == 2.0f);

    Rng rng(31);
    TensorD xd({20});
    for (auto& v : xd.data()) {
        v = rng.uniform(-1, 1);
        if (std::abs(v) < 0.1) v += v < 0 ? -0.1 : 0.1;  // keep away from the kink
    }
    auto f = [](const TensorD& t) { return sum_all(mul(relu(t), relu(t))); };
    CHECK(gradcheck(f, xd) < 1e-4);
}

TEST_CASE("sigmoid gradcheck") {
    Rng rng(37);
    auto x = random_tensor({8}, rng, -2, 2);
    auto f = [](const TensorD& t) { return sum_all(sigmoid(t)); };
    CHECK(gradcheck(f, x) < 1e-4);
}

TEST_CASE("batchnorm of constant input is all zeros") {
    TensorF x({3, 2, 4, 4}, 7.5f);
    BatchNorm2dLayer<float> bn(2);
    auto y = bn.forward(x, true);
    for (auto v : y.data()) CHECK(std::abs(v) < 1e-5f);
}

TEST_CASE("batchnorm running stats update with momentum 0.1") {
    TensorF x({2, 1, 2, 2}, 4.0f);
    BatchNorm2dLayer<float> bn(1);
    (void)bn.forward(x, true);
    CHECK(bn.running_mean.data()[0] == doctest::Approx(0.4).epsilon(1e-6));
    CHECK(bn.running_var.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
    // eval mode uses the running stats
    auto y = bn.forward(x, false);
    const float expect = (4.0f - 0.4f) / std::sqrt(0.9f + 1e-5f);
    CHECK(y.data()[0] == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("batchnorm gradcheck in train and eval mode") {
    Rng rng(41);
    auto x = random_tensor({3, 2, 3, 3}, rng);
    TensorD gamma({2}, 1.0);
    TensorD beta({2}, 0.0);
    for (auto& v : gamma.data()) v = rng.uniform(0.5, 1.5);
    for (auto& v : beta.data()) v = rng.uniform(-0.5, 0.5);
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
    // random linear readout: a squared readout of normalized activations is
    // nearly flat in x, so differencing it measures only roundoff
    auto readout = random_tensor({3, 2, 3, 3}, rng);
    for (bool training : {true, false}) {
        auto f = [&](const TensorD& t) {
            TensorD rm({2}, 0.1), rv({2}, 1.2);
            // momentum 0 keeps running stats untouched so f stays pure
            auto y = batchnorm2d(t, gamma, beta, rm, rv, training, 0.0, 1e-5);
            return sum_all(mul(y, readout));
        };
        CHECK(gradcheck(f, x) < 1e-4);
    }
    auto fg = [&](const TensorD& t) {
        TensorD rm({2}, 0.0), rv({2}, 1.0);
        auto y = batchnorm2d(x, t, beta, rm, rv, true, 0.0, 1e-5);
        return sum_all(mul(y, readout));
    };
    CHECK(gradcheck(fg, gamma) < 1e-4);
}

TEST_CASE("softmax basics") {
    auto two = TensorF::from_data({2}, {3.0f, 3.0f});
    auto y = softmax_axis(two, 0);
    CHECK(y.data()[0] == doctest::Approx(0.5));
    CHECK(y.data()[1] == doctest::Approx(0.5));

    auto z = TensorF::from_data({2}, {0.0f, std::log(3.0f)});
    auto p = softmax_axis(z, 0);
    CHECK(p.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(p.data()[1] == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("softmax over the channel axis normalizes per spatial location") {
    Rng rng(43);
    auto x = random_tensor_f({1, 16, 4, 4}, rng, -3, 3);
    auto y = softmax_axis(x, 1);
    for (std::int64_t h = 0; h < 4; ++h)
        for (std::int64_t w = 0; w < 4; ++w) {
            float sum = 0;
            for (std::int64_t c = 0; c < 16; ++c) sum += y.at({0, c, h, w});
            CHECK(std::abs(sum - 1.0f) < 1e-6f);
        }
    for (auto v : y.data()) CHECK(v >= 0.0f);
}

TEST_CASE("softmax gradcheck") {
    Rng rng(47);
    auto x = random_tensor({2, 5, 2}, rng, -2, 2);
    auto f = [](const TensorD& t) {
        auto y = softmax_axis(t, 1);
        return sum_all(mul(y, y));
    };
    CHECK(gradcheck(f, x) < 1e-4);
}

TEST_CASE("cross entropy of uniform logits over 5 classes is ln 5") {
    TensorF logits({5}, 0.3f);
    auto l = cross_entropy(logits, 2);
    CHECK(l.item() == doctest::Approx(std::log(5.0)).epsilon(1e-6));
}

TEST_CASE("cross entropy rejects out-of-range targets") {
    TensorF logits({2, 3});
    CHECK_THROWS_AS((void)cross_entropy_rows(logits, {0, 3}), std::out_of_range);
}

TEST_CASE("mse of identical tensors is zero") {
    Rng rng(53);
    auto x = random_tensor_f({4, 4}, rng);
    CHECK(mse(x, x).item() == 0.0f);
}

TEST_CASE("fused log-softmax cross entropy gradcheck") {
    Rng rng(59);
    auto x = random_tensor({4, 6}, rng, -2, 2);
    std::vector<int> targets = {1, 5, 0, 3};
    auto f = [&](const TensorD& t) { return cross_entropy_rows(t, targets); };
    CHECK(gradcheck(f, x) < 1e-4);
}

TEST_CASE("backward of sum of squares gives 2x") {
    auto x = TensorD::from_data({4}, {1, -2, 3, 0.5});
    x.set_requires_grad(true);
    Tape<double> tape;
    {
        TapeScope<double> scope(tape);
        auto loss = sum_all(mul(x, x));
        tape.backward(loss);
    }
    for (std::int64_t i = 0; i < 4; ++i)
        CHECK(x.grad()[i] == doctest::Approx(2 * x.data()[i]));
}

TEST_CASE("backward on a non-scalar is a contract error") {
    TensorD x({3}, 1.0);
    x.set_requires_grad(true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("first Adam step moves a unit-gradient parameter by ~lr") {
    auto p = TensorF::scalar(1.0f);
    p.set_requires_grad(true);
    p.grad()[0] = 1.0f;
    std::vector<TensorF> params{p};
    AdamState<float> st;
    st.lr = 0.001f;
    st.init(params);
    adam_step(params, st);
    CHECK(std::abs(p.data()[0] - 0.999f) < 1e-6f);
    CHECK(st.t == 1);
}

TEST_CASE("Adam with zero gradient and zero weight decay is a no-op") {
    auto p = TensorF::from_data({3}, {1.0f, -2.0f, 0.25f});
    p.set_requires_grad(true);
    std::vector<TensorF> params{p};
    AdamState<float> st;
    st.init(params);
    adam_step(params, st);
    CHECK(p.data()[0] == 1.0f);
    CHECK(p.data()[1] == -2.0f);
    CHECK(p.data()[2] == 0.25f);
}

TEST_CASE("clip_grad_norm scales by half when the norm is double the cap") {
    auto a = TensorF::from_data({2}, {6.0f, 8.0f});  // norm 10
    a.set_requires_grad(true);
    a.grad()[0] = 6.0f;
    a.grad()[1] = 8.0f;
    std::vector<TensorF> params{a};
    const float s = clip_grad_norm(params, 5.0f);
    CHECK(s == doctest::Approx(0.5));
    CHECK(a.grad()[0] == doctest::Approx(3.0f));
    CHECK(a.grad()[1] == doctest::Approx(4.0f));
}

TEST_CASE("clip_grad_norm below the cap leaves grads bit-identical") {
    auto a = TensorF::from_data({2}, {1.0f, 1.0f});
    a.set_requires_grad(true);
    a.grad()[0] = 0.3f;
    a.grad()[1] = 0.4f;
    std::vector<TensorF> params{a};
    const float s = clip_grad_norm(params, 5.0f);
    CHECK(s == 1.0f);
    CHECK(a.grad()[0] == 0.3f);
    CHECK(a.grad()[1] == 0.4f);
}

TEST_CASE("two independently recorded tapes produce bit-identical gradients") {
    Rng rng(61);
    auto run = [&](std::uint64_t seed) {
        Rng r(seed);
        TensorF x({2, 3, 6, 6});
        for (auto& v : x.data()) v = static_cast<float>(r.uniform(-1, 1));
        TensorF w({4, 3, 3, 3});
        for (auto& v : w.data()) v = static_cast<float>(r.uniform(-1, 1));
        TensorF b({4});
        w.set_requires_grad(true);
        b.set_requires_grad(true);
        Tape<float> tape;
        TapeScope<float> scope(tape);
        auto y = relu(conv2d(x, w, b, 1, 1));
        auto loss = mean_all(mul(y, y));
        tape.backward(loss);
        return std::vector<float>(w.grad().begin(), w.grad().end());
    };
    auto g1 = run(99);
    auto g2 = run(99);
    REQUIRE(g1.size() == g2.size());
    for (size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("gradcheck is exact for quadratics and zero for constants") {
    Rng rng(67);
    auto x = random_tensor({6}, rng);
    auto f = [](const TensorD& t) { return sum_all(mul(t, t)); };
    CHECK(gradcheck(f, x) < 1e-10);

    auto g = [](const TensorD& t) {
        (void)t;
        return TensorD::scalar(3.0);
    };
    auto y = random_tensor({4}, rng);
    CHECK(gradcheck(g, y) == 0.0);
}

TEST_CASE("a tape refuses to replay twice") {
    auto x = TensorD::from_data({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = sum_all(mul(x, x));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
}

TEST_CASE("all_finite flags NaN and infinity") {
    auto ok = TensorF::from_data({3}, {1.0f, -2.0f, 0.0f});
    CHECK(all_finite(ok));
    auto bad = TensorF::from_data({2}, {1.0f, std::numeric_limits<float>::infinity()});
    CHECK(!all_finite(bad));
    auto nan = TensorF::from_data({1}, {std::nanf("")});
    CHECK(!all_finite(nan));
}

TEST_CASE("broadcast adjoints match finite differences") {
    Rng rng(71);
    auto a = random_tensor({3, 4, 2}, rng);
    auto b = random_tensor({1, 4, 2}, rng, 0.5, 1.5);
    for (int op = 0; op < 4; ++op) {
        auto apply = [op](const TensorD& u, const TensorD& v) {
            switch (op) {
                case 0: return add(u, v);
                case 1: return sub(u, v);
                case 2: return mul(u, v);
                default: return divide(u, v);
            }
        };
        auto fa = [&](const TensorD& t) { return sum_all(mul(apply(t, b), apply(t, b))); };
        CHECK(gradcheck(fa, a) < 1e-4);
        auto fb = [&](const TensorD& t) { return sum_all(mul(apply(a, t), apply(a, t))); };
        CHECK(gradcheck(fb, b) < 1e-4);
    }
}

TEST_CASE("shape op gradchecks: reshape, transpose, narrow, concat, mean_axis") {
    Rng rng(73);
    auto x = random_tensor({4, 6}, rng);
    auto f1 = [](const TensorD& t) {
        auto y = reshape(t, {2, 12});
        return sum_all(mul(y, y));
    };
    CHECK(gradcheck(f1, x) < 1e-4);
    auto f2 = [](const TensorD& t) {
        auto y = transpose2d(t);
        return sum_all(mul(y, y));
    };
    CHECK(gradcheck(f2, x) < 1e-4);
    auto f3 = [](const TensorD& t) {
        auto y = narrow0(t, 1, 2);
        return sum_all(mul(y, y));
    };
    CHECK(gradcheck(f3, x) < 1e-4);
    auto f4 = [&](const TensorD& t) {
        auto y = concat0<double>({t, scale(t, 2.0)});
        return sum_all(mul(y, y));
    };
    CHECK(gradcheck(f4, x) < 1e-4);
    auto f5 = [](const TensorD& t) {
        auto y = mean_axis(t, 1);
        return sum_all(mul(y, y));
    };
    CHECK(gradcheck(f5, x) < 1e-4);
}

TEST_CASE("pairwise kernels gradcheck") {
    Rng rng(79);
    auto a = random_tensor({3, 5}, rng);
    auto b = random_tensor({4, 5}, rng);
    auto f1 = [&](const TensorD& t) {
        auto y = pairwise_sqdist(t, b);
        return sum_all(mul(y, y));
    };
    CHECK(gradcheck(f1, a) < 1e-4);
    auto f2 = [&](const TensorD& t) {
        auto y = pairwise_cosine(a, t);
        return sum_all(mul(y, y));
    };
    CHECK(gradcheck(f2, b) < 1e-4);
    auto s4 = random_tensor({2, 3, 2, 2}, rng);
    auto q4 = random_tensor({3, 3, 2, 2}, rng);
    auto f3 = [&](const TensorD& t) {
        auto y = pair_concat(t, q4);
        return sum_all(mul(y, y));
    };
    CHECK(gradcheck(f3, s4) < 1e-4);
}

TEST_CASE("linear layer gradcheck") {
    Rng rng(83);
    auto x = random_tensor({3, 4}, rng);
    auto w = random_tensor({2, 4}, rng);
    auto b = random_tensor({2}, rng);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    auto f = [&](const TensorD& t) {
        auto y = linear(t, w, b);
        return sum_all(mul(y, y));
    };
    CHECK(gradcheck(f, x) < 1e-4);
    auto fw = [&](const TensorD& t) {
        auto y = linear(x, t, b);
        return sum_all(mul(y, y));
    };
    CHECK(gradcheck(fw, w) < 1e-4);
}

TEST_CASE("CTMT tensor records round-trip bit-exactly") {
    Rng rng(89);
    auto t = random_tensor_f({3, 4, 2}, rng);
    std::stringstream ss;
    write_tensor(ss, t);
    auto back = read_tensor_f32(ss);
    REQUIRE(back.shape() == t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(back.data()[i] == t.data()[i]);

    auto d = random_tensor({5}, rng);
    std::stringstream s2;
    write_tensor(s2, d);
    auto back_d = read_tensor_f64(s2);
    for (std::int64_t i = 0; i < d.numel(); ++i) CHECK(back_d.data()[i] == d.data()[i]);
}

TEST_CASE("CTMT rejects bad magic and truncation") {
    std::stringstream ss;
    ss << "NOPE";
    CHECK_THROWS_AS((void)read_tensor_record(ss), SerializeError);

    TensorF t({4}, 1.0f);
    std::stringstream s2;
    write_tensor(s2, t);
    std::string full = s2.str();
    std::stringstream s3(full.substr(0, full.size() - 3));
    CHECK_THROWS_AS((void)read_tensor_record(s3), SerializeError);
}

TEST_CASE("rng streams are deterministic and serializable") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
    Rng c(42), d(43);
    CHECK(c.next() != d.next());
}
