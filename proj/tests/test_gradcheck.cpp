// Finite-difference verification of every differentiable op, across several
// seeds. Central differences in 64-bit are good to ~1e-7 for smooth ops; the
// acceptance threshold everywhere is 1e-4 with piecewise-linear ops sampled
// away from their kinks.
#include <cmath>

#include "doctest.h"
#include "focc/gradcheck.hpp"
#include "focc/nn.hpp"
#include "focc/tensor.hpp"

using namespace focc;

namespace {

constexpr double kTol = 1e-4;
const std::vector<uint64_t> kSeeds = {1, 2, 3, 4, 5};

Tensor rand_in(const Shape &s, Rng &rng, double lo = -1.0, double hi = 1.0) {
    return Tensor::uniform(s, lo, hi, rng);
}

// Uniform values with |v - avoid| >= margin, for ops with a kink at `avoid`.
Tensor rand_away(const Shape &s, Rng &rng, double avoid, double margin) {
    Tensor t = Tensor::uniform(s, -1.0, 1.0, rng);
    for (auto &v : t.mutable_data()) {
        if (std::fabs(v - avoid) < margin) v = avoid + (v >= avoid ? margin : -margin) * 2.0;
    }
    return t;
}

}  // namespace

TEST_CASE("quadratic form gradient is near machine precision") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        Tensor A = rand_in({4, 4}, rng);
        double err = finite_diff_check(
            [&](const Tensor &x) { return sum(mul(matmul(reshape(x, {1, 4}), A), reshape(x, {1, 4}))); },
            rand_in({4}, rng));
        CHECK(err < 1e-7);
    }
}

TEST_CASE("elementwise arithmetic with broadcasting") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        Tensor b = rand_in({3}, rng, 0.5, 1.5);  // kept away from 0 for divide
        CHECK(finite_diff_check(
                  [&](const Tensor &x) { return sum(mul(add(x, b), sub(x, b))); },
                  rand_in({2, 3}, rng)) < kTol);
        CHECK(finite_diff_check([&](const Tensor &x) { return sum(divide(b, x)); },
                                rand_in({2, 3}, rng, 0.5, 2.0)) < kTol);
        CHECK(finite_diff_check([&](const Tensor &x) { return mean(neg(x) * 3.0 + 1.0); },
                                rand_in({5}, rng)) < kTol);
    }
}

TEST_CASE("matmul including broadcast batch dims") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        Tensor w = rand_in({4, 3}, rng);
        CHECK(finite_diff_check([&](const Tensor &x) { return sum(matmul(x, w)); },
                                rand_in({2, 3, 4}, rng)) < kTol);
        Tensor x2 = rand_in({2, 3, 4}, rng);
        CHECK(finite_diff_check([&](const Tensor &w2) { return mean(matmul(x2, w2)); },
                                rand_in({4, 5}, rng)) < kTol);
    }
}

TEST_CASE("structural ops: reshape, permute, slice, concat") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        CHECK(finite_diff_check(
                  [&](const Tensor &x) {
                      Tensor p = permute(reshape(x, {2, 3, 2}), {2, 0, 1});
                      Tensor s = slice(p, 1, 0, 1);
                      Tensor c = concat({s, s}, 2);
                      return sum(c * c);
                  },
                  rand_in({12}, rng)) < kTol);
    }
}

TEST_CASE("reductions over axes") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        CHECK(finite_diff_check(
                  [&](const Tensor &x) { return sum(mul(sum(x, {0, 2}), mean(x, {0, 2}))); },
                  rand_in({2, 3, 4}, rng)) < kTol);
        CHECK(finite_diff_check(
                  [&](const Tensor &x) { return mean(mean(x, {1}, true) * x); },
                  rand_in({3, 4}, rng)) < kTol);
    }
}

TEST_CASE("smooth pointwise ops") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        CHECK(finite_diff_check([](const Tensor &x) { return sum(exp(x)); },
                                rand_in({6}, rng)) < kTol);
        CHECK(finite_diff_check([](const Tensor &x) { return sum(log(x)); },
                                rand_in({6}, rng, 0.5, 2.0)) < kTol);
        CHECK(finite_diff_check([](const Tensor &x) { return sum(sqrt(x)); },
                                rand_in({6}, rng, 0.5, 2.0)) < kTol);
        CHECK(finite_diff_check([](const Tensor &x) { return sum(softplus(x * 3.0)); },
                                rand_in({6}, rng)) < kTol);
    }
}

TEST_CASE("piecewise-linear ops away from their kinks") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        CHECK(finite_diff_check([](const Tensor &x) { return sum(mul(relu(x), relu(x))); },
                                rand_away({8}, rng, 0.0, 0.05)) < kTol);
        Tensor xc = rand_in({8}, rng, -2.0, 2.0);
        for (auto &v : xc.mutable_data()) {
            if (std::fabs(v - 1.0) < 0.05) v += 0.1;
            if (std::fabs(v + 1.0) < 0.05) v -= 0.1;
        }
        CHECK(finite_diff_check([](const Tensor &x) { return sum(clamp(x, -1.0, 1.0) * 2.0); },
                                xc) < kTol);
        CHECK(finite_diff_check([](const Tensor &x) { return sum(clamp_min(x, 0.25)); },
                                rand_away({8}, rng, 0.25, 0.05)) < kTol);
    }
}

TEST_CASE("softmax and log_softmax") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        Tensor w = rand_in({3, 5}, rng);
        CHECK(finite_diff_check([&](const Tensor &x) { return sum(mul(softmax(x, 1), w)); },
                                rand_in({3, 5}, rng)) < kTol);
        CHECK(finite_diff_check([&](const Tensor &x) { return sum(mul(log_softmax(x, 0), w)); },
                                rand_in({3, 5}, rng)) < kTol);
    }
}

TEST_CASE("softmax cross-entropy composite stays under 1e-5") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        // one-hot targets over 4 classes, 3 rows
        std::vector<double> tgt(12, 0.0);
        for (int r = 0; r < 3; ++r) tgt[r * 4 + rng.uniform_int(0, 3)] = 1.0;
        Tensor t({3, 4}, tgt);
        double err = finite_diff_check(
            [&](const Tensor &x) { return neg(mean(sum(mul(log_softmax(x, 1), t), {1}))); },
            rand_in({3, 4}, rng));
        CHECK(err < 1e-5);
    }
}

TEST_CASE("where_mask routes gradients through the selected branch") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        Tensor mask({6}, {1, 0, 1, 1, 0, 0});
        CHECK(finite_diff_check(
                  [&](const Tensor &x) { return sum(where_mask(mask, x * x, x * 3.0)); },
                  rand_in({6}, rng)) < kTol);
    }
}

TEST_CASE("conv2d wrt input, weight, bias") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        Tensor x = rand_in({2, 3, 5, 5}, rng);
        Tensor w = rand_in({4, 3, 3, 3}, rng);
        Tensor b = rand_in({4}, rng);
        CHECK(finite_diff_check(
                  [&](const Tensor &t) { return sum(mul(conv2d(t, w, b, 2, 1), conv2d(t, w, b, 2, 1))); },
                  x) < kTol);
        CHECK(finite_diff_check(
                  [&](const Tensor &t) { return mean(conv2d(x, t, b, 1, 0) * 2.0); }, w) < kTol);
        CHECK(finite_diff_check(
                  [&](const Tensor &t) { return sum(mul(conv2d(x, w, t, 1, 1), conv2d(x, w, t, 1, 1))); },
                  b) < kTol);
    }
}

TEST_CASE("deconv2d wrt input and weight") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        Tensor x = rand_in({1, 3, 4, 4}, rng);
        Tensor w = rand_in({3, 2, 2, 2}, rng);
        Tensor b = rand_in({2}, rng);
        CHECK(finite_diff_check(
                  [&](const Tensor &t) { return sum(mul(deconv2d(t, w, b, 2), deconv2d(t, w, b, 2))); },
                  x) < kTol);
        CHECK(finite_diff_check([&](const Tensor &t) { return mean(deconv2d(x, t, b, 2)); },
                                w) < kTol);
    }
}

TEST_CASE("conv3d and deconv3d wrt input and weight") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        Tensor x = rand_in({2, 4, 4, 4}, rng);
        Tensor w = rand_in({3, 2, 3, 3, 3}, rng);
        Tensor b = rand_in({3}, rng);
        CHECK(finite_diff_check(
                  [&](const Tensor &t) { return sum(mul(conv3d(t, w, b, 2, 1), conv3d(t, w, b, 2, 1))); },
                  x) < kTol);
        CHECK(finite_diff_check([&](const Tensor &t) { return mean(conv3d(x, t, b, 1, 1)); },
                                w) < kTol);
        Tensor wd = rand_in({2, 3, 2, 2, 2}, rng);
        CHECK(finite_diff_check(
                  [&](const Tensor &t) { return sum(mul(deconv3d(t, wd, b, 2), deconv3d(t, wd, b, 2))); },
                  x) < kTol);
        CHECK(finite_diff_check([&](const Tensor &t) { return mean(deconv3d(x, t, b, 2)); },
                                wd) < kTol);
    }
}

TEST_CASE("trilinear upsampling") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        CHECK(finite_diff_check(
                  [](const Tensor &x) {
                      Tensor u = upsample3d_trilinear(x, 2);
                      return sum(u * u);
                  },
                  rand_in({2, 2, 3, 3}, rng)) < kTol);
    }
}

TEST_CASE("batchnorm train mode wrt input, gamma, beta") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        ParamRegistry reg;
        BatchNormLayer bn(reg, "bn", 3, 1);
        // randomize affine params so grads are informative
        for (auto &v : bn.gamma.mutable_data()) v = rng.uniform(0.5, 1.5);
        for (auto &v : bn.beta.mutable_data()) v = rng.uniform(-0.5, 0.5);
        Tensor x = rand_in({2, 3, 4, 4}, rng);
        // Weight the output by a fixed random tensor: sum(y*y) is nearly
        // invariant under input perturbation (normalization pins the second
        // moment), which starves finite differences of signal.
        Tensor r = rand_in(x.shape(), rng);
        CHECK(finite_diff_check(
                  [&](const Tensor &t) {
                      Tensor y = bn.forward(t, true);
                      return sum(y * r);
                  },
                  x) < kTol);
        // module parameters share storage with the tensor handed to the
        // checker, so f can ignore its argument
        auto loss_via_module = [&](const Tensor &) {
            Tensor y = bn.forward(x, true);
            return sum(y * r);
        };
        CHECK(finite_diff_check(loss_via_module, bn.gamma) < kTol);
        CHECK(finite_diff_check(loss_via_module, bn.beta) < kTol);
    }
}

TEST_CASE("layernorm and attention end-to-end") {
    for (uint64_t seed : kSeeds) {
        Rng rng(seed);
        ParamRegistry reg;
        LayerNormLayer ln(reg, "ln", 6);
        MultiHeadAttention att(reg, "att", 6, 2, rng);
        Tensor kv = rand_in({5, 6}, rng);
        Tensor q_fixed = rand_in({3, 6}, rng);
        CHECK(finite_diff_check(
                  [&](const Tensor &q) {
                      Tensor y = att.forward(ln.forward(q), kv);
                      return sum(y * y);
                  },
                  q_fixed) < kTol);
        auto loss_via_module = [&](const Tensor &) {
            Tensor y = att.forward(ln.forward(q_fixed), kv);
            return mean(y * y);
        };
        CHECK(finite_diff_check(loss_via_module, att.wq.weight) < kTol);
        CHECK(finite_diff_check(loss_via_module, att.wo.bias) < kTol);
        CHECK(finite_diff_check(loss_via_module, ln.gamma) < kTol);
    }
}
