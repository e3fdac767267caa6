#include <cmath>

#include "doctest.h"
#include "focc/optim.hpp"

using namespace focc;

TEST_CASE("one AdamW step on p=1, g=1, lr=0.1 lands at ~0.9") {
    Tensor p = Tensor::scalar(1.0).set_requires_grad(true);
    AdamW opt({{.params = {p}, .names = {"p"}, .lr = 0.1, .weight_decay = 0.0}});
    p.mutable_grad()[0] = 1.0;
    opt.step();
    // bias-corrected m-hat = v-hat = 1 at t=1, so the update is lr/(1+eps)
    CHECK(p.data()[0] == doctest::Approx(0.9).epsilon(1e-7));
}

TEST_CASE("zero gradient and zero weight decay leave parameters untouched") {
    Tensor p({3}, {1.0, -2.0, 0.5});
    p.set_requires_grad(true);
    AdamW opt({{.params = {p}, .names = {"p"}, .lr = 0.1, .weight_decay = 0.0}});
    opt.step();
    opt.step();
    CHECK(p.data() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("decoupled weight decay with zero gradient shrinks by lr*wd exactly") {
    Tensor p = Tensor::scalar(2.0).set_requires_grad(true);
    AdamW opt({{.params = {p}, .names = {"p"}, .lr = 0.1, .weight_decay = 0.01}});
    opt.step();
    CHECK(p.data()[0] == 2.0 * (1.0 - 0.1 * 0.01));
}

TEST_CASE("parameter groups use their own learning rates and can be retuned") {
    Tensor a = Tensor::scalar(1.0).set_requires_grad(true);
    Tensor b = Tensor::scalar(1.0).set_requires_grad(true);
    AdamW opt({{.params = {a}, .names = {"a"}, .lr = 1e-3, .weight_decay = 0.0},
               {.params = {b}, .names = {"b"}, .lr = 1e-5, .weight_decay = 0.0}});
    a.mutable_grad()[0] = 1.0;
    b.mutable_grad()[0] = 1.0;
    opt.step();
    double da = 1.0 - a.data()[0], db = 1.0 - b.data()[0];
    CHECK(da == doctest::Approx(1e-3).epsilon(1e-6));
    CHECK(db == doctest::Approx(1e-5).epsilon(1e-6));
    CHECK(opt.lr(0) == 1e-3);
    opt.set_lr(0, 1e-4);
    CHECK(opt.lr(0) == 1e-4);
    CHECK(opt.steps_taken() == 1);
}

TEST_CASE("zero_grad clears accumulated gradients") {
    Tensor p = Tensor::scalar(1.0).set_requires_grad(true);
    AdamW opt({{.params = {p}, .names = {"p"}, .lr = 0.1, .weight_decay = 0.0}});
    p.mutable_grad()[0] = 5.0;
    opt.zero_grad();
    CHECK(p.grad()[0] == 0.0);
    opt.step();
    CHECK(p.data()[0] == 1.0);
}

TEST_CASE("shape drift between steps is rejected") {
    Tensor p({2}, {1.0, 2.0});
    p.set_requires_grad(true);
    AdamW opt({{.params = {p}, .names = {"p"}, .lr = 0.1, .weight_decay = 0.0}});
    opt.step();
    p.impl()->shape = {1, 2};  // simulate structural corruption
    CHECK_THROWS_AS(opt.step(), ContractError);
}

TEST_CASE("AdamW trajectories are deterministic") {
    auto run = [] {
        Rng rng(55);
        Tensor p = Tensor::uniform({8}, -1, 1, rng).set_requires_grad(true);
        AdamW opt({{.params = {p}, .names = {"p"}, .lr = 0.01, .weight_decay = 0.01}});
        for (int i = 0; i < 25; ++i) {
            opt.zero_grad();
            Tensor loss = sum(mul(p - 0.5, p - 0.5));
            loss.backward();
            opt.step();
        }
        return p.data();
    };
    CHECK(run() == run());
}

TEST_CASE("AdamW drives a quadratic toward its minimum") {
    Rng rng(77);
    Tensor p = Tensor::uniform({4}, 3.0, 4.0, rng).set_requires_grad(true);
    AdamW opt({{.params = {p}, .names = {"p"}, .lr = 0.05, .weight_decay = 0.0}});
    for (int i = 0; i < 400; ++i) {
        opt.zero_grad();
        sum(mul(p - 1.0, p - 1.0)).backward();
        opt.step();
    }
    for (double v : p.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-2));
}
