#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "lara/checkpoint.hpp"
#include "lara/nn.hpp"

using namespace lara;

TEST_CASE("linear layer and parameter naming") {
    ParamStore store;
    RandomStream rng(1);
    Linear lin(store, "enc.fc", 3, 2, rng);
    CHECK(store.params().size() == 2);
    CHECK(store.params()[0].name == "enc.fc.weight");
    CHECK_THROWS_AS(store.create("enc.fc.weight", {1}), std::runtime_error);

    Tensor x = Tensor::from_vector({2, 3}, {1, 0, 0, 0, 1, 0});
    Tensor y = lin.apply(x);
    CHECK(y.shape() == Shape({2, 2}));
    CHECK(y.at({0, 0}) == doctest::Approx(lin.weight.at({0, 0}) + lin.bias.at({0})));
}

TEST_CASE("cross-attention with a single key collapses softmax") {
    ParamStore store;
    RandomStream rng(3);
    CrossAttention attn(store, "attn", 6, 5, 8, 2, rng);
    std::vector<double> qv(2 * 4 * 6), kv(2 * 1 * 5);
    for (auto& v : qv) v = rng.normal();
    for (auto& v : kv) v = rng.normal();
    Tensor q = Tensor::from_vector({2, 4, 6}, qv);
    Tensor k = Tensor::from_vector({2, 1, 5}, kv);
    Tensor out = attn.apply(q, k);
    CHECK(out.shape() == Shape({2, 4, 8}));
    // with one key, every query in a batch row receives the same context
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t t = 1; t < 4; ++t)
            for (int64_t c = 0; c < 8; ++c)
                CHECK(out.at({b, t, c}) == doctest::Approx(out.at({b, 0, c})).epsilon(1e-12));
    // and the context equals out_proj(v_proj(key))
    Tensor vtok = attn.v_proj.apply(reshape(slice(k, 0, 0, 1), {1, 5}));
    Tensor expect = attn.out_proj.apply(vtok);
    for (int64_t c = 0; c < 8; ++c) CHECK(out.at({0, 0, c}) == doctest::Approx(expect.at({0, c})));
}

TEST_CASE("head count must divide model width") {
    ParamStore store;
    RandomStream rng(4);
    CHECK_THROWS_WITH_AS(CrossAttention(store, "a", 8, 8, 8, 3, rng), doctest::Contains("divide"),
                         std::runtime_error);
}

TEST_CASE("attention gradients match central differences") {
    ParamStore store;
    RandomStream rng(5);
    CrossAttention attn(store, "attn", 4, 4, 4, 2, rng);
    std::vector<double> qv(1 * 3 * 4), kv(1 * 2 * 4);
    for (auto& v : qv) v = rng.normal();
    for (auto& v : kv) v = rng.normal();
    Tensor q = Tensor::from_vector({1, 3, 4}, qv, true);
    Tensor k = Tensor::from_vector({1, 2, 4}, kv, true);
    auto f = [&]() {
        Tensor y = attn.apply(q, k);
        RandomStream r3(9);
        std::vector<double> proj(static_cast<size_t>(y.numel()));
        for (auto& v : proj) v = r3.uniform(-1, 1);
        return sum_all(mul(y, Tensor::from_vector(y.shape(), proj)));
    };
    std::vector<NamedTensor> params{{"q", q}, {"k", k}};
    for (const auto& p : store.params()) params.push_back(p);
    auto report = grad_check(f, params, 1e-5);
    CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("conv3d gradient and shape") {
    ParamStore store;
    RandomStream rng(6);
    Conv3d conv(store, "conv", 2, 3, rng);
    std::vector<double> xv(4 * 4 * 4 * 2);
    for (auto& v : xv) v = rng.normal();
    Tensor x = Tensor::from_vector({64, 2}, xv, true);
    Tensor y = conv.apply(x, 4);
    CHECK(y.shape() == Shape({64, 3}));
    auto f = [&]() {
        Tensor out = conv.apply(x, 4);
        RandomStream r3(10);
        std::vector<double> proj(static_cast<size_t>(out.numel()));
        for (auto& v : proj) v = r3.uniform(-1, 1);
        return sum_all(mul(out, Tensor::from_vector(out.shape(), proj)));
    };
    auto report = grad_check(f, {{"x", x}, {"w", conv.weight}, {"b", conv.bias}}, 1e-5);
    CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("transposed conv3d doubles each spatial side") {
    ParamStore store;
    RandomStream rng(7);
    ConvTranspose3d up(store, "up", 3, 2, rng);
    std::vector<double> xv(8 * 8 * 8 * 3);
    for (auto& v : xv) v = rng.normal();
    Tensor x = Tensor::from_vector({512, 3}, xv);
    Tensor y = up.apply(x, 8);
    CHECK(y.shape() == Shape({16 * 16 * 16, 2}));

    // gradients on a small instance
    std::vector<double> sv(2 * 2 * 2 * 3);
    for (auto& v : sv) v = rng.normal();
    Tensor xs = Tensor::from_vector({8, 3}, sv, true);
    auto f = [&]() {
        Tensor out = up.apply(xs, 2);
        RandomStream r3(11);
        std::vector<double> proj(static_cast<size_t>(out.numel()));
        for (auto& v : proj) v = r3.uniform(-1, 1);
        return sum_all(mul(out, Tensor::from_vector(out.shape(), proj)));
    };
    auto report = grad_check(f, {{"x", xs}, {"w", up.weight}}, 1e-5);
    CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("adamw: zero gradient and zero weight decay leave parameters unchanged") {
    ParamStore store;
    Tensor p = store.create("p", {3});
    p.value() = {1.0, -2.0, 3.0};
    p.grad();  // allocate zeros
    AdamW opt({.lr = 0.1});
    opt.step(store.params());
    CHECK(p.value()[0] == 1.0);
    CHECK(p.value()[1] == -2.0);
    CHECK(p.value()[2] == 3.0);
}

TEST_CASE("adamw rejects non-positive learning rate") {
    ParamStore store;
    store.create("p", {1});
    AdamW opt({.lr = 0.0});
    CHECK_THROWS_AS(opt.step(store.params()), std::runtime_error);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(cosine_lr(0, 100, 0.2) == doctest::Approx(0.2));
    CHECK(cosine_lr(100, 100, 0.2) == doctest::Approx(0.0));
    CHECK(cosine_lr(50, 100, 0.2, 0.02) == doctest::Approx((0.2 + 0.02) / 2));
}

TEST_CASE("adamw with cosine schedule converges on a quadratic bowl") {
    // convergence oracle by direct simulation
    ParamStore store;
    Tensor theta = store.create("theta", {4});
    RandomStream rng(12);
    for (auto& v : theta.value()) v = rng.uniform(-1, 1);
    AdamW opt({.lr = 0.1});
    const int total = 200;
    for (int step = 0; step < total; ++step) {
        store.zero_grad();
        Tensor loss = sum_all(mul(theta, theta));
        loss.backward();
        opt.set_lr(cosine_lr(step, total, 0.1));
        opt.step(store.params());
    }
    double nrm = 0;
    for (double v : theta.value()) nrm += v * v;
    CHECK(std::sqrt(nrm) < 1e-3);
}

TEST_CASE("truncated normal stays within two sigma") {
    RandomStream rng(13);
    for (int i = 0; i < 2000; ++i) CHECK(std::fabs(trunc_normal(rng, 0.02)) <= 0.04 + 1e-12);
}

TEST_CASE("checkpoint round trip preserves values, names and metadata") {
    CheckpointData data;
    data.meta = {{"step", 42}, {"note", "roundtrip"}};
    RandomStream rng(14);
    std::vector<double> v1(6), v2(4);
    for (auto& v : v1) v = rng.normal();
    for (auto& v : v2) v = rng.normal();
    data.tensors.emplace_back("layer.weight", Tensor::from_vector({2, 3}, v1));
    data.tensors.emplace_back("layer.bias", Tensor::from_vector({4}, v2));

    const std::string path = "/tmp/lara_test_ckpt.bin";
    save_checkpoint(path, data);
    CheckpointData back = load_checkpoint(path);
    CHECK(back.meta.at("step") == 42);
    CHECK(back.tensors.size() == 2);
    CHECK(back.tensors[0].first == "layer.weight");
    CHECK(back.find("layer.weight").shape() == Shape({2, 3}));
    for (size_t i = 0; i < v1.size(); ++i) CHECK(back.find("layer.weight").value()[i] == v1[i]);
    for (size_t i = 0; i < v2.size(); ++i) CHECK(back.find("layer.bias").value()[i] == v2[i]);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects foreign files") {
    const std::string path = "/tmp/lara_bad_ckpt.bin";
    FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("NOTALARA", f);
    std::fclose(f);
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
    std::remove(path.c_str());
}
