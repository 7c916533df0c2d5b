// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "support.hpp"

using namespace meteora;
using Catch::Approx;

TEST_CASE("tensor construction rejects bad shapes", "[tensor]") {
    CHECK_THROWS_AS(Tensor(Shape{}), DimensionError);
    CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor::matrix({{1, 2}, {3}}), DimensionError);
}

TEST_CASE("matmul matches a hand computation", "[tensor]") {
    const auto a = Tensor64::matrix({{1, 2, 3}, {4, 5, 6}});
    const auto b = Tensor64::matrix({{7, 8}, {9, 10}, {11, 12}});
    const auto c = matmul(a, b);
    CHECK(c == Tensor64::matrix({{58, 64}, {139, 154}}));
    CHECK_THROWS_AS(matmul(a, a), DimensionError);
}

TEST_CASE("softmax is shift invariant and flattens with temperature", "[tensor]") {
    const auto v = Tensor64::vector({1.0, 2.0, 4.0});
    const auto p = softmax(v);
    CHECK(p[0] + p[1] + p[2] == Approx(1.0));
    const auto shifted = softmax(Tensor64::vector({101.0, 102.0, 104.0}));
    for (std::size_t i = 0; i < 3; ++i) CHECK(shifted[i] == Approx(p[i]).epsilon(1e-12));
    const auto hot = softmax(v, 10.0);
    CHECK(hot[2] < p[2]);
    CHECK_THROWS_AS(softmax(v, 0.0), ParameterError);
    CHECK_THROWS_AS(softmax(Tensor64::vector({1.0, std::nan("")})), NumericError);
}

TEST_CASE("topk breaks ties toward the lower index", "[tensor]") {
    const std::vector<double> v{1.0, 3.0, 3.0, 0.5, 3.0};
    const auto idx = topk<double>(v, 3);
    CHECK(idx == std::vector<std::size_t>{1, 2, 4});
    CHECK_THROWS_AS(topk<double>(v, 0), ParameterError);
    CHECK_THROWS_AS(topk<double>(v, 6), ParameterError);
}

TEST_CASE("topk agrees with a repeated-scan oracle", "[tensor][property]") {
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(30);
        std::vector<double> v(n);
        // Coarse values force frequent ties.
        for (auto& x : v) x = double(rng.below(5));
        const std::size_t k = 1 + rng.below(n);
        CHECK(topk<double>(v, k) == testing::naive_topk(v, k));
    }
}

TEST_CASE("rng streams are reproducible and forks are independent", "[rng]") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    Rng f1 = Rng(42).fork(1), f2 = Rng(42).fork(2);
    CHECK(f1.next_u64() != f2.next_u64());
    CHECK(Rng(42).fork(1).next_u64() == Rng(42).fork(1).next_u64());
}

TEST_CASE("rng uniform and normal have the right moments", "[rng][property]") {
    Rng rng(7);
    const int n = 200000;
    double su = 0, sn = 0, sn2 = 0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        su += u;
        const double z = rng.normal();
        sn += z;
        sn2 += z * z;
    }
    CHECK(su / n == Approx(0.5).margin(0.005));
    CHECK(sn / n == Approx(0.0).margin(0.01));
    CHECK(sn2 / n == Approx(1.0).margin(0.02));
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 1000; ++i) seen.insert(rng.below(7));
    CHECK(seen == std::set<std::uint64_t>{0, 1, 2, 3, 4, 5, 6});
}

TEST_CASE("lora_forward matches the closed form", "[lora]") {
    Rng rng(1);
    LoraAdapter<double> ad{random_normal<double>({6, 2}, rng), random_normal<double>({2, 5}, rng), 4.0, "x"};
    const auto w = random_normal<double>({6, 5}, rng);
    const auto x = random_normal<double>({6}, rng);
    const auto out = lora_forward(x, w, ad);
    CHECK(ad.default_scale() == 2.0);
    for (std::size_t c = 0; c < 5; ++c) {
        double base = 0, delta = 0;
        for (std::size_t t = 0; t < 6; ++t) base += x[t] * w(t, c);
        for (std::size_t q = 0; q < 2; ++q) {
            double xa = 0;
            for (std::size_t t = 0; t < 6; ++t) xa += x[t] * ad.a(t, q);
            delta += xa * ad.b(q, c);
        }
        CHECK(out[c] == Approx(base + 2.0 * delta).epsilon(1e-12));
    }
}

TEST_CASE("zero B makes an adapter an exact no-op", "[lora]") {
    Rng rng(2);
    LoraAdapter<float> ad{random_normal<float>({8, 4}, rng), Tensor({4, 8}), 16.0, "z"};
    const auto w = random_normal<float>({8, 8}, rng);
    const auto x = random_normal<float>({8}, rng);
    Tensor base({8});
    for (std::size_t c = 0; c < 8; ++c)
        for (std::size_t t = 0; t < 8; ++t) base[c] += x[t] * w(t, c);
    CHECK(testing::max_diff(lora_forward(x, w, ad), base) < 1e-6);
}

TEST_CASE("bank stacking keeps order and rejects mismatches", "[lora]") {
    Rng rng(5);
    std::vector<LoraAdapter<float>> ads;
    for (int i = 0; i < 3; ++i)
        ads.push_back({random_normal<float>({4, 2}, rng), random_normal<float>({2, 3}, rng), 8.0, "ad" + std::to_string(i)});
    const auto bank = LoraBank<float>::stack(ads);
    REQUIRE(bank.size() == 3);
    CHECK(bank.names() == std::vector<std::string>{"ad0", "ad1", "ad2"});
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(bank.adapter(i).a == ads[i].a);
        CHECK(bank.adapter(i).b == ads[i].b);
    }
    auto bad = ads;
    bad[1].a = random_normal<float>({5, 2}, rng);
    CHECK_THROWS_AS(LoraBank<float>::stack(bad), ConfigurationError);
    bad = ads;
    bad[2].alpha = 4.0;
    CHECK_THROWS_AS(LoraBank<float>::stack(bad), ConfigurationError);
    CHECK_THROWS_AS(LoraBank<float>::stack(std::vector<LoraAdapter<float>>{}), ConfigurationError);
    CHECK_THROWS_AS(bank.adapter(3), ParameterError);
}

TEST_CASE("routing weights are a softmax over the selected logits", "[routing]") {
    const std::vector<double> logits{0.1, 2.0, -1.0, 1.5};
    const auto dec = route<double>(logits, RoutingConfig{2, 1.0});
    CHECK(dec.indices == std::vector<std::uint32_t>{1, 3});
    const double z = std::exp(2.0) + std::exp(1.5);
    CHECK(dec.weights[0] == Approx(std::exp(2.0) / z).epsilon(1e-12));
    CHECK(dec.weights[1] == Approx(std::exp(1.5) / z).epsilon(1e-12));
    CHECK(dec.logits == logits);

    const auto one = route<double>(logits, RoutingConfig{1, 1.0});
    CHECK(one.weights == std::vector<double>{1.0});
    CHECK_THROWS_AS(route<double>(logits, RoutingConfig{5, 1.0}), ParameterError);
    CHECK_THROWS_AS(route<double>(logits, RoutingConfig{2, 0.0}), ParameterError);
}

TEST_CASE("routing is valid for random logits and temperatures", "[routing][property]") {
    Rng rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.below(28);
        std::vector<double> logits(n);
        for (auto& l : logits) l = 5.0 * rng.normal();
        const RoutingConfig rc{1 + rng.below(n), 0.1 + 30.0 * rng.uniform()};
        const auto dec = route<double>(logits, rc);
        REQUIRE(dec.indices.size() == rc.k);
        double sum = 0.0;
        for (double w : dec.weights) {
            REQUIRE(w >= 0.0);
            sum += w;
        }
        CHECK(sum == Approx(1.0).margin(1e-6));
        for (std::size_t j = 1; j < rc.k; ++j) CHECK(dec.weights[j - 1] >= dec.weights[j]);
        // Selection does not depend on temperature.
        CHECK(route<double>(logits, RoutingConfig{rc.k, 1.0}).indices == dec.indices);
    }
}

TEST_CASE("higher temperature raises the entropy of the selected weights", "[routing][property]") {
    auto entropy = [](const std::vector<double>& w) {
        double e = 0.0;
        for (double x : w) e -= x > 0 ? x * std::log(x) : 0.0;
        return e;
    };
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> logits(8);
        for (auto& l : logits) l = 3.0 * rng.normal();
        double prev = -1.0;
        for (double tau : {1.0, 15.0, 30.0}) {
            const double e = entropy(route<double>(logits, RoutingConfig{4, tau}).weights);
            CHECK(e >= prev - 1e-12);
            prev = e;
        }
    }
}

TEST_CASE("NaN logits are rejected", "[routing]") {
    const std::vector<double> logits{0.0, std::nan(""), 1.0};
    CHECK_THROWS_AS(route<double>(logits, RoutingConfig{1, 1.0}), NumericError);
}

TEST_CASE("f32 lora_forward decomposes into base plus scaled delta", "[lora][property]") {
    Rng rng(12);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 4 + rng.below(60), r = 1 + rng.below(8), h = 4 + rng.below(60);
        LoraAdapter<float> ad{random_normal<float>({d, r}, rng, 0.3), random_normal<float>({r, h}, rng, 0.3), 16.0, ""};
        const auto w = random_normal<float>({d, h}, rng, 0.3);
        const auto x = random_normal<float>({d}, rng);
        const auto out = lora_forward(x, w, ad, 2.0);
        for (std::size_t c = 0; c < h; ++c) {
            double base = 0.0, delta = 0.0;
            for (std::size_t t = 0; t < d; ++t) base += double(x[t]) * double(w(t, c));
            for (std::size_t q = 0; q < r; ++q) {
                double xa = 0.0;
                for (std::size_t t = 0; t < d; ++t) xa += double(x[t]) * double(ad.a(t, q));
                delta += xa * double(ad.b(q, c));
            }
            worst = std::max(worst, std::abs((double(out[c]) - base) - 2.0 * delta));
        }
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("lora_forward is linear in x", "[lora][property]") {
    Rng rng(13);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 4 + rng.below(60), r = 1 + rng.below(8), h = 4 + rng.below(60);
        LoraAdapter<float> ad{random_normal<float>({d, r}, rng, 0.3), random_normal<float>({r, h}, rng, 0.3), 16.0, ""};
        const auto w = random_normal<float>({d, h}, rng, 0.3);
        const auto x = random_normal<float>({d}, rng), y = random_normal<float>({d}, rng);
        const float a = float(rng.uniform(-2, 2)), b = float(rng.uniform(-2, 2));
        Tensor mix({d});
        for (std::size_t t = 0; t < d; ++t) mix[t] = a * x[t] + b * y[t];
        const auto fm = lora_forward(mix, w, ad), fx = lora_forward(x, w, ad), fy = lora_forward(y, w, ad);
        for (std::size_t c = 0; c < h; ++c)
            worst = std::max(worst, std::abs(double(fm[c]) - (double(a) * fx[c] + double(b) * fy[c])));
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("stacking then slicing returns every adapter", "[lora][property]") {
    Rng rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng.below(8), d = 1 + rng.below(20), r = 1 + rng.below(6), h = 1 + rng.below(20);
        std::vector<LoraAdapter<double>> ads;
        for (std::size_t i = 0; i < n; ++i)
            ads.push_back({random_normal<double>({d, r}, rng), random_normal<double>({r, h}, rng), 8.0,
                           "a" + std::to_string(i)});
        const auto bank = LoraBank<double>::stack(ads);
        for (std::size_t i = 0; i < n; ++i) {
            const auto back = bank.adapter(i);
            CHECK(back.a == ads[i].a);
            CHECK(back.b == ads[i].b);
            CHECK(back.alpha == ads[i].alpha);
            CHECK(back.name == ads[i].name);
            CHECK(std::equal(bank.a_slice(i).begin(), bank.a_slice(i).end(), ads[i].a.data().begin()));
        }
    }
}
