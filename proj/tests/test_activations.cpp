#include <catch2/catch_amalgamated.hpp>

#include "sparta/activations.hpp"

using namespace sparta;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(s);
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

DSCANetParams random_params(int channels, ActTag tag, Rng& rng) {
    ActivationKind kind;
    kind.tag = tag;
    DSCANetParams p = DSCANetParams::init(channels, kind, rng);
    if (p.use_dpnet) {
        for (double& v : p.dp_w.data) v = rng.gaussian(0.0, 0.3);
        for (double& v : p.dp_b.data) v = rng.gaussian(0.0, 0.3);
    }
    return p;
}

DSCANetParams zero_params(int channels, ActTag tag) {
    Rng rng(0);
    ActivationKind kind;
    kind.tag = tag;
    DSCANetParams p = DSCANetParams::init(channels, kind, rng);
    for (Tensor* t : {&p.conv1_w, &p.conv1_b, &p.conv2_w, &p.conv2_b, &p.conv3_w, &p.conv3_b,
                      &p.conv4_w, &p.conv4_b, &p.conv5_w, &p.conv5_b, &p.dp_w, &p.dp_b})
        std::fill(t->data.begin(), t->data.end(), 0.0);
    return p;
}

} // namespace

TEST_CASE("relu definition and idempotence", "[activations]") {
    const Tensor x({3}, {-2, 0, 3});
    CHECK(relu(x).data == std::vector<double>{0, 0, 3});
    const Tensor neg = Tensor::full({4}, -1.5);
    for (const double v : relu(neg).data) CHECK(v == 0.0);
    Rng rng(2);
    const Tensor r = random_tensor({2, 3, 3, 2}, rng, -2, 2);
    CHECK(bitwise_equal(relu(relu(r)), relu(r)));
}

TEST_CASE("swish values", "[activations]") {
    CHECK(swish(Tensor({1}, {0})).data[0] == 0.0);
    CHECK(swish(Tensor({1}, {20})).data[0] == Catch::Approx(20.0).margin(1e-6));
    CHECK(swish(Tensor({1}, {1})).data[0] ==
          Catch::Approx(0.7310585786300049).margin(1e-15));
}

TEST_CASE("swish-relu piecewise identity", "[activations]") {
    Rng rng(3);
    Tensor x = random_tensor({2, 4, 4, 3}, rng, -3, 3);
    for (double& v : x.data) v = std::abs(v);
    CHECK(bitwise_equal(swish_relu(x), swish(x)));

    CHECK(swish_relu(Tensor({1}, {-5})).data[0] == 0.0);
    CHECK(swish_relu(Tensor({1}, {2})).data[0] ==
          Catch::Approx(1.7615941559557649).margin(1e-12));

    // exact agreement with swish on the nonnegative orthant, exact zero on
    // the negative orthant
    const Tensor mixed = random_tensor({1, 2, 2, 4}, rng, -2, 2);
    const Tensor sr = swish_relu(mixed);
    const Tensor sw = swish(mixed);
    for (std::size_t i = 0; i < mixed.size(); ++i) {
        if (mixed.data[i] >= 0)
            CHECK(sr.data[i] == sw.data[i]);
        else
            CHECK(sr.data[i] == 0.0);
    }
}

TEST_CASE("baseline activations", "[activations]") {
    CHECK(baseline(Tensor({1}, {0}), BaselineTag::Elu).data[0] == 0.0);
    CHECK(baseline(Tensor({1}, {0}), BaselineTag::Gelu).data[0] == 0.0);
    CHECK(baseline(Tensor({1}, {0}), BaselineTag::Softplus).data[0] ==
          Catch::Approx(0.6931471805599453).margin(1e-15));
    CHECK(baseline(Tensor({1}, {30}), BaselineTag::Softplus).data[0] ==
          Catch::Approx(30.0).margin(1e-9));
    CHECK(baseline(Tensor({1}, {-1}), BaselineTag::Elu).data[0] ==
          Catch::Approx(-0.6321205588285577).margin(1e-15));
    CHECK(baseline(Tensor({1}, {1}), BaselineTag::Gelu).data[0] ==
          Catch::Approx(0.8411919906082768).margin(1e-12));
}

TEST_CASE("dscanet attention with zero weights is uniform 0.5", "[activations]") {
    const DSCANetParams p = zero_params(3, ActTag::Sparta);
    Rng rng(4);
    const Tensor x = random_tensor({2, 4, 4, 3}, rng, -2, 2);
    const Tensor att = dscanet_attention(x, p, true);
    REQUIRE(att.shape == x.shape);
    for (const double v : att.data) CHECK(v == 0.5);
}

TEST_CASE("dscanet attention lies strictly in (0,1)", "[activations]") {
    Rng rng(5);
    const DSCANetParams p = random_params(4, ActTag::Sparta, rng);
    const Tensor x = random_tensor({2, 5, 5, 4}, rng, -3, 3);
    const Tensor att = dscanet_attention(x, p, true);
    for (const double v : att.data) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("dscanet channel mismatch", "[activations]") {
    Rng rng(6);
    const DSCANetParams p = random_params(4, ActTag::Sparta, rng);
    const Tensor x = random_tensor({1, 3, 3, 5}, rng);
    CHECK_THROWS_AS(dscanet_attention(x, p, true), ShapeError);
}

TEST_CASE("dpnet predicts per-sample conv5 weights", "[activations]") {
    Rng rng(7);
    const DSCANetParams p = random_params(3, ActTag::Sparta, rng);
    // two samples with different pooled statistics
    Tensor x({2, 2, 2, 3});
    for (std::size_t i = 0; i < 12; ++i) x.data[i] = 0.1 * static_cast<double>(i);
    for (std::size_t i = 12; i < 24; ++i) x.data[i] = -0.2 * static_cast<double>(i);
    const Tensor pred = dpnet_predict(x, p);
    REQUIRE(pred.shape[0] == 2);
    bool any_diff = false;
    for (std::size_t d = 0; d < pred.shape[1]; ++d)
        if (pred.data[d] != pred.data[pred.shape[1] + d]) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("sparta forward basics", "[activations]") {
    Rng rng(8);
    SECTION("all-negative input gives zero output regardless of phi") {
        const DSCANetParams p = random_params(2, ActTag::Sparta, rng);
        const Tensor x = random_tensor({1, 3, 3, 2}, rng, -4, -0.5);
        const Tensor y = sparta_forward(x, p);
        for (const double v : y.data) CHECK(v == 0.0);
    }
    SECTION("zero-weight network halves positive inputs") {
        const DSCANetParams p = zero_params(1, ActTag::Sparta);
        const Tensor x({1, 1, 1, 1}, {4});
        CHECK(sparta_forward(x, p).data[0] == 2.0);
    }
    SECTION("on nonnegative inputs sparta equals sparta-on-actfeat bitwise") {
        const DSCANetParams p = random_params(3, ActTag::Sparta, rng);
        Tensor x = random_tensor({2, 4, 4, 3}, rng, -2, 2);
        for (double& v : x.data) v = std::abs(v);
        const Tensor a = sparta_forward(x, p, ActTag::Sparta);
        const Tensor b = sparta_forward(x, p, ActTag::SpartaOnActFeat);
        CHECK(bitwise_equal(a, b));
    }
}

TEST_CASE("sparta suppression bound", "[activations]") {
    Rng rng(9);
    for (const ActTag tag : {ActTag::Sparta, ActTag::SpartaNoDPNet, ActTag::SpartaOnActFeat}) {
        const DSCANetParams p = random_params(4, tag, rng);
        const Tensor x = random_tensor({2, 5, 5, 4}, rng, -3, 3);
        const Tensor y = sparta_forward(x, p, tag);
        for (std::size_t i = 0; i < x.size(); ++i) {
            CHECK(y.data[i] >= 0.0);
            CHECK(y.data[i] <= std::max(x.data[i], 0.0));
        }
    }
}

TEST_CASE("detached derivative equals the attention value", "[activations]") {
    // with the attention branch treated as constant, dY/dX = attention for
    // X > 0; equivalently Y_p / X_p must reproduce the separately computed
    // attention map
    Rng rng(10);
    const DSCANetParams p = random_params(3, ActTag::Sparta, rng);
    const Tensor x = random_tensor({2, 4, 4, 3}, rng, -2, 2);
    const Tensor y = sparta_forward(x, p);
    const Tensor att = dscanet_attention(x, p, true);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x.data[i] <= 0.0) continue;
        const double detached = y.data[i] / x.data[i];
        CHECK(std::abs(detached - att.data[i]) <= 1e-12);
        CHECK(detached < 1.0);
    }
}

TEST_CASE("dscanet without dpnet is parameter-static", "[activations]") {
    Rng rng(11);
    const DSCANetParams p = random_params(3, ActTag::SpartaNoDPNet, rng);
    const Tensor x = random_tensor({1, 4, 4, 3}, rng);
    const Tensor a1 = dscanet_attention(x, p, false);
    const Tensor a2 = dscanet_attention(x, p, false);
    CHECK(bitwise_equal(a1, a2));
}

TEST_CASE("block-shared sparta", "[activations]") {
    Rng rng(12);
    const DSCANetParams p = random_params(3, ActTag::SpartaShared, rng);
    const Tensor x = random_tensor({2, 4, 4, 3}, rng, -2, 2);

    SECTION("n = 1 is bitwise identical to the plain forward") {
        const Tensor shared = sparta_shared_forward(x, p, 1);
        const Tensor plain = sparta_forward(x, p, ActTag::Sparta);
        CHECK(bitwise_equal(shared, plain));
    }
    SECTION("n = 2 shares attention within each 2x2 block") {
        const Tensor y = sparta_shared_forward(x, p, 2);
        const Tensor gate = relu(x);
        // recover attention where the gate is nonzero and compare in-block
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t bh = 0; bh < 2; ++bh)
                for (std::size_t bw = 0; bw < 2; ++bw)
                    for (std::size_t c = 0; c < 3; ++c) {
                        double ref = -1.0;
                        for (std::size_t dh = 0; dh < 2; ++dh)
                            for (std::size_t dw = 0; dw < 2; ++dw) {
                                const std::size_t h = bh * 2 + dh, w = bw * 2 + dw;
                                if (gate.at4(n, h, w, c) == 0.0) continue;
                                const double att = y.at4(n, h, w, c) / gate.at4(n, h, w, c);
                                if (ref < 0)
                                    ref = att;
                                else
                                    CHECK(std::abs(att - ref) <= 1e-12);
                            }
                    }
    }
    SECTION("n = H = W gives one score per channel") {
        const Tensor y = sparta_shared_forward(x, p, 4);
        const Tensor gate = relu(x);
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t c = 0; c < 3; ++c) {
                double ref = -1.0;
                for (std::size_t h = 0; h < 4; ++h)
                    for (std::size_t w = 0; w < 4; ++w) {
                        if (gate.at4(n, h, w, c) == 0.0) continue;
                        const double att = y.at4(n, h, w, c) / gate.at4(n, h, w, c);
                        if (ref < 0)
                            ref = att;
                        else
                            CHECK(std::abs(att - ref) <= 1e-12);
                    }
            }
    }
    SECTION("divisibility error") {
        CHECK_THROWS_AS(sparta_shared_forward(x, p, 3), ShapeError);
    }
}

TEST_CASE("activation kind parsing round-trips", "[activations]") {
    for (const char* name : {"relu", "elu", "gelu", "softplus", "swish", "swish-relu", "sparta",
                             "sparta-no-dpnet", "sparta-on-actfeat", "sparta-shared"}) {
        CHECK(ActivationKind::parse(name).str() == name);
    }
    CHECK_THROWS_AS(ActivationKind::parse("maxout"), ValueError);
}

TEST_CASE("reduced width follows the cap", "[activations]") {
    Rng rng(13);
    ActivationKind kind;
    kind.tag = ActTag::Sparta;
    CHECK(DSCANetParams::init(8, kind, rng).c_o == 8);
    kind.c_o_cap = 4;
    CHECK(DSCANetParams::init(8, kind, rng).c_o == 4);
}
