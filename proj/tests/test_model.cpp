#include "doctest.h"

#include "dfcil/losses.hpp"
#include "dfcil/model.hpp"
#include "dfcil/nn.hpp"
#include "test_support.hpp"

using namespace dfcil;
using namespace dfcil::model;
using testsup::make_conv_classifier;
using testsup::make_mlp_classifier;
using testsup::random_images;

TEST_CASE("features are finite, deterministic, and shape-checked") {
    auto m = make_conv_classifier({{0, 1, 2}});
    auto x = random_images(4, {3, 8, 8}, 1);
    Tensor f1 = m.features_eval(x);
    CHECK(all_finite(f1));
    Tensor f2 = m.features_eval(x);
    CHECK(testsup::tensors_equal(f1, f2));

    auto bad = random_images(4, {3, 6, 6}, 2);
    CHECK_THROWS_WITH_AS(m.features_eval(bad), doctest::Contains("expected"),
                         std::invalid_argument);
    try {
        m.features_eval(bad);
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("8") != std::string::npos);   // expected dims
        CHECK(msg.find("6") != std::string::npos);   // given dims
    }
}

TEST_CASE("snapshot equals live copy immediately after capture") {
    auto m = make_conv_classifier({{0, 1}});
    ModelSnapshot snap(m);
    auto x = random_images(3, {3, 8, 8}, 3);
    // Inference-mode comparison on both sides.
    Tensor live = m.features_eval(x);
    Tensor frozen = snap.features_eval(x);
    CHECK(testsup::tensors_equal(live, frozen));
}

TEST_CASE("snapshot stays bitwise immutable while the live model trains") {
    auto m = make_conv_classifier({{0, 1}});
    ModelSnapshot snap(m);
    const uint64_t before = snap.state_hash();
    auto x = random_images(8, {3, 8, 8}, 4);
    std::vector<int> y = {0, 1, 0, 1, 0, 1, 0, 1};
    nn::SGD opt(m.parameters(), 0.1, 0.9, 1e-4);
    for (int step = 0; step < 5; ++step) {
        auto loss = losses::local_ce_loss(m, x, y);
        opt.zero_grad();
        ad::backward(loss);
        opt.step();
    }
    CHECK(snap.state_hash() == before);
    CHECK(m.state_hash() != before);
}

TEST_CASE("logit spans slice the right heads") {
    auto m = make_mlp_classifier({{0, 1, 2}, {3, 4}});
    auto x = random_images(2, {1, 4, 4}, 5);
    CHECK(m.logits_eval(x, 0, 1).dim(1) == 5);
    CHECK(m.logits_eval(x, 1, 1).dim(1) == 2);
    CHECK(m.logits_eval(x, 0, 0).dim(1) == 3);
    CHECK_THROWS_AS(m.logits_eval(x, 0, 2), std::invalid_argument);

    // Perturbing task-1 head parameters leaves task-2 logits bitwise unchanged.
    Tensor before = m.logits_eval(x, 1, 1);
    for (auto& p : m.head_parameters(0, 0)) {
        for (auto& v : p->val.v) v += 3.14159;
    }
    Tensor after = m.logits_eval(x, 1, 1);
    CHECK(testsup::tensors_equal(before, after));
}

TEST_CASE("padded teacher probabilities") {
    auto m = make_mlp_classifier({{0, 1, 2, 3}});
    ModelSnapshot snap(m);
    auto x = random_images(5, {1, 4, 4}, 6);

    SUBCASE("no padding: plain tempered softmax") {
        Tensor p = padded_teacher_probs(snap, x, 4, 2.0);
        CHECK(p.dim(1) == 4);
        for (int r = 0; r < 5; ++r) {
            double sum = 0.0;
            for (int k = 0; k < 4; ++k) sum += p.v[r * 4 + k];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    SUBCASE("zero extension") {
        Tensor p = padded_teacher_probs(snap, x, 9, 1.0);
        CHECK(p.dim(1) == 9);
        for (int r = 0; r < 5; ++r) {
            double sum = 0.0;
            for (int k = 0; k < 4; ++k) sum += p.v[r * 9 + k];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
            for (int k = 4; k < 9; ++k) CHECK(p.v[r * 9 + k] == 0.0);
        }
    }
    SUBCASE("huge temperature approaches uniform over old classes") {
        Tensor p = padded_teacher_probs(snap, x, 6, 1e6);
        for (int r = 0; r < 5; ++r) {
            for (int k = 0; k < 4; ++k) {
                CHECK(p.v[r * 6 + k] == doctest::Approx(0.25).epsilon(1e-3));
            }
            CHECK(p.v[r * 6 + 4] == 0.0);
            CHECK(p.v[r * 6 + 5] == 0.0);
        }
    }
    SUBCASE("invalid arguments") {
        CHECK_THROWS_AS(padded_teacher_probs(snap, x, 4, 0.0), std::invalid_argument);
        CHECK_THROWS_AS(padded_teacher_probs(snap, x, 4, -1.0), std::invalid_argument);
        CHECK_THROWS_AS(padded_teacher_probs(snap, x, 3, 1.0), std::invalid_argument);
    }
}

TEST_CASE("grow_heads preserves existing parameters bitwise") {
    auto m = make_mlp_classifier({{0, 1}});
    Tensor w_before = m.heads_weight_matrix(0, 0);
    m.grow_heads({2, 3, 4}, 99);
    CHECK(m.num_classes() == 5);
    CHECK(m.head_width(0, 1) == 5);
    Tensor w_after = m.heads_weight_matrix(0, 0);
    CHECK(testsup::tensors_equal(w_before, w_after));
    CHECK(m.class_registry() == std::vector<int>{0, 1, 2, 3, 4});

    CHECK_THROWS_AS(m.grow_heads({}, 1), std::invalid_argument);
    CHECK_THROWS_AS(m.grow_heads({2}, 1), std::invalid_argument);  // duplicate

    // seeded: same seed, same init
    auto a = make_mlp_classifier({{0}});
    auto b = make_mlp_classifier({{0}});
    a.grow_heads({1, 2}, 42);
    b.grow_heads({1, 2}, 42);
    CHECK(a.state_hash() == b.state_hash());
}

TEST_CASE("batch-norm statistics extraction") {
    auto m = make_conv_classifier({{0, 1}}, 7, 2);
    auto stats = m.extract_bn_stats();
    CHECK(stats.layers.size() == 4);  // one per conv stage
    for (const auto& l : stats.layers) {
        for (double mu : l.mean) CHECK(mu == 0.0);
        for (double sd : l.std) CHECK(sd == 1.0);
    }

    // Train one pass; running stats move away from the initialization.
    auto x = random_images(16, {3, 8, 8}, 8);
    std::vector<int> y;
    for (int i = 0; i < 16; ++i) y.push_back(i % 2);
    auto loss = losses::local_ce_loss(m, x, y);
    (void)loss;
    auto stats2 = m.extract_bn_stats();
    bool moved = false;
    for (const auto& l : stats2.layers) {
        for (double mu : l.mean) {
            if (mu != 0.0) moved = true;
        }
    }
    CHECK(moved);

    auto mlp = make_mlp_classifier({{0, 1}});
    CHECK_THROWS_WITH_AS(mlp.extract_bn_stats(), doctest::Contains("normalization"),
                         std::invalid_argument);
}

TEST_CASE("head isolation: loss over T_n yields exactly zero gradient on older heads") {
    auto m = make_mlp_classifier({{0, 1, 2}, {3, 4}});
    auto x = random_images(6, {1, 4, 4}, 9);
    std::vector<int> y = {3, 4, 3, 4, 3, 4};
    auto old_params = m.head_parameters(0, 0);
    ad::zero_grads(old_params);
    auto loss = losses::local_ce_loss(m, x, y);
    ad::backward(loss);
    for (const auto& p : old_params) {
        for (double g : p->grad.v) CHECK(g == 0.0);
    }
}

TEST_CASE("resnet32 structure") {
    IncrementalClassifier m(BackboneKind::resnet32, {3, 32, 32}, 1);
    m.grow_heads({0, 1, 2}, 2);
    CHECK(m.backbone().feature_dim() == 64);

    auto stats = m.extract_bn_stats();
    CHECK(stats.layers.size() == 33);  // stem + 2 per block + 2 projections

    size_t params = 0;
    for (const auto& p : m.backbone_parameters()) params += p->val.numel();
    CHECK(params > 400000);
    CHECK(params < 550000);

    auto x = random_images(2, {3, 32, 32}, 10);
    Tensor f = m.features_eval(x);
    CHECK(f.dim(0) == 2);
    CHECK(f.dim(1) == 64);
    CHECK(all_finite(f));
}

TEST_CASE("checkpoint counters track snapshot instances") {
    const int live_before = ModelSnapshot::live_instances();
    {
        auto m = make_mlp_classifier({{0}});
        ModelSnapshot::reset_peak();
        ModelSnapshot a(m);
        CHECK(ModelSnapshot::live_instances() == live_before + 1);
        ModelSnapshot b(m);
        CHECK(ModelSnapshot::peak_instances() >= live_before + 2);
    }
    CHECK(ModelSnapshot::live_instances() == live_before);
}
