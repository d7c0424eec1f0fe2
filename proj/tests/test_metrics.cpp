#include <cmath>
#include <filesystem>

#include "doctest.h"

#include "dfcil/metrics.hpp"
#include "test_support.hpp"

using namespace dfcil;
using namespace dfcil::metrics;
using testsup::make_conv_classifier;
using testsup::random_images;

namespace {
data::LabeledDataset tiny_test_set(int classes, int per_class, uint64_t seed) {
    data::ToyConfig cfg;
    cfg.classes = classes;
    cfg.train_per_class = 1;
    cfg.test_per_class = per_class;
    cfg.image = 8;
    return data::make_toy_dataset(cfg, data::Split::test, seed);
}

Tensor gaussian_sample(int n, int dim, uint64_t seed, double mean = 0.0, double std = 1.0) {
    Rng rng(seed);
    Tensor t = Tensor::randn({n, dim}, rng, std);
    for (auto& v : t.v) v += mean;
    return t;
}
}  // namespace

TEST_CASE("accuracy against rigged and random logit functions") {
    auto test = tiny_test_set(4, 50, 3);
    std::vector<int> span = {0, 1, 2, 3};

    SUBCASE("always-correct predictor scores 1.0") {
        size_t cursor = 0;
        LogitFn oracle = [&](const Tensor& x) {
            const int B = x.dim(0);
            Tensor logits({B, 4});
            for (int b = 0; b < B; ++b) {
                logits.v[b * 4 + test.labels[cursor + b]] = 10.0;
            }
            cursor += B;
            return logits;
        };
        CHECK(accuracy_from_logits(oracle, test, span) == 1.0);
    }
    SUBCASE("uniform-random logits score about 1/K") {
        // 3-sigma binomial band around 0.25 over 2000 draws
        auto big = tiny_test_set(4, 500, 4);
        Rng rng(11);
        LogitFn random_fn = [&](const Tensor& x) {
            return Tensor::randn({x.dim(0), 4}, rng);
        };
        const double acc = accuracy_from_logits(random_fn, big, span);
        const double sigma = std::sqrt(0.25 * 0.75 / 2000.0);
        CHECK(std::fabs(acc - 0.25) < 3.0 * sigma);
    }
    SUBCASE("empty test set rejected") {
        data::LabeledDataset empty;
        empty.num_classes = 4;
        empty.channels = 3;
        empty.height = empty.width = 8;
        LogitFn fn = [](const Tensor& x) { return Tensor({x.dim(0), 4}); };
        CHECK_THROWS_AS(accuracy_from_logits(fn, empty, span), std::invalid_argument);
    }
}

TEST_CASE("omega normalization") {
    SUBCASE("self-normalization yields exactly 1 for equal task sizes") {
        AccuracyMatrix acc;
        const std::vector<double> offline = {0.9, 0.8, 0.7, 0.6};
        for (int i = 0; i < 4; ++i) {
            std::vector<double> cum;
            for (int n = 0; n <= i; ++n) cum.push_back(offline[n]);
            acc.cumulative.push_back(cum);
            acc.per_task.push_back(cum);
        }
        auto res = omega(acc, offline, {5, 5, 5, 5});
        CHECK(std::fabs(res.omega - 1.0) < 1e-9);
        CHECK(res.trajectory.size() == 4);
        for (double t : res.trajectory) CHECK(std::fabs(t - 1.0) < 1e-9);
    }
    SUBCASE("hand-computed two-task case") {
        AccuracyMatrix acc;
        acc.per_task = {{0.8}, {0.6, 0.4}};
        acc.cumulative = {{0.8}, {0.6, 0.5}};
        auto res = omega(acc, {0.8, 0.8}, {5, 5});
        CHECK(std::fabs(res.omega - 0.84375) < 1e-9);
        CHECK(res.trajectory.back() == doctest::Approx(res.omega).epsilon(1e-15));
        CHECK(std::fabs(res.trajectory[0] - 1.0) < 1e-12);
    }
    SUBCASE("single-task reduction") {
        AccuracyMatrix acc;
        acc.per_task = {{0.6}};
        acc.cumulative = {{0.6}};
        auto res = omega(acc, {0.9}, {10});
        CHECK(res.omega == doctest::Approx(0.6 / 0.9).epsilon(1e-12));
    }
    SUBCASE("zero offline accuracy is rejected") {
        AccuracyMatrix acc;
        acc.per_task = {{0.5}};
        acc.cumulative = {{0.5}};
        CHECK_THROWS_AS(omega(acc, {0.0}, {5}), std::invalid_argument);
    }
}

TEST_CASE("mean image distance") {
    SUBCASE("identical samples score 0") {
        Tensor z = gaussian_sample(20, 3, 5);
        CHECK(mid_score(z, z) == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("hand-computed case equals sqrt(2)") {
        // reference: mean (0,0), per-dimension std (1,2) with n-1 normalization
        Tensor ref({2, 2});
        const double a = 1.0 / std::sqrt(2.0), b = 2.0 / std::sqrt(2.0);
        ref.v = {a, b, -a, -b};
        Tensor other({1, 2});
        other.v = {1.0, 2.0};
        CHECK(std::fabs(mid_score(ref, other) - std::sqrt(2.0)) < 1e-9);
    }
    SUBCASE("scaling both samples leaves the score invariant") {
        Tensor ref = gaussian_sample(30, 4, 6);
        Tensor other = gaussian_sample(25, 4, 7, 0.5);
        const double base = mid_score(ref, other);
        for (double c : {0.1, 3.0, 42.0}) {
            Tensor ref_c = ref, other_c = other;
            for (auto& v : ref_c.v) v *= c;
            for (auto& v : other_c.v) v *= c;
            CHECK(mid_score(ref_c, other_c) == doctest::Approx(base).epsilon(1e-9));
        }
    }
    SUBCASE("zero reference std names the dimension") {
        Tensor ref({3, 2});
        ref.v = {1.0, 5.0, 1.0, 6.0, 1.0, 7.0};  // dim 0 constant
        Tensor other({2, 2});
        other.v = {0.0, 0.0, 1.0, 1.0};
        CHECK_THROWS_WITH_AS(mid_score(ref, other), doctest::Contains("dimension 0"),
                             std::invalid_argument);
    }
}

TEST_CASE("maximum mean discrepancy") {
    SUBCASE("null case: unbiased estimates center on 0 over 100 seeded draws") {
        double sum = 0.0, sumsq = 0.0;
        const int reps = 100;
        for (int rep = 0; rep < reps; ++rep) {
            Tensor a = gaussian_sample(40, 4, 1000 + 2 * rep);
            Tensor b = gaussian_sample(40, 4, 1001 + 2 * rep);
            const double v = mmd_score(a, b);
            sum += v;
            sumsq += v * v;
        }
        const double mean = sum / reps;
        const double var = (sumsq - reps * mean * mean) / (reps - 1);
        const double se = std::sqrt(var / reps);
        CHECK(std::fabs(mean) < 3.0 * se);
    }
    SUBCASE("separated clouds score positive and grow with separation") {
        Tensor base = gaussian_sample(60, 4, 21);
        double last = 0.0;
        for (double sep : {1.0, 2.0, 4.0}) {
            Tensor shifted = gaussian_sample(60, 4, 22, sep);
            const double v = mmd_score(base, shifted);
            CHECK(v > last);
            last = v;
        }
        CHECK(last > 0.0);
    }
    SUBCASE("permutation invariance within samples") {
        Tensor a = gaussian_sample(15, 3, 31);
        Tensor b = gaussian_sample(17, 3, 32, 0.3);
        const double v1 = mmd_score(a, b);
        Tensor a_rev({15, 3});
        for (int i = 0; i < 15; ++i) {
            std::copy_n(a.data() + (14 - i) * 3, 3, a_rev.data() + i * 3);
        }
        CHECK(mmd_score(a_rev, b) == doctest::Approx(v1).epsilon(1e-12));
    }
    SUBCASE("small samples rejected") {
        Tensor a = gaussian_sample(1, 3, 41);
        Tensor b = gaussian_sample(5, 3, 42);
        CHECK_THROWS_AS(mmd_score(a, b), std::invalid_argument);
    }
    SUBCASE("fixed bandwidth configuration") {
        Tensor a = gaussian_sample(20, 3, 51);
        Tensor b = gaussian_sample(20, 3, 52, 1.0);
        MmdConfig cfg;
        cfg.bandwidth = 1.5;
        CHECK(std::isfinite(mmd_score(a, b, cfg)));
    }
}

TEST_CASE("drift report determinism") {
    auto m = make_conv_classifier({{0, 1}, {2, 3}});
    Tensor r1 = random_images(20, {3, 8, 8}, 61);
    Tensor r2 = random_images(20, {3, 8, 8}, 62, 1.2);
    Tensor s1 = random_images(20, {3, 8, 8}, 63, 0.8);
    auto a = drift_report(m, r1, r2, s1);
    auto b = drift_report(m, r1, r2, s1);
    CHECK(a.mid_real_synth == b.mid_real_synth);
    CHECK(a.mid_real_real == b.mid_real_real);
    CHECK(a.mmd_real_synth == b.mmd_real_synth);
    CHECK(a.mmd_real_real == b.mmd_real_real);
    CHECK(a.mid_ratio() == b.mid_ratio());
}

TEST_CASE("embedding export") {
    namespace fs = std::filesystem;
    auto m = make_conv_classifier({{0, 1}});
    const auto path = (fs::temp_directory_path() / "dfcil_embed.tsv").string();

    Tensor x1 = random_images(5, {3, 8, 8}, 71);
    Tensor x2 = random_images(3, {3, 8, 8}, 72);
    export_embeddings(m, {{x1, {0, 1, 0, 1, 0}, "real-task-1"}, {x2, {1, 1, 0}, "synthetic-task-1"}},
                      path);
    int dim = 0;
    auto rows = parse_embeddings(path, &dim);
    CHECK(dim == m.backbone().feature_dim());
    CHECK(rows.size() == 8);
    CHECK(rows[0].provenance == "real-task-1");
    CHECK(rows[7].provenance == "synthetic-task-1");
    CHECK(rows[7].label == 0);

    // embeddings match features() bitwise (printed with full precision)
    Tensor z = m.features_eval(x1);
    for (int d = 0; d < dim; ++d) {
        CHECK(rows[0].embedding[d] == z.v[d]);
    }
    fs::remove(path);
}

TEST_CASE("batch timing") {
    CHECK_THROWS_AS(batch_timing([] {}, 0, 5), std::invalid_argument);
    CHECK_THROWS_AS(batch_timing([] {}, 1, 0), std::invalid_argument);

    volatile double sink = 0.0;
    auto work = [&] {
        double acc = 0.0;
        for (int i = 0; i < 400000; ++i) acc += std::sqrt(static_cast<double>(i));
        sink = acc;
    };
    const double t1 = batch_timing(work, 2, 10);
    const double t2 = batch_timing(work, 2, 10);
    CHECK(t1 > 0.0);
    // repeatability is a sanity bound, not a precision claim
    CHECK(std::fabs(t1 - t2) / std::max(t1, t2) < 0.5);
}
