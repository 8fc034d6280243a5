#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "gdpd/checkpoint.hpp"
#include "gdpd/classifier.hpp"
#include "test_util.hpp"

using namespace gdpd;
namespace fs = std::filesystem;

namespace {

Batch random_batch(int b, int m, int l, std::uint64_t seed) {
    RngStream rng(seed);
    Batch x;
    x.channels.assign(m, Mat());
    for (int c = 0; c < m; ++c) x.channels[c] = rng.gaussian(b, l);
    return x;
}

ClassifierSpec tiny_spec(Family fam) {
    ClassifierSpec s;
    s.family = fam;
    s.depth = 1;
    s.width = 4;
    s.class_count = 2;
    s.feature_layer = 1;
    s.input_channels = 1;
    return s;
}

const Family kFamilies[] = {Family::Recurrent, Family::ResidualConv, Family::InceptionConv};

}  // namespace

TEST_CASE("build_classifier feature dimensions and determinism") {
    ClassifierSpec s;
    s.family = Family::Recurrent;
    s.depth = 3;
    s.width = 100;
    s.class_count = 3;
    s.feature_layer = 3;
    Classifier m(s, 1);
    CHECK(m.feature_dim() == 100);  // LSTM3-100

    s.depth = 2;
    s.width = 32;
    s.feature_layer = 2;
    Classifier m2(s, 1);
    CHECK(m2.feature_dim() == 32);  // LSTM2-32

    Classifier a(s, 5), b(s, 5), c(s, 6);
    CHECK(a.params().flatten() == b.params().flatten());
    CHECK(a.params().flatten() != c.params().flatten());
}

TEST_CASE("spec validation") {
    ClassifierSpec s = tiny_spec(Family::Recurrent);
    s.feature_layer = 2;
    CHECK_THROWS_AS(s.validate(), ArgumentError);
    s.feature_layer = 1;
    s.width = 0;
    CHECK_THROWS_AS(s.validate(), ArgumentError);
    CHECK_THROWS_AS(family_from_string("transformer"), ArgumentError);
}

TEST_CASE("features: shape, finiteness, variable lengths") {
    for (auto fam : kFamilies) {
        CAPTURE(family_to_string(fam));
        ClassifierSpec s = tiny_spec(fam);
        s.width = 8;
        Classifier m(s, 3);

        auto z = m.features(random_batch(2, 1, 100, 1));
        CHECK(z.rows() == 2);
        CHECK(z.cols() == 8);

        Batch zeros;
        zeros.channels = {Mat::Zero(3, 20)};
        CHECK(m.features(zeros).allFinite());

        CHECK_NOTHROW(m.features(random_batch(2, 1, 50, 2)));
        CHECK_NOTHROW(m.features(random_batch(2, 1, 100, 2)));

        Batch wrong;
        wrong.channels = {Mat::Zero(2, 10), Mat::Zero(2, 10)};
        CHECK_THROWS_AS(m.features(wrong), ShapeError);
    }
}

TEST_CASE("length agnosticism across every prefix length") {
    for (auto fam : kFamilies) {
        CAPTURE(family_to_string(fam));
        ClassifierSpec s = tiny_spec(fam);
        s.depth = 2;
        s.width = 8;
        s.feature_layer = 2;
        Classifier m(s, 7);
        for (int l = 1; l <= 8; ++l) {
            auto p = m.predict(random_batch(3, 1, l, 11));
            CHECK(p.allFinite());
        }
    }
}

TEST_CASE("predict is a softmax over logits") {
    // direct softmax oracle
    Mat logits(1, 2);
    logits << 10.0, 0.0;
    Mat p = nn::softmax_rows(logits);
    CHECK(p(0, 0) == doctest::Approx(0.9999546).epsilon(1e-4));
    CHECK(p(0, 1) == doctest::Approx(0.0000454).epsilon(1e-4));

    Mat uniform = Mat::Zero(1, 4);
    Mat pu = nn::softmax_rows(uniform);
    for (int c = 0; c < 4; ++c) CHECK(pu(0, c) == doctest::Approx(0.25));

    for (auto fam : kFamilies) {
        ClassifierSpec s = tiny_spec(fam);
        s.class_count = 3;
        Classifier m(s, 9);
        auto probs = m.predict(random_batch(5, 1, 12, 4));
        for (int r = 0; r < 5; ++r) {
            CHECK(probs.row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
            CHECK(probs.row(r).minCoeff() >= 0.0);
        }
    }
}

TEST_CASE("determinism: fixed seed and input give identical logits") {
    for (auto fam : kFamilies) {
        ClassifierSpec s = tiny_spec(fam);
        Classifier a(s, 21), b(s, 21);
        auto x = random_batch(4, 1, 10, 5);
        CHECK(a.predict_logits(x) == b.predict_logits(x));
    }
}

TEST_CASE("feature/head split reproduces predict at feature_layer == depth") {
    for (auto fam : kFamilies) {
        ClassifierSpec s = tiny_spec(fam);
        s.depth = 2;
        s.width = 8;
        s.feature_layer = 2;
        Classifier m(s, 13);
        auto x = random_batch(3, 1, 16, 6);
        const Mat via_split = m.head().fwd(m.features(x));
        const Mat direct = m.predict_logits(x);
        CHECK(via_split == direct);
    }
}

TEST_CASE("cross-entropy gradients match finite differences on tiny specs") {
    const std::vector<int> labels = {0, 1, 0};
    for (auto fam : kFamilies) {
        CAPTURE(family_to_string(fam));
        ClassifierSpec s = tiny_spec(fam);
        Classifier m(s, 17);
        auto x = random_batch(3, 1, 6, 8);

        auto ps = m.params();
        ps.zero_grads();
        Classifier::TrainCtx ctx;
        Mat logits = m.forward_train(x, ctx);
        Mat dlogits;
        nn::cross_entropy(logits, labels, &dlogits);
        m.backward_train(ctx, dlogits, Mat());
        const Vec analytic = ps.flatten_grads();

        auto loss = [&]() {
            Classifier::TrainCtx c2;
            return nn::cross_entropy(m.forward_train(x, c2), labels, nullptr);
        };
        const double excess = testutil::grad_check_excess(ps, analytic, loss);
        CHECK(excess <= 0.0);
    }
}

TEST_CASE("feature-tap gradients match finite differences (depth 2, tap layer 1)") {
    for (auto fam : kFamilies) {
        CAPTURE(family_to_string(fam));
        ClassifierSpec s = tiny_spec(fam);
        s.depth = 2;
        s.feature_layer = 1;
        Classifier m(s, 29);
        auto x = random_batch(2, 1, 6, 9);
        Mat target = RngStream(4).gaussian(2, 4);

        auto ps = m.params();
        ps.zero_grads();
        Classifier::TrainCtx ctx;
        m.forward_train(x, ctx);
        // loss = 0.5 * ||tap - target||^2 -> dtap = tap - target
        m.backward_train(ctx, Mat(), ctx.tap - target);
        const Vec analytic = ps.flatten_grads();

        auto loss = [&]() {
            Classifier::TrainCtx c2;
            m.forward_train(x, c2);
            return 0.5 * (c2.tap - target).squaredNorm();
        };
        CHECK(testutil::grad_check_excess(ps, analytic, loss) <= 0.0);
    }
}

TEST_CASE("head continuation from an intermediate layer is differentiable") {
    for (auto fam : kFamilies) {
        CAPTURE(family_to_string(fam));
        ClassifierSpec s = tiny_spec(fam);
        s.depth = 2;
        s.feature_layer = 1;
        Classifier m(s, 31);
        // seed chosen away from relu kinks so the 1e-4 step stays on one piece
        Mat z = RngStream(12).gaussian(3, 4);
        const std::vector<int> labels = {1, 0, 1};

        auto ps = m.params();
        ps.zero_grads();
        Classifier::HeadCtx hctx;
        Mat logits = m.head_forward(z, hctx);
        CHECK(logits.rows() == 3);
        CHECK(logits.cols() == 2);
        Mat dlogits, dz;
        nn::cross_entropy(logits, labels, &dlogits);
        m.head_backward(hctx, dlogits, &dz);
        const Vec analytic = ps.flatten_grads();

        auto loss = [&]() {
            Classifier::HeadCtx c2;
            return nn::cross_entropy(m.head_forward(z, c2), labels, nullptr);
        };
        CHECK(testutil::grad_check_excess(ps, analytic, loss) <= 0.0);
        CHECK(testutil::grad_check_matrix_excess(z, dz, loss) <= 0.0);
    }
}

TEST_CASE("checkpoint round-trip is byte exact and tag checked") {
    const auto dir = fs::temp_directory_path();
    for (auto fam : kFamilies) {
        ClassifierSpec s = tiny_spec(fam);
        s.depth = 2;
        s.width = 8;
        s.feature_layer = 2;
        Classifier m(s, 41);
        const auto p1 = (dir / ("gdpd_ckpt_a_" + family_to_string(fam))).string();
        const auto p2 = (dir / ("gdpd_ckpt_b_" + family_to_string(fam))).string();
        save_classifier(m, p1);
        Classifier loaded = load_classifier(p1);
        CHECK(loaded.spec().family == fam);
        CHECK(loaded.spec().width == 8);
        save_classifier(loaded, p2);

        std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
        std::string s1((std::istreambuf_iterator<char>(f1)), {});
        std::string s2((std::istreambuf_iterator<char>(f2)), {});
        CHECK(s1 == s2);

        // loaded values equal the float32 cast of the originals
        const Vec orig = m.checkpoint_params().flatten();
        const Vec back = loaded.checkpoint_params().flatten();
        for (Eigen::Index i = 0; i < orig.size(); ++i)
            CHECK(back(i) == static_cast<double>(static_cast<float>(orig(i))));

        // behavioral equivalence after the float32 round of the weights
        auto x = random_batch(2, 1, 9, 3);
        CHECK((m.predict_logits(x) - loaded.predict_logits(x)).cwiseAbs().maxCoeff() < 1e-5);
    }

    // denoiser and adapter use the same container with distinct tags
    Denoiser den(6, 3, 16, 8);
    const auto dp = (dir / "gdpd_ckpt_den").string();
    save_denoiser(den, dp);
    CHECK_THROWS_AS(load_classifier(dp), IoError);
    Denoiser den2 = load_denoiser(dp);
    CHECK(den2.dim == 6);
    CHECK(den2.hidden == 16);

    FusionAdapter ad(6, 4, 3);
    const auto ap = (dir / "gdpd_ckpt_ad").string();
    save_adapter(ad, ap);
    CHECK_THROWS_AS(load_denoiser(ap), IoError);
    FusionAdapter ad2 = load_adapter(ap);
    CHECK(ad2.teacher_dim == 6);
    CHECK(ad2.student_dim == 4);
}

TEST_CASE("intermediate feature taps have the documented width at every layer") {
    for (auto fam : kFamilies) {
        ClassifierSpec s = tiny_spec(fam);
        s.depth = 3;
        s.width = 8;
        s.feature_layer = 3;
        Classifier m(s, 51);
        auto x = random_batch(2, 1, 12, 10);
        for (int layer = 1; layer <= 3; ++layer) {
            auto z = m.features_at(x, layer);
            CHECK(z.rows() == 2);
            CHECK(z.cols() == s.feature_dim(layer));
        }
    }
}
