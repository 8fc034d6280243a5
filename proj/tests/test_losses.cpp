#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gdpd/losses.hpp"
#include "test_util.hpp"

using namespace gdpd;

namespace {

Batch random_batch(int b, int m, int l, std::uint64_t seed) {
    RngStream rng(seed);
    Batch x;
    for (int c = 0; c < m; ++c) x.channels.push_back(rng.gaussian(b, l));
    return x;
}

Classifier tiny_student(int width = 4, int classes = 2, std::uint64_t seed = 17) {
    ClassifierSpec s;
    s.family = Family::Recurrent;
    s.depth = 1;
    s.width = width;
    s.class_count = classes;
    s.feature_layer = 1;
    s.input_channels = 1;
    return Classifier(s, seed);
}

}  // namespace

TEST_CASE("task_loss") {
    SUBCASE("one-hot-perfect logits vanish") {
        auto m = tiny_student();
        m.head().W.v.setZero();
        m.head().b.v << 20.0, 0.0;  // every sample classified as 0 with margin 20
        auto x = random_batch(4, 1, 6, 3);
        CHECK(task_loss(m, x, {0, 0, 0, 0}) < 1e-3);
    }
    SUBCASE("uniform logits give ln C") {
        auto m = tiny_student(4, 4);
        m.head().W.v.setZero();
        m.head().b.v.setZero();
        auto x = random_batch(3, 1, 6, 3);
        CHECK(task_loss(m, x, {0, 1, 2}) == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    }
    SUBCASE("matches cross-entropy of the training-mode forward") {
        auto m = tiny_student();
        auto x = random_batch(5, 1, 8, 9);
        const std::vector<int> y = {0, 1, 1, 0, 1};
        Classifier::TrainCtx ctx;
        const double direct = nn::cross_entropy(m.forward_train(x, ctx, false), y, nullptr);
        CHECK(task_loss(m, x, y) == doctest::Approx(direct).epsilon(1e-12));
    }
}

TEST_CASE("logit_kd_loss") {
    SUBCASE("identical logits give zero") {
        Mat z = RngStream(3).gaussian(4, 3);
        CHECK(logit_kd_loss(z, z, 4.0) == doctest::Approx(0.0));
    }
    SUBCASE("hand-computed KL oracle at tau = 1") {
        Mat teacher(1, 2), student(1, 2);
        teacher << 1.0, 0.0;
        student << 0.0, 1.0;
        // p = softmax([1,0]), q = softmax([0,1]); KL = sum p ln(p/q)
        const double p0 = std::exp(1.0) / (std::exp(1.0) + 1.0);
        const double want = p0 * std::log(p0 / (1.0 - p0)) + (1.0 - p0) * std::log((1.0 - p0) / p0);
        CHECK(logit_kd_loss(student, teacher, 1.0) == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("non-negative on random logits") {
        RngStream rng(7);
        for (int rep = 0; rep < 20; ++rep)
            CHECK(logit_kd_loss(rng.gaussian(5, 4), rng.gaussian(5, 4), 0.5 + rng.uniform() * 4) >= 0.0);
    }
    SUBCASE("temperature-squared scaling") {
        Mat t = RngStream(9).gaussian(3, 4), s = RngStream(10).gaussian(3, 4);
        const double tau = 2.0;
        // same KL computed manually from tempered softmaxes
        const Mat p = nn::softmax_rows(t / tau), q = nn::softmax_rows(s / tau);
        double kl = 0;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 4; ++c) kl += p(r, c) * std::log(p(r, c) / q(r, c));
        CHECK(logit_kd_loss(s, t, tau) == doctest::Approx(tau * tau * kl / 3.0).epsilon(1e-12));
    }
    SUBCASE("student-logit gradient matches finite differences") {
        Mat t = RngStream(11).gaussian(3, 4);
        Mat s = RngStream(12).gaussian(3, 4);
        Mat ds;
        logit_kd_loss(s, t, 3.0, &ds);
        auto loss = [&]() { return logit_kd_loss(s, t, 3.0); };
        CHECK(testutil::grad_check_matrix_excess(s, ds, loss) <= 0.0);
    }
}

TEST_CASE("feature_kd_loss") {
    SUBCASE("identical features, identity projection") {
        FeatureKd kd(4, 4, 1);
        CHECK_FALSE(kd.projection.has_value());
        Mat z = RngStream(5).gaussian(3, 4);
        CHECK(kd.loss(z, z) == doctest::Approx(0.0));
    }
    SUBCASE("batch-mean convention") {
        FeatureKd kd(3, 3, 1);
        Mat zero = Mat::Zero(1, 3);
        Mat target(1, 3);
        target << std::sqrt(7.0), 0.0, 0.0;  // squared norm 7
        CHECK(kd.loss(zero, target) == doctest::Approx(7.0));

        Mat zeros2 = Mat::Zero(2, 3);
        Mat targets2(2, 3);
        targets2 << std::sqrt(3.0), 0, 0, 2.0, 0, 0;  // norms 3 and 4
        CHECK(kd.loss(zeros2, targets2) == doctest::Approx(3.5));
    }
    SUBCASE("gradient reaches the projection and matches finite differences") {
        FeatureKd kd(3, 5, 21);
        REQUIRE(kd.projection.has_value());
        Mat zs = RngStream(6).gaussian(4, 3);
        Mat zl = RngStream(7).gaussian(4, 5);

        auto ps = kd.params();
        ps.zero_grads();
        Mat dz;
        kd.loss(zs, zl, &dz, true);
        const Vec analytic = ps.flatten_grads();
        CHECK(analytic.cwiseAbs().maxCoeff() > 0.0);

        auto loss = [&]() { return kd.loss(zs, zl, nullptr, false); };
        CHECK(testutil::grad_check_excess(ps, analytic, loss) <= 0.0);
        CHECK(testutil::grad_check_matrix_excess(zs, dz, loss) <= 0.0);
    }
}

TEST_CASE("gdpd_loss") {
    auto sched10 = make_schedule(10, 1e-3, 0.1);

    SUBCASE("nfe = 0 disables the loss exactly") {
        auto m = tiny_student();
        Denoiser den(4, 2, 8, 4);
        GdpdMachinery mach(4, 4, 3);
        RngStream rng(5), rng2(5);
        auto x = random_batch(3, 1, 6, 8);
        CHECK(gdpd_loss(m, den, sched10, mach, x, {0, 1, 0}, 1, 0, rng) == 0.0);
        // no rng consumption while disabled
        CHECK(rng.uniform() == rng2.uniform());
    }

    SUBCASE("monte carlo decomposition: J=3 equals the mean of three J=1 draws") {
        auto m = tiny_student();
        Denoiser den(4, 2, 8, 4);
        GdpdMachinery mach(4, 4, 3);
        Mat z_short = RngStream(31).gaussian(3, 4);
        const std::vector<int> y = {0, 1, 0};

        RngStream rng_a(99);
        const double j3 = gdpd_loss_grad(m, den, sched10, mach, z_short, y, 3, 2, rng_a, 0.0, nullptr);
        RngStream rng_b(99);
        double mean = 0;
        for (int j = 0; j < 3; ++j)
            mean += gdpd_loss_grad(m, den, sched10, mach, z_short, y, 1, 2, rng_b, 0.0, nullptr) / 3.0;
        CHECK(j3 == doctest::Approx(mean).epsilon(1e-6));
    }

    SUBCASE("oracle chain: alpha=1, zero denoiser, unit-abar single step") {
        auto m = tiny_student();
        Denoiser den(4, 2, 8, 4);
        for (auto* l : {&den.in_proj, &den.time_proj, &den.mid1, &den.mid2, &den.out_proj}) {
            l->W.v.setZero();
            l->b.v.setZero();
        }
        GdpdMachinery mach(4, 4, 3);
        mach.adapter.alpha_logits.v.setConstant(1e3);
        auto degenerate = make_schedule(1, 1e-12, 1e-12);

        auto x = random_batch(3, 1, 6, 8);
        const std::vector<int> y = {0, 1, 0};
        Classifier::TrainCtx ctx;
        m.forward_train(x, ctx, false);
        Classifier::HeadCtx hctx;
        const double want = nn::cross_entropy(m.head_forward(ctx.tap, hctx), y, nullptr);

        RngStream rng(4);
        const double got = gdpd_loss(m, den, degenerate, mach, x, y, 1, 1, rng);
        CHECK(got == doctest::Approx(want).epsilon(1e-9));
    }

    SUBCASE("identical rng streams reproduce the loss bit-identically; different streams differ") {
        auto m = tiny_student();
        Denoiser den(4, 12, 8, 4);
        GdpdMachinery mach(4, 4, 3);
        auto x = random_batch(3, 1, 6, 8);
        const std::vector<int> y = {0, 1, 0};
        RngStream a(7), b(7), c(8);
        const double la = gdpd_loss(m, den, sched10, mach, x, y, 1, 3, a);
        const double lb = gdpd_loss(m, den, sched10, mach, x, y, 1, 3, b);
        const double lc = gdpd_loss(m, den, sched10, mach, x, y, 1, 3, c);
        CHECK(la == lb);
        CHECK(la != lc);
    }

    SUBCASE("posterior reconstructions differ across rng streams") {
        Denoiser den(4, 12, 8, 4);
        FusionAdapter ad(4, 4, 3);
        auto s = make_schedule(10, 1e-3, 0.1);
        Mat z = RngStream(3).gaussian(2, 4);
        RngStream a(1), b(2);
        Mat ra = posterior_sample(den, s, ad, z, 3, a);
        Mat rb = posterior_sample(den, s, ad, z, 3, b);
        CHECK((ra - rb).norm() > 0.0);
    }

    SUBCASE("end-to-end gradients match finite differences (matched dims)") {
        auto m = tiny_student();
        Denoiser den(4, 22, 8, 4);
        GdpdMachinery mach(4, 4, 5);
        auto x = random_batch(3, 1, 6, 14);
        const std::vector<int> y = {0, 1, 1};

        nn::ParamSet all = m.params();
        all.add(mach.params());
        all.zero_grads();

        Classifier::TrainCtx ctx;
        m.forward_train(x, ctx, false);
        RngStream rng(41);
        Mat dz_short;
        gdpd_loss_grad(m, den, sched10, mach, ctx.tap, y, 2, 2, rng, 1.0, &dz_short);
        m.backward_train(ctx, Mat(), dz_short);
        const Vec analytic = all.flatten_grads();

        auto loss = [&]() {
            Classifier::TrainCtx c2;
            m.forward_train(x, c2, false);
            RngStream r(41);
            return gdpd_loss_grad(m, den, sched10, mach, c2.tap, y, 2, 2, r, 0.0, nullptr);
        };
        CHECK(testutil::grad_check_excess(all, analytic, loss) <= 0.0);
    }

    SUBCASE("end-to-end gradients with dimension lift and back map") {
        auto m = tiny_student(3);  // student feature dim 3, teacher dim 6
        Denoiser den(6, 23, 8, 4);
        GdpdMachinery mach(6, 3, 5);
        REQUIRE(mach.adapter.projection.has_value());
        REQUIRE(mach.back_map.has_value());
        auto x = random_batch(2, 1, 5, 15);
        const std::vector<int> y = {1, 0};

        nn::ParamSet all = m.params();
        all.add(mach.params());
        all.zero_grads();

        Classifier::TrainCtx ctx;
        m.forward_train(x, ctx, false);
        RngStream rng(43);
        Mat dz_short;
        gdpd_loss_grad(m, den, sched10, mach, ctx.tap, y, 1, 2, rng, 1.0, &dz_short);
        m.backward_train(ctx, Mat(), dz_short);
        const Vec analytic = all.flatten_grads();

        auto loss = [&]() {
            Classifier::TrainCtx c2;
            m.forward_train(x, c2, false);
            RngStream r(43);
            return gdpd_loss_grad(m, den, sched10, mach, c2.tap, y, 1, 2, r, 0.0, nullptr);
        };
        CHECK(testutil::grad_check_excess(all, analytic, loss) <= 0.0);
    }

    SUBCASE("denoiser stays untouched by the gdpd gradient") {
        auto m = tiny_student();
        Denoiser den(4, 22, 8, 4);
        GdpdMachinery mach(4, 4, 5);
        auto dps = den.params();
        dps.zero_grads();
        Mat z_short = RngStream(3).gaussian(2, 4);
        RngStream rng(9);
        Mat dz;
        gdpd_loss_grad(m, den, sched10, mach, z_short, {0, 1}, 1, 3, rng, 1.0, &dz);
        CHECK(dps.flatten_grads().cwiseAbs().maxCoeff() == 0.0);
    }
}
