#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gdpd/diffusion.hpp"
#include "test_util.hpp"

using namespace gdpd;

TEST_CASE("make_schedule") {
    SUBCASE("default linear schedule reaches a near-Gaussian terminal marginal") {
        auto s = make_schedule(1000, 1e-4, 0.02);
        // independent cumulative-product oracle
        double abar = 1.0;
        for (int t = 1; t <= 1000; ++t) abar *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0);
        CHECK(s.alpha_bar(1000) == doctest::Approx(abar).epsilon(1e-12));
        CHECK(s.alpha_bar(1000) < 1e-4);
    }
    SUBCASE("single step") {
        auto s = make_schedule(1, 0.1, 0.2);
        CHECK(s.alpha_bar(1) == doctest::Approx(1.0 - 0.1));
    }
    SUBCASE("alpha_bars strictly decreasing, first equals alpha_1") {
        for (auto shape : {ScheduleShape::Linear, ScheduleShape::Cosine}) {
            auto s = make_schedule(50, 1e-3, 0.1, shape);
            CHECK(s.alpha_bar(1) == doctest::Approx(s.alpha(1)));
            for (int t = 2; t <= 50; ++t) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
            for (int t = 1; t <= 50; ++t) {
                CHECK(s.beta(t) > 0.0);
                CHECK(s.beta(t) < 1.0);
            }
        }
    }
    SUBCASE("bounds violations") {
        CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.02), ArgumentError);
        CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), ArgumentError);
        CHECK_THROWS_AS(make_schedule(10, 0.03, 0.02), ArgumentError);
        CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), ArgumentError);
    }
}

TEST_CASE("forward_marginal") {
    auto s = make_schedule(1000, 1e-4, 0.02);
    RngStream rng(3);
    Mat z0 = rng.gaussian(2, 4);

    SUBCASE("eps = 0 collapses to sqrt(abar_t) z0") {
        Mat zt = forward_marginal(z0, 500, Mat::Zero(2, 4), s);
        CHECK((zt - std::sqrt(s.alpha_bar(500)) * z0).cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("terminal step is noise-dominated") {
        Mat eps = rng.gaussian(2, 4);
        Mat zt = forward_marginal(z0, 1000, eps, s);
        // || z_T - sqrt(1-abar)*eps || = sqrt(abar)*||z0||, and abar_T ~ 4e-5
        CHECK((zt - eps).norm() <=
              std::sqrt(s.alpha_bar(1000)) * z0.norm() + (1.0 - std::sqrt(1.0 - s.alpha_bar(1000))) * eps.norm() + 1e-9);
    }
    SUBCASE("t out of range") {
        CHECK_THROWS_AS(forward_marginal(z0, 0, z0, s), ArgumentError);
        CHECK_THROWS_AS(forward_marginal(z0, 1001, z0, s), ArgumentError);
    }
    SUBCASE("monte carlo element statistics at several steps") {
        const int n = 100000;
        Mat z0_row = Mat::Constant(1, 1, 0.7);
        for (int t : {1, 250, 600, 1000}) {
            RngStream r2(100 + t);
            double sum = 0, sum2 = 0;
            for (int i = 0; i < n; ++i) {
                const double v = forward_marginal(z0_row, t, r2.gaussian(1, 1), s)(0, 0);
                sum += v;
                sum2 += v * v;
            }
            const double mean = sum / n;
            const double var = sum2 / n - mean * mean;
            const double want_mean = std::sqrt(s.alpha_bar(t)) * 0.7;
            const double want_var = 1.0 - s.alpha_bar(t);
            const double se_mean = std::sqrt(want_var / n);
            const double se_var = want_var * std::sqrt(2.0 / (n - 1));
            CHECK(std::abs(mean - want_mean) < 3 * se_mean + 1e-12);
            CHECK(std::abs(var - want_var) < 3 * se_var + 1e-12);
        }
    }
}

TEST_CASE("diffusion_loss") {
    auto s = make_schedule(100, 1e-3, 0.05);

    SUBCASE("oracle denoiser returning the true noise gives zero loss") {
        RngStream rng(5), replay(5);
        const int B = 16, D = 6;
        Mat z0 = RngStream(9).gaussian(B, D);
        // replay the documented draw order: B step indices, then the noise
        std::vector<Mat> noises;
        std::vector<int> ts(B);
        for (int i = 0; i < B; ++i) ts[i] = static_cast<int>(replay.uniform_int(1, s.steps));
        Mat eps = replay.gaussian(B, D);
        auto oracle = [&](const Mat&, const std::vector<int>&) { return eps; };
        CHECK(diffusion_loss_with(oracle, z0, s, rng) < 1e-20);
    }
    SUBCASE("zero denoiser loss is approximately D") {
        RngStream rng(6);
        const int B = 4096, D = 8;
        Mat z0 = Mat::Zero(B, D);  // z_t is pure scaled noise; E||eps||^2 = D
        auto zero = [&](const Mat& z, const std::vector<int>&) { return Mat::Zero(z.rows(), z.cols()); };
        const double loss = diffusion_loss_with(zero, z0, s, rng);
        const double se = std::sqrt(2.0 * D / B);
        CHECK(std::abs(loss - D) < 4 * se);
    }
    SUBCASE("denoiser parameter gradients match finite differences") {
        auto sched = make_schedule(10, 1e-3, 0.05);
        Denoiser den(4, 11, 8, 4);
        Mat z0 = RngStream(12).gaussian(3, 4);

        auto ps = den.params();
        ps.zero_grads();
        RngStream rng(77);
        DiffusionLossCtx ctx;
        diffusion_loss(den, z0, sched, rng, &ctx);
        diffusion_loss_backward(den, ctx);
        const Vec analytic = ps.flatten_grads();

        auto loss = [&]() {
            RngStream r(77);  // identical draws every evaluation
            return diffusion_loss(den, z0, sched, r, nullptr);
        };
        CHECK(testutil::grad_check_excess(ps, analytic, loss) <= 0.0);
    }
    SUBCASE("empty batch rejected") {
        Denoiser den(4, 11, 8, 4);
        RngStream rng(1);
        CHECK_THROWS_AS(diffusion_loss(den, Mat(0, 4), s, rng), ArgumentError);
    }
}

TEST_CASE("denoiser reports its parameter count") {
    Denoiser den(100, 1);  // defaults: hidden 256, time embedding 64
    CHECK(den.n_params == den.params().count());
    // within the intended ~0.2M budget for 100-dim features
    CHECK(den.n_params > 180000);
    CHECK(den.n_params < 220000);
}

TEST_CASE("ddim_timesteps") {
    CHECK(ddim_timesteps(1000, 5) == std::vector<int>{1000, 800, 600, 400, 200});
    CHECK(ddim_timesteps(7, 7) == std::vector<int>{7, 6, 5, 4, 3, 2, 1});
    CHECK(ddim_timesteps(1000, 1) == std::vector<int>{1000});
    auto ts = ddim_timesteps(10, 3);
    CHECK(ts.front() == 10);
    for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
    CHECK_THROWS_AS(ddim_timesteps(10, 0), ArgumentError);
    CHECK_THROWS_AS(ddim_timesteps(10, 11), ArgumentError);
}

TEST_CASE("ddim_step") {
    auto s = make_schedule(20, 1e-3, 0.1);
    RngStream rng(21);
    Mat z0 = rng.gaussian(3, 5);

    SUBCASE("oracle denoiser recovers z0 in one step to t_prev = 0") {
        for (int t = 1; t <= 20; ++t) {
            Mat eps = RngStream(300 + t).gaussian(3, 5);
            Mat zt = forward_marginal(z0, t, eps, s);
            auto oracle = [&](const Mat&, const std::vector<int>&) { return eps; };
            Mat rec = ddim_step_with(oracle, zt, t, 0, s);
            CHECK((rec - z0).cwiseAbs().maxCoeff() < 1e-6);
        }
    }
    SUBCASE("degenerate and disordered steps rejected") {
        Denoiser den(5, 2, 8, 4);
        CHECK_THROWS_AS(ddim_step(den, z0, 5, 5, s), ArgumentError);
        CHECK_THROWS_AS(ddim_step(den, z0, 5, 7, s), ArgumentError);
        CHECK_THROWS_AS(ddim_step(den, z0, 21, 0, s), ArgumentError);
    }
    SUBCASE("deterministic: identical calls produce bit-identical outputs") {
        Denoiser den(5, 2, 8, 4);
        Mat a = ddim_step(den, z0, 9, 4, s);
        Mat b = ddim_step(den, z0, 9, 4, s);
        CHECK(a == b);
    }
}

TEST_CASE("fuse_init") {
    const int D = 6;
    RngStream zr(31);
    Mat z = zr.gaussian(4, D);

    SUBCASE("alpha -> 1 passes the feature through") {
        FusionAdapter ad(D, D, 1);
        ad.alpha_logits.v.setConstant(40.0);
        RngStream rng(2);
        Mat out = ad.fuse_init(z, rng);
        CHECK((out - z).cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("alpha -> 0 returns pure noise") {
        FusionAdapter ad(D, D, 1);
        ad.alpha_logits.v.setConstant(-40.0);
        RngStream rng(2), replay(2);
        Mat out = ad.fuse_init(z, rng);
        Mat eps = replay.gaussian(4, D);
        CHECK((out - eps).cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("alpha = 0.5 mean over many draws approaches 0.5 z") {
        FusionAdapter ad(D, 1, 1);  // projection 1 -> D exercised too
        CHECK(ad.projection.has_value());
        FusionAdapter same(D, D, 1);
        Mat zrow = Mat::Constant(1, D, 1.4);
        RngStream rng(8);
        const int n = 100000;
        Mat acc = Mat::Zero(1, D);
        for (int i = 0; i < n; ++i) acc += same.fuse_init(zrow, rng);
        acc /= n;
        const double se = 0.5 / std::sqrt(static_cast<double>(n));
        for (int j = 0; j < D; ++j) CHECK(std::abs(acc(0, j) - 0.7) < 3 * se + 1e-12);
    }
    SUBCASE("fusion gradients match finite differences") {
        FusionAdapter ad(5, 3, 7);
        Mat zs = RngStream(41).gaussian(2, 3);
        auto ps = ad.params();
        ps.zero_grads();
        RngStream rng(9);
        FusionAdapter::FuseCtx ctx;
        Mat out = ad.fuse_init(zs, rng, &ctx);
        Mat dz;
        ad.fuse_backward(ctx, 2.0 * out, &dz, true);  // loss = ||out||^2
        const Vec analytic = ps.flatten_grads();
        auto loss = [&]() {
            RngStream r(9);
            return ad.fuse_init(zs, r).squaredNorm();
        };
        CHECK(testutil::grad_check_excess(ps, analytic, loss) <= 0.0);
        CHECK(testutil::grad_check_matrix_excess(zs, dz, loss) <= 0.0);
    }
}

TEST_CASE("posterior_sample") {
    SUBCASE("deterministic given (z_short, seed)") {
        auto s = make_schedule(50, 1e-3, 0.05);
        Denoiser den(4, 5, 16, 8);
        FusionAdapter ad(4, 4, 5);
        Mat z = RngStream(3).gaussian(2, 4);
        RngStream r1(19), r2(19);
        Mat a = posterior_sample(den, s, ad, z, 5, r1);
        Mat b = posterior_sample(den, s, ad, z, 5, r2);
        CHECK(a == b);
        RngStream r3(20);
        CHECK(posterior_sample(den, s, ad, z, 5, r3) != a);
    }
    SUBCASE("hand-unrolled two-step trace with a zero denoiser and alpha = 1") {
        auto s = make_schedule(10, 1e-3, 0.1);
        Denoiser den(4, 5, 8, 4);
        for (auto& l : {&den.in_proj, &den.time_proj, &den.mid1, &den.mid2, &den.out_proj}) {
            l->W.v.setZero();
            l->b.v.setZero();
        }
        FusionAdapter ad(4, 4, 5);
        ad.alpha_logits.v.setConstant(1e3);
        Mat z = RngStream(3).gaussian(2, 4);
        RngStream rng(1);
        Mat out = posterior_sample(den, s, ad, z, 2, rng);
        // eps_hat == 0: each step multiplies by sqrt(abar_prev/abar_t); the
        // product telescopes to 1/sqrt(abar_T)
        Mat want = z / std::sqrt(s.alpha_bar(10));
        CHECK((out - want).cwiseAbs().maxCoeff() < 1e-9);
    }
    SUBCASE("chain gradient w.r.t. z_short matches finite differences") {
        auto s = make_schedule(10, 1e-3, 0.1);
        Denoiser den(4, 7, 8, 4);
        FusionAdapter ad(4, 4, 7);
        ad.alpha_logits.v.setConstant(0.3);
        Mat z = RngStream(13).gaussian(2, 4);

        ChainCtx ctx;
        RngStream rng(55);
        Mat out = posterior_sample(den, s, ad, z, 2, rng, &ctx);
        Mat dz;
        auto ps = ad.params();
        ps.zero_grads();
        posterior_backward(den, ad, ctx, 2.0 * out, &dz, true);
        CHECK(dz.cwiseAbs().maxCoeff() > 0.0);
        const Vec analytic_adapter = ps.flatten_grads();

        auto loss = [&]() {
            RngStream r(55);
            return posterior_sample(den, s, ad, z, 2, r).squaredNorm();
        };
        CHECK(testutil::grad_check_matrix_excess(z, dz, loss) <= 0.0);
        CHECK(testutil::grad_check_excess(ps, analytic_adapter, loss) <= 0.0);
    }
    SUBCASE("denoiser parameters stay frozen through posterior backward") {
        auto s = make_schedule(10, 1e-3, 0.1);
        Denoiser den(4, 7, 8, 4);
        FusionAdapter ad(4, 4, 7);
        Mat z = RngStream(13).gaussian(2, 4);
        ChainCtx ctx;
        RngStream rng(55);
        Mat out = posterior_sample(den, s, ad, z, 2, rng, &ctx);
        auto dps = den.params();
        dps.zero_grads();
        Mat dz;
        posterior_backward(den, ad, ctx, 2.0 * out, &dz, true);
        CHECK(dps.flatten_grads().cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("non-finite intermediates raise a numerical error naming the step") {
        auto s = make_schedule(10, 1e-3, 0.1);
        Denoiser den(4, 7, 8, 4);
        den.out_proj.b.v.setConstant(1e170);  // first step stays finite
        den.in_proj.W.v.setConstant(1e170);   // second step overflows
        FusionAdapter ad(4, 4, 7);
        Mat z = RngStream(13).gaussian(2, 4);
        RngStream rng(1);
        CHECK_THROWS_WITH_AS(posterior_sample(den, s, ad, z, 2, rng), doctest::Contains("step t="),
                             NumericalError);
    }
}

namespace {

// small training helper for the desk-scale prior experiments
void train_denoiser(Denoiser& den, const Mat& data, const NoiseSchedule& sched, int iters, int batch,
                    double lr, std::uint64_t seed) {
    nn::Adam opt(den.params(), lr);
    RngStream rng(seed);
    const auto n = data.rows();
    for (int it = 0; it < iters; ++it) {
        if (it == iters / 2) opt.lr = lr * 0.3;
        if (it == 3 * iters / 4) opt.lr = lr * 0.1;
        Mat z0(batch, data.cols());
        for (int i = 0; i < batch; ++i) z0.row(i) = data.row(rng.uniform_int(0, n - 1));
        den.params().zero_grads();
        DiffusionLossCtx ctx;
        diffusion_loss(den, z0, sched, rng, &ctx);
        diffusion_loss_backward(den, ctx);
        opt.step();
    }
}

}  // namespace

TEST_CASE("trained prior: posterior samples land on the cluster manifold") {
    const int D = 8;
    const double sigma = 0.05;
    Mat mu0 = Mat::Constant(1, D, 2.0), mu1 = Mat::Constant(1, D, -2.0);
    RngStream gen(101);
    const int n = 500;
    Mat data(n, D);
    for (int i = 0; i < n; ++i)
        data.row(i) = (i % 2 == 0 ? mu0 : mu1) + sigma * gen.gaussian(1, D);

    auto sched = make_schedule(100, 1e-3, 0.1);
    Denoiser den(D, 303, 64, 16);
    train_denoiser(den, data, sched, 8000, 128, 1.5e-3, 404);

    RngStream check_rng(77);
    double final_loss = 0;
    for (int rep = 0; rep < 20; ++rep) final_loss += diffusion_loss(den, data, sched, check_rng) / 20;
    final_loss /= D;  // per-dimension residual
    CHECK(final_loss < 0.05);

    FusionAdapter ad(D, D, 1);  // alpha starts at 0.5
    RngStream rng(505);
    Mat inputs(200, D);
    for (int i = 0; i < 200; ++i) inputs.row(i) = data.row(rng.uniform_int(0, n - 1));
    Mat out = posterior_sample(den, sched, ad, inputs, 10, rng);
    int hits = 0;
    const double radius = 3.0 * sigma * std::sqrt(static_cast<double>(D));
    for (int i = 0; i < 200; ++i) {
        const double d0 = (out.row(i) - mu0).norm();
        const double d1 = (out.row(i) - mu1).norm();
        if (std::min(d0, d1) <= radius) ++hits;
    }
    CHECK(hits >= 190);  // >= 95% of inputs
}

TEST_CASE("trained prior: unconditional sampling recovers mixture weights") {
    const int D = 8;
    Mat mu0 = Mat::Constant(1, D, 2.0), mu1 = Mat::Constant(1, D, -2.0);
    RngStream gen(111);
    const int n = 500;
    Mat data(n, D);
    int n0 = 0;
    for (int i = 0; i < n; ++i) {
        const bool first = gen.uniform() < 0.65;
        n0 += first;
        data.row(i) = (first ? mu0 : mu1) + 0.05 * gen.gaussian(1, D);
    }
    const double w0 = static_cast<double>(n0) / n;

    auto sched = make_schedule(100, 1e-3, 0.1);
    Denoiser den(D, 808, 64, 16);
    train_denoiser(den, data, sched, 4000, 128, 1e-3, 909);

    // alpha -> 0 reduces fusion to pure noise: the unconditional path
    FusionAdapter ad(D, D, 1);
    ad.alpha_logits.v.setConstant(-40.0);
    RngStream rng(606);
    Mat zin = Mat::Zero(1000, D);
    Mat samples = posterior_sample(den, sched, ad, zin, 25, rng);
    int c0 = 0;
    for (int i = 0; i < 1000; ++i)
        c0 += ((samples.row(i) - mu0).norm() < (samples.row(i) - mu1).norm());
    CHECK(std::abs(c0 / 1000.0 - w0) < 0.1);
}
