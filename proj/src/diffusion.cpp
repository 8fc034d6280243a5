#include "gdpd/diffusion.hpp"

#include <cmath>

namespace gdpd {

void NoiseSchedule::validate() const {
    if (steps < 1) throw ArgumentError("schedule needs T >= 1");
    for (int t = 1; t <= steps; ++t) {
        if (!(beta(t) > 0.0 && beta(t) < 1.0)) throw ArgumentError("beta out of (0,1)");
        if (t > 1 && !(alpha_bar(t) < alpha_bar(t - 1))) throw ArgumentError("alpha_bars not strictly decreasing");
    }
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end, ScheduleShape shape) {
    if (steps < 1) throw ArgumentError("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ArgumentError("make_schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.steps = steps;
    s.betas.resize(steps);
    if (shape == ScheduleShape::Linear) {
        for (int t = 0; t < steps; ++t)
            s.betas(t) = steps == 1 ? beta_start
                                    : beta_start + (beta_end - beta_start) * t / (steps - 1.0);
    } else {
        constexpr double offset = 0.008;
        auto f = [&](double t) {
            const double u = (t / steps + offset) / (1.0 + offset) * (M_PI / 2.0);
            return std::cos(u) * std::cos(u);
        };
        double abar_prev = 1.0;
        for (int t = 1; t <= steps; ++t) {
            const double abar = f(static_cast<double>(t)) / f(0.0);
            double beta = 1.0 - abar / abar_prev;
            beta = std::min(std::max(beta, 1e-8), 0.999);
            s.betas(t - 1) = beta;
            abar_prev *= 1.0 - beta;
        }
    }
    s.alphas = 1.0 - s.betas.array();
    s.alpha_bars.resize(steps);
    double acc = 1.0;
    for (int t = 0; t < steps; ++t) {
        acc *= s.alphas(t);
        s.alpha_bars(t) = acc;
    }
    s.validate();
    return s;
}

Mat forward_marginal(const Mat& z0, int t, const Mat& eps, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.steps) throw ArgumentError("forward_marginal: t out of range");
    const double ab = sched.alpha_bar(t);
    return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

// ---- denoiser -------------------------------------------------------------------

Denoiser::Denoiser(int d, std::uint64_t seed, int h, int td) : dim(d), hidden(h), time_dim(td) {
    if (d < 1 || h < 1 || td < 2 || td % 2 != 0) throw ArgumentError("denoiser: bad dimensions");
    RngStream rng = RngStream::child(seed, 0x64656e6f);
    in_proj.init(dim, hidden, rng, "den.in");
    time_proj.init(time_dim, hidden, rng, "den.time");
    mid1.init(hidden, hidden, rng, "den.mid1");
    mid2.init(hidden, hidden, rng, "den.mid2");
    out_proj.init(hidden, dim, rng, "den.out");
    n_params = params().count();
}

nn::ParamSet Denoiser::params() {
    nn::ParamSet ps;
    ps.add(in_proj.params());
    ps.add(time_proj.params());
    ps.add(mid1.params());
    ps.add(mid2.params());
    ps.add(out_proj.params());
    return ps;
}

Mat Denoiser::time_embedding(const std::vector<int>& t) const {
    const int half = time_dim / 2;
    Mat emb(static_cast<Eigen::Index>(t.size()), time_dim);
    for (std::size_t r = 0; r < t.size(); ++r) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
            emb(static_cast<Eigen::Index>(r), 2 * i) = std::sin(t[r] * freq);
            emb(static_cast<Eigen::Index>(r), 2 * i + 1) = std::cos(t[r] * freq);
        }
    }
    return emb;
}

Mat Denoiser::predict(const Mat& z_t, const std::vector<int>& t, Cache* cache) const {
    if (z_t.cols() != dim) throw ShapeError("denoiser: feature dimension mismatch");
    if (static_cast<Eigen::Index>(t.size()) != z_t.rows()) throw ShapeError("denoiser: step count mismatch");
    Mat temb = time_embedding(t);
    Mat pre1 = in_proj.fwd(z_t) + time_proj.fwd(temb);
    Mat h1 = nn::silu(pre1);
    Mat pre2 = mid1.fwd(h1);
    Mat h2 = nn::silu(pre2);
    Mat pre3 = mid2.fwd(h2);
    Mat h3 = nn::silu(pre3);
    Mat out = out_proj.fwd(h3);
    if (cache) {
        cache->x = z_t;
        cache->temb = std::move(temb);
        cache->pre1 = std::move(pre1);
        cache->h1 = std::move(h1);
        cache->pre2 = std::move(pre2);
        cache->h2 = std::move(h2);
        cache->pre3 = std::move(pre3);
        cache->h3 = std::move(h3);
    }
    return out;
}

Mat Denoiser::predict_step(const Mat& z_t, int t, Cache* cache) const {
    return predict(z_t, std::vector<int>(static_cast<std::size_t>(z_t.rows()), t), cache);
}

void Denoiser::backward(const Cache& cache, const Mat& deps, bool param_grads, Mat* dz) {
    Mat dh3;
    out_proj.bwd(cache.h3, deps, &dh3, param_grads);
    Mat dpre3 = dh3.cwiseProduct(nn::silu_grad(cache.pre3));
    Mat dh2;
    mid2.bwd(cache.h2, dpre3, &dh2, param_grads);
    Mat dpre2 = dh2.cwiseProduct(nn::silu_grad(cache.pre2));
    Mat dh1;
    mid1.bwd(cache.h1, dpre2, &dh1, param_grads);
    Mat dpre1 = dh1.cwiseProduct(nn::silu_grad(cache.pre1));
    if (param_grads) time_proj.bwd(cache.temb, dpre1, nullptr, true);
    in_proj.bwd(cache.x, dpre1, dz, param_grads);
}

// ---- loss ----------------------------------------------------------------------------

namespace {

struct Drawn {
    std::vector<int> t;
    Mat z_t, eps;
};

Drawn draw_noisy_batch(const Mat& z0, const NoiseSchedule& sched, RngStream& rng) {
    const auto B = z0.rows();
    Drawn d;
    d.t.resize(static_cast<std::size_t>(B));
    for (auto& ti : d.t) ti = static_cast<int>(rng.uniform_int(1, sched.steps));
    d.eps = rng.gaussian(B, z0.cols());
    d.z_t.resize(B, z0.cols());
    for (Eigen::Index i = 0; i < B; ++i) {
        const double ab = sched.alpha_bar(d.t[static_cast<std::size_t>(i)]);
        d.z_t.row(i) = std::sqrt(ab) * z0.row(i) + std::sqrt(1.0 - ab) * d.eps.row(i);
    }
    return d;
}

}  // namespace

double diffusion_loss(Denoiser& den, const Mat& z0, const NoiseSchedule& sched, RngStream& rng,
                      DiffusionLossCtx* ctx) {
    if (z0.rows() == 0) throw ArgumentError("diffusion_loss: empty batch");
    auto d = draw_noisy_batch(z0, sched, rng);
    Denoiser::Cache local;
    Denoiser::Cache* cache = ctx ? &ctx->cache : &local;
    const Mat eps_hat = den.predict(d.z_t, d.t, cache);
    const Mat resid = eps_hat - d.eps;
    const double loss = resid.squaredNorm() / static_cast<double>(z0.rows());
    if (ctx) {
        ctx->resid = resid;
        ctx->batch = static_cast<int>(z0.rows());
    }
    return loss;
}

void diffusion_loss_backward(Denoiser& den, const DiffusionLossCtx& ctx) {
    const Mat deps = (2.0 / ctx.batch) * ctx.resid;
    den.backward(ctx.cache, deps, /*param_grads=*/true, nullptr);
}

double diffusion_loss_with(const NoisePredictFn& predict, const Mat& z0, const NoiseSchedule& sched,
                           RngStream& rng) {
    if (z0.rows() == 0) throw ArgumentError("diffusion_loss: empty batch");
    auto d = draw_noisy_batch(z0, sched, rng);
    const Mat eps_hat = predict(d.z_t, d.t);
    return (eps_hat - d.eps).squaredNorm() / static_cast<double>(z0.rows());
}

// ---- sampler -------------------------------------------------------------------------

std::vector<int> ddim_timesteps(int steps, int nfe) {
    if (nfe < 1 || nfe > steps) throw ArgumentError("ddim_timesteps: need 1 <= nfe <= T");
    std::vector<int> out(static_cast<std::size_t>(nfe));
    for (int i = 0; i < nfe; ++i) {
        const double pos = static_cast<double>(steps) * (nfe - i) / nfe;
        out[static_cast<std::size_t>(i)] = std::max(1, static_cast<int>(std::llround(pos)));
    }
    return out;
}

DdimCoeffs ddim_coeffs(const NoiseSchedule& sched, int t, int t_prev) {
    if (!(t > t_prev && t_prev >= 0)) throw ArgumentError("ddim_step: need t > t_prev >= 0");
    if (t > sched.steps) throw ArgumentError("ddim_step: t out of range");
    const double ab_t = sched.alpha_bar(t);
    const double ab_p = sched.alpha_bar(t_prev);
    DdimCoeffs c;
    c.keep = std::sqrt(ab_p / ab_t);
    c.eps_coef = std::sqrt(1.0 - ab_p) - c.keep * std::sqrt(1.0 - ab_t);
    return c;
}

Mat ddim_step(Denoiser& den, const Mat& z_t, int t, int t_prev, const NoiseSchedule& sched) {
    const auto c = ddim_coeffs(sched, t, t_prev);
    return c.keep * z_t + c.eps_coef * den.predict_step(z_t, t);
}

Mat ddim_step_with(const NoisePredictFn& predict, const Mat& z_t, int t, int t_prev,
                   const NoiseSchedule& sched) {
    const auto c = ddim_coeffs(sched, t, t_prev);
    return c.keep * z_t +
           c.eps_coef * predict(z_t, std::vector<int>(static_cast<std::size_t>(z_t.rows()), t));
}

// ---- fusion adapter ---------------------------------------------------------------------

FusionAdapter::FusionAdapter(int tdim, int sdim, std::uint64_t seed)
    : teacher_dim(tdim), student_dim(sdim) {
    if (tdim < 1 || sdim < 1) throw ArgumentError("fusion adapter: bad dimensions");
    alpha_logits.init(1, tdim, "adapter.alpha_logits");
    if (sdim != tdim) {
        RngStream rng = RngStream::child(seed, 0x61646170);
        projection.emplace();
        projection->init(sdim, tdim, rng, "adapter.proj");
    }
}

nn::ParamSet FusionAdapter::params() {
    nn::ParamSet ps;
    ps.add(alpha_logits);
    if (projection) ps.add(projection->params());
    return ps;
}

Eigen::RowVectorXd FusionAdapter::alpha() const {
    return (1.0 / (1.0 + (-alpha_logits.v.row(0).array()).exp())).matrix();
}

Mat FusionAdapter::fuse_init(const Mat& z_short, RngStream& rng, FuseCtx* ctx) {
    if (z_short.cols() != student_dim) throw ShapeError("fuse_init: student dimension mismatch");
    const Mat z_proj = projection ? projection->fwd(z_short) : z_short;
    const Mat eps = rng.gaussian(z_short.rows(), teacher_dim);
    const Eigen::RowVectorXd a = alpha();
    const Eigen::RowVectorXd one_minus_a = Eigen::RowVectorXd::Ones(teacher_dim) - a;
    Mat out(z_proj.rows(), teacher_dim);
    for (Eigen::Index r = 0; r < out.rows(); ++r)
        out.row(r) = a.cwiseProduct(z_proj.row(r)) + one_minus_a.cwiseProduct(eps.row(r));
    if (ctx) {
        ctx->z_raw = z_short;
        ctx->z_proj = z_proj;
        ctx->eps = eps;
        ctx->out = out;
    }
    return out;
}

void FusionAdapter::fuse_backward(const FuseCtx& ctx, const Mat& dout, Mat* dz_short, bool param_grads) {
    const Eigen::RowVectorXd a = alpha();
    Mat dz_proj(dout.rows(), teacher_dim);
    for (Eigen::Index r = 0; r < dout.rows(); ++r) dz_proj.row(r) = dout.row(r).cwiseProduct(a);

    if (param_grads) {
        Eigen::RowVectorXd dalpha = Eigen::RowVectorXd::Zero(teacher_dim);
        for (Eigen::Index r = 0; r < dout.rows(); ++r)
            dalpha += dout.row(r).cwiseProduct(ctx.z_proj.row(r) - ctx.eps.row(r));
        alpha_logits.g.row(0) +=
            dalpha.cwiseProduct(a).cwiseProduct(Eigen::RowVectorXd::Ones(teacher_dim) - a);
    }

    if (projection)
        projection->bwd(ctx.z_raw, dz_proj, dz_short, param_grads);
    else if (dz_short)
        *dz_short = std::move(dz_proj);
}

// ---- posterior sampling ---------------------------------------------------------------------

Mat posterior_sample(Denoiser& den, const NoiseSchedule& sched, FusionAdapter& adapter,
                     const Mat& z_short, int nfe, RngStream& rng, ChainCtx* ctx) {
    if (nfe < 1) throw ArgumentError("posterior_sample: nfe must be >= 1");
    const auto steps = ddim_timesteps(sched.steps, nfe);

    FusionAdapter::FuseCtx local_fuse;
    Mat z = adapter.fuse_init(z_short, rng, ctx ? &ctx->fuse : &local_fuse);
    if (ctx) {
        ctx->steps = steps;
        ctx->coeffs.resize(steps.size());
        ctx->dcaches.resize(steps.size());
    }
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const int t = steps[i];
        const int t_prev = i + 1 < steps.size() ? steps[i + 1] : 0;
        const auto c = ddim_coeffs(sched, t, t_prev);
        Denoiser::Cache local_cache;
        Denoiser::Cache* cache = ctx ? &ctx->dcaches[i] : &local_cache;
        const Mat eps_hat = den.predict_step(z, t, cache);
        z = c.keep * z + c.eps_coef * eps_hat;
        if (!z.allFinite())
            throw NumericalError("posterior_sample: non-finite value at step t=" + std::to_string(t));
        if (ctx) ctx->coeffs[i] = c;
    }
    return z;
}

void posterior_backward(Denoiser& den, FusionAdapter& adapter, const ChainCtx& ctx, const Mat& dz_out,
                        Mat* dz_short, bool adapter_grads) {
    Mat dz = dz_out;
    for (std::size_t i = ctx.steps.size(); i-- > 0;) {
        const auto& c = ctx.coeffs[i];
        Mat dz_in;
        den.backward(ctx.dcaches[i], c.eps_coef * dz, /*param_grads=*/false, &dz_in);
        dz = c.keep * dz + dz_in;
    }
    adapter.fuse_backward(ctx.fuse, dz, dz_short, adapter_grads);
}

}  // namespace gdpd
