#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "gdpd/nn.hpp"

namespace gdpd {

enum class ScheduleShape { Linear, Cosine };

struct NoiseSchedule {
    int steps = 0;  // T
    Vec betas, alphas, alpha_bars;  // 1-based step t lives at index t-1

    double beta(int t) const { return betas(t - 1); }
    double alpha(int t) const { return alphas(t - 1); }
    double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars(t - 1); }
    void validate() const;
};

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end,
                            ScheduleShape shape = ScheduleShape::Linear);

// closed-form marginal z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps
Mat forward_marginal(const Mat& z0, int t, const Mat& eps, const NoiseSchedule& sched);

// ---- denoiser -----------------------------------------------------------------

// Time-conditioned noise predictor: three hidden layers of silu units, with a
// projected sinusoidal step embedding added into the first pre-activation.
struct Denoiser {
    int dim = 0, hidden = 256, time_dim = 64;
    nn::Linear in_proj, time_proj, mid1, mid2, out_proj;
    std::size_t n_params = 0;  // reported on construction

    Denoiser(int dim, std::uint64_t seed, int hidden = 256, int time_dim = 64);
    nn::ParamSet params();

    Mat time_embedding(const std::vector<int>& t) const;

    struct Cache {
        Mat x, temb;
        Mat pre1, h1, pre2, h2, pre3, h3;
    };
    Mat predict(const Mat& z_t, const std::vector<int>& t, Cache* cache = nullptr) const;
    Mat predict_step(const Mat& z_t, int t, Cache* cache = nullptr) const;
    void backward(const Cache& cache, const Mat& deps, bool param_grads, Mat* dz);
};

// pluggable predictor used by the loss seam (oracle denoisers in tests)
using NoisePredictFn = std::function<Mat(const Mat& z_t, const std::vector<int>& t)>;

// epsilon-prediction loss: per-sample squared error summed over dimensions,
// averaged over the batch. Draw order per call: the B step indices (uniform
// in {1..T}), then the B x D noise matrix.
struct DiffusionLossCtx {
    Denoiser::Cache cache;
    Mat resid;  // eps_hat - eps
    int batch = 0;
};
double diffusion_loss(Denoiser& den, const Mat& z0, const NoiseSchedule& sched, RngStream& rng,
                      DiffusionLossCtx* ctx = nullptr);
void diffusion_loss_backward(Denoiser& den, const DiffusionLossCtx& ctx);
double diffusion_loss_with(const NoisePredictFn& predict, const Mat& z0, const NoiseSchedule& sched,
                           RngStream& rng);

// ---- deterministic sampler --------------------------------------------------------

// nfe steps evenly spaced over {1..T}, descending, first entry T; the
// terminal target 0 is implicit in the sampling loop.
std::vector<int> ddim_timesteps(int steps, int nfe);

// z_prev = keep * z_t + eps_coef * eps_hat, with abar(0) == 1
struct DdimCoeffs {
    double keep = 0, eps_coef = 0;
};
DdimCoeffs ddim_coeffs(const NoiseSchedule& sched, int t, int t_prev);

Mat ddim_step(Denoiser& den, const Mat& z_t, int t, int t_prev, const NoiseSchedule& sched);
Mat ddim_step_with(const NoisePredictFn& predict, const Mat& z_t, int t, int t_prev,
                   const NoiseSchedule& sched);

// ---- fusion adapter ------------------------------------------------------------------

// Learnable feature-wise fusion weight alpha = sigmoid(alpha_logits), plus an
// optional linear lift from student to teacher dimension.
struct FusionAdapter {
    int teacher_dim = 0, student_dim = 0;
    nn::Param alpha_logits;  // 1 x teacher_dim, starts at logit(0.5) = 0
    std::optional<nn::Linear> projection;

    FusionAdapter(int teacher_dim, int student_dim, std::uint64_t seed);
    nn::ParamSet params();
    Eigen::RowVectorXd alpha() const;

    struct FuseCtx {
        Mat z_raw, z_proj, eps, out;
    };
    // z_long_T = alpha .* proj(z_short) + (1 - alpha) .* eps
    Mat fuse_init(const Mat& z_short, RngStream& rng, FuseCtx* ctx = nullptr);
    void fuse_backward(const FuseCtx& ctx, const Mat& dout, Mat* dz_short, bool param_grads = true);
};

// ---- posterior sampling ----------------------------------------------------------------

struct ChainCtx {
    FusionAdapter::FuseCtx fuse;
    std::vector<int> steps;
    std::vector<DdimCoeffs> coeffs;
    std::vector<Denoiser::Cache> dcaches;
};

// Fusion-initialized reverse chain down to step 0. Differentiable w.r.t.
// z_short, alpha and the projection; denoiser parameters never receive
// gradients here (they are frozen by the training phase contract).
Mat posterior_sample(Denoiser& den, const NoiseSchedule& sched, FusionAdapter& adapter,
                     const Mat& z_short, int nfe, RngStream& rng, ChainCtx* ctx = nullptr);
void posterior_backward(Denoiser& den, FusionAdapter& adapter, const ChainCtx& ctx, const Mat& dz_out,
                        Mat* dz_short, bool adapter_grads = true);

}  // namespace gdpd
