#pragma once

#include <optional>

#include "gdpd/classifier.hpp"
#include "gdpd/diffusion.hpp"

namespace gdpd {

// mean cross-entropy of the student on partial inputs (training-mode forward,
// running statistics untouched; value-only surface — training loops reuse
// forward_train directly so gradients share one pass)
double task_loss(Classifier& student, const Batch& x_e, const std::vector<int>& labels);

// Temperature-softened KL(teacher || student) with the standard tau^2
// scaling, averaged over the batch. dstudent (optional) receives the
// gradient w.r.t. the raw student logits.
double logit_kd_loss(const Mat& student_logits, const Mat& teacher_logits, double temperature,
                     Mat* dstudent = nullptr);

// Squared-error feature matching after an optional learned projection
// (identity when student and teacher dimensions agree): per-sample squared
// error summed over dimensions, averaged over the batch.
struct FeatureKd {
    std::optional<nn::Linear> projection;  // student_dim -> teacher_dim

    FeatureKd(int student_dim, int teacher_dim, std::uint64_t seed);
    nn::ParamSet params();
    double loss(const Mat& z_short, const Mat& z_long, Mat* dz_short = nullptr,
                bool param_grads = true);
};

// Monte Carlo GDPD loss: J posterior reconstructions per sample through the
// frozen denoiser, cross-entropy through the student head on each. back_map
// lifts reconstructions back to the student feature dimension when the
// teacher dimension differs.
struct GdpdMachinery {
    FusionAdapter adapter;
    std::optional<nn::Linear> back_map;  // teacher_dim -> student_dim

    GdpdMachinery(int teacher_dim, int student_dim, std::uint64_t seed);
    nn::ParamSet params();  // adapter + back_map, trained in phase 2
};

// Value-only surface matching the operation contract: computes
// z_short = S^feat(x_e) itself. nfe == 0 disables the loss (exactly 0, no
// sampling, no rng consumption).
double gdpd_loss(Classifier& student, Denoiser& denoiser, const NoiseSchedule& schedule,
                 GdpdMachinery& m, const Batch& x_e, const std::vector<int>& labels, int j_samples,
                 int nfe, RngStream& rng);

// Training-path version on a precomputed (training-mode) z_short. Accumulates
// gradients scaled by grad_scale into the student head, adapter and back_map,
// and returns dz_short for the caller to push through S^feat. The denoiser
// receives no gradient.
double gdpd_loss_grad(Classifier& student, Denoiser& denoiser, const NoiseSchedule& schedule,
                      GdpdMachinery& m, const Mat& z_short, const std::vector<int>& labels,
                      int j_samples, int nfe, RngStream& rng, double grad_scale, Mat* dz_short);

}  // namespace gdpd
