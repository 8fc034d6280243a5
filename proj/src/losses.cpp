#include "gdpd/losses.hpp"

#include <cmath>

namespace gdpd {

double task_loss(Classifier& student, const Batch& x_e, const std::vector<int>& labels) {
    Classifier::TrainCtx ctx;
    const Mat logits = student.forward_train(x_e, ctx, /*update_running=*/false);
    return nn::cross_entropy(logits, labels, nullptr);
}

namespace {

Mat softmax_tempered(const Mat& logits, double tau) {
    return nn::softmax_rows(logits / tau);
}

}  // namespace

double logit_kd_loss(const Mat& student_logits, const Mat& teacher_logits, double temperature,
                     Mat* dstudent) {
    if (temperature <= 0.0) throw ArgumentError("logit_kd_loss: temperature must be positive");
    if (student_logits.rows() != teacher_logits.rows() || student_logits.cols() != teacher_logits.cols())
        throw ShapeError("logit_kd_loss: logit shape mismatch");
    const auto B = student_logits.rows();
    const Mat p = softmax_tempered(teacher_logits, temperature);
    const Mat q = softmax_tempered(student_logits, temperature);
    double kl = 0.0;
    for (Eigen::Index r = 0; r < B; ++r)
        for (Eigen::Index c = 0; c < p.cols(); ++c)
            if (p(r, c) > 0.0) kl += p(r, c) * (std::log(p(r, c)) - std::log(std::max(q(r, c), 1e-300)));
    const double loss = temperature * temperature * kl / static_cast<double>(B);
    if (dstudent) *dstudent = (temperature / static_cast<double>(B)) * (q - p);
    return loss;
}

FeatureKd::FeatureKd(int student_dim, int teacher_dim, std::uint64_t seed) {
    if (student_dim != teacher_dim) {
        RngStream rng = RngStream::child(seed, 0x666b6470);
        projection.emplace();
        projection->init(student_dim, teacher_dim, rng, "feature_kd.proj");
    }
}

nn::ParamSet FeatureKd::params() {
    nn::ParamSet ps;
    if (projection) ps.add(projection->params());
    return ps;
}

double FeatureKd::loss(const Mat& z_short, const Mat& z_long, Mat* dz_short, bool param_grads) {
    const Mat zp = projection ? projection->fwd(z_short) : z_short;
    if (zp.rows() != z_long.rows() || zp.cols() != z_long.cols())
        throw ShapeError("feature_kd_loss: feature shape mismatch");
    const auto B = static_cast<double>(z_short.rows());
    const Mat resid = zp - z_long;
    const double loss = resid.squaredNorm() / B;
    if (dz_short || param_grads) {
        const Mat dzp = (2.0 / B) * resid;
        if (projection)
            projection->bwd(z_short, dzp, dz_short, param_grads);
        else if (dz_short)
            *dz_short = dzp;
    }
    return loss;
}

GdpdMachinery::GdpdMachinery(int teacher_dim, int student_dim, std::uint64_t seed)
    : adapter(teacher_dim, student_dim, seed) {
    if (teacher_dim != student_dim) {
        RngStream rng = RngStream::child(seed, 0x626d6170);
        back_map.emplace();
        back_map->init(teacher_dim, student_dim, rng, "gdpd.back_map");
    }
}

nn::ParamSet GdpdMachinery::params() {
    nn::ParamSet ps;
    ps.add(adapter.params());
    if (back_map) ps.add(back_map->params());
    return ps;
}

namespace {

struct SampleCtx {
    ChainCtx chain;
    Mat recon;        // teacher-dim reconstruction
    Mat head_in;      // after back_map (or recon itself)
    Classifier::HeadCtx head;
    Mat dlogits;
};

}  // namespace

double gdpd_loss_grad(Classifier& student, Denoiser& denoiser, const NoiseSchedule& schedule,
                      GdpdMachinery& m, const Mat& z_short, const std::vector<int>& labels,
                      int j_samples, int nfe, RngStream& rng, double grad_scale, Mat* dz_short) {
    if (nfe == 0) {  // disabled: contributes exactly zero, consumes nothing
        if (dz_short) dz_short->setZero(z_short.rows(), z_short.cols());
        return 0.0;
    }
    if (j_samples < 1) throw ArgumentError("gdpd_loss: J must be >= 1");
    const bool want_grad = grad_scale != 0.0 || dz_short;

    double loss = 0.0;
    if (dz_short) dz_short->setZero(z_short.rows(), z_short.cols());
    for (int j = 0; j < j_samples; ++j) {
        SampleCtx sc;
        sc.recon = posterior_sample(denoiser, schedule, m.adapter, z_short, nfe, rng,
                                    want_grad ? &sc.chain : nullptr);
        sc.head_in = m.back_map ? m.back_map->fwd(sc.recon) : sc.recon;
        const Mat logits = student.head_forward(sc.head_in, sc.head, /*train=*/true);
        loss += nn::cross_entropy(logits, labels, want_grad ? &sc.dlogits : nullptr);

        if (want_grad) {
            const double scale = grad_scale / j_samples;
            Mat dhead_in;
            student.head_backward(sc.head, scale * sc.dlogits, &dhead_in);
            Mat drecon;
            if (m.back_map)
                m.back_map->bwd(sc.recon, dhead_in, &drecon, true);
            else
                drecon = std::move(dhead_in);
            Mat dz;
            posterior_backward(denoiser, m.adapter, sc.chain, drecon, &dz, true);
            if (dz_short) *dz_short += dz;
        }
    }
    return loss / j_samples;
}

double gdpd_loss(Classifier& student, Denoiser& denoiser, const NoiseSchedule& schedule,
                 GdpdMachinery& m, const Batch& x_e, const std::vector<int>& labels, int j_samples,
                 int nfe, RngStream& rng) {
    if (nfe == 0) return 0.0;
    Classifier::TrainCtx ctx;
    student.forward_train(x_e, ctx, /*update_running=*/false);
    return gdpd_loss_grad(student, denoiser, schedule, m, ctx.tap, labels, j_samples, nfe, rng,
                          /*grad_scale=*/0.0, nullptr);
}

}  // namespace gdpd
