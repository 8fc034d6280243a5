#include "gdpd/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace gdpd {

void TrainSchedule::validate() const {
    if (total_epochs < 1) throw ArgumentError("total_epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs > total_epochs)
        throw ArgumentError("warmup epoch must satisfy 0 <= E_warm <= total_epochs");
    if (j_samples < 1) throw ArgumentError("J must be >= 1");
    if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
    if (nfe < 0 || nfe > diffusion_steps) throw ArgumentError("nfe must be in [0, T]");
    if (lambda_task < 0 || lambda_kd < 0) throw ArgumentError("loss weights must be >= 0");
    if (temperature <= 0) throw ArgumentError("temperature must be positive");
    if (teacher_inits < 1) throw ArgumentError("teacher_inits must be >= 1");
}

double TrainSchedule::lr_at(int epoch) const {
    double v = lr;
    for (int d : lr_decay_epochs)
        if (epoch >= d) v *= lr_decay_factor;
    return v;
}

BaselineMethod baseline_from_string(const std::string& s) {
    if (s == "base") return BaselineMethod::Base;
    if (s == "logit-kd") return BaselineMethod::LogitKd;
    if (s == "feature-kd") return BaselineMethod::FeatureKd;
    throw ArgumentError("unknown baseline method: " + s);
}

std::string baseline_to_string(BaselineMethod m) {
    switch (m) {
        case BaselineMethod::Base: return "base";
        case BaselineMethod::LogitKd: return "logit-kd";
        case BaselineMethod::FeatureKd: return "feature-kd";
    }
    return "?";
}

void write_epoch_log(const std::vector<EpochLogRow>& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write epoch log: " + path);
    out << "epoch\tphase\ttask_loss\tdiffusion_loss\tgdpd_loss\tval_auc_prc\tlr\n";
    char buf[256];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%d\t%d\t%.9g\t%.9g\t%.9g\t%.9g\t%.9g\n", r.epoch, r.phase,
                      r.task_loss, r.diffusion_loss, r.gdpd_loss, r.val_auc_prc, r.lr);
        out << buf;
    }
}

std::vector<EpochLogRow> read_epoch_log(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read epoch log: " + path);
    std::vector<EpochLogRow> rows;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        EpochLogRow r;
        ss >> r.epoch >> r.phase >> r.task_loss >> r.diffusion_loss >> r.gdpd_loss >> r.val_auc_prc >> r.lr;
        rows.push_back(r);
    }
    return rows;
}

Mat TeacherFeatureCache::gather_features(const std::vector<int>& idx) const {
    Mat out(static_cast<Eigen::Index>(idx.size()), features.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const int row = row_of[static_cast<std::size_t>(idx[i])];
        if (row < 0) throw ArgumentError("teacher cache: index off the train split");
        out.row(static_cast<Eigen::Index>(i)) = features.row(row);
    }
    return out;
}

Mat TeacherFeatureCache::gather_logits(const std::vector<int>& idx) const {
    Mat out(static_cast<Eigen::Index>(idx.size()), logits.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const int row = row_of[static_cast<std::size_t>(idx[i])];
        if (row < 0) throw ArgumentError("teacher cache: index off the train split");
        out.row(static_cast<Eigen::Index>(i)) = logits.row(row);
    }
    return out;
}

TeacherFeatureCache cache_teacher_features(Classifier& teacher, const TimeSeriesDataset& full,
                                           int feature_layer) {
    const auto train_idx = full.indices_of(Split::Train);
    if (train_idx.empty()) throw ArgumentError("cache_teacher_features: empty train split");

    TeacherFeatureCache cache;
    cache.feature_layer = feature_layer;
    cache.row_of.assign(full.size(), -1);
    cache.features.resize(static_cast<Eigen::Index>(train_idx.size()),
                          teacher.spec().feature_dim(feature_layer));
    cache.logits.resize(static_cast<Eigen::Index>(train_idx.size()), teacher.spec().class_count);

    constexpr int kChunk = 256;
    for (std::size_t at = 0; at < train_idx.size(); at += kChunk) {
        const std::size_t end = std::min(train_idx.size(), at + kChunk);
        std::vector<int> part(train_idx.begin() + static_cast<long>(at),
                              train_idx.begin() + static_cast<long>(end));
        Batch b = Batch::from_dataset(full, part);
        cache.features.middleRows(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(part.size())) =
            teacher.features_at(b, feature_layer);
        cache.logits.middleRows(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(part.size())) =
            teacher.predict_logits(b);
    }
    for (std::size_t i = 0; i < train_idx.size(); ++i)
        cache.row_of[static_cast<std::size_t>(train_idx[i])] = static_cast<int>(i);
    return cache;
}

// ---- shared loop pieces -----------------------------------------------------------

namespace {

constexpr std::uint64_t kShuffleTag = 0x73687566;
constexpr std::uint64_t kDiffusionTag = 0x64696666;
constexpr std::uint64_t kGdpdTag = 0x67647064;
constexpr std::uint64_t kAuxTag = 0x61757800;

struct ValEval {
    double loss = 0, auc = 0;
};

ValEval evaluate_val(Classifier& model, const TimeSeriesDataset& data, const std::vector<int>& val_idx) {
    ValEval ev;
    if (val_idx.empty()) return ev;
    Mat logits(static_cast<Eigen::Index>(val_idx.size()), model.spec().class_count);
    constexpr int kChunk = 256;
    for (std::size_t at = 0; at < val_idx.size(); at += kChunk) {
        const std::size_t end = std::min(val_idx.size(), at + kChunk);
        std::vector<int> part(val_idx.begin() + static_cast<long>(at), val_idx.begin() + static_cast<long>(end));
        logits.middleRows(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(part.size())) =
            model.predict_logits(Batch::from_dataset(data, part));
    }
    std::vector<int> labels;
    labels.reserve(val_idx.size());
    for (int i : val_idx) labels.push_back(data.labels[i]);
    ev.loss = nn::cross_entropy(logits, labels, nullptr);
    ev.auc = auc_prc(nn::softmax_rows(logits), labels);
    return ev;
}

std::vector<std::vector<int>> make_batches(std::vector<int> idx, int batch_size, RngStream& rng) {
    rng.shuffle(idx);
    std::vector<std::vector<int>> batches;
    for (std::size_t at = 0; at < idx.size(); at += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(idx.size(), at + static_cast<std::size_t>(batch_size));
        batches.emplace_back(idx.begin() + static_cast<long>(at), idx.begin() + static_cast<long>(end));
    }
    return batches;
}

std::vector<int> batch_labels(const TimeSeriesDataset& data, const std::vector<int>& idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(data.labels[i]);
    return out;
}

struct BestTracker {
    double best = std::numeric_limits<double>::infinity();
    bool enabled = true;  // no validation split -> keep final weights
    Vec snapshot;
    void observe(double val_loss, const nn::ParamSet& ps) {
        if (enabled && val_loss < best) {
            best = val_loss;
            snapshot = ps.flatten();
        }
    }
    void restore(nn::ParamSet ps) const {
        if (snapshot.size() > 0) ps.unflatten(snapshot);
    }
};

}  // namespace

// ---- baselines -------------------------------------------------------------------

TrainResult train_student_baseline(const ClassifierSpec& spec, const TimeSeriesDataset& partial,
                                   BaselineMethod method, const TrainSchedule& sched,
                                   const TeacherFeatureCache* cache) {
    sched.validate();
    if (method != BaselineMethod::Base && !cache)
        throw ArgumentError("distillation baseline requires a teacher cache");

    TrainResult res{Classifier(spec, sched.seed)};
    auto& model = res.model;
    const auto train_idx = partial.indices_of(Split::Train);
    const auto val_idx = partial.indices_of(Split::Val);
    if (train_idx.empty()) throw ArgumentError("training requires a non-empty train split");

    std::optional<FeatureKd> fkd;
    if (method == BaselineMethod::FeatureKd)
        fkd.emplace(spec.feature_dim(), cache->dim(), splitmix64(sched.seed ^ kAuxTag));

    nn::ParamSet theta = model.params();
    if (fkd) theta.add(fkd->params());
    nn::Adam opt(theta, sched.lr);
    RngStream shuffle_rng = RngStream::child(sched.seed, kShuffleTag);
    BestTracker best;
    best.enabled = !val_idx.empty();

    for (int epoch = 1; epoch <= sched.total_epochs; ++epoch) {
        opt.lr = sched.lr_at(epoch);
        double task_sum = 0, kd_sum = 0;
        long batches_run = 0;
        for (auto& batch : make_batches(train_idx, sched.batch_size, shuffle_rng)) {
            const Batch x = Batch::from_dataset(partial, batch);
            const auto labels = batch_labels(partial, batch);
            theta.zero_grads();

            Classifier::TrainCtx ctx;
            const Mat logits = model.forward_train(x, ctx);
            Mat dlogits;
            task_sum += nn::cross_entropy(logits, labels, &dlogits);

            Mat dtap;
            if (method == BaselineMethod::Base) {
                // plain task training; loss weights do not apply
            } else if (method == BaselineMethod::LogitKd) {
                Mat dkd;
                kd_sum += logit_kd_loss(logits, cache->gather_logits(batch), sched.temperature, &dkd);
                dlogits = sched.lambda_task * dlogits + sched.lambda_kd * dkd;
            } else {
                Mat dz;
                kd_sum += fkd->loss(ctx.tap, cache->gather_features(batch), &dz, true);
                dlogits *= sched.lambda_task;
                dtap = sched.lambda_kd * dz;
                // scale the projection gradient accumulated inside loss()
                if (fkd->projection)
                    for (auto* p : {&fkd->projection->W, &fkd->projection->b}) p->g *= sched.lambda_kd;
            }
            model.backward_train(ctx, dlogits, dtap);
            opt.step();
            ++batches_run;
        }

        const auto ev = evaluate_val(model, partial, val_idx);
        best.observe(ev.loss, model.checkpoint_params());
        EpochLogRow row;
        row.epoch = epoch;
        row.phase = 1;
        row.task_loss = task_sum / batches_run;
        row.gdpd_loss = 0;
        row.diffusion_loss = method == BaselineMethod::Base ? 0 : kd_sum / batches_run;
        row.val_auc_prc = ev.auc;
        row.lr = opt.lr;
        res.log.push_back(row);
    }

    best.restore(model.checkpoint_params());
    res.best_val_loss = best.best;
    res.val_auc_prc = evaluate_val(model, partial, val_idx).auc;
    return res;
}

// ---- teacher ---------------------------------------------------------------------

TrainResult train_teacher(const ClassifierSpec& spec, const TimeSeriesDataset& full,
                          const TrainSchedule& sched) {
    sched.validate();
    std::optional<TrainResult> best;
    for (int k = 0; k < sched.teacher_inits; ++k) {
        TrainSchedule cand = sched;
        cand.seed = splitmix64(sched.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(k));
        auto res = train_student_baseline(spec, full, BaselineMethod::Base, cand);
        if (!best || res.val_auc_prc > best->val_auc_prc) best.emplace(std::move(res));
    }
    return std::move(*best);
}

// ---- gdpd -------------------------------------------------------------------------

TrainResult train_student_gdpd(const ClassifierSpec& spec, const TeacherFeatureCache& cache,
                               const TimeSeriesDataset& partial, const TrainSchedule& sched) {
    sched.validate();
    TrainResult res{Classifier(spec, sched.seed)};
    auto& model = res.model;
    const auto train_idx = partial.indices_of(Split::Train);
    const auto val_idx = partial.indices_of(Split::Val);
    if (train_idx.empty()) throw ArgumentError("training requires a non-empty train split");

    const NoiseSchedule noise =
        make_schedule(sched.diffusion_steps, sched.beta_start, sched.beta_end, sched.schedule_shape);
    res.denoiser.emplace(cache.dim(), splitmix64(sched.seed ^ kDiffusionTag), sched.denoiser_hidden,
                         sched.denoiser_time_dim);
    res.machinery.emplace(cache.dim(), spec.feature_dim(), splitmix64(sched.seed ^ kAuxTag));
    auto& denoiser = *res.denoiser;
    auto& machinery = *res.machinery;

    nn::ParamSet theta = model.params();
    nn::Adam theta_opt(theta, sched.lr);  // persists across the phase boundary
    nn::Adam phi_opt(denoiser.params(), sched.denoiser_lr);
    std::optional<nn::Adam> aux_opt;  // adapter + back_map, created at phase 2

    RngStream shuffle_rng = RngStream::child(sched.seed, kShuffleTag);
    RngStream diffusion_rng = RngStream::child(sched.seed, kDiffusionTag);
    RngStream gdpd_rng = RngStream::child(sched.seed, kGdpdTag);
    BestTracker best;
    best.enabled = !val_idx.empty();

    for (int epoch = 1; epoch <= sched.total_epochs; ++epoch) {
        theta_opt.lr = sched.lr_at(epoch);
        const bool phase1 = epoch <= sched.warmup_epochs;
        if (!phase1 && !aux_opt) aux_opt.emplace(machinery.params(), sched.lr_at(epoch));
        if (aux_opt) aux_opt->lr = sched.lr_at(epoch);

        double task_sum = 0, diff_sum = 0, gdpd_sum = 0;
        long batches_run = 0;
        for (auto& batch : make_batches(train_idx, sched.batch_size, shuffle_rng)) {
            const Batch x = Batch::from_dataset(partial, batch);
            const auto labels = batch_labels(partial, batch);

            if (phase1) {
                // student on the task
                theta.zero_grads();
                Classifier::TrainCtx ctx;
                Mat dlogits;
                task_sum += nn::cross_entropy(model.forward_train(x, ctx), labels, &dlogits);
                model.backward_train(ctx, dlogits, Mat());
                theta_opt.step();

                // denoiser on the teacher features of the same batch
                denoiser.params().zero_grads();
                DiffusionLossCtx dctx;
                diff_sum += diffusion_loss(denoiser, cache.gather_features(batch), noise, diffusion_rng, &dctx);
                diffusion_loss_backward(denoiser, dctx);
                phi_opt.step();
            } else {
                theta.zero_grads();
                machinery.params().zero_grads();
                Classifier::TrainCtx ctx;
                Mat dlogits;
                task_sum += nn::cross_entropy(model.forward_train(x, ctx), labels, &dlogits);

                Mat dz_short;
                if (sched.lambda_kd > 0.0 && sched.nfe > 0) {
                    gdpd_sum += gdpd_loss_grad(model, denoiser, noise, machinery, ctx.tap, labels,
                                               sched.j_samples, sched.nfe, gdpd_rng, sched.lambda_kd,
                                               &dz_short);
                }
                model.backward_train(ctx, sched.lambda_task * dlogits, dz_short);
                theta_opt.step();
                aux_opt->step();
            }
            ++batches_run;
        }

        const auto ev = evaluate_val(model, partial, val_idx);
        best.observe(ev.loss, model.checkpoint_params());
        EpochLogRow row;
        row.epoch = epoch;
        row.phase = phase1 ? 1 : 2;
        row.task_loss = task_sum / batches_run;
        row.diffusion_loss = phase1 ? diff_sum / batches_run : 0;
        row.gdpd_loss = phase1 ? 0 : gdpd_sum / batches_run;
        row.val_auc_prc = ev.auc;
        row.lr = theta_opt.lr;
        res.log.push_back(row);
    }

    best.restore(model.checkpoint_params());
    res.best_val_loss = best.best;
    res.val_auc_prc = evaluate_val(model, partial, val_idx).auc;
    return res;
}

}  // namespace gdpd
