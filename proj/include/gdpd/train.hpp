#pragma once

#include <optional>

#include "gdpd/evaluation.hpp"
#include "gdpd/losses.hpp"

namespace gdpd {

struct TrainSchedule {
    int total_epochs = 600;
    int warmup_epochs = 300;  // E_warm: epochs 1..E_warm are phase 1
    double lambda_task = 1.0;
    double lambda_kd = 1.0;
    int j_samples = 1;
    int nfe = 5;  // 0 disables the GDPD term entirely
    int batch_size = 64;
    double lr = 0.01;
    double lr_decay_factor = 0.5;
    std::vector<int> lr_decay_epochs = {25, 30, 35};  // absolute epoch numbers
    double temperature = 4.0;  // logit KD
    std::uint64_t seed = 0;

    // diffusion prior
    int diffusion_steps = 1000;
    double beta_start = 1e-4, beta_end = 0.02;
    ScheduleShape schedule_shape = ScheduleShape::Linear;
    double denoiser_lr = 1e-3;
    int denoiser_hidden = 256, denoiser_time_dim = 64;

    int teacher_inits = 5;

    void validate() const;
    double lr_at(int epoch) const;  // 1-based
};

enum class BaselineMethod { Base, LogitKd, FeatureKd };
BaselineMethod baseline_from_string(const std::string& s);
std::string baseline_to_string(BaselineMethod m);

struct EpochLogRow {
    int epoch = 0, phase = 1;
    double task_loss = 0, diffusion_loss = 0, gdpd_loss = 0, val_auc_prc = 0, lr = 0;
};
void write_epoch_log(const std::vector<EpochLogRow>& log, const std::string& path);
std::vector<EpochLogRow> read_epoch_log(const std::string& path);

// Frozen-teacher features and logits over the train split of the full-length
// dataset, produced once; rows follow ascending dataset index.
struct TeacherFeatureCache {
    Mat features;
    Mat logits;
    std::vector<int> row_of;  // dataset index -> row, -1 off the train split
    int feature_layer = 0;

    Mat gather_features(const std::vector<int>& idx) const;
    Mat gather_logits(const std::vector<int>& idx) const;
    int dim() const { return static_cast<int>(features.cols()); }
};

TeacherFeatureCache cache_teacher_features(Classifier& teacher, const TimeSeriesDataset& full,
                                           int feature_layer);

struct TrainResult {
    Classifier model;
    std::vector<EpochLogRow> log;
    double best_val_loss = 0;
    double val_auc_prc = 0;
    std::optional<Denoiser> denoiser;         // populated by GDPD training
    std::optional<GdpdMachinery> machinery;

    explicit TrainResult(Classifier m) : model(std::move(m)) {}
};

// Task-only training per candidate seed; the candidate with the best
// validation AUC-PRC wins and is returned frozen.
TrainResult train_teacher(const ClassifierSpec& spec, const TimeSeriesDataset& full,
                          const TrainSchedule& sched);

// Single-phase training: lambda_task * task + lambda_kd * method term.
// Base ignores both weights (plain task loss) and needs no cache.
TrainResult train_student_baseline(const ClassifierSpec& spec, const TimeSeriesDataset& partial,
                                   BaselineMethod method, const TrainSchedule& sched,
                                   const TeacherFeatureCache* cache = nullptr);

// Two-phase training: epochs 1..E_warm jointly train the student on the task
// and the denoiser on cached teacher features (disjoint parameter sets, one
// optimizer step each per batch); afterwards the denoiser freezes and the
// student + adapter train on lambda_task * task + lambda_kd * gdpd.
TrainResult train_student_gdpd(const ClassifierSpec& spec, const TeacherFeatureCache& cache,
                               const TimeSeriesDataset& partial, const TrainSchedule& sched);

}  // namespace gdpd
