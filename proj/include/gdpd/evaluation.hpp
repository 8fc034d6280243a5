#pragma once

#include <string>
#include <vector>

#include "gdpd/classifier.hpp"
#include "gdpd/dataset.hpp"

namespace gdpd {

// ---- metrics (pure functions, one-vs-rest macro averaging) ----

// average precision as the step-wise sum over the ranked list, macro-averaged
// over classes; classes absent from the labels are excluded with a warning
double auc_prc(const Mat& scores, const std::vector<int>& labels);
double auc_prc_binary(const Vec& scores, const std::vector<int>& labels01);

// ROC area via the rank-statistic formulation, macro-averaged
double auc_roc(const Mat& scores, const std::vector<int>& labels);
double auc_roc_binary(const Vec& scores, const std::vector<int>& labels01);

double accuracy(const Mat& scores, const std::vector<int>& labels);

// fraction of index-wise top-1 agreements
double top1_agreement(const std::vector<int>& student_top1, const std::vector<int>& teacher_top1);

std::vector<int> argmax_rows(const Mat& scores);

// ---- report rows and aggregation ----

struct ReportRow {
    std::string dataset, method;
    int seed = 0;
    double auc_prc = 0, auc_roc = 0, accuracy = 0, fidelity = 0;
};

struct MethodAggregate {
    std::string method;
    double avg_auc_prc = 0, avg_fidelity = 0, avg_rank = 0;
    int num_top1 = 0, num_top3 = 0;
    int wins = 0, draws = 0, losses = 0;
};

struct MetricsReport {
    std::vector<ReportRow> rows;
    std::vector<MethodAggregate> aggregates;
};

// Seeds are averaged per (dataset, method) first; per-dataset ranks share the
// mean rank on ties; a method wins a dataset when strictly ahead of every
// other method, draws when tied at the top.
std::vector<MethodAggregate> aggregate(const std::vector<ReportRow>& rows);

void write_report_rows(const std::vector<ReportRow>& rows, const std::string& path);
std::vector<ReportRow> read_report_rows(const std::string& path);
void write_report_aggregates(const std::vector<MethodAggregate>& aggs, const std::string& path);

// ---- model evaluation helpers ----

// chunked eval-mode class probabilities over the given indices
Mat predict_scores(Classifier& model, const TimeSeriesDataset& ds, const std::vector<int>& idx,
                   int chunk = 256);
Mat extract_features(Classifier& model, const TimeSeriesDataset& ds, const std::vector<int>& idx,
                     int chunk = 256);

// ---- suffix-transfer protocols (backbone stays frozen) ----

// Fit a fresh multinomial-logistic probe (Newton iterations, ridge 1e-6,
// gradient tolerance 1e-6) on suffix-view train features; report test AUC-PRC.
double linear_probe_suffix(Classifier& student, const TimeSeriesDataset& ds, double fraction = 0.5);

// Evaluate the frozen student (backbone + original head) on suffix inputs.
double zero_shot_suffix(Classifier& student, const TimeSeriesDataset& ds, double fraction = 0.5);

// exposed for tests: the probe itself on explicit features
struct LinearProbe {
    Mat W;  // (D+1) x C, last row is the bias
    int classes = 0;
    void fit(const Mat& x, const std::vector<int>& labels, int class_count, double ridge = 1e-6,
             double tol = 1e-6, int max_iter = 100);
    Mat predict_probs(const Mat& x) const;
};

}  // namespace gdpd
