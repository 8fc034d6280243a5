#include "gdpd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace gdpd {

namespace {

// step-wise AP over the ranked list, tie groups collapse to one threshold
double average_precision(const Vec& scores, const std::vector<char>& positive) {
    const auto n = scores.size();
    long total_pos = std::count(positive.begin(), positive.end(), 1);
    if (total_pos == 0 || total_pos == n) return total_pos == 0 ? 0.0 : 1.0;

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });

    double ap = 0.0, prev_recall = 0.0;
    long tp = 0, fp = 0;
    Eigen::Index i = 0;
    while (i < n) {
        Eigen::Index j = i;
        while (j < n && scores(order[j]) == scores(order[i])) ++j;
        for (Eigen::Index k = i; k < j; ++k) (positive[order[k]] ? tp : fp)++;
        const double recall = static_cast<double>(tp) / total_pos;
        const double precision = static_cast<double>(tp) / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return ap;
}

// Mann-Whitney with midranks for ties
double roc_area(const Vec& scores, const std::vector<char>& positive) {
    const auto n = scores.size();
    const long pos = std::count(positive.begin(), positive.end(), 1);
    const long neg = n - pos;
    if (pos == 0 || neg == 0) return 0.5;

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) < scores(b); });

    double rank_sum_pos = 0.0;
    Eigen::Index i = 0;
    while (i < n) {
        Eigen::Index j = i;
        while (j < n && scores(order[j]) == scores(order[i])) ++j;
        const double midrank = 0.5 * (i + 1 + j);  // average of ranks i+1..j
        for (Eigen::Index k = i; k < j; ++k)
            if (positive[order[k]]) rank_sum_pos += midrank;
        i = j;
    }
    return (rank_sum_pos - 0.5 * pos * (pos + 1)) / (static_cast<double>(pos) * neg);
}

template <typename PerClass>
double macro_over_classes(const Mat& scores, const std::vector<int>& labels, PerClass&& per_class) {
    if (scores.rows() == 0) throw ArgumentError("metric on an empty score matrix");
    if (static_cast<Eigen::Index>(labels.size()) != scores.rows())
        throw ShapeError("metric: label count mismatch");
    if (!scores.allFinite()) throw ArgumentError("metric: non-finite scores");

    double sum = 0.0;
    int used = 0;
    for (Eigen::Index c = 0; c < scores.cols(); ++c) {
        std::vector<char> positive(labels.size());
        long npos = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            positive[i] = labels[i] == c;
            npos += positive[i];
        }
        if (npos == 0) {
            std::cerr << "[gdpd] warning: class " << c << " absent from labels; excluded from macro average\n";
            continue;
        }
        sum += per_class(Vec(scores.col(c)), positive);
        ++used;
    }
    if (used == 0) throw ArgumentError("metric: no class present in labels");
    return sum / used;
}

}  // namespace

double auc_prc(const Mat& scores, const std::vector<int>& labels) {
    return macro_over_classes(scores, labels, average_precision);
}

double auc_prc_binary(const Vec& scores, const std::vector<int>& labels01) {
    std::vector<char> positive(labels01.size());
    for (std::size_t i = 0; i < labels01.size(); ++i) positive[i] = labels01[i] == 1;
    return average_precision(scores, positive);
}

double auc_roc(const Mat& scores, const std::vector<int>& labels) {
    return macro_over_classes(scores, labels, roc_area);
}

double auc_roc_binary(const Vec& scores, const std::vector<int>& labels01) {
    std::vector<char> positive(labels01.size());
    for (std::size_t i = 0; i < labels01.size(); ++i) positive[i] = labels01[i] == 1;
    return roc_area(scores, positive);
}

std::vector<int> argmax_rows(const Mat& scores) {
    std::vector<int> out(static_cast<std::size_t>(scores.rows()));
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        Eigen::Index best;
        scores.row(r).maxCoeff(&best);
        out[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return out;
}

double accuracy(const Mat& scores, const std::vector<int>& labels) {
    const auto top1 = argmax_rows(scores);
    long hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += top1[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double top1_agreement(const std::vector<int>& student_top1, const std::vector<int>& teacher_top1) {
    if (student_top1.size() != teacher_top1.size())
        throw ArgumentError("top1_agreement: length mismatch");
    if (student_top1.empty()) throw ArgumentError("top1_agreement: empty input");
    long hit = 0;
    for (std::size_t i = 0; i < student_top1.size(); ++i) hit += student_top1[i] == teacher_top1[i];
    return static_cast<double>(hit) / static_cast<double>(student_top1.size());
}

// ---- aggregation ----------------------------------------------------------------

std::vector<MethodAggregate> aggregate(const std::vector<ReportRow>& rows) {
    if (rows.empty()) throw AggregationError("aggregate: empty report");

    std::set<std::string> datasets, methods;
    for (const auto& r : rows) {
        datasets.insert(r.dataset);
        methods.insert(r.method);
    }

    // seed-average per cell
    struct Cell {
        double prc_sum = 0, fid_sum = 0;
        int n = 0;
    };
    std::map<std::pair<std::string, std::string>, Cell> cells;
    for (const auto& r : rows) {
        auto& c = cells[{r.dataset, r.method}];
        c.prc_sum += r.auc_prc;
        c.fid_sum += r.fidelity;
        ++c.n;
    }
    for (const auto& d : datasets)
        for (const auto& m : methods)
            if (!cells.count({d, m}))
                throw AggregationError("aggregate: missing cell (dataset=" + d + ", method=" + m + ")");

    std::map<std::string, MethodAggregate> out;
    for (const auto& m : methods) out[m].method = m;

    for (const auto& d : datasets) {
        std::vector<std::pair<std::string, double>> scored;
        for (const auto& m : methods) {
            const auto& c = cells[{d, m}];
            scored.emplace_back(m, c.prc_sum / c.n);
        }
        for (const auto& [m, score] : scored) {
            int strictly_higher = 0, tied = 0;
            for (const auto& [m2, score2] : scored) {
                if (m2 == m) continue;
                if (score2 > score) ++strictly_higher;
                if (score2 == score) ++tied;
            }
            auto& agg = out[m];
            agg.avg_rank += strictly_higher + 1 + 0.5 * tied;  // fractional midrank
            agg.num_top1 += strictly_higher == 0;
            agg.num_top3 += strictly_higher <= 2;
            if (strictly_higher == 0 && tied == 0)
                ++agg.wins;
            else if (strictly_higher == 0)
                ++agg.draws;
            else
                ++agg.losses;
            agg.avg_auc_prc += score;
            agg.avg_fidelity += cells[{d, m}].fid_sum / cells[{d, m}].n;
        }
    }

    std::vector<MethodAggregate> result;
    const double nd = static_cast<double>(datasets.size());
    for (auto& [m, agg] : out) {
        agg.avg_rank /= nd;
        agg.avg_auc_prc /= nd;
        agg.avg_fidelity /= nd;
        result.push_back(agg);
    }
    return result;
}

// ---- report files -----------------------------------------------------------------

void write_report_rows(const std::vector<ReportRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report: " + path);
    out << "dataset\tmethod\tseed\tauc_prc\tauc_roc\taccuracy\tfidelity\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s\t%s\t%d\t%.6f\t%.6f\t%.6f\t%.6f\n", r.dataset.c_str(),
                      r.method.c_str(), r.seed, r.auc_prc, r.auc_roc, r.accuracy, r.fidelity);
        out << buf;
    }
}

std::vector<ReportRow> read_report_rows(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read report: " + path);
    std::vector<ReportRow> rows;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        ReportRow r;
        std::string seed;
        std::getline(ss, r.dataset, '\t');
        std::getline(ss, r.method, '\t');
        std::getline(ss, seed, '\t');
        r.seed = std::stoi(seed);
        std::string f;
        std::getline(ss, f, '\t');
        r.auc_prc = std::stod(f);
        std::getline(ss, f, '\t');
        r.auc_roc = std::stod(f);
        std::getline(ss, f, '\t');
        r.accuracy = std::stod(f);
        std::getline(ss, f, '\t');
        r.fidelity = std::stod(f);
        rows.push_back(std::move(r));
    }
    return rows;
}

void write_report_aggregates(const std::vector<MethodAggregate>& aggs, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write aggregates: " + path);
    out << "method\tavg_auc_prc\tavg_fidelity\tavg_rank\tnum_top1\tnum_top3\twins\tdraws\tlosses\n";
    char buf[256];
    for (const auto& a : aggs) {
        std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\t%.6f\t%d\t%d\t%d\t%d\t%d\n", a.method.c_str(),
                      a.avg_auc_prc, a.avg_fidelity, a.avg_rank, a.num_top1, a.num_top3, a.wins, a.draws,
                      a.losses);
        out << buf;
    }
}

// ---- model evaluation helpers ------------------------------------------------------

Mat predict_scores(Classifier& model, const TimeSeriesDataset& ds, const std::vector<int>& idx, int chunk) {
    Mat out(static_cast<Eigen::Index>(idx.size()), model.spec().class_count);
    for (std::size_t at = 0; at < idx.size(); at += static_cast<std::size_t>(chunk)) {
        const std::size_t end = std::min(idx.size(), at + static_cast<std::size_t>(chunk));
        std::vector<int> part(idx.begin() + static_cast<long>(at), idx.begin() + static_cast<long>(end));
        out.middleRows(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(part.size())) =
            model.predict(Batch::from_dataset(ds, part));
    }
    return out;
}

Mat extract_features(Classifier& model, const TimeSeriesDataset& ds, const std::vector<int>& idx, int chunk) {
    Mat out(static_cast<Eigen::Index>(idx.size()), model.feature_dim());
    for (std::size_t at = 0; at < idx.size(); at += static_cast<std::size_t>(chunk)) {
        const std::size_t end = std::min(idx.size(), at + static_cast<std::size_t>(chunk));
        std::vector<int> part(idx.begin() + static_cast<long>(at), idx.begin() + static_cast<long>(end));
        out.middleRows(static_cast<Eigen::Index>(at), static_cast<Eigen::Index>(part.size())) =
            model.features(Batch::from_dataset(ds, part));
    }
    return out;
}

// ---- linear probe --------------------------------------------------------------------

void LinearProbe::fit(const Mat& x, const std::vector<int>& labels, int class_count, double ridge,
                      double tol, int max_iter) {
    const auto n = x.rows();
    const auto d = x.cols() + 1;  // bias column
    classes = class_count;
    Mat xb(n, d);
    xb.leftCols(x.cols()) = x;
    xb.col(d - 1).setOnes();

    W = Mat::Zero(d, class_count);
    const Eigen::Index dim = d * class_count;

    for (int iter = 0; iter < max_iter; ++iter) {
        const Mat probs = nn::softmax_rows(xb * W);
        Mat g = probs;
        for (Eigen::Index i = 0; i < n; ++i) g(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
        Mat grad = xb.transpose() * g / static_cast<double>(n) + ridge * W;
        if (grad.cwiseAbs().maxCoeff() < tol) break;

        // full Newton system over vec(W), class-block structure
        Mat H = Mat::Zero(dim, dim);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto xi = xb.row(i);
            for (int a = 0; a < class_count; ++a)
                for (int b = 0; b < class_count; ++b) {
                    const double w =
                        probs(i, a) * ((a == b ? 1.0 : 0.0) - probs(i, b)) / static_cast<double>(n);
                    if (w == 0.0) continue;
                    H.block(a * d, b * d, d, d).noalias() += w * (xi.transpose() * xi);
                }
        }
        H += ridge * Mat::Identity(dim, dim);

        Eigen::Map<const Vec> gvec(grad.data(), dim);
        Vec step = H.ldlt().solve(gvec);
        Eigen::Map<Vec>(W.data(), dim) -= step;
        if (!W.allFinite()) throw NumericalError("linear probe diverged");
    }
}

Mat LinearProbe::predict_probs(const Mat& x) const {
    Mat xb(x.rows(), x.cols() + 1);
    xb.leftCols(x.cols()) = x;
    xb.col(x.cols()).setOnes();
    return nn::softmax_rows(xb * W);
}

double linear_probe_suffix(Classifier& student, const TimeSeriesDataset& ds, double fraction) {
    const auto view = suffix_view(ds, fraction);
    const auto train_idx = view.indices_of(Split::Train);
    const auto test_idx = view.indices_of(Split::Test);
    if (train_idx.empty() || test_idx.empty())
        throw ArgumentError("linear_probe_suffix: needs train and test splits");

    const Mat ztrain = extract_features(student, view, train_idx);
    std::vector<int> ytrain;
    for (int i : train_idx) ytrain.push_back(view.labels[i]);

    LinearProbe probe;
    probe.fit(ztrain, ytrain, view.class_count);

    const Mat ztest = extract_features(student, view, test_idx);
    std::vector<int> ytest;
    for (int i : test_idx) ytest.push_back(view.labels[i]);
    return auc_prc(probe.predict_probs(ztest), ytest);
}

double zero_shot_suffix(Classifier& student, const TimeSeriesDataset& ds, double fraction) {
    const auto view = suffix_view(ds, fraction);
    const auto test_idx = view.indices_of(Split::Test);
    if (test_idx.empty()) throw ArgumentError("zero_shot_suffix: needs a test split");
    std::vector<int> ytest;
    for (int i : test_idx) ytest.push_back(view.labels[i]);
    return auc_prc(predict_scores(student, view, test_idx), ytest);
}

}  // namespace gdpd
