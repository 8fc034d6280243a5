#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gdpd/train.hpp"

namespace gdpd {

// Config-driven experiment runner. Configs are JSON with nested sections;
// unknown keys are rejected up front and every mode validates its required
// fields before any training starts.
struct ExperimentConfig {
    enum class Mode {
        Standard,
        EarlinessSweep,
        ChannelPartial,
        Compression,
        SelfDistill,
        WeakTeacher,
        Transferability,
        AblationWarmup,
        AblationLambda,
        AblationT,
        AblationNfe,
        AblationJ,
        AblationLayer,
    };

    Mode mode = Mode::Standard;
    std::string output_dir = "out";
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> methods;  // subset of {base, logit-kd, feature-kd, gdpd}

    struct DatasetCfg {
        bool synthetic = true;
        // files
        std::string train_path, test_path, name;
        bool multivariate = false;
        // synthetic
        SyntheticConfig synth;
        // preprocessing
        int resample_length = 100;  // 0 keeps the native length
        std::string normalize = "per-series";  // per-series | train-set | none
        double val_fraction = 0.2;
        std::uint64_t val_seed = 17;
    } dataset;

    PartialnessSpec partialness;

    struct ModelCfg {
        ClassifierSpec spec;
        int inits = 5;        // teacher only
        int epochs = -1;      // teacher override; -1 inherits train.epochs
        double lr = -1.0;     // teacher override; -1 inherits train.lr
    } teacher;
    ClassifierSpec student;

    TrainSchedule train;

    struct ModeParams {
        std::vector<double> earliness_grid = {0.2, 0.4, 0.5, 0.6, 0.8, 1.0};
        double channel_fraction = 0.5;
        std::vector<std::pair<double, double>> weak_teacher_grid = {
            {1.0, 0.0}, {0.75, 0.0}, {0.75, 0.10}, {0.5, 0.25}};
        std::vector<int> warmup_grid;
        std::vector<double> lambda_grid;
        std::vector<int> t_grid;
        std::vector<int> nfe_grid;
        std::vector<int> j_grid;
        std::vector<std::pair<int, int>> layer_grid;  // (teacher layer, student layer)
        double suffix_fraction = 0.5;
    } mode_params;

    static ExperimentConfig from_json_file(const std::string& path);
    static ExperimentConfig from_json_text(const std::string& text);
    std::string canonical_json() const;   // sorted keys, stable formatting
    std::string config_hash() const;      // over canonical_json
    std::string teacher_hash() const;     // dataset + teacher + mode-relevant bits
};

std::string mode_to_string(ExperimentConfig::Mode m);
ExperimentConfig::Mode mode_from_string(const std::string& s);

struct SubReport {
    std::string key;  // e.g. "main", "e_0.20", "wt_2", "nfe_5"
    MetricsReport report;
    std::filesystem::path dir;
};

struct RunOutput {
    std::vector<SubReport> subs;
    int cells_trained = 0;
    int cells_reused = 0;
    std::filesystem::path out_dir;
};

// Resolves the output root from GDPD_OUTPUT_ROOT (falling back to the current
// directory), trains or reuses the teacher by content hash, runs every
// (method, seed) cell with per-cell artifacts, and writes report files.
// Completed cells are skipped on rerun.
RunOutput run(const ExperimentConfig& cfg);

// Renders SVG charts from the report files under an output directory:
// a grouped fidelity bar chart, an AUC-PRC line chart across sweep settings
// when several sub-reports exist, and a weak-teacher decline curve for that
// mode. Returns the files written; empty (with a warning) when there is
// nothing to plot.
std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& out_dir);

// aggregates recomputed from rows on disk (CLI `report`)
MetricsReport load_report(const std::filesystem::path& sub_dir);

}  // namespace gdpd
