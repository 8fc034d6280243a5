#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gdpd/common.hpp"

namespace gdpd {

enum class Split { Train, Val, Test };

/// Labeled multichannel sequence collection. Samples are immutable after
/// construction; every pipeline operation returns a new dataset.
struct TimeSeriesDataset {
    std::string name;
    std::vector<Mat> samples;  // each M x L
    std::vector<int> labels;   // class ids in {0..C-1}
    std::vector<Split> split;
    int class_count = 0;

    // Missingness: observed(i)(c,t) == 0 marks a missing value. Present only
    // for datasets carrying sentinel masks (imputation pipeline).
    std::optional<std::vector<Mat>> observed;

    int size() const { return static_cast<int>(samples.size()); }
    int channels() const { return samples.empty() ? 0 : static_cast<int>(samples[0].rows()); }
    int length() const { return samples.empty() ? 0 : static_cast<int>(samples[0].cols()); }

    std::vector<int> indices_of(Split s) const;
    void validate() const;  // type invariants; throws on violation
};

/// Student view degradation: earliness fraction e and channel fraction m.
struct PartialnessSpec {
    double earliness = 1.0;
    double channel_fraction = 1.0;
    enum class ChannelRule { KeepFirstK, KeepExplicitList } channel_rule = ChannelRule::KeepFirstK;
    std::vector<int> explicit_channels;  // used with KeepExplicitList
    std::uint64_t seed = 0;              // consumed upstream by explicit-list generation

    void validate() const;
    int prefix_length(int full_length) const { return fraction_count(earliness, full_length); }
    int kept_channels(int full_channels) const { return fraction_count(channel_fraction, full_channels); }
};

enum class DataFormat { DelimitedLabelFirst };
enum class DataLayout { Univariate, Multivariate };
enum class NormScope { PerSeries, TrainSet };

// ---- ingestion / export ----------------------------------------------------

// Univariate rows: label, v_1 .. v_L.
// Multivariate rows: sample_index, channel_index, label, v_1 .. v_L.
// Delimiter auto-detected among {tab, comma}. All rows land in the train
// split; harness code assigns test rows when loading UCR-style file pairs.
TimeSeriesDataset load_dataset(const std::string& path,
                               DataFormat format = DataFormat::DelimitedLabelFirst,
                               DataLayout layout = DataLayout::Univariate);

// Byte-stable given fixed formatting (9 significant digits). M == 1 emits the
// univariate layout, otherwise the multivariate layout.
void export_dataset(const TimeSeriesDataset& ds, const std::string& path);

// Merge a UCR-style TRAIN/TEST file pair into one dataset with split tags.
TimeSeriesDataset load_train_test_pair(const std::string& train_path, const std::string& test_path,
                                       DataLayout layout = DataLayout::Univariate,
                                       const std::string& name = "");

// ---- preprocessing ---------------------------------------------------------

TimeSeriesDataset resample_to_length(const TimeSeriesDataset& ds, int target_length);

TimeSeriesDataset z_normalize(const TimeSeriesDataset& ds, NormScope scope = NormScope::PerSeries);

TimeSeriesDataset carve_validation(const TimeSeriesDataset& ds, double val_fraction, std::uint64_t seed);

// ---- degradations (N, C, split preserved; M/L shrink by the floor rule) ----

TimeSeriesDataset truncate_prefix(const TimeSeriesDataset& ds, const PartialnessSpec& spec);

TimeSeriesDataset mask_channels(const TimeSeriesDataset& ds, const PartialnessSpec& spec);

TimeSeriesDataset suffix_view(const TimeSeriesDataset& ds, double fraction);

// Convenience: mask_channels then truncate_prefix.
TimeSeriesDataset apply_partialness(const TimeSeriesDataset& ds, const PartialnessSpec& spec);

// ---- corruption / imputation -----------------------------------------------

// Stratified train subsampling plus uniform random label flips; val/test
// untouched. Pure function of (dataset, args, seed).
TimeSeriesDataset degrade_supervision(const TimeSeriesDataset& ds, double data_keep_fraction,
                                      double label_noise_fraction, std::uint64_t seed);

// Forward fill then backward fill per channel; channels missing entirely in a
// sample take the train-set channel mean.
TimeSeriesDataset impute_missing(const TimeSeriesDataset& ds);

// ---- synthesis ---------------------------------------------------------------

struct SyntheticConfig {
    int n = 0;
    int channels = 1;
    int length = 0;
    int class_count = 2;
    double prefix_snr = 0.0;
    double suffix_snr = 1.0;
    std::uint64_t seed = 0;
    double test_fraction = 0.5;  // tail of the index range tagged test
};

// Class-conditional templates injected weakly in the first half and strongly
// in the second half, over unit Gaussian noise. Balanced classes,
// deterministic under seed.
TimeSeriesDataset make_synthetic_late_signal(const SyntheticConfig& cfg);

// The class template a synthetic sample was built from; exposed so tests can
// run nearest-template oracles.
Mat synthetic_class_template(const SyntheticConfig& cfg, int class_id);

}  // namespace gdpd
