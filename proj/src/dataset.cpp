#include "gdpd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace gdpd {

std::vector<int> TimeSeriesDataset::indices_of(Split s) const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
        if (split[i] == s) out.push_back(i);
    return out;
}

void TimeSeriesDataset::validate() const {
    const auto n = samples.size();
    if (labels.size() != n || split.size() != n)
        throw SchemaError("dataset '" + name + "': samples/labels/split size mismatch");
    if (observed && observed->size() != n)
        throw SchemaError("dataset '" + name + "': observed mask size mismatch");
    const int m = channels(), l = length();
    for (std::size_t i = 0; i < n; ++i) {
        if (samples[i].rows() != m || samples[i].cols() != l)
            throw SchemaError("dataset '" + name + "': sample " + std::to_string(i) + " shape differs");
        if (labels[i] < 0 || labels[i] >= class_count)
            throw SchemaError("dataset '" + name + "': label out of range at sample " + std::to_string(i));
    }
}

void PartialnessSpec::validate() const {
    if (!(earliness > 0.0) || earliness > 1.0)
        throw ArgumentError("earliness must be in (0,1]");
    if (!(channel_fraction > 0.0) || channel_fraction > 1.0)
        throw ArgumentError("channel_fraction must be in (0,1]");
    if (channel_rule == ChannelRule::KeepExplicitList && explicit_channels.empty())
        throw ArgumentError("keep-explicit-list requires a channel list");
}

// ---- ingestion ---------------------------------------------------------------

namespace {

char detect_delimiter(const std::string& line) {
    return line.find('\t') != std::string::npos ? '\t' : ',';
}

std::vector<std::string> split_fields(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, delim)) {
        const auto b = field.find_first_not_of(" \r");
        const auto e = field.find_last_not_of(" \r");
        out.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
    }
    return out;
}

double parse_number(const std::string& s, int row_index) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ParseError("non-numeric field '" + s + "' at row " + std::to_string(row_index));
    }
}

struct RawTable {
    std::vector<Mat> samples;
    std::vector<double> labels;
};

void remap_labels(const std::vector<double>& raw, std::vector<int>& out, int& class_count) {
    std::set<double> uniq(raw.begin(), raw.end());
    std::map<double, int> id;
    int next = 0;
    for (double v : uniq) id[v] = next++;
    out.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = id[raw[i]];
    class_count = next;
}

RawTable load_raw(const std::string& path, DataLayout layout) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file: " + path);

    RawTable tbl;
    std::string line;
    int row_index = 0;
    char delim = 0;
    int field_count = -1;

    if (layout == DataLayout::Univariate) {
        while (std::getline(in, line)) {
            ++row_index;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            if (delim == 0) delim = detect_delimiter(line);
            auto fields = split_fields(line, delim);
            if (fields.size() < 2)
                throw SchemaError("row " + std::to_string(row_index) + ": need label + at least one value");
            if (field_count < 0)
                field_count = static_cast<int>(fields.size());
            else if (static_cast<int>(fields.size()) != field_count)
                throw SchemaError("row " + std::to_string(row_index) + ": expected " +
                                  std::to_string(field_count) + " fields, got " + std::to_string(fields.size()));
            tbl.labels.push_back(parse_number(fields[0], row_index));
            Mat sample(1, field_count - 1);
            for (int j = 1; j < field_count; ++j) sample(0, j - 1) = parse_number(fields[j], row_index);
            tbl.samples.push_back(std::move(sample));
        }
    } else {
        // rows: sample_index, channel_index, label, v_1 .. v_L
        struct Row {
            int sample, channel;
            double label;
            std::vector<double> values;
        };
        std::vector<Row> rows;
        int max_sample = -1, max_channel = -1;
        while (std::getline(in, line)) {
            ++row_index;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            if (delim == 0) delim = detect_delimiter(line);
            auto fields = split_fields(line, delim);
            if (fields.size() < 4)
                throw SchemaError("row " + std::to_string(row_index) +
                                  ": need sample, channel, label + at least one value");
            if (field_count < 0)
                field_count = static_cast<int>(fields.size());
            else if (static_cast<int>(fields.size()) != field_count)
                throw SchemaError("row " + std::to_string(row_index) + ": expected " +
                                  std::to_string(field_count) + " fields, got " + std::to_string(fields.size()));
            Row r;
            r.sample = static_cast<int>(parse_number(fields[0], row_index));
            r.channel = static_cast<int>(parse_number(fields[1], row_index));
            r.label = parse_number(fields[2], row_index);
            for (std::size_t j = 3; j < fields.size(); ++j) r.values.push_back(parse_number(fields[j], row_index));
            max_sample = std::max(max_sample, r.sample);
            max_channel = std::max(max_channel, r.channel);
            rows.push_back(std::move(r));
        }
        if (rows.empty()) throw SchemaError("empty multivariate file: " + path);
        const int n = max_sample + 1, m = max_channel + 1, l = field_count - 3;
        tbl.samples.assign(n, Mat::Zero(m, l));
        tbl.labels.assign(n, 0.0);
        std::vector<int> seen(n, 0);
        for (const auto& r : rows) {
            if (r.sample < 0 || r.channel < 0)
                throw SchemaError("negative sample/channel index in " + path);
            for (int j = 0; j < l; ++j) tbl.samples[r.sample](r.channel, j) = r.values[j];
            tbl.labels[r.sample] = r.label;
            seen[r.sample] |= 1 << std::min(r.channel, 30);
        }
        for (int i = 0; i < n; ++i)
            if (!seen[i]) throw SchemaError("sample " + std::to_string(i) + " has no rows in " + path);
    }

    if (tbl.samples.empty()) throw SchemaError("empty dataset file: " + path);
    return tbl;
}

}  // namespace

TimeSeriesDataset load_dataset(const std::string& path, DataFormat, DataLayout layout) {
    auto tbl = load_raw(path, layout);
    TimeSeriesDataset ds;
    ds.name = std::filesystem::path(path).stem().string();
    ds.samples = std::move(tbl.samples);
    remap_labels(tbl.labels, ds.labels, ds.class_count);
    ds.split.assign(ds.samples.size(), Split::Train);
    ds.validate();
    return ds;
}

void export_dataset(const TimeSeriesDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write dataset file: " + path);
    char buf[64];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.9g", v);
        out << buf;
    };
    if (ds.channels() == 1) {
        for (int i = 0; i < ds.size(); ++i) {
            out << ds.labels[i];
            for (int t = 0; t < ds.length(); ++t) {
                out << '\t';
                put(ds.samples[i](0, t));
            }
            out << '\n';
        }
    } else {
        for (int i = 0; i < ds.size(); ++i)
            for (int c = 0; c < ds.channels(); ++c) {
                out << i << '\t' << c << '\t' << ds.labels[i];
                for (int t = 0; t < ds.length(); ++t) {
                    out << '\t';
                    put(ds.samples[i](c, t));
                }
                out << '\n';
            }
    }
}

TimeSeriesDataset load_train_test_pair(const std::string& train_path, const std::string& test_path,
                                       DataLayout layout, const std::string& name) {
    auto train = load_raw(train_path, layout);
    auto test = load_raw(test_path, layout);
    if (train.samples[0].rows() != test.samples[0].rows())
        throw SchemaError("train/test channel mismatch for " + train_path);

    TimeSeriesDataset ds;
    ds.name = name.empty() ? std::filesystem::path(train_path).stem().string() : name;
    ds.samples = std::move(train.samples);
    ds.samples.insert(ds.samples.end(), test.samples.begin(), test.samples.end());

    std::vector<double> raw = train.labels;  // remap over the union so ids agree
    raw.insert(raw.end(), test.labels.begin(), test.labels.end());
    remap_labels(raw, ds.labels, ds.class_count);

    ds.split.assign(train.labels.size(), Split::Train);
    ds.split.insert(ds.split.end(), test.labels.size(), Split::Test);
    ds.validate();
    return ds;
}

// ---- preprocessing -----------------------------------------------------------

TimeSeriesDataset resample_to_length(const TimeSeriesDataset& ds, int target_length) {
    if (target_length < 2) throw ArgumentError("target_length must be >= 2");
    const int l = ds.length();
    TimeSeriesDataset out = ds;
    if (l == target_length) return out;
    for (auto& s : out.samples) {
        Mat r(s.rows(), target_length);
        for (int c = 0; c < s.rows(); ++c) {
            for (int i = 0; i < target_length; ++i) {
                if (l == 1) {
                    r(c, i) = s(c, 0);
                    continue;
                }
                const double pos = static_cast<double>(i) * (l - 1) / (target_length - 1);
                const int lo = std::min(static_cast<int>(pos), l - 2);
                const double w = pos - lo;
                r(c, i) = (1.0 - w) * s(c, lo) + w * s(c, lo + 1);
            }
        }
        s = std::move(r);
    }
    out.observed.reset();  // interpolation assumes fully observed input
    return out;
}

TimeSeriesDataset z_normalize(const TimeSeriesDataset& ds, NormScope scope) {
    TimeSeriesDataset out = ds;
    if (scope == NormScope::PerSeries) {
        for (int i = 0; i < out.size(); ++i) {
            for (int c = 0; c < out.channels(); ++c) {
                double sum = 0, sum2 = 0;
                int count = 0;
                for (int t = 0; t < out.length(); ++t) {
                    if (out.observed && (*out.observed)[i](c, t) == 0.0) continue;
                    const double v = out.samples[i](c, t);
                    sum += v;
                    sum2 += v * v;
                    ++count;
                }
                if (count == 0) continue;
                const double mean = sum / count;
                const double var = std::max(0.0, sum2 / count - mean * mean);
                const double stddev = std::sqrt(var);
                for (int t = 0; t < out.length(); ++t) {
                    if (out.observed && (*out.observed)[i](c, t) == 0.0) continue;
                    out.samples[i](c, t) = stddev < 1e-12 ? 0.0 : (out.samples[i](c, t) - mean) / stddev;
                }
            }
        }
    } else {
        const auto train = out.indices_of(Split::Train);
        if (train.empty()) throw ArgumentError("train-set normalization requires a non-empty train split");
        for (int c = 0; c < out.channels(); ++c) {
            double sum = 0, sum2 = 0;
            long count = 0;
            for (int i : train)
                for (int t = 0; t < out.length(); ++t) {
                    if (out.observed && (*out.observed)[i](c, t) == 0.0) continue;
                    const double v = out.samples[i](c, t);
                    sum += v;
                    sum2 += v * v;
                    ++count;
                }
            if (count == 0) continue;
            const double mean = sum / count;
            const double stddev = std::sqrt(std::max(0.0, sum2 / count - mean * mean));
            for (int i = 0; i < out.size(); ++i)
                for (int t = 0; t < out.length(); ++t) {
                    if (out.observed && (*out.observed)[i](c, t) == 0.0) continue;
                    out.samples[i](c, t) = stddev < 1e-12 ? 0.0 : (out.samples[i](c, t) - mean) / stddev;
                }
        }
    }
    return out;
}

TimeSeriesDataset carve_validation(const TimeSeriesDataset& ds, double val_fraction, std::uint64_t seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ArgumentError("val_fraction must be in (0,1)");
    const auto train = ds.indices_of(Split::Train);
    if (train.empty()) throw ArgumentError("carve_validation requires a non-empty train split");

    TimeSeriesDataset out = ds;
    RngStream rng(seed);
    std::map<int, std::vector<int>> by_class;
    for (int i : train) by_class[ds.labels[i]].push_back(i);
    for (auto& [cls, idx] : by_class) {
        (void)cls;
        const int n = static_cast<int>(idx.size());
        int take = static_cast<int>(std::floor(val_fraction * n + 0.5));
        take = std::min(take, n - 1);  // a lone train sample stays in train
        rng.shuffle(idx);
        for (int j = 0; j < take; ++j) out.split[idx[j]] = Split::Val;
    }
    return out;
}

// ---- degradations ------------------------------------------------------------

TimeSeriesDataset truncate_prefix(const TimeSeriesDataset& ds, const PartialnessSpec& spec) {
    spec.validate();
    const int keep = spec.prefix_length(ds.length());
    TimeSeriesDataset out = ds;
    for (auto& s : out.samples) s = s.leftCols(keep).eval();
    if (out.observed)
        for (auto& m : *out.observed) m = m.leftCols(keep).eval();
    return out;
}

TimeSeriesDataset mask_channels(const TimeSeriesDataset& ds, const PartialnessSpec& spec) {
    spec.validate();
    const int m = ds.channels();
    const int keep = spec.kept_channels(m);

    std::vector<int> chans;
    if (spec.channel_rule == PartialnessSpec::ChannelRule::KeepFirstK) {
        for (int c = 0; c < keep; ++c) chans.push_back(c);
    } else {
        chans = spec.explicit_channels;
        for (int c : chans)
            if (c < 0 || c >= m) throw ArgumentError("explicit channel " + std::to_string(c) + " out of range");
        if (static_cast<int>(chans.size()) != keep)
            throw ArgumentError("explicit channel list has " + std::to_string(chans.size()) +
                                " entries, expected " + std::to_string(keep));
    }

    TimeSeriesDataset out = ds;
    for (auto& s : out.samples) {
        Mat r(keep, s.cols());
        for (int j = 0; j < keep; ++j) r.row(j) = s.row(chans[j]);
        s = std::move(r);
    }
    if (out.observed)
        for (auto& msk : *out.observed) {
            Mat r(keep, msk.cols());
            for (int j = 0; j < keep; ++j) r.row(j) = msk.row(chans[j]);
            msk = std::move(r);
        }
    return out;
}

TimeSeriesDataset suffix_view(const TimeSeriesDataset& ds, double fraction) {
    if (!(fraction > 0.0) || fraction > 1.0) throw ArgumentError("suffix fraction must be in (0,1]");
    const int keep = fraction_count(fraction, ds.length());
    TimeSeriesDataset out = ds;
    for (auto& s : out.samples) s = s.rightCols(keep).eval();
    if (out.observed)
        for (auto& m : *out.observed) m = m.rightCols(keep).eval();
    return out;
}

TimeSeriesDataset apply_partialness(const TimeSeriesDataset& ds, const PartialnessSpec& spec) {
    return truncate_prefix(mask_channels(ds, spec), spec);
}

// ---- corruption / imputation ---------------------------------------------------

TimeSeriesDataset degrade_supervision(const TimeSeriesDataset& ds, double data_keep_fraction,
                                      double label_noise_fraction, std::uint64_t seed) {
    if (data_keep_fraction < 0 || data_keep_fraction > 1 || label_noise_fraction < 0 || label_noise_fraction > 1)
        throw ArgumentError("degrade_supervision fractions must be in [0,1]");

    RngStream rng(seed);
    std::map<int, std::vector<int>> by_class;
    for (int i = 0; i < ds.size(); ++i)
        if (ds.split[i] == Split::Train) by_class[ds.labels[i]].push_back(i);

    std::vector<int> dropped;
    for (auto& [cls, idx] : by_class) {
        (void)cls;
        const int n = static_cast<int>(idx.size());
        int keep = static_cast<int>(std::floor(data_keep_fraction * n + 0.5));
        if (data_keep_fraction > 0.0) keep = std::max(keep, 1);
        rng.shuffle(idx);
        for (int j = keep; j < n; ++j) dropped.push_back(idx[j]);
    }
    std::sort(dropped.begin(), dropped.end());

    TimeSeriesDataset out;
    out.name = ds.name;
    out.class_count = ds.class_count;
    std::vector<int> kept_train;
    for (int i = 0; i < ds.size(); ++i) {
        if (std::binary_search(dropped.begin(), dropped.end(), i)) continue;
        out.samples.push_back(ds.samples[i]);
        out.labels.push_back(ds.labels[i]);
        out.split.push_back(ds.split[i]);
        if (ds.split[i] == Split::Train) kept_train.push_back(static_cast<int>(out.samples.size()) - 1);
    }
    if (ds.observed) {
        out.observed.emplace();
        for (int i = 0; i < ds.size(); ++i)
            if (!std::binary_search(dropped.begin(), dropped.end(), i)) out.observed->push_back((*ds.observed)[i]);
    }

    const int flips = static_cast<int>(std::floor(label_noise_fraction * kept_train.size() + 0.5));
    rng.shuffle(kept_train);
    for (int j = 0; j < flips; ++j) {
        const int i = kept_train[j];
        const int offset = static_cast<int>(rng.uniform_int(1, ds.class_count - 1));
        out.labels[i] = (out.labels[i] + offset) % ds.class_count;
    }
    return out;
}

TimeSeriesDataset impute_missing(const TimeSeriesDataset& ds) {
    if (!ds.observed) throw ArgumentError("impute_missing requires a missingness mask");
    const auto train = ds.indices_of(Split::Train);

    // train-set channel means over observed entries
    std::vector<double> channel_mean(ds.channels(), 0.0);
    for (int c = 0; c < ds.channels(); ++c) {
        double sum = 0;
        long count = 0;
        for (int i : train)
            for (int t = 0; t < ds.length(); ++t)
                if ((*ds.observed)[i](c, t) != 0.0) {
                    sum += ds.samples[i](c, t);
                    ++count;
                }
        if (count == 0)
            throw ImputationError("channel " + std::to_string(c) + " has no observed value in any train sample");
        channel_mean[c] = sum / count;
    }

    TimeSeriesDataset out = ds;
    for (int i = 0; i < out.size(); ++i) {
        for (int c = 0; c < out.channels(); ++c) {
            bool any = false;
            for (int t = 0; t < out.length(); ++t)
                if ((*ds.observed)[i](c, t) != 0.0) any = true;
            if (!any) {
                out.samples[i].row(c).setConstant(channel_mean[c]);
                continue;
            }
            double last = std::numeric_limits<double>::quiet_NaN();
            for (int t = 0; t < out.length(); ++t) {  // forward fill
                if ((*ds.observed)[i](c, t) != 0.0)
                    last = out.samples[i](c, t);
                else if (!std::isnan(last))
                    out.samples[i](c, t) = last;
                else
                    out.samples[i](c, t) = std::numeric_limits<double>::quiet_NaN();
            }
            for (int t = out.length() - 1; t >= 0; --t) {  // backward fill
                if (!std::isnan(out.samples[i](c, t)))
                    last = out.samples[i](c, t);
                else
                    out.samples[i](c, t) = last;
            }
        }
    }
    out.observed.reset();
    return out;
}

// ---- synthesis ----------------------------------------------------------------

namespace {

// Prefix signal: a shared carrier plus a class-specific arrangement of
// localized bumps. Bump positions interleave across classes, so the class is
// identified by where the events sit inside the prefix rather than by gross
// amplitude, and separability stays moderate at unit snr.
void fill_prefix_template(Mat& tpl, int class_id, int prefix_len, int class_count) {
    const int m = static_cast<int>(tpl.rows());
    constexpr double kPrefixEnergy = 16.0;  // per class, split across bumps
    constexpr int kBumps = 2;
    for (int c = 0; c < m; ++c) {
        for (int t = 0; t < prefix_len; ++t) {
            const double u = static_cast<double>(t) / std::max(1, prefix_len);
            tpl(c, t) = std::sqrt(2.0) * std::sin(2.0 * M_PI * u + 0.4 * c);
        }
    }
    const double sigma = std::max(1.5, prefix_len / 20.0);
    const int slots = kBumps * class_count;
    for (int j = 0; j < kBumps; ++j) {
        const int slot = j * class_count + class_id;
        const double center = prefix_len * (0.15 + 0.7 * slot / std::max(1, slots - 1));
        const double sign = (j % 2 == 0) ? 1.0 : -1.0;
        double energy = 0.0;
        std::vector<double> bump(prefix_len);
        for (int t = 0; t < prefix_len; ++t) {
            const double d = (t - center) / sigma;
            bump[t] = std::exp(-0.5 * d * d);
            energy += bump[t] * bump[t];
        }
        const double scale = std::sqrt(kPrefixEnergy / kBumps / std::max(1e-12, energy));
        for (int c = 0; c < m; ++c)
            for (int t = 0; t < prefix_len; ++t)
                tpl(c, t) += sign * scale * bump[t] * (c == class_id % m ? 1.0 : 0.5);
    }
}

void fill_suffix_template(Mat& tpl, int class_id, int prefix_len, int length) {
    const int m = static_cast<int>(tpl.rows());
    const int suffix_len = length - prefix_len;
    for (int c = 0; c < m; ++c)
        for (int t = prefix_len; t < length; ++t) {
            const double u = static_cast<double>(t - prefix_len) / std::max(1, suffix_len);
            tpl(c, t) = std::sqrt(2.0) * std::sin(2.0 * M_PI * (class_id + 1.0) * u + 0.7 * class_id + 0.4 * c);
        }
}

}  // namespace

Mat synthetic_class_template(const SyntheticConfig& cfg, int class_id) {
    const int prefix_len = cfg.length / 2;
    Mat prefix = Mat::Zero(cfg.channels, cfg.length);
    Mat suffix = Mat::Zero(cfg.channels, cfg.length);
    fill_prefix_template(prefix, class_id, prefix_len, cfg.class_count);
    fill_suffix_template(suffix, class_id, prefix_len, cfg.length);
    return cfg.prefix_snr * prefix + cfg.suffix_snr * suffix;
}

TimeSeriesDataset make_synthetic_late_signal(const SyntheticConfig& cfg) {
    if (cfg.class_count < 2) throw ArgumentError("synthetic generator needs C >= 2");
    if (!(cfg.suffix_snr > cfg.prefix_snr) || cfg.prefix_snr < 0)
        throw ArgumentError("synthetic generator needs suffix_snr > prefix_snr >= 0");
    if (cfg.n < cfg.class_count || cfg.length < 4) throw ArgumentError("synthetic generator: N or L too small");

    std::vector<Mat> class_mean(cfg.class_count);
    for (int c = 0; c < cfg.class_count; ++c) class_mean[c] = synthetic_class_template(cfg, c);

    RngStream rng(cfg.seed);
    TimeSeriesDataset ds;
    ds.name = "synthetic-late-signal";
    ds.class_count = cfg.class_count;
    const int n_test = static_cast<int>(std::floor(cfg.test_fraction * cfg.n + 0.5));
    for (int i = 0; i < cfg.n; ++i) {
        const int label = i % cfg.class_count;  // balanced by round-robin
        Mat x = class_mean[label] + rng.gaussian(cfg.channels, cfg.length);
        ds.samples.push_back(std::move(x));
        ds.labels.push_back(label);
        ds.split.push_back(i >= cfg.n - n_test ? Split::Test : Split::Train);
    }
    ds.validate();
    return ds;
}

}  // namespace gdpd
