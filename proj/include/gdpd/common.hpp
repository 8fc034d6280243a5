#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gdpd {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// ---- error types -----------------------------------------------------------

struct GdpdError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ArgumentError : GdpdError {
    using GdpdError::GdpdError;
};
struct ParseError : GdpdError {
    using GdpdError::GdpdError;
};
struct SchemaError : GdpdError {
    using GdpdError::GdpdError;
};
struct ShapeError : GdpdError {
    using GdpdError::GdpdError;
};
struct NumericalError : GdpdError {
    using GdpdError::GdpdError;
};
struct ImputationError : GdpdError {
    using GdpdError::GdpdError;
};
struct AggregationError : GdpdError {
    using GdpdError::GdpdError;
};
struct ConfigError : GdpdError {
    using GdpdError::GdpdError;
};
struct IoError : GdpdError {
    using GdpdError::GdpdError;
};

// ---- rng -------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Seeded stream wrapper. Every bulk-draw helper constructs its own
// distribution object so the consumed-state sequence depends only on the
// number of values drawn, never on distribution-internal caching.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    // Independent child stream; `tag` separates the per-purpose streams
    // (shuffle / init / diffusion / posterior) derived from one run seed.
    static RngStream child(std::uint64_t seed, std::uint64_t tag) {
        return RngStream(splitmix64(seed) ^ splitmix64(tag * 0x9e3779b97f4a7c15ULL + 1));
    }

    double uniform() {
        std::uniform_real_distribution<double> d(0.0, 1.0);
        return d(engine_);
    }

    double normal() {
        std::normal_distribution<double> d(0.0, 1.0);
        return d(engine_);
    }

    // inclusive bounds
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        std::uniform_int_distribution<std::int64_t> d(lo, hi);
        return d(engine_);
    }

    Mat gaussian(Eigen::Index rows, Eigen::Index cols) {
        std::normal_distribution<double> d(0.0, 1.0);
        Mat m(rows, cols);
        for (Eigen::Index c = 0; c < cols; ++c)
            for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = d(engine_);
        return m;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

// fraction-to-count rule used by every partial view: max(1, floor(f * n)),
// with a tiny epsilon so exact products like 0.2*100 don't land below the
// integer boundary.
inline int fraction_count(double fraction, int n) {
    const int k = static_cast<int>(std::floor(fraction * static_cast<double>(n) + 1e-9));
    return std::max(1, std::min(n, k));
}

}  // namespace gdpd
