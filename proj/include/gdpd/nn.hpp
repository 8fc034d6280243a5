#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gdpd/common.hpp"

namespace gdpd::nn {

// Sequence batch for recurrent stacks: one B x in matrix per time step.
using StepSeq = std::vector<Mat>;
// Activation map for convolutional stacks: one B x L matrix per channel.
using ChanSeq = std::vector<Mat>;

struct Param {
    Mat v;  // value
    Mat g;  // gradient accumulator, same shape
    std::string name;

    void init(Eigen::Index rows, Eigen::Index cols, const std::string& n) {
        v.setZero(rows, cols);
        g.setZero(rows, cols);
        name = n;
    }
    void zero_grad() { g.setZero(); }
};

// Non-owning view over a module's parameters, in registration order. The
// flat vector layout (column-major coefficients per parameter, parameters
// concatenated in order) is the checkpoint and gradient-check contract.
class ParamSet {
public:
    void add(Param& p) { items_.push_back(&p); }
    void add(const ParamSet& other) {
        items_.insert(items_.end(), other.items_.begin(), other.items_.end());
    }

    std::size_t size() const { return items_.size(); }
    Param& operator[](std::size_t i) { return *items_[i]; }
    const Param& operator[](std::size_t i) const { return *items_[i]; }

    std::size_t count() const;  // total scalar count
    void zero_grads();
    Vec flatten() const;
    Vec flatten_grads() const;
    void unflatten(const Vec& flat);
    std::uint64_t value_checksum() const;  // FNV-1a over raw bytes

private:
    std::vector<Param*> items_;
};

// uniform fan-in init: U[-1/sqrt(fan_in), 1/sqrt(fan_in)]
void fan_in_init(Param& p, int fan_in, RngStream& rng);

struct Adam {
    double lr;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    Adam(ParamSet params, double learning_rate);
    void step();

    ParamSet params;
    std::int64_t t = 0;
    std::vector<Mat> m, v;
};

// ---- linear ------------------------------------------------------------------

struct Linear {
    Param W;  // in x out
    Param b;  // 1 x out

    void init(int in, int out, RngStream& rng, const std::string& name);
    ParamSet params();

    Mat fwd(const Mat& x) const { return (x * W.v).rowwise() + b.v.row(0); }
    // dx may be null when the input gradient is not needed
    void bwd(const Mat& x, const Mat& dy, Mat* dx, bool accumulate_param_grads = true);

    int in() const { return static_cast<int>(W.v.rows()); }
    int out() const { return static_cast<int>(W.v.cols()); }
};

// ---- activations / classification head ---------------------------------------

Mat softmax_rows(const Mat& logits);

// mean cross-entropy; when dlogits is non-null it receives (softmax - onehot)/B
double cross_entropy(const Mat& logits, const std::vector<int>& labels, Mat* dlogits = nullptr);

inline Mat silu(const Mat& x) {
    return x.array() * (1.0 / (1.0 + (-x.array()).exp()));
}
inline Mat silu_grad(const Mat& x) {
    const auto s = 1.0 / (1.0 + (-x.array()).exp());
    return (s * (1.0 + x.array() * (1.0 - s))).matrix();
}

// ---- recurrent layer -----------------------------------------------------------

// Standard LSTM cell stack over a sequence; gate order within the 4H block is
// (input, forget, candidate, output). Forget-gate bias starts at 1.
struct LstmLayer {
    Param Wx;  // in x 4H
    Param Wh;  // H x 4H
    Param b;   // 1 x 4H
    int in_dim = 0, hidden = 0;

    void init(int in, int h, RngStream& rng, const std::string& name);
    ParamSet params();

    struct Cache {
        StepSeq x;                     // inputs
        StepSeq gate_i, gate_f, gate_g, gate_o;
        StepSeq c, tanh_c;
        StepSeq h;
    };

    StepSeq fwd(const StepSeq& xs, Cache* cache = nullptr) const;
    // dh: per-step output gradients (taps and upper layers added in by caller)
    void bwd(const Cache& cache, const StepSeq& dh, StepSeq* dx);
};

// ---- convolutional pieces -------------------------------------------------------

// 1-D convolution, stride 1, "same" output length (left pad (k-1)/2, right pad
// k/2). Weight layout: (in_ch * k) x out_ch, row index ci * k + dk.
struct Conv1d {
    Param W;
    Param b;  // 1 x out_ch
    int in_ch = 0, out_ch = 0, k = 0;

    void init(int in_channels, int out_channels, int kernel, RngStream& rng, const std::string& name);
    ParamSet params();

    struct Cache {
        Mat cols;  // (B*L) x (in_ch*k)
        int B = 0, L = 0;
    };

    ChanSeq fwd(const ChanSeq& x, Cache* cache = nullptr) const;
    void bwd(const Cache& cache, const ChanSeq& dy, ChanSeq* dx);
};

// Per-channel batch normalization over (batch, time).
struct BatchNorm1d {
    Param gamma;  // 1 x C
    Param beta;   // 1 x C
    Param run_mean, run_var;  // 1 x C buffers, excluded from optimization
    double eps = 1e-5, momentum = 0.1;
    int channels = 0;

    void init(int c, const std::string& name);
    ParamSet params();

    struct Cache {
        ChanSeq xhat;
        Vec inv_std;
    };

    ChanSeq fwd(const ChanSeq& x, bool train, bool update_running, Cache* cache = nullptr);
    void bwd(const Cache& cache, const ChanSeq& dy, ChanSeq* dx);
};

struct ReluOp {
    struct Cache {
        ChanSeq y;
    };
    static ChanSeq fwd(const ChanSeq& x, Cache* cache = nullptr);
    static void bwd(const Cache& cache, const ChanSeq& dy, ChanSeq* dx);
};

// k=3, stride 1, same-length max pooling (pads with -inf).
struct MaxPool3 {
    struct Cache {
        std::vector<Eigen::MatrixXi> argmax;  // per channel, B x L source index
        int L = 0;
    };
    static ChanSeq fwd(const ChanSeq& x, Cache* cache = nullptr);
    static void bwd(const Cache& cache, const ChanSeq& dy, ChanSeq* dx);
};

// mean over time per channel: [C](B x L) -> B x C
Mat global_avg_pool(const ChanSeq& x);
void global_avg_pool_bwd(const Mat& dfeat, int L, ChanSeq* dx);

}  // namespace gdpd::nn
