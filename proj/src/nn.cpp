#include "gdpd/nn.hpp"

#include <cmath>
#include <cstring>

namespace gdpd::nn {

// ---- ParamSet ------------------------------------------------------------------

std::size_t ParamSet::count() const {
    std::size_t n = 0;
    for (const auto* p : items_) n += static_cast<std::size_t>(p->v.size());
    return n;
}

void ParamSet::zero_grads() {
    for (auto* p : items_) p->zero_grad();
}

Vec ParamSet::flatten() const {
    Vec out(count());
    Eigen::Index at = 0;
    for (const auto* p : items_) {
        out.segment(at, p->v.size()) = Eigen::Map<const Vec>(p->v.data(), p->v.size());
        at += p->v.size();
    }
    return out;
}

Vec ParamSet::flatten_grads() const {
    Vec out(count());
    Eigen::Index at = 0;
    for (const auto* p : items_) {
        out.segment(at, p->g.size()) = Eigen::Map<const Vec>(p->g.data(), p->g.size());
        at += p->g.size();
    }
    return out;
}

void ParamSet::unflatten(const Vec& flat) {
    if (flat.size() != static_cast<Eigen::Index>(count()))
        throw ShapeError("unflatten: size mismatch");
    Eigen::Index at = 0;
    for (auto* p : items_) {
        Eigen::Map<Vec>(p->v.data(), p->v.size()) = flat.segment(at, p->v.size());
        at += p->v.size();
    }
}

std::uint64_t ParamSet::value_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto* p : items_) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p->v.data());
        const std::size_t n = static_cast<std::size_t>(p->v.size()) * sizeof(double);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

void fan_in_init(Param& p, int fan_in, RngStream& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
    for (Eigen::Index c = 0; c < p.v.cols(); ++c)
        for (Eigen::Index r = 0; r < p.v.rows(); ++r) p.v(r, c) = (2.0 * rng.uniform() - 1.0) * bound;
}

// ---- Adam ---------------------------------------------------------------------

Adam::Adam(ParamSet ps, double learning_rate) : lr(learning_rate), params(ps) {
    m.resize(params.size());
    v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m[i].setZero(params[i].v.rows(), params[i].v.cols());
        v[i].setZero(params[i].v.rows(), params[i].v.cols());
    }
}

void Adam::step() {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * p.g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * p.g.cwiseProduct(p.g);
        const auto mhat = m[i].array() / bc1;
        const auto vhat = v[i].array() / bc2;
        p.v.array() -= lr * mhat / (vhat.sqrt() + eps);
    }
}

// ---- Linear -------------------------------------------------------------------

void Linear::init(int in, int out, RngStream& rng, const std::string& name) {
    W.init(in, out, name + ".W");
    b.init(1, out, name + ".b");
    fan_in_init(W, in, rng);
}

ParamSet Linear::params() {
    ParamSet ps;
    ps.add(W);
    ps.add(b);
    return ps;
}

void Linear::bwd(const Mat& x, const Mat& dy, Mat* dx, bool accumulate_param_grads) {
    if (accumulate_param_grads) {
        W.g.noalias() += x.transpose() * dy;
        b.g.row(0) += dy.colwise().sum();
    }
    if (dx) dx->noalias() = dy * W.v.transpose();
}

// ---- classification ------------------------------------------------------------

Mat softmax_rows(const Mat& logits) {
    Mat out = logits;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double mx = out.row(r).maxCoeff();
        out.row(r) = (out.row(r).array() - mx).exp();
        out.row(r) /= out.row(r).sum();
    }
    return out;
}

double cross_entropy(const Mat& logits, const std::vector<int>& labels, Mat* dlogits) {
    const auto B = logits.rows();
    if (static_cast<Eigen::Index>(labels.size()) != B) throw ShapeError("cross_entropy: label count mismatch");
    double loss = 0.0;
    Mat probs(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < B; ++r) {
        if (labels[r] < 0 || labels[r] >= logits.cols()) throw ArgumentError("cross_entropy: label out of range");
        const double mx = logits.row(r).maxCoeff();
        const Eigen::RowVectorXd ex = (logits.row(r).array() - mx).exp();
        const double lse = mx + std::log(ex.sum());
        probs.row(r) = ex / ex.sum();
        loss += lse - logits(r, labels[r]);
    }
    loss /= static_cast<double>(B);
    if (dlogits) {
        *dlogits = probs;
        for (Eigen::Index r = 0; r < B; ++r) (*dlogits)(r, labels[r]) -= 1.0;
        *dlogits /= static_cast<double>(B);
    }
    return loss;
}

// ---- LSTM ----------------------------------------------------------------------

void LstmLayer::init(int in, int h, RngStream& rng, const std::string& name) {
    in_dim = in;
    hidden = h;
    Wx.init(in, 4 * h, name + ".Wx");
    Wh.init(h, 4 * h, name + ".Wh");
    b.init(1, 4 * h, name + ".b");
    fan_in_init(Wx, in, rng);
    fan_in_init(Wh, h, rng);
    b.v.block(0, h, 1, h).setConstant(1.0);  // forget gate bias
}

ParamSet LstmLayer::params() {
    ParamSet ps;
    ps.add(Wx);
    ps.add(Wh);
    ps.add(b);
    return ps;
}

namespace {
inline Mat sigmoid(const Mat& x) {
    return (1.0 / (1.0 + (-x.array()).exp())).matrix();
}
}  // namespace

StepSeq LstmLayer::fwd(const StepSeq& xs, Cache* cache) const {
    const int steps = static_cast<int>(xs.size());
    const auto B = xs[0].rows();
    const int H = hidden;

    // input projection batched over every step
    Mat xstack(B * steps, in_dim);
    for (int t = 0; t < steps; ++t) xstack.middleRows(t * B, B) = xs[t];
    Mat pre_x = (xstack * Wx.v).rowwise() + b.v.row(0);

    StepSeq out(steps);
    Mat h = Mat::Zero(B, H), c = Mat::Zero(B, H);
    if (cache) {
        cache->x = xs;
        cache->gate_i.resize(steps);
        cache->gate_f.resize(steps);
        cache->gate_g.resize(steps);
        cache->gate_o.resize(steps);
        cache->c.resize(steps);
        cache->tanh_c.resize(steps);
        cache->h.resize(steps);
    }
    for (int t = 0; t < steps; ++t) {
        Mat pre = pre_x.middleRows(t * B, B);
        pre.noalias() += h * Wh.v;
        const Mat gi = sigmoid(pre.leftCols(H));
        const Mat gf = sigmoid(pre.middleCols(H, H));
        const Mat gg = pre.middleCols(2 * H, H).array().tanh().matrix();
        const Mat go = sigmoid(pre.rightCols(H));
        c = gf.cwiseProduct(c) + gi.cwiseProduct(gg);
        const Mat tc = c.array().tanh().matrix();
        h = go.cwiseProduct(tc);
        out[t] = h;
        if (cache) {
            cache->gate_i[t] = gi;
            cache->gate_f[t] = gf;
            cache->gate_g[t] = gg;
            cache->gate_o[t] = go;
            cache->c[t] = c;
            cache->tanh_c[t] = tc;
            cache->h[t] = h;
        }
    }
    return out;
}

void LstmLayer::bwd(const Cache& cache, const StepSeq& dh_in, StepSeq* dx) {
    const int steps = static_cast<int>(cache.x.size());
    const auto B = cache.x[0].rows();
    const int H = hidden;

    Mat dpre_stack(B * steps, 4 * H);
    Mat dh_next = Mat::Zero(B, H);  // gradient arriving from step t+1
    Mat dc_next = Mat::Zero(B, H);
    if (dx) dx->assign(steps, Mat());

    for (int t = steps - 1; t >= 0; --t) {
        const Mat dh = dh_in[t] + dh_next;
        const auto& gi = cache.gate_i[t];
        const auto& gf = cache.gate_f[t];
        const auto& gg = cache.gate_g[t];
        const auto& go = cache.gate_o[t];
        const auto& tc = cache.tanh_c[t];

        const Mat do_ = dh.cwiseProduct(tc);
        Mat dc = dc_next + dh.cwiseProduct(go).cwiseProduct((1.0 - tc.array().square()).matrix());
        const Mat di = dc.cwiseProduct(gg);
        const Mat dg = dc.cwiseProduct(gi);
        Mat df;
        if (t > 0)
            df = dc.cwiseProduct(cache.c[t - 1]);
        else
            df = Mat::Zero(B, H);  // c before the first step is zero
        dc_next = dc.cwiseProduct(gf);

        auto dpre = dpre_stack.middleRows(t * B, B);
        dpre.leftCols(H) = di.cwiseProduct(gi).cwiseProduct((1.0 - gi.array()).matrix());
        dpre.middleCols(H, H) = df.cwiseProduct(gf).cwiseProduct((1.0 - gf.array()).matrix());
        dpre.middleCols(2 * H, H) = dg.cwiseProduct((1.0 - gg.array().square()).matrix());
        dpre.rightCols(H) = do_.cwiseProduct(go).cwiseProduct((1.0 - go.array()).matrix());

        dh_next.noalias() = dpre * Wh.v.transpose();
        if (t > 0) Wh.g.noalias() += cache.h[t - 1].transpose() * dpre;
        if (dx) (*dx)[t].noalias() = dpre * Wx.v.transpose();
    }

    Mat xstack(B * steps, in_dim);
    for (int t = 0; t < steps; ++t) xstack.middleRows(t * B, B) = cache.x[t];
    Wx.g.noalias() += xstack.transpose() * dpre_stack;
    b.g.row(0) += dpre_stack.colwise().sum();
}

// ---- Conv1d --------------------------------------------------------------------

void Conv1d::init(int in_channels, int out_channels, int kernel, RngStream& rng, const std::string& name) {
    in_ch = in_channels;
    out_ch = out_channels;
    k = kernel;
    W.init(in_ch * k, out_ch, name + ".W");
    b.init(1, out_ch, name + ".b");
    fan_in_init(W, in_ch * k, rng);
}

ParamSet Conv1d::params() {
    ParamSet ps;
    ps.add(W);
    ps.add(b);
    return ps;
}

ChanSeq Conv1d::fwd(const ChanSeq& x, Cache* cache) const {
    const auto B = x[0].rows();
    const int L = static_cast<int>(x[0].cols());
    const int pad_left = (k - 1) / 2;

    Mat cols = Mat::Zero(B * L, in_ch * k);
    for (int ci = 0; ci < in_ch; ++ci)
        for (int dk = 0; dk < k; ++dk) {
            const int col = ci * k + dk;
            for (int t = 0; t < L; ++t) {
                const int src = t + dk - pad_left;
                if (src < 0 || src >= L) continue;
                cols.col(col).segment(t * B, B) = x[ci].col(src);
            }
        }

    Mat y = (cols * W.v).rowwise() + b.v.row(0);
    ChanSeq out(out_ch);
    for (int co = 0; co < out_ch; ++co) out[co] = Eigen::Map<const Mat>(y.col(co).data(), B, L);

    if (cache) {
        cache->cols = std::move(cols);
        cache->B = static_cast<int>(B);
        cache->L = L;
    }
    return out;
}

void Conv1d::bwd(const Cache& cache, const ChanSeq& dy, ChanSeq* dx) {
    const int B = cache.B, L = cache.L;
    const int pad_left = (k - 1) / 2;

    Mat dy_stack(B * L, out_ch);
    for (int co = 0; co < out_ch; ++co) Eigen::Map<Mat>(dy_stack.col(co).data(), B, L) = dy[co];

    W.g.noalias() += cache.cols.transpose() * dy_stack;
    b.g.row(0) += dy_stack.colwise().sum();

    if (dx) {
        Mat dcols = dy_stack * W.v.transpose();  // (B*L) x (in_ch*k)
        dx->assign(in_ch, Mat::Zero(B, L));
        for (int ci = 0; ci < in_ch; ++ci)
            for (int dk = 0; dk < k; ++dk) {
                const int col = ci * k + dk;
                for (int t = 0; t < L; ++t) {
                    const int src = t + dk - pad_left;
                    if (src < 0 || src >= L) continue;
                    (*dx)[ci].col(src) += dcols.col(col).segment(t * B, B);
                }
            }
    }
}

// ---- BatchNorm1d ----------------------------------------------------------------

void BatchNorm1d::init(int c, const std::string& name) {
    channels = c;
    gamma.init(1, c, name + ".gamma");
    beta.init(1, c, name + ".beta");
    gamma.v.setOnes();
    run_mean.init(1, c, name + ".run_mean");
    run_var.init(1, c, name + ".run_var");
    run_var.v.setOnes();
}

ParamSet BatchNorm1d::params() {
    ParamSet ps;
    ps.add(gamma);
    ps.add(beta);
    return ps;
}

ChanSeq BatchNorm1d::fwd(const ChanSeq& x, bool train, bool update_running, Cache* cache) {
    ChanSeq out(channels);
    if (cache) {
        cache->xhat.resize(channels);
        cache->inv_std.resize(channels);
    }
    for (int c = 0; c < channels; ++c) {
        double mean, var;
        if (train) {
            mean = x[c].mean();
            var = std::max(x[c].array().square().mean() - mean * mean, 0.0);
            if (update_running) {
                run_mean.v(0, c) = (1.0 - momentum) * run_mean.v(0, c) + momentum * mean;
                run_var.v(0, c) = (1.0 - momentum) * run_var.v(0, c) + momentum * var;
            }
        } else {
            mean = run_mean.v(0, c);
            var = run_var.v(0, c);
        }
        const double inv_std = 1.0 / std::sqrt(var + eps);
        Mat xhat = ((x[c].array() - mean) * inv_std).matrix();
        out[c] = (gamma.v(0, c) * xhat.array() + beta.v(0, c)).matrix();
        if (cache) {
            cache->xhat[c] = std::move(xhat);
            cache->inv_std(c) = inv_std;
        }
    }
    return out;
}

void BatchNorm1d::bwd(const Cache& cache, const ChanSeq& dy, ChanSeq* dx) {
    if (dx) dx->resize(channels);
    for (int c = 0; c < channels; ++c) {
        const auto& xhat = cache.xhat[c];
        gamma.g(0, c) += dy[c].cwiseProduct(xhat).sum();
        beta.g(0, c) += dy[c].sum();
        if (dx) {
            const double n = static_cast<double>(xhat.size());
            const double mean_dy = dy[c].sum() / n;
            const double mean_dy_xhat = dy[c].cwiseProduct(xhat).sum() / n;
            (*dx)[c] = (gamma.v(0, c) * cache.inv_std(c)) *
                       ((dy[c].array() - mean_dy) - xhat.array() * mean_dy_xhat).matrix();
        }
    }
}

// ---- ReLU / MaxPool / GAP ---------------------------------------------------------

ChanSeq ReluOp::fwd(const ChanSeq& x, Cache* cache) {
    ChanSeq out(x.size());
    for (std::size_t c = 0; c < x.size(); ++c) out[c] = x[c].cwiseMax(0.0);
    if (cache) cache->y = out;
    return out;
}

void ReluOp::bwd(const Cache& cache, const ChanSeq& dy, ChanSeq* dx) {
    dx->resize(dy.size());
    for (std::size_t c = 0; c < dy.size(); ++c)
        (*dx)[c] = dy[c].cwiseProduct((cache.y[c].array() > 0.0).cast<double>().matrix());
}

ChanSeq MaxPool3::fwd(const ChanSeq& x, Cache* cache) {
    const auto B = x[0].rows();
    const int L = static_cast<int>(x[0].cols());
    ChanSeq out(x.size());
    if (cache) {
        cache->argmax.resize(x.size());
        cache->L = L;
    }
    for (std::size_t c = 0; c < x.size(); ++c) {
        out[c].resize(B, L);
        Eigen::MatrixXi am(B, L);
        for (int t = 0; t < L; ++t) {
            const int lo = std::max(0, t - 1), hi = std::min(L - 1, t + 1);
            for (Eigen::Index r = 0; r < B; ++r) {
                int best = lo;
                for (int s = lo + 1; s <= hi; ++s)
                    if (x[c](r, s) > x[c](r, best)) best = s;
                out[c](r, t) = x[c](r, best);
                am(r, t) = best;
            }
        }
        if (cache) cache->argmax[c] = std::move(am);
    }
    return out;
}

void MaxPool3::bwd(const Cache& cache, const ChanSeq& dy, ChanSeq* dx) {
    const auto B = dy[0].rows();
    dx->assign(dy.size(), Mat::Zero(B, cache.L));
    for (std::size_t c = 0; c < dy.size(); ++c)
        for (int t = 0; t < cache.L; ++t)
            for (Eigen::Index r = 0; r < B; ++r) (*dx)[c](r, cache.argmax[c](r, t)) += dy[c](r, t);
}

Mat global_avg_pool(const ChanSeq& x) {
    Mat out(x[0].rows(), static_cast<Eigen::Index>(x.size()));
    for (std::size_t c = 0; c < x.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = x[c].rowwise().mean();
    return out;
}

void global_avg_pool_bwd(const Mat& dfeat, int L, ChanSeq* dx) {
    dx->resize(static_cast<std::size_t>(dfeat.cols()));
    for (Eigen::Index c = 0; c < dfeat.cols(); ++c)
        (*dx)[static_cast<std::size_t>(c)] = (dfeat.col(c) / static_cast<double>(L)).replicate(1, L);
}

}  // namespace gdpd::nn
