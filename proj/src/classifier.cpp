#include "gdpd/classifier.hpp"

#include <cmath>

namespace gdpd {

Family family_from_string(const std::string& s) {
    if (s == "recurrent") return Family::Recurrent;
    if (s == "residual-conv") return Family::ResidualConv;
    if (s == "inception-conv") return Family::InceptionConv;
    throw ArgumentError("unknown family: " + s);
}

std::string family_to_string(Family f) {
    switch (f) {
        case Family::Recurrent: return "recurrent";
        case Family::ResidualConv: return "residual-conv";
        case Family::InceptionConv: return "inception-conv";
    }
    return "?";
}

void ClassifierSpec::validate() const {
    if (depth < 1 || width < 1 || class_count < 1) throw ArgumentError("depth, width, class_count must be >= 1");
    if (feature_layer < 1 || feature_layer > depth) throw ArgumentError("feature_layer must be in [1, depth]");
    if (input_channels < 1) throw ArgumentError("input_channels must be >= 1");
}

int ClassifierSpec::feature_dim(int layer) const {
    if (layer < 1 || layer > depth) throw ArgumentError("feature layer out of range");
    return width;
}

// ---- Batch ----------------------------------------------------------------------

Batch Batch::from_dataset(const TimeSeriesDataset& ds, const std::vector<int>& idx) {
    Batch b;
    const int m = ds.channels(), l = ds.length();
    b.channels.assign(m, Mat(static_cast<Eigen::Index>(idx.size()), l));
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < m; ++c) b.channels[c].row(static_cast<Eigen::Index>(r)) = ds.samples[idx[r]].row(c);
    return b;
}

Batch Batch::from_features(const Mat& z) {
    Batch b;
    b.channels.assign(static_cast<std::size_t>(z.cols()), Mat(z.rows(), 1));
    for (Eigen::Index c = 0; c < z.cols(); ++c) b.channels[static_cast<std::size_t>(c)].col(0) = z.col(c);
    return b;
}

nn::StepSeq Batch::to_steps() const {
    nn::StepSeq steps(static_cast<std::size_t>(len()), Mat(batch(), chans()));
    for (int t = 0; t < len(); ++t)
        for (int c = 0; c < chans(); ++c) steps[static_cast<std::size_t>(t)].col(c) = channels[c].col(t);
    return steps;
}

namespace {

Mat chanseq_to_feature(const nn::ChanSeq& x) {  // length-1 activation -> B x C
    Mat z(x[0].rows(), static_cast<Eigen::Index>(x.size()));
    for (std::size_t c = 0; c < x.size(); ++c) z.col(static_cast<Eigen::Index>(c)) = x[c].col(0);
    return z;
}

// ---- recurrent family -------------------------------------------------------------

class RecurrentBackbone : public Backbone {
public:
    RecurrentBackbone(const ClassifierSpec& spec, RngStream& rng) : spec_(spec) {
        layers_.resize(spec.depth);
        for (int l = 0; l < spec.depth; ++l)
            layers_[l].init(l == 0 ? spec.input_channels : spec.width, spec.width, rng,
                            "lstm" + std::to_string(l + 1));
    }

    nn::ParamSet params() override {
        nn::ParamSet ps;
        for (auto& l : layers_) ps.add(l.params());
        return ps;
    }

    struct RCtx : Ctx {
        int from_layer = 0;
        bool trainable = false;
        std::vector<nn::LstmLayer::Cache> caches;
        std::vector<Mat> taps;  // final-step h per executed layer
        int steps = 0;
    };

    std::unique_ptr<Ctx> forward(const Batch& x, int from_layer, bool train, bool) override {
        auto ctx = std::make_unique<RCtx>();
        ctx->from_layer = from_layer;
        ctx->trainable = train;
        nn::StepSeq seq = x.to_steps();
        ctx->steps = static_cast<int>(seq.size());
        const int nrun = spec_.depth - from_layer;
        if (train) ctx->caches.resize(nrun);
        ctx->taps.resize(nrun);
        for (int i = 0; i < nrun; ++i) {
            seq = layers_[from_layer + i].fwd(seq, train ? &ctx->caches[i] : nullptr);
            ctx->taps[i] = seq.back();
        }
        return ctx;
    }

    Mat feature(const Ctx& ctx_in, int layer) const override {
        const auto& ctx = static_cast<const RCtx&>(ctx_in);
        const int i = layer - 1 - ctx.from_layer;
        if (i < 0 || i >= static_cast<int>(ctx.taps.size())) throw ArgumentError("feature layer not executed");
        return ctx.taps[i];
    }

    void backward(Ctx& ctx_in, const std::map<int, Mat>& dtap, Mat* dx_in) override {
        auto& ctx = static_cast<RCtx&>(ctx_in);
        if (!ctx.trainable) throw GdpdError("backward on an inference-mode context");
        const int nrun = static_cast<int>(ctx.caches.size());
        const auto B = ctx.caches[0].x[0].rows();

        nn::StepSeq dh(ctx.steps);
        for (int t = 0; t < ctx.steps; ++t) dh[t] = Mat::Zero(B, spec_.width);
        for (int i = nrun - 1; i >= 0; --i) {
            const int layer = ctx.from_layer + i + 1;
            if (auto it = dtap.find(layer); it != dtap.end()) dh[ctx.steps - 1] += it->second;
            nn::StepSeq dx;
            const bool need_dx = (i > 0) || (dx_in != nullptr);
            layers_[ctx.from_layer + i].bwd(ctx.caches[i], dh, need_dx ? &dx : nullptr);
            if (i > 0)
                dh = std::move(dx);
            else if (dx_in)
                *dx_in = dx[0];  // continuation input was a single step
        }
    }

private:
    ClassifierSpec spec_;
    std::vector<nn::LstmLayer> layers_;
};

// ---- residual conv family ----------------------------------------------------------

// Per block: conv8-BN-ReLU, conv5-BN-ReLU, conv3-BN, plus a 1x1 conv+BN
// shortcut when the channel count changes; sum then ReLU.
class ResConvBackbone : public Backbone {
public:
    ResConvBackbone(const ClassifierSpec& spec, RngStream& rng) : spec_(spec) {
        blocks_.resize(spec.depth);
        for (int bl = 0; bl < spec.depth; ++bl) {
            const int in = bl == 0 ? spec.input_channels : spec.width;
            auto& b = blocks_[bl];
            const std::string n = "res" + std::to_string(bl + 1);
            b.conv1.init(in, spec.width, 8, rng, n + ".conv8");
            b.conv2.init(spec.width, spec.width, 5, rng, n + ".conv5");
            b.conv3.init(spec.width, spec.width, 3, rng, n + ".conv3");
            b.bn1.init(spec.width, n + ".bn1");
            b.bn2.init(spec.width, n + ".bn2");
            b.bn3.init(spec.width, n + ".bn3");
            b.has_shortcut_conv = in != spec.width;
            if (b.has_shortcut_conv) {
                b.conv_s.init(in, spec.width, 1, rng, n + ".convS");
                b.bn_s.init(spec.width, n + ".bnS");
            }
        }
    }

    nn::ParamSet params() override {
        nn::ParamSet ps;
        for (auto& b : blocks_) {
            ps.add(b.conv1.params());
            ps.add(b.bn1.params());
            ps.add(b.conv2.params());
            ps.add(b.bn2.params());
            ps.add(b.conv3.params());
            ps.add(b.bn3.params());
            if (b.has_shortcut_conv) {
                ps.add(b.conv_s.params());
                ps.add(b.bn_s.params());
            }
        }
        return ps;
    }

    nn::ParamSet state() override {
        nn::ParamSet ps;
        for (auto& b : blocks_) {
            for (auto* bn : {&b.bn1, &b.bn2, &b.bn3}) {
                ps.add(bn->run_mean);
                ps.add(bn->run_var);
            }
            if (b.has_shortcut_conv) {
                ps.add(b.bn_s.run_mean);
                ps.add(b.bn_s.run_var);
            }
        }
        return ps;
    }

    struct BlockCtx {
        nn::Conv1d::Cache c1, c2, c3, cs;
        nn::BatchNorm1d::Cache b1, b2, b3, bs;
        nn::ReluOp::Cache r1, r2, r_out;
    };
    struct RCtx : Ctx {
        int from_layer = 0;
        bool trainable = false;
        int L = 0;
        std::vector<BlockCtx> blocks;
        std::vector<Mat> taps;
    };

    std::unique_ptr<Ctx> forward(const Batch& x, int from_layer, bool train, bool update_running) override {
        auto ctx = std::make_unique<RCtx>();
        ctx->from_layer = from_layer;
        ctx->trainable = train;
        ctx->L = x.len();
        nn::ChanSeq act = x.channels;
        const int nrun = spec_.depth - from_layer;
        if (train) ctx->blocks.resize(nrun);
        ctx->taps.resize(nrun);
        for (int i = 0; i < nrun; ++i) {
            auto& blk = blocks_[from_layer + i];
            BlockCtx* bc = train ? &ctx->blocks[i] : nullptr;
            nn::ChanSeq h = blk.conv1.fwd(act, bc ? &bc->c1 : nullptr);
            h = blk.bn1.fwd(h, train, update_running, bc ? &bc->b1 : nullptr);
            h = nn::ReluOp::fwd(h, bc ? &bc->r1 : nullptr);
            h = blk.conv2.fwd(h, bc ? &bc->c2 : nullptr);
            h = blk.bn2.fwd(h, train, update_running, bc ? &bc->b2 : nullptr);
            h = nn::ReluOp::fwd(h, bc ? &bc->r2 : nullptr);
            h = blk.conv3.fwd(h, bc ? &bc->c3 : nullptr);
            h = blk.bn3.fwd(h, train, update_running, bc ? &bc->b3 : nullptr);
            nn::ChanSeq sc;
            if (blk.has_shortcut_conv) {
                sc = blk.conv_s.fwd(act, bc ? &bc->cs : nullptr);
                sc = blk.bn_s.fwd(sc, train, update_running, bc ? &bc->bs : nullptr);
            } else {
                sc = act;
            }
            for (std::size_t c = 0; c < h.size(); ++c) h[c] += sc[c];
            act = nn::ReluOp::fwd(h, bc ? &bc->r_out : nullptr);
            ctx->taps[i] = nn::global_avg_pool(act);
        }
        return ctx;
    }

    Mat feature(const Ctx& ctx_in, int layer) const override {
        const auto& ctx = static_cast<const RCtx&>(ctx_in);
        const int i = layer - 1 - ctx.from_layer;
        if (i < 0 || i >= static_cast<int>(ctx.taps.size())) throw ArgumentError("feature layer not executed");
        return ctx.taps[i];
    }

    void backward(Ctx& ctx_in, const std::map<int, Mat>& dtap, Mat* dx_in) override {
        auto& ctx = static_cast<RCtx&>(ctx_in);
        if (!ctx.trainable) throw GdpdError("backward on an inference-mode context");
        const int nrun = static_cast<int>(ctx.blocks.size());
        const auto B = ctx.taps[0].rows();

        nn::ChanSeq dout(spec_.width, Mat::Zero(B, ctx.L));
        for (int i = nrun - 1; i >= 0; --i) {
            auto& blk = blocks_[ctx.from_layer + i];
            auto& bc = ctx.blocks[i];
            if (auto it = dtap.find(ctx.from_layer + i + 1); it != dtap.end()) {
                nn::ChanSeq dgap;
                nn::global_avg_pool_bwd(it->second, ctx.L, &dgap);
                for (std::size_t c = 0; c < dout.size(); ++c) dout[c] += dgap[c];
            }
            nn::ChanSeq dsum;
            nn::ReluOp::bwd(bc.r_out, dout, &dsum);

            nn::ChanSeq d, dmain;
            blk.bn3.bwd(bc.b3, dsum, &d);
            blk.conv3.bwd(bc.c3, d, &dmain);
            nn::ReluOp::bwd(bc.r2, dmain, &d);
            blk.bn2.bwd(bc.b2, d, &dmain);
            blk.conv2.bwd(bc.c2, dmain, &d);
            nn::ReluOp::bwd(bc.r1, d, &dmain);
            blk.bn1.bwd(bc.b1, dmain, &d);
            const bool need_dx = (i > 0) || (dx_in != nullptr);
            nn::ChanSeq dx_block;
            blk.conv1.bwd(bc.c1, d, need_dx ? &dx_block : nullptr);

            if (blk.has_shortcut_conv) {
                nn::ChanSeq ds, dxs;
                blk.bn_s.bwd(bc.bs, dsum, &ds);
                blk.conv_s.bwd(bc.cs, ds, need_dx ? &dxs : nullptr);
                if (need_dx)
                    for (std::size_t c = 0; c < dx_block.size(); ++c) dx_block[c] += dxs[c];
            } else if (need_dx) {
                for (std::size_t c = 0; c < dx_block.size(); ++c) dx_block[c] += dsum[c];
            }

            if (i > 0)
                dout = std::move(dx_block);
            else if (dx_in)
                *dx_in = chanseq_to_feature(dx_block);
        }
    }

private:
    struct Block {
        nn::Conv1d conv1, conv2, conv3, conv_s;
        nn::BatchNorm1d bn1, bn2, bn3, bn_s;
        bool has_shortcut_conv = false;
    };
    ClassifierSpec spec_;
    std::vector<Block> blocks_;
};

// ---- inception family ---------------------------------------------------------------

// Block: optional 1x1 bottleneck (32 channels, used when the input has more
// than one channel), conv branches with kernels 40/20/10, a maxpool3 + 1x1
// branch, channel concat, BN, ReLU. A 1x1 conv+BN shortcut from three blocks
// back joins in after every third block. In continuation mode (from_layer >
// 0) joins whose source precedes the entry layer are skipped, since that
// activation was never computed.
class InceptionBackbone : public Backbone {
public:
    static constexpr int kBottleneck = 32;
    static constexpr int kKernels[3] = {40, 20, 10};

    InceptionBackbone(const ClassifierSpec& spec, RngStream& rng) : spec_(spec) {
        blocks_.resize(spec.depth);
        for (int bl = 0; bl < spec.depth; ++bl) {
            auto& b = blocks_[bl];
            const int in = bl == 0 ? spec.input_channels : spec.width;
            const std::string n = "inc" + std::to_string(bl + 1);
            b.has_bneck = in > 1;
            const int branch_in = b.has_bneck ? kBottleneck : in;
            if (b.has_bneck) b.bneck.init(in, kBottleneck, 1, rng, n + ".bneck");
            const int rem = spec.width % 4;
            for (int j = 0; j < 4; ++j) b.branch_out[j] = spec.width / 4 + (j < rem ? 1 : 0);
            for (int j = 0; j < 3; ++j)
                b.branch[j].init(branch_in, b.branch_out[j], kKernels[j], rng,
                                 n + ".k" + std::to_string(kKernels[j]));
            b.pool_conv.init(in, b.branch_out[3], 1, rng, n + ".pool1x1");
            b.bn.init(spec.width, n + ".bn");
            b.is_join = (bl + 1) % 3 == 0;
            if (b.is_join) {
                const int src_in = bl - 3 < 0 ? spec.input_channels : spec.width;
                b.res_conv.init(src_in, spec.width, 1, rng, n + ".res1x1");
                b.res_bn.init(spec.width, n + ".resbn");
            }
        }
    }

    nn::ParamSet params() override {
        nn::ParamSet ps;
        for (auto& b : blocks_) {
            if (b.has_bneck) ps.add(b.bneck.params());
            for (int j = 0; j < 3; ++j) ps.add(b.branch[j].params());
            ps.add(b.pool_conv.params());
            ps.add(b.bn.params());
            if (b.is_join) {
                ps.add(b.res_conv.params());
                ps.add(b.res_bn.params());
            }
        }
        return ps;
    }

    nn::ParamSet state() override {
        nn::ParamSet ps;
        for (auto& b : blocks_) {
            ps.add(b.bn.run_mean);
            ps.add(b.bn.run_var);
            if (b.is_join) {
                ps.add(b.res_bn.run_mean);
                ps.add(b.res_bn.run_var);
            }
        }
        return ps;
    }

    struct BlockCtx {
        nn::Conv1d::Cache bneck_c, br[3], pool_c, res_c;
        nn::MaxPool3::Cache pool;
        nn::BatchNorm1d::Cache bn, res_bn;
        nn::ReluOp::Cache relu, res_relu;
        bool joined = false;
    };
    struct ICtx : Ctx {
        int from_layer = 0;
        bool trainable = false;
        int L = 0;
        std::vector<BlockCtx> blocks;
        std::vector<Mat> taps;
    };

    std::unique_ptr<Ctx> forward(const Batch& x, int from_layer, bool train, bool update_running) override {
        auto ctx = std::make_unique<ICtx>();
        ctx->from_layer = from_layer;
        ctx->trainable = train;
        ctx->L = x.len();
        const int nrun = spec_.depth - from_layer;
        if (train) ctx->blocks.resize(nrun);
        ctx->taps.resize(nrun);

        nn::ChanSeq act = x.channels;
        nn::ChanSeq res_src = act;  // raw input first, then each join output

        for (int i = 0; i < nrun; ++i) {
            const int bl = from_layer + i;
            auto& blk = blocks_[bl];
            BlockCtx* bc = train ? &ctx->blocks[i] : nullptr;

            nn::ChanSeq trunk = blk.has_bneck ? blk.bneck.fwd(act, bc ? &bc->bneck_c : nullptr) : act;
            nn::ChanSeq cat;
            cat.reserve(spec_.width);
            for (int j = 0; j < 3; ++j) {
                auto y = blk.branch[j].fwd(trunk, bc ? &bc->br[j] : nullptr);
                for (auto& m : y) cat.push_back(std::move(m));
            }
            auto pooled = nn::MaxPool3::fwd(act, bc ? &bc->pool : nullptr);
            auto y3 = blk.pool_conv.fwd(pooled, bc ? &bc->pool_c : nullptr);
            for (auto& m : y3) cat.push_back(std::move(m));

            auto z = blk.bn.fwd(cat, train, update_running, bc ? &bc->bn : nullptr);
            z = nn::ReluOp::fwd(z, bc ? &bc->relu : nullptr);

            if (blk.is_join) {
                const bool src_ok = (bl - 3 >= from_layer) || (bl - 3 < 0 && from_layer == 0);
                if (src_ok) {
                    auto rs = blk.res_conv.fwd(res_src, bc ? &bc->res_c : nullptr);
                    rs = blk.res_bn.fwd(rs, train, update_running, bc ? &bc->res_bn : nullptr);
                    for (std::size_t c = 0; c < z.size(); ++c) z[c] += rs[c];
                    z = nn::ReluOp::fwd(z, bc ? &bc->res_relu : nullptr);
                    if (bc) bc->joined = true;
                }
                res_src = z;
            }
            act = std::move(z);
            ctx->taps[i] = nn::global_avg_pool(act);
        }
        return ctx;
    }

    Mat feature(const Ctx& ctx_in, int layer) const override {
        const auto& ctx = static_cast<const ICtx&>(ctx_in);
        const int i = layer - 1 - ctx.from_layer;
        if (i < 0 || i >= static_cast<int>(ctx.taps.size())) throw ArgumentError("feature layer not executed");
        return ctx.taps[i];
    }

    void backward(Ctx& ctx_in, const std::map<int, Mat>& dtap, Mat* dx_in) override {
        auto& ctx = static_cast<ICtx&>(ctx_in);
        if (!ctx.trainable) throw GdpdError("backward on an inference-mode context");
        const int nrun = static_cast<int>(ctx.blocks.size());
        const auto B = ctx.taps[0].rows();

        // slot 0 is the pass input; slot i+1 is block (from_layer+i)'s output
        std::vector<nn::ChanSeq> dout(nrun + 1);
        auto ensure = [&](int slot, int chans) {
            if (dout[slot].empty()) dout[slot].assign(chans, Mat::Zero(B, ctx.L));
        };
        ensure(nrun, spec_.width);

        for (int i = nrun - 1; i >= 0; --i) {
            const int bl = ctx.from_layer + i;
            auto& blk = blocks_[bl];
            auto& bc = ctx.blocks[i];
            nn::ChanSeq d = std::move(dout[i + 1]);
            if (d.empty()) d.assign(spec_.width, Mat::Zero(B, ctx.L));
            if (auto it = dtap.find(bl + 1); it != dtap.end()) {
                nn::ChanSeq dgap;
                nn::global_avg_pool_bwd(it->second, ctx.L, &dgap);
                for (std::size_t c = 0; c < d.size(); ++c) d[c] += dgap[c];
            }

            if (blk.is_join && bc.joined) {
                nn::ChanSeq dsum;
                nn::ReluOp::bwd(bc.res_relu, d, &dsum);
                nn::ChanSeq drs, dsrc;
                blk.res_bn.bwd(bc.res_bn, dsum, &drs);
                blk.res_conv.bwd(bc.res_c, drs, &dsrc);
                const int src_bl = bl - 3;
                const int slot = src_bl < ctx.from_layer ? 0 : src_bl - ctx.from_layer + 1;
                ensure(slot, static_cast<int>(dsrc.size()));
                for (std::size_t c = 0; c < dsrc.size(); ++c) dout[slot][c] += dsrc[c];
                d = std::move(dsum);
            }

            nn::ChanSeq dcat;
            nn::ReluOp::bwd(bc.relu, d, &d);
            blk.bn.bwd(bc.bn, d, &dcat);

            const bool need_dx = (i > 0) || (dx_in != nullptr);

            nn::ChanSeq dtrunk_total;
            int at = 0;
            for (int j = 0; j < 3; ++j) {
                nn::ChanSeq dyj(dcat.begin() + at, dcat.begin() + at + blk.branch_out[j]);
                at += blk.branch_out[j];
                nn::ChanSeq dt;
                const bool want = need_dx || blk.has_bneck;
                blk.branch[j].bwd(bc.br[j], dyj, want ? &dt : nullptr);
                if (want) {
                    if (dtrunk_total.empty())
                        dtrunk_total = std::move(dt);
                    else
                        for (std::size_t c = 0; c < dt.size(); ++c) dtrunk_total[c] += dt[c];
                }
            }
            nn::ChanSeq dy3(dcat.begin() + at, dcat.begin() + at + blk.branch_out[3]);
            nn::ChanSeq dpool_out;
            blk.pool_conv.bwd(bc.pool_c, dy3, need_dx ? &dpool_out : nullptr);

            if (need_dx) {
                nn::ChanSeq dact;
                if (blk.has_bneck)
                    blk.bneck.bwd(bc.bneck_c, dtrunk_total, &dact);
                else
                    dact = std::move(dtrunk_total);
                nn::ChanSeq dpool_in;
                nn::MaxPool3::bwd(bc.pool, dpool_out, &dpool_in);
                for (std::size_t c = 0; c < dact.size(); ++c) dact[c] += dpool_in[c];
                ensure(i, static_cast<int>(dact.size()));
                for (std::size_t c = 0; c < dact.size(); ++c) dout[i][c] += dact[c];
            } else if (blk.has_bneck) {
                blk.bneck.bwd(bc.bneck_c, dtrunk_total, nullptr);
            }
        }

        if (dx_in) {
            if (dout[0].empty())
                *dx_in = Mat::Zero(B, spec_.width);
            else
                *dx_in = chanseq_to_feature(dout[0]);
        }
    }

private:
    struct Block {
        bool has_bneck = false;
        bool is_join = false;
        nn::Conv1d bneck, branch[3], pool_conv, res_conv;
        nn::BatchNorm1d bn, res_bn;
        int branch_out[4] = {0, 0, 0, 0};
    };
    ClassifierSpec spec_;
    std::vector<Block> blocks_;
};

}  // namespace

// ---- Classifier ---------------------------------------------------------------------

Classifier::Classifier(const ClassifierSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    RngStream rng = RngStream::child(seed, 0x636c7366);
    switch (spec_.family) {
        case Family::Recurrent: backbone_ = std::make_unique<RecurrentBackbone>(spec_, rng); break;
        case Family::ResidualConv: backbone_ = std::make_unique<ResConvBackbone>(spec_, rng); break;
        case Family::InceptionConv: backbone_ = std::make_unique<InceptionBackbone>(spec_, rng); break;
    }
    head_.init(spec_.width, spec_.class_count, rng, "head");
}

nn::ParamSet Classifier::params() {
    nn::ParamSet ps;
    ps.add(backbone_->params());
    ps.add(head_.params());
    return ps;
}

nn::ParamSet Classifier::feature_params() { return backbone_->params(); }

nn::ParamSet Classifier::head_params() { return head_.params(); }

nn::ParamSet Classifier::checkpoint_params() {
    nn::ParamSet ps;
    ps.add(params());
    ps.add(backbone_->state());
    return ps;
}

Mat Classifier::features(const Batch& x) { return features_at(x, spec_.feature_layer); }

Mat Classifier::features_at(const Batch& x, int layer) {
    if (x.chans() != spec_.input_channels) throw ShapeError("input channel count mismatch");
    if (layer < 1 || layer > spec_.depth) throw ArgumentError("feature layer out of range");
    auto ctx = backbone_->forward(x, 0, false, false);
    return backbone_->feature(*ctx, layer);
}

Mat Classifier::predict_logits(const Batch& x) {
    if (x.chans() != spec_.input_channels) throw ShapeError("input channel count mismatch");
    auto ctx = backbone_->forward(x, 0, false, false);
    return head_.fwd(backbone_->feature(*ctx, spec_.depth));
}

Mat Classifier::predict(const Batch& x) { return nn::softmax_rows(predict_logits(x)); }

Mat Classifier::forward_train(const Batch& x, TrainCtx& ctx, bool update_running) {
    if (x.chans() != spec_.input_channels) throw ShapeError("input channel count mismatch");
    ctx.bctx = backbone_->forward(x, 0, true, update_running);
    ctx.final_feature = backbone_->feature(*ctx.bctx, spec_.depth);
    ctx.tap = backbone_->feature(*ctx.bctx, spec_.feature_layer);
    return head_.fwd(ctx.final_feature);
}

void Classifier::backward_train(TrainCtx& ctx, const Mat& dlogits, const Mat& dtap) {
    std::map<int, Mat> taps;
    if (dlogits.size() > 0) {
        Mat dfinal;
        head_.bwd(ctx.final_feature, dlogits, &dfinal);
        taps[spec_.depth] = std::move(dfinal);
    }
    if (dtap.size() > 0) {
        auto [it, inserted] = taps.try_emplace(spec_.feature_layer, dtap);
        if (!inserted) it->second += dtap;
    }
    if (!taps.empty()) backbone_->backward(*ctx.bctx, taps, nullptr);
}

Mat Classifier::head_forward(const Mat& z, HeadCtx& ctx, bool train) {
    if (spec_.feature_layer == spec_.depth) {
        ctx.input = z;
        return head_.fwd(z);
    }
    Batch b = Batch::from_features(z);  // length-1 continuation
    ctx.bctx = backbone_->forward(b, spec_.feature_layer, train, false);
    ctx.input = backbone_->feature(*ctx.bctx, spec_.depth);
    return head_.fwd(ctx.input);
}

void Classifier::head_backward(HeadCtx& ctx, const Mat& dlogits, Mat* dz) {
    Mat dfinal;
    head_.bwd(ctx.input, dlogits, &dfinal);
    if (spec_.feature_layer == spec_.depth) {
        if (dz) *dz = std::move(dfinal);
        return;
    }
    std::map<int, Mat> taps;
    taps[spec_.depth] = std::move(dfinal);
    backbone_->backward(*ctx.bctx, taps, dz);
}

Classifier build_classifier(const ClassifierSpec& spec, std::uint64_t seed) { return Classifier(spec, seed); }

Mat features(Classifier& model, const Batch& x) { return model.features(x); }

Mat predict(Classifier& model, const Batch& x) { return model.predict(x); }

}  // namespace gdpd
