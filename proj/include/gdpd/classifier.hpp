#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "gdpd/dataset.hpp"
#include "gdpd/nn.hpp"

namespace gdpd {

enum class Family { Recurrent, ResidualConv, InceptionConv };

Family family_from_string(const std::string& s);
std::string family_to_string(Family f);

struct ClassifierSpec {
    Family family = Family::Recurrent;
    int depth = 1;          // stacked cells (recurrent) or blocks (conv families)
    int width = 1;          // hidden size / filter count
    int class_count = 2;
    int feature_layer = 1;  // 1-based from the input side
    int input_channels = 1;

    void validate() const;
    // width at every layer, for every family: the recurrent feature is the
    // final-step hidden state, conv features are the pooled block output
    int feature_dim(int layer) const;
    int feature_dim() const { return feature_dim(feature_layer); }
};

// Channel-major input batch: channels[c] is B x L'.
struct Batch {
    std::vector<Mat> channels;

    static Batch from_dataset(const TimeSeriesDataset& ds, const std::vector<int>& idx);
    // features as a length-1 sequence with one channel per dimension
    static Batch from_features(const Mat& z);

    int batch() const { return channels.empty() ? 0 : static_cast<int>(channels[0].rows()); }
    int chans() const { return static_cast<int>(channels.size()); }
    int len() const { return channels.empty() ? 0 : static_cast<int>(channels[0].cols()); }

    nn::StepSeq to_steps() const;  // per-step B x M views
};

// Family-specific feature extractor. forward() runs layers
// (from_layer, depth]; from_layer > 0 consumes a feature batch (length-1
// sequence), which is how S^head continues from an intermediate layer.
class Backbone {
public:
    struct Ctx {
        virtual ~Ctx() = default;
    };

    virtual ~Backbone() = default;
    virtual nn::ParamSet params() = 0;
    virtual nn::ParamSet state() { return {}; }  // non-trainable buffers (BN running stats)

    virtual std::unique_ptr<Ctx> forward(const Batch& x, int from_layer, bool train,
                                         bool update_running) = 0;
    virtual Mat feature(const Ctx& ctx, int layer) const = 0;
    // dtap maps layer -> gradient at that layer's feature; when the forward
    // consumed a feature batch, dx_in receives the gradient w.r.t. it
    virtual void backward(Ctx& ctx, const std::map<int, Mat>& dtap, Mat* dx_in) = 0;
};

/// Feature extractor composed with a linear classification head. The head of
/// record for distillation is the mapping from feature_layer onwards; it
/// equals the linear head when feature_layer == depth.
class Classifier {
public:
    Classifier(const ClassifierSpec& spec, std::uint64_t seed);

    const ClassifierSpec& spec() const { return spec_; }
    nn::ParamSet params();             // trainable, fixed registration order
    nn::ParamSet feature_params();     // backbone only
    nn::ParamSet head_params();        // linear head only
    nn::ParamSet checkpoint_params();  // trainable + buffers

    // ---- inference (eval mode, no gradients) ----
    Mat features(const Batch& x);  // at spec.feature_layer
    Mat features_at(const Batch& x, int layer);
    Mat predict_logits(const Batch& x);
    Mat predict(const Batch& x);  // softmax rows

    // ---- training-mode full pass ----
    struct TrainCtx {
        std::unique_ptr<Backbone::Ctx> bctx;
        Mat final_feature;
        Mat tap;  // feature at spec.feature_layer
    };
    Mat forward_train(const Batch& x, TrainCtx& ctx, bool update_running = true);
    // dlogits and/or dtap may be empty matrices (treated as zero)
    void backward_train(TrainCtx& ctx, const Mat& dlogits, const Mat& dtap);

    // ---- S^head as a standalone differentiable map ----
    struct HeadCtx {
        Mat input;  // feature fed to the linear head
        std::unique_ptr<Backbone::Ctx> bctx;  // continuation layers, when any
    };
    Mat head_forward(const Mat& z, HeadCtx& ctx, bool train = true);
    void head_backward(HeadCtx& ctx, const Mat& dlogits, Mat* dz);

    int feature_dim() const { return spec_.feature_dim(); }
    Backbone& backbone() { return *backbone_; }
    nn::Linear& head() { return head_; }

private:
    ClassifierSpec spec_;
    std::unique_ptr<Backbone> backbone_;
    nn::Linear head_;
};

Classifier build_classifier(const ClassifierSpec& spec, std::uint64_t seed);

// convenience wrappers matching the operation surface
Mat features(Classifier& model, const Batch& x);
Mat predict(Classifier& model, const Batch& x);

}  // namespace gdpd
