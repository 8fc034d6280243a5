#include "gdpd/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace gdpd {
namespace ckpt {

namespace {
constexpr char kMagic[8] = {'G', 'D', 'P', 'D', 'B', 'L', 'O', 'B'};
}

void save_blob(const std::string& path, std::uint32_t kind, const std::array<std::int32_t, 6>& fields,
               const nn::ParamSet& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kMagic, sizeof kMagic);
    const std::uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&kind), 4);
    out.write(reinterpret_cast<const char*>(fields.data()), 6 * 4);
    const std::uint64_t count = params.count();
    out.write(reinterpret_cast<const char*>(&count), 8);
    const Vec flat = params.flatten();
    std::vector<float> f32(static_cast<std::size_t>(flat.size()));
    for (Eigen::Index i = 0; i < flat.size(); ++i) f32[static_cast<std::size_t>(i)] = static_cast<float>(flat(i));
    out.write(reinterpret_cast<const char*>(f32.data()), static_cast<std::streamsize>(f32.size() * 4));
    if (!out) throw IoError("short write on checkpoint: " + path);
}

Header read_header(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) throw IoError("bad checkpoint magic: " + path);
    Header h;
    in.read(reinterpret_cast<char*>(&h.version), 4);
    in.read(reinterpret_cast<char*>(&h.kind), 4);
    in.read(reinterpret_cast<char*>(h.fields.data()), 6 * 4);
    in.read(reinterpret_cast<char*>(&h.count), 8);
    if (!in) throw IoError("truncated checkpoint header: " + path);
    if (h.version != kVersion) throw IoError("unsupported checkpoint version in " + path);
    return h;
}

void load_blob(const std::string& path, std::uint32_t kind, nn::ParamSet params) {
    const Header h = read_header(path);
    if (h.kind != kind)
        throw IoError("checkpoint kind mismatch in " + path + ": got " + std::to_string(h.kind) +
                      ", expected " + std::to_string(kind));
    if (h.count != params.count()) throw IoError("checkpoint parameter count mismatch in " + path);

    std::ifstream in(path, std::ios::binary);
    in.seekg(8 + 4 + 4 + 24 + 8);
    std::vector<float> f32(h.count);
    in.read(reinterpret_cast<char*>(f32.data()), static_cast<std::streamsize>(h.count * 4));
    if (!in) throw IoError("truncated checkpoint payload: " + path);
    Vec flat(static_cast<Eigen::Index>(h.count));
    for (std::size_t i = 0; i < h.count; ++i) flat(static_cast<Eigen::Index>(i)) = static_cast<double>(f32[i]);
    params.unflatten(flat);
}

}  // namespace ckpt

namespace {

std::uint32_t kind_of(Family f) {
    switch (f) {
        case Family::Recurrent: return ckpt::kKindRecurrent;
        case Family::ResidualConv: return ckpt::kKindResidualConv;
        case Family::InceptionConv: return ckpt::kKindInceptionConv;
    }
    return 0;
}

}  // namespace

void save_classifier(Classifier& model, const std::string& path) {
    const auto& s = model.spec();
    ckpt::save_blob(path, kind_of(s.family),
                    {s.depth, s.width, s.class_count, s.feature_layer, s.input_channels, 0},
                    model.checkpoint_params());
}

Classifier load_classifier(const std::string& path) {
    const auto h = ckpt::read_header(path);
    ClassifierSpec spec;
    switch (h.kind) {
        case ckpt::kKindRecurrent: spec.family = Family::Recurrent; break;
        case ckpt::kKindResidualConv: spec.family = Family::ResidualConv; break;
        case ckpt::kKindInceptionConv: spec.family = Family::InceptionConv; break;
        default: throw IoError("not a classifier checkpoint: " + path);
    }
    spec.depth = h.fields[0];
    spec.width = h.fields[1];
    spec.class_count = h.fields[2];
    spec.feature_layer = h.fields[3];
    spec.input_channels = h.fields[4];
    Classifier model(spec, 0);
    ckpt::load_blob(path, h.kind, model.checkpoint_params());
    return model;
}

void save_denoiser(Denoiser& den, const std::string& path) {
    ckpt::save_blob(path, ckpt::kKindDenoiser, {den.dim, den.hidden, den.time_dim, 0, 0, 0},
                    den.params());
}

Denoiser load_denoiser(const std::string& path) {
    const auto h = ckpt::read_header(path);
    if (h.kind != ckpt::kKindDenoiser) throw IoError("not a denoiser checkpoint: " + path);
    Denoiser den(h.fields[0], 0, h.fields[1], h.fields[2]);
    ckpt::load_blob(path, h.kind, den.params());
    return den;
}

void save_adapter(FusionAdapter& adapter, const std::string& path) {
    ckpt::save_blob(path, ckpt::kKindFusionAdapter,
                    {adapter.teacher_dim, adapter.student_dim, 0, 0, 0, 0}, adapter.params());
}

FusionAdapter load_adapter(const std::string& path) {
    const auto h = ckpt::read_header(path);
    if (h.kind != ckpt::kKindFusionAdapter) throw IoError("not an adapter checkpoint: " + path);
    FusionAdapter adapter(h.fields[0], h.fields[1], 0);
    ckpt::load_blob(path, h.kind, adapter.params());
    return adapter;
}

}  // namespace gdpd
