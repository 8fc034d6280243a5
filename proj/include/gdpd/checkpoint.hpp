#pragma once

#include <array>
#include <string>

#include "gdpd/classifier.hpp"
#include "gdpd/diffusion.hpp"

namespace gdpd {

// Versioned binary blob: 8-byte magic, u32 version, u32 kind tag, six i32
// descriptor fields, u64 scalar count, then the flat parameter vector as
// little-endian float32. Loading casts back to double, so save-load-save is
// byte identical.
namespace ckpt {
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kKindRecurrent = 1;
constexpr std::uint32_t kKindResidualConv = 2;
constexpr std::uint32_t kKindInceptionConv = 3;
constexpr std::uint32_t kKindDenoiser = 100;
constexpr std::uint32_t kKindFusionAdapter = 101;

struct Header {
    std::uint32_t version = kVersion;
    std::uint32_t kind = 0;
    std::array<std::int32_t, 6> fields{};
    std::uint64_t count = 0;
};

void save_blob(const std::string& path, std::uint32_t kind, const std::array<std::int32_t, 6>& fields,
               const nn::ParamSet& params);
Header read_header(const std::string& path);
// header is re-read and validated against expected_kind; params are filled
void load_blob(const std::string& path, std::uint32_t kind, nn::ParamSet params);
}  // namespace ckpt

void save_classifier(Classifier& model, const std::string& path);
Classifier load_classifier(const std::string& path);

void save_denoiser(Denoiser& den, const std::string& path);
Denoiser load_denoiser(const std::string& path);

void save_adapter(FusionAdapter& adapter, const std::string& path);
FusionAdapter load_adapter(const std::string& path);

}  // namespace gdpd
