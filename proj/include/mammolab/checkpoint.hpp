#pragma once

// Binary checkpoint interchange: magic + version header, encoder kind,
// config echo, then named parameter tensors as row-major little-endian
// float32 payloads.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "mammolab/common.hpp"
#include "mammolab/encoders.hpp"

namespace mammolab {

inline constexpr char kCheckpointMagic[4] = {'M', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_str(std::ostream& out, const std::string& s) {
    write_pod<std::uint32_t>(out, std::uint32_t(s.size()));
    out.write(s.data(), std::streamsize(s.size()));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw TruncatedFile();
    return v;
}

inline std::string read_str(std::istream& in) {
    const auto n = read_pod<std::uint32_t>(in);
    std::string s(n, '\0');
    in.read(s.data(), std::streamsize(n));
    if (!in) throw TruncatedFile();
    return s;
}

}  // namespace detail

inline void save_checkpoint(const Encoder& encoder, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(kCheckpointMagic, 4);
    detail::write_pod(out, kCheckpointVersion);
    detail::write_str(out, encoder.kind());
    detail::write_str(out, encoder.config_json().dump());
    detail::write_pod(out, std::uint32_t(encoder.params().params.size()));
    for (const auto& [name, var] : encoder.params().params) {
        detail::write_str(out, name);
        detail::write_pod(out, std::uint32_t(var->val.ndim()));
        for (auto d : var->val.shape) detail::write_pod(out, std::uint64_t(d));
        std::vector<float> payload(var->val.size());
        for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = float(var->val[i]);
        out.write(reinterpret_cast<const char*>(payload.data()),
                  std::streamsize(payload.size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed: " + path.string());
}

// expected_kind: empty accepts any encoder kind.
inline std::unique_ptr<Encoder> load_checkpoint(const std::filesystem::path& path,
                                                const std::string& expected_kind = "") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw BadMagic("bad checkpoint magic: " + path.string());
    const auto version = detail::read_pod<std::uint32_t>(in);
    if (version != kCheckpointVersion)
        throw VersionMismatch("checkpoint version " + std::to_string(version));
    const std::string kind = detail::read_str(in);
    if (!expected_kind.empty() && kind != expected_kind)
        throw KindMismatch("checkpoint kind '" + kind + "', expected '" + expected_kind + "'");
    const std::string cfg_text = detail::read_str(in);
    auto encoder = make_encoder(kind, nlohmann::json::parse(cfg_text));

    const auto n_tensors = detail::read_pod<std::uint32_t>(in);
    if (n_tensors != encoder->params().params.size())
        throw ShapeMismatch("tensor count mismatch in " + path.string());
    for (std::uint32_t t = 0; t < n_tensors; ++t) {
        const std::string name = detail::read_str(in);
        const auto ndim = detail::read_pod<std::uint32_t>(in);
        std::vector<std::size_t> shape(ndim);
        for (auto& d : shape) d = std::size_t(detail::read_pod<std::uint64_t>(in));
        auto var = encoder->params().find(name);
        if (var->val.shape != shape) throw ShapeMismatch("shape mismatch for tensor " + name);
        std::vector<float> payload(var->val.size());
        in.read(reinterpret_cast<char*>(payload.data()),
                std::streamsize(payload.size() * sizeof(float)));
        if (!in) throw TruncatedFile(path.string());
        for (std::size_t i = 0; i < payload.size(); ++i) var->val[i] = double(payload[i]);
    }
    return encoder;
}

// Bare parameter-store snapshot, same tensor framing as full checkpoints but
// without the encoder kind/config header; used for downstream head models.
inline void save_params(const nn::ParamStore& ps, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(kCheckpointMagic, 4);
    detail::write_pod(out, kCheckpointVersion);
    detail::write_str(out, "params");
    detail::write_str(out, "{}");
    detail::write_pod(out, std::uint32_t(ps.params.size()));
    for (const auto& [name, var] : ps.params) {
        detail::write_str(out, name);
        detail::write_pod(out, std::uint32_t(var->val.ndim()));
        for (auto d : var->val.shape) detail::write_pod(out, std::uint64_t(d));
        std::vector<float> payload(var->val.size());
        for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = float(var->val[i]);
        out.write(reinterpret_cast<const char*>(payload.data()),
                  std::streamsize(payload.size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed: " + path.string());
}

inline void load_params(nn::ParamStore& ps, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw BadMagic("bad checkpoint magic: " + path.string());
    const auto version = detail::read_pod<std::uint32_t>(in);
    if (version != kCheckpointVersion)
        throw VersionMismatch("checkpoint version " + std::to_string(version));
    const std::string kind = detail::read_str(in);
    if (kind != "params") throw KindMismatch("expected bare params, got '" + kind + "'");
    detail::read_str(in);  // config placeholder
    const auto n_tensors = detail::read_pod<std::uint32_t>(in);
    if (n_tensors != ps.params.size())
        throw ShapeMismatch("tensor count mismatch in " + path.string());
    for (std::uint32_t t = 0; t < n_tensors; ++t) {
        const std::string name = detail::read_str(in);
        const auto ndim = detail::read_pod<std::uint32_t>(in);
        std::vector<std::size_t> shape(ndim);
        for (auto& d : shape) d = std::size_t(detail::read_pod<std::uint64_t>(in));
        auto var = ps.find(name);
        if (var->val.shape != shape) throw ShapeMismatch("shape mismatch for tensor " + name);
        std::vector<float> payload(var->val.size());
        in.read(reinterpret_cast<char*>(payload.data()),
                std::streamsize(payload.size() * sizeof(float)));
        if (!in) throw TruncatedFile(path.string());
        for (std::size_t i = 0; i < payload.size(); ++i) var->val[i] = double(payload[i]);
    }
}

}  // namespace mammolab
