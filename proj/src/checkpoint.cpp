// SPDX-License-Identifier: Apache-2.0

#include "separeg/checkpoint.hpp"

#include "separeg/errors.hpp"
#include "separeg/hashing.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

namespace separeg::nets {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'S', 'P', 'R', 'G', 'C', 'K', 'P', 'T'};

std::string dtype_name(const torch::Tensor& t) {
    switch (t.scalar_type()) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    default: throw ValidationError("checkpoint cannot store dtype " + std::string(c10::toString(t.scalar_type())));
    }
}

torch::Dtype dtype_from_name(const std::string& s) {
    if (s == "float32") return torch::kFloat32;
    if (s == "float64") return torch::kFloat64;
    if (s == "int64") return torch::kInt64;
    throw FormatError("checkpoint tensor has unknown dtype '" + s + "'");
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

} // namespace

std::string Checkpoint::stage_tag() const {
    switch (stage) {
    case Stage::inter: return "inter";
    case Stage::intra: return "intra_" + std::to_string(stage_index);
    case Stage::student: return "student";
    case Stage::finetuned: return "finetuned";
    }
    return "inter";
}

Stage stage_from_tag(const std::string& tag, int* index) {
    if (index)
        *index = -1;
    if (tag == "inter") return Stage::inter;
    if (tag == "student") return Stage::student;
    if (tag == "finetuned") return Stage::finetuned;
    if (tag.rfind("intra_", 0) == 0) {
        try {
            if (index)
                *index = std::stoi(tag.substr(6));
        } catch (const std::exception&) {
            throw FormatError("bad intra stage tag '" + tag + "'");
        }
        return Stage::intra;
    }
    throw FormatError("unknown checkpoint stage '" + tag + "'");
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    json entries = json::array();
    std::string blob;
    for (const auto& [name, tensor] : ckpt.tensors) {
        const auto t = tensor.detach().to(torch::kCPU).contiguous();
        const auto nbytes = static_cast<std::size_t>(t.numel()) * t.element_size();
        entries.push_back({{"name", name},
                           {"dtype", dtype_name(t)},
                           {"shape", t.sizes().vec()},
                           {"offset", blob.size()},
                           {"nbytes", nbytes}});
        blob.append(static_cast<const char*>(t.data_ptr()), nbytes);
    }
    const json header = {{"format", 1},
                         {"stage", ckpt.stage_tag()},
                         {"spec", ckpt.spec},
                         {"config_hash", ckpt.config_hash},
                         {"rng_state", ckpt.rng_state},
                         {"meta", ckpt.meta},
                         {"tensors", entries}};
    const std::string text = header.dump();
    std::string out(kMagic, sizeof(kMagic));
    put_u64(out, text.size());
    out += text;
    out += blob;
    return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        throw FormatError(origin + ": not a checkpoint (bad magic)");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint64_t header_len = get_u64(p + 8);
    if (16 + header_len > bytes.size())
        throw FormatError(origin + ": truncated checkpoint header");

    json header;
    try {
        header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const json::exception& e) {
        throw FormatError(origin + ": checkpoint header is not valid JSON (" + e.what() + ")");
    }

    Checkpoint ckpt;
    try {
        ckpt.stage = stage_from_tag(header.at("stage").get<std::string>(), &ckpt.stage_index);
        ckpt.spec = header.at("spec").get<NetworkSpec>();
        ckpt.config_hash = header.at("config_hash").get<std::string>();
        ckpt.rng_state = header.at("rng_state").get<std::string>();
        ckpt.meta = header.value("meta", json::object());
        const std::size_t base = 16 + header_len;
        for (const auto& e : header.at("tensors")) {
            const auto name = e.at("name").get<std::string>();
            const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
            const auto offset = e.at("offset").get<std::size_t>();
            const auto nbytes = e.at("nbytes").get<std::size_t>();
            if (base + offset + nbytes > bytes.size())
                throw FormatError(origin + ": tensor '" + name + "' runs past the end of the file");
            auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from_name(e.at("dtype").get<std::string>())));
            if (static_cast<std::size_t>(t.numel()) * t.element_size() != nbytes)
                throw FormatError(origin + ": tensor '" + name + "' byte count disagrees with its shape");
            std::memcpy(t.data_ptr(), bytes.data() + base + offset, nbytes);
            ckpt.tensors.emplace(name, std::move(t));
        }
    } catch (const json::exception& e) {
        throw FormatError(origin + ": malformed checkpoint header (" + e.what() + ")");
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
    const std::string bytes = serialize_checkpoint(ckpt);
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open checkpoint: " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes, path.string());
}

TensorMap state_of(const torch::nn::Module& m, const std::string& prefix) {
    TensorMap out;
    for (const auto& p : m.named_parameters(true))
        out.emplace(prefix + p.key(), p.value().detach().clone());
    for (const auto& b : m.named_buffers(true))
        out.emplace(prefix + b.key(), b.value().detach().clone());
    return out;
}

void load_state(torch::nn::Module& m, const TensorMap& tensors, const std::string& prefix) {
    std::vector<std::string> problems;
    auto check = [&](const std::string& name, const torch::Tensor& target) -> const torch::Tensor* {
        const auto it = tensors.find(prefix + name);
        if (it == tensors.end()) {
            problems.push_back(prefix + name + " (missing)");
            return nullptr;
        }
        if (it->second.sizes() != target.sizes()) {
            problems.push_back(prefix + name + " (shape " + c10::str(it->second.sizes()) +
                               " vs " + c10::str(target.sizes()) + ")");
            return nullptr;
        }
        return &it->second;
    };
    const auto params = m.named_parameters(true);
    const auto buffers = m.named_buffers(true);
    for (const auto& p : params)
        check(p.key(), p.value());
    for (const auto& b : buffers)
        check(b.key(), b.value());
    if (!problems.empty()) {
        std::string msg = "unmatched parameters:";
        for (const auto& s : problems)
            msg += "\n  " + s;
        throw MappingError(msg);
    }

    torch::NoGradGuard no_grad;
    for (const auto& p : params)
        p.value().copy_(tensors.at(prefix + p.key()));
    for (const auto& b : buffers)
        b.value().copy_(tensors.at(prefix + b.key()));
}

std::string tensors_hash(const TensorMap& tensors) {
    std::string bytes;
    for (const auto& [name, tensor] : tensors) {
        const auto t = tensor.detach().to(torch::kCPU).contiguous();
        bytes += name;
        bytes.push_back('\0');
        bytes += dtype_name(t);
        for (auto s : t.sizes())
            bytes += ":" + std::to_string(s);
        bytes.push_back('\0');
        bytes.append(static_cast<const char*>(t.data_ptr()),
                     static_cast<std::size_t>(t.numel()) * t.element_size());
    }
    return sha256_hex(bytes);
}

UNet make_unet(const NetworkSpec& spec, std::int64_t n_classes,
               const std::optional<Checkpoint>& encoder_init, std::uint64_t seed) {
    torch::manual_seed(seed);
    UNet unet(spec, n_classes);
    if (!encoder_init)
        return unet;
    if (encoder_init->stage != Stage::inter && encoder_init->stage != Stage::student)
        throw MappingError("U-Net encoder can only be initialized from an inter or student "
                           "checkpoint, got " + encoder_init->stage_tag());
    if (encoder_init->spec.encoder_kind != spec.encoder_kind ||
        encoder_init->spec.feature_dim != spec.feature_dim)
        throw MappingError("checkpoint encoder (" + to_string(encoder_init->spec.encoder_kind) +
                           ", " + std::to_string(encoder_init->spec.feature_dim) +
                           "-d) does not match the U-Net encoder (" + to_string(spec.encoder_kind) +
                           ", " + std::to_string(spec.feature_dim) + "-d)");
    load_state(*unet->encoder, encoder_init->tensors, "encoder.");
    return unet;
}

} // namespace separeg::nets
