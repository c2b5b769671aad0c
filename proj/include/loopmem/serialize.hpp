#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "loopmem/error.hpp"
#include "loopmem/grad_check.hpp"
#include "loopmem/tensor.hpp"

// Tensor container: one line of compact UTF-8 JSON (the manifest) terminated by
// '\n', followed by the blob of little-endian values in manifest order.
//
//   {"format":"loopmem.tensors","version":1,"blob_bytes":N,"meta":{...},
//    "tensors":[{"name":..,"shape":[..],"dtype":"f64","byte_offset":0},...]}

namespace loopmem {

enum class DType { f32, f64 };

inline constexpr const char* kTensorFormat = "loopmem.tensors";

inline std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }
inline const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "f64"; }

struct TensorFile {
    nlohmann::json meta;
    std::vector<NamedTensor> tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) {
                return &t.tensor;
            }
        }
        return nullptr;
    }
};

namespace detail {

inline void put_le(std::string& out, std::uint64_t bits, std::size_t bytes) {
    for (std::size_t i = 0; i < bytes; ++i) {
        out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
    }
}

inline std::uint64_t get_le(const unsigned char* p, std::size_t bytes) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < bytes; ++i) {
        v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    }
    return v;
}

}  // namespace detail

inline std::string encode_tensors(std::span<const NamedTensor> tensors, const nlohmann::json& meta = nlohmann::json::object(),
                                  DType dtype = DType::f64) {
    nlohmann::json entries = nlohmann::json::array();
    std::string blob;
    for (const auto& nt : tensors) {
        entries.push_back({{"name", nt.name},
                           {"shape", nt.tensor.shape()},
                           {"dtype", dtype_name(dtype)},
                           {"byte_offset", blob.size()}});
        for (double v : nt.tensor.data()) {
            if (dtype == DType::f64) {
                detail::put_le(blob, std::bit_cast<std::uint64_t>(v), 8);
            } else {
                detail::put_le(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
            }
        }
    }
    nlohmann::json manifest = {{"format", kTensorFormat},
                               {"version", 1},
                               {"blob_bytes", blob.size()},
                               {"meta", meta},
                               {"tensors", std::move(entries)}};
    std::string out = manifest.dump();
    out.push_back('\n');
    out += blob;
    return out;
}

/// Parses a container, validating every offset and the total blob length.
/// Nothing is returned unless the whole file is consistent.
inline TensorFile decode_tensors(const std::string& bytes) {
    const auto newline = bytes.find('\n');
    if (newline == std::string::npos) {
        throw CorruptCheckpoint("tensor file has no manifest terminator");
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(newline));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpoint(std::string("unreadable manifest: ") + e.what());
    }
    if (!manifest.is_object() || manifest.value("format", "") != kTensorFormat || !manifest.contains("tensors")) {
        throw CorruptCheckpoint("not a loopmem tensor file");
    }
    const std::size_t blob_size = bytes.size() - newline - 1;
    const auto* blob = reinterpret_cast<const unsigned char*>(bytes.data() + newline + 1);
    TensorFile file;
    file.meta = manifest.value("meta", nlohmann::json::object());
    std::size_t expected_offset = 0;
    try {
        for (const auto& e : manifest.at("tensors")) {
            const std::string dt = e.at("dtype").get<std::string>();
            if (dt != "f32" && dt != "f64") {
                throw CorruptCheckpoint("unknown dtype '" + dt + "'");
            }
            const DType dtype = dt == "f32" ? DType::f32 : DType::f64;
            Shape shape = e.at("shape").get<Shape>();
            const std::size_t offset = e.at("byte_offset").get<std::size_t>();
            const std::size_t n = shape_numel(shape);
            const std::size_t width = dtype_size(dtype);
            if (offset != expected_offset || offset + n * width > blob_size) {
                throw CorruptCheckpoint("tensor '" + e.at("name").get<std::string>() + "' lies outside the blob");
            }
            std::vector<double> values(n);
            for (std::size_t i = 0; i < n; ++i) {
                const std::uint64_t bits = detail::get_le(blob + offset + i * width, width);
                values[i] = dtype == DType::f64 ? std::bit_cast<double>(bits)
                                                : static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)));
            }
            expected_offset = offset + n * width;
            file.tensors.push_back({e.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values))});
        }
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpoint(std::string("malformed manifest entry: ") + e.what());
    } catch (const ShapeError& e) {
        throw CorruptCheckpoint(std::string("bad tensor shape: ") + e.what());
    }
    if (expected_offset != blob_size || manifest.value("blob_bytes", std::size_t{0}) != blob_size) {
        throw CorruptCheckpoint("blob holds " + std::to_string(blob_size) + " bytes, manifest describes " +
                                std::to_string(expected_offset));
    }
    return file;
}

inline void save_tensors(const std::filesystem::path& path, std::span<const NamedTensor> tensors,
                         const nlohmann::json& meta = nlohmann::json::object(), DType dtype = DType::f64) {
    const std::string bytes = encode_tensors(tensors, meta, dtype);
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open " + tmp + " for writing");
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw IoError("write failed: " + tmp);
        }
    }
    std::filesystem::rename(tmp, path);
}

inline TensorFile load_tensors(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_tensors(bytes);
}

}  // namespace loopmem
