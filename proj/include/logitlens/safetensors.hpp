#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "logitlens/errors.hpp"

namespace logitlens {

// Named-tensor container in the safetensors layout: an 8-byte little-endian
// header length, a JSON header mapping tensor name -> {dtype, shape,
// data_offsets}, then the raw tensor data in C order. Values are widened to
// float32 on read; files written by this library are always float32.

struct NamedTensor {
    std::vector<std::int64_t> shape;
    std::vector<float> data;

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
};

using NamedTensorMap = std::map<std::string, NamedTensor>;

namespace detail {

inline float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h >> 15) << 31;
    std::uint32_t exp = (h >> 10) & 0x1f;
    std::uint32_t mant = h & 0x3ff;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: renormalize
            exp = 127 - 15 + 1;
            while ((mant & 0x400) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3ff;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float out;
    std::memcpy(&out, &bits, sizeof(out));
    return out;
}

inline float bf16_to_float(std::uint16_t h) {
    const std::uint32_t bits = static_cast<std::uint32_t>(h) << 16;
    float out;
    std::memcpy(&out, &bits, sizeof(out));
    return out;
}

inline std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "F64") return 8;
    if (dtype == "F32") return 4;
    if (dtype == "F16" || dtype == "BF16") return 2;
    throw LoadError("unsupported tensor dtype: " + dtype);
}

}  // namespace detail

inline NamedTensorMap read_safetensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open tensor file: " + path);
    in.seekg(0, std::ios::end);
    const std::uint64_t file_size = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);
    if (file_size < 8) throw LoadError("tensor file truncated: " + path);

    std::uint64_t header_len = 0;
    unsigned char lenbuf[8];
    in.read(reinterpret_cast<char*>(lenbuf), 8);
    for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | lenbuf[i];
    if (header_len > file_size - 8) {
        throw LoadError("tensor header length exceeds file size: " + path);
    }

    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("bad tensor header JSON in " + path + ": " + e.what());
    }

    const std::uint64_t data_size = file_size - 8 - header_len;
    NamedTensorMap out;
    for (auto it = meta.begin(); it != meta.end(); ++it) {
        if (it.key() == "__metadata__") continue;
        const auto& info = it.value();
        const std::string dtype = info.at("dtype").get<std::string>();
        const std::size_t elem = detail::dtype_size(dtype);
        NamedTensor t;
        t.shape = info.at("shape").get<std::vector<std::int64_t>>();
        const auto offsets = info.at("data_offsets").get<std::vector<std::uint64_t>>();
        if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > data_size) {
            throw LoadError("bad data offsets for tensor " + it.key() + " in " + path);
        }
        const std::uint64_t nbytes = offsets[1] - offsets[0];
        const std::int64_t numel = t.numel();
        if (static_cast<std::uint64_t>(numel) * elem != nbytes) {
            throw ShapeMismatchError("tensor " + it.key() + " in " + path +
                                     ": shape/byte-count mismatch");
        }

        std::vector<unsigned char> raw(nbytes);
        in.seekg(static_cast<std::streamoff>(8 + header_len + offsets[0]));
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(nbytes));
        if (!in) throw LoadError("short read for tensor " + it.key() + " in " + path);

        t.data.resize(static_cast<std::size_t>(numel));
        if (dtype == "F32") {
            std::memcpy(t.data.data(), raw.data(), nbytes);
        } else if (dtype == "F64") {
            const double* src = reinterpret_cast<const double*>(raw.data());
            for (std::int64_t i = 0; i < numel; ++i) t.data[i] = static_cast<float>(src[i]);
        } else {
            const std::uint16_t* src = reinterpret_cast<const std::uint16_t*>(raw.data());
            for (std::int64_t i = 0; i < numel; ++i) {
                t.data[i] = dtype == "F16" ? detail::half_to_float(src[i])
                                           : detail::bf16_to_float(src[i]);
            }
        }
        out.emplace(it.key(), std::move(t));
    }
    return out;
}

/// Write float32 tensors. Names are serialized in sorted order and the JSON
/// header is emitted with a fixed format, so identical inputs produce
/// byte-identical files.
inline void write_safetensors(const std::string& path, const NamedTensorMap& tensors) {
    nlohmann::json meta = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const std::uint64_t nbytes = static_cast<std::uint64_t>(t.numel()) * 4;
        if (t.data.size() != static_cast<std::size_t>(t.numel())) {
            throw ShapeMismatchError("tensor " + name + ": data size does not match shape");
        }
        meta[name] = {{"dtype", "F32"},
                      {"shape", t.shape},
                      {"data_offsets", {offset, offset + nbytes}}};
        offset += nbytes;
    }
    std::string header = meta.dump();
    // pad to 8-byte alignment, as the reference writers do
    while (header.size() % 8 != 0) header.push_back(' ');

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write tensor file: " + path);
    const std::uint64_t header_len = header.size();
    unsigned char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<unsigned char>((header_len >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(lenbuf), 8);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, t] : tensors) {
        (void)name;
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * 4));
    }
    if (!out) throw LoadError("failed writing tensor file: " + path);
}

}  // namespace logitlens
