#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "chbc/error.hpp"

// Little-endian binary blob helpers shared by the dataset, checkpoint and
// logits file formats.

namespace chbc::io {

inline void write_f32(const std::string& path, const std::vector<float>& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!out) throw DataError("short write to " + path);
}

inline std::vector<float> read_f32(const std::string& path, std::size_t expected_count) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw DataError("cannot open " + path);
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes != expected_count * sizeof(float))
        throw DataError(path + ": expected " + std::to_string(expected_count * sizeof(float)) +
                        " bytes, found " + std::to_string(bytes));
    std::vector<float> data(expected_count);
    in.seekg(0);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw DataError("short read from " + path);
    return data;
}

inline void write_u32(const std::string& path, const std::vector<std::uint32_t>& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(std::uint32_t)));
    if (!out) throw DataError("short write to " + path);
}

inline std::vector<std::uint32_t> read_u32(const std::string& path,
                                           std::size_t expected_count) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw DataError("cannot open " + path);
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes != expected_count * sizeof(std::uint32_t))
        throw DataError(path + ": expected " +
                        std::to_string(expected_count * sizeof(std::uint32_t)) +
                        " bytes, found " + std::to_string(bytes));
    std::vector<std::uint32_t> data(expected_count);
    in.seekg(0);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw DataError("short read from " + path);
    return data;
}

}  // namespace chbc::io
