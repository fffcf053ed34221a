#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ootd/errors.hpp"

namespace ootd {

// FNV-1a 64-bit, usable incrementally: feed chunks, carry the state.
inline uint64_t fnv1a64_update(const void* data, size_t n, uint64_t state = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        state ^= p[i];
        state *= 0x100000001b3ULL;
    }
    return state;
}

inline std::string hex_u64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    f.seekg(0, std::ios::end);
    std::streamoff n = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<unsigned char> buf(static_cast<size_t>(n));
    if (n > 0) f.read(reinterpret_cast<char*>(buf.data()), n);
    if (!f) throw IoError("short read: " + path);
    return buf;
}

inline uint64_t fnv1a64_file(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return fnv1a64_update(bytes.data(), bytes.size());
}

// Write via a sibling temp file and rename, so a crash can't leave a
// half-written file at the destination.
inline void write_file_atomic(const std::string& path, const void* data, size_t n) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open for writing: " + tmp);
        f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
        f.flush();
        if (!f) throw IoError("short write: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename " + tmp + " -> " + path + ": " + ec.message());
}

inline void write_file_atomic(const std::string& path, const std::string& text) {
    write_file_atomic(path, text.data(), text.size());
}

}  // namespace ootd
