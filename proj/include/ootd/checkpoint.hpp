#pragma once

// Flat tensor archive used for model checkpoints.
//
// Layout (all integers little-endian):
//   magic "OOTDMINI" (8 bytes)
//   u32 format version (currently 1)
//   u32 tensor count
//   per tensor: u32 name length, name bytes, u8 rank, u32 dims[rank],
//               f32 values (row-major)
//   u64 FNV-1a checksum of every preceding byte
//
// Files are written atomically (temp file + rename).

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ootd/tensor.hpp"

namespace ootd {

inline constexpr char kArchiveMagic[8] = {'O', 'O', 'T', 'D', 'M', 'I', 'N', 'I'};
inline constexpr std::uint32_t kArchiveVersion = 1;

struct ArchiveEntry {
    std::string name;
    Tensor value;
};

// Serialize to bytes / parse from bytes (exposed for hashing and tests).
std::vector<std::uint8_t> archive_bytes(const std::vector<ArchiveEntry>& entries);
std::vector<ArchiveEntry> parse_archive(const std::uint8_t* data, std::size_t n);

void save_archive(const std::string& path, const std::vector<ArchiveEntry>& entries);
std::vector<ArchiveEntry> load_archive(const std::string& path);

std::map<std::string, Tensor> archive_map(const std::vector<ArchiveEntry>& entries);

// Bit-exact scalar round-trips through f32 tensor pairs, for storing run
// metadata (iteration counters, seeds, config reals) inside an archive.
Tensor pack_u64(std::uint64_t v);
std::uint64_t unpack_u64(const Tensor& t);
Tensor pack_f64(double v);
double unpack_f64(const Tensor& t);

}  // namespace ootd
