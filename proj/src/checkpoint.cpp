#include "ootd/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "ootd/errors.hpp"
#include "ootd/io_util.hpp"

namespace ootd {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back((std::uint8_t)((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back((std::uint8_t)((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
    put_u32(out, std::bit_cast<std::uint32_t>(f));
}

struct Reader {
    const std::uint8_t* p;
    std::size_t n;
    std::size_t pos = 0;

    void need(std::size_t k) const {
        if (pos + k > n) throw CorruptionError("archive truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= (std::uint32_t)p[pos + i] << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= (std::uint64_t)p[pos + i] << (8 * i);
        pos += 8;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return p[pos++];
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str(std::size_t k) {
        need(k);
        std::string s((const char*)p + pos, k);
        pos += k;
        return s;
    }
};

}  // namespace

std::vector<std::uint8_t> archive_bytes(const std::vector<ArchiveEntry>& entries) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kArchiveMagic, kArchiveMagic + 8);
    put_u32(out, kArchiveVersion);
    put_u32(out, (std::uint32_t)entries.size());
    for (const ArchiveEntry& e : entries) {
        put_u32(out, (std::uint32_t)e.name.size());
        out.insert(out.end(), e.name.begin(), e.name.end());
        out.push_back((std::uint8_t)e.value.rank());
        for (int d = 0; d < e.value.rank(); ++d) put_u32(out, (std::uint32_t)e.value.dim(d));
        for (size_t i = 0; i < e.value.size(); ++i) put_f32(out, e.value.at(i));
    }
    put_u64(out, fnv1a64_update(out.data(), out.size()));
    return out;
}

std::vector<ArchiveEntry> parse_archive(const std::uint8_t* data, std::size_t n) {
    Reader r{data, n};
    if (n < 8 + 4 + 4 + 8) throw CorruptionError("archive truncated");
    std::string magic = r.str(8);
    if (std::memcmp(magic.data(), kArchiveMagic, 8) != 0)
        throw FormatError("archive: bad magic");
    std::uint32_t version = r.u32();
    if (version != kArchiveVersion)
        throw FormatError("archive: unsupported version " + std::to_string(version));
    std::uint32_t count = r.u32();
    std::vector<ArchiveEntry> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t name_len = r.u32();
        std::string name = r.str(name_len);
        int rank = (int)r.u8();
        Shape shape(rank);
        std::size_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            shape[d] = (int)r.u32();
            if (shape[d] <= 0) throw CorruptionError("archive: bad dim in " + name);
            numel *= (std::size_t)shape[d];
        }
        std::vector<float> values(numel);
        for (std::size_t k = 0; k < numel; ++k) values[k] = r.f32();
        entries.push_back({std::move(name), Tensor::from_data(std::move(shape), std::move(values))});
    }
    std::size_t body_end = r.pos;
    std::uint64_t stored = r.u64();
    if (r.pos != n) throw CorruptionError("archive: trailing bytes");
    std::uint64_t actual = fnv1a64_update(data, body_end);
    if (stored != actual) throw CorruptionError("archive: checksum mismatch");
    return entries;
}

void save_archive(const std::string& path, const std::vector<ArchiveEntry>& entries) {
    std::vector<std::uint8_t> bytes = archive_bytes(entries);
    write_file_atomic(path, bytes.data(), bytes.size());
}

std::vector<ArchiveEntry> load_archive(const std::string& path) {
    std::vector<std::uint8_t> bytes = read_file_bytes(path);
    return parse_archive(bytes.data(), bytes.size());
}

std::map<std::string, Tensor> archive_map(const std::vector<ArchiveEntry>& entries) {
    std::map<std::string, Tensor> m;
    for (const ArchiveEntry& e : entries) {
        if (!m.emplace(e.name, e.value).second)
            throw FormatError("archive: duplicate tensor name " + e.name);
    }
    return m;
}

Tensor pack_u64(std::uint64_t v) {
    Tensor t({2});
    t.at((size_t)0) = std::bit_cast<float>((std::uint32_t)(v & 0xffffffffULL));
    t.at((size_t)1) = std::bit_cast<float>((std::uint32_t)(v >> 32));
    return t;
}

std::uint64_t unpack_u64(const Tensor& t) {
    if (t.size() != 2) throw FormatError("unpack_u64: expected 2 elements");
    std::uint64_t lo = std::bit_cast<std::uint32_t>(t.at((size_t)0));
    std::uint64_t hi = std::bit_cast<std::uint32_t>(t.at((size_t)1));
    return lo | (hi << 32);
}

Tensor pack_f64(double v) { return pack_u64(std::bit_cast<std::uint64_t>(v)); }

double unpack_f64(const Tensor& t) { return std::bit_cast<double>(unpack_u64(t)); }

}  // namespace ootd
