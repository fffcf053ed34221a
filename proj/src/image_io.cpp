#include "ootd/image_io.hpp"

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "ootd/errors.hpp"
#include "ootd/io_util.hpp"

namespace ootd {

unsigned char quantize_u8(float v) {
    if (!(v >= 0.0f)) v = 0.0f;  // also catches NaN
    if (v > 1.0f) v = 1.0f;
    return static_cast<unsigned char>(std::lround(v * 255.0f));
}

namespace {

// Skip whitespace and '#' comments between header fields.
void skip_ws(std::istream& in) {
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            in.get();
        } else {
            return;
        }
    }
}

int read_header_int(std::istream& in, const std::string& path) {
    skip_ws(in);
    int v = 0;
    if (!(in >> v)) throw FormatError("bad header field in " + path);
    return v;
}

struct PnmHeader {
    int w = 0, h = 0;
};

PnmHeader read_pnm_header(std::istream& in, const std::string& magic, const std::string& path) {
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (!in || m0 != magic[0] || m1 != magic[1])
        throw FormatError(path + ": expected " + magic + " magic");
    PnmHeader hd;
    hd.w = read_header_int(in, path);
    hd.h = read_header_int(in, path);
    int maxval = read_header_int(in, path);
    if (hd.w <= 0 || hd.h <= 0) throw FormatError(path + ": non-positive dimensions");
    if (maxval != 255) throw FormatError(path + ": only maxval 255 is supported");
    in.get();  // single whitespace byte before the raster
    return hd;
}

void write_pnm(const std::string& path, const std::string& magic, const Tensor& img,
               int channels) {
    if (img.rank() != 3 || img.dim(0) != channels)
        throw ShapeError(path + ": expected [" + std::to_string(channels) +
                         " x H x W] image, got " + shape_str(img.shape()));
    int H = img.dim(1), W = img.dim(2);
    std::string out = magic + "\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    size_t head = out.size();
    out.resize(head + static_cast<size_t>(channels) * H * W);
    size_t k = head;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < channels; ++c)
                out[k++] = static_cast<char>(quantize_u8(img.at(img.off3(c, y, x))));
    write_file_atomic(path, out.data(), out.size());
}

Tensor read_pnm(const std::string& path, const std::string& magic, int channels) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    PnmHeader hd = read_pnm_header(f, magic, path);
    size_t n = static_cast<size_t>(channels) * hd.w * hd.h;
    std::vector<unsigned char> raw(n);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
    if (!f) throw FormatError(path + ": truncated raster");
    Tensor img({channels, hd.h, hd.w});
    size_t k = 0;
    for (int y = 0; y < hd.h; ++y)
        for (int x = 0; x < hd.w; ++x)
            for (int c = 0; c < channels; ++c)
                img.at(img.off3(c, y, x)) = static_cast<float>(raw[k++]) / 255.0f;
    return img;
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& img) { write_pnm(path, "P6", img, 3); }
Tensor read_ppm(const std::string& path) { return read_pnm(path, "P6", 3); }
void write_pgm(const std::string& path, const Tensor& img) { write_pnm(path, "P5", img, 1); }
Tensor read_pgm(const std::string& path) { return read_pnm(path, "P5", 1); }

}  // namespace ootd
