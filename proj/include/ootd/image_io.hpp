#pragma once

// Binary PPM (P6) and PGM (P5) with maxval 255. Images are float tensors in
// [0,1]: color as [3 x H x W], grayscale as [1 x H x W]. Writing quantizes
// with round-to-nearest; values that are already exact k/255 multiples
// round-trip bitwise.

#include <string>

#include "ootd/tensor.hpp"

namespace ootd {

void write_ppm(const std::string& path, const Tensor& img);
Tensor read_ppm(const std::string& path);

void write_pgm(const std::string& path, const Tensor& img);
Tensor read_pgm(const std::string& path);

// round(clamp(v,0,1) * 255) as a byte; the shared quantizer for both formats.
unsigned char quantize_u8(float v);

}  // namespace ootd
