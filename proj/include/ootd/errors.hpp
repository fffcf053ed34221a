#pragma once

#include <stdexcept>
#include <string>

namespace ootd {

// Error taxonomy used across the library. Everything derives from
// std::runtime_error so callers can catch coarsely or precisely.

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct RangeError : std::runtime_error {
    explicit RangeError(const std::string& msg) : std::runtime_error("range error: " + msg) {}
};

struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error("input error: " + msg) {}
};

// Shape mismatch inside outfitting fusion; carries the offending layer index.
struct FusionError : std::runtime_error {
    int layer_index;
    FusionError(int layer, const std::string& msg)
        : std::runtime_error("fusion error at self-attention layer " + std::to_string(layer) + ": " + msg),
          layer_index(layer) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

struct CorruptionError : std::runtime_error {
    explicit CorruptionError(const std::string& msg) : std::runtime_error("corruption error: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error("training error: " + msg) {}
};

}  // namespace ootd
