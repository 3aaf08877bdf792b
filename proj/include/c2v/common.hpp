#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace c2v {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (bad magic, ragged rows, ...).
class FormatError : public Error {
public:
    using Error::Error;
};

/// A discrete code or label outside its vocabulary.
class RangeError : public Error {
public:
    using Error::Error;
};

/// Tensor or dimension mismatch.
class ShapeError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

/// NaN or infinity in activations.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or precondition violation by the caller.
class ConfigError : public Error {
public:
    using Error::Error;
};

template <typename Real>
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatF = Mat<float>;
using MatD = Mat<double>;

using Rng = std::mt19937_64;

/// Derives an independent generator from a root seed plus purpose/step tags.
/// Every random draw in the pipeline goes through one of these so that any
/// step can be replayed without carrying generator state around.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t purpose, std::uint64_t step = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(step),
                      static_cast<std::uint32_t>(step >> 32)};
    return Rng(seq);
}

/// 64-bit FNV-1a; used for config hashes and file checksums.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v);

/// Checksum of a whole file's bytes.
std::uint64_t file_checksum(const std::string& path);

}  // namespace c2v
