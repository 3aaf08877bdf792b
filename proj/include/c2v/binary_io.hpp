#pragma once

#include "c2v/common.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace c2v {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Little-endian primitive writer over an output stream.
class BinaryWriter {
public:
    explicit BinaryWriter(std::ostream& out) : out_(out) {}

    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void f32(float v) { bytes(&v, 4); }
    void f64(double v) { bytes(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    template <typename Real>
    void matrix_f32(const Mat<Real>& m) {
        u32(static_cast<std::uint32_t>(m.rows()));
        u32(static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.size(); ++i) f32(static_cast<float>(m.data()[i]));
    }
    void matrix_f64(const MatD& m) {
        u32(static_cast<std::uint32_t>(m.rows()));
        u32(static_cast<std::uint32_t>(m.cols()));
        bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    }

private:
    std::ostream& out_;
};

class BinaryReader {
public:
    BinaryReader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}

    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(what_ + ": truncated");
    }
    std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
    std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
    float f32() { float v; bytes(&v, 4); return v; }
    double f64() { double v; bytes(&v, 8); return v; }
    std::string str(std::size_t limit = 1u << 24) {
        const auto n = u32();
        if (n > limit) throw FormatError(what_ + ": string length out of bounds");
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    template <typename Real>
    Mat<Real> matrix_f32() {
        const auto r = u32(), c = u32();
        if (static_cast<std::uint64_t>(r) * c > (1ull << 31)) throw FormatError(what_ + ": tensor too large");
        Mat<Real> m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(f32());
        return m;
    }
    MatD matrix_f64() {
        const auto r = u32(), c = u32();
        if (static_cast<std::uint64_t>(r) * c > (1ull << 31)) throw FormatError(what_ + ": tensor too large");
        MatD m(r, c);
        bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
        return m;
    }
    void expect_magic(const char (&magic)[5]) {
        char got[4];
        bytes(got, 4);
        if (std::memcmp(got, magic, 4) != 0) throw FormatError(what_ + ": bad magic, expected '" + std::string(magic, 4) + "'");
    }

private:
    std::istream& in_;
    std::string what_;
};

}  // namespace c2v
