#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace c2v {

/// Number of bits needed to store values in [0, vocab): ceil(log2(vocab)).
/// A vocabulary of one needs zero bits.
constexpr unsigned bits_for_vocab(std::uint64_t vocab) {
    unsigned bits = 0;
    while (bits < 64 && (std::uint64_t{1} << bits) < vocab) ++bits;
    return bits;
}

/// Appends little-endian, LSB-first bit fields to a byte buffer.
class BitWriter {
public:
    explicit BitWriter(std::vector<std::uint8_t>& out) : out_(out) {}

    void put(std::uint32_t value, unsigned bits) {
        for (unsigned b = 0; b < bits; ++b) {
            if (fill_ == 0) out_.push_back(0);
            if ((value >> b) & 1u) out_.back() |= static_cast<std::uint8_t>(1u << fill_);
            fill_ = (fill_ + 1) & 7u;
        }
    }

    /// Pads to the next byte boundary.
    void align() { fill_ = 0; }

private:
    std::vector<std::uint8_t>& out_;
    unsigned fill_ = 0;
};

class BitReader {
public:
    explicit BitReader(std::span<const std::uint8_t> in) : in_(in) {}

    std::uint32_t get(unsigned bits) {
        std::uint32_t v = 0;
        for (unsigned b = 0; b < bits; ++b, ++pos_) {
            const std::uint8_t byte = in_[pos_ >> 3];
            v |= static_cast<std::uint32_t>((byte >> (pos_ & 7u)) & 1u) << b;
        }
        return v;
    }

private:
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

}  // namespace c2v
