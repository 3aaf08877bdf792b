#pragma once

#include "c2v/common.hpp"

#include <cstddef>
#include <vector>

namespace c2v {

inline constexpr std::size_t kDefaultMaskSpan = 10;
inline constexpr double kDefaultMaskStartProb = 0.08;

/// Span mask over a sequence of length T. masked is a dense per-frame flag;
/// indices() yields the sorted set M.
struct MaskSpec {
    std::size_t frames = 0;
    std::size_t span = kDefaultMaskSpan;
    double start_prob = kDefaultMaskStartProb;
    std::vector<bool> masked;

    std::size_t count() const;
    std::vector<std::size_t> indices() const;
    bool empty() const { return count() == 0; }

    static MaskSpec none(std::size_t frames);
};

/// Each frame independently starts a span with probability start_prob; spans
/// are truncated at T and overlaps merge.
MaskSpec sample_mask(std::size_t frames, std::size_t span, double start_prob, Rng& rng);

/// Returns a copy of z with masked rows replaced by mask_embedding.
template <typename Real>
Mat<Real> apply_mask(const Mat<Real>& z, const MaskSpec& spec, const Mat<Real>& mask_embedding) {
    if (static_cast<std::size_t>(z.rows()) != spec.frames || spec.masked.size() != spec.frames)
        throw ShapeError("mask covers " + std::to_string(spec.frames) + " frames but input has " + std::to_string(z.rows()));
    if (mask_embedding.size() != z.cols())
        throw ShapeError("mask embedding has " + std::to_string(mask_embedding.size()) + " entries, model width is " +
                         std::to_string(z.cols()));
    Mat<Real> out = z;
    for (std::size_t t = 0; t < spec.frames; ++t)
        if (spec.masked[t]) out.row(static_cast<Eigen::Index>(t)) = mask_embedding.reshaped(1, z.cols());
    return out;
}

}  // namespace c2v
