#include "c2v/masking.hpp"

#include <algorithm>

namespace c2v {

std::size_t MaskSpec::count() const { return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), true)); }

std::vector<std::size_t> MaskSpec::indices() const {
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < masked.size(); ++t)
        if (masked[t]) out.push_back(t);
    return out;
}

MaskSpec MaskSpec::none(std::size_t frames) {
    MaskSpec m;
    m.frames = frames;
    m.masked.assign(frames, false);
    return m;
}

MaskSpec sample_mask(std::size_t frames, std::size_t span, double start_prob, Rng& rng) {
    if (span < 1) throw ConfigError("mask span must be >= 1");
    if (!(start_prob >= 0.0 && start_prob <= 1.0)) throw ConfigError("mask start probability must lie in [0, 1]");
    MaskSpec m = MaskSpec::none(frames);
    m.span = span;
    m.start_prob = start_prob;
    std::bernoulli_distribution start(start_prob);
    for (std::size_t s = 0; s < frames; ++s) {
        if (!start(rng)) continue;
        const std::size_t end = std::min(s + span, frames);
        for (std::size_t t = s; t < end; ++t) m.masked[t] = true;
    }
    return m;
}

}  // namespace c2v
