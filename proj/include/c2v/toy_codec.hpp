#pragma once

#include "c2v/common.hpp"
#include "c2v/unit_store.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace c2v {

struct CorpusConfig {
    std::size_t num_utterances = 40;
    std::size_t min_frames = 60;
    std::size_t max_frames = 160;
    std::size_t feature_dim = 16;
    std::size_t num_phonemes = 8;
    std::size_t num_speakers = 4;
    double noise = 0.1;
    /// Scale of the per-speaker offset relative to the unit-norm phoneme prototypes.
    double speaker_scale = 0.5;
    std::size_t min_segment = 4;
    std::size_t max_segment = 20;
    int frame_rate_hz = 50;
};

/// Labeled synthetic stand-in for 50 Hz acoustic frames.
struct SyntheticCorpus {
    std::vector<std::string> ids;
    std::vector<MatF> features;  ///< per utterance, T x D
    std::vector<std::vector<std::uint32_t>> phoneme_labels;
    std::vector<std::uint32_t> speaker_labels;
    std::size_t num_phonemes = 0;
    std::size_t num_speakers = 0;
    std::uint64_t seed = 0;

    std::size_t size() const { return ids.size(); }
    std::size_t total_frames() const;
    /// All frames stacked in utterance order.
    MatD stacked_features() const;
};

/// frame = phoneme prototype + speaker offset + Gaussian noise, with phoneme
/// segments of random duration in [min_segment, max_segment].
SyntheticCorpus synthesize_corpus(const CorpusConfig& config, std::uint64_t seed);

/// Residual vector quantizer: N_cb ordered codebooks of K codewords each.
struct ToyCodec {
    std::vector<MatD> stages;  ///< each K x D
    int frame_rate_hz = 50;

    std::size_t num_stages() const { return stages.size(); }
    std::size_t codebook_size() const { return stages.empty() ? 0 : static_cast<std::size_t>(stages[0].rows()); }
    std::size_t dim() const { return stages.empty() ? 0 : static_cast<std::size_t>(stages[0].cols()); }
};

/// Each stage is k-means over the residuals left by the previous stages.
ToyCodec train_rvq(const MatD& features, std::size_t num_stages, std::size_t codebook_size, int iters,
                   std::uint64_t seed);

/// Greedy residual assignment; ties go to the lowest codeword index.
CodecUnitSequence encode(const ToyCodec& codec, const MatD& features);

/// Sum of the selected codewords. `stages_used` limits decoding to a prefix
/// of the stages (0 means all).
MatD decode(const ToyCodec& codec, const CodecUnitSequence& units, std::size_t stages_used = 0);

void save_codec(const ToyCodec& codec, const std::string& path);
ToyCodec load_codec(const std::string& path);

/// Labels sidecar written next to an extracted dataset:
/// `<utt_id> <speaker> <phoneme_0> <phoneme_1> ...` per line.
void write_labels(const std::string& path, const SyntheticCorpus& corpus);

struct UtteranceLabels {
    std::uint32_t speaker = 0;
    std::vector<std::uint32_t> phonemes;
};
struct LabelSet {
    std::vector<std::string> ids;
    std::vector<UtteranceLabels> labels;
    std::size_t num_phonemes = 0;
    std::size_t num_speakers = 0;
};
LabelSet read_labels(const std::string& path);

}  // namespace c2v
