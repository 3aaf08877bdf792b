#pragma once

#include "c2v/common.hpp"
#include "c2v/encoder.hpp"
#include "c2v/kmeans.hpp"
#include "c2v/unit_store.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace c2v {

// ---------------------------------------------------------------------------
// (a) reconstruction

/// Stream i at frame t is codes[t][i]; one stream per codebook.
TargetAssignment reconstruction_targets(const CodecUnitSequence& units);

// ---------------------------------------------------------------------------
// (b) offline iterative clustering

/// Hidden states of one layer for an utterance, run without masking or
/// quantizer dropout.
MatF layer_latents(const CodecUnitSequence& units, const EncoderParams<float>& params, const EncoderConfig& config,
                   std::size_t layer_index);

struct TargetStore {
    std::map<std::string, TargetAssignment> labels;
    std::map<std::string, std::string> provenance;
    int frame_rate_hz = 50;

    const TargetAssignment& at(const std::string& id) const;
};

/// Target store file: a container with magic "C2VT" whose streams are the
/// label streams and whose manifest carries the provenance keys.
void write_target_store(const std::string& path, const TargetStore& store);
TargetStore read_target_store(const std::string& path);

struct RelabelOptions {
    std::size_t layer_index = 1;
    std::size_t k = 50;
    /// Fraction of utterances whose latents train the k-means model.
    double sample_fraction = 0.01;
    std::uint64_t seed = 0;
    int max_iters = 100;
};

struct RelabelResult {
    KMeansModel model;
    std::size_t sampled_utterances = 0;
    std::size_t sampled_frames = 0;
    std::map<std::string, std::string> provenance;
};

/// Fits k-means on one layer's latents over a sampled subset of the dataset,
/// labels every frame of the full dataset and writes a target store.
RelabelResult relabel_dataset(const std::string& checkpoint_path, const PackedDataset& dataset,
                              const RelabelOptions& options, const std::string& out_path);

// ---------------------------------------------------------------------------
// (c) online clustering with an EMA teacher

struct EmaSchedule {
    double warmup_start = 0.999;
    double warmup_end = 0.9999;
    std::uint64_t warmup_steps = 30000;
    std::uint64_t freeze_step = 200000;
};

/// Linear ramp from warmup_start to warmup_end, constant until freeze_step,
/// 1.0 (frozen teacher) from freeze_step on.
double ema_decay_at(std::uint64_t step, const EmaSchedule& schedule = {});

/// theta_T <- decay * theta_T + (1 - decay) * theta_S for every tensor.
template <typename Real>
void ema_update_teacher(EncoderParams<Real>& teacher, const EncoderParams<Real>& student, double decay);

struct OnlineClusterConfig {
    /// 1-based encoder layers whose outputs are clustered.
    std::vector<std::size_t> layers;
    std::size_t codebook_size = 64;
    double codebook_decay = 0.9;
    /// A codeword unassigned for this many consecutive updates is reseeded.
    std::uint64_t dead_after = 1000;

    /// Upper half of an n-layer stack.
    static OnlineClusterConfig upper_half(std::size_t n_layers, std::size_t codebook_size = 64);
};

template <typename Real>
struct TeacherState {
    EncoderParams<Real> params;
    OnlineClusterConfig cluster;
    std::vector<Mat<Real>> codebooks;  ///< one V x d_model matrix per clustered layer
    std::vector<std::vector<std::uint64_t>> idle;
    bool initialized = false;
    bool frozen = false;
    /// Every teacher forward pass is counted here; all of them run on
    /// unmasked, undropped input.
    std::uint64_t forward_calls = 0;

    static TeacherState from_student(const EncoderParams<Real>& student, OnlineClusterConfig cluster);
};

/// Teacher hidden states for one utterance (unmasked, all codebooks).
template <typename Real>
LayerOutputs<Real> teacher_forward(TeacherState<Real>& teacher, const EncoderConfig& config,
                                   const CodecUnitSequence& units);

/// Labels every frame of every sequence with its nearest codeword per
/// clustered layer, then moves each assigned codeword toward the batch mean of
/// its latents: v <- decay * v + (1 - decay) * mean. Unassigned codewords stay
/// put. On the first call codebooks are seeded from the batch latents. The
/// returned targets come from the codebooks as they were before the update.
template <typename Real>
std::vector<TargetAssignment> online_targets_and_update(TeacherState<Real>& teacher, const EncoderConfig& config,
                                                        std::span<const CodecUnitSequence* const> batch, Rng& rng);

/// Same labels as online_targets_and_update without touching the codebooks.
template <typename Real>
std::vector<TargetAssignment> online_targets(TeacherState<Real>& teacher, const EncoderConfig& config,
                                             std::span<const CodecUnitSequence* const> batch);

}  // namespace c2v
