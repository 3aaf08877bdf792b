#pragma once

#include "c2v/checkpoint.hpp"
#include "c2v/config.hpp"
#include "c2v/encoder.hpp"
#include "c2v/targets.hpp"
#include "c2v/unit_store.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace c2v {

// ---------------------------------------------------------------------------
// Schedules

/// Linear warm-up to peak over `warmup` steps, then linear decay to zero at `total`.
double lr_hubert(std::uint64_t step, double peak = 5e-4, std::uint64_t warmup = 32000, std::uint64_t total = 400000);

/// Linear warm-up, constant phase, linear decay to zero.
double lr_dino(std::uint64_t step, double peak, std::uint64_t warmup = 12000, std::uint64_t constant = 188000,
               std::uint64_t decay = 200000);

// ---------------------------------------------------------------------------
// Configuration

enum class Strategy { reconstruction, offline_kmeans, online };
enum class Schedule { hubert, dino };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& s);

struct TrainConfig {
    Strategy strategy = Strategy::reconstruction;
    Schedule schedule = Schedule::hubert;

    std::uint64_t total_steps = 2000;
    std::uint64_t warmup_steps = 160;    ///< both schedules
    std::uint64_t constant_steps = 940;  ///< dino only; decay runs to total_steps
    double peak_lr = 5e-3;

    std::uint64_t frame_budget = 1000;
    std::uint64_t max_crop = 2000;
    std::uint64_t seed = 1;
    double heldout_fraction = 0.2;

    std::size_t mask_span = 10;
    double mask_start_prob = 0.08;

    EncoderConfig encoder;  ///< codebook_sizes come from the dataset
    AdamConfig adam;
    double clip_norm = 10.0;  ///< 0 disables clipping

    // online strategy
    OnlineClusterConfig cluster;
    EmaSchedule ema{0.999, 0.9999, 150, 1000};

    std::string dataset;
    std::string targets;     ///< target store (offline_kmeans)
    std::string init_codec;  ///< codec whose codewords initialize the embeddings

    std::uint64_t checkpoint_every = 0;  ///< 0: only the final checkpoint
    std::uint64_t log_every = 50;

    /// Keys that describe the run and enter the config hash.
    std::map<std::string, std::string> to_map() const;

    /// Desk-scale recipe for a strategy: breakpoints at the same fractions of
    /// total_steps as the 400k-step recipes.
    static TrainConfig desk(Strategy strategy, std::uint64_t total_steps = 2000);
    /// 400k-step recipes (schedule math only; not meant to run on a CPU).
    static TrainConfig full(Strategy strategy);

    /// Builds a config from flat keys (missing keys keep the desk defaults for
    /// the chosen strategy). Unknown keys are rejected.
    static TrainConfig from_config(const Config& config);
    static const std::set<std::string>& known_keys();

    double lr_at(std::uint64_t step) const;
    void validate() const;
};

// ---------------------------------------------------------------------------
// Batching

struct BatchItem {
    std::size_t utterance = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t frames() const { return end - begin; }
};
using Batch = std::vector<BatchItem>;

/// One epoch of batches: utterances shuffled with a generator seeded by
/// (seed, epoch), cropped to min(max_crop, frame_budget) at a random offset,
/// then packed greedily so no batch exceeds the frame budget.
std::vector<Batch> make_batches(std::span<const std::uint64_t> frame_counts, std::span<const std::size_t> pool,
                                std::uint64_t frame_budget, std::uint64_t max_crop, std::uint64_t seed,
                                std::uint64_t epoch);

/// Maps a global step to its batch, regenerating epochs as needed. Stateless
/// with respect to the step so training can resume anywhere.
class BatchStream {
public:
    BatchStream(std::vector<std::uint64_t> frame_counts, std::vector<std::size_t> pool, std::uint64_t frame_budget,
                std::uint64_t max_crop, std::uint64_t seed);
    const Batch& at(std::uint64_t step);

private:
    std::vector<std::uint64_t> counts_;
    std::vector<std::size_t> pool_;
    std::uint64_t budget_, crop_, seed_;
    std::uint64_t epoch_ = 0, epoch_start_ = 0;
    std::vector<Batch> batches_;
};

/// Deterministic train / held-out split of utterance indices.
struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> heldout;
};
Split split_utterances(std::size_t count, double heldout_fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training

struct TrainMetrics {
    std::uint64_t step = 0;
    double loss = 0.0;
    std::vector<double> accuracy;  ///< per head, over masked frames
    double lr = 0.0;
    double ema_decay = 0.0;
    std::size_t frames = 0;
    std::size_t masked_frames = 0;
    double frames_per_second = 0.0;
    double step_seconds = 0.0;
    double grad_norm = 0.0;

    std::string to_json() const;
};

/// Mutable training state; exclusively owned by one trainer.
struct TrainState {
    TrainConfig config;
    std::uint64_t step = 0;
    EncoderParams<float> params;
    AdamState<float> adam;
    std::optional<TeacherState<float>> teacher;
    std::uint64_t empty_batches = 0;
};

/// Cropped units plus (for precomputed strategies) their targets.
struct BatchData {
    std::vector<CodecUnitSequence> units;
    std::vector<TargetAssignment> targets;  ///< empty for the online strategy
};

class TrainingDiverged : public Error {
public:
    using Error::Error;
};

/// Fresh state: seeded init, optional codec-initialized embeddings, heads
/// sized for the strategy, teacher copied from the student for online.
TrainState init_train_state(const TrainConfig& config, std::vector<std::uint32_t> codebook_sizes,
                            std::vector<std::uint32_t> head_vocab, const ToyCodec* codec);

/// Masks, embeds with quantizer dropout, runs the student, and updates it.
/// Online strategy: the teacher labels the unmasked batch first, then its
/// codebooks and parameters follow the scheduled EMA.
TrainMetrics train_step(TrainState& state, const BatchData& batch);

Checkpoint make_checkpoint(const TrainState& state);
TrainState state_from_checkpoint(const Checkpoint& checkpoint, const TrainConfig& config);

struct HeldoutResult {
    double accuracy = 0.0;  ///< mean over heads
    double chance = 0.0;    ///< mean over heads of 1 / C
    std::size_t masked_frames = 0;
};

/// Masked-prediction accuracy on utterances never used for training, with a
/// fixed evaluation seed; no quantizer dropout.
HeldoutResult evaluate_heldout(TrainState& state, const PackedDataset& dataset, std::span<const std::size_t> utterances,
                               const TargetStore* targets, std::uint64_t eval_seed);

struct PretrainResult {
    std::string final_checkpoint;
    std::vector<TrainMetrics> metrics;
    HeldoutResult heldout;
    std::uint64_t config_hash = 0;
};

struct PretrainOptions {
    std::string out_dir;
    /// Stop early at this step (0 = total_steps); the checkpoint can be resumed.
    std::uint64_t stop_at = 0;
    std::string resume_from;
    /// Echo each logged record here as well.
    std::function<void(const TrainMetrics&)> on_log;
};

/// Full pre-training run: writes checkpoints (`step_<n>.c2vk`, `last.c2vk`)
/// and a line-delimited metrics log into out_dir.
PretrainResult pretrain(const TrainConfig& config, const PretrainOptions& options);

// ---------------------------------------------------------------------------
// Loader throughput

struct BenchReport {
    std::size_t utterances = 0;
    std::uint64_t frames = 0;
    double in_ram_frames_per_second = 0.0;
    double streaming_frames_per_second = 0.0;
    double ratio = 0.0;
    std::uint64_t in_ram_checksum = 0;
    std::uint64_t streaming_checksum = 0;

    std::string to_text() const;
};

/// Frames/sec for (i) loading the whole container once and iterating in RAM
/// versus (ii) opening the file and seeking per utterance.
BenchReport bench_throughput(const std::string& dataset_path, int repeats = 3);

}  // namespace c2v
