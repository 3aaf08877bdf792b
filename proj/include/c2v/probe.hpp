#pragma once

#include "c2v/checkpoint.hpp"
#include "c2v/encoder.hpp"
#include "c2v/toy_codec.hpp"
#include "c2v/unit_store.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace c2v {

enum class ProbeTask { frame_phoneme, utterance_speaker };

std::string to_string(ProbeTask task);
ProbeTask parse_probe_task(const std::string& s);

/// Hidden states H_0..H_L for every utterance, computed without masking or
/// quantizer dropout. Throws ConfigError when the dataset's codebooks do not
/// match the encoder's.
std::vector<LayerOutputs<float>> extract_features(const EncoderParams<float>& params, const EncoderConfig& config,
                                                  const std::vector<NamedSequence>& corpus);
std::vector<LayerOutputs<float>> extract_features(const Checkpoint& checkpoint, const std::vector<NamedSequence>& corpus);

/// Probe inputs: one N x d matrix per layer plus one label per row. Frame
/// tasks stack frames; utterance tasks mean-pool each utterance.
struct ProbeData {
    std::vector<MatD> layers;
    std::vector<std::uint32_t> labels;
    std::size_t num_classes = 0;

    std::size_t rows() const { return labels.size(); }
};

/// Builds probe data for the utterances listed in `subset` (indices into
/// `features` / `ids`). Labels are looked up by utterance id. When
/// `layer_count` is nonzero only the first `layer_count` layers are kept.
ProbeData build_probe_data(const std::vector<LayerOutputs<float>>& features, const std::vector<std::string>& ids,
                           const LabelSet& labels, ProbeTask task, std::span<const std::size_t> subset,
                           std::size_t layer_count = 0);

/// Softmax-weighted sum of layers followed by a linear classifier.
struct ProbeModel {
    ProbeTask task = ProbeTask::frame_phoneme;
    Eigen::VectorXd layer_logits;  ///< alpha = softmax(layer_logits)
    MatD weight;                   ///< classes x d_model
    Eigen::VectorXd bias;          ///< classes

    std::vector<double> alpha() const;
    std::size_t num_classes() const { return static_cast<std::size_t>(weight.rows()); }
    /// Class probabilities, one row per input row.
    MatD predict(const ProbeData& data) const;
};

struct ProbeTrainOptions {
    std::size_t epochs = 300;
    double lr = 0.05;
    double weight_decay = 1e-4;
};

/// Full-batch Adam on cross-entropy, jointly over alpha and the head. The
/// seed only drives the head initialization.
ProbeModel train_probe(const ProbeData& data, ProbeTask task, std::uint64_t seed, const ProbeTrainOptions& options = {},
                       std::vector<double>* loss_history = nullptr);

struct ProbeEval {
    double accuracy = 0.0;
    std::vector<double> per_class;  ///< NaN for classes absent from the split
    double majority_baseline = 0.0;
    std::vector<double> alpha;
};

ProbeEval evaluate_probe(const ProbeModel& model, const ProbeData& data);

/// One line of the results table.
struct ProbeRow {
    ProbeTask task = ProbeTask::frame_phoneme;
    std::string strategy;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    double baseline_accuracy = 0.0;  ///< raw-unit baseline probe
    double majority = 0.0;
    std::vector<double> alpha;
};

struct ProbeRunOptions {
    std::string checkpoint;
    std::string dataset;
    std::string labels;
    std::string codec;  ///< codec for the raw-unit baseline embeddings
    std::vector<ProbeTask> tasks{ProbeTask::frame_phoneme, ProbeTask::utterance_speaker};
    std::uint64_t seed = 1;
    double heldout_fraction = 0.25;
    ProbeTrainOptions train;
};

/// Probes a checkpoint and the raw-unit baseline (layer 0 of a freshly
/// initialized encoder whose embeddings come from the codec) on held-out
/// utterances.
std::vector<ProbeRow> run_probe(const ProbeRunOptions& options);

std::string format_probe_table(const std::vector<ProbeRow>& rows);
void write_probe_results(const std::string& path, const std::vector<ProbeRow>& rows);

}  // namespace c2v
