#pragma once

#include "c2v/common.hpp"
#include "c2v/kmeans.hpp"
#include "c2v/masking.hpp"
#include "c2v/toy_codec.hpp"
#include "c2v/unit_store.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace c2v {

struct EncoderConfig {
    std::vector<std::uint32_t> codebook_sizes;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t ff_dim = 128;
    std::size_t max_len = 2048;
    /// Softmax temperature of the prediction heads.
    double temperature = 0.1;
    /// Probability that a training sequence keeps only a random prefix of its codebooks.
    double quantizer_dropout = 0.1;
    std::uint64_t seed = 0;

    std::size_t num_codebooks() const { return codebook_sizes.size(); }
    std::size_t head_dim() const { return d_model / n_heads; }
    void validate() const;

    /// 2 layers, width 64.
    static EncoderConfig desk(std::vector<std::uint32_t> codebook_sizes);
    /// 12 layers, width 768, 12 heads, FFN 3072.
    static EncoderConfig base(std::vector<std::uint32_t> codebook_sizes);

    std::map<std::string, std::string> to_map() const;
    static EncoderConfig from_map(const std::map<std::string, std::string>& kv);
};

template <typename Real>
struct LayerParams {
    Mat<Real> ln1_g, ln1_b;
    Mat<Real> wq, bq, wk, bk, wv, bv, wo, bo;
    Mat<Real> ln2_g, ln2_b;
    Mat<Real> w1, b1, w2, b2;
};

/// Every trainable tensor of the model. Row vectors are stored as 1 x n.
template <typename Real>
struct EncoderParams {
    std::vector<Mat<Real>> embeddings;  ///< E_i, K_i x d_model
    Mat<Real> mask_embedding;           ///< 1 x d_model
    Mat<Real> positions;                ///< max_len x d_model
    std::vector<LayerParams<Real>> layers;
    Mat<Real> final_g, final_b;
    std::vector<Mat<Real>> heads;  ///< one C_j x d_model projection per target stream

    /// Tensors in a fixed canonical order; names() matches it.
    std::vector<Mat<Real>*> tensors();
    std::vector<const Mat<Real>*> tensors() const;
    std::vector<std::string> names() const;

    EncoderParams zeros_like() const;
    template <typename To>
    EncoderParams<To> cast() const;

    bool same_shapes(const EncoderParams& other) const;
    bool all_finite() const;
    friend bool operator==(const EncoderParams& a, const EncoderParams& b) {
        const auto ta = a.tensors();
        const auto tb = b.tensors();
        if (ta.size() != tb.size()) return false;
        for (std::size_t i = 0; i < ta.size(); ++i)
            if (ta[i]->rows() != tb[i]->rows() || ta[i]->cols() != tb[i]->cols() || *ta[i] != *tb[i]) return false;
        return true;
    }
};

/// Seeded random initialization (no heads).
template <typename Real>
EncoderParams<Real> init_params(const EncoderConfig& config);

/// Replaces the prediction heads with freshly initialized ones, one per vocabulary.
template <typename Real>
void reset_heads(EncoderParams<Real>& params, const EncoderConfig& config, std::span<const std::uint32_t> vocab_sizes,
                 std::uint64_t seed);

/// Per-layer hidden states H_0..H_L; H_0 is the (masked) embedding sum.
template <typename Real>
struct LayerOutputs {
    std::vector<Mat<Real>> hidden;
    /// attention[l][h] is the T x T attention map of head h in layer l, when requested.
    std::vector<std::vector<Mat<Real>>> attention;

    std::size_t num_layers() const { return hidden.size(); }
};

/// Z[t] = sum over i < keep_prefix of E_i[codes[t][i]]; keep_prefix 0 means all codebooks.
template <typename Real>
Mat<Real> embed_units(const CodecUnitSequence& units, const EncoderParams<Real>& params, std::size_t keep_prefix = 0);

/// With probability 1 - drop_prob keeps all codebooks, else a prefix length
/// uniform on [1, N_cb]. The first codebook is never dropped.
std::size_t sample_quantizer_dropout(double drop_prob, std::size_t num_codebooks, Rng& rng);

/// Loads codec codewords into the embedding tables. When the codec dimension
/// differs from d_model a seeded Gaussian D x d_model map projects them.
template <typename Real>
void init_embeddings_from_codec(EncoderParams<Real>& params, const EncoderConfig& config, const ToyCodec& codec,
                                std::optional<std::uint64_t> map_seed = std::nullopt);

/// Pre-norm Transformer stack. Throws with the layer index if activations
/// become non-finite.
template <typename Real>
LayerOutputs<Real> forward(const Mat<Real>& z_tilde, const EncoderParams<Real>& params, const EncoderConfig& config,
                           bool keep_attention = false);

/// Stack output after the final norm, i.e. what the prediction heads read.
/// Optionally also returns H_0..H_L.
template <typename Real>
Mat<Real> head_input(const Mat<Real>& z_tilde, const EncoderParams<Real>& params, const EncoderConfig& config,
                     LayerOutputs<Real>* outputs = nullptr);

/// Temperature softmax over w_c . h / tau, computed with max subtraction.
template <typename Real>
Mat<Real> predict_distribution(const Mat<Real>& hidden, const Mat<Real>& head, double temperature);

/// One sequence of a training batch.
struct SequenceExample {
    const CodecUnitSequence* units = nullptr;
    const TargetAssignment* targets = nullptr;
    MaskSpec mask;
    std::size_t keep_prefix = 0;  ///< quantizer-dropout prefix, 0 = all
};

struct LossStats {
    double loss = 0.0;
    std::size_t masked_frames = 0;
    std::vector<std::size_t> correct;  ///< per head, over masked frames
    std::size_t empty_batches = 0;     ///< 1 when the batch had no masked frame

    double accuracy(std::size_t head) const {
        return masked_frames ? static_cast<double>(correct.at(head)) / static_cast<double>(masked_frames) : 0.0;
    }
    double mean_accuracy() const;
};

/// Mean over masked frames (and heads) of -log p(target). When grads is
/// non-null it is overwritten with the gradient of that loss. A batch with
/// no masked frame yields zero loss and zero gradient.
template <typename Real>
LossStats compute_loss_and_grads(std::span<const SequenceExample> batch, const EncoderParams<Real>& params,
                                 const EncoderConfig& config, EncoderParams<Real>* grads);

template <typename Real>
double global_norm(const EncoderParams<Real>& grads);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-6;
    double weight_decay = 0.01;
};

template <typename Real>
struct AdamState {
    EncoderParams<Real> m, v;
    std::uint64_t steps = 0;
};

template <typename Real>
AdamState<Real> adam_init(const EncoderParams<Real>& params);

/// Decoupled weight decay applies to projection matrices only.
template <typename Real>
void adam_update(EncoderParams<Real>& params, const EncoderParams<Real>& grads, AdamState<Real>& state, double lr,
                 const AdamConfig& config);

}  // namespace c2v
