#include "c2v/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace c2v {

// ---------------------------------------------------------------------------
// Config

void EncoderConfig::validate() const {
    if (codebook_sizes.empty()) throw ConfigError("encoder needs at least one codebook");
    for (auto k : codebook_sizes)
        if (k == 0) throw ConfigError("codebook sizes must be positive");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
        throw ConfigError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                          std::to_string(n_heads) + ")");
    if (ff_dim == 0) throw ConfigError("ff_dim must be positive");
    if (max_len == 0) throw ConfigError("max_len must be positive");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (!(quantizer_dropout >= 0.0 && quantizer_dropout <= 1.0))
        throw ConfigError("quantizer_dropout must lie in [0, 1]");
}

EncoderConfig EncoderConfig::desk(std::vector<std::uint32_t> codebook_sizes) {
    EncoderConfig c;
    c.codebook_sizes = std::move(codebook_sizes);
    return c;
}

EncoderConfig EncoderConfig::base(std::vector<std::uint32_t> codebook_sizes) {
    EncoderConfig c;
    c.codebook_sizes = std::move(codebook_sizes);
    c.d_model = 768;
    c.n_layers = 12;
    c.n_heads = 12;
    c.ff_dim = 3072;
    return c;
}

std::map<std::string, std::string> EncoderConfig::to_map() const {
    std::map<std::string, std::string> kv;
    std::string sizes;
    for (std::size_t i = 0; i < codebook_sizes.size(); ++i) sizes += (i ? "," : "") + std::to_string(codebook_sizes[i]);
    kv["codebook_sizes"] = sizes;
    kv["d_model"] = std::to_string(d_model);
    kv["n_layers"] = std::to_string(n_layers);
    kv["n_heads"] = std::to_string(n_heads);
    kv["ff_dim"] = std::to_string(ff_dim);
    kv["max_len"] = std::to_string(max_len);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", temperature);
    kv["temperature"] = buf;
    std::snprintf(buf, sizeof buf, "%.17g", quantizer_dropout);
    kv["quantizer_dropout"] = buf;
    kv["model_seed"] = std::to_string(seed);
    return kv;
}

EncoderConfig EncoderConfig::from_map(const std::map<std::string, std::string>& kv) {
    auto get = [&](const std::string& k) -> const std::string& {
        const auto it = kv.find(k);
        if (it == kv.end()) throw FormatError("encoder config missing key '" + k + "'");
        return it->second;
    };
    EncoderConfig c;
    std::string part;
    std::istringstream sizes(get("codebook_sizes"));
    while (std::getline(sizes, part, ',')) c.codebook_sizes.push_back(static_cast<std::uint32_t>(std::stoul(part)));
    c.d_model = std::stoul(get("d_model"));
    c.n_layers = std::stoul(get("n_layers"));
    c.n_heads = std::stoul(get("n_heads"));
    c.ff_dim = std::stoul(get("ff_dim"));
    c.max_len = std::stoul(get("max_len"));
    c.temperature = std::stod(get("temperature"));
    c.quantizer_dropout = std::stod(get("quantizer_dropout"));
    c.seed = std::stoull(get("model_seed"));
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Parameter bookkeeping

template <typename Real>
std::vector<Mat<Real>*> EncoderParams<Real>::tensors() {
    std::vector<Mat<Real>*> out;
    for (auto& e : embeddings) out.push_back(&e);
    out.push_back(&mask_embedding);
    out.push_back(&positions);
    for (auto& l : layers)
        for (auto* m : {&l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln2_g, &l.ln2_b,
                        &l.w1, &l.b1, &l.w2, &l.b2})
            out.push_back(m);
    out.push_back(&final_g);
    out.push_back(&final_b);
    for (auto& h : heads) out.push_back(&h);
    return out;
}

template <typename Real>
std::vector<const Mat<Real>*> EncoderParams<Real>::tensors() const {
    auto mut = const_cast<EncoderParams*>(this)->tensors();
    return {mut.begin(), mut.end()};
}

template <typename Real>
std::vector<std::string> EncoderParams<Real>::names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < embeddings.size(); ++i) out.push_back("emb." + std::to_string(i));
    out.push_back("mask");
    out.push_back("pos");
    static const char* kLayer[] = {"ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                                   "wo",    "bo",    "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"};
    for (std::size_t l = 0; l < layers.size(); ++l)
        for (const char* n : kLayer) out.push_back("layer." + std::to_string(l) + "." + n);
    out.push_back("final_g");
    out.push_back("final_b");
    for (std::size_t i = 0; i < heads.size(); ++i) out.push_back("head." + std::to_string(i));
    return out;
}

template <typename Real>
EncoderParams<Real> EncoderParams<Real>::zeros_like() const {
    EncoderParams out = *this;
    for (auto* t : out.tensors()) t->setZero();
    return out;
}

template <typename Real>
template <typename To>
EncoderParams<To> EncoderParams<Real>::cast() const {
    EncoderParams<To> out;
    out.embeddings.resize(embeddings.size());
    out.layers.resize(layers.size());
    out.heads.resize(heads.size());
    auto src = tensors();
    auto dst = out.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<To>();
    return out;
}

template <typename Real>
bool EncoderParams<Real>::same_shapes(const EncoderParams& other) const {
    const auto a = tensors();
    const auto b = other.tensors();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i]->rows() != b[i]->rows() || a[i]->cols() != b[i]->cols()) return false;
    return true;
}

template <typename Real>
bool EncoderParams<Real>::all_finite() const {
    for (const auto* t : tensors())
        if (!t->allFinite()) return false;
    return true;
}

namespace {

template <typename Real>
Mat<Real> gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Mat<Real> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(dist(rng));
    return m;
}

}  // namespace

template <typename Real>
EncoderParams<Real> init_params(const EncoderConfig& c) {
    c.validate();
    Rng rng = derive_rng(c.seed, 0x696e6974);
    const auto d = static_cast<Eigen::Index>(c.d_model);
    const auto ff = static_cast<Eigen::Index>(c.ff_dim);
    const double in_std = 1.0 / std::sqrt(static_cast<double>(c.d_model));
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(c.n_layers, 1)));

    EncoderParams<Real> p;
    for (auto k : c.codebook_sizes) p.embeddings.push_back(gaussian<Real>(k, d, in_std, rng));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    p.mask_embedding.resize(1, d);
    for (Eigen::Index j = 0; j < d; ++j) p.mask_embedding(0, j) = static_cast<Real>(unif(rng));
    // sinusoidal starting point; the table is trained like any other parameter
    p.positions.resize(static_cast<Eigen::Index>(c.max_len), d);
    for (Eigen::Index t = 0; t < p.positions.rows(); ++t)
        for (Eigen::Index j = 0; j < d; ++j) {
            const double freq = std::pow(10000.0, -static_cast<double>(j / 2 * 2) / static_cast<double>(d));
            const double a = static_cast<double>(t) * freq;
            p.positions(t, j) = static_cast<Real>(0.3 * (j % 2 == 0 ? std::sin(a) : std::cos(a)));
        }
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        LayerParams<Real> L;
        L.ln1_g = Mat<Real>::Ones(1, d);
        L.ln1_b = Mat<Real>::Zero(1, d);
        L.wq = gaussian<Real>(d, d, in_std, rng);
        L.wk = gaussian<Real>(d, d, in_std, rng);
        L.wv = gaussian<Real>(d, d, in_std, rng);
        L.wo = gaussian<Real>(d, d, in_std * out_scale, rng);
        L.bq = L.bk = L.bv = L.bo = Mat<Real>::Zero(1, d);
        L.ln2_g = Mat<Real>::Ones(1, d);
        L.ln2_b = Mat<Real>::Zero(1, d);
        L.w1 = gaussian<Real>(d, ff, in_std, rng);
        L.b1 = Mat<Real>::Zero(1, ff);
        L.w2 = gaussian<Real>(ff, d, out_scale / std::sqrt(static_cast<double>(c.ff_dim)), rng);
        L.b2 = Mat<Real>::Zero(1, d);
        p.layers.push_back(std::move(L));
    }
    p.final_g = Mat<Real>::Ones(1, d);
    p.final_b = Mat<Real>::Zero(1, d);
    return p;
}

template <typename Real>
void reset_heads(EncoderParams<Real>& params, const EncoderConfig& c, std::span<const std::uint32_t> vocab_sizes,
                 std::uint64_t seed) {
    Rng rng = derive_rng(seed, 0x68656164);
    params.heads.clear();
    const double stddev = 0.1 / std::sqrt(static_cast<double>(c.d_model));
    for (auto v : vocab_sizes) {
        if (v == 0) throw ConfigError("head vocabulary must be positive");
        params.heads.push_back(gaussian<Real>(v, static_cast<Eigen::Index>(c.d_model), stddev, rng));
    }
}

// ---------------------------------------------------------------------------
// Front end

template <typename Real>
Mat<Real> embed_units(const CodecUnitSequence& units, const EncoderParams<Real>& params, std::size_t keep_prefix) {
    const std::size_t n = params.embeddings.size();
    if (units.num_codebooks() != n)
        throw ShapeError("units have " + std::to_string(units.num_codebooks()) + " codebooks, model has " +
                         std::to_string(n));
    if (keep_prefix > n) throw ConfigError("keep prefix exceeds codebook count");
    const std::size_t use = keep_prefix == 0 ? n : keep_prefix;
    const auto d = params.embeddings.front().cols();
    Mat<Real> z = Mat<Real>::Zero(static_cast<Eigen::Index>(units.frames()), d);
    for (std::size_t t = 0; t < units.frames(); ++t)
        for (std::size_t i = 0; i < use; ++i) {
            const auto code = units.code(t, i);
            if (code >= static_cast<std::uint32_t>(params.embeddings[i].rows()))
                throw RangeError("code " + std::to_string(code) + " out of range at (t=" + std::to_string(t) +
                                 ", i=" + std::to_string(i) + ")");
            z.row(static_cast<Eigen::Index>(t)) += params.embeddings[i].row(code);
        }
    return z;
}

std::size_t sample_quantizer_dropout(double drop_prob, std::size_t num_codebooks, Rng& rng) {
    if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw ConfigError("quantizer dropout probability must lie in [0, 1]");
    if (num_codebooks == 0) throw ConfigError("need at least one codebook");
    std::bernoulli_distribution drop(drop_prob);
    if (!drop(rng)) return num_codebooks;
    std::uniform_int_distribution<std::size_t> keep(1, num_codebooks);
    return keep(rng);
}

template <typename Real>
void init_embeddings_from_codec(EncoderParams<Real>& params, const EncoderConfig& c, const ToyCodec& codec,
                                std::optional<std::uint64_t> map_seed) {
    if (codec.num_stages() != params.embeddings.size())
        throw ShapeError("codec has " + std::to_string(codec.num_stages()) + " stages, model has " +
                         std::to_string(params.embeddings.size()) + " codebooks");
    for (std::size_t i = 0; i < codec.num_stages(); ++i)
        if (static_cast<std::size_t>(codec.stages[i].rows()) != c.codebook_sizes[i])
            throw ShapeError("codec stage " + std::to_string(i) + " has " + std::to_string(codec.stages[i].rows()) +
                             " codewords, model expects " + std::to_string(c.codebook_sizes[i]));
    MatD map;
    if (map_seed) {
        Rng rng = derive_rng(*map_seed, 0x6d6170);
        map = gaussian<double>(static_cast<Eigen::Index>(codec.dim()), static_cast<Eigen::Index>(c.d_model),
                               1.0 / std::sqrt(static_cast<double>(c.d_model)), rng);
    } else if (codec.dim() != c.d_model) {
        throw ShapeError("codec dimension " + std::to_string(codec.dim()) + " differs from d_model " +
                         std::to_string(c.d_model) + " and no projection was requested");
    }
    for (std::size_t i = 0; i < codec.num_stages(); ++i) {
        const MatD mapped = map_seed ? MatD(codec.stages[i] * map) : codec.stages[i];
        params.embeddings[i] = mapped.cast<Real>();
    }
}

// ---------------------------------------------------------------------------
// Transformer stack

namespace {

constexpr double kLnEps = 1e-5;

template <typename Real>
struct LnCache {
    Mat<Real> xhat;
    Eigen::Matrix<Real, Eigen::Dynamic, 1> rstd;
};

template <typename Real>
Mat<Real> layer_norm(const Mat<Real>& x, const Mat<Real>& g, const Mat<Real>& b, LnCache<Real>* cache) {
    const auto n = x.cols();
    Mat<Real> xhat(x.rows(), n);
    Eigen::Matrix<Real, Eigen::Dynamic, 1> rstd(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const Real mean = x.row(r).mean();
        const auto centered = (x.row(r).array() - mean).matrix();
        const Real var = centered.squaredNorm() / static_cast<Real>(n);
        rstd(r) = Real(1) / std::sqrt(var + static_cast<Real>(kLnEps));
        xhat.row(r) = centered * rstd(r);
    }
    Mat<Real> y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
    if (cache) cache->xhat = std::move(xhat), cache->rstd = std::move(rstd);
    return y;
}

template <typename Real>
Mat<Real> layer_norm_backward(const Mat<Real>& dy, const Mat<Real>& g, const LnCache<Real>& c, Mat<Real>& dg,
                              Mat<Real>& db) {
    dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    db += dy.colwise().sum();
    const Mat<Real> dxhat = dy.array().rowwise() * g.row(0).array();
    const auto n = static_cast<Real>(dy.cols());
    Mat<Real> dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const Real mean_d = dxhat.row(r).sum() / n;
        const Real mean_dx = dxhat.row(r).dot(c.xhat.row(r)) / n;
        dx.row(r) = ((dxhat.row(r).array() - mean_d - c.xhat.row(r).array() * mean_dx) * c.rstd(r)).matrix();
    }
    return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename Real>
Real gelu(Real u) {
    const Real t = std::tanh(static_cast<Real>(kGeluC) * (u + static_cast<Real>(kGeluA) * u * u * u));
    return Real(0.5) * u * (Real(1) + t);
}

template <typename Real>
Real gelu_grad(Real u) {
    const Real inner = static_cast<Real>(kGeluC) * (u + static_cast<Real>(kGeluA) * u * u * u);
    const Real t = std::tanh(inner);
    const Real dinner = static_cast<Real>(kGeluC) * (Real(1) + Real(3) * static_cast<Real>(kGeluA) * u * u);
    return Real(0.5) * (Real(1) + t) + Real(0.5) * u * (Real(1) - t * t) * dinner;
}

template <typename Real>
void softmax_rows(Mat<Real>& s) {
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const Real mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp().matrix();
        s.row(r) /= s.row(r).sum();
    }
}

template <typename Real>
struct LayerTape {
    Mat<Real> x_in;
    LnCache<Real> ln1;
    Mat<Real> a, q, k, v;
    std::vector<Mat<Real>> probs;
    Mat<Real> o, x1;
    LnCache<Real> ln2;
    Mat<Real> c, u, g;
};

template <typename Real>
struct Tape {
    std::vector<LayerTape<Real>> layers;
    LnCache<Real> final_ln;
};

template <typename Real>
Mat<Real> add_row(const Mat<Real>& x, const Mat<Real>& bias) {
    return x.rowwise() + bias.row(0);
}

/// Runs the stack on z_tilde. Returns the post-final-norm representation used
/// by the heads; fills outputs (H_0..H_L) and optionally the tape.
template <typename Real>
Mat<Real> run_stack(const Mat<Real>& z_tilde, const EncoderParams<Real>& p, const EncoderConfig& c,
                    LayerOutputs<Real>* outputs, Tape<Real>* tape, bool keep_attention) {
    const auto frames = z_tilde.rows();
    if (static_cast<std::size_t>(frames) > c.max_len)
        throw ConfigError("sequence of " + std::to_string(frames) + " frames exceeds max_len " + std::to_string(c.max_len));
    if (z_tilde.cols() != static_cast<Eigen::Index>(c.d_model)) throw ShapeError("input width does not match d_model");
    if (!z_tilde.allFinite()) throw NumericError("non-finite activations at encoder input (layer 0)");
    if (outputs) {
        outputs->hidden.clear();
        outputs->attention.clear();
        outputs->hidden.push_back(z_tilde);
    }
    if (tape) tape->layers.resize(p.layers.size());

    const auto dh = static_cast<Eigen::Index>(c.head_dim());
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    Mat<Real> x = z_tilde + p.positions.topRows(frames);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& L = p.layers[l];
        LayerTape<Real> local;
        LayerTape<Real>& lt = tape ? tape->layers[l] : local;
        lt.x_in = x;
        lt.a = layer_norm(x, L.ln1_g, L.ln1_b, &lt.ln1);
        lt.q = add_row<Real>(lt.a * L.wq, L.bq);
        lt.k = add_row<Real>(lt.a * L.wk, L.bk);
        lt.v = add_row<Real>(lt.a * L.wv, L.bv);
        lt.o.resize(frames, x.cols());
        lt.probs.resize(c.n_heads);
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const auto col = static_cast<Eigen::Index>(h) * dh;
            Mat<Real> s = (lt.q.middleCols(col, dh) * lt.k.middleCols(col, dh).transpose()) * scale;
            softmax_rows(s);
            lt.o.middleCols(col, dh) = s * lt.v.middleCols(col, dh);
            lt.probs[h] = std::move(s);
        }
        lt.x1 = x + add_row<Real>(lt.o * L.wo, L.bo);
        lt.c = layer_norm(lt.x1, L.ln2_g, L.ln2_b, &lt.ln2);
        lt.u = add_row<Real>(lt.c * L.w1, L.b1);
        lt.g = lt.u.unaryExpr([](Real v) { return gelu(v); });
        x = lt.x1 + add_row<Real>(lt.g * L.w2, L.b2);
        if (!x.allFinite()) throw NumericError("non-finite activations at encoder layer " + std::to_string(l + 1));
        if (outputs) {
            outputs->hidden.push_back(x);
            if (keep_attention) outputs->attention.push_back(lt.probs);
        }
    }
    return layer_norm(x, p.final_g, p.final_b, tape ? &tape->final_ln : nullptr);
}

/// Backpropagates dy (gradient w.r.t. the post-final-norm output) through the
/// stack; accumulates parameter gradients and returns dL/dz_tilde.
template <typename Real>
Mat<Real> backward_stack(const Mat<Real>& dy, const EncoderParams<Real>& p, const EncoderConfig& c,
                         const Tape<Real>& tape, EncoderParams<Real>& grads) {
    const auto frames = dy.rows();
    const auto dh = static_cast<Eigen::Index>(c.head_dim());
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    Mat<Real> dx = layer_norm_backward(dy, p.final_g, tape.final_ln, grads.final_g, grads.final_b);
    for (std::size_t li = p.layers.size(); li-- > 0;) {
        const auto& L = p.layers[li];
        auto& G = grads.layers[li];
        const auto& lt = tape.layers[li];

        // FFN branch: x2 = x1 + gelu(c W1 + b1) W2 + b2
        G.w2 += lt.g.transpose() * dx;
        G.b2 += dx.colwise().sum();
        Mat<Real> du = (dx * L.w2.transpose()).array() * lt.u.unaryExpr([](Real v) { return gelu_grad(v); }).array();
        G.w1 += lt.c.transpose() * du;
        G.b1 += du.colwise().sum();
        const Mat<Real> dc = du * L.w1.transpose();
        Mat<Real> dx1 = dx + layer_norm_backward(dc, L.ln2_g, lt.ln2, G.ln2_g, G.ln2_b);

        // Attention branch: x1 = x + O Wo + bo
        G.wo += lt.o.transpose() * dx1;
        G.bo += dx1.colwise().sum();
        const Mat<Real> d_o = dx1 * L.wo.transpose();
        Mat<Real> dq(frames, d_o.cols()), dk(frames, d_o.cols()), dv(frames, d_o.cols());
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const auto col = static_cast<Eigen::Index>(h) * dh;
            const auto& P = lt.probs[h];
            const Mat<Real> doh = d_o.middleCols(col, dh);
            dv.middleCols(col, dh) = P.transpose() * doh;
            const Mat<Real> dp = doh * lt.v.middleCols(col, dh).transpose();
            Mat<Real> ds = P.array() * (dp.colwise() - (dp.array() * P.array()).rowwise().sum().matrix()).array();
            ds *= scale;
            dq.middleCols(col, dh) = ds * lt.k.middleCols(col, dh);
            dk.middleCols(col, dh) = ds.transpose() * lt.q.middleCols(col, dh);
        }
        G.wq += lt.a.transpose() * dq;
        G.bq += dq.colwise().sum();
        G.wk += lt.a.transpose() * dk;
        G.bk += dk.colwise().sum();
        G.wv += lt.a.transpose() * dv;
        G.bv += dv.colwise().sum();
        const Mat<Real> da = dq * L.wq.transpose() + dk * L.wk.transpose() + dv * L.wv.transpose();
        dx = dx1 + layer_norm_backward(da, L.ln1_g, lt.ln1, G.ln1_g, G.ln1_b);
    }
    grads.positions.topRows(frames) += dx;
    return dx;
}

}  // namespace

template <typename Real>
LayerOutputs<Real> forward(const Mat<Real>& z_tilde, const EncoderParams<Real>& params, const EncoderConfig& config,
                           bool keep_attention) {
    LayerOutputs<Real> out;
    run_stack<Real>(z_tilde, params, config, &out, nullptr, keep_attention);
    return out;
}

template <typename Real>
Mat<Real> head_input(const Mat<Real>& z_tilde, const EncoderParams<Real>& params, const EncoderConfig& config,
                     LayerOutputs<Real>* outputs) {
    return run_stack<Real>(z_tilde, params, config, outputs, nullptr, false);
}

template <typename Real>
Mat<Real> predict_distribution(const Mat<Real>& hidden, const Mat<Real>& head, double temperature) {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (hidden.cols() != head.cols()) throw ShapeError("hidden width does not match projection head");
    Mat<Real> logits = (hidden * head.transpose()) / static_cast<Real>(temperature);
    softmax_rows(logits);
    return logits;
}

double LossStats::mean_accuracy() const {
    if (correct.empty() || masked_frames == 0) return 0.0;
    double s = 0.0;
    for (std::size_t h = 0; h < correct.size(); ++h) s += accuracy(h);
    return s / static_cast<double>(correct.size());
}

template <typename Real>
LossStats compute_loss_and_grads(std::span<const SequenceExample> batch, const EncoderParams<Real>& params,
                                 const EncoderConfig& config, EncoderParams<Real>* grads) {
    const std::size_t n_heads = params.heads.size();
    if (n_heads == 0) throw ConfigError("model has no prediction heads");
    LossStats stats;
    stats.correct.assign(n_heads, 0);
    for (const auto& ex : batch) {
        if (!ex.units || !ex.targets) throw ConfigError("batch entry without units or targets");
        if (ex.targets->num_streams() != n_heads)
            throw ShapeError("targets have " + std::to_string(ex.targets->num_streams()) + " streams, model has " +
                             std::to_string(n_heads) + " heads");
        if (ex.targets->frames != ex.units->frames() || ex.mask.frames != ex.units->frames())
            throw ShapeError("targets, mask and units disagree on frame count");
        for (std::size_t j = 0; j < n_heads; ++j)
            if (ex.targets->vocab_sizes[j] != static_cast<std::uint32_t>(params.heads[j].rows()))
                throw ShapeError("target stream " + std::to_string(j) + " vocabulary does not match its head");
        stats.masked_frames += ex.mask.count();
    }
    if (grads) *grads = params.zeros_like();
    if (stats.masked_frames == 0) {
        stats.empty_batches = 1;
        return stats;
    }

    const Real inv_tau = static_cast<Real>(1.0 / config.temperature);
    const Real weight = static_cast<Real>(1.0 / (static_cast<double>(stats.masked_frames) * n_heads));
    double loss_sum = 0.0;
    for (const auto& ex : batch) {
        const auto masked_idx = ex.mask.indices();
        if (masked_idx.empty()) continue;
        const Mat<Real> z = embed_units(*ex.units, params, ex.keep_prefix);
        const Mat<Real> zt = apply_mask(z, ex.mask, params.mask_embedding);
        Tape<Real> tape;
        const Mat<Real> y = run_stack<Real>(zt, params, config, nullptr, grads ? &tape : nullptr, false);

        const auto m = static_cast<Eigen::Index>(masked_idx.size());
        Mat<Real> ym(m, y.cols());
        for (Eigen::Index r = 0; r < m; ++r) ym.row(r) = y.row(static_cast<Eigen::Index>(masked_idx[r]));
        Mat<Real> dym = Mat<Real>::Zero(m, y.cols());
        for (std::size_t j = 0; j < n_heads; ++j) {
            const auto& W = params.heads[j];
            Mat<Real> logits = (ym * W.transpose()) * inv_tau;
            Mat<Real> dlogits(m, W.rows());
            const auto& labels = ex.targets->streams[j];
            for (Eigen::Index r = 0; r < m; ++r) {
                const auto target = static_cast<Eigen::Index>(labels[masked_idx[r]]);
                Eigen::Index arg = 0;
                const Real mx = logits.row(r).maxCoeff(&arg);
                const auto shifted = (logits.row(r).array() - mx).exp();
                const Real denom = shifted.sum();
                loss_sum -= static_cast<double>(logits(r, target) - mx) - std::log(static_cast<double>(denom));
                if (arg == target) ++stats.correct[j];
                if (grads) {
                    dlogits.row(r) = (shifted / denom).matrix() * weight;
                    dlogits(r, target) -= weight;
                }
            }
            if (grads) {
                grads->heads[j] += (dlogits.transpose() * ym) * inv_tau;
                dym += (dlogits * W) * inv_tau;
            }
        }
        if (!grads) continue;

        Mat<Real> dy = Mat<Real>::Zero(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < m; ++r) dy.row(static_cast<Eigen::Index>(masked_idx[r])) = dym.row(r);
        const Mat<Real> dz = backward_stack(dy, params, config, tape, *grads);

        const std::size_t use = ex.keep_prefix == 0 ? params.embeddings.size() : ex.keep_prefix;
        for (std::size_t t = 0; t < ex.units->frames(); ++t) {
            const auto row = static_cast<Eigen::Index>(t);
            if (ex.mask.masked[t]) {
                grads->mask_embedding += dz.row(row);
                continue;
            }
            for (std::size_t i = 0; i < use; ++i) grads->embeddings[i].row(ex.units->code(t, i)) += dz.row(row);
        }
    }
    stats.loss = loss_sum / (static_cast<double>(stats.masked_frames) * static_cast<double>(n_heads));
    return stats;
}

template <typename Real>
double global_norm(const EncoderParams<Real>& grads) {
    double s = 0.0;
    for (const auto* t : grads.tensors()) s += t->template cast<double>().squaredNorm();
    return std::sqrt(s);
}

template <typename Real>
AdamState<Real> adam_init(const EncoderParams<Real>& params) {
    return {params.zeros_like(), params.zeros_like(), 0};
}

template <typename Real>
void adam_update(EncoderParams<Real>& params, const EncoderParams<Real>& grads, AdamState<Real>& state, double lr,
                 const AdamConfig& cfg) {
    if (!params.same_shapes(grads) || !params.same_shapes(state.m)) throw ShapeError("optimizer state shape mismatch");
    ++state.steps;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.steps));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.steps));
    auto p = params.tensors();
    auto g = grads.tensors();
    auto m = state.m.tensors();
    auto v = state.v.tensors();
    const auto names = params.names();
    const auto b1 = static_cast<Real>(cfg.beta1), b2 = static_cast<Real>(cfg.beta2);
    const auto step = static_cast<Real>(lr / bc1);
    const auto inv_bc2 = static_cast<Real>(1.0 / bc2);
    const auto eps = static_cast<Real>(cfg.eps);
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i]->array() = b1 * m[i]->array() + (Real(1) - b1) * g[i]->array();
        v[i]->array() = b2 * v[i]->array() + (Real(1) - b2) * g[i]->array().square();
        const auto& n = names[i];
        const bool decay = n.starts_with("head.") || n.ends_with(".wq") || n.ends_with(".wk") || n.ends_with(".wv") ||
                           n.ends_with(".wo") || n.ends_with(".w1") || n.ends_with(".w2");
        if (decay && cfg.weight_decay > 0.0) p[i]->array() *= static_cast<Real>(1.0 - lr * cfg.weight_decay);
        p[i]->array() -= step * m[i]->array() / ((v[i]->array() * inv_bc2).sqrt() + eps);
    }
}

// ---------------------------------------------------------------------------
// Instantiations

#define C2V_INSTANTIATE(Real)                                                                                         \
    template struct EncoderParams<Real>;                                                                             \
    template EncoderParams<Real> init_params<Real>(const EncoderConfig&);                                             \
    template void reset_heads<Real>(EncoderParams<Real>&, const EncoderConfig&, std::span<const std::uint32_t>,       \
                                    std::uint64_t);                                                                  \
    template Mat<Real> embed_units<Real>(const CodecUnitSequence&, const EncoderParams<Real>&, std::size_t);         \
    template void init_embeddings_from_codec<Real>(EncoderParams<Real>&, const EncoderConfig&, const ToyCodec&,     \
                                                   std::optional<std::uint64_t>);                                    \
    template LayerOutputs<Real> forward<Real>(const Mat<Real>&, const EncoderParams<Real>&, const EncoderConfig&,    \
                                              bool);                                                                 \
    template Mat<Real> head_input<Real>(const Mat<Real>&, const EncoderParams<Real>&, const EncoderConfig&,          \
                                        LayerOutputs<Real>*);                                                        \
    template Mat<Real> predict_distribution<Real>(const Mat<Real>&, const Mat<Real>&, double);                       \
    template LossStats compute_loss_and_grads<Real>(std::span<const SequenceExample>, const EncoderParams<Real>&,     \
                                                    const EncoderConfig&, EncoderParams<Real>*);                     \
    template double global_norm<Real>(const EncoderParams<Real>&);                                                   \
    template AdamState<Real> adam_init<Real>(const EncoderParams<Real>&);                                            \
    template void adam_update<Real>(EncoderParams<Real>&, const EncoderParams<Real>&, AdamState<Real>&, double,       \
                                    const AdamConfig&);

C2V_INSTANTIATE(float)
C2V_INSTANTIATE(double)
#undef C2V_INSTANTIATE

template EncoderParams<double> EncoderParams<float>::cast<double>() const;
template EncoderParams<float> EncoderParams<double>::cast<float>() const;
template EncoderParams<float> EncoderParams<float>::cast<float>() const;

}  // namespace c2v
