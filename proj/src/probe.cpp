#include "c2v/probe.hpp"

#include "c2v/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <random>
#include <sstream>

namespace c2v {

std::string to_string(ProbeTask task) {
    return task == ProbeTask::frame_phoneme ? "phoneme" : "speaker";
}

ProbeTask parse_probe_task(const std::string& s) {
    if (s == "phoneme" || s == "frame_phoneme") return ProbeTask::frame_phoneme;
    if (s == "speaker" || s == "utterance_speaker") return ProbeTask::utterance_speaker;
    throw ConfigError("unknown probe task '" + s + "' (expected phoneme or speaker)");
}

std::vector<LayerOutputs<float>> extract_features(const EncoderParams<float>& params, const EncoderConfig& config,
                                                  const std::vector<NamedSequence>& corpus) {
    std::vector<LayerOutputs<float>> out;
    out.reserve(corpus.size());
    for (const auto& seq : corpus) {
        if (seq.units.codebook_sizes() != config.codebook_sizes)
            throw ConfigError("utterance '" + seq.id + "' has " + std::to_string(seq.units.num_codebooks()) +
                              " codebooks that do not match the encoder's " +
                              std::to_string(config.num_codebooks()));
        out.push_back(forward(embed_units(seq.units, params), params, config));
    }
    return out;
}

std::vector<LayerOutputs<float>> extract_features(const Checkpoint& checkpoint,
                                                  const std::vector<NamedSequence>& corpus) {
    return extract_features(checkpoint.params, checkpoint.encoder, corpus);
}

ProbeData build_probe_data(const std::vector<LayerOutputs<float>>& features, const std::vector<std::string>& ids,
                           const LabelSet& labels, ProbeTask task, std::span<const std::size_t> subset,
                           std::size_t layer_count) {
    if (subset.empty()) throw ConfigError("probe split is empty");
    if (features.size() != ids.size()) throw ShapeError("features and utterance ids differ in length");
    std::map<std::string, const UtteranceLabels*> by_id;
    for (std::size_t i = 0; i < labels.ids.size(); ++i) by_id[labels.ids[i]] = &labels.labels[i];

    const std::size_t n_layers = layer_count ? layer_count : features.at(subset[0]).num_layers();
    const auto d = features.at(subset[0]).hidden.at(0).cols();

    ProbeData data;
    data.num_classes = task == ProbeTask::frame_phoneme ? labels.num_phonemes : labels.num_speakers;
    std::size_t rows = 0;
    for (auto u : subset) rows += task == ProbeTask::frame_phoneme ? features.at(u).hidden.at(0).rows() : 1;
    data.layers.assign(n_layers, MatD(static_cast<Eigen::Index>(rows), d));

    Eigen::Index r = 0;
    for (auto u : subset) {
        const auto it = by_id.find(ids[u]);
        if (it == by_id.end()) throw NotFoundError("no labels for utterance '" + ids[u] + "'");
        const auto& lab = *it->second;
        const auto& hidden = features[u].hidden;
        if (hidden.size() < n_layers) throw ShapeError("utterance '" + ids[u] + "' has too few layers");
        const auto T = hidden[0].rows();
        if (task == ProbeTask::frame_phoneme) {
            if (lab.phonemes.size() != static_cast<std::size_t>(T))
                throw ShapeError("utterance '" + ids[u] + "' has " + std::to_string(lab.phonemes.size()) +
                                 " phoneme labels for " + std::to_string(T) + " frames");
            for (std::size_t l = 0; l < n_layers; ++l) data.layers[l].middleRows(r, T) = hidden[l].cast<double>();
            data.labels.insert(data.labels.end(), lab.phonemes.begin(), lab.phonemes.end());
            r += T;
        } else {
            for (std::size_t l = 0; l < n_layers; ++l)
                data.layers[l].row(r) = hidden[l].cast<double>().colwise().mean();
            data.labels.push_back(lab.speaker);
            ++r;
        }
    }
    for (auto y : data.labels)
        if (y >= data.num_classes) throw RangeError("label " + std::to_string(y) + " outside the task's classes");
    return data;
}

namespace {

Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
    const Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
    return e / e.sum();
}

MatD mix(const ProbeData& data, const Eigen::VectorXd& alpha) {
    MatD x = MatD::Zero(data.layers[0].rows(), data.layers[0].cols());
    for (std::size_t l = 0; l < data.layers.size(); ++l) x += alpha(static_cast<Eigen::Index>(l)) * data.layers[l];
    return x;
}

MatD row_softmax(MatD logits) {
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        logits.row(i).array() -= logits.row(i).maxCoeff();
        logits.row(i) = logits.row(i).array().exp();
        logits.row(i) /= logits.row(i).sum();
    }
    return logits;
}

struct AdamSlot {
    MatD m, v;
    void init(Eigen::Index r, Eigen::Index c) {
        m = MatD::Zero(r, c);
        v = MatD::Zero(r, c);
    }
    void step(MatD& p, const MatD& g, double lr, int t, double decay) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g.cwiseProduct(g);
        const double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
        p.array() -= lr * ((m.array() / c1) / ((v.array() / c2).sqrt() + eps) + decay * p.array());
    }
};

}  // namespace

std::vector<double> ProbeModel::alpha() const {
    const Eigen::VectorXd a = softmax(layer_logits);
    return {a.data(), a.data() + a.size()};
}

MatD ProbeModel::predict(const ProbeData& data) const {
    if (data.layers.size() != static_cast<std::size_t>(layer_logits.size()))
        throw ShapeError("probe expects " + std::to_string(layer_logits.size()) + " layers, data has " +
                         std::to_string(data.layers.size()));
    MatD logits = mix(data, softmax(layer_logits)) * weight.transpose();
    logits.rowwise() += bias.transpose();
    return row_softmax(std::move(logits));
}

ProbeModel train_probe(const ProbeData& data, ProbeTask task, std::uint64_t seed, const ProbeTrainOptions& opt,
                       std::vector<double>* loss_history) {
    if (data.rows() == 0) throw ConfigError("probe split is empty");
    if (data.layers.empty()) throw ShapeError("probe data has no layers");
    for (const auto& l : data.layers)
        if (static_cast<std::size_t>(l.rows()) != data.rows())
            throw ShapeError("probe labels (" + std::to_string(data.rows()) + ") and features (" +
                             std::to_string(l.rows()) + " rows) differ in length");
    const auto n = static_cast<Eigen::Index>(data.rows());
    const auto C = static_cast<Eigen::Index>(data.num_classes);
    const auto d = data.layers[0].cols();
    const auto L = static_cast<Eigen::Index>(data.layers.size());

    ProbeModel model;
    model.task = task;
    model.layer_logits = Eigen::VectorXd::Zero(L);
    model.weight = MatD(C, d);
    model.bias = Eigen::VectorXd::Zero(C);
    Rng rng = derive_rng(seed, 0x70726f62);
    std::normal_distribution<double> normal(0.0, 0.01);
    for (Eigen::Index i = 0; i < model.weight.size(); ++i) model.weight.data()[i] = normal(rng);

    MatD onehot = MatD::Zero(n, C);
    for (Eigen::Index i = 0; i < n; ++i) onehot(i, data.labels[static_cast<std::size_t>(i)]) = 1.0;

    AdamSlot sa, sw, sb;
    sa.init(L, 1);
    sw.init(C, d);
    sb.init(C, 1);
    for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
        const Eigen::VectorXd alpha = softmax(model.layer_logits);
        const MatD x = mix(data, alpha);
        MatD logits = x * model.weight.transpose();
        logits.rowwise() += model.bias.transpose();
        const MatD p = row_softmax(std::move(logits));
        if (loss_history) {
            double loss = 0.0;
            for (Eigen::Index i = 0; i < n; ++i)
                loss -= std::log(std::max(p(i, data.labels[static_cast<std::size_t>(i)]), 1e-300));
            loss_history->push_back(loss / static_cast<double>(n));
        }
        const MatD g = (p - onehot) / static_cast<double>(n);
        const MatD gw = g.transpose() * x;
        const MatD gb = g.colwise().sum().transpose();
        const MatD gx = g * model.weight;
        Eigen::VectorXd galpha(L);
        for (Eigen::Index l = 0; l < L; ++l) galpha(l) = gx.cwiseProduct(data.layers[static_cast<std::size_t>(l)]).sum();
        const MatD glogit = alpha.cwiseProduct((galpha.array() - alpha.dot(galpha)).matrix());

        const int t = static_cast<int>(epoch);
        MatD la = model.layer_logits, b = model.bias;
        sa.step(la, glogit, opt.lr, t, 0.0);
        sw.step(model.weight, gw, opt.lr, t, opt.weight_decay);
        sb.step(b, gb, opt.lr, t, 0.0);
        model.layer_logits = la;
        model.bias = b;
    }
    return model;
}

ProbeEval evaluate_probe(const ProbeModel& model, const ProbeData& data) {
    if (data.rows() == 0) throw ConfigError("cannot evaluate on an empty split");
    if (data.num_classes != model.num_classes())
        throw ShapeError("probe has " + std::to_string(model.num_classes()) + " classes, data " +
                         std::to_string(data.num_classes));
    const MatD p = model.predict(data);
    ProbeEval ev;
    std::vector<std::size_t> hits(data.num_classes, 0), totals(data.num_classes, 0);
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        Eigen::Index pred = 0;
        p.row(i).maxCoeff(&pred);
        const auto y = data.labels[static_cast<std::size_t>(i)];
        ++totals[y];
        if (static_cast<std::uint32_t>(pred) == y) {
            ++hits[y];
            ++correct;
        }
    }
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(data.rows());
    std::size_t most = 0;
    for (std::size_t c = 0; c < data.num_classes; ++c) {
        ev.per_class.push_back(totals[c] ? static_cast<double>(hits[c]) / static_cast<double>(totals[c])
                                         : std::numeric_limits<double>::quiet_NaN());
        most = std::max(most, totals[c]);
    }
    ev.majority_baseline = static_cast<double>(most) / static_cast<double>(data.rows());
    ev.alpha = model.alpha();
    return ev;
}

std::vector<ProbeRow> run_probe(const ProbeRunOptions& opt) {
    const auto ck = load_checkpoint(opt.checkpoint);
    const auto dataset = PackedDataset::open(opt.dataset, LoadMode::in_memory);
    const auto corpus = dataset.unpack_all();
    const auto labels = read_labels(opt.labels);
    const auto& ids = dataset.manifest().utterance_ids;

    const auto features = extract_features(ck, corpus);

    EncoderConfig raw_config = ck.encoder;
    auto raw_params = init_params<float>(raw_config);
    if (!opt.codec.empty()) {
        const auto codec = load_codec(opt.codec);
        std::optional<std::uint64_t> map_seed;
        if (codec.dim() != raw_config.d_model) map_seed = raw_config.seed;
        init_embeddings_from_codec(raw_params, raw_config, codec, map_seed);
    }
    std::vector<LayerOutputs<float>> raw;
    raw.reserve(corpus.size());
    for (const auto& seq : corpus) {
        LayerOutputs<float> o;
        o.hidden.push_back(embed_units(seq.units, raw_params));
        raw.push_back(std::move(o));
    }

    const auto split = split_utterances(corpus.size(), opt.heldout_fraction, opt.seed);
    if (split.heldout.empty()) throw ConfigError("probe needs at least one held-out utterance");
    const auto it = ck.train_config.find("strategy");
    const std::string strategy = it == ck.train_config.end() ? "unknown" : it->second;

    std::vector<ProbeRow> rows;
    for (auto task : opt.tasks) {
        const auto train = build_probe_data(features, ids, labels, task, split.train);
        const auto test = build_probe_data(features, ids, labels, task, split.heldout);
        const auto model = train_probe(train, task, opt.seed, opt.train);
        const auto ev = evaluate_probe(model, test);

        const auto raw_train = build_probe_data(raw, ids, labels, task, split.train);
        const auto raw_test = build_probe_data(raw, ids, labels, task, split.heldout);
        const auto raw_ev = evaluate_probe(train_probe(raw_train, task, opt.seed, opt.train), raw_test);

        rows.push_back({task, strategy, opt.seed, ev.accuracy, raw_ev.accuracy, ev.majority_baseline, ev.alpha});
    }
    return rows;
}

std::string format_probe_table(const std::vector<ProbeRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(9) << "task" << std::setw(16) << "strategy" << std::setw(6) << "seed"
       << std::setw(10) << "accuracy" << std::setw(10) << "baseline" << std::setw(10) << "majority" << "alpha\n";
    os << std::fixed;
    for (const auto& r : rows) {
        os << std::setw(9) << to_string(r.task) << std::setw(16) << r.strategy << std::setw(6) << r.seed
           << std::setprecision(4) << std::setw(10) << r.accuracy << std::setw(10) << r.baseline_accuracy
           << std::setw(10) << r.majority;
        for (std::size_t i = 0; i < r.alpha.size(); ++i) os << (i ? "," : "") << std::setprecision(3) << r.alpha[i];
        os << '\n';
    }
    return os.str();
}

void write_probe_results(const std::string& path, const std::vector<ProbeRow>& rows) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out << format_probe_table(rows);
}

}  // namespace c2v
