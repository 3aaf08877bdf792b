#include "c2v/toy_codec.hpp"

#include "c2v/binary_io.hpp"
#include "c2v/kmeans.hpp"

#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace c2v {

std::size_t SyntheticCorpus::total_frames() const {
    std::size_t n = 0;
    for (const auto& f : features) n += static_cast<std::size_t>(f.rows());
    return n;
}

MatD SyntheticCorpus::stacked_features() const {
    const auto dim = features.empty() ? 0 : features.front().cols();
    MatD out(static_cast<Eigen::Index>(total_frames()), dim);
    Eigen::Index row = 0;
    for (const auto& f : features) {
        out.middleRows(row, f.rows()) = f.cast<double>();
        row += f.rows();
    }
    return out;
}

SyntheticCorpus synthesize_corpus(const CorpusConfig& c, std::uint64_t seed) {
    if (c.num_phonemes < 2) throw ConfigError("corpus needs at least 2 phonemes");
    if (c.num_speakers < 1) throw ConfigError("corpus needs at least 1 speaker");
    if (c.feature_dim < 4) throw ConfigError("corpus feature dimension must be >= 4");
    if (c.num_utterances < 1) throw ConfigError("corpus needs at least one utterance");
    if (c.min_frames < 1 || c.max_frames < c.min_frames) throw ConfigError("bad utterance length range");
    if (c.min_segment < 1 || c.max_segment < c.min_segment) throw ConfigError("bad segment length range");
    if (c.noise < 0.0) throw ConfigError("noise level must be non-negative");

    SyntheticCorpus corpus;
    corpus.num_phonemes = c.num_phonemes;
    corpus.num_speakers = c.num_speakers;
    corpus.seed = seed;

    const auto dim = static_cast<Eigen::Index>(c.feature_dim);
    Rng proto_rng = derive_rng(seed, 0x70);
    std::normal_distribution<double> gauss(0.0, 1.0);
    MatD prototypes(static_cast<Eigen::Index>(c.num_phonemes), dim);
    for (Eigen::Index p = 0; p < prototypes.rows(); ++p) {
        for (Eigen::Index j = 0; j < dim; ++j) prototypes(p, j) = gauss(proto_rng);
        prototypes.row(p).normalize();
    }
    MatD speakers(static_cast<Eigen::Index>(c.num_speakers), dim);
    for (Eigen::Index s = 0; s < speakers.rows(); ++s) {
        for (Eigen::Index j = 0; j < dim; ++j) speakers(s, j) = gauss(proto_rng);
        speakers.row(s) *= c.speaker_scale / std::sqrt(static_cast<double>(dim));
    }
    // A single speaker carries no offset, so frames of one phoneme coincide.
    if (c.num_speakers == 1) speakers.setZero();

    Rng rng = derive_rng(seed, 0x75);
    std::uniform_int_distribution<std::size_t> len_dist(c.min_frames, c.max_frames);
    std::uniform_int_distribution<std::size_t> seg_dist(c.min_segment, c.max_segment);
    std::uniform_int_distribution<std::uint32_t> ph_dist(0, static_cast<std::uint32_t>(c.num_phonemes - 1));
    std::uniform_int_distribution<std::uint32_t> spk_dist(0, static_cast<std::uint32_t>(c.num_speakers - 1));

    for (std::size_t u = 0; u < c.num_utterances; ++u) {
        std::ostringstream id;
        id << "utt" << std::setw(5) << std::setfill('0') << u;
        const std::size_t frames = len_dist(rng);
        const std::uint32_t spk = spk_dist(rng);
        std::vector<std::uint32_t> phones;
        phones.reserve(frames);
        while (phones.size() < frames) {
            const auto ph = ph_dist(rng);
            const auto len = seg_dist(rng);
            for (std::size_t k = 0; k < len && phones.size() < frames; ++k) phones.push_back(ph);
        }
        MatF feats(static_cast<Eigen::Index>(frames), dim);
        for (std::size_t t = 0; t < frames; ++t) {
            const auto row = static_cast<Eigen::Index>(t);
            for (Eigen::Index j = 0; j < dim; ++j) {
                const double noise = c.noise > 0.0 ? c.noise * gauss(rng) : 0.0;
                feats(row, j) = static_cast<float>(prototypes(phones[t], j) + speakers(spk, j) + noise);
            }
        }
        corpus.ids.push_back(id.str());
        corpus.features.push_back(std::move(feats));
        corpus.phoneme_labels.push_back(std::move(phones));
        corpus.speaker_labels.push_back(spk);
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// RVQ

namespace {

std::uint32_t nearest_codeword(const MatD& book, const Eigen::Ref<const Eigen::RowVectorXd>& x) {
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t arg = 0;
    for (Eigen::Index k = 0; k < book.rows(); ++k) {
        const double d = (book.row(k) - x).squaredNorm();
        if (d < best) {
            best = d;
            arg = static_cast<std::uint32_t>(k);
        }
    }
    return arg;
}

}  // namespace

ToyCodec train_rvq(const MatD& features, std::size_t num_stages, std::size_t codebook_size, int iters,
                   std::uint64_t seed) {
    if (num_stages < 1) throw ConfigError("RVQ needs at least one stage");
    if (codebook_size > static_cast<std::size_t>(features.rows()))
        throw ConfigError("RVQ codebook size " + std::to_string(codebook_size) + " exceeds the " +
                          std::to_string(features.rows()) + " training frames");
    ToyCodec codec;
    MatD residual = features;
    for (std::size_t s = 0; s < num_stages; ++s) {
        auto km = kmeans_fit(residual, codebook_size, iters, seed + 7919 * s);
        const auto labels = nearest_rows(km.centroids, residual);
        for (Eigen::Index r = 0; r < residual.rows(); ++r)
            residual.row(r) -= km.centroids.row(labels[static_cast<std::size_t>(r)]);
        codec.stages.push_back(std::move(km.centroids));
    }
    return codec;
}

CodecUnitSequence encode(const ToyCodec& codec, const MatD& features) {
    if (codec.stages.empty()) throw ConfigError("codec has no stages");
    if (static_cast<std::size_t>(features.cols()) != codec.dim())
        throw ShapeError("feature dimension " + std::to_string(features.cols()) + " does not match codec dimension " +
                         std::to_string(codec.dim()));
    const std::size_t n = codec.num_stages();
    std::vector<std::uint32_t> codes(static_cast<std::size_t>(features.rows()) * n);
    Eigen::RowVectorXd residual;
    for (Eigen::Index t = 0; t < features.rows(); ++t) {
        residual = features.row(t);
        for (std::size_t s = 0; s < n; ++s) {
            const auto k = nearest_codeword(codec.stages[s], residual);
            codes[static_cast<std::size_t>(t) * n + s] = k;
            residual -= codec.stages[s].row(k);
        }
    }
    std::vector<std::uint32_t> sizes(n, static_cast<std::uint32_t>(codec.codebook_size()));
    return CodecUnitSequence(static_cast<std::size_t>(features.rows()), std::move(sizes), codec.frame_rate_hz,
                             std::move(codes));
}

MatD decode(const ToyCodec& codec, const CodecUnitSequence& units, std::size_t stages_used) {
    if (units.num_codebooks() != codec.num_stages()) throw ShapeError("unit sequence does not match codec stage count");
    const std::size_t use = stages_used == 0 ? codec.num_stages() : std::min(stages_used, codec.num_stages());
    MatD out = MatD::Zero(static_cast<Eigen::Index>(units.frames()), static_cast<Eigen::Index>(codec.dim()));
    for (std::size_t t = 0; t < units.frames(); ++t)
        for (std::size_t s = 0; s < use; ++s) {
            const auto k = units.code(t, s);
            if (k >= codec.codebook_size())
                throw RangeError("code " + std::to_string(k) + " out of range at (t=" + std::to_string(t) + ", i=" +
                                 std::to_string(s) + ")");
            out.row(static_cast<Eigen::Index>(t)) += codec.stages[s].row(k);
        }
    return out;
}

void save_codec(const ToyCodec& codec, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    BinaryWriter w(out);
    w.bytes("C2VC", 4);
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(codec.frame_rate_hz));
    w.u32(static_cast<std::uint32_t>(codec.stages.size()));
    for (const auto& s : codec.stages) w.matrix_f64(s);
}

ToyCodec load_codec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path);
    BinaryReader r(in, path);
    r.expect_magic("C2VC");
    if (r.u32() != 1) throw FormatError(path + ": unsupported codec version");
    ToyCodec codec;
    codec.frame_rate_hz = static_cast<int>(r.u32());
    const auto n = r.u32();
    for (std::uint32_t s = 0; s < n; ++s) codec.stages.push_back(r.matrix_f64());
    for (const auto& s : codec.stages)
        if (s.rows() != codec.stages[0].rows() || s.cols() != codec.stages[0].cols())
            throw FormatError(path + ": codec stages differ in shape");
    return codec;
}

void write_labels(const std::string& path, const SyntheticCorpus& corpus) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out << "# phonemes " << corpus.num_phonemes << " speakers " << corpus.num_speakers << '\n';
    for (std::size_t u = 0; u < corpus.size(); ++u) {
        out << corpus.ids[u] << ' ' << corpus.speaker_labels[u];
        for (auto p : corpus.phoneme_labels[u]) out << ' ' << p;
        out << '\n';
    }
}

LabelSet read_labels(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw NotFoundError("cannot open " + path);
    LabelSet set;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        if (line[0] == '#') {
            std::string tag;
            is.ignore(1);
            while (is >> tag) {
                if (tag == "phonemes") is >> set.num_phonemes;
                else if (tag == "speakers") is >> set.num_speakers;
            }
            continue;
        }
        std::string id;
        UtteranceLabels lab;
        if (!(is >> id >> lab.speaker)) throw FormatError(path + ": bad label line");
        std::uint32_t p;
        while (is >> p) lab.phonemes.push_back(p);
        set.ids.push_back(id);
        set.labels.push_back(std::move(lab));
    }
    for (const auto& l : set.labels) {
        set.num_speakers = std::max<std::size_t>(set.num_speakers, l.speaker + 1);
        for (auto p : l.phonemes) set.num_phonemes = std::max<std::size_t>(set.num_phonemes, p + 1);
    }
    return set;
}

}  // namespace c2v
