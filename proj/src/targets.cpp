#include "c2v/targets.hpp"

#include "c2v/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace c2v {

TargetAssignment reconstruction_targets(const CodecUnitSequence& units) {
    TargetAssignment out;
    out.frames = units.frames();
    out.vocab_sizes = units.codebook_sizes();
    out.streams.assign(units.num_codebooks(), std::vector<std::uint32_t>(units.frames()));
    for (std::size_t t = 0; t < units.frames(); ++t)
        for (std::size_t i = 0; i < units.num_codebooks(); ++i) out.streams[i][t] = units.code(t, i);
    return out;
}

MatF layer_latents(const CodecUnitSequence& units, const EncoderParams<float>& params, const EncoderConfig& config,
                   std::size_t layer_index) {
    if (layer_index > config.n_layers)
        throw ConfigError("layer " + std::to_string(layer_index) + " exceeds the " + std::to_string(config.n_layers) +
                          "-layer encoder");
    const MatF z = embed_units(units, params);
    auto outputs = forward(z, params, config);
    return std::move(outputs.hidden[layer_index]);
}

// ---------------------------------------------------------------------------
// Target store

const TargetAssignment& TargetStore::at(const std::string& id) const {
    const auto it = labels.find(id);
    if (it == labels.end()) throw NotFoundError("no targets for utterance '" + id + "'");
    return it->second;
}

void write_target_store(const std::string& path, const TargetStore& store) {
    if (store.labels.empty()) throw ConfigError("target store is empty");
    std::vector<NamedSequence> seqs;
    seqs.reserve(store.labels.size());
    for (const auto& [id, ta] : store.labels) {
        ta.validate();
        const std::size_t n = ta.num_streams();
        std::vector<std::uint32_t> codes(ta.frames * n);
        for (std::size_t t = 0; t < ta.frames; ++t)
            for (std::size_t s = 0; s < n; ++s) codes[t * n + s] = ta.streams[s][t];
        seqs.push_back({id, CodecUnitSequence(ta.frames, ta.vocab_sizes, store.frame_rate_hz, std::move(codes))});
    }
    write_container(path, kTargetMagic, seqs, store.provenance);
}

TargetStore read_target_store(const std::string& path) {
    const auto ds = PackedDataset::open(path, LoadMode::in_memory, kTargetMagic);
    TargetStore store;
    store.provenance = ds.manifest().extra;
    store.frame_rate_hz = ds.manifest().frame_rate_hz;
    for (auto& seq : ds.unpack_all()) {
        TargetAssignment ta;
        ta.frames = seq.units.frames();
        ta.vocab_sizes = seq.units.codebook_sizes();
        ta.streams.assign(seq.units.num_codebooks(), std::vector<std::uint32_t>(ta.frames));
        for (std::size_t t = 0; t < ta.frames; ++t)
            for (std::size_t s = 0; s < ta.num_streams(); ++s) ta.streams[s][t] = seq.units.code(t, s);
        store.labels.emplace(seq.id, std::move(ta));
    }
    return store;
}

RelabelResult relabel_dataset(const std::string& checkpoint_path, const PackedDataset& dataset,
                              const RelabelOptions& opt, const std::string& out_path) {
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    if (opt.layer_index > ck.encoder.n_layers)
        throw ConfigError("layer " + std::to_string(opt.layer_index) + " exceeds the " +
                          std::to_string(ck.encoder.n_layers) + "-layer checkpoint");
    if (dataset.manifest().codebook_sizes != ck.encoder.codebook_sizes)
        throw ConfigError("dataset codebook sizes do not match the checkpoint");
    if (!(opt.sample_fraction > 0.0 && opt.sample_fraction <= 1.0))
        throw ConfigError("sample fraction must lie in (0, 1]");
    if (dataset.size() == 0) throw ConfigError("dataset is empty");

    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = derive_rng(opt.seed, 0x72656c);
    std::shuffle(order.begin(), order.end(), rng);
    const auto take = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(opt.sample_fraction * static_cast<double>(dataset.size()) - 1e-9)));
    order.resize(std::min(take, order.size()));
    std::sort(order.begin(), order.end());

    RelabelResult result;
    std::vector<MatF> sampled;
    for (auto u : order) {
        sampled.push_back(layer_latents(dataset.unpack(u), ck.params, ck.encoder, opt.layer_index));
        result.sampled_frames += static_cast<std::size_t>(sampled.back().rows());
    }
    result.sampled_utterances = order.size();
    if (result.sampled_frames < opt.k)
        throw ConfigError("sampled " + std::to_string(result.sampled_frames) + " frames, too few for k=" +
                          std::to_string(opt.k));
    MatD points(static_cast<Eigen::Index>(result.sampled_frames), static_cast<Eigen::Index>(ck.encoder.d_model));
    Eigen::Index row = 0;
    for (const auto& m : sampled) {
        points.middleRows(row, m.rows()) = m.cast<double>();
        row += m.rows();
    }
    result.model = kmeans_fit(points, opt.k, opt.max_iters, opt.seed);

    TargetStore store;
    store.frame_rate_hz = dataset.manifest().frame_rate_hz;
    for (std::size_t u = 0; u < dataset.size(); ++u) {
        const MatF lat = layer_latents(dataset.unpack(u), ck.params, ck.encoder, opt.layer_index);
        store.labels.emplace(dataset.manifest().utterance_ids[u], assign_clusters(result.model, lat.cast<double>()));
    }
    store.provenance = {
        {"strategy", "offline_kmeans"},
        {"checkpoint_hash", hex64(file_checksum(checkpoint_path))},
        {"checkpoint_step", std::to_string(ck.step)},
        {"layer", std::to_string(opt.layer_index)},
        {"k", std::to_string(opt.k)},
        {"seed", std::to_string(opt.seed)},
        {"sample_fraction", std::to_string(opt.sample_fraction)},
        {"sampled_utterances", std::to_string(result.sampled_utterances)},
        {"inertia", std::to_string(result.model.inertia)},
    };
    write_target_store(out_path, store);
    result.provenance = store.provenance;
    return result;
}

// ---------------------------------------------------------------------------
// EMA teacher

double ema_decay_at(std::uint64_t step, const EmaSchedule& s) {
    if (step >= s.freeze_step) return 1.0;
    if (step >= s.warmup_steps || s.warmup_steps == 0) return s.warmup_end;
    const double frac = static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    return s.warmup_start + (s.warmup_end - s.warmup_start) * frac;
}

template <typename Real>
void ema_update_teacher(EncoderParams<Real>& teacher, const EncoderParams<Real>& student, double decay) {
    if (!teacher.same_shapes(student)) throw ShapeError("teacher and student parameter shapes differ");
    if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("EMA decay must lie in [0, 1]");
    if (decay == 1.0) return;
    auto t = teacher.tensors();
    const auto s = student.tensors();
    const auto d = static_cast<Real>(decay);
    const auto one_minus = static_cast<Real>(1.0 - decay);
    for (std::size_t i = 0; i < t.size(); ++i) t[i]->array() = d * t[i]->array() + one_minus * s[i]->array();
}

OnlineClusterConfig OnlineClusterConfig::upper_half(std::size_t n_layers, std::size_t codebook_size) {
    OnlineClusterConfig c;
    c.codebook_size = codebook_size;
    const std::size_t first = n_layers / 2 + 1;
    for (std::size_t l = first; l <= n_layers; ++l) c.layers.push_back(l);
    if (c.layers.empty() && n_layers > 0) c.layers.push_back(n_layers);
    return c;
}

template <typename Real>
TeacherState<Real> TeacherState<Real>::from_student(const EncoderParams<Real>& student, OnlineClusterConfig cluster) {
    TeacherState t;
    t.params = student;
    t.cluster = std::move(cluster);
    if (t.cluster.layers.empty()) throw ConfigError("online clustering needs at least one layer");
    for (auto l : t.cluster.layers)
        if (l == 0 || l > student.layers.size())
            throw ConfigError("clustered layer " + std::to_string(l) + " outside 1.." + std::to_string(student.layers.size()));
    if (t.cluster.codebook_size == 0) throw ConfigError("codebook size must be positive");
    return t;
}

template <typename Real>
LayerOutputs<Real> teacher_forward(TeacherState<Real>& teacher, const EncoderConfig& config,
                                   const CodecUnitSequence& units) {
    ++teacher.forward_calls;
    return forward(embed_units(units, teacher.params), teacher.params, config);
}

namespace {

template <typename Real>
std::uint32_t nearest(const Mat<Real>& book, const Mat<Real>& x, Eigen::Index row) {
    Real best = std::numeric_limits<Real>::infinity();
    std::uint32_t arg = 0;
    for (Eigen::Index k = 0; k < book.rows(); ++k) {
        const Real d = (book.row(k) - x.row(row)).squaredNorm();
        if (d < best) {
            best = d;
            arg = static_cast<std::uint32_t>(k);
        }
    }
    return arg;
}

/// Teacher latents of every clustered layer for every sequence:
/// latents[layer][seq] is T x d.
template <typename Real>
std::vector<std::vector<Mat<Real>>> clustered_latents(TeacherState<Real>& teacher, const EncoderConfig& config,
                                                      std::span<const CodecUnitSequence* const> batch) {
    std::vector<std::vector<Mat<Real>>> lat(teacher.cluster.layers.size());
    for (const auto* units : batch) {
        auto out = teacher_forward(teacher, config, *units);
        for (std::size_t i = 0; i < teacher.cluster.layers.size(); ++i)
            lat[i].push_back(std::move(out.hidden[teacher.cluster.layers[i]]));
    }
    return lat;
}

template <typename Real>
std::vector<TargetAssignment> label(const TeacherState<Real>& teacher, const std::vector<std::vector<Mat<Real>>>& lat,
                                    std::span<const CodecUnitSequence* const> batch) {
    std::vector<TargetAssignment> out(batch.size());
    const auto v = static_cast<std::uint32_t>(teacher.cluster.codebook_size);
    for (std::size_t s = 0; s < batch.size(); ++s) {
        auto& ta = out[s];
        ta.frames = batch[s]->frames();
        ta.vocab_sizes.assign(teacher.cluster.layers.size(), v);
        ta.streams.resize(teacher.cluster.layers.size());
        for (std::size_t i = 0; i < teacher.cluster.layers.size(); ++i) {
            const auto& m = lat[i][s];
            ta.streams[i].resize(ta.frames);
            for (Eigen::Index t = 0; t < m.rows(); ++t)
                ta.streams[i][static_cast<std::size_t>(t)] = nearest(teacher.codebooks[i], m, t);
        }
    }
    return out;
}

}  // namespace

template <typename Real>
std::vector<TargetAssignment> online_targets(TeacherState<Real>& teacher, const EncoderConfig& config,
                                             std::span<const CodecUnitSequence* const> batch) {
    if (!teacher.initialized) throw ConfigError("online codebooks are not initialized");
    const auto lat = clustered_latents(teacher, config, batch);
    return label(teacher, lat, batch);
}

template <typename Real>
std::vector<TargetAssignment> online_targets_and_update(TeacherState<Real>& teacher, const EncoderConfig& config,
                                                        std::span<const CodecUnitSequence* const> batch, Rng& rng) {
    if (batch.empty()) throw ConfigError("online clustering needs a non-empty batch");
    const auto lat = clustered_latents(teacher, config, batch);
    const std::size_t V = teacher.cluster.codebook_size;
    const std::size_t n_layers = teacher.cluster.layers.size();

    std::size_t total = 0;
    for (const auto* u : batch) total += u->frames();
    // Flat (sequence, frame) index of every batch frame.
    auto locate = [&](std::size_t flat) {
        std::size_t s = 0;
        while (flat >= batch[s]->frames()) flat -= batch[s++]->frames();
        return std::pair{s, static_cast<Eigen::Index>(flat)};
    };

    if (!teacher.initialized) {
        std::vector<std::size_t> idx(total);
        std::iota(idx.begin(), idx.end(), 0);
        teacher.codebooks.clear();
        teacher.idle.assign(n_layers, std::vector<std::uint64_t>(V, 0));
        for (std::size_t i = 0; i < n_layers; ++i) {
            std::shuffle(idx.begin(), idx.end(), rng);
            Mat<Real> book(static_cast<Eigen::Index>(V), static_cast<Eigen::Index>(config.d_model));
            std::uniform_int_distribution<std::size_t> any(0, total - 1);
            for (std::size_t k = 0; k < V; ++k) {
                // Without replacement while the batch has enough frames.
                const auto [s, t] = locate(k < total ? idx[k] : any(rng));
                book.row(static_cast<Eigen::Index>(k)) = lat[i][s].row(t);
            }
            teacher.codebooks.push_back(std::move(book));
        }
        teacher.initialized = true;
    }

    auto targets = label(teacher, lat, batch);
    if (teacher.frozen || teacher.cluster.codebook_decay >= 1.0) return targets;

    const auto decay = static_cast<Real>(teacher.cluster.codebook_decay);
    for (std::size_t i = 0; i < n_layers; ++i) {
        Mat<Real> sums = Mat<Real>::Zero(static_cast<Eigen::Index>(V), static_cast<Eigen::Index>(config.d_model));
        std::vector<std::size_t> counts(V, 0);
        for (std::size_t s = 0; s < batch.size(); ++s)
            for (std::size_t t = 0; t < batch[s]->frames(); ++t) {
                const auto k = targets[s].streams[i][t];
                sums.row(k) += lat[i][s].row(static_cast<Eigen::Index>(t));
                ++counts[k];
            }
        std::uniform_int_distribution<std::size_t> any(0, total - 1);
        for (std::size_t k = 0; k < V; ++k) {
            const auto row = static_cast<Eigen::Index>(k);
            if (counts[k] > 0) {
                const Mat<Real> mean = sums.row(row) / static_cast<Real>(counts[k]);
                teacher.codebooks[i].row(row) = decay * teacher.codebooks[i].row(row) + (Real(1) - decay) * mean;
                teacher.idle[i][k] = 0;
            } else if (++teacher.idle[i][k] >= teacher.cluster.dead_after) {
                const auto [s, t] = locate(any(rng));
                teacher.codebooks[i].row(row) = lat[i][s].row(t);
                teacher.idle[i][k] = 0;
            }
        }
    }
    return targets;
}

#define C2V_INSTANTIATE(Real)                                                                                      \
    template void ema_update_teacher<Real>(EncoderParams<Real>&, const EncoderParams<Real>&, double);             \
    template struct TeacherState<Real>;                                                                           \
    template LayerOutputs<Real> teacher_forward<Real>(TeacherState<Real>&, const EncoderConfig&,                  \
                                                      const CodecUnitSequence&);                                  \
    template std::vector<TargetAssignment> online_targets<Real>(TeacherState<Real>&, const EncoderConfig&,        \
                                                                std::span<const CodecUnitSequence* const>);       \
    template std::vector<TargetAssignment> online_targets_and_update<Real>(                                       \
        TeacherState<Real>&, const EncoderConfig&, std::span<const CodecUnitSequence* const>, Rng&);

C2V_INSTANTIATE(float)
C2V_INSTANTIATE(double)
#undef C2V_INSTANTIATE

}  // namespace c2v
