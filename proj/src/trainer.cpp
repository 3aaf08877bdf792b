#include "c2v/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace c2v {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Schedules

double lr_hubert(std::uint64_t step, double peak, std::uint64_t warmup, std::uint64_t total) {
    if (step >= total) return 0.0;
    if (step <= warmup) return warmup == 0 ? peak : peak * (static_cast<double>(step) / static_cast<double>(warmup));
    return peak * (static_cast<double>(total - step) / static_cast<double>(total - warmup));
}

double lr_dino(std::uint64_t step, double peak, std::uint64_t warmup, std::uint64_t constant, std::uint64_t decay) {
    if (step < warmup) return peak * (static_cast<double>(step) / static_cast<double>(warmup));
    const std::uint64_t decay_start = warmup + constant;
    if (step <= decay_start) return peak;
    const std::uint64_t end = decay_start + decay;
    if (step >= end) return 0.0;
    return peak * (static_cast<double>(end - step) / static_cast<double>(decay));
}

// ---------------------------------------------------------------------------
// Config

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::reconstruction: return "reconstruction";
        case Strategy::offline_kmeans: return "offline_kmeans";
        case Strategy::online: return "online";
    }
    return "?";
}

Strategy parse_strategy(const std::string& s) {
    if (s == "reconstruction") return Strategy::reconstruction;
    if (s == "offline_kmeans" || s == "kmeans" || s == "iterative") return Strategy::offline_kmeans;
    if (s == "online") return Strategy::online;
    throw ConfigError("unknown strategy '" + s + "' (expected reconstruction, offline_kmeans or online)");
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string join(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::uint64_t frac_of(std::uint64_t total, double f) {
    return static_cast<std::uint64_t>(std::llround(static_cast<double>(total) * f));
}

}  // namespace

TrainConfig TrainConfig::desk(Strategy strategy, std::uint64_t total_steps) {
    TrainConfig c;
    c.strategy = strategy;
    c.schedule = strategy == Strategy::online ? Schedule::dino : Schedule::hubert;
    c.total_steps = total_steps;
    if (c.schedule == Schedule::hubert) {
        c.warmup_steps = frac_of(total_steps, 32.0 / 400.0);
    } else {
        c.warmup_steps = frac_of(total_steps, 12.0 / 400.0);
        c.constant_steps = frac_of(total_steps, 188.0 / 400.0);
    }
    c.ema.warmup_steps = frac_of(total_steps, 30.0 / 400.0);
    c.ema.freeze_step = frac_of(total_steps, 200.0 / 400.0);
    c.encoder.d_model = 64;
    c.encoder.n_layers = 2;
    c.encoder.n_heads = 4;
    c.encoder.ff_dim = 128;
    c.cluster = OnlineClusterConfig::upper_half(c.encoder.n_layers, 64);
    return c;
}

TrainConfig TrainConfig::full(Strategy strategy) {
    TrainConfig c;
    c.strategy = strategy;
    c.total_steps = 400000;
    c.peak_lr = 5e-4;
    c.encoder = EncoderConfig::base({});
    c.encoder.max_len = 2048;
    c.cluster = OnlineClusterConfig::upper_half(12, 256);
    c.cluster.layers = {5, 6, 7, 8, 9, 10, 11, 12};
    c.ema = EmaSchedule{};
    if (strategy == Strategy::online) {
        c.schedule = Schedule::dino;
        c.warmup_steps = 12000;
        c.constant_steps = 188000;
        c.frame_budget = 63 * 60 * 50;
    } else {
        c.schedule = Schedule::hubert;
        c.warmup_steps = 32000;
        c.frame_budget = 47 * 60 * 50;
    }
    return c;
}

const std::set<std::string>& TrainConfig::known_keys() {
    static const std::set<std::string> keys = {
        "preset",         "strategy",        "schedule",     "total_steps",      "warmup_steps",  "constant_steps",
        "peak_lr",        "frame_budget",    "max_crop",     "seed",             "heldout_fraction",
        "mask_span",      "mask_start_prob", "d_model",      "n_layers",         "n_heads",       "ff_dim",
        "max_len",        "temperature",     "quantizer_dropout", "model_seed",  "adam_beta1",    "adam_beta2",
        "adam_eps",       "weight_decay",    "clip_norm",    "cluster_layers",   "codebook_size", "codebook_decay",
        "dead_after",     "ema_start",       "ema_end",      "ema_warmup",       "ema_freeze",    "dataset",
        "targets",        "init_codec",      "checkpoint_every", "log_every",
    };
    return keys;
}

TrainConfig TrainConfig::from_config(const Config& cfg) {
    cfg.require_known(known_keys());
    const auto strategy = parse_strategy(cfg.get("strategy", "reconstruction"));
    const auto preset = cfg.get("preset", "desk");
    TrainConfig c;
    if (preset == "desk") c = desk(strategy, cfg.get_u64("total_steps", 2000));
    else if (preset == "full") c = full(strategy);
    else throw ConfigError("unknown preset '" + preset + "' (expected desk or full)");

    if (cfg.has("schedule")) {
        const auto s = cfg.get("schedule", "");
        if (s == "hubert") c.schedule = Schedule::hubert;
        else if (s == "dino") c.schedule = Schedule::dino;
        else throw ConfigError("unknown schedule '" + s + "'");
    }
    c.total_steps = cfg.get_u64("total_steps", c.total_steps);
    c.warmup_steps = cfg.get_u64("warmup_steps", c.warmup_steps);
    c.constant_steps = cfg.get_u64("constant_steps", c.constant_steps);
    c.peak_lr = cfg.get_double("peak_lr", c.peak_lr);
    c.frame_budget = cfg.get_u64("frame_budget", c.frame_budget);
    c.max_crop = cfg.get_u64("max_crop", c.max_crop);
    c.seed = cfg.get_u64("seed", c.seed);
    c.heldout_fraction = cfg.get_double("heldout_fraction", c.heldout_fraction);
    c.mask_span = cfg.get_u64("mask_span", c.mask_span);
    c.mask_start_prob = cfg.get_double("mask_start_prob", c.mask_start_prob);

    auto& e = c.encoder;
    e.d_model = cfg.get_u64("d_model", e.d_model);
    const auto old_layers = e.n_layers;
    e.n_layers = cfg.get_u64("n_layers", e.n_layers);
    e.n_heads = cfg.get_u64("n_heads", e.n_heads);
    e.ff_dim = cfg.get_u64("ff_dim", e.ff_dim);
    e.max_len = cfg.get_u64("max_len", e.max_len);
    e.temperature = cfg.get_double("temperature", e.temperature);
    e.quantizer_dropout = cfg.get_double("quantizer_dropout", e.quantizer_dropout);
    e.seed = cfg.get_u64("model_seed", c.seed);

    c.adam.beta1 = cfg.get_double("adam_beta1", c.adam.beta1);
    c.adam.beta2 = cfg.get_double("adam_beta2", c.adam.beta2);
    c.adam.eps = cfg.get_double("adam_eps", c.adam.eps);
    c.adam.weight_decay = cfg.get_double("weight_decay", c.adam.weight_decay);
    c.clip_norm = cfg.get_double("clip_norm", c.clip_norm);

    const auto cb_size = cfg.get_u64("codebook_size", c.cluster.codebook_size);
    const auto layers = cfg.get("cluster_layers", "upper");
    if (layers == "upper") {
        if (e.n_layers != old_layers || cfg.has("cluster_layers"))
            c.cluster.layers = OnlineClusterConfig::upper_half(e.n_layers, cb_size).layers;
    } else {
        c.cluster.layers.clear();
        std::istringstream is(layers);
        std::string part;
        while (std::getline(is, part, ',')) c.cluster.layers.push_back(std::stoul(part));
    }
    c.cluster.codebook_size = cb_size;
    c.cluster.codebook_decay = cfg.get_double("codebook_decay", c.cluster.codebook_decay);
    c.cluster.dead_after = cfg.get_u64("dead_after", c.cluster.dead_after);
    c.ema.warmup_start = cfg.get_double("ema_start", c.ema.warmup_start);
    c.ema.warmup_end = cfg.get_double("ema_end", c.ema.warmup_end);
    c.ema.warmup_steps = cfg.get_u64("ema_warmup", c.ema.warmup_steps);
    c.ema.freeze_step = cfg.get_u64("ema_freeze", c.ema.freeze_step);

    c.dataset = cfg.get("dataset", c.dataset);
    c.targets = cfg.get("targets", c.targets);
    c.init_codec = cfg.get("init_codec", c.init_codec);
    c.checkpoint_every = cfg.get_u64("checkpoint_every", c.checkpoint_every);
    c.log_every = cfg.get_u64("log_every", c.log_every);
    return c;
}

std::map<std::string, std::string> TrainConfig::to_map() const {
    std::map<std::string, std::string> kv;
    kv["strategy"] = to_string(strategy);
    kv["schedule"] = schedule == Schedule::hubert ? "hubert" : "dino";
    kv["total_steps"] = std::to_string(total_steps);
    kv["warmup_steps"] = std::to_string(warmup_steps);
    kv["constant_steps"] = std::to_string(constant_steps);
    kv["peak_lr"] = fmt_double(peak_lr);
    kv["frame_budget"] = std::to_string(frame_budget);
    kv["max_crop"] = std::to_string(max_crop);
    kv["seed"] = std::to_string(seed);
    kv["heldout_fraction"] = fmt_double(heldout_fraction);
    kv["mask_span"] = std::to_string(mask_span);
    kv["mask_start_prob"] = fmt_double(mask_start_prob);
    for (const auto& [k, v] : encoder.to_map())
        if (k != "codebook_sizes") kv[k] = v;
    kv["adam_beta1"] = fmt_double(adam.beta1);
    kv["adam_beta2"] = fmt_double(adam.beta2);
    kv["adam_eps"] = fmt_double(adam.eps);
    kv["weight_decay"] = fmt_double(adam.weight_decay);
    kv["clip_norm"] = fmt_double(clip_norm);
    kv["dataset"] = dataset;
    kv["targets"] = targets;
    kv["init_codec"] = init_codec;
    if (strategy == Strategy::online) {
        kv["cluster_layers"] = join(cluster.layers);
        kv["codebook_size"] = std::to_string(cluster.codebook_size);
        kv["codebook_decay"] = fmt_double(cluster.codebook_decay);
        kv["dead_after"] = std::to_string(cluster.dead_after);
        kv["ema_start"] = fmt_double(ema.warmup_start);
        kv["ema_end"] = fmt_double(ema.warmup_end);
        kv["ema_warmup"] = std::to_string(ema.warmup_steps);
        kv["ema_freeze"] = std::to_string(ema.freeze_step);
    }
    return kv;
}

double TrainConfig::lr_at(std::uint64_t step) const {
    if (schedule == Schedule::hubert) return lr_hubert(step, peak_lr, warmup_steps, total_steps);
    const std::uint64_t decay = total_steps > warmup_steps + constant_steps ? total_steps - warmup_steps - constant_steps : 0;
    return lr_dino(step, peak_lr, warmup_steps, constant_steps, decay);
}

void TrainConfig::validate() const {
    if (warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds total_steps");
    if (schedule == Schedule::dino && warmup_steps + constant_steps > total_steps)
        throw ConfigError("warmup_steps + constant_steps exceeds total_steps");
    if (frame_budget == 0 || max_crop == 0) throw ConfigError("frame_budget and max_crop must be positive");
    if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw ConfigError("heldout_fraction must lie in [0, 1)");
    if (mask_span == 0) throw ConfigError("mask_span must be >= 1");
    if (!(mask_start_prob >= 0.0 && mask_start_prob <= 1.0)) throw ConfigError("mask_start_prob must lie in [0, 1]");
    if (!(peak_lr >= 0.0)) throw ConfigError("peak_lr must be non-negative");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be non-negative");
    if (strategy == Strategy::offline_kmeans && targets.empty())
        throw ConfigError("offline_kmeans needs a target store (targets = <file>)");
    if (strategy == Strategy::online) {
        if (cluster.layers.empty()) throw ConfigError("online strategy needs clustered layers");
        for (auto l : cluster.layers)
            if (l == 0 || l > encoder.n_layers)
                throw ConfigError("clustered layer " + std::to_string(l) + " outside 1.." + std::to_string(encoder.n_layers));
        if (!(cluster.codebook_decay >= 0.0 && cluster.codebook_decay <= 1.0))
            throw ConfigError("codebook_decay must lie in [0, 1]");
        if (ema.warmup_steps > ema.freeze_step) throw ConfigError("ema_warmup exceeds ema_freeze");
    }
}

// ---------------------------------------------------------------------------
// Batching

std::vector<Batch> make_batches(std::span<const std::uint64_t> frame_counts, std::span<const std::size_t> pool,
                                std::uint64_t frame_budget, std::uint64_t max_crop, std::uint64_t seed,
                                std::uint64_t epoch) {
    if (pool.empty()) throw ConfigError("cannot batch an empty dataset");
    if (frame_budget == 0) throw ConfigError("frame budget must be positive");
    std::vector<std::size_t> order(pool.begin(), pool.end());
    Rng rng = derive_rng(seed, 0x73687566, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    const std::uint64_t limit = std::min(max_crop, frame_budget);

    std::vector<Batch> out;
    Batch cur;
    std::uint64_t used = 0;
    for (auto u : order) {
        const std::uint64_t total = frame_counts[u];
        const std::uint64_t len = std::min(total, limit);
        std::uint64_t begin = 0;
        if (total > len) begin = std::uniform_int_distribution<std::uint64_t>(0, total - len)(rng);
        if (!cur.empty() && used + len > frame_budget) {
            out.push_back(std::move(cur));
            cur.clear();
            used = 0;
        }
        cur.push_back({u, static_cast<std::size_t>(begin), static_cast<std::size_t>(begin + len)});
        used += len;
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

BatchStream::BatchStream(std::vector<std::uint64_t> frame_counts, std::vector<std::size_t> pool,
                         std::uint64_t frame_budget, std::uint64_t max_crop, std::uint64_t seed)
    : counts_(std::move(frame_counts)), pool_(std::move(pool)), budget_(frame_budget), crop_(max_crop), seed_(seed) {
    batches_ = make_batches(counts_, pool_, budget_, crop_, seed_, 0);
}

const Batch& BatchStream::at(std::uint64_t step) {
    if (step < epoch_start_) {
        epoch_ = 0;
        epoch_start_ = 0;
        batches_ = make_batches(counts_, pool_, budget_, crop_, seed_, 0);
    }
    while (step >= epoch_start_ + batches_.size()) {
        epoch_start_ += batches_.size();
        ++epoch_;
        batches_ = make_batches(counts_, pool_, budget_, crop_, seed_, epoch_);
    }
    return batches_[step - epoch_start_];
}

Split split_utterances(std::size_t count, double heldout_fraction, std::uint64_t seed) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = derive_rng(seed, 0x73706c);
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_held = static_cast<std::size_t>(std::floor(heldout_fraction * static_cast<double>(count)));
    if (heldout_fraction > 0.0 && n_held == 0 && count > 1) n_held = 1;
    if (n_held >= count) n_held = count - 1;
    Split s;
    s.heldout.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_held));
    s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_held), idx.end());
    std::sort(s.heldout.begin(), s.heldout.end());
    std::sort(s.train.begin(), s.train.end());
    return s;
}

// ---------------------------------------------------------------------------
// Training

std::string TrainMetrics::to_json() const {
    nlohmann::json j;
    j["schema"] = 1;
    j["step"] = step;
    j["loss"] = loss;
    j["accuracy"] = accuracy;
    j["lr"] = lr;
    j["ema_decay"] = ema_decay;
    j["frames"] = frames;
    j["masked_frames"] = masked_frames;
    j["grad_norm"] = grad_norm;
    j["frames_per_sec"] = frames_per_second;
    j["step_seconds"] = step_seconds;
    return j.dump();
}

TrainState init_train_state(const TrainConfig& config, std::vector<std::uint32_t> codebook_sizes,
                            std::vector<std::uint32_t> head_vocab, const ToyCodec* codec) {
    config.validate();
    TrainState s;
    s.config = config;
    s.config.encoder.codebook_sizes = std::move(codebook_sizes);
    const auto& enc = s.config.encoder;
    s.params = init_params<float>(enc);
    if (codec) {
        std::optional<std::uint64_t> map_seed;
        if (codec->dim() != enc.d_model) map_seed = enc.seed;
        init_embeddings_from_codec(s.params, enc, *codec, map_seed);
    }
    reset_heads(s.params, enc, head_vocab, enc.seed + 1);
    s.adam = adam_init(s.params);
    if (config.strategy == Strategy::online) s.teacher = TeacherState<float>::from_student(s.params, config.cluster);
    return s;
}

TrainMetrics train_step(TrainState& state, const BatchData& batch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& cfg = state.config;
    const auto& enc = cfg.encoder;
    const std::uint64_t step = state.step;
    if (batch.units.empty()) throw ConfigError("empty batch");

    TrainMetrics m;
    m.step = step + 1;
    m.lr = cfg.lr_at(step);

    std::vector<TargetAssignment> online;
    const std::vector<TargetAssignment>* targets = &batch.targets;
    if (cfg.strategy == Strategy::online) {
        if (!state.teacher) throw ConfigError("online strategy without a teacher");
        m.ema_decay = ema_decay_at(step, cfg.ema);
        state.teacher->frozen = m.ema_decay >= 1.0;
        std::vector<const CodecUnitSequence*> ptrs;
        for (const auto& u : batch.units) ptrs.push_back(&u);
        Rng cb_rng = derive_rng(cfg.seed, 0x636f6465, step);
        online = online_targets_and_update(*state.teacher, enc, ptrs, cb_rng);
        targets = &online;
    }
    if (targets->size() != batch.units.size()) throw ShapeError("batch targets do not match batch units");

    Rng mask_rng = derive_rng(cfg.seed, 0x6d61736b, step);
    Rng drop_rng = derive_rng(cfg.seed, 0x64726f70, step);
    std::vector<SequenceExample> examples(batch.units.size());
    for (std::size_t i = 0; i < batch.units.size(); ++i) {
        auto& ex = examples[i];
        ex.units = &batch.units[i];
        ex.targets = &(*targets)[i];
        ex.keep_prefix = sample_quantizer_dropout(enc.quantizer_dropout, enc.num_codebooks(), drop_rng);
        ex.mask = sample_mask(batch.units[i].frames(), cfg.mask_span, cfg.mask_start_prob, mask_rng);
        m.frames += batch.units[i].frames();
    }

    EncoderParams<float> grads;
    LossStats stats;
    try {
        stats = compute_loss_and_grads<float>(examples, state.params, enc, &grads);
    } catch (const NumericError& e) {
        throw TrainingDiverged(std::string(e.what()) + " at step " + std::to_string(m.step));
    }
    if (!std::isfinite(stats.loss)) throw TrainingDiverged("non-finite loss at step " + std::to_string(m.step));
    m.loss = stats.loss;
    m.masked_frames = stats.masked_frames;
    for (std::size_t h = 0; h < stats.correct.size(); ++h) m.accuracy.push_back(stats.accuracy(h));

    if (stats.masked_frames > 0) {
        m.grad_norm = global_norm(grads);
        if (!std::isfinite(m.grad_norm)) throw TrainingDiverged("non-finite gradient at step " + std::to_string(m.step));
        if (cfg.clip_norm > 0.0 && m.grad_norm > cfg.clip_norm) {
            const auto scale = static_cast<float>(cfg.clip_norm / m.grad_norm);
            for (auto* t : grads.tensors()) *t *= scale;
        }
        adam_update(state.params, grads, state.adam, m.lr, cfg.adam);
    } else {
        ++state.empty_batches;
    }

    if (cfg.strategy == Strategy::online) ema_update_teacher(state.teacher->params, state.params, m.ema_decay);

    ++state.step;
    m.step_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.frames_per_second = m.step_seconds > 0 ? static_cast<double>(m.frames) / m.step_seconds : 0.0;
    return m;
}

Checkpoint make_checkpoint(const TrainState& state) {
    Checkpoint c;
    c.encoder = state.config.encoder;
    c.train_config = state.config.to_map();
    c.train_config["config_hash"] = hex64(config_hash(state.config.to_map()));
    c.train_config["empty_batches"] = std::to_string(state.empty_batches);
    c.step = state.step;
    c.params = state.params;
    c.optimizer = state.adam;
    c.teacher = state.teacher;
    return c;
}

TrainState state_from_checkpoint(const Checkpoint& ck, const TrainConfig& config) {
    TrainState s;
    s.config = config;
    s.config.encoder.codebook_sizes = ck.encoder.codebook_sizes;
    s.step = ck.step;
    s.params = ck.params;
    s.adam = ck.optimizer ? *ck.optimizer : adam_init(ck.params);
    s.teacher = ck.teacher;
    if (const auto it = ck.train_config.find("empty_batches"); it != ck.train_config.end())
        s.empty_batches = std::stoull(it->second);
    if (config.strategy == Strategy::online && !s.teacher) throw ConfigError("checkpoint has no teacher state");
    return s;
}

namespace {

BatchData gather(const std::vector<NamedSequence>& corpus, const Batch& batch, Strategy strategy,
                 const TargetStore* store) {
    BatchData data;
    for (const auto& item : batch) {
        const auto& seq = corpus[item.utterance];
        const bool whole = item.begin == 0 && item.end == seq.units.frames();
        data.units.push_back(whole ? seq.units : seq.units.slice(item.begin, item.end));
        if (strategy == Strategy::reconstruction) {
            data.targets.push_back(reconstruction_targets(data.units.back()));
        } else if (strategy == Strategy::offline_kmeans) {
            const auto& ta = store->at(seq.id);
            if (ta.frames != seq.units.frames())
                throw ShapeError("targets for '" + seq.id + "' cover " + std::to_string(ta.frames) + " frames, units " +
                                 std::to_string(seq.units.frames()));
            data.targets.push_back(whole ? ta : ta.slice(item.begin, item.end));
        }
    }
    return data;
}

std::vector<std::uint32_t> head_vocab_for(const TrainConfig& cfg, const DatasetManifest& manifest,
                                          const TargetStore* store) {
    switch (cfg.strategy) {
        case Strategy::reconstruction: return manifest.codebook_sizes;
        case Strategy::offline_kmeans: {
            if (store->labels.empty()) throw ConfigError("target store is empty");
            return store->labels.begin()->second.vocab_sizes;
        }
        case Strategy::online:
            return std::vector<std::uint32_t>(cfg.cluster.layers.size(),
                                              static_cast<std::uint32_t>(cfg.cluster.codebook_size));
    }
    return {};
}

}  // namespace

HeldoutResult evaluate_heldout(TrainState& state, const PackedDataset& dataset, std::span<const std::size_t> utterances,
                               const TargetStore* store, std::uint64_t eval_seed) {
    const auto& cfg = state.config;
    HeldoutResult r;
    if (utterances.empty()) return r;
    std::vector<NamedSequence> corpus;
    Batch batch;
    for (auto u : utterances) {
        corpus.push_back({dataset.manifest().utterance_ids[u], dataset.unpack(u)});
        const auto len = std::min<std::size_t>(corpus.back().units.frames(), cfg.max_crop);
        batch.push_back({corpus.size() - 1, 0, len});
    }
    BatchData data = gather(corpus, batch, cfg.strategy, store);
    if (cfg.strategy == Strategy::online) {
        std::vector<const CodecUnitSequence*> ptrs;
        for (const auto& u : data.units) ptrs.push_back(&u);
        data.targets = online_targets(*state.teacher, cfg.encoder, ptrs);
    }
    std::vector<SequenceExample> examples(data.units.size());
    for (std::size_t i = 0; i < data.units.size(); ++i) {
        Rng rng = derive_rng(eval_seed, 0x6576616c, utterances[i]);
        examples[i] = {&data.units[i], &data.targets[i], sample_mask(data.units[i].frames(), cfg.mask_span, cfg.mask_start_prob, rng), 0};
    }
    const auto stats = compute_loss_and_grads<float>(examples, state.params, cfg.encoder, nullptr);
    r.accuracy = stats.mean_accuracy();
    r.masked_frames = stats.masked_frames;
    for (const auto& h : state.params.heads) r.chance += 1.0 / static_cast<double>(h.rows());
    r.chance /= static_cast<double>(state.params.heads.size());
    return r;
}

PretrainResult pretrain(const TrainConfig& config_in, const PretrainOptions& opt) {
    TrainConfig config = config_in;
    config.validate();
    if (opt.out_dir.empty()) throw ConfigError("pretrain needs an output directory");
    fs::create_directories(opt.out_dir);

    const auto dataset = PackedDataset::open(config.dataset, LoadMode::in_memory);
    const auto corpus = dataset.unpack_all();
    config.encoder.codebook_sizes = dataset.manifest().codebook_sizes;

    std::optional<TargetStore> store;
    if (config.strategy == Strategy::offline_kmeans) {
        store = read_target_store(config.targets);
        for (const auto& id : dataset.manifest().utterance_ids)
            if (!store->labels.contains(id)) throw NotFoundError("target store has no labels for utterance '" + id + "'");
    }
    const TargetStore* store_ptr = store ? &*store : nullptr;

    PretrainResult result;
    result.config_hash = config_hash(config.to_map());
    TrainState state;
    if (!opt.resume_from.empty()) {
        const auto ck = load_checkpoint(opt.resume_from);
        const auto it = ck.train_config.find("config_hash");
        if (it == ck.train_config.end() || it->second != hex64(result.config_hash))
            throw ConfigError("resume config mismatch: checkpoint " + opt.resume_from + " was trained with config hash " +
                              (it == ck.train_config.end() ? std::string("<none>") : it->second) + ", current is " +
                              hex64(result.config_hash));
        state = state_from_checkpoint(ck, config);
    } else {
        std::optional<ToyCodec> codec;
        if (!config.init_codec.empty()) codec = load_codec(config.init_codec);
        state = init_train_state(config, config.encoder.codebook_sizes,
                                 head_vocab_for(config, dataset.manifest(), store_ptr), codec ? &*codec : nullptr);
    }

    const auto split = split_utterances(dataset.size(), config.heldout_fraction, config.seed);
    BatchStream stream(dataset.manifest().frame_counts, split.train, config.frame_budget, config.max_crop, config.seed);
    const std::uint64_t end = opt.stop_at == 0 ? config.total_steps : std::min(opt.stop_at, config.total_steps);

    std::ofstream log(fs::path(opt.out_dir) / "metrics.jsonl", opt.resume_from.empty() ? std::ios::trunc : std::ios::app);
    auto save = [&](const std::string& name) {
        const auto path = (fs::path(opt.out_dir) / name).string();
        save_checkpoint(make_checkpoint(state), path);
        return path;
    };

    while (state.step < end) {
        const auto data = gather(corpus, stream.at(state.step), config.strategy, store_ptr);
        TrainMetrics m;
        try {
            m = train_step(state, data);
        } catch (const TrainingDiverged&) {
            save("diverged.c2vk");
            throw;
        }
        const bool last = state.step == end;
        if ((config.log_every && state.step % config.log_every == 0) || last || state.step == 1) {
            log << m.to_json() << '\n';
            log.flush();
            result.metrics.push_back(m);
            if (opt.on_log) opt.on_log(m);
        }
        if (config.checkpoint_every && state.step % config.checkpoint_every == 0 && !last)
            save("step_" + std::to_string(state.step) + ".c2vk");
    }
    save("step_" + std::to_string(state.step) + ".c2vk");
    result.final_checkpoint = save("last.c2vk");
    result.heldout = evaluate_heldout(state, dataset, split.heldout, store_ptr, config.seed + 0x9e37);
    return result;
}

// ---------------------------------------------------------------------------
// Loader throughput

std::string BenchReport::to_text() const {
    std::ostringstream os;
    os << "utterances                 " << utterances << '\n';
    os << "frames                     " << frames << '\n';
    os << "in_ram_frames_per_sec      " << in_ram_frames_per_second << '\n';
    os << "streaming_frames_per_sec   " << streaming_frames_per_second << '\n';
    os << "ratio_in_ram_over_stream   " << ratio << '\n';
    os << "checksums_match            " << (in_ram_checksum == streaming_checksum ? "yes" : "NO") << '\n';
    os << "reference (not measured here): 2.3x end-to-end pre-training speedup, 830 -> 356 GPU hours\n";
    return os.str();
}

namespace {

std::uint64_t checksum_units(const CodecUnitSequence& s, std::uint64_t h) {
    const auto codes = s.codes();
    return fnv1a(std::string_view(reinterpret_cast<const char*>(codes.data()), codes.size_bytes()), h);
}

}  // namespace

BenchReport bench_throughput(const std::string& path, int repeats) {
    BenchReport r;
    using clock = std::chrono::steady_clock;
    double best_ram = 1e300, best_stream = 1e300;
    for (int rep = 0; rep < std::max(1, repeats); ++rep) {
        auto t0 = clock::now();
        {
            const auto ds = PackedDataset::open(path, LoadMode::in_memory);
            std::uint64_t h = 0xcbf29ce484222325ULL;
            std::uint64_t frames = 0;
            for (std::size_t u = 0; u < ds.size(); ++u) {
                const auto s = ds.unpack(u);
                frames += s.frames();
                h = checksum_units(s, h);
            }
            r.in_ram_checksum = h;
            r.frames = frames;
            r.utterances = ds.size();
        }
        best_ram = std::min(best_ram, std::chrono::duration<double>(clock::now() - t0).count());

        t0 = clock::now();
        {
            const auto ds = PackedDataset::open(path, LoadMode::seek);
            std::uint64_t h = 0xcbf29ce484222325ULL;
            for (std::size_t u = 0; u < ds.size(); ++u) h = checksum_units(ds.unpack(u), h);
            r.streaming_checksum = h;
        }
        best_stream = std::min(best_stream, std::chrono::duration<double>(clock::now() - t0).count());
    }
    r.in_ram_frames_per_second = static_cast<double>(r.frames) / std::max(best_ram, 1e-9);
    r.streaming_frames_per_second = static_cast<double>(r.frames) / std::max(best_stream, 1e-9);
    r.ratio = r.in_ram_frames_per_second / r.streaming_frames_per_second;
    return r;
}

}  // namespace c2v
