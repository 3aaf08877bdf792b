// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero on
// any failure. Criteria 7-9 pretrain real desk-scale models and take minutes.

#include "c2v/checkpoint.hpp"
#include "c2v/cli.hpp"
#include "c2v/config.hpp"
#include "c2v/encoder.hpp"
#include "c2v/kmeans.hpp"
#include "c2v/masking.hpp"
#include "c2v/probe.hpp"
#include "c2v/targets.hpp"
#include "c2v/trainer.hpp"
#include "test_util.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

using namespace c2v;
using c2v::testing::random_sequence;
using c2v::testing::TempDir;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) pass = false;
        if (!detail.empty()) detail += "; ";
        detail += (ok ? "" : "FAILED ") + what;
    }
};

void progress(const std::string& msg) { std::cout << "  .. " << msg << std::endl; }

// ---------------------------------------------------------------------------

Outcome storage_accounting() {
    const auto t0 = Clock::now();
    Outcome o;
    TempDir dir("acc_storage");
    const std::vector<std::uint32_t> sizes(12, 1024);

    std::vector<NamedSequence> big;
    for (std::size_t i = 0; i < 20; ++i) big.push_back({"u" + std::to_string(i), random_sequence(500 + 37 * i, sizes, 50, i)});
    const auto m = pack_dataset(big, dir.file("big.c2v"));
    const auto r = storage_report(m);
    o.require(std::abs(r.ratio - 42.7) <= 0.1, fmt("payload ratio %.4f", r.ratio));

    // corpora of at least 60 s, from one long utterance to many short ones
    double worst = std::numeric_limits<double>::infinity();
    for (std::size_t n : {1u, 10u, 60u, 300u}) {
        std::vector<NamedSequence> seqs;
        const std::size_t frames = 3000 / n;
        for (std::size_t i = 0; i < n; ++i) seqs.push_back({"clip_" + std::to_string(i), random_sequence(frames, sizes, 50, 100 + i)});
        const auto path = dir.file("c" + std::to_string(n) + ".c2v");
        const auto rr = storage_report(pack_dataset(seqs, path));
        worst = std::min(worst, rr.ratio_with_header);
        const auto back = PackedDataset::open(path).unpack_all();
        for (std::size_t i = 0; i < n; ++i)
            if (!(back[i].units == seqs[i].units)) o.require(false, "roundtrip");
    }
    o.require(worst >= 16.0, fmt("min ratio with header %.2f (>= 16)", worst));
    const double secs = seconds_since(t0);
    o.require(secs < 60.0, fmt("%.1fs", secs));
    return o;
}

Outcome gradient_check() {
    const auto t0 = Clock::now();
    Outcome o;
    EncoderConfig cfg;
    cfg.codebook_sizes = {6, 4};
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.ff_dim = 32;
    cfg.max_len = 10;
    cfg.temperature = 0.5;
    cfg.seed = 21;
    auto params = init_params<double>(cfg);
    const std::vector<std::uint32_t> vocab = {6, 4};
    reset_heads(params, cfg, vocab, 5);
    for (auto& h : params.heads) h *= 5.0;

    const auto u1 = random_sequence(7, cfg.codebook_sizes, 50, 1);
    const auto u2 = random_sequence(5, cfg.codebook_sizes, 50, 2);
    const auto t1 = reconstruction_targets(u1), t2 = reconstruction_targets(u2);
    auto mask = [](std::size_t T, std::vector<std::size_t> idx) {
        auto m = MaskSpec::none(T);
        for (auto i : idx) m.masked[i] = true;
        return m;
    };
    const std::vector<SequenceExample> batch{{&u1, &t1, mask(7, {0, 3, 4, 6}), 0}, {&u2, &t2, mask(5, {2}), 1}};

    EncoderParams<double> grads;
    compute_loss_and_grads<double>(batch, params, cfg, &grads);
    const double eps = 1e-5;
    double worst = 0.0;
    std::size_t checked = 0;
    auto tensors = params.tensors();
    const auto g = grads.tensors();
    for (std::size_t k = 0; k < tensors.size(); ++k)
        for (Eigen::Index i = 0; i < tensors[k]->size(); ++i) {
            double& p = tensors[k]->data()[i];
            const double orig = p;
            p = orig + eps;
            const double up = compute_loss_and_grads<double>(batch, params, cfg, nullptr).loss;
            p = orig - eps;
            const double down = compute_loss_and_grads<double>(batch, params, cfg, nullptr).loss;
            p = orig;
            const double numeric = (up - down) / (2 * eps), analytic = g[k]->data()[i];
            worst = std::max(worst, std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-3}));
            ++checked;
        }
    o.require(worst < 1e-4, fmt("max relative error %.2e over %zu parameters", worst, checked));
    const double secs = seconds_since(t0);
    o.require(secs < 300.0, fmt("%.1fs", secs));
    return o;
}

Outcome schedules() {
    Outcome o;
    auto exact = [&](double got, double want, const std::string& what) {
        o.require(std::abs(got - want) <= 1e-15, fmt("%s=%g", what.c_str(), got));
    };
    exact(lr_hubert(32000), 5e-4, "hubert(32k)");
    exact(lr_hubert(0), 0.0, "hubert(0)");
    exact(lr_hubert(400000), 0.0, "hubert(400k)");
    exact(lr_hubert(216000), 2.5e-4, "hubert(216k)");
    exact(lr_dino(12000, 5e-4), 5e-4, "dino(12k)");
    exact(lr_dino(200000, 5e-4), 5e-4, "dino(200k)");
    exact(lr_dino(300000, 5e-4), 2.5e-4, "dino(300k)");
    exact(lr_dino(400000, 5e-4), 0.0, "dino(400k)");
    exact(ema_decay_at(0), 0.999, "ema(0)");
    exact(ema_decay_at(30000), 0.9999, "ema(30k)");
    exact(ema_decay_at(150000), 0.9999, "ema(150k)");
    exact(ema_decay_at(200000), 1.0, "ema(200k)");
    exact(ema_decay_at(400000), 1.0, "ema(400k)");
    return o;
}

Outcome masking_statistics() {
    Outcome o;
    Rng rng(2024);
    const std::size_t trials = 100000;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < trials; ++i) hit += sample_mask(100, 10, 0.08, rng).masked[50];
    const double got = static_cast<double>(hit) / trials, want = 1.0 - std::pow(0.92, 10);
    o.require(std::abs(got - want) <= 0.01, fmt("coverage %.4f vs %.4f", got, want));
    return o;
}

Outcome clustering() {
    Outcome o;
    Rng rng(99);
    std::normal_distribution<double> g;
    std::size_t mismatches = 0;
    for (int f = 0; f < 100; ++f) {
        const auto k = static_cast<Eigen::Index>(1 + rng() % 16), d = static_cast<Eigen::Index>(1 + rng() % 8),
                   n = static_cast<Eigen::Index>(1 + rng() % 64);
        KMeansModel m;
        m.centroids.resize(k, d);
        MatD x(n, d);
        for (Eigen::Index i = 0; i < m.centroids.size(); ++i) m.centroids.data()[i] = g(rng);
        for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
        const auto a = assign_clusters(m, x);
        for (Eigen::Index t = 0; t < n; ++t) {
            Eigen::Index best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (Eigen::Index c = 0; c < k; ++c)
                if (const double dd = (x.row(t) - m.centroids.row(c)).squaredNorm(); dd < bd) {
                    bd = dd;
                    best = c;
                }
            mismatches += a.streams[0][static_cast<std::size_t>(t)] != static_cast<std::uint32_t>(best);
        }
    }
    o.require(mismatches == 0, fmt("%zu assignment mismatches over 100 fixtures", mismatches));

    MatD p(4, 1);
    p << 0.0, 0.1, 10.0, 10.1;
    const auto km = kmeans_fit(p, 2, 100, 0);
    const double lo = std::min(km.centroids(0, 0), km.centroids(1, 0)), hi = std::max(km.centroids(0, 0), km.centroids(1, 0));
    o.require(std::abs(lo - 0.05) < 1e-12 && std::abs(hi - 10.05) < 1e-12, fmt("centroids {%.15g, %.15g}", lo, hi));
    return o;
}

Outcome ema_identities() {
    Outcome o;
    EncoderConfig cfg;
    cfg.codebook_sizes = {8, 8};
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.ff_dim = 32;
    cfg.max_len = 16;
    cfg.seed = 1;
    const auto student = init_params<double>(cfg);
    cfg.seed = 2;
    const auto start = init_params<double>(cfg);

    auto t = start;
    ema_update_teacher(t, student, 1.0);
    o.require(t == start, "decay 1 keeps teacher");
    ema_update_teacher(t, student, 0.0);
    o.require(t == student, "decay 0 copies student");

    double worst = 0.0;
    for (auto [a, b] : {std::pair{0.9, 0.8}, {0.999, 0.9999}, {0.5, 0.25}}) {
        auto two = start, one = start;
        ema_update_teacher(two, student, a);
        ema_update_teacher(two, student, b);
        ema_update_teacher(one, student, a * b);
        const auto x = two.tensors(), y = one.tensors();
        for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, (*x[i] - *y[i]).cwiseAbs().maxCoeff());
    }
    o.require(worst < 1e-14, fmt("two-step composition error %.1e", worst));
    return o;
}

// ---------------------------------------------------------------------------
// Desk-scale pretraining shared by criteria 7-9

struct RunSummary {
    HeldoutResult heldout;
    double probe = 0.0, baseline = 0.0, seconds = 0.0;
    std::uint64_t steps = 0;
};

struct Pipeline {
    TempDir dir{"acc_pipeline"};
    ExtractResult data;
    std::map<std::string, std::map<std::uint64_t, RunSummary>> runs;
    std::map<std::uint64_t, std::pair<double, double>> refinement;  // seed -> (raw, mapped) differing fraction

    static constexpr std::uint64_t kReconSteps = 500, kOfflineSteps = 500, kOnlineSteps = 1000;

    void extract() {
        ExtractOptions opt;
        opt.corpus.num_utterances = 300;
        opt.corpus.noise = 0.3;
        opt.num_stages = 4;
        opt.codebook_size = 16;
        opt.seed = 3;
        opt.out_dir = dir.file("extract");
        data = extract_dataset(opt);
        progress(fmt("corpus: %zu utterances, %llu frames", data.manifest.utterance_ids.size(),
                     static_cast<unsigned long long>(data.manifest.total_frames())));
    }

    TrainConfig config(const std::string& strategy, std::uint64_t steps, std::uint64_t seed, const std::string& targets = "") {
        Config c;
        c.set("strategy", strategy);
        c.set("total_steps", std::to_string(steps));
        c.set("seed", std::to_string(seed));
        c.set("dataset", data.dataset);
        c.set("init_codec", data.codec);
        if (!targets.empty()) c.set("targets", targets);
        return TrainConfig::from_config(c);
    }

    RunSummary train_and_probe(const std::string& name, const TrainConfig& cfg) {
        const auto t0 = Clock::now();
        const auto out = dir.file(name);
        const auto r = pretrain(cfg, {out});
        RunSummary s;
        s.seconds = seconds_since(t0);
        s.steps = cfg.total_steps;
        s.heldout = r.heldout;
        ProbeRunOptions po;
        po.checkpoint = r.final_checkpoint;
        po.dataset = data.dataset;
        po.labels = data.labels;
        po.codec = data.codec;
        po.tasks = {ProbeTask::frame_phoneme};
        const auto rows = run_probe(po);
        s.probe = rows[0].accuracy;
        s.baseline = rows[0].baseline_accuracy;
        progress(fmt("%s: held-out %.4f (chance %.4f), probe %.4f vs raw %.4f, %.0fs", name.c_str(), s.heldout.accuracy,
                     s.heldout.chance, s.probe, s.baseline, s.seconds));
        return s;
    }

    void run_all() {
        extract();
        for (std::uint64_t seed : {1, 2, 3}) {
            const auto tag = std::to_string(seed);
            runs["reconstruction"][seed] = train_and_probe("recon_" + tag, config("reconstruction", kReconSteps, seed));

            // round 1: targets from layer 0 of the untrained, codec-initialized encoder
            const auto init = pretrain(config("reconstruction", 0, seed), {dir.file("init_" + tag)}).final_checkpoint;
            RelabelOptions ro;
            ro.layer_index = 0;
            ro.k = 50;
            ro.sample_fraction = 0.1;
            ro.seed = seed;
            const auto ds = PackedDataset::open(data.dataset);
            const auto r1 = dir.file("round1_" + tag + ".c2vt");
            relabel_dataset(init, ds, ro, r1);
            const auto cfg = config("offline_kmeans", kOfflineSteps, seed, r1);
            runs["offline_kmeans"][seed] = train_and_probe("offline_" + tag, cfg);

            // round 2: targets from the round-1 model's middle layer
            ro.layer_index = std::max<std::size_t>(1, cfg.encoder.n_layers / 2);
            const auto r2 = dir.file("round2_" + tag + ".c2vt");
            relabel_dataset(dir.file("offline_" + tag + "/last.c2vk"), ds, ro, r2);
            refinement[seed] = compare_rounds(read_target_store(r1), read_target_store(r2));

            runs["online"][seed] = train_and_probe("online_" + tag, config("online", kOnlineSteps, seed));
        }
    }

    // Fraction of frames whose label changed, raw and after mapping each
    // round-2 cluster onto its most frequent round-1 cluster.
    static std::pair<double, double> compare_rounds(const TargetStore& a, const TargetStore& b) {
        std::map<std::uint32_t, std::map<std::uint32_t, std::size_t>> co;
        std::size_t total = 0, raw = 0;
        for (const auto& [id, ta] : a.labels) {
            const auto& x = ta.streams[0];
            const auto& y = b.at(id).streams[0];
            for (std::size_t t = 0; t < x.size(); ++t) {
                ++co[y[t]][x[t]];
                raw += x[t] != y[t];
                ++total;
            }
        }
        std::size_t agree = 0;
        for (const auto& [c2, row] : co) {
            std::size_t best = 0;
            for (const auto& [c1, n] : row) best = std::max(best, n);
            agree += best;
        }
        return {static_cast<double>(raw) / total, 1.0 - static_cast<double>(agree) / total};
    }
};

Outcome learning_signal(const Pipeline& p) {
    Outcome o;
    for (const auto& [strategy, seeds] : p.runs)
        for (const auto& [seed, r] : seeds)
            o.require(r.heldout.accuracy > r.heldout.chance && r.seconds < 1800 && r.steps <= 10000,
                      fmt("%s/%llu %.3f>%.3f", strategy.c_str(), static_cast<unsigned long long>(seed), r.heldout.accuracy,
                          r.heldout.chance));
    return o;
}

Outcome representation_ordering(const Pipeline& p) {
    Outcome o;
    for (const auto& [strategy, seeds] : p.runs)
        for (const auto& [seed, r] : seeds)
            o.require(r.probe > r.baseline, fmt("%s/%llu %.4f>%.4f", strategy.c_str(), static_cast<unsigned long long>(seed),
                                                r.probe, r.baseline));
    return o;
}

Outcome refinement(const Pipeline& p) {
    Outcome o;
    for (const auto& [seed, d] : p.refinement)
        o.require(d.first > 0.0 && d.second > 0.0,
                  fmt("seed %llu: %.1f%% frames relabelled, %.1f%% after cluster matching",
                      static_cast<unsigned long long>(seed), 100 * d.first, 100 * d.second));
    return o;
}

// ---------------------------------------------------------------------------

Outcome determinism() {
    Outcome o;
    TempDir dir("acc_determinism");
    std::vector<NamedSequence> seqs;
    for (std::size_t i = 0; i < 20; ++i) seqs.push_back({"u" + std::to_string(i), random_sequence(40 + 3 * i, {16, 16, 8}, 50, i)});
    const auto ds = dir.file("d.c2v");
    pack_dataset(seqs, ds);

    // offline targets from an untrained encoder
    auto base = TrainConfig::desk(Strategy::reconstruction, 0);
    base.encoder.d_model = 32;
    base.dataset = ds;
    const auto init = pretrain(base, {dir.file("init")}).final_checkpoint;
    RelabelOptions ro;
    ro.layer_index = 1;
    ro.k = 8;
    ro.sample_fraction = 0.5;
    relabel_dataset(init, PackedDataset::open(ds), ro, dir.file("t.c2vt"));

    for (auto strategy : {Strategy::reconstruction, Strategy::offline_kmeans, Strategy::online}) {
        auto cfg = TrainConfig::desk(strategy, 30);
        cfg.encoder.d_model = 32;
        cfg.frame_budget = 300;
        cfg.cluster.codebook_size = 16;
        cfg.dataset = ds;
        if (strategy == Strategy::offline_kmeans) cfg.targets = dir.file("t.c2vt");
        const auto name = to_string(strategy);
        pretrain(cfg, {dir.file(name + "_straight")});
        PretrainOptions a{dir.file(name + "_split")};
        a.stop_at = 13;
        pretrain(cfg, a);
        PretrainOptions b{dir.file(name + "_split")};
        b.resume_from = dir.file(name + "_split/step_13.c2vk");
        pretrain(cfg, b);
        const bool same = file_checksum(dir.file(name + "_straight/last.c2vk")) == file_checksum(dir.file(name + "_split/last.c2vk"));
        o.require(same, name + " split run == straight run");
    }

    // randomized pack/unpack round trips in both load modes
    Rng rng(17);
    std::size_t bad = 0;
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<std::uint32_t> sizes;
        const auto n_cb = 1 + rng() % 12;
        for (std::size_t i = 0; i < n_cb; ++i) sizes.push_back(static_cast<std::uint32_t>(1 + rng() % 5000));
        std::vector<NamedSequence> c;
        const auto n = 1 + rng() % 8;
        for (std::size_t i = 0; i < n; ++i) c.push_back({"s" + std::to_string(i), random_sequence(1 + rng() % 200, sizes, 50, rng())});
        const auto path = dir.file("rt" + std::to_string(trial) + ".c2v");
        pack_dataset(c, path);
        for (auto mode : {LoadMode::in_memory, LoadMode::seek}) {
            const auto back = PackedDataset::open(path, mode).unpack_all();
            for (std::size_t i = 0; i < n; ++i) bad += !(back[i].id == c[i].id && back[i].units == c[i].units);
        }
    }
    o.require(bad == 0, fmt("%zu pack/unpack mismatches over 25 random corpora", bad));
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    // optional arguments pick a subset of criteria by number
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    auto wanted = [&](int n) { return only.empty() || only.contains(n); };

    const std::vector<std::pair<std::string, std::function<Outcome()>>> fast = {
        {"storage accounting", storage_accounting},
        {"gradient correctness", gradient_check},
        {"schedule fidelity", schedules},
        {"masking statistics", masking_statistics},
        {"clustering oracle equivalence", clustering},
        {"EMA identities", ema_identities},
    };
    int failures = 0;
    auto report = [&](int n, const std::string& name, const Outcome& o) {
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << ": " << name << " (" << o.detail << ")"
                  << std::endl;
        failures += !o.pass;
    };
    auto guarded = [](const std::function<Outcome()>& f) {
        try {
            return f();
        } catch (const std::exception& e) {
            Outcome o;
            o.require(false, std::string("exception: ") + e.what());
            return o;
        }
    };

    for (int n = 1; n <= 6; ++n)
        if (wanted(n)) report(n, fast[n - 1].first, guarded(fast[n - 1].second));

    if (wanted(7) || wanted(8) || wanted(9)) {
        Pipeline p;
        const auto pipe = guarded([&] {
            p.run_all();
            return Outcome{};
        });
        const std::pair<std::string, std::function<Outcome(const Pipeline&)>> late[] = {
            {"end-to-end learning signal", learning_signal},
            {"representation ordering", representation_ordering},
            {"iterative refinement", refinement},
        };
        for (int n = 7; n <= 9; ++n)
            if (wanted(n)) report(n, late[n - 7].first, pipe.pass ? late[n - 7].second(p) : pipe);
    }
    if (wanted(10)) report(10, "determinism and resumability", guarded(determinism));
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
