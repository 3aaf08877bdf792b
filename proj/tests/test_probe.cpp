#include "c2v/cli.hpp"
#include "c2v/probe.hpp"
#include "c2v/trainer.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace c2v;
using c2v::testing::TempDir;

namespace {

MatD gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> g;
    MatD m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
}

ProbeTrainOptions quick() {
    ProbeTrainOptions o;
    o.epochs = 150;
    return o;
}

struct Fixture {
    TempDir dir{"probe"};
    ExtractResult ex;
    std::string checkpoint;

    Fixture() {
        ExtractOptions opt;
        opt.corpus.num_utterances = 24;
        opt.corpus.min_frames = 40;
        opt.corpus.max_frames = 80;
        opt.num_stages = 2;
        opt.codebook_size = 8;
        opt.seed = 2;
        opt.out_dir = dir.file("x");
        ex = extract_dataset(opt);
        auto cfg = TrainConfig::desk(Strategy::reconstruction, 0);
        cfg.encoder.d_model = 16;
        cfg.encoder.n_heads = 2;
        cfg.encoder.ff_dim = 32;
        cfg.encoder.max_len = 128;
        cfg.dataset = ex.dataset;
        cfg.init_codec = ex.codec;
        checkpoint = pretrain(cfg, {dir.file("run")}).final_checkpoint;
    }

    ProbeRunOptions options() const {
        ProbeRunOptions o;
        o.checkpoint = checkpoint;
        o.dataset = ex.dataset;
        o.labels = ex.labels;
        o.codec = ex.codec;
        o.train = quick();
        return o;
    }
};

}  // namespace

TEST_CASE("a task with one observed class is solved exactly") {
    Rng rng(1);
    ProbeData d;
    d.layers = {gaussian(50, 4, rng)};
    d.labels.assign(50, 2);
    d.num_classes = 3;
    const auto m = train_probe(d, ProbeTask::frame_phoneme, 1, quick());
    const auto ev = evaluate_probe(m, d);
    CHECK(ev.accuracy == 1.0);
    CHECK(ev.majority_baseline == 1.0);
    CHECK(std::isnan(ev.per_class[0]));
    CHECK(ev.per_class[2] == 1.0);
}

TEST_CASE("labels independent of the features give chance accuracy") {
    Rng rng(2);
    auto make = [&](Eigen::Index n) {
        ProbeData d;
        d.layers = {gaussian(n, 8, rng), gaussian(n, 8, rng)};
        d.num_classes = 4;
        for (Eigen::Index i = 0; i < n; ++i) d.labels.push_back(static_cast<std::uint32_t>(rng() % 4));
        return d;
    };
    const auto train = make(2000), test = make(2000);
    const auto ev = evaluate_probe(train_probe(train, ProbeTask::frame_phoneme, 3, quick()), test);
    CHECK(std::abs(ev.accuracy - 0.25) < 0.05);
}

TEST_CASE("alpha is a distribution and moves onto the informative layer") {
    Rng rng(3);
    ProbeData d;
    d.num_classes = 3;
    const Eigen::Index n = 600;
    MatD noise = gaussian(n, 6, rng), signal = gaussian(n, 6, rng) * 0.3;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto c = static_cast<std::uint32_t>(i % 3);
        d.labels.push_back(c);
        signal(i, c) += 3.0;
    }
    d.layers = {noise, signal, noise * 0.5};
    std::vector<double> loss;
    const auto m = train_probe(d, ProbeTask::frame_phoneme, 1, {}, &loss);
    const auto a = m.alpha();
    CHECK(std::accumulate(a.begin(), a.end(), 0.0) == doctest::Approx(1.0));
    for (double v : a) CHECK(v >= 0.0);
    CHECK(a[1] > 0.5);
    CHECK(loss.back() < loss.front());
    CHECK(evaluate_probe(m, d).accuracy > 0.95);
    // softmax of the logits
    const double z = m.layer_logits.array().exp().sum();
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(a[i] == doctest::Approx(std::exp(m.layer_logits(static_cast<Eigen::Index>(i))) / z));
}

TEST_CASE("probe data: frame stacking, speaker pooling and errors") {
    LayerOutputs<float> a, b;
    a.hidden = {MatF::Constant(3, 2, 1.0f), MatF::Constant(3, 2, 2.0f)};
    b.hidden = {MatF::Constant(2, 2, 5.0f), MatF::Constant(2, 2, 6.0f)};
    b.hidden[0](0, 0) = 7.0f;
    LabelSet labels;
    labels.ids = {"b", "a"};
    labels.labels = {{1, {0, 1}}, {0, {2, 2, 1}}};
    labels.num_phonemes = 3;
    labels.num_speakers = 2;
    const std::vector<LayerOutputs<float>> feats{a, b};
    const std::vector<std::string> ids{"a", "b"};
    const std::vector<std::size_t> both{0, 1};

    const auto frames = build_probe_data(feats, ids, labels, ProbeTask::frame_phoneme, both);
    CHECK(frames.rows() == 5);
    CHECK(frames.labels == std::vector<std::uint32_t>{2, 2, 1, 0, 1});
    CHECK(frames.num_classes == 3);
    CHECK(frames.layers.size() == 2);
    CHECK(frames.layers[0](3, 0) == 7.0);

    const auto spk = build_probe_data(feats, ids, labels, ProbeTask::utterance_speaker, both, 1);
    CHECK(spk.rows() == 2);
    CHECK(spk.layers.size() == 1);
    CHECK(spk.labels == std::vector<std::uint32_t>{0, 1});
    CHECK(spk.layers[0](1, 0) == doctest::Approx(6.0));
    CHECK(spk.layers[0](1, 1) == doctest::Approx(5.0));

    const std::vector<std::string> missing{"a", "zzz"};
    CHECK_THROWS_AS(build_probe_data(feats, missing, labels, ProbeTask::frame_phoneme, both), NotFoundError);
    labels.labels[1].phonemes.pop_back();
    CHECK_THROWS_AS(build_probe_data(feats, ids, labels, ProbeTask::frame_phoneme, both), ShapeError);
}

TEST_CASE("features on a real checkpoint") {
    Fixture fx;
    const auto ck = load_checkpoint(fx.checkpoint);
    const auto ds = PackedDataset::open(fx.ex.dataset);
    const auto corpus = ds.unpack_all();
    const auto feats = extract_features(ck, corpus);
    REQUIRE(feats.size() == corpus.size());
    CHECK(feats[0].num_layers() == ck.encoder.n_layers + 1);

    // layer 0 is the plain sum of the codebook embedding rows
    for (std::size_t u = 0; u < 3; ++u)
        for (std::size_t t = 0; t < corpus[u].units.frames(); ++t) {
            Eigen::RowVectorXf sum = Eigen::RowVectorXf::Zero(16);
            for (std::size_t i = 0; i < 2; ++i) sum += ck.params.embeddings[i].row(corpus[u].units.code(t, i));
            CHECK((feats[u].hidden[0].row(static_cast<Eigen::Index>(t)) - sum).norm() < 1e-6f);
        }

    auto zeroed = ck.params;
    zeroed.embeddings[1].setZero();
    const auto other = extract_features(zeroed, ck.encoder, corpus);
    CHECK(other[0].hidden[0] != feats[0].hidden[0]);
    CHECK(other[0].hidden.back() != feats[0].hidden.back());

    auto wrong = ck.encoder;
    wrong.codebook_sizes = {8};
    CHECK_THROWS_AS(extract_features(init_params<float>(wrong), wrong, corpus), ConfigError);
}

TEST_CASE("run_probe leaves the encoder untouched and is deterministic") {
    Fixture fx;
    const auto before = file_checksum(fx.checkpoint);
    const auto rows = run_probe(fx.options());
    CHECK(file_checksum(fx.checkpoint) == before);
    const auto again = run_probe(fx.options());
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].task == ProbeTask::frame_phoneme);
    CHECK(rows[1].task == ProbeTask::utterance_speaker);
    CHECK(rows[0].strategy == "reconstruction");
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(rows[i].accuracy == again[i].accuracy);
        CHECK(rows[i].baseline_accuracy == again[i].baseline_accuracy);
        CHECK(rows[i].alpha == again[i].alpha);
        CHECK(rows[i].alpha.size() == 3);
        CHECK(rows[i].majority > 0.0);
    }
    CHECK(rows[0].accuracy > rows[0].majority);

    const auto table = format_probe_table(rows);
    CHECK(table.rfind("task", 0) == 0);
    CHECK(table.find("phoneme") != std::string::npos);
    CHECK(table.find("speaker") != std::string::npos);
}

TEST_CASE("held-out accuracy does not exceed training accuracy on phonemes") {
    Fixture fx;
    const auto ck = load_checkpoint(fx.checkpoint);
    const auto ds = PackedDataset::open(fx.ex.dataset);
    const auto feats = extract_features(ck, ds.unpack_all());
    const auto labels = read_labels(fx.ex.labels);
    const auto split = split_utterances(ds.size(), 0.25, 1);
    const auto& ids = ds.manifest().utterance_ids;
    const auto train = build_probe_data(feats, ids, labels, ProbeTask::frame_phoneme, split.train);
    const auto test = build_probe_data(feats, ids, labels, ProbeTask::frame_phoneme, split.heldout);
    const auto m = train_probe(train, ProbeTask::frame_phoneme, 1, quick());
    CHECK(evaluate_probe(m, train).accuracy >= evaluate_probe(m, test).accuracy - 0.02);
}

TEST_CASE("task names") {
    CHECK(parse_probe_task("phoneme") == ProbeTask::frame_phoneme);
    CHECK(parse_probe_task("speaker") == ProbeTask::utterance_speaker);
    CHECK(to_string(ProbeTask::frame_phoneme) == "phoneme");
    CHECK_THROWS_AS(parse_probe_task("emotion"), ConfigError);
}
