#include "c2v/checkpoint.hpp"
#include "c2v/targets.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

using namespace c2v;
using c2v::testing::random_sequence;
using c2v::testing::TempDir;

namespace {

EncoderConfig small_config(std::vector<std::uint32_t> sizes) {
    EncoderConfig c;
    c.codebook_sizes = std::move(sizes);
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.ff_dim = 32;
    c.max_len = 64;
    c.seed = 3;
    return c;
}

std::vector<NamedSequence> small_corpus(std::size_t n, std::uint64_t seed) {
    std::vector<NamedSequence> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back({"u" + std::to_string(i), random_sequence(20 + i % 7, {8, 4}, 50, seed + i)});
    return out;
}

}  // namespace

TEST_CASE("reconstruction targets are the codebook columns") {
    const auto u = random_sequence(9, {5, 7, 3}, 50, 1);
    const auto t = reconstruction_targets(u);
    CHECK(t.frames == 9);
    CHECK(t.vocab_sizes == std::vector<std::uint32_t>{5, 7, 3});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t f = 0; f < 9; ++f) CHECK(t.streams[i][f] == u.code(f, i));
    CHECK_NOTHROW(t.validate());
    auto bad = t;
    bad.streams[1][0] = 7;
    CHECK_THROWS_AS(bad.validate(), RangeError);
    bad = t;
    bad.streams[0].pop_back();
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    const auto s = t.slice(2, 5);
    CHECK(s.frames == 3);
    CHECK(s.streams[2][0] == u.code(2, 2));
}

TEST_CASE("target store round-trips and reports missing ids") {
    TargetStore st;
    st.provenance = {{"strategy", "offline_kmeans"}, {"k", "5"}};
    st.labels["a"] = reconstruction_targets(random_sequence(4, {5}, 50, 1));
    st.labels["b"] = reconstruction_targets(random_sequence(11, {5}, 50, 2));
    TempDir dir("store");
    write_target_store(dir.file("t.c2vt"), st);
    const auto back = read_target_store(dir.file("t.c2vt"));
    CHECK(back.labels == st.labels);
    CHECK(back.provenance.at("k") == "5");
    CHECK(back.provenance.at("strategy") == "offline_kmeans");
    CHECK_THROWS_AS(back.at("zzz"), NotFoundError);
}

TEST_CASE("relabel is deterministic, matches its own latents and records provenance") {
    TempDir dir("relabel");
    const auto corpus = small_corpus(12, 40);
    pack_dataset(corpus, dir.file("d.c2v"));
    const auto ds = PackedDataset::open(dir.file("d.c2v"));
    const auto cfg = small_config({8, 4});
    Checkpoint ck;
    ck.encoder = cfg;
    ck.params = init_params<float>(cfg);
    save_checkpoint(ck, dir.file("ck.c2vk"));

    RelabelOptions opt;
    opt.layer_index = 1;
    opt.k = 6;
    opt.sample_fraction = 0.5;
    opt.seed = 9;
    const auto r1 = relabel_dataset(dir.file("ck.c2vk"), ds, opt, dir.file("a.c2vt"));
    const auto r2 = relabel_dataset(dir.file("ck.c2vk"), ds, opt, dir.file("b.c2vt"));
    CHECK(file_checksum(dir.file("a.c2vt")) == file_checksum(dir.file("b.c2vt")));
    CHECK(r1.sampled_utterances == 6);

    const auto st = read_target_store(dir.file("a.c2vt"));
    CHECK(st.provenance.at("layer") == "1");
    CHECK(st.provenance.at("k") == "6");
    CHECK(st.provenance.at("seed") == "9");
    CHECK(st.provenance.at("checkpoint_hash") == hex64(file_checksum(dir.file("ck.c2vk"))));
    REQUIRE(st.labels.size() == corpus.size());
    for (const auto& [id, units] : corpus) {
        const MatD lat = layer_latents(units, ck.params, cfg, 1).cast<double>();
        const auto& labels = st.at(id).streams[0];
        REQUIRE(labels.size() == units.frames());
        for (Eigen::Index t = 0; t < lat.rows(); ++t) {
            double best = std::numeric_limits<double>::infinity();
            for (Eigen::Index k = 0; k < r1.model.centroids.rows(); ++k)
                best = std::min(best, (lat.row(t) - r1.model.centroids.row(k)).squaredNorm());
            const double chosen = (lat.row(t) - r1.model.centroids.row(labels[static_cast<std::size_t>(t)])).squaredNorm();
            CHECK(chosen == doctest::Approx(best));
        }
    }

    opt.k = 100000;
    CHECK_THROWS_AS(relabel_dataset(dir.file("ck.c2vk"), ds, opt, dir.file("c.c2vt")), ConfigError);
    opt.k = 6;
    opt.layer_index = 3;
    CHECK_THROWS(relabel_dataset(dir.file("ck.c2vk"), ds, opt, dir.file("c.c2vt")));
}

TEST_CASE("EMA decay schedule") {
    CHECK(ema_decay_at(0) == doctest::Approx(0.999));
    CHECK(ema_decay_at(15000) == doctest::Approx(0.99945));
    CHECK(ema_decay_at(30000) == doctest::Approx(0.9999));
    CHECK(ema_decay_at(100000) == doctest::Approx(0.9999));
    CHECK(ema_decay_at(199999) == doctest::Approx(0.9999));
    CHECK(ema_decay_at(200000) == 1.0);
    CHECK(ema_decay_at(400000) == 1.0);
}

TEST_CASE("EMA teacher update") {
    const auto cfg = small_config({8, 4});
    auto student = init_params<double>(cfg);
    auto other = cfg;
    other.seed = 77;
    const auto start = init_params<double>(other);

    auto t = start;
    ema_update_teacher(t, student, 1.0);
    CHECK(t == start);
    ema_update_teacher(t, student, 0.0);
    CHECK(t == student);

    // two steps with decays a and b equal one step with decay a*b for a fixed student
    auto two = start, one = start;
    ema_update_teacher(two, student, 0.9);
    ema_update_teacher(two, student, 0.8);
    ema_update_teacher(one, student, 0.72);
    const auto ta = two.tensors(), tb = one.tensors();
    for (std::size_t i = 0; i < ta.size(); ++i) CHECK((*ta[i] - *tb[i]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("online codebook update matches a hand-computed mean shift") {
    const auto cfg = small_config({8, 4});
    const auto student = init_params<double>(cfg);
    OnlineClusterConfig cc;
    cc.layers = {1, 2};
    cc.codebook_size = 5;
    cc.codebook_decay = 0.7;
    auto teacher = TeacherState<double>::from_student(student, cc);
    const auto a = random_sequence(12, {8, 4}, 50, 1), b = random_sequence(9, {8, 4}, 50, 2);
    std::vector<const CodecUnitSequence*> batch{&a, &b};
    Rng rng(5);
    online_targets_and_update(teacher, cfg, batch, rng);
    REQUIRE(teacher.initialized);
    REQUIRE(teacher.codebooks.size() == 2);

    const auto before = teacher.codebooks;
    const auto targets = online_targets_and_update(teacher, cfg, batch, rng);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto layer = cc.layers[i];
        MatD sums = MatD::Zero(5, 16);
        std::vector<int> counts(5, 0);
        for (std::size_t s = 0; s < 2; ++s) {
            const auto h = forward(embed_units(*batch[s], student), student, cfg).hidden[layer];
            for (Eigen::Index t = 0; t < h.rows(); ++t) {
                Eigen::Index arg = 0;
                double best = std::numeric_limits<double>::infinity();
                for (Eigen::Index k = 0; k < 5; ++k) {
                    const double d = (h.row(t) - before[i].row(k)).squaredNorm();
                    if (d < best) {
                        best = d;
                        arg = k;
                    }
                }
                CHECK(targets[s].streams[i][static_cast<std::size_t>(t)] == arg);
                sums.row(arg) += h.row(t);
                ++counts[static_cast<std::size_t>(arg)];
            }
        }
        for (Eigen::Index k = 0; k < 5; ++k) {
            const auto n = counts[static_cast<std::size_t>(k)];
            const Eigen::RowVectorXd expect = n == 0 ? Eigen::RowVectorXd(before[i].row(k))
                                                     : Eigen::RowVectorXd(0.7 * before[i].row(k) + 0.3 * sums.row(k) / n);
            CHECK((teacher.codebooks[i].row(k) - expect).norm() < 1e-10);
        }
    }
}

TEST_CASE("frozen codebooks do not move and teacher passes are unmasked") {
    const auto cfg = small_config({8, 4});
    const auto student = init_params<float>(cfg);
    auto teacher = TeacherState<float>::from_student(student, OnlineClusterConfig::upper_half(2, 4));
    CHECK(teacher.cluster.layers == std::vector<std::size_t>{2});
    const auto a = random_sequence(15, {8, 4}, 50, 3);
    std::vector<const CodecUnitSequence*> batch{&a};
    Rng rng(1);
    CHECK_THROWS_AS(online_targets(teacher, cfg, batch), ConfigError);
    online_targets_and_update(teacher, cfg, batch, rng);
    CHECK(teacher.forward_calls == 1);

    teacher.frozen = true;
    const auto books = teacher.codebooks;
    const auto t1 = online_targets_and_update(teacher, cfg, batch, rng);
    CHECK(teacher.codebooks == books);
    CHECK(online_targets(teacher, cfg, batch) == t1);
    CHECK(teacher.forward_calls == 3);

    // the teacher latents are exactly the unmasked, all-codebook forward pass
    const auto h = teacher_forward(teacher, cfg, a);
    const auto ref = forward(embed_units(a, student), student, cfg);
    CHECK(h.hidden.back() == ref.hidden.back());

    OnlineClusterConfig bad;
    bad.layers = {3};
    CHECK_THROWS_AS(TeacherState<float>::from_student(student, bad), ConfigError);
}

TEST_CASE("online codebooks seed from distinct batch frames") {
    const auto cfg = small_config({8, 4});
    const auto student = init_params<double>(cfg);
    OnlineClusterConfig cc;
    cc.layers = {2};
    cc.codebook_size = 6;
    cc.codebook_decay = 1.0;
    auto teacher = TeacherState<double>::from_student(student, cc);
    const auto a = random_sequence(10, {8, 4}, 50, 8);
    std::vector<const CodecUnitSequence*> batch{&a};
    Rng rng(2);
    online_targets_and_update(teacher, cfg, batch, rng);
    const auto h = forward(embed_units(a, student), student, cfg).hidden[2];
    std::set<Eigen::Index> used;
    for (Eigen::Index k = 0; k < 6; ++k) {
        bool found = false;
        for (Eigen::Index t = 0; t < h.rows(); ++t)
            if (teacher.codebooks[0].row(k) == h.row(t)) {
                found = true;
                used.insert(t);
                break;
            }
        CHECK(found);
    }
    CHECK(used.size() == 6);
}
