#include "c2v/encoder.hpp"
#include "c2v/targets.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace c2v;

namespace {

EncoderConfig tiny_config() {
    EncoderConfig c;
    c.codebook_sizes = {5, 3};
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.ff_dim = 24;
    c.max_len = 8;
    c.temperature = 0.5;
    c.seed = 11;
    return c;
}

CodecUnitSequence random_units(std::size_t T, const std::vector<std::uint32_t>& sizes, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::uint32_t> codes;
    for (std::size_t t = 0; t < T; ++t)
        for (auto k : sizes) codes.push_back(std::uniform_int_distribution<std::uint32_t>(0, k - 1)(rng));
    return CodecUnitSequence(T, sizes, 50, codes);
}

MaskSpec fixed_mask(std::size_t T, std::vector<std::size_t> idx) {
    MaskSpec m = MaskSpec::none(T);
    for (auto i : idx) m.masked[i] = true;
    return m;
}

}  // namespace

TEST_CASE("finite-difference gradient check on every parameter") {
    const auto cfg = tiny_config();
    auto params = init_params<double>(cfg);
    const std::vector<std::uint32_t> vocab = {4, 6};
    reset_heads(params, cfg, vocab, 3);
    // larger heads than the default init so the check is not dominated by tiny gradients
    for (auto& h : params.heads) h *= 5.0;

    const auto u1 = random_units(6, cfg.codebook_sizes, 1);
    const auto u2 = random_units(5, cfg.codebook_sizes, 2);
    TargetAssignment t1{6, vocab, {{0, 1, 2, 3, 0, 1}, {5, 4, 3, 2, 1, 0}}};
    TargetAssignment t2{5, vocab, {{3, 3, 2, 1, 0}, {0, 1, 2, 3, 4}}};
    std::vector<SequenceExample> batch{{&u1, &t1, fixed_mask(6, {1, 2, 4}), 0}, {&u2, &t2, fixed_mask(5, {0, 3}), 1}};

    EncoderParams<double> grads;
    compute_loss_and_grads<double>(batch, params, cfg, &grads);

    const double eps = 1e-5;
    double worst = 0.0;
    std::string worst_name;
    const auto names = params.names();
    auto tensors = params.tensors();
    const auto gtensors = grads.tensors();
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        auto& p = *tensors[k];
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            const double orig = p.data()[i];
            p.data()[i] = orig + eps;
            const double up = compute_loss_and_grads<double>(batch, params, cfg, nullptr).loss;
            p.data()[i] = orig - eps;
            const double down = compute_loss_and_grads<double>(batch, params, cfg, nullptr).loss;
            p.data()[i] = orig;
            const double numeric = (up - down) / (2 * eps);
            const double analytic = gtensors[k]->data()[i];
            const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-3});
            const double rel = std::abs(numeric - analytic) / scale;
            if (rel > worst) {
                worst = rel;
                worst_name = names[k];
            }
        }
    }
    INFO("worst tensor " << worst_name);
    CHECK(worst < 1e-4);
}

TEST_CASE("mask embedding gradient is nonzero only when some frame is masked") {
    const auto cfg = tiny_config();
    auto params = init_params<double>(cfg);
    const std::vector<std::uint32_t> vocab = {4};
    reset_heads(params, cfg, vocab, 3);
    const auto u = random_units(6, cfg.codebook_sizes, 4);
    TargetAssignment t{6, vocab, {{0, 1, 2, 3, 0, 1}}};

    EncoderParams<double> g;
    std::vector<SequenceExample> none{{&u, &t, MaskSpec::none(6), 0}};
    const auto s0 = compute_loss_and_grads<double>(none, params, cfg, &g);
    CHECK(s0.loss == 0.0);
    CHECK(s0.masked_frames == 0);
    CHECK(g.mask_embedding.norm() == 0.0);
    CHECK(global_norm(g) == 0.0);

    std::vector<SequenceExample> some{{&u, &t, fixed_mask(6, {2}), 0}};
    compute_loss_and_grads<double>(some, params, cfg, &g);
    CHECK(g.mask_embedding.norm() > 0.0);
}

TEST_CASE("predict_distribution matches a closed-form softmax with temperature") {
    MatD h(1, 2);
    h << 1.0, 2.0;
    MatD w(3, 2);
    w << 1.0, 0.0, 0.0, 1.0, 0.5, 0.5;
    const double tau = 0.1;
    const auto p = predict_distribution<double>(h, w, tau);
    const double z[3] = {1.0 / tau, 2.0 / tau, 1.5 / tau};
    const double denom = std::exp(z[0]) + std::exp(z[1]) + std::exp(z[2]);
    for (int c = 0; c < 3; ++c) CHECK(p(0, c) == doctest::Approx(std::exp(z[c]) / denom).epsilon(1e-12));
    CHECK(p.sum() == doctest::Approx(1.0));

    // huge logits stay finite
    MatD big(1, 2);
    big << 1e4, -1e4;
    const auto q = predict_distribution<double>(big, w, 0.01);
    CHECK(q.allFinite());
    CHECK(q(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("zero heads give the uniform distribution and loss ln C") {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg);
    const std::vector<std::uint32_t> vocab = {500};
    reset_heads(params, cfg, vocab, 1);
    params.heads[0].setZero();
    const auto u = random_units(4, cfg.codebook_sizes, 9);
    TargetAssignment t{4, vocab, {{7, 8, 9, 499}}};
    std::vector<SequenceExample> batch{{&u, &t, fixed_mask(4, {0, 1, 2, 3}), 0}};
    const auto s = compute_loss_and_grads<double>(batch, params, cfg, nullptr);
    CHECK(s.loss == doctest::Approx(std::log(500.0)).epsilon(1e-12));
}

TEST_CASE("embed_units sums codebook embeddings and honours the kept prefix") {
    const auto cfg = tiny_config();
    const auto params = init_params<double>(cfg);
    const auto u = random_units(3, cfg.codebook_sizes, 5);
    const auto z = embed_units(u, params);
    const auto z1 = embed_units(u, params, 1);
    for (std::size_t t = 0; t < 3; ++t) {
        const auto r = static_cast<Eigen::Index>(t);
        const MatD expect = params.embeddings[0].row(u.code(t, 0)) + params.embeddings[1].row(u.code(t, 1));
        CHECK((z.row(r) - expect).norm() < 1e-15);
        CHECK((z1.row(r) - params.embeddings[0].row(u.code(t, 0))).norm() < 1e-15);
    }
}

TEST_CASE("quantizer dropout keeps the first codebook and covers every prefix") {
    Rng rng(3);
    std::vector<int> seen(5, 0);
    int full = 0;
    for (int i = 0; i < 20000; ++i) {
        const auto k = sample_quantizer_dropout(0.5, 4, rng);
        REQUIRE(k >= 1);
        REQUIRE(k <= 4);
        ++seen[k];
        full += k == 4;
    }
    for (int k = 1; k <= 4; ++k) CHECK(seen[k] > 0);
    // P(all kept) = 0.5 + 0.5 / 4
    CHECK(static_cast<double>(full) / 20000.0 == doctest::Approx(0.625).epsilon(0.03));
    CHECK(sample_quantizer_dropout(0.0, 4, rng) == 4);
}

TEST_CASE("forward is causal-free and exposes row-stochastic attention maps") {
    const auto cfg = tiny_config();
    const auto params = init_params<double>(cfg);
    const auto u = random_units(5, cfg.codebook_sizes, 6);
    const auto out = forward(embed_units(u, params), params, cfg, true);
    REQUIRE(out.hidden.size() == cfg.n_layers + 1);
    REQUIRE(out.attention.size() == cfg.n_layers);
    for (const auto& layer : out.attention)
        for (const auto& a : layer) {
            CHECK(a.rows() == 5);
            CHECK((a.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
            CHECK(a.minCoeff() >= 0.0);
        }
    // changing the last frame changes the first frame's output (bidirectional)
    auto z = embed_units(u, params);
    const auto base = forward(z, params, cfg).hidden.back();
    z.row(4).array() += 1.0;
    const auto moved = forward(z, params, cfg).hidden.back();
    CHECK((base.row(0) - moved.row(0)).norm() > 0.0);
}

TEST_CASE("codec initialization copies codewords when widths match") {
    EncoderConfig cfg = tiny_config();
    cfg.codebook_sizes = {4, 4};
    ToyCodec codec;
    codec.frame_rate_hz = 50;
    Rng rng(1);
    std::normal_distribution<double> n;
    for (int s = 0; s < 2; ++s) {
        MatD cb(4, 16);
        for (Eigen::Index i = 0; i < cb.size(); ++i) cb.data()[i] = n(rng);
        codec.stages.push_back(cb);
    }
    auto params = init_params<double>(cfg);
    init_embeddings_from_codec(params, cfg, codec);
    CHECK((params.embeddings[0] - codec.stages[0]).norm() == 0.0);
    CHECK((params.embeddings[1] - codec.stages[1]).norm() == 0.0);

    EncoderConfig wide = cfg;
    wide.d_model = 32;
    wide.ff_dim = 32;
    auto p2 = init_params<double>(wide);
    init_embeddings_from_codec(p2, wide, codec, 5);
    CHECK(p2.embeddings[0].cols() == 32);
    auto p3 = init_params<double>(wide);
    init_embeddings_from_codec(p3, wide, codec, 5);
    CHECK(p2.embeddings[0] == p3.embeddings[0]);

    EncoderConfig wrong = cfg;
    wrong.codebook_sizes = {4, 8};
    auto p4 = init_params<double>(wrong);
    CHECK_THROWS_AS(init_embeddings_from_codec(p4, wrong, codec), ShapeError);
}

TEST_CASE("adam decays projections but not norms, biases or embeddings") {
    const auto cfg = tiny_config();
    auto params = init_params<float>(cfg);
    reset_heads(params, cfg, std::vector<std::uint32_t>{3}, 1);
    const auto before = params;
    auto state = adam_init(params);
    auto zero = params.zeros_like();
    AdamConfig ac;
    ac.weight_decay = 0.5;
    adam_update(params, zero, state, 0.1, ac);
    CHECK(params.layers[0].ln1_g == before.layers[0].ln1_g);
    CHECK(params.layers[0].bq == before.layers[0].bq);
    CHECK(params.embeddings[0] == before.embeddings[0]);
    CHECK(params.positions == before.positions);
    CHECK((params.layers[0].wq - before.layers[0].wq * 0.95f).norm() < 1e-6);
    CHECK((params.heads[0] - before.heads[0] * 0.95f).norm() < 1e-6);
}

TEST_CASE("invalid encoder configurations are rejected") {
    auto c = tiny_config();
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.codebook_sizes.clear();
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.temperature = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    const auto cfg = tiny_config();
    const auto params = init_params<double>(cfg);
    const auto u = random_units(9, cfg.codebook_sizes, 1);
    CHECK_THROWS(forward(embed_units(u, params), params, cfg));
}
