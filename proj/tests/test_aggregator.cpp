#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mgir/aggregator.hpp"
#include "oracle.hpp"

using namespace mgir;

TEST_CASE("config validation enforces divisibility") {
    AggregatorConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.heads = 3;
    CHECK_THROWS_AS(cfg.validate(), config_error);
    cfg = {};
    cfg.model_dim = 66;
    CHECK_THROWS_AS(cfg.validate(), config_error);
    cfg = {};
    cfg.window = 0;
    CHECK_THROWS_AS(cfg.validate(), config_error);
    cfg = {};
    cfg.rpe_frequencies = 0;
    CHECK_THROWS_AS(cfg.validate(), config_error);
}

TEST_CASE("window start rule for even and odd windows") {
    // even J=2: cells floor(t)-0 and floor(t)+1 bracket the query
    CHECK(detail::window_start(2.3, 2) == 2);
    CHECK(detail::window_start(2.9, 2) == 2);
    CHECK(detail::window_start(-0.4, 2) == -1);  // clamped later
    // odd J=3: centered on the nearest cell
    CHECK(detail::window_start(2.3, 3) == 1);
    CHECK(detail::window_start(2.6, 3) == 2);
    // even J=4 widens symmetrically around the bracketing pair
    CHECK(detail::window_start(2.3, 4) == 1);
}

TEST_CASE("rpe features: dimension, identity, and default frequencies") {
    const std::size_t R = 20;
    Tensor<float> omegas({R});
    for (std::size_t i = 0; i < R; ++i) omegas.data()[i] = float(2.0 * std::exp(double(i + 1)));

    std::mt19937_64 rng(50);
    auto offsets = oracle::random_tensor<float>({3, 4, 3}, rng, -0.5, 0.5);
    auto feats = detail::rpe_features(offsets, omegas);
    REQUIRE(feats.shape() == Shape{3, 4, 6 * R});  // 120 under defaults
    // cos^2 + sin^2 == 1 for every (component, frequency) pair
    for (std::size_t r = 0; r < 12; ++r)
        for (std::size_t i = 0; i < 3 * R; ++i) {
            const float c = feats.data()[r * 6 * R + 2 * i];
            const float s = feats.data()[r * 6 * R + 2 * i + 1];
            CHECK(std::abs(c * c + s * s - 1.f) < 1e-6f);
        }

    // the registered initial frequencies are 2e^i
    std::mt19937 init(1);
    ParameterStore<float> store;
    Aggregator<float> agg(AggregatorConfig{}, store, {2, 4, 8, 16}, &init);
    const Tensor<float>& w = store.get("agg.rpe.omegas");
    REQUIRE(w.size() == R);
    for (std::size_t i = 0; i < R; ++i)
        CHECK(w.data()[i] == doctest::Approx(2.0 * std::exp(double(i + 1))));
}

TEST_CASE("rpe gradient w.r.t. frequencies") {
    std::mt19937_64 rng(51);
    auto offsets = oracle::random_tensor<double>({2, 3, 3}, rng, -0.5, 0.5);
    auto omegas = oracle::random_tensor<double>({4}, rng, 0.5, 3.0);
    auto w = oracle::random_tensor<double>({2, 3, 24}, rng);
    auto r = oracle::grad_check({&omegas}, [&] {
        return sum_all(mul(detail::rpe_features(offsets, omegas), w));
    });
    CHECK(r.max_rel_err < 1e-3);
}

namespace {

AggregatorConfig tiny_cfg() {
    AggregatorConfig cfg;
    cfg.groups = 1;
    cfg.heads = 1;
    cfg.window = 2;
    cfg.model_dim = 4;
    cfg.rpe_frequencies = 2;
    return cfg;
}

template <typename S>
LatentPyramid<S> tiny_pyramid(std::mt19937_64& rng, std::size_t C = 3) {
    LatentPyramid<S> pyr;
    pyr.levels.push_back(oracle::random_tensor<S>({C, 3, 4, 4}, rng));
    return pyr;
}

}  // namespace

TEST_CASE("gathered offsets are key center minus query") {
    std::mt19937 init(2);
    std::mt19937_64 rng(52);
    ParameterStore<float> store;
    Aggregator<float> agg(tiny_cfg(), store, {3}, &init);
    auto pyr = tiny_pyramid<float>(rng);
    auto coords = oracle::random_tensor<float>({5, 3}, rng, -0.9, 0.9);
    auto batch = agg.gather_windows(pyr, coords);
    REQUIRE(batch.windows.size() == 1);
    REQUIRE(batch.windows[0].shape() == Shape{5, 8, 4});
    REQUIRE(batch.offsets[0].shape() == Shape{5, 8, 3});
    const std::size_t N[3] = {3, 4, 4};
    for (std::size_t p = 0; p < 5; ++p)
        for (std::size_t k = 0; k < 8; ++k)
            for (std::size_t ax = 0; ax < 3; ++ax) {
                const float off = batch.offsets[0].data()[(p * 8 + k) * 3 + ax];
                const float q = coords.data()[p * 3 + ax];
                // key center must be a valid cell center of this axis
                const float center = off + q;
                bool is_center = false;
                for (std::size_t i = 0; i < N[ax]; ++i)
                    if (std::abs(center - (-1.f + float(2 * i + 1) / float(N[ax]))) < 1e-5f)
                        is_center = true;
                CHECK(is_center);
            }

    // borders clamp: a query at the far corner still gets 8 valid cells
    auto corner = Tensor<float>::from_data({1, 3}, {-1.f, -1.f, 1.f});
    CHECK_NOTHROW(agg.gather_windows(pyr, corner));
}

TEST_CASE("aggregate matches a loop-written attention oracle (single group)") {
    std::mt19937 init(3);
    std::mt19937_64 rng(53);
    ParameterStore<float> store;
    AggregatorConfig cfg = tiny_cfg();
    Aggregator<float> agg(cfg, store, {3}, &init);
    auto pyr = tiny_pyramid<float>(rng);
    auto coords = oracle::random_tensor<float>({4, 3}, rng, -0.8, 0.8);
    auto batch = agg.gather_windows(pyr, coords);
    auto out = agg.aggregate(batch);
    constexpr std::size_t P = 4, K = 8, C = 4, R = 2;
    REQUIRE(out.shape() == Shape{P, C});

    auto param = [&](const std::string& n) { return store.get(n); };
    const float* qw = param("agg.level1.q.w").data();
    const float* qb = param("agg.level1.q.b").data();
    const float* kw = param("agg.level1.k.w").data();
    const float* kb = param("agg.level1.k.b").data();
    const float* vw = param("agg.level1.v.w").data();
    const float* vb = param("agg.level1.v.b").data();
    const float* ow = param("agg.rpe.omegas").data();
    const float* rw = param("agg.rpe.proj.w").data();
    const float* rb = param("agg.rpe.proj.b").data();

    for (std::size_t p = 0; p < P; ++p) {
        float Q[C];
        for (std::size_t c = 0; c < C; ++c) {
            Q[c] = qb[c];
            for (std::size_t i = 0; i < C; ++i)
                Q[c] += batch.centers[0].data()[p * C + i] * qw[i * C + c];
        }
        std::vector<float> logits(K);
        std::vector<std::array<float, C>> V(K);
        for (std::size_t k = 0; k < K; ++k) {
            float rpe_feat[6 * R];
            for (std::size_t ax = 0; ax < 3; ++ax) {
                const float x = batch.offsets[0].data()[(p * K + k) * 3 + ax];
                for (std::size_t i = 0; i < R; ++i) {
                    rpe_feat[ax * 2 * R + 2 * i] = std::cos(ow[i] * x);
                    rpe_feat[ax * 2 * R + 2 * i + 1] = std::sin(ow[i] * x);
                }
            }
            float dot = 0;
            for (std::size_t c = 0; c < C; ++c) {
                float kv = kb[c], vv = vb[c], rv = rb[c];
                for (std::size_t i = 0; i < C; ++i) {
                    kv += batch.windows[0].data()[(p * K + k) * C + i] * kw[i * C + c];
                    vv += batch.windows[0].data()[(p * K + k) * C + i] * vw[i * C + c];
                }
                for (std::size_t i = 0; i < 6 * R; ++i) rv += rpe_feat[i] * rw[i * C + c];
                dot += Q[c] * (kv + rv);
                V[k][c] = vv + rv;
            }
            logits[k] = dot / std::sqrt(float(C));
        }
        auto attn = oracle::softmax_ref(logits);
        for (std::size_t c = 0; c < C; ++c) {
            float acc = Q[c];
            for (std::size_t k = 0; k < K; ++k) acc += attn[k] * V[k][c];
            CHECK(out.data()[p * C + c] == doctest::Approx(acc).epsilon(1e-4));
        }
    }
}

TEST_CASE("full aggregator gradient check") {
    std::mt19937 init(4);
    std::mt19937_64 rng(54);
    ParameterStore<double> store;
    AggregatorConfig cfg = tiny_cfg();
    cfg.groups = 2;
    cfg.heads = 2;
    Aggregator<double> agg(cfg, store, {3, 5}, &init);
    LatentPyramid<double> pyr;
    pyr.levels.push_back(oracle::random_tensor<double>({3, 3, 3, 3}, rng));
    pyr.levels.push_back(oracle::random_tensor<double>({5, 2, 2, 2}, rng));
    auto coords = oracle::random_tensor<double>({2, 3}, rng, -0.7, 0.7);
    auto r = oracle::grad_check(
        {&pyr.levels[0], &pyr.levels[1], &store.get("agg.rpe.omegas"),
         &store.get("agg.level1.q.w"), &store.get("agg.level2.k.w"),
         &store.get("agg.level1.v.b"), &store.get("agg.rpe.proj.w")},
        [&] {
            auto out = agg.forward(pyr, coords);
            return mean_all(mul(out, out));
        });
    CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("query order permutes outputs correspondingly") {
    std::mt19937 init(5);
    std::mt19937_64 rng(55);
    ParameterStore<float> store;
    Aggregator<float> agg(tiny_cfg(), store, {3}, &init);
    auto pyr = tiny_pyramid<float>(rng);
    auto coords = oracle::random_tensor<float>({3, 3}, rng, -0.8, 0.8);
    Tensor<float> rev({3, 3});
    for (std::size_t p = 0; p < 3; ++p)
        for (std::size_t ax = 0; ax < 3; ++ax)
            rev.data()[p * 3 + ax] = coords.data()[(2 - p) * 3 + ax];
    auto a = agg.forward(pyr, coords);
    auto b = agg.forward(pyr, rev);
    for (std::size_t p = 0; p < 3; ++p)
        for (std::size_t c = 0; c < 4; ++c)
            CHECK(a.data()[p * 4 + c] == doctest::Approx(b.data()[(2 - p) * 4 + c]));
}

TEST_CASE("rpe can be disabled and query concatenation registers its projection") {
    std::mt19937 init(6);
    std::mt19937_64 rng(56);
    {
        ParameterStore<float> store;
        AggregatorConfig cfg = tiny_cfg();
        cfg.use_rpe = false;
        Aggregator<float> agg(cfg, store, {3}, &init);
        auto pyr = tiny_pyramid<float>(rng);
        auto coords = oracle::random_tensor<float>({2, 3}, rng, -0.5, 0.5);
        CHECK_NOTHROW(agg.forward(pyr, coords));
    }
    {
        ParameterStore<float> store;
        AggregatorConfig cfg = tiny_cfg();
        cfg.query_fusion = Fusion::Concatenation;
        Aggregator<float> agg(cfg, store, {3}, &init);
        CHECK(store.contains("agg.qcat.w"));
        auto pyr = tiny_pyramid<float>(rng);
        auto coords = oracle::random_tensor<float>({2, 3}, rng, -0.5, 0.5);
        CHECK(agg.forward(pyr, coords).shape() == Shape{2, 4});
    }
}

TEST_CASE("level channel mismatch is rejected") {
    std::mt19937 init(7);
    std::mt19937_64 rng(57);
    ParameterStore<float> store;
    Aggregator<float> agg(tiny_cfg(), store, {3}, &init);
    LatentPyramid<float> pyr;
    pyr.levels.push_back(oracle::random_tensor<float>({2, 3, 3, 3}, rng));
    auto coords = oracle::random_tensor<float>({1, 3}, rng);
    CHECK_THROWS_AS(agg.gather_windows(pyr, coords), config_error);
}
