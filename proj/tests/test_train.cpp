#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mgir/synthetic.hpp"
#include "mgir/train.hpp"
#include "oracle.hpp"

using namespace mgir;

namespace {

// Fixed LCG fixture so the golden metric values below stay reproducible.
HyperCube<float> lcg_cube(std::uint64_t seed, std::size_t D, std::size_t H, std::size_t W) {
    HyperCube<float> cube;
    cube.data = Tensor<float>({D, H, W});
    std::uint64_t x = seed;
    for (std::size_t i = 0; i < D * H * W; ++i) {
        x = 6364136223846793005ull * x + 1442695040888963407ull;
        cube.data.data()[i] = float(double(x >> 40) / double(1ull << 24));
    }
    cube.wavelengths_nm = linspace_nm(400, 700, D);
    return cube;
}

}  // namespace

TEST_CASE("rmse_loss value and gradient") {
    auto p = Tensor<float>::from_data({4}, {1.f, 2.f, 3.f, 4.f});
    auto t = Tensor<float>::from_data({4}, {1.f, 2.f, 3.f, 6.f});
    CHECK(rmse_loss(p, t).item() == doctest::Approx(1.f));  // sqrt(4/4)
    CHECK_THROWS_AS(rmse_loss(Tensor<float>({0}), Tensor<float>({0})), shape_error);
    CHECK_THROWS_AS(rmse_loss(p, Tensor<float>({3})), shape_error);

    std::mt19937_64 rng(70);
    auto pd = oracle::random_tensor<double>({6}, rng);
    auto td = oracle::random_tensor<double>({6}, rng);
    auto r = oracle::grad_check({&pd}, [&] { return rmse_loss(pd, td); });
    CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("metric identities on identical inputs") {
    auto cube = lcg_cube(9, 3, 12, 12);
    CHECK(std::isinf(psnr(cube, cube)));
    CHECK(ssim(cube, cube) == doctest::Approx(1.0));
    CHECK(sam(cube, cube) == doctest::Approx(0.0));
    auto r = evaluate(cube, cube);
    CHECK(r.rmse == 0.0);
    CHECK(std::isinf(r.psnr_db));
}

TEST_CASE("psnr decreases monotonically with noise amplitude") {
    auto truth = lcg_cube(3, 2, 10, 10);
    double prev = std::numeric_limits<double>::infinity();
    for (double amp : {0.01, 0.05, 0.1, 0.2}) {
        HyperCube<float> pred = truth;
        pred.data = Tensor<float>(truth.data.shape());
        std::uint64_t x = 77;
        for (std::size_t i = 0; i < pred.data.size(); ++i) {
            x = 6364136223846793005ull * x + 1442695040888963407ull;
            const double u = double(x >> 40) / double(1ull << 24) - 0.5;
            pred.data.data()[i] = truth.data.data()[i] + float(amp * u);
        }
        const double cur = psnr(pred, truth);
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("sam is invariant to per-pixel spectral scaling") {
    auto a = lcg_cube(5, 4, 6, 6);
    HyperCube<float> b = a;
    b.data = Tensor<float>(a.data.shape());
    for (std::size_t i = 0; i < a.data.size(); ++i) b.data.data()[i] = 3.f * a.data.data()[i];
    auto c = lcg_cube(6, 4, 6, 6);
    CHECK(sam(b, c) == doctest::Approx(sam(a, c)).epsilon(1e-6));
    HyperCube<float> zeros = a;
    zeros.data = Tensor<float>(a.data.shape());
    CHECK_THROWS_AS(sam(zeros, zeros), value_error);
}

TEST_CASE("ssim validates its window") {
    auto cube = lcg_cube(2, 2, 8, 8);
    CHECK_THROWS_AS(ssim(cube, cube, 4), value_error);   // even
    CHECK_THROWS_AS(ssim(cube, cube, 11), value_error);  // larger than image
}

TEST_CASE("fixed fixture matches frozen golden metrics") {
    auto pred = lcg_cube(1, 4, 8, 8);
    auto truth = lcg_cube(2, 4, 8, 8);
    auto r = evaluate(pred, truth);
    CHECK(r.rmse == doctest::Approx(0.417691799268).epsilon(1e-9));
    CHECK(r.psnr_db == doctest::Approx(7.582881027026).epsilon(1e-9));
    CHECK(r.ssim == doctest::Approx(-0.019524468385).epsilon(1e-6));
    CHECK(r.sam_rad == doctest::Approx(0.655456399169).epsilon(1e-9));
}

TEST_CASE("flip is an involution and flips the right axes") {
    auto cube = lcg_cube(8, 2, 3, 4);
    auto h = flip_cube(cube, true, false);
    CHECK(h.data.data()[0] == cube.data.data()[3]);
    auto back = flip_cube(h, true, false);
    for (std::size_t i = 0; i < cube.data.size(); ++i)
        CHECK(back.data.data()[i] == cube.data.data()[i]);
    auto v = flip_cube(cube, false, true);
    CHECK(v.data.data()[0] == cube.data.data()[2 * 4]);
}

namespace {

ModelConfig toy_model() {
    ModelConfig mc;
    mc.encoder.base_channels = 2;
    mc.encoder.stage_depths = {1, 1, 1, 1};
    mc.encoder.spatial_kernel = 3;
    mc.encoder.spectral_kernel = 3;
    mc.aggregator.model_dim = 16;
    mc.decoder.hidden_dims = {16, 16};
    return mc;
}

}  // namespace

TEST_CASE("training steps are deterministic under one seed") {
    auto scene = synthetic_scene<float>(4, 12, 12, 99);
    auto mask = make_mask<float>(12, 12, 0.5, 7);
    TrainConfig tc;
    tc.queries_per_step = 32;
    tc.batch_scenes = 1;
    tc.seed = 5;
    tc.augment_flips = false;

    Model<float> m1(toy_model(), 11);
    Trainer<float> t1(m1, {scene}, mask, 2, tc);
    Model<float> m2(toy_model(), 11);
    Trainer<float> t2(m2, {scene}, mask, 2, tc);
    for (int i = 0; i < 5; ++i) {
        const double l1 = t1.step();
        const double l2 = t2.step();
        CHECK(l1 == l2);
    }
    for (auto it1 = m1.params().begin(), it2 = m2.params().begin(); it1 != m1.params().end();
         ++it1, ++it2)
        for (std::size_t i = 0; i < it1->second.size(); ++i)
            CHECK(it1->second.data()[i] == it2->second.data()[i]);
}

TEST_CASE("loss trends down while overfitting one small scene") {
    auto scene = synthetic_scene<float>(4, 12, 12, 42);
    auto mask = make_mask<float>(12, 12, 0.5, 3);
    TrainConfig tc;
    tc.lr = 2e-3;
    tc.queries_per_step = 64;
    tc.batch_scenes = 1;
    tc.seed = 1;
    tc.augment_flips = false;
    Model<float> model(toy_model(), 7);
    Trainer<float> tr(model, {scene}, mask, 2, tc);
    double first = 0, sum_early = 0, sum_late = 0;
    for (int i = 0; i < 120; ++i) {
        const double l = tr.step();
        if (i == 0) first = l;
        if (i < 20) sum_early += l;
        if (i >= 100) sum_late += l;
        CHECK(std::isfinite(l));
    }
    (void)first;
    CHECK(sum_late / 20 < sum_early / 20);
}

TEST_CASE("flip augmentation draws variants deterministically") {
    auto scene = synthetic_scene<float>(4, 10, 10, 13);
    auto mask = make_mask<float>(10, 10, 0.5, 2);
    TrainConfig tc;
    tc.queries_per_step = 16;
    tc.batch_scenes = 1;
    tc.seed = 3;
    tc.augment_flips = true;
    Model<float> m1(toy_model(), 1);
    Trainer<float> t1(m1, {scene}, mask, 2, tc);
    Model<float> m2(toy_model(), 1);
    Trainer<float> t2(m2, {scene}, mask, 2, tc);
    for (int i = 0; i < 4; ++i) CHECK(t1.step() == t2.step());
}

TEST_CASE("trainer validates inputs") {
    auto mask = make_mask<float>(8, 8, 0.5, 1);
    TrainConfig tc;
    Model<float> model(toy_model(), 1);
    CHECK_THROWS_AS(Trainer<float>(model, {}, mask, 2, tc), config_error);
    tc.queries_per_step = 0;
    auto scene = synthetic_scene<float>(4, 8, 8, 1);
    CHECK_THROWS_AS(Trainer<float>(model, {scene}, mask, 2, tc), config_error);
}

TEST_CASE("rng state round-trips through text") {
    auto scene = synthetic_scene<float>(4, 8, 8, 21);
    auto mask = make_mask<float>(8, 8, 0.5, 4);
    TrainConfig tc;
    tc.queries_per_step = 8;
    tc.batch_scenes = 1;
    tc.augment_flips = false;
    Model<float> m1(toy_model(), 2);
    Trainer<float> t1(m1, {scene}, mask, 2, tc);
    t1.step();
    const std::string state = t1.rng_state();

    Model<float> m2(toy_model(), 2);
    Trainer<float> t2(m2, {scene}, mask, 2, tc);
    t2.set_rng_state(state);
    CHECK(t2.rng_state() == state);
    CHECK_THROWS_AS(t2.set_rng_state("not a state"), format_error);
}
