#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mgir/tensor.hpp"
#include "oracle.hpp"

using namespace mgir;

TEST_CASE("tensor construction and accessors") {
    Tensor<float> t({2, 3}, 1.5f);
    CHECK(t.rank() == 2);
    CHECK(t.size() == 6);
    CHECK(t.extent(1) == 3);
    CHECK(t.data()[5] == 1.5f);
    CHECK_THROWS_AS(Tensor<float>::from_data({2, 2}, {1.f, 2.f, 3.f}), shape_error);
    CHECK_THROWS_AS(t.item(), shape_error);
    CHECK(Tensor<float>::scalar(4.f).item() == 4.f);
}

TEST_CASE("elementwise forward values") {
    auto a = Tensor<float>::from_data({3}, {1.f, -2.f, 3.f});
    auto b = Tensor<float>::from_data({3}, {0.5f, 4.f, -1.f});
    CHECK(add(a, b).data()[1] == 2.f);
    CHECK(sub(a, b).data()[2] == 4.f);
    CHECK(mul(a, b).data()[0] == 0.5f);
    CHECK(scale(a, 2.f).data()[2] == 6.f);
    CHECK(sum_all(a).item() == 2.f);
    CHECK(mean_all(a).item() == doctest::Approx(2.f / 3.f));
    CHECK_THROWS_AS(add(a, Tensor<float>({4})), shape_error);
}

TEST_CASE("gelu matches erf closed form") {
    auto a = Tensor<float>::from_data({3}, {0.f, 1.f, -1.f});
    auto y = gelu(a);
    CHECK(y.data()[0] == 0.f);
    CHECK(y.data()[1] == doctest::Approx(0.8413447f));
    CHECK(y.data()[2] == doctest::Approx(-0.1586553f));
}

TEST_CASE("backward requires scalar loss and runs once") {
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    auto a = Tensor<float>::from_data({2}, {1.f, 2.f}, true);
    auto y = mul(a, a);
    CHECK_THROWS_AS(tape.backward(y), shape_error);
    auto l = sum_all(y);
    tape.backward(l);
    CHECK(a.grad()[0] == 2.f);
    CHECK(a.grad()[1] == 4.f);
    CHECK_THROWS_AS(tape.backward(l), value_error);
}

TEST_CASE("no tape means no tracking") {
    auto a = Tensor<float>::from_data({2}, {1.f, 2.f}, true);
    auto y = mul(a, a);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("elementwise gradients vs finite differences") {
    std::mt19937_64 rng(42);
    auto a = oracle::random_tensor<double>({4, 3}, rng);
    auto b = oracle::random_tensor<double>({4, 3}, rng);
    auto r = oracle::grad_check({&a, &b}, [&] {
        return mean_all(mul(gelu(add(a, b)), sub(a, scale(b, 0.7))));
    });
    CHECK(r.checked == 24);
    CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("sqrt_scalar gradient and zero subgradient") {
    std::mt19937_64 rng(1);
    auto a = oracle::random_tensor<double>({5}, rng, 0.1, 2.0);
    auto r = oracle::grad_check({&a}, [&] { return sqrt_scalar(mean_all(mul(a, a))); });
    CHECK(r.max_rel_err < 1e-3);

    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    auto z = Tensor<double>::scalar(0.0, true);
    auto y = sqrt_scalar(z);
    tape.backward(y);
    CHECK(z.grad()[0] == 0.0);  // total subgradient at 0
}

TEST_CASE("reshape round trip and gradient flow") {
    std::mt19937_64 rng(2);
    auto a = oracle::random_tensor<double>({2, 6}, rng);
    auto y = reshape(a, {3, 4});
    CHECK(y.shape() == Shape{3, 4});
    for (std::size_t i = 0; i < 12; ++i) CHECK(y.data()[i] == a.data()[i]);
    CHECK_THROWS_AS(reshape(a, {5, 5}), shape_error);

    auto r = oracle::grad_check({&a}, [&] { return sum_all(mul(reshape(a, {12}), reshape(a, {12}))); });
    CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("permute values and gradient") {
    auto a = Tensor<float>::from_data({2, 3}, {0, 1, 2, 3, 4, 5});
    auto y = permute(a, {1, 0});
    CHECK(y.shape() == Shape{3, 2});
    CHECK(y.data()[0] == 0.f);
    CHECK(y.data()[1] == 3.f);
    CHECK(y.data()[4] == 2.f);

    std::mt19937_64 rng(3);
    auto b = oracle::random_tensor<double>({2, 3, 4}, rng);
    auto w = oracle::random_tensor<double>({4, 3, 2}, rng);
    auto r = oracle::grad_check({&b}, [&] { return sum_all(mul(permute(b, {2, 1, 0}), w)); });
    CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("concat and narrow are inverses") {
    auto a = Tensor<float>::from_data({2, 2}, {1, 2, 3, 4});
    auto b = Tensor<float>::from_data({2, 3}, {5, 6, 7, 8, 9, 10});
    auto c = concat<float>({a, b}, 1);
    CHECK(c.shape() == Shape{2, 5});
    CHECK(c.data()[2] == 5.f);
    CHECK(c.data()[5] == 3.f);
    auto back = narrow(c, 1, 2, 3);
    for (std::size_t i = 0; i < 6; ++i) CHECK(back.data()[i] == b.data()[i]);
    CHECK_THROWS_AS(narrow(c, 1, 4, 2), shape_error);
    CHECK_THROWS_AS(concat<float>({a, Tensor<float>({3, 2})}, 1), shape_error);

    std::mt19937_64 rng(4);
    auto x = oracle::random_tensor<double>({3, 2}, rng);
    auto y = oracle::random_tensor<double>({3, 4}, rng);
    auto r = oracle::grad_check({&x, &y}, [&] {
        auto cat = concat<double>({x, y}, 1);
        return sum_all(mul(narrow(cat, 1, 1, 3), narrow(cat, 1, 2, 3)));
    });
    CHECK(r.max_rel_err < 1e-3);
}

TEST_CASE("gradient accumulates across uses") {
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    auto a = Tensor<float>::scalar(3.f, true);
    auto l = sum_all(add(mul(a, a), a));  // a^2 + a -> 2a + 1 = 7
    tape.backward(l);
    CHECK(a.grad()[0] == 7.f);
}
