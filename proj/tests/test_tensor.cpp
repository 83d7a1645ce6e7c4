#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "lanedet/random.hpp"
#include "lanedet/tensor.hpp"
#include "oracles.hpp"

using namespace lanedet;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) t.set_flat(i, rng.uniform(lo, hi));
    return t;
}

// Keeps samples away from the kinks of relu/abs/clamp so finite differences
// stay two-sided.
Tensor random_away_from(Shape shape, Rng& rng, double kink, double margin) {
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) {
        double v = rng.uniform(-1.0, 1.0);
        if (std::abs(v - kink) < margin) v = kink + (v >= kink ? margin : -margin) * 2.0;
        t.set_flat(i, v);
    }
    return t;
}

}  // namespace

TEST_SUITE("numerics") {

TEST_CASE("matmul identity leaves the operand unchanged") {
    Rng rng(7);
    const Tensor a = random_tensor({2, 2}, rng);
    const Tensor out = matmul(a, Tensor::eye(2));
    for (std::int64_t i = 0; i < 4; ++i) CHECK(out.flat(i) == a.flat(i));
}

TEST_CASE("matmul matches the triple-loop oracle") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const int m = rng.uniform_int(1, 7);
        const int k = rng.uniform_int(1, 7);
        const int n = rng.uniform_int(1, 7);
        const Tensor a = random_tensor({m, k}, rng);
        const Tensor b = random_tensor({k, n}, rng);
        const auto expected = oracle::matmul_loops(a.to_vector(), b.to_vector(), m, k, n);
        const Tensor got = matmul(a, b);
        for (std::int64_t i = 0; i < got.size(); ++i)
            CHECK(got.flat(i) == doctest::Approx(expected[static_cast<size_t>(i)]).epsilon(1e-14));
    }
}

TEST_CASE("matmul rejects mismatched inner extents") {
    const Tensor a({2, 3});
    const Tensor b({2, 3});
    CHECK_THROWS_AS(matmul(a, b), DimensionError);
    CHECK_THROWS_AS(matmul(a, Tensor({3})), DimensionError);
}

TEST_CASE("flop counter records m*k*n per product and sums over composites") {
    Rng rng(3);
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({4, 5}, rng);
    const Tensor c = random_tensor({5, 2}, rng);

    FlopCounter::Scope one;
    const Tensor ab = matmul(a, b);
    CHECK(one.macs() == 3u * 4u * 5u);

    FlopCounter::Scope composite;
    const Tensor abc = matmul(ab, c);
    const Tensor again = matmul(a, b);
    CHECK(composite.macs() == 3u * 5u * 2u + 3u * 4u * 5u);

    // Monotone within a scope: element-wise work adds nothing, products only add.
    const std::uint64_t before = FlopCounter::count();
    const Tensor r = relu(add(ab, again));
    CHECK(FlopCounter::count() == before);
    (void)abc;
    (void)r;
}

TEST_CASE("softmax normalizes, is shift invariant, and survives large inputs") {
    const Tensor flat = softmax(Tensor::from({3}, {0.0, 0.0, 0.0}), 0);
    for (int i = 0; i < 3; ++i) CHECK(flat.flat(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    const Tensor big = softmax(Tensor::from({2}, {1000.0, 1001.0}), 0);
    const Tensor small = softmax(Tensor::from({2}, {0.0, 1.0}), 0);
    CHECK(big.flat(0) == small.flat(0));
    CHECK(big.flat(1) == small.flat(1));
    CHECK(big.flat(0) + big.flat(1) == doctest::Approx(1.0).epsilon(1e-15));

    Rng rng(11);
    const Tensor x = random_tensor({4, 5}, rng, -3.0, 3.0);
    const Tensor y = softmax(x, -1);
    for (int r = 0; r < 4; ++r) {
        double total = 0.0;
        for (int c = 0; c < 5; ++c) total += y.at({r, c});
        CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("softmax rejects an out-of-range axis") {
    CHECK_THROWS_AS(softmax(Tensor({2, 2}), 2), DimensionError);
    CHECK_THROWS_AS(softmax(Tensor::scalar(1.0), 0), DimensionError);
}

TEST_CASE("non-finite results are rejected instead of propagated") {
    CHECK_THROWS_AS(log(Tensor::from({1}, {0.0})), NumericError);
    CHECK_THROWS_AS(exp(Tensor::from({1}, {1000.0})), NumericError);
    CHECK_NOTHROW(log(clamp_min(Tensor::from({1}, {0.0}), 1e-12)));
}

TEST_CASE("broadcast add and mul follow trailing-axis rules") {
    const Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor row = Tensor::from({3}, {10, 20, 30});
    const Tensor s = add(m, row);
    CHECK(s.at({0, 0}) == 11.0);
    CHECK(s.at({1, 2}) == 36.0);

    const Tensor col = Tensor::from({2, 1}, {10, 100});
    const Tensor p = mul(m, col);
    CHECK(p.at({0, 1}) == 20.0);
    CHECK(p.at({1, 1}) == 500.0);

    CHECK_THROWS_AS(add(Tensor({2, 3}), Tensor({2, 2})), DimensionError);
}

TEST_CASE("shape movers preserve and reorder content") {
    const Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});

    const Tensor t = transpose(m);
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.at({2, 0}) == 3.0);
    CHECK(t.at({0, 1}) == 4.0);

    const Tensor r = reshape(m, {3, 2});
    CHECK(r.at({0, 1}) == 2.0);
    CHECK(r.at({2, 1}) == 6.0);
    CHECK_THROWS_AS(reshape(m, {4, 2}), DimensionError);

    const Tensor p = permute(reshape(m, {1, 2, 3}), {2, 0, 1});
    CHECK(p.shape() == Shape{3, 1, 2});
    CHECK(p.at({1, 0, 1}) == 5.0);
    CHECK_THROWS_AS(permute(m, {0, 0}), DimensionError);

    const Tensor g = gather_rows(m, {1, 0, 1});
    CHECK(g.shape() == Shape{3, 3});
    CHECK(g.at({0, 0}) == 4.0);
    CHECK(g.at({2, 2}) == 6.0);
    CHECK_THROWS_AS(gather_rows(m, {2}), DimensionError);

    const Tensor cat = concat(m, m, 1);
    CHECK(cat.shape() == Shape{2, 6});
    CHECK(cat.at({1, 4}) == 5.0);
    const Tensor sl = slice(cat, 1, 3, 2);
    CHECK(sl.shape() == Shape{2, 2});
    CHECK(sl.at({0, 0}) == 1.0);
    CHECK_THROWS_AS(slice(m, 1, 2, 2), DimensionError);
}

TEST_CASE("axis sums match explicit accumulation") {
    const Tensor m = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor s0 = sum(m, 0);
    CHECK(s0.shape() == Shape{3});
    CHECK(s0.flat(0) == 5.0);
    CHECK(s0.flat(2) == 9.0);
    const Tensor s1 = sum(m, 1, /*keepdim=*/true);
    CHECK(s1.shape() == Shape{2, 1});
    CHECK(s1.flat(1) == 15.0);
    CHECK(sum_all(m).flat(0) == 21.0);
}

TEST_CASE("mlp with zero weights returns the bias; one layer is affine") {
    const Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    MlpLayer zero{Tensor({3, 4}), Tensor::from({4}, {1, 2, 3, 4})};
    const Tensor out = mlp(x, {zero});
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 4; ++c) CHECK(out.at({r, c}) == double(c + 1));

    Rng rng(5);
    MlpLayer affine{random_tensor({3, 2}, rng), random_tensor({2}, rng)};
    const Tensor got = mlp(x, {affine});
    const Tensor want = add(matmul(x, affine.w), affine.b);
    for (std::int64_t i = 0; i < got.size(); ++i) CHECK(got.flat(i) == want.flat(i));
}

TEST_CASE("gradients accumulate across fan-out and flow through a diamond") {
    Tape tape;
    const Tensor x = tape.param("x", Tensor::from({2}, {1.0, 2.0}));
    const Tensor loss = sum_all(add(scale(x, 2.0), scale(x, 3.0)));
    tape.backward(loss);
    const Tensor g = tape.grad("x");
    CHECK(g.flat(0) == 5.0);
    CHECK(g.flat(1) == 5.0);
}

TEST_CASE("backward rejects non-scalar and disconnected losses") {
    Tape tape;
    const Tensor x = tape.param("x", Tensor::from({2}, {1.0, 2.0}));
    CHECK_THROWS_AS(tape.backward(x), ContractError);
    CHECK_THROWS_AS(tape.backward(sum_all(Tensor::from({2}, {1.0, 1.0}))), ContractError);
}

TEST_CASE("unreached parameters report zero gradients") {
    Tape tape;
    const Tensor x = tape.param("x", Tensor::from({2}, {1.0, 2.0}));
    tape.param("unused", Tensor::from({3}, {1.0, 1.0, 1.0}));
    tape.backward(sum_all(x));
    const Tensor g = tape.grad("unused");
    CHECK(g.shape() == Shape{3});
    for (int i = 0; i < 3; ++i) CHECK(g.flat(i) == 0.0);
}

TEST_CASE("repeated backward accumulates until zero_grad") {
    Tape tape;
    const Tensor x = tape.param("x", Tensor::from({1}, {3.0}));
    tape.backward(sum_all(scale(x, 2.0)));
    tape.backward(sum_all(scale(x, 2.0)));
    CHECK(tape.grad("x").flat(0) == 4.0);
    tape.zero_grad();
    CHECK(tape.grad("x").flat(0) == 0.0);
}

TEST_CASE("tape guards its registry invariants") {
    Tape tape;
    tape.param("w", Tensor({2, 2}));
    CHECK_THROWS_AS(tape.param("w", Tensor({2, 2})), ContractError);
    CHECK_THROWS_AS(tape.param("f32", Tensor({2}, DType::F32)), ContractError);
    CHECK_THROWS_AS(tape.set_param_value("w", Tensor({3, 2})), ContractError);
    CHECK_THROWS_AS(tape.grad("missing"), ContractError);

    Tensor w = tape.param_value("w");
    CHECK_THROWS_AS(w.set_flat(0, 1.0), ContractError);
}

TEST_CASE("no-grad regions record nothing") {
    Tape tape;
    const Tensor x = tape.param("x", Tensor::from({2}, {1.0, 2.0}));
    NoGradGuard guard;
    const Tensor y = scale(x, 2.0);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("f32 pipeline produces close values and identical flop counts") {
    Rng rng(9);
    const Tensor a = random_tensor({6, 8}, rng);
    const Tensor b = random_tensor({8, 4}, rng);
    FlopCounter::Scope s64;
    const Tensor c64 = matmul(a, b);
    const std::uint64_t macs64 = s64.macs();

    const Tensor a32 = a.to(DType::F32);
    const Tensor b32 = b.to(DType::F32);
    FlopCounter::Scope s32;
    const Tensor c32 = matmul(a32, b32);
    CHECK(s32.macs() == macs64);
    for (std::int64_t i = 0; i < c64.size(); ++i)
        CHECK(c32.flat(i) == doctest::Approx(c64.flat(i)).epsilon(1e-4));

    CHECK_THROWS_AS(matmul(a, b32), ContractError);
}

TEST_CASE("every differentiable operation matches central finite differences") {
    // Each builder takes the probe value for "x" plus a weight stream, so the
    // finite-difference loop can re-run the identical expression eagerly.
    struct OpCase {
        const char* name;
        Shape x_shape;
        std::function<Tensor(Shape, Rng&)> draw_x;
        std::function<Tensor(const Tensor&, Rng&)> build;
    };

    const auto plain = [](Shape s, Rng& r) { return random_tensor(s, r); };

    const std::vector<OpCase> cases = {
        {"matmul", {3, 4}, plain,
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(matmul(x, random_tensor({4, 2}, r)), random_tensor({3, 2}, r)));
         }},
        {"transpose", {3, 4}, plain,
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(transpose(x), random_tensor({4, 3}, r)));
         }},
        {"permute", {2, 3, 4}, plain,
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(permute(x, {2, 0, 1}), random_tensor({4, 2, 3}, r)));
         }},
        {"reshape", {3, 4}, plain,
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(reshape(x, {2, 6}), random_tensor({2, 6}, r)));
         }},
        {"add_broadcast", {3}, plain,
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(add(random_tensor({4, 3}, r), x), random_tensor({4, 3}, r)));
         }},
        {"sub_broadcast", {4, 3}, plain,
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(sub(random_tensor({3}, r), x), random_tensor({4, 3}, r)));
         }},
        {"mul_broadcast", {4, 1}, plain,
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(mul(x, random_tensor({4, 5}, r)), random_tensor({4, 5}, r)));
         }},
        {"scale_exp", {2, 3}, plain,
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(exp(scale(x, 0.7)), random_tensor({2, 3}, r)));
         }},
        {"log", {2, 3},
         [](Shape s, Rng& r) { return random_tensor(s, r, 0.2, 2.0); },
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(log(x), random_tensor({2, 3}, r)));
         }},
        {"relu", {3, 3},
         [](Shape s, Rng& r) { return random_away_from(s, r, 0.0, 0.05); },
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(relu(x), random_tensor({3, 3}, r)));
         }},
        {"abs", {3, 3},
         [](Shape s, Rng& r) { return random_away_from(s, r, 0.0, 0.05); },
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(abs(x), random_tensor({3, 3}, r)));
         }},
        {"clamp_min", {3, 3},
         [](Shape s, Rng& r) { return random_away_from(s, r, 0.25, 0.05); },
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(clamp_min(x, 0.25), random_tensor({3, 3}, r)));
         }},
        {"softmax", {3, 4},
         [](Shape s, Rng& r) { return random_tensor(s, r, -2.0, 2.0); },
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(softmax(x, 1), random_tensor({3, 4}, r)));
         }},
        {"sum_axis", {2, 3, 2}, plain,
         [](const Tensor& x, Rng& r) {
             return sum_all(mul(sum(x, 1), random_tensor({2, 2}, r)));
         }},
        {"gather_slice_concat", {4, 3}, plain,
         [](const Tensor& x, Rng& r) {
             const Tensor g = gather_rows(x, {2, 0, 2});
             const Tensor joined = concat(slice(g, 1, 0, 2), slice(g, 1, 1, 2), 1);
             return sum_all(mul(joined, random_tensor({3, 4}, r)));
         }},
        {"mlp", {3, 4}, plain,
         [](const Tensor& x, Rng& r) {
             std::vector<MlpLayer> layers{{random_tensor({4, 5}, r), random_tensor({5}, r)},
                                          {random_tensor({5, 2}, r), random_tensor({2}, r)}};
             return sum_all(mul(mlp(x, layers), random_tensor({3, 2}, r)));
         }},
    };

    int seeds_used = 0;
    for (const auto& op_case : cases) {
        for (int rep = 0; rep < 7 && seeds_used < 112; ++rep, ++seeds_used) {
            const std::uint64_t s = static_cast<std::uint64_t>(seeds_used) * 7919 + 13;
            Rng init_rng(s + 1);
            const Tensor x0 = op_case.draw_x(op_case.x_shape, init_rng);

            Tape tape;
            const Tensor x = tape.param("x", x0);
            {
                Rng weight_rng(s);
                tape.backward(op_case.build(x, weight_rng));
            }
            const Tensor analytic = tape.grad("x");

            const double eps = 1e-6;
            double max_err = 0.0;
            for (std::int64_t i = 0; i < x0.size(); ++i) {
                const double orig = x0.flat(i);
                const auto value_at = [&](double v) {
                    Tensor probe = x0;
                    probe.set_flat(i, v);
                    NoGradGuard ng;
                    Rng weight_rng(s);
                    return op_case.build(probe, weight_rng).flat(0);
                };
                const double numeric = (value_at(orig + eps) - value_at(orig - eps)) / (2.0 * eps);
                max_err = std::max(max_err, oracle::rel_err(analytic.flat(i), numeric));
            }
            INFO(op_case.name, " seed ", s);
            CHECK(max_err <= 1e-5);
        }
    }
    CHECK(seeds_used >= 100);
}

}  // TEST_SUITE
