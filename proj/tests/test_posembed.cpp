#include <doctest.h>

#include <cmath>
#include <vector>

#include "lanedet/posembed.hpp"
#include "lanedet/random.hpp"
#include "oracles.hpp"

using namespace lanedet;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(shape);
    double* p = t.mut64();
    for (std::int64_t i = 0; i < t.size(); ++i) p[i] = rng.uniform(lo, hi);
    return t;
}

EmbedWeights random_embed_weights(int c, Rng& rng) {
    return {random_tensor({4, c / 4}, rng), random_tensor({c / 4}, rng),
            random_tensor({c / 4, c}, rng), random_tensor({c}, rng)};
}

// Loop re-statement of the two-stage lift for a single homogeneous point.
std::vector<double> lift_point_loops(const double* p4, const EmbedWeights& w) {
    const int quarter = w.w1.dim(1);
    const int c = w.w2.dim(1);
    std::vector<double> inner(static_cast<size_t>(quarter));
    for (int q = 0; q < quarter; ++q) {
        double acc = w.b1.flat(q);
        for (int k = 0; k < 4; ++k) acc += p4[k] * w.w1.at({k, q});
        inner[static_cast<size_t>(q)] = acc;
    }
    std::vector<double> out(static_cast<size_t>(c));
    for (int j = 0; j < c; ++j) {
        double acc = w.b2.flat(j);
        for (int q = 0; q < quarter; ++q) acc += inner[static_cast<size_t>(q)] * w.w2.at({q, j});
        out[static_cast<size_t>(j)] = acc;
    }
    return out;
}

}  // namespace

TEST_SUITE("posembed") {

TEST_CASE("zero head weights give a uniform depth distribution") {
    Tensor features = Tensor::full({3, 4, 6}, 0.7);
    MlpLayer head{Tensor({6, 5}), Tensor({5})};
    const DepthDistribution d = predict_depth_dist(features, head);
    CHECK(d.probs.shape() == Shape{3, 4, 5});
    for (std::int64_t i = 0; i < d.probs.size(); ++i)
        CHECK(d.probs.flat(i) == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("a +1000 logit saturates the distribution to one-hot") {
    Tensor features = Tensor({2, 2, 3});
    MlpLayer head{Tensor({3, 4}), Tensor({4})};
    Tensor b = head.b;
    b.set_flat(2, 1000.0);
    head.b = b;
    const DepthDistribution d = predict_depth_dist(features, head);
    for (int v = 0; v < 2; ++v)
        for (int u = 0; u < 2; ++u) {
            CHECK(d.probs.at({v, u, 2}) == doctest::Approx(1.0).epsilon(1e-9));
            CHECK(d.probs.at({v, u, 0}) <= 1e-9);
        }
}

TEST_CASE("depth head matches a loop-level linear+softmax composition") {
    Rng rng(311);
    Tensor features = random_tensor({4, 5, 6}, rng);
    MlpLayer head{random_tensor({6, 7}, rng), random_tensor({7}, rng)};
    const DepthDistribution d = predict_depth_dist(features, head);
    for (int v = 0; v < 4; ++v)
        for (int u = 0; u < 5; ++u) {
            std::vector<double> logits(7, 0.0);
            for (int j = 0; j < 7; ++j) {
                double acc = head.b.flat(j);
                for (int c = 0; c < 6; ++c) acc += features.at({v, u, c}) * head.w.at({c, j});
                logits[static_cast<size_t>(j)] = acc;
            }
            double mx = logits[0];
            for (double x : logits) mx = std::max(mx, x);
            double denom = 0.0;
            for (double x : logits) denom += std::exp(x - mx);
            double row_sum = 0.0;
            for (int j = 0; j < 7; ++j) {
                const double want = std::exp(logits[static_cast<size_t>(j)] - mx) / denom;
                CHECK(std::abs(d.probs.at({v, u, j}) - want) <= 1e-12);
                row_sum += d.probs.at({v, u, j});
            }
            CHECK(std::abs(row_sum - 1.0) <= 1e-9);
        }
}

TEST_CASE("head width mismatch is a dimension error") {
    Tensor features = Tensor({2, 2, 3});
    MlpLayer head{Tensor({4, 5}), Tensor({5})};
    CHECK_THROWS_AS(predict_depth_dist(features, head), DimensionError);
    CHECK_THROWS_AS(predict_height_dist(features, head), DimensionError);
}

TEST_CASE("one-hot depth collapses the embedding to a single lifted point") {
    // Bin settings from the ablation: 50 depth bins over (0, 100),
    // 50 height bins over (-5, 5), checked at full channel width.
    const int c = 64, depth_bins = 50;
    Rng rng(1009);
    const CameraModel cam = make_pinhole_camera(23, 30, 7.0, 11.0, 1.6, 0.03);
    const FrustumGrid frustum = build_frustum_grid(23, 30, depth_bins, {0.0, 100.0});
    const FrustumGrid road = unproject(frustum, cam);
    const EmbedWeights w = random_embed_weights(c, rng);

    const int star = 31;
    Tensor probs({23, 30, depth_bins});
    double* p = probs.mut64();
    for (int v = 0; v < 23; ++v)
        for (int u = 0; u < 30; ++u)
            p[(static_cast<std::int64_t>(v) * 30 + u) * depth_bins + star] = 1.0;

    const Tensor e = image_pos_embed({probs}, road, w);
    CHECK(e.shape() == Shape{23, 30, c});
    double worst = 0.0;
    for (int v = 0; v < 23; ++v)
        for (int u = 0; u < 30; ++u) {
            double point[4];
            for (int k = 0; k < 4; ++k) point[k] = road.points.at({v, u, star, k});
            const auto want = lift_point_loops(point, w);
            for (int j = 0; j < c; ++j)
                worst = std::max(worst, std::abs(e.at({v, u, j}) - want[static_cast<size_t>(j)]));
        }
    CHECK(worst <= 1e-12);
}

TEST_CASE("one-hot height collapses the bev embedding likewise") {
    const int c = 64, zbins = 50;
    Rng rng(1010);
    BevLayout layout{10, 8, {-10.0, 10.0}, {3.0, 103.0}};
    const BevGrid grid = build_bev_grid(layout, zbins, {-5.0, 5.0});
    const EmbedWeights w = random_embed_weights(c, rng);

    const int star = 7;
    Tensor probs({10, 8, zbins});
    double* p = probs.mut64();
    for (std::int64_t cell = 0; cell < 80; ++cell) p[cell * zbins + star] = 1.0;

    const Tensor e = bev_pos_embed({probs}, grid, w);
    double worst = 0.0;
    for (int j = 0; j < 10; ++j)
        for (int k = 0; k < 8; ++k) {
            double point[4];
            for (int i = 0; i < 4; ++i) point[i] = grid.points.at({j, k, star, i});
            const auto want = lift_point_loops(point, w);
            for (int ch = 0; ch < c; ++ch)
                worst = std::max(worst, std::abs(e.at({j, k, ch}) - want[static_cast<size_t>(ch)]));
        }
    CHECK(worst <= 1e-12);
}

TEST_CASE("a single height bin embeds the z=0 plane whatever the head says") {
    Rng rng(77);
    BevLayout layout{4, 3, {-8.0, 8.0}, {3.0, 43.0}};
    const BevGrid grid = build_bev_grid(layout, 1, {-5.0, 5.0});
    // One bin over a symmetric range centers at z = 0.
    CHECK(grid.points.at({0, 0, 0, 2}) == 0.0);
    const EmbedWeights w = random_embed_weights(16, rng);
    Tensor probs = Tensor::full({4, 3, 1}, 1.0);
    const Tensor e = bev_pos_embed({probs}, grid, w);
    for (int j = 0; j < 4; ++j)
        for (int k = 0; k < 3; ++k) {
            double point[4] = {layout.cell_x(k), layout.cell_y(j), 0.0, 1.0};
            const auto want = lift_point_loops(point, w);
            for (int ch = 0; ch < 16; ++ch)
                CHECK(std::abs(e.at({j, k, ch}) - want[static_cast<size_t>(ch)]) <= 1e-12);
        }
}

TEST_CASE("uniform depth embeds the mean lifted point") {
    const int bins = 6, c = 8;
    Rng rng(405);
    const CameraModel cam = make_pinhole_camera(3, 4, 5.0, 9.0, 1.4, 0.0);
    const FrustumGrid road = unproject(build_frustum_grid(3, 4, bins, {0.0, 60.0}), cam);
    const EmbedWeights w = random_embed_weights(c, rng);
    Tensor probs = Tensor::full({3, 4, bins}, 1.0 / bins);
    const Tensor e = image_pos_embed({probs}, road, w);
    for (int v = 0; v < 3; ++v)
        for (int u = 0; u < 4; ++u) {
            double mean[4] = {0, 0, 0, 0};
            for (int d = 0; d < bins; ++d)
                for (int k = 0; k < 4; ++k) mean[k] += road.points.at({v, u, d, k}) / bins;
            const auto want = lift_point_loops(mean, w);
            for (int j = 0; j < c; ++j)
                CHECK(std::abs(e.at({v, u, j}) - want[static_cast<size_t>(j)]) <= 1e-12);
        }
}

TEST_CASE("random distributions match the loop-over-bins oracle") {
    Rng rng(2024);
    for (int trial = 0; trial < 10; ++trial) {
        const int h = rng.uniform_int(2, 4), cols = rng.uniform_int(2, 5);
        const int bins = rng.uniform_int(1, 6), c = 4 * rng.uniform_int(1, 4);
        const CameraModel cam =
            make_pinhole_camera(h, cols, rng.uniform(4.0, 9.0), rng.uniform(4.0, 9.0),
                                rng.uniform(1.2, 2.4), rng.uniform(-0.05, 0.08));
        const FrustumGrid road = unproject(build_frustum_grid(h, cols, bins, {0.0, 80.0}), cam);
        const EmbedWeights w = random_embed_weights(c, rng);
        Tensor probs({h, cols, bins});
        double* p = probs.mut64();
        for (std::int64_t cell = 0; cell < static_cast<std::int64_t>(h) * cols; ++cell) {
            double sum = 0.0;
            for (int d = 0; d < bins; ++d) {
                p[cell * bins + d] = rng.uniform(0.01, 1.0);
                sum += p[cell * bins + d];
            }
            for (int d = 0; d < bins; ++d) p[cell * bins + d] /= sum;
        }
        const Tensor e = image_pos_embed({probs}, road, w);
        double worst = 0.0;
        for (int v = 0; v < h; ++v)
            for (int u = 0; u < cols; ++u) {
                std::vector<double> want(static_cast<size_t>(c), 0.0);
                for (int d = 0; d < bins; ++d) {
                    double point[4];
                    for (int k = 0; k < 4; ++k) point[k] = road.points.at({v, u, d, k});
                    // Expectation distributes over the affine inner stage only;
                    // replicate by weighting the inner lift before the outer one.
                    const int quarter = c / 4;
                    std::vector<double> inner(static_cast<size_t>(quarter));
                    for (int q = 0; q < quarter; ++q) {
                        double acc = w.b1.flat(q);
                        for (int k = 0; k < 4; ++k) acc += point[k] * w.w1.at({k, q});
                        inner[static_cast<size_t>(q)] = acc * probs.at({v, u, d});
                    }
                    for (int j = 0; j < c; ++j) {
                        double acc = 0.0;
                        for (int q = 0; q < quarter; ++q)
                            acc += inner[static_cast<size_t>(q)] * w.w2.at({q, j});
                        want[static_cast<size_t>(j)] += acc;
                    }
                }
                for (int j = 0; j < c; ++j) {
                    want[static_cast<size_t>(j)] += w.b2.flat(j);
                    worst = std::max(worst,
                                     std::abs(e.at({v, u, j}) - want[static_cast<size_t>(j)]));
                }
            }
        CHECK(worst <= 1e-12);
    }
}

TEST_CASE("the embedding is linear in the distribution") {
    Rng rng(99);
    const CameraModel cam = make_pinhole_camera(4, 4, 6.0, 6.0, 1.5, 0.02);
    const FrustumGrid road = unproject(build_frustum_grid(4, 4, 5, {0.0, 50.0}), cam);
    const EmbedWeights w = random_embed_weights(12, rng);
    auto random_dist = [&] {
        Tensor probs({4, 4, 5});
        double* p = probs.mut64();
        for (std::int64_t cell = 0; cell < 16; ++cell) {
            double sum = 0.0;
            for (int d = 0; d < 5; ++d) sum += (p[cell * 5 + d] = rng.uniform(0.05, 1.0));
            for (int d = 0; d < 5; ++d) p[cell * 5 + d] /= sum;
        }
        return probs;
    };
    const Tensor d1 = random_dist(), d2 = random_dist();
    const double alpha = 0.3;
    Tensor blend = add(scale(d1, alpha), scale(d2, 1.0 - alpha));
    const Tensor left = image_pos_embed({blend}, road, w);
    const Tensor right =
        add(scale(image_pos_embed({d1}, road, w), alpha),
            scale(image_pos_embed({d2}, road, w), 1.0 - alpha));
    for (std::int64_t i = 0; i < left.size(); ++i)
        CHECK(std::abs(left.flat(i) - right.flat(i)) <= 1e-12);
}

TEST_CASE("embedding gradients through the depth head match finite differences") {
    Rng rng(515);
    const CameraModel cam = make_pinhole_camera(3, 4, 6.0, 8.0, 1.5, 0.02);
    const FrustumGrid road = unproject(build_frustum_grid(3, 4, 4, {0.0, 40.0}), cam);
    Tensor features = random_tensor({3, 4, 6}, rng);
    Tensor probe = random_tensor({3, 4, 8}, rng);
    Tensor w1v = random_tensor({4, 2}, rng), b1v = random_tensor({2}, rng);
    Tensor w2v = random_tensor({2, 8}, rng), b2v = random_tensor({8}, rng);

    Tape tape;
    tape.param("head_w", random_tensor({6, 4}, rng));
    tape.param("head_b", random_tensor({4}, rng));
    tape.param("w1", w1v);
    tape.param("b1", b1v);
    tape.param("w2", w2v);
    tape.param("b2", b2v);
    auto forward = [&]() {
        MlpLayer head{tape.param_value("head_w"), tape.param_value("head_b")};
        EmbedWeights w{tape.param_value("w1"), tape.param_value("b1"), tape.param_value("w2"),
                       tape.param_value("b2")};
        const Tensor e = image_pos_embed(predict_depth_dist(features, head), road, w);
        return sum_all(mul(e, probe));
    };
    tape.backward(forward());
    auto eager_loss = [&]() {
        NoGradGuard ng;
        return forward().flat(0);
    };
    for (const auto& name : tape.param_names()) {
        const auto stats = oracle::fd_check_param(tape, name, tape.grad(name), eager_loss);
        CAPTURE(name);
        CHECK(stats.max_rel_err <= 1e-5);
    }
}

TEST_CASE("sinusoidal embedding has the fixed-point origin and stays bounded") {
    const Tensor e = sincos_embed(5, 7, 16);
    CHECK(e.shape() == Shape{5, 7, 16});
    // Row-axis block at v=0: every sin channel 0, every cos channel 1.
    for (int i = 0; i < 4; ++i) {
        CHECK(e.at({0, 3, 2 * i}) == 0.0);
        CHECK(e.at({0, 3, 2 * i + 1}) == 1.0);
    }
    // Column-axis block at u=0 likewise.
    for (int i = 0; i < 4; ++i) {
        CHECK(e.at({2, 0, 8 + 2 * i}) == 0.0);
        CHECK(e.at({2, 0, 8 + 2 * i + 1}) == 1.0);
    }
    for (std::int64_t i = 0; i < e.size(); ++i) {
        CHECK(e.flat(i) <= 1.0);
        CHECK(e.flat(i) >= -1.0);
    }
    // Successive bands slow down: band i+1 never oscillates faster than band i.
    const Tensor tall = sincos_embed(64, 2, 16);
    auto crossings = [&](int band) {
        int n = 0;
        for (int v = 1; v < 64; ++v)
            if ((tall.at({v, 0, 2 * band}) >= 0) != (tall.at({v - 1, 0, 2 * band}) >= 0)) ++n;
        return n;
    };
    for (int band = 1; band < 4; ++band) CHECK(crossings(band) <= crossings(band - 1));

    CHECK_THROWS_AS(sincos_embed(2, 2, 10), ConfigError);
    CHECK_THROWS_AS(sincos_embed(0, 2, 8), ConfigError);
}

}  // TEST_SUITE
