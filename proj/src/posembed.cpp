#include "lanedet/posembed.hpp"

#include <cmath>

#include "lanedet/errors.hpp"

namespace lanedet {

void validate_embed_weights(const EmbedWeights& w) {
    if (w.w1.rank() != 2 || w.w1.dim(0) != 4)
        throw DimensionError("embed weights: W1 must be 4 x C/4, got " + shape_str(w.w1.shape()));
    const int quarter = w.w1.dim(1);
    if (w.b1.shape() != Shape{quarter})
        throw DimensionError("embed weights: b1 must match W1 columns");
    if (w.w2.rank() != 2 || w.w2.dim(0) != quarter)
        throw DimensionError("embed weights: W2 rows must match W1 columns");
    const int c = w.w2.dim(1);
    if (c != 4 * quarter) throw ConfigError("embed weights: channel width must be 4x the inner width");
    if (w.b2.shape() != Shape{c}) throw DimensionError("embed weights: b2 must match W2 columns");
}

namespace {

Tensor linear_softmax_rows(const Tensor& features, const MlpLayer& head, const char* site) {
    if (features.rank() != 3)
        throw DimensionError(std::string(site) + ": features must be rank 3, got " +
                             shape_str(features.shape()));
    const int h = features.dim(0), w = features.dim(1), c = features.dim(2);
    if (head.w.rank() != 2 || head.w.dim(0) != c)
        throw DimensionError(std::string(site) + ": head expects width " +
                             std::to_string(head.w.rank() == 2 ? head.w.dim(0) : -1) +
                             ", features have " + std::to_string(c));
    const int bins = head.w.dim(1);
    Tensor flat = reshape(features, {h * w, c});
    Tensor logits = add(matmul(flat, head.w), head.b);
    return reshape(softmax(logits, 1), {h, w, bins});
}

// sum_bins dist * (points W1 + b1), then the outer lift. points is (h, w, bins, 4).
Tensor lifted_expectation(const Tensor& dist, const Tensor& points, const EmbedWeights& w,
                          const char* site) {
    validate_embed_weights(w);
    if (dist.rank() != 3 || points.rank() != 4 || points.dim(3) != 4)
        throw DimensionError(std::string(site) + ": distribution must be rank 3 and grid (..., 4)");
    const int h = dist.dim(0), cols = dist.dim(1), bins = dist.dim(2);
    if (points.dim(0) != h || points.dim(1) != cols || points.dim(2) != bins)
        throw DimensionError(std::string(site) + ": distribution " + shape_str(dist.shape()) +
                             " does not cover grid " + shape_str(points.shape()));
    const int quarter = w.w1.dim(1);
    const int c = w.w2.dim(1);
    Tensor lifted = add(matmul(reshape(points, {h * cols * bins, 4}), w.w1), w.b1);
    Tensor weighted = mul(reshape(lifted, {h * cols, bins, quarter}),
                          reshape(dist, {h * cols, bins, 1}));
    Tensor expected = sum(weighted, 1, false);
    return reshape(add(matmul(expected, w.w2), w.b2), {h, cols, c});
}

}  // namespace

DepthDistribution predict_depth_dist(const Tensor& features, const MlpLayer& head) {
    return {linear_softmax_rows(features, head, "depth head")};
}

HeightDistribution predict_height_dist(const Tensor& features, const MlpLayer& head) {
    return {linear_softmax_rows(features, head, "height head")};
}

Tensor image_pos_embed(const DepthDistribution& dist, const FrustumGrid& grid,
                       const EmbedWeights& w) {
    return lifted_expectation(dist.probs, grid.points, w, "image pos embed");
}

Tensor bev_pos_embed(const HeightDistribution& dist, const BevGrid& grid, const EmbedWeights& w) {
    return lifted_expectation(dist.probs, grid.points, w, "bev pos embed");
}

Tensor sincos_embed(int h, int w, int channels) {
    if (h <= 0 || w <= 0) throw ConfigError("sincos embed: grid extents must be positive");
    if (channels <= 0 || channels % 4 != 0)
        throw ConfigError("sincos embed: channel count must be a positive multiple of 4, got " +
                          std::to_string(channels));
    const int bands = channels / 4;
    Tensor out({h, w, channels});
    double* dst = out.mut64();
    for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
            double* cell = dst + (static_cast<std::int64_t>(v) * w + u) * channels;
            for (int i = 0; i < bands; ++i) {
                const double omega = std::pow(10000.0, -static_cast<double>(i) / bands);
                cell[2 * i] = std::sin(v * omega);
                cell[2 * i + 1] = std::cos(v * omega);
                cell[channels / 2 + 2 * i] = std::sin(u * omega);
                cell[channels / 2 + 2 * i + 1] = std::cos(u * omega);
            }
        }
    return out;
}

}  // namespace lanedet
