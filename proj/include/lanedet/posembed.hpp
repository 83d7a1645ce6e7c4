#pragma once

#include "lanedet/geometry.hpp"
#include "lanedet/tensor.hpp"

namespace lanedet {

// Per-pixel depth probabilities, shape (H_a, W_a, D). Rows sum to 1.
struct DepthDistribution {
    Tensor probs;
};

// Per-cell height probabilities, shape (H_b, W_b, Z). Rows sum to 1.
struct HeightDistribution {
    Tensor probs;
};

// Two-stage linear lift of homogeneous 3D points into feature space.
// The same instance serves both the image and BEV embeddings.
struct EmbedWeights {
    Tensor w1;  // 4 x C/4
    Tensor b1;  // C/4
    Tensor w2;  // C/4 x C
    Tensor b2;  // C
};

void validate_embed_weights(const EmbedWeights& w);

// Single linear map C -> bins followed by a per-row softmax.
DepthDistribution predict_depth_dist(const Tensor& features, const MlpLayer& head);
HeightDistribution predict_height_dist(const Tensor& features, const MlpLayer& head);

// E_uv = [sum_d D_uvd (G'_uvd W1 + b1)] W2 + b2 over the unprojected frustum.
Tensor image_pos_embed(const DepthDistribution& dist, const FrustumGrid& grid,
                       const EmbedWeights& w);

// Same contraction with height bins replacing depth bins.
Tensor bev_pos_embed(const HeightDistribution& dist, const BevGrid& grid,
                     const EmbedWeights& w);

// Fixed sinusoidal embedding over a 2D grid: C/2 channels per axis,
// sin/cos interleaved over C/4 geometric frequencies.
Tensor sincos_embed(int h, int w, int channels);

}  // namespace lanedet
