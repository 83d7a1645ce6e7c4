#pragma once

#include <cstdint>
#include <vector>

#include "lanedet/geometry.hpp"
#include "lanedet/tensor.hpp"

namespace lanedet {

// One attention site's parameter triple, each C x C. Applied on the right:
// theta(x) = x w_theta for row-vector features.
struct AttnSite {
    Tensor w_theta;
    Tensor w_phi;
    Tensor w_g;
};

// One decomposed layer: four independent sites, nothing shared.
struct DecomposedWeights {
    AttnSite lane_from_image;
    AttnSite lane_from_bev;
    AttnSite bev_from_lane;
    AttnSite image_from_lane;
};

// Baseline: self-attention over the image features, then dense cross attention.
struct OriginalWeights {
    AttnSite image_self;
    AttnSite bev_from_image;
};

struct AttnConfig {
    int n_a = 0;
    int n_b = 0;
    int lanes = 0;
    int channels = 0;
    int layer_count = 2;
    // Consulted by the ipm variant only; image_h * image_w must equal n_a.
    int image_h = 0;
    int image_w = 0;
    int window = 0;
};

enum class AttnVariant { Decomposed, Original, Ipm };

void validate_attn_config(const AttnConfig& cfg, AttnVariant variant);

// softmax(q w_theta (k w_phi)^T) (k w_g), rows normalized over the keys.
Tensor attend(const Tensor& queries, const Tensor& keys, const AttnSite& w);

// O = Q + attend(Q, I) + attend(Q, B). With joint_norm the two similarity
// blocks share one softmax over all N_a + N_b keys instead of one each.
Tensor lane_cross_attn(const Tensor& q, const Tensor& image, const Tensor& bev,
                       const DecomposedWeights& w, bool joint_norm = false);

// V = B + attend(B, O).
Tensor bev_from_lanes(const Tensor& bev, const Tensor& lanes, const AttnSite& w);

// M = I + attend(I, O).
Tensor image_update(const Tensor& image, const Tensor& lanes, const AttnSite& w);

struct LayerOutputs {
    Tensor lanes;  // O: L x C
    Tensor image;  // M: N_a x C
    Tensor bev;    // V: N_b x C
};

// One layer applies the three updates above in order; a stack feeds each
// layer's outputs to the next as (Q, I, B).
LayerOutputs decomposed_layer(const Tensor& q, const Tensor& image, const Tensor& bev,
                              const DecomposedWeights& w, bool joint_norm = false);
LayerOutputs decomposed_stack(Tensor q, Tensor image, Tensor bev,
                              const std::vector<DecomposedWeights>& layers,
                              bool joint_norm = false);

Tensor original_cross_attn(const Tensor& bev, const Tensor& image, const OriginalWeights& w);

// Feature pixel a BEV cell's flat-road grid point projects to, clamped to the
// image border.
void ipm_reference_pixel(const BevLayout& layout, int row, int col, const CameraModel& cam,
                         int* out_u, int* out_v);

// Each BEV cell attends to a fixed-size image patch around its reference
// pixel: min(window, W_a) x min(window, H_a) keys, shifted inward at borders
// so the key count never depends on the data. Eager; not differentiable.
Tensor ipm_attn(const Tensor& bev, const Tensor& image, const BevLayout& layout,
                const CameraModel& cam, const AttnSite& w, int window);

// Closed-form multiply-accumulate count for one layer of the variant,
// projections included. Matches the FlopCounter of a forward pass exactly.
std::int64_t count_flops(const AttnConfig& cfg, AttnVariant variant);

// Similarity+value MACs of the attention that carries information between
// the image and BEV views: the lane bridge (Eq.-1 style) for decomposed, the
// dense cross stage for original, the windowed stage for ipm. These are the
// terms the L < N_a*N_b/(N_a+N_b) efficiency bound speaks about.
std::int64_t count_view_core_flops(const AttnConfig& cfg, AttnVariant variant);

}  // namespace lanedet
