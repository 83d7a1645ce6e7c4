#pragma once

#include <string>
#include <vector>

#include "lanedet/geometry.hpp"
#include "lanedet/tensor.hpp"

namespace lanedet {

// Per-query 1x1 convolution kernels: image view L x C x 2, BEV L x C x 3.
struct DynamicKernels {
    Tensor k_a;
    Tensor k_b;
};

// Dense offsets to the nearest lane point: image view (du, dv) in feature
// pixels, BEV (dx, dy) in cell units with channel 2 the real height in meters.
struct OffsetMaps {
    Tensor r_a;  // L x H_a x W_a x 2
    Tensor r_b;  // L x H_b x W_b x 3
};

struct HeadWeights {
    std::vector<MlpLayer> kernel_a;  // C -> ... -> 2C
    std::vector<MlpLayer> kernel_b;  // C -> ... -> 3C
    std::vector<MlpLayer> score;     // C -> ... -> 2 + N
};

struct DetectedLane {
    int class_id = 0;
    double score = 0.0;
    // Metric (x, y, z) for BEV decoding; (u, v, 0) feature pixels for image view.
    std::vector<Point3> points;
};

struct LaneDetections {
    std::vector<DetectedLane> lanes;
};

std::string detections_to_json(const LaneDetections& d);
LaneDetections detections_from_json(const std::string& text);

// Kernels via two MLPs over the lane features; scores via a third with a
// 2-way softmax on the background/foreground pair and an N-way softmax on
// the class block, columns [bg, fg, class 0, ..., class N-1].
void gen_kernels_scores(const Tensor& lanes, const HeadWeights& w, DynamicKernels* kernels,
                        Tensor* scores);

// R_a[i, m, n, c] = sum_ch M[m, n, ch] K_a[i, ch, c]; likewise for the BEV map.
OffsetMaps conv_offsets(const Tensor& image_feat, const Tensor& bev_feat,
                        const DynamicKernels& kernels);

// Gaussian-weighted voting over predicted lane-point cells. Cells whose
// accumulated mass reaches w become lane points; queries below the
// foreground threshold t are dropped. Points emitted in row-major scan
// order, so y never decreases along a lane.
LaneDetections vote_bev(const Tensor& r_b, const Tensor& scores, const Range& x_range,
                        const Range& y_range, double t, double w);

// Same vote in the image plane: no height channel, pixel coordinates out.
LaneDetections vote_iv(const Tensor& r_a, const Tensor& scores, double t, double w);

struct GtTargets {
    Tensor r_a;  // M x H_a x W_a x 2
    Tensor r_b;  // M x H_b x W_b x 3
    Tensor s;    // M x (2 + N), foreground one-hot rows
    int skipped = 0;  // lanes dropped for having under two visible projections
};

// Dense supervision built from 0.5 m arc-length resampled lanes: each cell or
// pixel points at the nearest lane point; BEV channel 2 carries its height.
GtTargets gt_targets(const std::vector<Lane3D>& lanes, const CameraModel& cam,
                     const BevLayout& layout, int num_classes, int max_queries);

}  // namespace lanedet
