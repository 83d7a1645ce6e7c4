#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lanedet/geometry.hpp"
#include "lanedet/head.hpp"
#include "lanedet/tensor.hpp"

namespace lanedet {

// Pinhole looking down the road from 1.5 m up with a slight downward pitch,
// framing y in roughly [3, 103] and x within a two-digit lateral band.
CameraModel default_scene_camera(int image_h, int image_w);

// Full recipe for one scene. Lane i follows x(y) = lateral_offsets[i] +
// curvatures[i] * y^2 with a shared road height z(y) = sum_k height_profile[k]
// * y^k (degree <= 2), swept over the BEV y-range. Everything needed to
// rebuild the raster and supervision travels with the spec.
struct SceneSpec {
    int lane_count = 1;
    std::vector<double> lateral_offsets = {0.0};  // meters, one per lane
    std::vector<double> curvatures = {0.0};       // 1/m, one per lane
    std::vector<double> height_profile;           // constant, slope, quadratic
    std::vector<int> class_ids = {0};
    int image_h = 12, image_w = 16;  // feature raster, pixels
    BevLayout bev{50, 32, {-8.0, 8.0}, {3.0, 103.0}};
    int num_classes = 2;
    int max_queries = 12;
    CameraModel camera = default_scene_camera(12, 16);
    std::uint64_t seed = 0;
};

// Checks lane-array sizes, class ranges, that every lane stays strictly
// inside the BEV x-range, and that |z| <= 5 m over the swept span.
void validate_scene_spec(const SceneSpec& spec);

struct Scene {
    SceneSpec spec;
    std::vector<Lane3D> gt_lanes;
    // image_h x image_w x 3: lane-proximity heatmap exp(-d^2 / (2 * 2^2))
    // with d in feature pixels, then normalized row and column indices.
    Tensor raster;
    GtTargets targets;
};

// Deterministic: lanes sampled at 0.5 m arc length, projected, rasterized.
Scene generate_scene(const SceneSpec& spec);

// Scene files hold spec, camera, and gt_lanes; raster and targets are
// regenerated on load so they can never go stale.
std::string scene_to_json(const Scene& scene);
Scene scene_from_json(const std::string& text);
void save_scene(const Scene& scene, const std::string& path);
Scene load_scene(const std::string& path);

// Draws `count` scenes around the base spec's camera and grids: lane counts,
// lateral placement, per-lane curvature (occasionally a forked pair sharing
// an offset), and road height modes. When dir is non-empty, writes
// scene_<i>.json files plus a manifest.json recording every spec.
std::vector<Scene> make_dataset(int count, const SceneSpec& base, std::uint64_t seed,
                                const std::string& dir = "");

}  // namespace lanedet
