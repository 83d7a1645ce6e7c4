#pragma once

#include <string>
#include <vector>

#include "lanedet/geometry.hpp"

namespace lanedet {

// Evaluation knobs shared by both protocols. Distances in meters.
struct EvalConfig {
    double max_point_dist = 1.5;   // per-sample (x, z) distance gate
    double coverage_frac = 0.75;   // fraction of co-visible samples that must pass
    std::vector<double> y_samples; // empty selects every 1 m over [3, 103]
    double iou_thresh = 0.3;       // top-view strip overlap gate
    double cd_thresh = 0.3;        // unilateral chamfer gate
    double near_far_split = 40.0;  // y below is near, at or beyond is far
    double strip_half_width = 0.15;
    double raster_cell = 0.1;
    Range x_range{-10.0, 10.0};
    Range y_range{3.0, 103.0};
};

void validate_eval_config(const EvalConfig& cfg);

// cfg.y_samples, or the default 3, 4, ..., 103 when unset.
std::vector<double> eval_y_samples(const EvalConfig& cfg);

struct EvalReport {
    double f1 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double x_err_near = 0.0;
    double x_err_far = 0.0;
    double z_err_near = 0.0;
    double z_err_far = 0.0;
    double cd_err = 0.0;
    // Both protocols substitute an optimal-assignment matcher for benchmark
    // tooling this project does not ship; the note says so on every report.
    std::string note;
};

// Comment line carrying the note, a column-name row, one value row.
std::string report_csv(const EvalReport& r);
std::string report_json(const EvalReport& r);

// (x, z) read off the polyline at each requested y by linear interpolation.
// Entries outside the lane's y-span are masked rather than extrapolated.
struct ResampledLane {
    std::vector<double> x, z;
    std::vector<char> covered;
};

ResampledLane resample_at_y(const Lane3D& lane, const std::vector<double>& ys);

// Top-view overlap of the two lanes' strip masks: cells of the raster whose
// center lies within strip_half_width of the polyline. Degenerate lanes
// (under two points) rasterize to nothing.
double strip_iou(const Lane3D& a, const Lane3D& b, const EvalConfig& cfg);

// Mean distance from `from`'s 0.5 m-resampled points to the nearest of `to`'s.
// Directional on purpose; swapping the arguments changes the answer.
double unilateral_chamfer(const Lane3D& from, const Lane3D& to);

// A prediction matches a ground truth when at least coverage_frac of their
// co-visible y-samples sit within max_point_dist in the (x, z) plane. The
// one-to-one matching maximizes true positives; x/z errors average the
// passing samples of matched pairs, split at near_far_split.
EvalReport f_score_openlane(const std::vector<Lane3D>& preds, const std::vector<Lane3D>& gts,
                            const EvalConfig& cfg);

// Two-stage protocol: strip IoU above iou_thresh gates a unilateral chamfer
// test (prediction toward ground truth) below cd_thresh; matching again
// maximizes true positives and cd_err averages their chamfer distances.
EvalReport cd_once(const std::vector<Lane3D>& preds, const std::vector<Lane3D>& gts,
                   const EvalConfig& cfg);

}  // namespace lanedet
