#pragma once

#include <array>
#include <string>
#include <vector>

#include "lanedet/errors.hpp"
#include "lanedet/tensor.hpp"

namespace lanedet {

struct Point3 {
    double x = 0.0, y = 0.0, z = 0.0;
};

struct Point2 {
    double u = 0.0, v = 0.0;
};

// Half-open numeric interval, lo < hi.
struct Range {
    double lo = 0.0, hi = 0.0;
    double width() const { return hi - lo; }
};

void validate_range(const Range& r, const char* what);

using Mat4 = std::array<double, 16>;

Mat4 mat4_identity();
Mat4 mat4_mul(const Mat4& a, const Mat4& b);
std::array<double, 4> mat4_apply(const Mat4& m, const std::array<double, 4>& v);
// Gauss-Jordan with partial pivoting; throws GeometryError when singular.
Mat4 mat4_inverse(const Mat4& m);

// One 4x4 projection matrix maps road space (x right, y forward, z up) to
// homogeneous pixel-depth space (u*d, v*d, d, 1); intrinsics and extrinsics
// are folded together. Inverse is cached at construction.
class CameraModel {
public:
    CameraModel(Mat4 k, int image_h, int image_w, double camera_height);

    const Mat4& k() const { return k_; }
    const Mat4& k_inverse() const { return k_inv_; }
    int image_h() const { return image_h_; }
    int image_w() const { return image_w_; }
    double camera_height() const { return camera_height_; }

    std::string to_json() const;
    static CameraModel from_json(const std::string& text);

private:
    Mat4 k_{};
    Mat4 k_inv_{};
    int image_h_ = 0;
    int image_w_ = 0;
    double camera_height_ = 0.0;
};

// Pinhole camera at (0, 0, height) pitched down by pitch_rad, principal point
// at the image center.
CameraModel make_pinhole_camera(int image_h, int image_w, double fx, double fy,
                                double camera_height, double pitch_rad);

struct Projected {
    double u = 0.0, v = 0.0, depth = 0.0;
    bool ok = false;  // false when behind the camera or at a degenerate depth
};

Projected project_point(const CameraModel& cam, const Point3& p);

// Ordered polyline in road space. y must be strictly increasing and at least
// two points must be visible.
struct Lane3D {
    std::vector<Point3> points;
    std::vector<bool> visibility;
    int class_id = 0;
};

void validate_lane(const Lane3D& lane);

struct Lane2D {
    std::vector<Point2> points;
    std::vector<bool> visibility;
    int class_id = 0;
};

// Projects every visible point; points behind the camera stay in place but
// are marked invisible. Throws GeometryError when nothing projects.
Lane2D project_lane(const Lane3D& lane, const CameraModel& cam);

// Back-projects pixels to the z=0 ground plane. Rays parallel to the ground
// or intersecting it at non-positive range are dropped and counted; throws
// GeometryError when every point drops.
Lane3D ipm_project(const Lane2D& lane, const CameraModel& cam, int* dropped = nullptr);

// Resamples a polyline at a fixed arc-length step, keeping the final point.
std::vector<Point3> resample_polyline(const std::vector<Point3>& points, double step);

// Midpoint bin centers: lo + (i + 0.5) * (hi - lo) / bins.
std::vector<double> bin_centers(int bins, const Range& range);

// Frustum of pixel-depth points (u*d, v*d, d, 1), one per feature pixel and
// depth bin; points tensor is (h, w, d, 4) with u = column, v = row.
struct FrustumGrid {
    int h = 0, w = 0, d = 0;
    Tensor points;
};

FrustumGrid build_frustum_grid(int feat_h, int feat_w, int depth_bins, const Range& depth_range);

// Applies K^-1 to every frustum point and renormalizes the homogeneous
// coordinate, yielding road-space positions.
FrustumGrid unproject(const FrustumGrid& grid, const CameraModel& cam);

// Metric footprint of the BEV grid. Row j sits at y0 + j*sy, column k at
// x0 + k*sx (corner convention, matching the voting decode).
struct BevLayout {
    int rows = 0, cols = 0;
    Range x_range{};
    Range y_range{};
    double sx() const { return x_range.width() / cols; }
    double sy() const { return y_range.width() / rows; }
    double cell_x(int k) const { return x_range.lo + k * sx(); }
    double cell_y(int j) const { return y_range.lo + j * sy(); }
};

void validate_layout(const BevLayout& layout);

// BEV lattice of road-space points (x, y, z, 1); points tensor is
// (rows, cols, zbins, 4) with midpoint height bins.
struct BevGrid {
    BevLayout layout;
    int zbins = 0;
    Tensor points;
};

BevGrid build_bev_grid(const BevLayout& layout, int zbins, const Range& z_range);

}  // namespace lanedet
