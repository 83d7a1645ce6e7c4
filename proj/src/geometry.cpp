#include "lanedet/geometry.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace lanedet {

void validate_range(const Range& r, const char* what) {
    if (!(r.lo < r.hi))
        throw ConfigError(std::string(what) + ": range [" + std::to_string(r.lo) + ", " +
                          std::to_string(r.hi) + ") is not increasing");
}

// ----- 4x4 linear algebra -----------------------------------------------

Mat4 mat4_identity() {
    Mat4 m{};
    for (int i = 0; i < 4; ++i) m[static_cast<size_t>(i * 4 + i)] = 1.0;
    return m;
}

Mat4 mat4_mul(const Mat4& a, const Mat4& b) {
    Mat4 out{};
    for (int i = 0; i < 4; ++i)
        for (int k = 0; k < 4; ++k) {
            const double av = a[static_cast<size_t>(i * 4 + k)];
            for (int j = 0; j < 4; ++j)
                out[static_cast<size_t>(i * 4 + j)] += av * b[static_cast<size_t>(k * 4 + j)];
        }
    return out;
}

std::array<double, 4> mat4_apply(const Mat4& m, const std::array<double, 4>& v) {
    std::array<double, 4> out{};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            out[static_cast<size_t>(i)] += m[static_cast<size_t>(i * 4 + j)] * v[static_cast<size_t>(j)];
    return out;
}

Mat4 mat4_inverse(const Mat4& m) {
    // Augmented Gauss-Jordan with partial pivoting.
    double a[4][8];
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            a[i][j] = m[static_cast<size_t>(i * 4 + j)];
            a[i][j + 4] = i == j ? 1.0 : 0.0;
        }
    for (int col = 0; col < 4; ++col) {
        int pivot = col;
        for (int r = col + 1; r < 4; ++r)
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        if (std::abs(a[pivot][col]) < 1e-12)
            throw GeometryError("mat4_inverse: matrix is singular");
        if (pivot != col)
            for (int j = 0; j < 8; ++j) std::swap(a[pivot][j], a[col][j]);
        const double inv = 1.0 / a[col][col];
        for (int j = 0; j < 8; ++j) a[col][j] *= inv;
        for (int r = 0; r < 4; ++r) {
            if (r == col) continue;
            const double f = a[r][col];
            if (f == 0.0) continue;
            for (int j = 0; j < 8; ++j) a[r][j] -= f * a[col][j];
        }
    }
    Mat4 out{};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) out[static_cast<size_t>(i * 4 + j)] = a[i][j + 4];
    return out;
}

// ----- camera -----------------------------------------------------------

CameraModel::CameraModel(Mat4 k, int image_h, int image_w, double camera_height)
    : k_(k), image_h_(image_h), image_w_(image_w), camera_height_(camera_height) {
    if (image_h <= 0 || image_w <= 0)
        throw ConfigError("CameraModel: image_size must be positive");
    k_inv_ = mat4_inverse(k_);  // throws GeometryError when singular
}

std::string CameraModel::to_json() const {
    nlohmann::json j;
    j["K"] = k_;
    j["image_size"] = {image_h_, image_w_};
    j["camera_height"] = camera_height_;
    return j.dump();
}

static const nlohmann::json& require_key(const nlohmann::json& j, const char* key) {
    if (!j.contains(key))
        throw ParseError(std::string("camera: missing field \"") + key + "\"");
    return j.at(key);
}

CameraModel CameraModel::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("camera: invalid JSON: ") + e.what());
    }
    const auto& jk = require_key(j, "K");
    if (!jk.is_array() || jk.size() != 16)
        throw ParseError("camera: field \"K\" must hold 16 row-major numbers");
    Mat4 k{};
    for (size_t i = 0; i < 16; ++i) {
        if (!jk[i].is_number()) throw ParseError("camera: field \"K\" must hold 16 row-major numbers");
        k[i] = jk[i].get<double>();
    }
    const auto& size = require_key(j, "image_size");
    if (!size.is_array() || size.size() != 2)
        throw ParseError("camera: field \"image_size\" must be [height, width]");
    const auto& height = require_key(j, "camera_height");
    if (!height.is_number()) throw ParseError("camera: field \"camera_height\" must be a number");
    return CameraModel(k, size[0].get<int>(), size[1].get<int>(), height.get<double>());
}

CameraModel make_pinhole_camera(int image_h, int image_w, double fx, double fy,
                                double camera_height, double pitch_rad) {
    if (fx <= 0.0 || fy <= 0.0) throw ConfigError("make_pinhole_camera: focal lengths must be positive");
    const double c = std::cos(pitch_rad);
    const double s = std::sin(pitch_rad);
    const double cx = image_w / 2.0;
    const double cy = image_h / 2.0;
    const double h = camera_height;
    // Camera axes in road coordinates: right (1,0,0), image-down (0,-s,-c),
    // forward (0,c,-s); optical center at (0,0,h). Rows are arranged so a
    // road point maps to (u*d, v*d, d, 1) with d the forward depth.
    Mat4 k{};
    k[0] = fx;  k[1] = cx * c;       k[2] = -cx * s;       k[3] = cx * s * h;
    k[4] = 0;   k[5] = -fy * s + cy * c;  k[6] = -fy * c - cy * s;  k[7] = (fy * c + cy * s) * h;
    k[8] = 0;   k[9] = c;            k[10] = -s;           k[11] = s * h;
    k[12] = 0;  k[13] = 0;           k[14] = 0;            k[15] = 1;
    return CameraModel(k, image_h, image_w, camera_height);
}

Projected project_point(const CameraModel& cam, const Point3& p) {
    const auto q = mat4_apply(cam.k(), {p.x, p.y, p.z, 1.0});
    Projected out;
    if (std::abs(q[3]) < 1e-12) return out;
    const double d = q[2] / q[3];
    if (d <= 1e-9) return out;
    out.u = q[0] / q[3] / d;
    out.v = q[1] / q[3] / d;
    out.depth = d;
    out.ok = true;
    return out;
}

// ----- lanes ------------------------------------------------------------

void validate_lane(const Lane3D& lane) {
    if (lane.points.size() < 2)
        throw GeometryError("lane: needs at least 2 points");
    if (!lane.visibility.empty() && lane.visibility.size() != lane.points.size())
        throw GeometryError("lane: visibility length disagrees with points");
    for (size_t i = 1; i < lane.points.size(); ++i)
        if (!(lane.points[i].y > lane.points[i - 1].y))
            throw GeometryError("lane: y must be strictly increasing");
    int visible = 0;
    for (size_t i = 0; i < lane.points.size(); ++i)
        if (lane.visibility.empty() || lane.visibility[i]) ++visible;
    if (visible < 2) throw GeometryError("lane: needs at least 2 visible points");
}

Lane2D project_lane(const Lane3D& lane, const CameraModel& cam) {
    validate_lane(lane);
    Lane2D out;
    out.class_id = lane.class_id;
    out.points.resize(lane.points.size());
    out.visibility.assign(lane.points.size(), false);
    int visible = 0;
    for (size_t i = 0; i < lane.points.size(); ++i) {
        if (!lane.visibility.empty() && !lane.visibility[i]) continue;
        const Projected p = project_point(cam, lane.points[i]);
        if (!p.ok) continue;  // behind the camera: kept in place, invisible
        out.points[i] = {p.u, p.v};
        out.visibility[i] = true;
        ++visible;
    }
    if (visible == 0)
        throw GeometryError("project_lane: empty projection, all points behind the camera");
    return out;
}

Lane3D ipm_project(const Lane2D& lane, const CameraModel& cam, int* dropped) {
    const Mat4& inv = cam.k_inverse();
    Lane3D out;
    out.class_id = lane.class_id;
    int skipped = 0;
    for (size_t i = 0; i < lane.points.size(); ++i) {
        if (!lane.visibility.empty() && !lane.visibility[i]) {
            ++skipped;
            continue;
        }
        const Point2& px = lane.points[i];
        // The pixel ray is d * K^-1 (u, v, 1, 0) + K^-1 (0, 0, 0, 1); solve
        // for the depth where road z vanishes.
        const auto dir = mat4_apply(inv, {px.u, px.v, 1.0, 0.0});
        const auto origin = mat4_apply(inv, {0.0, 0.0, 0.0, 1.0});
        if (std::abs(dir[2]) < 1e-12) {  // horizon ray, never meets the ground
            ++skipped;
            continue;
        }
        const double d = -origin[2] / dir[2];
        const double w = d * dir[3] + origin[3];
        if (d <= 1e-9 || std::abs(w) < 1e-12) {
            ++skipped;
            continue;
        }
        const double x = (d * dir[0] + origin[0]) / w;
        const double y = (d * dir[1] + origin[1]) / w;
        if (y <= 0.0) {
            ++skipped;
            continue;
        }
        out.points.push_back({x, y, 0.0});
        out.visibility.push_back(true);
    }
    if (dropped) *dropped = skipped;
    if (out.points.empty())
        throw GeometryError("ipm_project: no ray intersects the ground at positive range");
    return out;
}

std::vector<Point3> resample_polyline(const std::vector<Point3>& points, double step) {
    if (points.size() < 2) throw ContractError("resample_polyline: needs at least 2 points");
    if (step <= 0.0) throw ContractError("resample_polyline: step must be positive");
    std::vector<double> cum(points.size(), 0.0);
    for (size_t i = 1; i < points.size(); ++i) {
        const double dx = points[i].x - points[i - 1].x;
        const double dy = points[i].y - points[i - 1].y;
        const double dz = points[i].z - points[i - 1].z;
        cum[i] = cum[i - 1] + std::sqrt(dx * dx + dy * dy + dz * dz);
    }
    const double total = cum.back();
    std::vector<Point3> out;
    size_t seg = 1;
    const std::int64_t samples = static_cast<std::int64_t>(std::floor(total / step + 1e-12));
    for (std::int64_t i = 0; i <= samples; ++i) {
        const double target = std::min(i * step, total);
        while (seg + 1 < points.size() && cum[seg] < target) ++seg;
        const double span = cum[seg] - cum[seg - 1];
        const double t = span > 0.0 ? (target - cum[seg - 1]) / span : 0.0;
        out.push_back({points[seg - 1].x + t * (points[seg].x - points[seg - 1].x),
                       points[seg - 1].y + t * (points[seg].y - points[seg - 1].y),
                       points[seg - 1].z + t * (points[seg].z - points[seg - 1].z)});
    }
    if (total - samples * step > 1e-9) out.push_back(points.back());
    return out;
}

std::vector<double> bin_centers(int bins, const Range& range) {
    if (bins <= 0) throw ConfigError("bin_centers: bin count must be positive");
    validate_range(range, "bin_centers");
    const double step = range.width() / bins;
    std::vector<double> out(static_cast<size_t>(bins));
    for (int i = 0; i < bins; ++i) out[static_cast<size_t>(i)] = range.lo + (i + 0.5) * step;
    return out;
}

// ----- grids ------------------------------------------------------------

FrustumGrid build_frustum_grid(int feat_h, int feat_w, int depth_bins, const Range& depth_range) {
    if (feat_h <= 0 || feat_w <= 0) throw ConfigError("build_frustum_grid: feature extents must be positive");
    const auto depths = bin_centers(depth_bins, depth_range);
    FrustumGrid grid;
    grid.h = feat_h;
    grid.w = feat_w;
    grid.d = depth_bins;
    Tensor pts(Shape{feat_h, feat_w, depth_bins, 4});
    double* p = pts.mut64();
    std::int64_t at = 0;
    for (int v = 0; v < feat_h; ++v)
        for (int u = 0; u < feat_w; ++u)
            for (int k = 0; k < depth_bins; ++k) {
                const double d = depths[static_cast<size_t>(k)];
                p[at++] = u * d;
                p[at++] = v * d;
                p[at++] = d;
                p[at++] = 1.0;
            }
    grid.points = pts;
    return grid;
}

FrustumGrid unproject(const FrustumGrid& grid, const CameraModel& cam) {
    const Mat4& inv = cam.k_inverse();
    FrustumGrid out;
    out.h = grid.h;
    out.w = grid.w;
    out.d = grid.d;
    Tensor pts(grid.points.shape());
    const double* src = grid.points.data64();
    double* dst = pts.mut64();
    const std::int64_t cells = grid.points.size() / 4;
    for (std::int64_t i = 0; i < cells; ++i) {
        const auto q = mat4_apply(inv, {src[i * 4], src[i * 4 + 1], src[i * 4 + 2], src[i * 4 + 3]});
        if (std::abs(q[3]) < 1e-12)
            throw GeometryError("unproject: homogeneous coordinate vanished");
        dst[i * 4] = q[0] / q[3];
        dst[i * 4 + 1] = q[1] / q[3];
        dst[i * 4 + 2] = q[2] / q[3];
        dst[i * 4 + 3] = 1.0;
    }
    out.points = pts;
    return out;
}

void validate_layout(const BevLayout& layout) {
    if (layout.rows <= 0 || layout.cols <= 0)
        throw ConfigError("bev layout: extents must be positive");
    validate_range(layout.x_range, "bev layout x");
    validate_range(layout.y_range, "bev layout y");
}

BevGrid build_bev_grid(const BevLayout& layout, int zbins, const Range& z_range) {
    validate_layout(layout);
    const auto heights = bin_centers(zbins, z_range);
    BevGrid grid;
    grid.layout = layout;
    grid.zbins = zbins;
    Tensor pts(Shape{layout.rows, layout.cols, zbins, 4});
    double* p = pts.mut64();
    std::int64_t at = 0;
    for (int j = 0; j < layout.rows; ++j)
        for (int k = 0; k < layout.cols; ++k)
            for (int z = 0; z < zbins; ++z) {
                p[at++] = layout.cell_x(k);
                p[at++] = layout.cell_y(j);
                p[at++] = heights[static_cast<size_t>(z)];
                p[at++] = 1.0;
            }
    grid.points = pts;
    return grid;
}

}  // namespace lanedet
