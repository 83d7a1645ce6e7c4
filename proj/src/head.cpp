#include "lanedet/head.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "lanedet/errors.hpp"

namespace lanedet {

namespace {

using nlohmann::json;

void require_mlp(const std::vector<MlpLayer>& layers, int in_width, int out_width,
                 const char* name) {
    if (layers.empty()) throw ConfigError(std::string(name) + ": needs at least one layer");
    if (layers.front().w.rank() != 2 || layers.front().w.dim(0) != in_width)
        throw DimensionError(std::string(name) + ": input width must be " +
                             std::to_string(in_width));
    if (layers.back().w.dim(1) != out_width)
        throw DimensionError(std::string(name) + ": output width must be " +
                             std::to_string(out_width));
}

int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

struct VotePlan {
    int queries, rows, cols;
    const Tensor* offsets;
    const Tensor* scores;
    double t, w;
};

// Shared core of both voting directions; emit maps a passing cell to a point.
template <typename Emit>
LaneDetections run_votes(const VotePlan& plan, Emit emit) {
    if (plan.t <= 0.0 || plan.t >= 1.0) throw ConfigError("vote: threshold t must be in (0,1)");
    if (plan.w <= 0.0) throw ConfigError("vote: width w must be positive");
    const Tensor& s = *plan.scores;
    if (s.rank() != 2 || s.dim(0) != plan.queries || s.dim(1) < 3)
        throw DimensionError("vote: scores must be (queries, 2+N), got " + shape_str(s.shape()));
    const int classes = s.dim(1) - 2;

    LaneDetections out;
    std::vector<double> mass(static_cast<size_t>(plan.rows) * plan.cols);
    for (int i = 0; i < plan.queries; ++i) {
        if (s.at({i, 1}) < plan.t) continue;
        std::fill(mass.begin(), mass.end(), 0.0);
        for (int j = 0; j < plan.rows; ++j)
            for (int k = 0; k < plan.cols; ++k) {
                const double r0 = plan.offsets->at({i, j, k, 0});
                const double r1 = plan.offsets->at({i, j, k, 1});
                const int x = round_half_up(k + r0);
                const int y = round_half_up(j + r1);
                if (x < 0 || x >= plan.cols || y < 0 || y >= plan.rows) continue;
                mass[static_cast<size_t>(y) * plan.cols + x] +=
                    std::exp(-(r0 * r0 + r1 * r1) / (2.0 * plan.w * plan.w));
            }
        DetectedLane lane;
        lane.score = s.at({i, 1});
        int best = 0;
        for (int k = 1; k < classes; ++k)
            if (s.at({i, 2 + k}) > s.at({i, 2 + best})) best = k;
        lane.class_id = best;
        for (int j = 0; j < plan.rows; ++j)
            for (int k = 0; k < plan.cols; ++k)
                if (mass[static_cast<size_t>(j) * plan.cols + k] >= plan.w)
                    lane.points.push_back(emit(i, j, k));
        out.lanes.push_back(std::move(lane));
    }
    return out;
}

}  // namespace

void gen_kernels_scores(const Tensor& lanes, const HeadWeights& w, DynamicKernels* kernels,
                        Tensor* scores) {
    if (lanes.rank() != 2) throw DimensionError("kernels: lane features must be rank 2");
    const int l = lanes.dim(0), c = lanes.dim(1);
    require_mlp(w.kernel_a, c, 2 * c, "image kernel head");
    require_mlp(w.kernel_b, c, 3 * c, "bev kernel head");
    if (w.score.empty() || w.score.back().w.dim(1) < 3)
        throw DimensionError("score head: must emit at least background, foreground, one class");
    require_mlp(w.score, c, w.score.back().w.dim(1), "score head");
    const int classes = w.score.back().w.dim(1) - 2;

    kernels->k_a = reshape(mlp(lanes, w.kernel_a), {l, c, 2});
    kernels->k_b = reshape(mlp(lanes, w.kernel_b), {l, c, 3});
    Tensor logits = mlp(lanes, w.score);
    *scores = concat(softmax(slice(logits, 1, 0, 2), 1),
                     softmax(slice(logits, 1, 2, classes), 1), 1);
}

OffsetMaps conv_offsets(const Tensor& image_feat, const Tensor& bev_feat,
                        const DynamicKernels& kernels) {
    if (image_feat.rank() != 3 || bev_feat.rank() != 3)
        throw DimensionError("offsets: feature maps must be rank 3");
    const int c = image_feat.dim(2);
    if (bev_feat.dim(2) != c) throw DimensionError("offsets: feature widths differ");
    if (kernels.k_a.rank() != 3 || kernels.k_a.dim(1) != c || kernels.k_a.dim(2) != 2 ||
        kernels.k_b.rank() != 3 || kernels.k_b.dim(1) != c || kernels.k_b.dim(2) != 3)
        throw DimensionError("offsets: kernels must be (L, C, 2) and (L, C, 3)");
    const int l = kernels.k_a.dim(0);
    const int ha = image_feat.dim(0), wa = image_feat.dim(1);
    const int hb = bev_feat.dim(0), wb = bev_feat.dim(1);

    // One matmul per view: fold the query axis into the kernel columns.
    const auto apply = [&](const Tensor& feat, const Tensor& k, int rows, int cols, int ch) {
        Tensor folded = reshape(permute(k, {1, 0, 2}), {c, l * ch});
        Tensor flat = matmul(reshape(feat, {rows * cols, c}), folded);
        return reshape(permute(reshape(flat, {rows * cols, l, ch}), {1, 0, 2}),
                       {l, rows, cols, ch});
    };
    return {apply(image_feat, kernels.k_a, ha, wa, 2),
            apply(bev_feat, kernels.k_b, hb, wb, 3)};
}

LaneDetections vote_bev(const Tensor& r_b, const Tensor& scores, const Range& x_range,
                        const Range& y_range, double t, double w) {
    if (r_b.rank() != 4 || r_b.dim(3) != 3)
        throw DimensionError("vote: bev offsets must be (L, H_b, W_b, 3)");
    validate_range(x_range, "vote x range");
    validate_range(y_range, "vote y range");
    VotePlan plan{r_b.dim(0), r_b.dim(1), r_b.dim(2), &r_b, &scores, t, w};
    const double sx = x_range.width() / plan.cols;
    const double sy = y_range.width() / plan.rows;
    return run_votes(plan, [&](int i, int j, int k) {
        return Point3{k * sx + x_range.lo, j * sy + y_range.lo, r_b.at({i, j, k, 2})};
    });
}

LaneDetections vote_iv(const Tensor& r_a, const Tensor& scores, double t, double w) {
    if (r_a.rank() != 4 || r_a.dim(3) != 2)
        throw DimensionError("vote: image offsets must be (L, H_a, W_a, 2)");
    VotePlan plan{r_a.dim(0), r_a.dim(1), r_a.dim(2), &r_a, &scores, t, w};
    return run_votes(plan, [](int, int j, int k) {
        return Point3{static_cast<double>(k), static_cast<double>(j), 0.0};
    });
}

std::string detections_to_json(const LaneDetections& d) {
    json lanes = json::array();
    for (const auto& lane : d.lanes) {
        json points = json::array();
        for (const auto& p : lane.points) points.push_back({p.x, p.y, p.z});
        lanes.push_back({{"class", lane.class_id}, {"score", lane.score}, {"points", points}});
    }
    return json{{"lanes", lanes}}.dump();
}

LaneDetections detections_from_json(const std::string& text) {
    json parsed;
    try {
        parsed = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("detections: ") + e.what());
    }
    if (!parsed.contains("lanes")) throw ParseError("detections: missing \"lanes\"");
    LaneDetections out;
    for (const auto& lane : parsed["lanes"]) {
        for (const char* key : {"class", "score", "points"})
            if (!lane.contains(key))
                throw ParseError(std::string("detections: lane missing \"") + key + "\"");
        DetectedLane parsed_lane;
        parsed_lane.class_id = lane["class"].get<int>();
        parsed_lane.score = lane["score"].get<double>();
        for (const auto& p : lane["points"]) {
            if (!p.is_array() || p.size() != 3)
                throw ParseError("detections: \"points\" entries must be [x, y, z]");
            parsed_lane.points.push_back({p[0].get<double>(), p[1].get<double>(),
                                          p[2].get<double>()});
        }
        out.lanes.push_back(std::move(parsed_lane));
    }
    return out;
}

GtTargets gt_targets(const std::vector<Lane3D>& lanes, const CameraModel& cam,
                     const BevLayout& layout, int num_classes, int max_queries) {
    if (num_classes < 1) throw ConfigError("targets: need at least one lane class");
    validate_layout(layout);
    const int ha = cam.image_h(), wa = cam.image_w();

    struct Prepared {
        std::vector<Point3> road;      // 0.5 m resampled
        std::vector<Point2> pixels;    // visible projections of the resampled points
        int class_id;
    };
    std::vector<Prepared> kept;
    int skipped = 0;
    for (const auto& lane : lanes) {
        validate_lane(lane);
        Prepared prep;
        prep.class_id = lane.class_id;
        prep.road = resample_polyline(lane.points, 0.5);
        Lane3D dense;
        dense.points = prep.road;
        int visible = 0;
        try {
            const Lane2D px = project_lane(dense, cam);
            for (size_t i = 0; i < px.points.size(); ++i)
                if (px.visibility[i]) {
                    prep.pixels.push_back(px.points[i]);
                    ++visible;
                }
        } catch (const GeometryError&) {
            visible = 0;
        }
        if (visible < 2) {
            ++skipped;
            continue;
        }
        kept.push_back(std::move(prep));
    }
    const int m = static_cast<int>(kept.size());
    if (m == 0) throw ContractError("targets: no lane survived projection");
    if (m > max_queries)
        throw ContractError("targets: " + std::to_string(m) + " lanes exceed " +
                            std::to_string(max_queries) + " queries");
    for (const auto& prep : kept)
        if (prep.class_id < 0 || prep.class_id >= num_classes)
            throw ConfigError("targets: class id out of range");

    GtTargets out;
    out.skipped = skipped;
    out.r_a = Tensor({m, ha, wa, 2});
    out.r_b = Tensor({m, layout.rows, layout.cols, 3});
    out.s = Tensor({m, 2 + num_classes});
    double* ra = out.r_a.mut64();
    double* rb = out.r_b.mut64();
    double* s = out.s.mut64();

    for (int j = 0; j < m; ++j) {
        const Prepared& prep = kept[static_cast<size_t>(j)];
        s[j * (2 + num_classes) + 1] = 1.0;
        s[j * (2 + num_classes) + 2 + prep.class_id] = 1.0;

        for (int row = 0; row < layout.rows; ++row)
            for (int col = 0; col < layout.cols; ++col) {
                const double cx = layout.cell_x(col), cy = layout.cell_y(row);
                double best = std::numeric_limits<double>::max();
                Point3 nearest = prep.road.front();
                for (const auto& p : prep.road) {
                    const double d = (p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy);
                    if (d < best) {
                        best = d;
                        nearest = p;
                    }
                }
                const std::int64_t base =
                    ((static_cast<std::int64_t>(j) * layout.rows + row) * layout.cols + col) * 3;
                rb[base + 0] = (nearest.x - cx) / layout.sx();
                rb[base + 1] = (nearest.y - cy) / layout.sy();
                rb[base + 2] = nearest.z;
            }

        for (int row = 0; row < ha; ++row)
            for (int col = 0; col < wa; ++col) {
                double best = std::numeric_limits<double>::max();
                Point2 nearest = prep.pixels.front();
                for (const auto& p : prep.pixels) {
                    const double d = (p.u - col) * (p.u - col) + (p.v - row) * (p.v - row);
                    if (d < best) {
                        best = d;
                        nearest = p;
                    }
                }
                const std::int64_t base =
                    ((static_cast<std::int64_t>(j) * ha + row) * wa + col) * 2;
                ra[base + 0] = nearest.u - col;
                ra[base + 1] = nearest.v - row;
            }
    }
    return out;
}

}  // namespace lanedet
