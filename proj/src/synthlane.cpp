#include "lanedet/synthlane.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lanedet/errors.hpp"
#include "lanedet/random.hpp"

namespace lanedet {

namespace {

using nlohmann::json;

double poly_z(const std::vector<double>& coeffs, double y) {
    double acc = 0.0, pow_y = 1.0;
    for (double c : coeffs) {
        acc += c * pow_y;
        pow_y *= y;
    }
    return acc;
}

double lane_x(const SceneSpec& spec, int lane, double y) {
    return spec.lateral_offsets[static_cast<size_t>(lane)] +
           spec.curvatures[static_cast<size_t>(lane)] * y * y;
}

const json& need(const json& j, const char* key) {
    if (!j.is_object() || !j.contains(key))
        throw ParseError(std::string("scene json: missing \"") + key + "\"");
    return j.at(key);
}

// Squared distance from a pixel center to a projected segment.
double seg_dist2(double u, double v, const Point2& a, const Point2& b) {
    const double du = b.u - a.u, dv = b.v - a.v;
    const double len2 = du * du + dv * dv;
    double t = 0.0;
    if (len2 > 0.0) t = std::clamp(((u - a.u) * du + (v - a.v) * dv) / len2, 0.0, 1.0);
    const double eu = a.u + t * du - u, ev = a.v + t * dv - v;
    return eu * eu + ev * ev;
}

Tensor make_raster(const std::vector<Lane3D>& lanes, const SceneSpec& spec) {
    struct Seg {
        Point2 a, b;
    };
    std::vector<Seg> segs;
    for (const auto& lane : lanes) {
        const Lane2D proj = project_lane(lane, spec.camera);
        for (size_t k = 1; k < proj.points.size(); ++k)
            if (proj.visibility[k - 1] && proj.visibility[k])
                segs.push_back({proj.points[k - 1], proj.points[k]});
    }
    const int h = spec.image_h, w = spec.image_w;
    Tensor raster({h, w, 3});
    double* p = raster.mut64();
    const double row_scale = h > 1 ? 1.0 / (h - 1) : 0.0;
    const double col_scale = w > 1 ? 1.0 / (w - 1) : 0.0;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double best = std::numeric_limits<double>::infinity();
            for (const Seg& s : segs) best = std::min(best, seg_dist2(c, r, s.a, s.b));
            double* cell = p + (static_cast<std::int64_t>(r) * w + c) * 3;
            cell[0] = segs.empty() ? 0.0 : std::exp(-best / 8.0);
            cell[1] = r * row_scale;
            cell[2] = c * col_scale;
        }
    return raster;
}

std::vector<Lane3D> lanes_from_spec(const SceneSpec& spec) {
    std::vector<Lane3D> lanes;
    const double y0 = spec.bev.y_range.lo, y1 = spec.bev.y_range.hi;
    for (int i = 0; i < spec.lane_count; ++i) {
        std::vector<Point3> dense;
        for (double y = y0; y < y1; y += 0.25)
            dense.push_back({lane_x(spec, i, y), y, poly_z(spec.height_profile, y)});
        dense.push_back({lane_x(spec, i, y1), y1, poly_z(spec.height_profile, y1)});
        Lane3D lane;
        lane.points = resample_polyline(dense, 0.5);
        lane.class_id = spec.class_ids[static_cast<size_t>(i)];
        lanes.push_back(std::move(lane));
    }
    return lanes;
}

json spec_to_json_obj(const SceneSpec& spec) {
    json j;
    j["lane_count"] = spec.lane_count;
    j["lateral_offsets"] = spec.lateral_offsets;
    j["curvatures"] = spec.curvatures;
    j["height_profile"] = spec.height_profile;
    j["class_ids"] = spec.class_ids;
    j["image_h"] = spec.image_h;
    j["image_w"] = spec.image_w;
    j["bev"] = {{"rows", spec.bev.rows},
                {"cols", spec.bev.cols},
                {"x_range", {spec.bev.x_range.lo, spec.bev.x_range.hi}},
                {"y_range", {spec.bev.y_range.lo, spec.bev.y_range.hi}}};
    j["num_classes"] = spec.num_classes;
    j["max_queries"] = spec.max_queries;
    j["seed"] = spec.seed;
    return j;
}

SceneSpec spec_from_json_obj(const json& j, CameraModel camera) {
    SceneSpec spec;
    spec.camera = std::move(camera);
    try {
        spec.lane_count = need(j, "lane_count").get<int>();
        spec.lateral_offsets = need(j, "lateral_offsets").get<std::vector<double>>();
        spec.curvatures = need(j, "curvatures").get<std::vector<double>>();
        spec.height_profile = need(j, "height_profile").get<std::vector<double>>();
        spec.class_ids = need(j, "class_ids").get<std::vector<int>>();
        spec.image_h = need(j, "image_h").get<int>();
        spec.image_w = need(j, "image_w").get<int>();
        const json& bev = need(j, "bev");
        spec.bev.rows = need(bev, "rows").get<int>();
        spec.bev.cols = need(bev, "cols").get<int>();
        const auto xr = need(bev, "x_range").get<std::vector<double>>();
        const auto yr = need(bev, "y_range").get<std::vector<double>>();
        if (xr.size() != 2 || yr.size() != 2)
            throw ParseError("scene json: field \"bev\" ranges need two entries");
        spec.bev.x_range = {xr[0], xr[1]};
        spec.bev.y_range = {yr[0], yr[1]};
        spec.num_classes = need(j, "num_classes").get<int>();
        spec.max_queries = need(j, "max_queries").get<int>();
        spec.seed = need(j, "seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("scene json: bad spec field: ") + e.what());
    }
    return spec;
}

}  // namespace

CameraModel default_scene_camera(int image_h, int image_w) {
    return make_pinhole_camera(image_h, image_w, 0.45 * image_w, 0.85 * image_h, 1.5, 0.05);
}

void validate_scene_spec(const SceneSpec& spec) {
    if (spec.lane_count < 1 || spec.lane_count > 6)
        throw ConfigError("scene spec: lane_count must be in [1, 6]");
    const auto n = static_cast<size_t>(spec.lane_count);
    if (spec.lateral_offsets.size() != n || spec.curvatures.size() != n ||
        spec.class_ids.size() != n)
        throw ConfigError("scene spec: per-lane arrays must match lane_count");
    if (spec.num_classes < 1) throw ConfigError("scene spec: num_classes must be positive");
    for (int c : spec.class_ids)
        if (c < 0 || c >= spec.num_classes)
            throw ConfigError("scene spec: class id out of range");
    if (spec.max_queries < spec.lane_count)
        throw ConfigError("scene spec: max_queries must cover lane_count");
    if (spec.image_h < 2 || spec.image_w < 2)
        throw ConfigError("scene spec: feature raster needs at least 2x2 pixels");
    validate_layout(spec.bev);
    if (spec.height_profile.size() > 3)
        throw ConfigError("scene spec: height profile degree above 2");
    for (double c : spec.height_profile)
        if (!std::isfinite(c)) throw ConfigError("scene spec: height profile must be finite");

    const double y0 = spec.bev.y_range.lo, y1 = spec.bev.y_range.hi;
    for (int i = 0; i < spec.lane_count; ++i) {
        if (!std::isfinite(spec.lateral_offsets[static_cast<size_t>(i)]) ||
            !std::isfinite(spec.curvatures[static_cast<size_t>(i)]))
            throw ConfigError("scene spec: lane parameters must be finite");
        // x(y) is monotone in y^2 and y > 0, so the endpoints bound it.
        for (double y : {y0, y1}) {
            const double x = lane_x(spec, i, y);
            if (!(x > spec.bev.x_range.lo) || !(x < spec.bev.x_range.hi))
                throw ConfigError("scene spec: lane leaves the BEV x-range");
        }
    }
    std::vector<double> probe = {y0, y1};
    if (spec.height_profile.size() == 3 && spec.height_profile[2] != 0.0) {
        const double apex = -spec.height_profile[1] / (2.0 * spec.height_profile[2]);
        if (apex > y0 && apex < y1) probe.push_back(apex);
    }
    for (double y : probe)
        if (std::abs(poly_z(spec.height_profile, y)) > 5.0)
            throw ConfigError("scene spec: road height exceeds the 5 m band");
}

Scene generate_scene(const SceneSpec& spec) {
    validate_scene_spec(spec);
    Scene scene;
    scene.spec = spec;
    scene.gt_lanes = lanes_from_spec(spec);
    scene.raster = make_raster(scene.gt_lanes, spec);
    scene.targets =
        gt_targets(scene.gt_lanes, spec.camera, spec.bev, spec.num_classes, spec.max_queries);
    return scene;
}

std::string scene_to_json(const Scene& scene) {
    json j;
    j["spec"] = spec_to_json_obj(scene.spec);
    j["camera"] = json::parse(scene.spec.camera.to_json());
    json lanes = json::array();
    for (const auto& lane : scene.gt_lanes) {
        json pts = json::array();
        for (const auto& p : lane.points) pts.push_back({p.x, p.y, p.z});
        lanes.push_back({{"class", lane.class_id}, {"points", std::move(pts)}});
    }
    j["gt_lanes"] = std::move(lanes);
    return j.dump(2);
}

Scene scene_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("scene json: ") + e.what());
    }
    CameraModel camera = CameraModel::from_json(need(j, "camera").dump());
    SceneSpec spec = spec_from_json_obj(need(j, "spec"), std::move(camera));
    validate_scene_spec(spec);

    const json& lanes_j = need(j, "gt_lanes");
    if (!lanes_j.is_array() || static_cast<int>(lanes_j.size()) != spec.lane_count)
        throw ParseError("scene json: field \"gt_lanes\" must list lane_count lanes");
    std::vector<Lane3D> lanes;
    for (const auto& lj : lanes_j) {
        Lane3D lane;
        try {
            lane.class_id = need(lj, "class").get<int>();
            for (const auto& pj : need(lj, "points")) {
                const auto p = pj.get<std::vector<double>>();
                if (p.size() != 3)
                    throw ParseError("scene json: field \"gt_lanes\" points need [x, y, z]");
                lane.points.push_back({p[0], p[1], p[2]});
            }
        } catch (const json::exception& e) {
            throw ParseError(std::string("scene json: bad \"gt_lanes\" entry: ") + e.what());
        }
        try {
            validate_lane(lane);
        } catch (const GeometryError& e) {
            throw ParseError(std::string("scene json: field \"gt_lanes\": ") + e.what());
        }
        lanes.push_back(std::move(lane));
    }

    Scene scene;
    scene.spec = std::move(spec);
    scene.gt_lanes = std::move(lanes);
    scene.raster = make_raster(scene.gt_lanes, scene.spec);
    scene.targets = gt_targets(scene.gt_lanes, scene.spec.camera, scene.spec.bev,
                               scene.spec.num_classes, scene.spec.max_queries);
    return scene;
}

void save_scene(const Scene& scene, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_scene: cannot open " + path);
    out << scene_to_json(scene) << '\n';
    if (!out) throw IoError("save_scene: write failed for " + path);
}

Scene load_scene(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_scene: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return scene_from_json(buf.str());
}

std::vector<Scene> make_dataset(int count, const SceneSpec& base, std::uint64_t seed,
                                const std::string& dir) {
    if (count < 1) throw ConfigError("make_dataset: count must be at least 1");
    Rng rng(seed);
    std::vector<Scene> scenes;
    json manifest;
    manifest["count"] = count;
    manifest["seed"] = seed;
    manifest["specs"] = json::array();
    manifest["files"] = json::array();

    for (int s = 0; s < count; ++s) {
        SceneSpec spec = base;
        spec.seed = rng.bits();
        spec.lane_count = rng.uniform_int(1, std::min(6, base.max_queries));
        const double inner = base.bev.x_range.hi - 3.0;
        spec.lateral_offsets.clear();
        spec.curvatures.clear();
        spec.class_ids.clear();
        for (int i = 0; i < spec.lane_count; ++i) {
            const double slot =
                spec.lane_count == 1
                    ? 0.0
                    : -inner + 2.0 * inner * i / static_cast<double>(spec.lane_count - 1);
            spec.lateral_offsets.push_back(slot + rng.uniform(-0.4, 0.4));
            spec.curvatures.push_back(rng.uniform(-2e-4, 2e-4));
            spec.class_ids.push_back(rng.uniform_int(0, base.num_classes - 1));
        }
        if (spec.lane_count >= 2 && rng.uniform_int(0, 3) == 0) {
            // Forked pair: shared offset, curvatures pulling apart.
            const double mag = rng.uniform(1e-4, 2e-4);
            spec.lateral_offsets[1] = spec.lateral_offsets[0];
            spec.curvatures[0] = mag;
            spec.curvatures[1] = -mag;
        }
        switch (rng.uniform_int(0, 3)) {
            case 0: spec.height_profile = {}; break;
            case 1: spec.height_profile = {0.0, rng.uniform(0.005, 0.025)}; break;
            case 2: spec.height_profile = {0.0, rng.uniform(-0.025, -0.005)}; break;
            default:
                spec.height_profile = {0.0, rng.uniform(0.005, 0.02),
                                       rng.uniform(-2e-4, -0.5e-4)};
                break;
        }
        Scene scene = generate_scene(spec);
        manifest["specs"].push_back(spec_to_json_obj(spec));
        manifest["files"].push_back("scene_" + std::to_string(s) + ".json");
        scenes.push_back(std::move(scene));
    }

    if (!dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(dir, ec);
        if (ec) throw IoError("make_dataset: cannot create " + dir);
        for (int s = 0; s < count; ++s)
            save_scene(scenes[static_cast<size_t>(s)],
                       (std::filesystem::path(dir) / ("scene_" + std::to_string(s) + ".json"))
                           .string());
        std::ofstream out(std::filesystem::path(dir) / "manifest.json", std::ios::binary);
        if (!out) throw IoError("make_dataset: cannot write manifest in " + dir);
        out << manifest.dump(2) << '\n';
        if (!out) throw IoError("make_dataset: manifest write failed");
    }
    return scenes;
}

}  // namespace lanedet
