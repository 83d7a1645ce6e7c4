#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lanedet/errors.hpp"
#include "lanedet/geometry.hpp"
#include "lanedet/head.hpp"
#include "lanedet/synthlane.hpp"

using namespace lanedet;

namespace {

// Two curved lanes, one uphill road: exercises every serialized field.
SceneSpec curved_pair() {
    SceneSpec spec;
    spec.lane_count = 2;
    spec.lateral_offsets = {-3.0, 3.0};
    spec.curvatures = {1e-4, -1e-4};
    spec.class_ids = {0, 1};
    spec.height_profile = {0.0, 0.01};
    spec.seed = 99;
    return spec;
}

template <typename E, typename F>
std::string thrown_message(F&& fn) {
    try {
        fn();
    } catch (const E& e) {
        return e.what();
    }
    return "";
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    const std::int64_t n = shape_numel(a.shape());
    for (std::int64_t i = 0; i < n; ++i)
        if (a.flat(i) != b.flat(i)) return false;
    return true;
}

double nearest_gt_dist(const Point3& p, const std::vector<Lane3D>& lanes) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& lane : lanes)
        for (const auto& g : lane.points)
            best = std::min(best, std::hypot(p.x - g.x, p.y - g.y));
    return best;
}

}  // namespace

TEST_SUITE("synthlane") {

TEST_CASE("default camera frames the road band") {
    const CameraModel cam = default_scene_camera(12, 16);
    const Projected near = project_point(cam, {0.0, 3.0, 0.0});
    const Projected far = project_point(cam, {0.0, 103.0, 0.0});
    REQUIRE(near.ok);
    REQUIRE(far.ok);
    CHECK(near.u == 8.0);
    CHECK(far.u == 8.0);
    CHECK(near.v >= 0.0);
    CHECK(near.v < 12.0);
    CHECK(far.v >= 0.0);
    CHECK(far.v < 12.0);
    CHECK(far.v < near.v);  // farther road sits higher in the image
}

TEST_CASE("generated lanes follow the spec recipe") {
    const SceneSpec spec = curved_pair();
    const Scene scene = generate_scene(spec);
    REQUIRE(scene.gt_lanes.size() == 2);
    for (int i = 0; i < 2; ++i) {
        const Lane3D& lane = scene.gt_lanes[static_cast<size_t>(i)];
        CHECK(lane.class_id == spec.class_ids[static_cast<size_t>(i)]);
        REQUIRE(lane.points.size() >= 2);
        CHECK(lane.points.front().y == 3.0);
        CHECK(lane.points.back().y == 103.0);
        for (size_t k = 0; k < lane.points.size(); ++k) {
            const Point3& p = lane.points[k];
            const double want_x = spec.lateral_offsets[static_cast<size_t>(i)] +
                                  spec.curvatures[static_cast<size_t>(i)] * p.y * p.y;
            // 0.25 m sweep then chords: quadratic sag stays under c * h^2 / 8.
            CHECK(std::abs(p.x - want_x) <= 1e-5);
            CHECK(std::abs(p.z - 0.01 * p.y) <= 1e-9);
            if (k > 0) CHECK(p.y > lane.points[k - 1].y);
        }
        for (size_t k = 1; k + 1 < lane.points.size(); ++k) {
            const Point3& a = lane.points[k - 1];
            const Point3& b = lane.points[k];
            const double chord =
                std::sqrt((b.x - a.x) * (b.x - a.x) + (b.y - a.y) * (b.y - a.y) +
                          (b.z - a.z) * (b.z - a.z));
            CHECK(chord <= 0.5 + 1e-9);
            CHECK(chord >= 0.49);
        }
    }
}

TEST_CASE("raster matches a direct rasterization") {
    SceneSpec spec;
    spec.lateral_offsets = {2.0};
    const Scene scene = generate_scene(spec);
    REQUIRE(scene.raster.shape() == Shape{12, 16, 3});

    struct Seg {
        Point2 a, b;
    };
    std::vector<Seg> segs;
    for (const auto& lane : scene.gt_lanes) {
        const Lane2D proj = project_lane(lane, spec.camera);
        for (size_t k = 1; k < proj.points.size(); ++k)
            if (proj.visibility[k - 1] && proj.visibility[k])
                segs.push_back({proj.points[k - 1], proj.points[k]});
    }
    REQUIRE(!segs.empty());

    const double row_scale = 1.0 / 11.0;
    const double col_scale = 1.0 / 15.0;
    double max_heat = 0.0;
    for (int r = 0; r < 12; ++r)
        for (int c = 0; c < 16; ++c) {
            double best = std::numeric_limits<double>::infinity();
            for (const Seg& s : segs) {
                const double du = s.b.u - s.a.u, dv = s.b.v - s.a.v;
                const double len2 = du * du + dv * dv;
                double t = 0.0;
                if (len2 > 0.0)
                    t = std::clamp(((c - s.a.u) * du + (r - s.a.v) * dv) / len2, 0.0, 1.0);
                const double eu = s.a.u + t * du - c, ev = s.a.v + t * dv - r;
                best = std::min(best, eu * eu + ev * ev);
            }
            const std::int64_t at = (static_cast<std::int64_t>(r) * 16 + c) * 3;
            const double heat = scene.raster.flat(at);
            CHECK(std::abs(heat - std::exp(-best / 8.0)) <= 1e-12);
            CHECK(heat >= 0.0);
            CHECK(heat <= 1.0);
            CHECK(scene.raster.flat(at + 1) == r * row_scale);
            CHECK(scene.raster.flat(at + 2) == c * col_scale);
            max_heat = std::max(max_heat, heat);
        }
    CHECK(max_heat >= 0.9);
}

TEST_CASE("same spec generates byte-identical scenes") {
    const SceneSpec spec = curved_pair();
    const Scene a = generate_scene(spec);
    const Scene b = generate_scene(spec);
    CHECK(scene_to_json(a) == scene_to_json(b));
    CHECK(tensors_equal(a.raster, b.raster));
    CHECK(tensors_equal(a.targets.r_a, b.targets.r_a));
    CHECK(tensors_equal(a.targets.r_b, b.targets.r_b));
    CHECK(tensors_equal(a.targets.s, b.targets.s));
}

TEST_CASE("height profile shapes the road surface") {
    SceneSpec spec;
    spec.height_profile = {0.0, 0.02};
    const Scene scene = generate_scene(spec);
    const Lane3D& lane = scene.gt_lanes[0];
    for (const auto& p : lane.points) CHECK(std::abs(p.z - 0.02 * p.y) <= 1e-12);
    CHECK(std::abs(lane.points.front().z - 0.06) <= 1e-12);
    CHECK(std::abs(lane.points.back().z - 2.06) <= 1e-12);
}

TEST_CASE("json round trip is exact and idempotent") {
    const Scene scene = generate_scene(curved_pair());
    const std::string once = scene_to_json(scene);
    const Scene back = scene_from_json(once);
    CHECK(scene_to_json(back) == once);

    CHECK(back.spec.lane_count == scene.spec.lane_count);
    CHECK(back.spec.lateral_offsets == scene.spec.lateral_offsets);
    CHECK(back.spec.curvatures == scene.spec.curvatures);
    CHECK(back.spec.height_profile == scene.spec.height_profile);
    CHECK(back.spec.class_ids == scene.spec.class_ids);
    CHECK(back.spec.image_h == scene.spec.image_h);
    CHECK(back.spec.image_w == scene.spec.image_w);
    CHECK(back.spec.num_classes == scene.spec.num_classes);
    CHECK(back.spec.max_queries == scene.spec.max_queries);
    CHECK(back.spec.seed == scene.spec.seed);
    CHECK(back.spec.bev.rows == scene.spec.bev.rows);
    CHECK(back.spec.bev.cols == scene.spec.bev.cols);
    CHECK(back.spec.bev.x_range.lo == scene.spec.bev.x_range.lo);
    CHECK(back.spec.bev.x_range.hi == scene.spec.bev.x_range.hi);
    CHECK(back.spec.bev.y_range.lo == scene.spec.bev.y_range.lo);
    CHECK(back.spec.bev.y_range.hi == scene.spec.bev.y_range.hi);

    REQUIRE(back.gt_lanes.size() == scene.gt_lanes.size());
    for (size_t i = 0; i < scene.gt_lanes.size(); ++i) {
        CHECK(back.gt_lanes[i].class_id == scene.gt_lanes[i].class_id);
        REQUIRE(back.gt_lanes[i].points.size() == scene.gt_lanes[i].points.size());
        for (size_t k = 0; k < scene.gt_lanes[i].points.size(); ++k) {
            CHECK(back.gt_lanes[i].points[k].x == scene.gt_lanes[i].points[k].x);
            CHECK(back.gt_lanes[i].points[k].y == scene.gt_lanes[i].points[k].y);
            CHECK(back.gt_lanes[i].points[k].z == scene.gt_lanes[i].points[k].z);
        }
    }
    CHECK(tensors_equal(back.raster, scene.raster));
    CHECK(tensors_equal(back.targets.r_a, scene.targets.r_a));
    CHECK(tensors_equal(back.targets.r_b, scene.targets.r_b));
    CHECK(tensors_equal(back.targets.s, scene.targets.s));
    CHECK(back.targets.skipped == scene.targets.skipped);
}

TEST_CASE("scene files round trip through disk") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "lanedet_synthlane_scene";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const Scene scene = generate_scene(curved_pair());
    const std::string path = (dir / "scene.json").string();
    save_scene(scene, path);
    const Scene back = load_scene(path);
    CHECK(scene_to_json(back) == scene_to_json(scene));
    fs::remove_all(dir);

    CHECK_THROWS_AS(load_scene((dir / "missing.json").string()), IoError);
    CHECK_THROWS_AS(save_scene(scene, (dir / "nested" / "out.json").string()), IoError);
}

TEST_CASE("loader names the missing or broken field") {
    using nlohmann::json;
    const std::string text = scene_to_json(generate_scene(curved_pair()));
    const json base = json::parse(text);

    auto load_without = [&](const char* key) {
        json j = base;
        j.erase(key);
        return thrown_message<ParseError>([&] { scene_from_json(j.dump()); });
    };
    CHECK(load_without("gt_lanes").find("gt_lanes") != std::string::npos);
    CHECK(load_without("spec").find("spec") != std::string::npos);
    CHECK(load_without("camera").find("camera") != std::string::npos);

    {
        json j = base;
        j["spec"].erase("curvatures");
        const auto msg = thrown_message<ParseError>([&] { scene_from_json(j.dump()); });
        CHECK(msg.find("curvatures") != std::string::npos);
    }
    {
        json j = base;
        j["spec"]["bev"]["x_range"] = {-8.0, 8.0, 1.0};
        const auto msg = thrown_message<ParseError>([&] { scene_from_json(j.dump()); });
        CHECK(msg.find("two entries") != std::string::npos);
    }
    CHECK(!thrown_message<ParseError>([&] { scene_from_json("not json"); }).empty());
    {
        json j = base;
        j["gt_lanes"][0].erase("class");
        const auto msg = thrown_message<ParseError>([&] { scene_from_json(j.dump()); });
        CHECK(msg.find("class") != std::string::npos);
    }
    {
        json j = base;
        j["gt_lanes"][0]["points"][0] = {1.0, 2.0};
        const auto msg = thrown_message<ParseError>([&] { scene_from_json(j.dump()); });
        CHECK(msg.find("points") != std::string::npos);
    }
    {
        json j = base;
        j["gt_lanes"].erase(1);
        const auto msg = thrown_message<ParseError>([&] { scene_from_json(j.dump()); });
        CHECK(msg.find("lane_count") != std::string::npos);
    }
    {
        // Stored lane with decreasing y: rejected at parse time, not later.
        json j = base;
        std::swap(j["gt_lanes"][0]["points"][0], j["gt_lanes"][0]["points"][1]);
        const auto msg = thrown_message<ParseError>([&] { scene_from_json(j.dump()); });
        CHECK(msg.find("gt_lanes") != std::string::npos);
    }
}

TEST_CASE("stored lanes are authoritative on load") {
    using nlohmann::json;
    const Scene scene = generate_scene(curved_pair());
    json j = json::parse(scene_to_json(scene));
    for (auto& pt : j["gt_lanes"][0]["points"]) pt[0] = pt[0].get<double>() + 0.5;
    const Scene shifted = scene_from_json(j.dump());

    REQUIRE(shifted.gt_lanes[0].points.size() == scene.gt_lanes[0].points.size());
    for (size_t k = 0; k < scene.gt_lanes[0].points.size(); ++k)
        CHECK(shifted.gt_lanes[0].points[k].x == scene.gt_lanes[0].points[k].x + 0.5);
    CHECK(!tensors_equal(shifted.raster, scene.raster));
    CHECK(!tensors_equal(shifted.targets.r_b, scene.targets.r_b));
    CHECK(shifted.spec.lateral_offsets == scene.spec.lateral_offsets);
}

TEST_CASE("spec validation rejects bad recipes") {
    CHECK_NOTHROW(validate_scene_spec(SceneSpec{}));
    CHECK_NOTHROW(validate_scene_spec(curved_pair()));

    auto reject = [](auto&& tweak) {
        SceneSpec spec;
        tweak(spec);
        CHECK_THROWS_AS(validate_scene_spec(spec), ConfigError);
    };
    reject([](SceneSpec& s) { s.lane_count = 0; });
    reject([](SceneSpec& s) { s.lane_count = 7; });
    reject([](SceneSpec& s) { s.lane_count = 2; });  // per-lane arrays still size 1
    reject([](SceneSpec& s) { s.class_ids = {2}; });
    reject([](SceneSpec& s) { s.class_ids = {-1}; });
    reject([](SceneSpec& s) { s.num_classes = 0; });
    reject([](SceneSpec& s) { s.max_queries = 0; });
    reject([](SceneSpec& s) { s.image_h = 1; });
    reject([](SceneSpec& s) { s.image_w = 1; });
    reject([](SceneSpec& s) { s.height_profile = {0.0, 0.0, 0.0, 0.0}; });
    reject([](SceneSpec& s) { s.height_profile = {std::nan("")}; });
    reject([](SceneSpec& s) { s.lateral_offsets = {std::nan("")}; });
    reject([](SceneSpec& s) { s.lateral_offsets = {8.0}; });  // must be strictly inside
    reject([](SceneSpec& s) {
        s.lateral_offsets = {5.0};
        s.curvatures = {4e-4};  // drifts past x = 8 by y = 103
    });
    reject([](SceneSpec& s) { s.height_profile = {0.0, 0.06}; });  // z(103) > 5
    reject([](SceneSpec& s) {
        // Endpoints stay under 5 m but the crest between them does not.
        s.height_profile = {0.0, 0.24, -0.0024};
    });
    reject([](SceneSpec& s) { s.bev.rows = 0; });
}

TEST_CASE("dataset generation is deterministic and covers the modes") {
    SceneSpec base;
    const std::vector<Scene> ds = make_dataset(40, base, 7);
    REQUIRE(ds.size() == 40);

    std::set<int> lane_counts;
    std::set<int> height_modes;
    int forks = 0;
    for (const auto& scene : ds) {
        lane_counts.insert(scene.spec.lane_count);
        const auto& hp = scene.spec.height_profile;
        if (hp.empty())
            height_modes.insert(0);
        else if (hp.size() == 2 && hp[1] > 0.0)
            height_modes.insert(1);
        else if (hp.size() == 2)
            height_modes.insert(2);
        else
            height_modes.insert(3);
        if (scene.spec.lane_count >= 2 &&
            scene.spec.lateral_offsets[0] == scene.spec.lateral_offsets[1] &&
            scene.spec.curvatures[0] == -scene.spec.curvatures[1] &&
            scene.spec.curvatures[0] > 0.0)
            ++forks;
        CHECK(scene.spec.lane_count >= 1);
        CHECK(scene.spec.lane_count <= 6);
    }
    CHECK(lane_counts.size() == 6);
    CHECK(height_modes.size() == 4);
    CHECK(forks >= 1);

    const std::vector<Scene> again = make_dataset(40, base, 7);
    REQUIRE(again.size() == ds.size());
    for (size_t i = 0; i < ds.size(); ++i)
        CHECK(scene_to_json(again[i]) == scene_to_json(ds[i]));

    const std::vector<Scene> other = make_dataset(1, base, 8);
    CHECK(scene_to_json(other[0]) != scene_to_json(ds[0]));

    CHECK_THROWS_AS(make_dataset(0, base, 7), ConfigError);

    SceneSpec narrow;
    narrow.max_queries = 3;
    for (const auto& scene : make_dataset(10, narrow, 9))
        CHECK(scene.spec.lane_count <= 3);
}

TEST_CASE("dataset files round trip through the manifest") {
    namespace fs = std::filesystem;
    using nlohmann::json;
    const fs::path dir = fs::temp_directory_path() / "lanedet_synthlane_dataset";
    fs::remove_all(dir);

    SceneSpec base;
    const std::vector<Scene> ds = make_dataset(4, base, 21, dir.string());
    REQUIRE(ds.size() == 4);

    std::ifstream in(dir / "manifest.json");
    REQUIRE(in.good());
    json manifest = json::parse(in);
    CHECK(manifest.at("count").get<int>() == 4);
    CHECK(manifest.at("seed").get<std::uint64_t>() == 21);
    REQUIRE(manifest.at("specs").size() == 4);
    REQUIRE(manifest.at("files").size() == 4);
    for (int i = 0; i < 4; ++i) {
        const std::string name = manifest.at("files")[static_cast<size_t>(i)].get<std::string>();
        CHECK(name == "scene_" + std::to_string(i) + ".json");
        const Scene back = load_scene((dir / name).string());
        CHECK(scene_to_json(back) == scene_to_json(ds[static_cast<size_t>(i)]));
    }
    fs::remove_all(dir);
}

TEST_CASE("flat scenes project and invert to the ground plane") {
    SceneSpec spec;
    spec.lateral_offsets = {2.0};
    const Scene scene = generate_scene(spec);
    const Lane3D& gt = scene.gt_lanes[0];
    const Lane2D image = project_lane(gt, spec.camera);
    int dropped = -1;
    const Lane3D back = ipm_project(image, spec.camera, &dropped);
    CHECK(dropped == 0);
    REQUIRE(back.points.size() == gt.points.size());
    double worst = 0.0;
    for (size_t i = 0; i < gt.points.size(); ++i) {
        worst = std::max(worst, std::hypot(gt.points[i].x - back.points[i].x,
                                           gt.points[i].y - back.points[i].y));
        CHECK(back.points[i].z == 0.0);
    }
    CHECK(worst <= 1e-9);
}

TEST_CASE("road height breaks the flat-ground inversion, worse when far") {
    SceneSpec spec;
    spec.lateral_offsets = {2.0};
    spec.height_profile = {0.0, 0.01};  // stays below the camera, nothing drops
    const Scene scene = generate_scene(spec);
    const Lane3D& gt = scene.gt_lanes[0];
    const Lane2D image = project_lane(gt, spec.camera);
    int dropped = -1;
    const Lane3D back = ipm_project(image, spec.camera, &dropped);
    REQUIRE(dropped == 0);
    REQUIRE(back.points.size() == gt.points.size());

    auto err_near_y = [&](double y_target) {
        size_t best = 0;
        double gap = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < gt.points.size(); ++i)
            if (std::abs(gt.points[i].y - y_target) < gap) {
                gap = std::abs(gt.points[i].y - y_target);
                best = i;
            }
        return std::hypot(gt.points[best].x - back.points[best].x,
                          gt.points[best].y - back.points[best].y);
    };
    const double near = err_near_y(20.0);
    const double far = err_near_y(80.0);
    CHECK(near > 0.5);
    CHECK(far > near);
    CHECK(far >= 5.0 * near);
}

TEST_CASE("ground-truth targets vote back to the lanes") {
    const SceneSpec spec = curved_pair();
    const Scene scene = generate_scene(spec);
    REQUIRE(scene.targets.skipped == 0);
    REQUIRE(scene.targets.s.dim(0) == 2);

    const LaneDetections det = vote_bev(scene.targets.r_b, scene.targets.s,
                                        spec.bev.x_range, spec.bev.y_range, 0.7, 1.0);
    REQUIRE(det.lanes.size() == 2);
    for (size_t i = 0; i < det.lanes.size(); ++i) {
        const DetectedLane& lane = det.lanes[i];
        CHECK(lane.class_id == spec.class_ids[i]);
        CHECK(std::abs(lane.score - 1.0) <= 1e-12);
        CHECK(lane.points.size() >= 20);
        for (size_t k = 0; k < lane.points.size(); ++k) {
            CHECK(nearest_gt_dist(lane.points[k], scene.gt_lanes) <= 1.0);
            if (k > 0) CHECK(lane.points[k].y >= lane.points[k - 1].y);
        }
    }
}

}  // TEST_SUITE
