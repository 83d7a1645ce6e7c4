#include "lanedet/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <utility>

#include <json.hpp>

#include "lanedet/errors.hpp"
#include "lanedet/posembed.hpp"
#include "lanedet/random.hpp"

namespace lanedet {

namespace {

using nlohmann::json;

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

json range_to_json(const Range& r) { return json::array({r.lo, r.hi}); }

Range range_from_json(const json& j, const char* what) {
    std::vector<double> v;
    try {
        v = j.get<std::vector<double>>();
    } catch (const json::exception&) {
        throw ParseError(std::string("run config: field \"") + what + "\" must be [lo, hi]");
    }
    if (v.size() != 2)
        throw ParseError(std::string("run config: field \"") + what + "\" must be [lo, hi]");
    return {v[0], v[1]};
}

void reject_unknown(const json& j, const std::set<std::string>& known, const char* where) {
    for (const auto& item : j.items())
        if (!known.count(item.key()))
            throw ParseError(std::string("run config: unknown ") + where + " field \"" +
                             item.key() + "\"");
}

Tensor uniform_tensor(Rng& rng, Shape shape, double bound) {
    Tensor t(shape);
    double* d = t.mut64();
    const std::int64_t n = shape_numel(shape);
    for (std::int64_t i = 0; i < n; ++i) d[i] = rng.uniform(-bound, bound);
    return t;
}

double xavier_bound(int fan_in, int fan_out) { return std::sqrt(6.0 / (fan_in + fan_out)); }

bool same_layout(const BevLayout& a, const BevLayout& b) {
    return a.rows == b.rows && a.cols == b.cols && a.x_range.lo == b.x_range.lo &&
           a.x_range.hi == b.x_range.hi && a.y_range.lo == b.y_range.lo &&
           a.y_range.hi == b.y_range.hi;
}

}  // namespace

void validate_run_config(const RunConfig& cfg) {
    if (cfg.lanes < 1) throw ConfigError("run config: lanes must be positive");
    if (cfg.channels < 4 || cfg.channels % 4 != 0)
        throw ConfigError("run config: channels must be a positive multiple of 4");
    if (cfg.image_h < 2 || cfg.image_w < 2)
        throw ConfigError("run config: raster needs at least 2x2 pixels");
    validate_layout(cfg.bev);
    if (cfg.depth_bins < 1 || cfg.height_bins < 1)
        throw ConfigError("run config: depth and height need at least one bin");
    if (!(cfg.depth_range.hi > cfg.depth_range.lo) || cfg.depth_range.lo < 0.0)
        throw ConfigError("run config: depth range must be non-negative and increasing");
    if (!(cfg.height_range.hi > cfg.height_range.lo))
        throw ConfigError("run config: height range must be increasing");
    if (cfg.num_classes < 1) throw ConfigError("run config: num_classes must be positive");
    if (cfg.layer_count < 1) throw ConfigError("run config: layer_count must be positive");
    if (!(cfg.fg_threshold > 0.0) || !(cfg.fg_threshold < 1.0))
        throw ConfigError("run config: fg_threshold must sit inside (0, 1)");
    if (!(cfg.vote_mass > 0.0)) throw ConfigError("run config: vote_mass must be positive");
    validate_loss_weights(cfg.loss_weights);
    if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate))
        throw ConfigError("run config: learning_rate must be positive and finite");
    if (cfg.weight_decay < 0.0 || !std::isfinite(cfg.weight_decay))
        throw ConfigError("run config: weight_decay must be non-negative");
    if (cfg.steps < 0) throw ConfigError("run config: steps must be non-negative");
    if (cfg.optimizer != "sgd" && cfg.optimizer != "adamw")
        throw ConfigError("run config: optimizer must be \"sgd\" or \"adamw\"");
    if (cfg.lr_schedule != "constant" && cfg.lr_schedule != "cosine")
        throw ConfigError("run config: lr_schedule must be \"constant\" or \"cosine\"");
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["lanes"] = cfg.lanes;
    j["channels"] = cfg.channels;
    j["image_h"] = cfg.image_h;
    j["image_w"] = cfg.image_w;
    j["bev"] = {{"rows", cfg.bev.rows},
                {"cols", cfg.bev.cols},
                {"x_range", range_to_json(cfg.bev.x_range)},
                {"y_range", range_to_json(cfg.bev.y_range)}};
    j["depth_bins"] = cfg.depth_bins;
    j["height_bins"] = cfg.height_bins;
    j["depth_range"] = range_to_json(cfg.depth_range);
    j["height_range"] = range_to_json(cfg.height_range);
    j["num_classes"] = cfg.num_classes;
    j["layer_count"] = cfg.layer_count;
    j["joint_norm"] = cfg.joint_norm;
    j["fg_threshold"] = cfg.fg_threshold;
    j["vote_mass"] = cfg.vote_mass;
    j["loss_weights"] = {{"obj", cfg.loss_weights.obj},
                         {"cls", cfg.loss_weights.cls},
                         {"off", cfg.loss_weights.off}};
    j["learning_rate"] = cfg.learning_rate;
    j["weight_decay"] = cfg.weight_decay;
    j["steps"] = cfg.steps;
    j["seed"] = cfg.seed;
    j["optimizer"] = cfg.optimizer;
    j["lr_schedule"] = cfg.lr_schedule;
    return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("run config: ") + e.what());
    }
    if (!j.is_object()) throw ParseError("run config: top level must be an object");
    static const std::set<std::string> known = {
        "lanes",        "channels",     "image_h",      "image_w",     "bev",
        "depth_bins",   "height_bins",  "depth_range",  "height_range", "num_classes",
        "layer_count",  "joint_norm",   "fg_threshold", "vote_mass",    "loss_weights",
        "learning_rate", "weight_decay", "steps",        "seed",         "optimizer",
        "lr_schedule"};
    reject_unknown(j, known, "");

    RunConfig cfg;
    try {
        if (j.contains("lanes")) cfg.lanes = j["lanes"].get<int>();
        if (j.contains("channels")) cfg.channels = j["channels"].get<int>();
        if (j.contains("image_h")) cfg.image_h = j["image_h"].get<int>();
        if (j.contains("image_w")) cfg.image_w = j["image_w"].get<int>();
        if (j.contains("bev")) {
            const json& b = j["bev"];
            reject_unknown(b, {"rows", "cols", "x_range", "y_range"}, "bev");
            if (!b.contains("rows") || !b.contains("cols") || !b.contains("x_range") ||
                !b.contains("y_range"))
                throw ParseError("run config: bev needs rows, cols, x_range, y_range");
            cfg.bev.rows = b["rows"].get<int>();
            cfg.bev.cols = b["cols"].get<int>();
            cfg.bev.x_range = range_from_json(b["x_range"], "bev.x_range");
            cfg.bev.y_range = range_from_json(b["y_range"], "bev.y_range");
        }
        if (j.contains("depth_bins")) cfg.depth_bins = j["depth_bins"].get<int>();
        if (j.contains("height_bins")) cfg.height_bins = j["height_bins"].get<int>();
        if (j.contains("depth_range")) cfg.depth_range = range_from_json(j["depth_range"], "depth_range");
        if (j.contains("height_range"))
            cfg.height_range = range_from_json(j["height_range"], "height_range");
        if (j.contains("num_classes")) cfg.num_classes = j["num_classes"].get<int>();
        if (j.contains("layer_count")) cfg.layer_count = j["layer_count"].get<int>();
        if (j.contains("joint_norm")) cfg.joint_norm = j["joint_norm"].get<bool>();
        if (j.contains("fg_threshold")) cfg.fg_threshold = j["fg_threshold"].get<double>();
        if (j.contains("vote_mass")) cfg.vote_mass = j["vote_mass"].get<double>();
        if (j.contains("loss_weights")) {
            const json& lw = j["loss_weights"];
            reject_unknown(lw, {"obj", "cls", "off"}, "loss_weights");
            if (!lw.contains("obj") || !lw.contains("cls") || !lw.contains("off"))
                throw ParseError("run config: loss_weights needs obj, cls, off");
            cfg.loss_weights.obj = lw["obj"].get<double>();
            cfg.loss_weights.cls = lw["cls"].get<double>();
            cfg.loss_weights.off = lw["off"].get<double>();
        }
        if (j.contains("learning_rate")) cfg.learning_rate = j["learning_rate"].get<double>();
        if (j.contains("weight_decay")) cfg.weight_decay = j["weight_decay"].get<double>();
        if (j.contains("steps")) cfg.steps = j["steps"].get<int>();
        if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("optimizer")) cfg.optimizer = j["optimizer"].get<std::string>();
        if (j.contains("lr_schedule")) cfg.lr_schedule = j["lr_schedule"].get<std::string>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("run config: bad field: ") + e.what());
    }
    validate_run_config(cfg);
    return cfg;
}

Model::Model(const RunConfig& cfg)
    : Model(cfg, default_scene_camera(cfg.image_h, cfg.image_w)) {}

Model::Model(RunConfig cfg, CameraModel camera)
    : cfg_(std::move(cfg)), camera_(std::move(camera)) {
    validate_run_config(cfg_);
    frustum_ = unproject(
        build_frustum_grid(cfg_.image_h, cfg_.image_w, cfg_.depth_bins, cfg_.depth_range),
        camera_);
    bev_grid_ = build_bev_grid(cfg_.bev, cfg_.height_bins, cfg_.height_range);
    init_params();
}

void Model::init_params() {
    Rng rng(cfg_.seed);
    const int c = cfg_.channels;
    const int quarter = c / 4;
    const int nb = cfg_.bev.rows * cfg_.bev.cols;

    auto mat = [&](const std::string& name, int rows, int cols) {
        tape_.param(name, uniform_tensor(rng, {rows, cols}, xavier_bound(rows, cols)));
    };
    auto bias = [&](const std::string& name, int width) {
        tape_.param(name, Tensor({width}));
    };

    mat("lift.w", 3, c);
    bias("lift.b", c);
    tape_.param("lane_query", uniform_tensor(rng, {cfg_.lanes, c}, 0.5));
    tape_.param("bev_query", uniform_tensor(rng, {nb, c}, 0.5));
    mat("depth_head.w", c, cfg_.depth_bins);
    bias("depth_head.b", cfg_.depth_bins);
    mat("height_head.w", c, cfg_.height_bins);
    bias("height_head.b", cfg_.height_bins);
    // Grid coordinates run to ~100 m, so both lift stages start small: w1 to
    // keep the embeddings near unit scale, w2 to damp the gradient that the
    // coordinates amplify on the way back into w1.
    tape_.param("embed.w1", uniform_tensor(rng, {4, quarter}, 0.01));
    bias("embed.b1", quarter);
    tape_.param("embed.w2", uniform_tensor(rng, {quarter, c}, 0.05));
    bias("embed.b2", c);
    for (int l = 0; l < cfg_.layer_count; ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        for (const char* site :
             {"lane_from_image", "lane_from_bev", "bev_from_lane", "image_from_lane"})
            for (const char* part : {"theta", "phi", "g"})
                mat(prefix + site + "." + part, c, c);
    }
    mat("head.kernel_a.w", c, 2 * c);
    bias("head.kernel_a.b", 2 * c);
    mat("head.kernel_b.w", c, 3 * c);
    bias("head.kernel_b.b", 3 * c);
    mat("head.score.w", c, 2 + cfg_.num_classes);
    bias("head.score.b", 2 + cfg_.num_classes);
}

EmbedWeights Model::embed_weights() const {
    return {p("embed.w1"), p("embed.b1"), p("embed.w2"), p("embed.b2")};
}

std::vector<DecomposedWeights> Model::layer_weights() const {
    std::vector<DecomposedWeights> layers;
    for (int l = 0; l < cfg_.layer_count; ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        auto site = [&](const char* name) {
            return AttnSite{p(prefix + name + ".theta"), p(prefix + name + ".phi"),
                            p(prefix + name + ".g")};
        };
        layers.push_back({site("lane_from_image"), site("lane_from_bev"),
                          site("bev_from_lane"), site("image_from_lane")});
    }
    return layers;
}

HeadWeights Model::head_weights() const {
    HeadWeights w;
    w.kernel_a = {MlpLayer{p("head.kernel_a.w"), p("head.kernel_a.b")}};
    w.kernel_b = {MlpLayer{p("head.kernel_b.w"), p("head.kernel_b.b")}};
    w.score = {MlpLayer{p("head.score.w"), p("head.score.b")}};
    return w;
}

ModelOutputs Model::forward(const Tensor& raster) {
    const Shape want{cfg_.image_h, cfg_.image_w, 3};
    if (raster.shape() != want)
        throw DimensionError("forward: raster must be " + shape_str(want) + ", got " +
                             shape_str(raster.shape()));
    if (raster.dtype() != DType::F64) throw ContractError("forward: raster must be F64");
    const int na = cfg_.image_h * cfg_.image_w;
    const int nb = cfg_.bev.rows * cfg_.bev.cols;
    const int c = cfg_.channels;

    Tensor feats = add(matmul(reshape(raster, {na, 3}), p("lift.w")), p("lift.b"));
    const DepthDistribution depth =
        predict_depth_dist(reshape(feats, {cfg_.image_h, cfg_.image_w, c}),
                           MlpLayer{p("depth_head.w"), p("depth_head.b")});
    Tensor image = add(feats, reshape(image_pos_embed(depth, frustum_, embed_weights()),
                                      {na, c}));

    Tensor bev_q = p("bev_query");
    const HeightDistribution height =
        predict_height_dist(reshape(bev_q, {cfg_.bev.rows, cfg_.bev.cols, c}),
                            MlpLayer{p("height_head.w"), p("height_head.b")});
    Tensor bev = add(bev_q, reshape(bev_pos_embed(height, bev_grid_, embed_weights()),
                                    {nb, c}));

    const LayerOutputs decoded =
        decomposed_stack(p("lane_query"), image, bev, layer_weights(), cfg_.joint_norm);

    ModelOutputs out;
    out.lanes = decoded.lanes;
    out.image = decoded.image;
    out.bev = decoded.bev;
    DynamicKernels kernels;
    gen_kernels_scores(decoded.lanes, head_weights(), &kernels, &out.scores);
    out.offsets = conv_offsets(reshape(decoded.image, {cfg_.image_h, cfg_.image_w, c}),
                               reshape(decoded.bev, {cfg_.bev.rows, cfg_.bev.cols, c}),
                               kernels);
    return out;
}

Assignment Model::assign(const ModelOutputs& out, const GtTargets& targets) const {
    NoGradGuard ng;
    const MatchCosts costs =
        match_costs(out.scores, out.offsets.r_a, out.offsets.r_b, targets, cfg_.loss_weights);
    return hungarian(costs.cost);
}

Tensor Model::loss(const ModelOutputs& out, const GtTargets& targets,
                   const Assignment& z) const {
    return total_loss(out.scores, out.offsets.r_a, out.offsets.r_b, targets, z,
                      cfg_.loss_weights);
}

Tensor Model::scene_loss(const Tensor& raster, const GtTargets& targets) {
    const ModelOutputs out = forward(raster);
    return loss(out, targets, assign(out, targets));
}

void Model::optimizer_step() {
    NoGradGuard ng;
    const bool adam = cfg_.optimizer == "adamw";
    if (adam) ++adam_t_;
    const double bc1 = adam ? 1.0 - std::pow(kAdamBeta1, adam_t_) : 1.0;
    const double bc2 = adam ? 1.0 - std::pow(kAdamBeta2, adam_t_) : 1.0;
    // Schedule depends only on the step counter, so resumed runs continue it.
    double lr = cfg_.learning_rate;
    if (cfg_.lr_schedule == "cosine" && cfg_.steps > 0) {
        const double frac = std::min(1.0, static_cast<double>(step_) / cfg_.steps);
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
    }
    for (const auto& name : tape_.param_names()) {
        const Tensor g = tape_.grad(name);
        const double* pg = g.data64();
        Tensor value = tape_.param_value(name).detach();
        double* pv = value.mut64();
        const std::int64_t n = value.size();
        if (!adam) {
            for (std::int64_t i = 0; i < n; ++i) pv[i] -= lr * pg[i];
        } else {
            Tensor& m = adam_m_[name];
            Tensor& v = adam_v_[name];
            if (!m.defined()) m = Tensor(value.shape());
            if (!v.defined()) v = Tensor(value.shape());
            double* pm = m.mut64();
            double* pvv = v.mut64();
            for (std::int64_t i = 0; i < n; ++i) {
                pm[i] = kAdamBeta1 * pm[i] + (1.0 - kAdamBeta1) * pg[i];
                pvv[i] = kAdamBeta2 * pvv[i] + (1.0 - kAdamBeta2) * pg[i] * pg[i];
                const double mhat = pm[i] / bc1;
                const double vhat = pvv[i] / bc2;
                pv[i] -= lr * (mhat / (std::sqrt(vhat) + kAdamEps) + cfg_.weight_decay * pv[i]);
            }
        }
        tape_.set_param_value(name, value);
    }
    tape_.zero_grad();
    ++step_;
}

LaneDetections Model::detect(const Tensor& raster) {
    NoGradGuard ng;
    const ModelOutputs out = forward(raster);
    return vote_bev(out.offsets.r_b, out.scores, cfg_.bev.x_range, cfg_.bev.y_range,
                    cfg_.fg_threshold, cfg_.vote_mass);
}

std::string Model::checkpoint_json() const {
    json j;
    j["config"] = json::parse(run_config_to_json(cfg_));
    j["step"] = step_;
    json params = json::object();
    for (const auto& name : tape_.param_names()) {
        const Tensor value = tape_.param_value(name);
        params[name] = {{"shape", value.shape()}, {"data", value.to_vector()}};
    }
    j["params"] = std::move(params);
    if (cfg_.optimizer == "adamw") {
        json m = json::object(), v = json::object();
        for (const auto& [name, t] : adam_m_) m[name] = t.to_vector();
        for (const auto& [name, t] : adam_v_) v[name] = t.to_vector();
        j["adam"] = {{"t", adam_t_}, {"m", std::move(m)}, {"v", std::move(v)}};
    }
    return j.dump();
}

void Model::load_checkpoint(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint: ") + e.what());
    }
    if (!j.is_object() || !j.contains("config") || !j.contains("step") || !j.contains("params"))
        throw ParseError("checkpoint: needs config, step, params");
    if (j["config"] != json::parse(run_config_to_json(cfg_)))
        throw ConfigError("checkpoint: built for a different run config");

    const json& params = j["params"];
    const auto& names = tape_.param_names();
    if (!params.is_object() || params.size() != names.size())
        throw ParseError("checkpoint: parameter set does not match the model");
    std::map<std::string, Tensor> loaded;
    try {
        for (const auto& name : names) {
            if (!params.contains(name))
                throw ParseError("checkpoint: missing parameter \"" + name + "\"");
            const json& entry = params[name];
            const Shape shape = entry.at("shape").get<Shape>();
            if (shape != tape_.param_value(name).shape())
                throw ParseError("checkpoint: parameter \"" + name + "\" has the wrong shape");
            loaded[name] = Tensor::from(shape, entry.at("data").get<std::vector<double>>());
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint: bad parameter entry: ") + e.what());
    }

    int step = 0;
    int adam_t = 0;
    std::map<std::string, Tensor> adam_m, adam_v;
    try {
        step = j["step"].get<int>();
        if (cfg_.optimizer == "adamw" && j.contains("adam")) {
            const json& a = j["adam"];
            adam_t = a.at("t").get<int>();
            for (const auto& name : names) {
                const Shape shape = tape_.param_value(name).shape();
                if (a.at("m").contains(name))
                    adam_m[name] =
                        Tensor::from(shape, a.at("m")[name].get<std::vector<double>>());
                if (a.at("v").contains(name))
                    adam_v[name] =
                        Tensor::from(shape, a.at("v")[name].get<std::vector<double>>());
            }
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint: bad optimizer state: ") + e.what());
    }
    if (step < 0) throw ParseError("checkpoint: negative step");

    for (auto& [name, value] : loaded) tape_.set_param_value(name, std::move(value));
    step_ = step;
    adam_t_ = adam_t;
    adam_m_ = std::move(adam_m);
    adam_v_ = std::move(adam_v);
    tape_.zero_grad();
}

void check_scene_compat(const Model& model, const Scene& scene) {
    const RunConfig& cfg = model.config();
    const SceneSpec& sp = scene.spec;
    if (sp.image_h != cfg.image_h || sp.image_w != cfg.image_w)
        throw ConfigError("scene raster size does not match the model");
    if (!same_layout(sp.bev, cfg.bev))
        throw ConfigError("scene BEV layout does not match the model");
    if (sp.num_classes != cfg.num_classes)
        throw ConfigError("scene class count does not match the model");
    if (scene.targets.s.rank() == 2 && scene.targets.s.dim(0) > cfg.lanes)
        throw ConfigError("scene has more lanes than the model has queries");
    if (sp.camera.to_json() != model.camera().to_json())
        throw ConfigError("scene camera does not match the model");
}

TrainLog train_model(Model& model, const std::vector<Scene>& scenes, int steps) {
    if (scenes.empty()) throw ConfigError("train: scene list is empty");
    if (steps < 0) throw ConfigError("train: steps must be non-negative");
    for (const auto& scene : scenes) check_scene_compat(model, scene);

    TrainLog log;
    log.initial_total = dataset_loss(model, scenes);
    for (int s = 0; s < steps; ++s) {
        const Scene& scene =
            scenes[static_cast<size_t>(model.step()) % scenes.size()];
        model.tape().zero_grad();
        const Tensor loss = model.scene_loss(scene.raster, scene.targets);
        log.steps.push_back({model.step(), loss.flat(0)});
        model.tape().backward(loss);
        model.optimizer_step();
    }
    log.final_total = dataset_loss(model, scenes);
    return log;
}

double dataset_loss(Model& model, const std::vector<Scene>& scenes) {
    NoGradGuard ng;
    double total = 0.0;
    for (const auto& scene : scenes)
        total += model.scene_loss(scene.raster, scene.targets).flat(0);
    return total;
}

std::vector<Lane3D> detections_to_lanes(const LaneDetections& det) {
    std::vector<Lane3D> lanes;
    for (const auto& d : det.lanes) {
        Lane3D lane;
        lane.class_id = d.class_id;
        size_t i = 0;
        while (i < d.points.size()) {
            size_t j = i;
            double sx = 0.0, sy = 0.0, sz = 0.0;
            while (j < d.points.size() && d.points[j].y - d.points[i].y <= 1e-9) {
                sx += d.points[j].x;
                sy += d.points[j].y;
                sz += d.points[j].z;
                ++j;
            }
            const double k = static_cast<double>(j - i);
            lane.points.push_back({sx / k, sy / k, sz / k});
            i = j;
        }
        lanes.push_back(std::move(lane));
    }
    return lanes;
}

EvalReport evaluate_model(Model& model, const std::vector<Scene>& scenes,
                          EvalProtocol protocol, const EvalConfig& cfg) {
    if (scenes.empty()) throw ConfigError("eval: scene list is empty");
    validate_eval_config(cfg);
    for (const auto& scene : scenes) check_scene_compat(model, scene);

    EvalReport total;
    for (const auto& scene : scenes) {
        const std::vector<Lane3D> preds = detections_to_lanes(model.detect(scene.raster));
        const EvalReport rep = protocol == EvalProtocol::Openlane
                                   ? f_score_openlane(preds, scene.gt_lanes, cfg)
                                   : cd_once(preds, scene.gt_lanes, cfg);
        total.f1 += rep.f1;
        total.precision += rep.precision;
        total.recall += rep.recall;
        total.x_err_near += rep.x_err_near;
        total.x_err_far += rep.x_err_far;
        total.z_err_near += rep.z_err_near;
        total.z_err_far += rep.z_err_far;
        total.cd_err += rep.cd_err;
        if (total.note.empty()) total.note = rep.note;
    }
    const double n = static_cast<double>(scenes.size());
    total.f1 /= n;
    total.precision /= n;
    total.recall /= n;
    total.x_err_near /= n;
    total.x_err_far /= n;
    total.z_err_near /= n;
    total.z_err_far /= n;
    total.cd_err /= n;
    return total;
}

std::vector<ParamCheck> model_gradcheck(std::uint64_t seed, double tol, bool corrupt_grads) {
    RunConfig cfg;
    cfg.lanes = 4;
    cfg.channels = 8;
    cfg.image_h = 6;
    cfg.image_w = 8;
    cfg.bev = {6, 10, {-8.0, 8.0}, {3.0, 103.0}};
    cfg.depth_bins = 4;
    cfg.height_bins = 4;
    cfg.layer_count = 1;
    cfg.seed = seed;

    SceneSpec sp;
    sp.lane_count = 2;
    sp.lateral_offsets = {-2.5, 2.5};
    sp.curvatures = {2e-4, -2e-4};
    sp.class_ids = {0, 1};
    sp.height_profile = {0.0, 0.01};
    sp.image_h = cfg.image_h;
    sp.image_w = cfg.image_w;
    sp.bev = cfg.bev;
    sp.max_queries = cfg.lanes;
    sp.camera = default_scene_camera(cfg.image_h, cfg.image_w);
    sp.seed = seed;
    const Scene scene = generate_scene(sp);

    Model model(cfg, sp.camera);
    const ModelOutputs out = model.forward(scene.raster);
    const Assignment z = model.assign(out, scene.targets);
    const Tensor loss = model.loss(out, scene.targets, z);
    model.tape().zero_grad();
    model.tape().backward(loss);

    std::map<std::string, Tensor> analytic;
    for (const auto& name : model.tape().param_names()) {
        Tensor g = model.tape().grad(name).detach();
        if (corrupt_grads) {
            double* d = g.mut64();
            for (std::int64_t i = 0; i < g.size(); ++i) d[i] = -d[i];
        }
        analytic[name] = g;
    }

    // The assignment stays frozen so central differences probe a smooth loss.
    auto eager_loss = [&]() {
        NoGradGuard ng;
        const ModelOutputs o = model.forward(scene.raster);
        return model.loss(o, scene.targets, z).flat(0);
    };

    const double eps = 1e-6;
    const double floor = 1e-3;
    std::vector<ParamCheck> checks;
    for (const auto& name : model.tape().param_names()) {
        const Tensor base = model.tape().param_value(name).detach();
        const Tensor& grad = analytic[name];
        double worst = 0.0;
        for (std::int64_t i = 0; i < base.size(); ++i) {
            Tensor plus = base;
            plus.mut64()[i] += eps;
            model.tape().set_param_value(name, plus);
            const double up = eager_loss();
            Tensor minus = base;
            minus.mut64()[i] -= eps;
            model.tape().set_param_value(name, minus);
            const double down = eager_loss();
            const double fd = (up - down) / (2.0 * eps);
            const double got = grad.flat(i);
            const double rel =
                std::abs(fd - got) / std::max(floor, std::max(std::abs(fd), std::abs(got)));
            worst = std::max(worst, rel);
        }
        model.tape().set_param_value(name, base);
        checks.push_back({name, worst, worst <= tol});
    }
    return checks;
}

}  // namespace lanedet
