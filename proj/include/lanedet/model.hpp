#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lanedet/attention.hpp"
#include "lanedet/geometry.hpp"
#include "lanedet/head.hpp"
#include "lanedet/matching.hpp"
#include "lanedet/metrics.hpp"
#include "lanedet/posembed.hpp"
#include "lanedet/synthlane.hpp"
#include "lanedet/tensor.hpp"

namespace lanedet {

// Every knob for building and training one detector, loadable from JSON.
// Spatial fields must agree with the dataset; training checks before any
// parameter is touched.
struct RunConfig {
    int lanes = 80;     // query count = max detections per scene
    int channels = 64;  // feature width, divisible by 4
    int image_h = 12, image_w = 16;
    BevLayout bev{50, 32, {-8.0, 8.0}, {3.0, 103.0}};
    int depth_bins = 50;
    int height_bins = 50;
    Range depth_range{0.0, 100.0};
    Range height_range{-5.0, 5.0};
    int num_classes = 2;
    int layer_count = 2;
    bool joint_norm = false;
    double fg_threshold = 0.7;  // vote gate on the foreground score
    double vote_mass = 16.0;    // accumulated mass for a cell to emit a point
    LossWeights loss_weights{};
    double learning_rate = 1e-4;
    double weight_decay = 0.0;  // adamw only
    int steps = 500;
    std::uint64_t seed = 0;
    std::string optimizer = "sgd";        // "sgd" or "adamw"
    std::string lr_schedule = "constant"; // "constant" or "cosine" (decays over steps)
};

void validate_run_config(const RunConfig& cfg);

// Strict field names; unknown keys are rejected, missing keys keep defaults.
std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);

struct ModelOutputs {
    Tensor lanes;   // L x C decoded lane features
    Tensor image;   // N_a x C updated image features
    Tensor bev;     // N_b x C updated BEV features
    Tensor scores;  // L x (2 + N)
    OffsetMaps offsets;
};

// The full detector: a linear lift over the 3-channel raster stands in for
// the image backbone, then predicted depth/height distributions feed the
// shared two-stage positional lift, a decomposed-attention stack decodes
// lane queries against both views, and per-query kernels emit scores and
// offset maps. All learnable state lives on one Tape under stable names, so
// checkpoints are name -> value maps and optimizer updates are name-driven.
class Model {
public:
    explicit Model(const RunConfig& cfg);  // camera = default_scene_camera
    Model(RunConfig cfg, CameraModel camera);

    const RunConfig& config() const { return cfg_; }
    const CameraModel& camera() const { return camera_; }
    Tape& tape() { return tape_; }
    int step() const { return step_; }

    ModelOutputs forward(const Tensor& raster);

    // Hungarian assignment of ground-truth lanes to query rows, computed
    // eagerly from the current outputs; constant w.r.t. the graph.
    Assignment assign(const ModelOutputs& out, const GtTargets& targets) const;
    Tensor loss(const ModelOutputs& out, const GtTargets& targets, const Assignment& z) const;
    // forward + assign + loss in one tracked call.
    Tensor scene_loss(const Tensor& raster, const GtTargets& targets);

    // One parameter update from the gradients on the tape; bumps step().
    void optimizer_step();

    LaneDetections detect(const Tensor& raster);  // eager BEV vote

    std::string checkpoint_json() const;
    // Restores parameters, step counter, and optimizer state. The stored
    // config must equal this model's; names and shapes must match exactly.
    void load_checkpoint(const std::string& text);

private:
    void init_params();
    Tensor p(const std::string& name) const { return tape_.param_value(name); }
    EmbedWeights embed_weights() const;
    std::vector<DecomposedWeights> layer_weights() const;
    HeadWeights head_weights() const;

    RunConfig cfg_;
    CameraModel camera_;
    FrustumGrid frustum_;
    BevGrid bev_grid_;
    Tape tape_;
    int step_ = 0;
    int adam_t_ = 0;
    std::map<std::string, Tensor> adam_m_;
    std::map<std::string, Tensor> adam_v_;
};

// Scene must carry the exact raster/BEV/class/camera geometry the model was
// built for, and no more lanes than it has queries.
void check_scene_compat(const Model& model, const Scene& scene);

struct TrainStep {
    int step = 0;     // global step index, continues across resumes
    double loss = 0;  // tracked loss of the scene visited at this step
};

struct TrainLog {
    std::vector<TrainStep> steps;
    double initial_total = 0.0;  // summed per-scene loss before training
    double final_total = 0.0;    // same sum after the last update
};

// Cycles scenes in order, one scene per step (batch size 1), deterministic.
TrainLog train_model(Model& model, const std::vector<Scene>& scenes, int steps);

// Summed eager loss over the scenes at the current parameters.
double dataset_loss(Model& model, const std::vector<Scene>& scenes);

enum class EvalProtocol { Openlane, Once };

// Decoded detections with equal-y runs collapsed by averaging, so outputs
// satisfy the strictly-increasing-y lane contract.
std::vector<Lane3D> detections_to_lanes(const LaneDetections& det);

// Per-scene reports averaged with equal weight (macro average).
EvalReport evaluate_model(Model& model, const std::vector<Scene>& scenes,
                          EvalProtocol protocol, const EvalConfig& cfg);

struct ParamCheck {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Full-pipeline gradient check on a small built-in two-lane scene: analytic
// gradients against central finite differences, per parameter, with the
// assignment frozen at the evaluation point. corrupt_grads flips one
// analytic gradient's sign as a harness negative control.
std::vector<ParamCheck> model_gradcheck(std::uint64_t seed, double tol = 1e-5,
                                        bool corrupt_grads = false);

}  // namespace lanedet
