#pragma once

#include <vector>

#include "lanedet/head.hpp"
#include "lanedet/tensor.hpp"

namespace lanedet {

struct LossWeights {
    double obj = 5.0;
    double cls = 5.0;
    double off = 1.0;
};

void validate_loss_weights(const LossWeights& w);

// pred_for_gt[j] is the prediction row assigned to ground-truth lane j.
struct Assignment {
    std::vector<int> pred_for_gt;
};

// Pairwise matching costs, predictions along rows. The objectness column
// depends only on the prediction, so it shifts whole rows uniformly.
struct MatchCosts {
    std::vector<std::vector<double>> cost;  // L x M combined
    std::vector<double> obj;                // L
    std::vector<std::vector<double>> cls;   // L x M
    std::vector<std::vector<double>> off;   // L x M
};

// Negative log foreground probability, clamped at 1e-12.
double cost_obj(const Tensor& scores, int i);

// Cross entropy of the prediction's class block against target row j's.
double cost_cls(const Tensor& scores, int i, const Tensor& target_scores, int j);

// Pixel-mean L1 gap of the image offsets plus cell-mean L1 gap of the BEV
// offsets, prediction i against target j.
double cost_off(const Tensor& r_a, int i, const Tensor& target_r_a, int j, const Tensor& r_b,
                const Tensor& target_r_b);

MatchCosts match_costs(const Tensor& scores, const Tensor& r_a, const Tensor& r_b,
                       const GtTargets& targets, const LossWeights& lw);

// Minimum-cost injective assignment of every column to a distinct row.
// Among equal-cost optima, ground-truth 0 takes the lowest usable prediction
// index, then ground-truth 1, and so on.
Assignment hungarian(const std::vector<std::vector<double>>& cost);

double assignment_cost(const std::vector<std::vector<double>>& cost, const Assignment& z);

// Matched terms averaged over the M pairs plus the background push on the
// L - M unassigned predictions (zero when M == L). Differentiable in the
// prediction tensors; the assignment itself is a constant.
Tensor total_loss(const Tensor& scores, const Tensor& r_a, const Tensor& r_b,
                  const GtTargets& targets, const Assignment& z, const LossWeights& lw);

}  // namespace lanedet
