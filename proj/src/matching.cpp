#include "lanedet/matching.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "lanedet/errors.hpp"

namespace lanedet {

namespace {

constexpr double kProbFloor = 1e-12;

double safe_neg_log(double p) { return -std::log(std::max(p, kProbFloor)); }

void require_scores(const Tensor& s, const char* name) {
    if (s.rank() != 2 || s.dim(1) < 3)
        throw DimensionError(std::string(name) + ": scores must be (rows, 2+N)");
}

// Potentials-based shortest augmenting paths: each ground truth in turn gets
// the cheapest prediction reachable through the current matching. O(M^2 L).
// cost(j, i) reads the (gt j, pred i) entry; fills pred_for_gt and returns
// the optimal total.
double solve_lap(const std::function<double(int, int)>& cost, int n_gt, int n_pred,
                 std::vector<int>* pred_for_gt) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(n_gt) + 1, 0.0);
    std::vector<double> v(static_cast<size_t>(n_pred) + 1, 0.0);
    std::vector<int> matched(static_cast<size_t>(n_pred) + 1, 0);  // pred slot -> gt (1-based)
    std::vector<int> way(static_cast<size_t>(n_pred) + 1, 0);
    for (int g = 1; g <= n_gt; ++g) {
        matched[0] = g;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n_pred) + 1, inf);
        std::vector<char> used(static_cast<size_t>(n_pred) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            const int g0 = matched[static_cast<size_t>(j0)];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n_pred; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                const double cur = cost(g0 - 1, j - 1) - u[static_cast<size_t>(g0)] -
                                   v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n_pred; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(matched[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (matched[static_cast<size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<size_t>(j0)];
            matched[static_cast<size_t>(j0)] = matched[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    pred_for_gt->assign(static_cast<size_t>(n_gt), -1);
    double total = 0.0;
    for (int j = 1; j <= n_pred; ++j)
        if (matched[static_cast<size_t>(j)] != 0) {
            (*pred_for_gt)[static_cast<size_t>(matched[static_cast<size_t>(j)] - 1)] = j - 1;
            total += cost(matched[static_cast<size_t>(j)] - 1, j - 1);
        }
    return total;
}

}  // namespace

void validate_loss_weights(const LossWeights& w) {
    if (w.obj < 0 || w.cls < 0 || w.off < 0)
        throw ConfigError("loss weights: must be non-negative");
}

double cost_obj(const Tensor& scores, int i) {
    require_scores(scores, "objectness cost");
    return safe_neg_log(scores.at({i, 1}));
}

double cost_cls(const Tensor& scores, int i, const Tensor& target_scores, int j) {
    require_scores(scores, "class cost");
    require_scores(target_scores, "class cost targets");
    if (scores.dim(1) != target_scores.dim(1))
        throw DimensionError("class cost: class blocks differ in width");
    double acc = 0.0;
    for (int k = 2; k < scores.dim(1); ++k)
        acc += target_scores.at({j, k}) * safe_neg_log(scores.at({i, k}));
    return acc;
}

double cost_off(const Tensor& r_a, int i, const Tensor& target_r_a, int j, const Tensor& r_b,
                const Tensor& target_r_b) {
    if (r_a.rank() != 4 || r_b.rank() != 4 || target_r_a.rank() != 4 || target_r_b.rank() != 4)
        throw DimensionError("offset cost: offset maps must be rank 4");
    for (int d = 1; d < 4; ++d) {
        if (r_a.dim(d) != target_r_a.dim(d) || r_b.dim(d) != target_r_b.dim(d))
            throw DimensionError("offset cost: prediction and target grids differ");
    }
    const auto mean_l1 = [](const Tensor& pred, int pi, const Tensor& want, int wi) {
        const std::int64_t cells = static_cast<std::int64_t>(pred.dim(1)) * pred.dim(2);
        const std::int64_t entries = cells * pred.dim(3);
        double acc = 0.0;
        for (std::int64_t e = 0; e < entries; ++e)
            acc += std::abs(pred.flat(pi * entries + e) - want.flat(wi * entries + e));
        return acc / static_cast<double>(cells);
    };
    return mean_l1(r_a, i, target_r_a, j) + mean_l1(r_b, i, target_r_b, j);
}

MatchCosts match_costs(const Tensor& scores, const Tensor& r_a, const Tensor& r_b,
                       const GtTargets& targets, const LossWeights& lw) {
    validate_loss_weights(lw);
    require_scores(scores, "match costs");
    const int l = scores.dim(0);
    const int m = targets.s.dim(0);
    if (r_a.dim(0) != l || r_b.dim(0) != l)
        throw DimensionError("match costs: prediction tensors disagree on query count");
    MatchCosts out;
    out.obj.resize(static_cast<size_t>(l));
    out.cost.assign(static_cast<size_t>(l), std::vector<double>(static_cast<size_t>(m)));
    out.cls = out.cost;
    out.off = out.cost;
    for (int i = 0; i < l; ++i) {
        out.obj[static_cast<size_t>(i)] = cost_obj(scores, i);
        for (int j = 0; j < m; ++j) {
            out.cls[static_cast<size_t>(i)][static_cast<size_t>(j)] =
                cost_cls(scores, i, targets.s, j);
            out.off[static_cast<size_t>(i)][static_cast<size_t>(j)] =
                cost_off(r_a, i, targets.r_a, j, r_b, targets.r_b);
            out.cost[static_cast<size_t>(i)][static_cast<size_t>(j)] =
                lw.obj * out.obj[static_cast<size_t>(i)] +
                lw.cls * out.cls[static_cast<size_t>(i)][static_cast<size_t>(j)] +
                lw.off * out.off[static_cast<size_t>(i)][static_cast<size_t>(j)];
            if (!std::isfinite(out.cost[static_cast<size_t>(i)][static_cast<size_t>(j)]))
                throw NumericError("match costs: non-finite entry");
        }
    }
    return out;
}

double assignment_cost(const std::vector<std::vector<double>>& cost, const Assignment& z) {
    double total = 0.0;
    for (size_t j = 0; j < z.pred_for_gt.size(); ++j)
        total += cost[static_cast<size_t>(z.pred_for_gt[j])][j];
    return total;
}

Assignment hungarian(const std::vector<std::vector<double>>& cost) {
    const int rows = static_cast<int>(cost.size());
    if (rows == 0) return {};
    const int cols = static_cast<int>(cost.front().size());
    if (cols == 0) return {};
    if (cols > rows)
        throw ContractError("hungarian: more ground-truth lanes (" + std::to_string(cols) +
                            ") than predictions (" + std::to_string(rows) + ")");
    for (const auto& row : cost) {
        if (static_cast<int>(row.size()) != cols)
            throw DimensionError("hungarian: ragged cost matrix");
        for (double v : row)
            if (!std::isfinite(v)) throw NumericError("hungarian: non-finite cost");
    }

    const auto full = [&cost](int g, int p) {
        return cost[static_cast<size_t>(p)][static_cast<size_t>(g)];
    };
    std::vector<int> seed;
    const double best_total = solve_lap(full, cols, rows, &seed);
    const double tol = 1e-12 * (1.0 + std::abs(best_total));

    // Lexicographic refinement: pin each ground truth in order to the lowest
    // prediction index that still admits an optimal completion.
    std::vector<int> pinned(static_cast<size_t>(cols), -1);
    std::vector<char> row_taken(static_cast<size_t>(rows), 0);
    double pinned_cost = 0.0;
    for (int j = 0; j < cols; ++j) {
        const int rest_gts = cols - j - 1;
        for (int i = 0; i < rows; ++i) {
            if (row_taken[static_cast<size_t>(i)]) continue;
            double candidate = pinned_cost + cost[static_cast<size_t>(i)][static_cast<size_t>(j)];
            if (rest_gts > 0) {
                std::vector<int> free_rows;
                for (int ii = 0; ii < rows; ++ii)
                    if (!row_taken[static_cast<size_t>(ii)] && ii != i) free_rows.push_back(ii);
                const auto sub = [&](int g, int p) {
                    return cost[static_cast<size_t>(free_rows[static_cast<size_t>(p)])]
                               [static_cast<size_t>(j + 1 + g)];
                };
                std::vector<int> tmp;
                candidate += solve_lap(sub, rest_gts, static_cast<int>(free_rows.size()), &tmp);
            }
            if (candidate <= best_total + tol) {
                pinned[static_cast<size_t>(j)] = i;
                row_taken[static_cast<size_t>(i)] = 1;
                pinned_cost += cost[static_cast<size_t>(i)][static_cast<size_t>(j)];
                break;
            }
        }
        if (pinned[static_cast<size_t>(j)] < 0)
            throw ContractError("hungarian: refinement failed to reproduce the optimum");
    }
    return {std::move(pinned)};
}

Tensor total_loss(const Tensor& scores, const Tensor& r_a, const Tensor& r_b,
                  const GtTargets& targets, const Assignment& z, const LossWeights& lw) {
    validate_loss_weights(lw);
    require_scores(scores, "loss");
    const int l = scores.dim(0);
    const int classes = scores.dim(1) - 2;
    const int m = static_cast<int>(z.pred_for_gt.size());
    if (m > l) throw ContractError("loss: more matched lanes than predictions");
    std::vector<char> taken(static_cast<size_t>(l), 0);
    for (int i : z.pred_for_gt) {
        if (i < 0 || i >= l) throw ContractError("loss: assignment index out of range");
        if (taken[static_cast<size_t>(i)]) throw ContractError("loss: assignment not injective");
        taken[static_cast<size_t>(i)] = 1;
    }

    Tensor loss = Tensor::scalar(0.0);
    if (m > 0) {
        if (targets.s.dim(0) != m || targets.s.dim(1) != scores.dim(1))
            throw DimensionError("loss: target scores do not cover the assignment");
        const std::int64_t cells_a = static_cast<std::int64_t>(r_a.dim(1)) * r_a.dim(2);
        const std::int64_t cells_b = static_cast<std::int64_t>(r_b.dim(1)) * r_b.dim(2);
        Tensor picked = gather_rows(scores, z.pred_for_gt);
        Tensor fg = slice(picked, 1, 1, 1);
        loss = add(loss, scale(sum_all(log(clamp_min(fg, kProbFloor))), -lw.obj / m));
        Tensor cls_pred = slice(picked, 1, 2, classes);
        Tensor cls_want = slice(targets.s, 1, 2, classes).detach();
        loss = add(loss, scale(sum_all(mul(log(clamp_min(cls_pred, kProbFloor)), cls_want)),
                               -lw.cls / m));
        Tensor da = sum_all(abs(sub(gather_rows(r_a, z.pred_for_gt), targets.r_a.detach())));
        Tensor db = sum_all(abs(sub(gather_rows(r_b, z.pred_for_gt), targets.r_b.detach())));
        loss = add(loss, scale(da, lw.off / (static_cast<double>(m) * cells_a)));
        loss = add(loss, scale(db, lw.off / (static_cast<double>(m) * cells_b)));
    }
    if (l > m) {
        std::vector<int> unmatched;
        for (int i = 0; i < l; ++i)
            if (!taken[static_cast<size_t>(i)]) unmatched.push_back(i);
        Tensor bg = slice(gather_rows(scores, unmatched), 1, 0, 1);
        loss = add(loss, scale(sum_all(log(clamp_min(bg, kProbFloor))),
                               -lw.obj / static_cast<double>(l - m)));
    }
    return loss;
}

}  // namespace lanedet
