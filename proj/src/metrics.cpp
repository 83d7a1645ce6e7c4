#include "lanedet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "lanedet/errors.hpp"
#include "lanedet/matching.hpp"

namespace lanedet {

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void require_ordered(const Lane3D& lane) {
    for (size_t k = 1; k < lane.points.size(); ++k)
        if (!(lane.points[k].y > lane.points[k - 1].y))
            throw ContractError("eval: lane y must be strictly increasing");
}

// Lanes with fewer than two points are legal protocol inputs (an empty
// detection) but can never match; anything longer must be properly ordered.
bool usable_lane(const Lane3D& lane) {
    if (lane.points.size() < 2) return false;
    require_ordered(lane);
    return true;
}

double seg_dist2(double px, double py, const Point3& a, const Point3& b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = 0.0;
    if (len2 > 0.0) t = std::clamp(((px - a.x) * dx + (py - a.y) * dy) / len2, 0.0, 1.0);
    const double cx = a.x + t * dx - px, cy = a.y + t * dy - py;
    return cx * cx + cy * cy;
}

// Sorted flat indices (row-major over the y-by-x raster) of cells whose
// center lies within the strip.
std::vector<std::int64_t> strip_mask(const Lane3D& lane, const EvalConfig& cfg) {
    if (!usable_lane(lane)) return {};
    const int nx = static_cast<int>(std::lround(cfg.x_range.width() / cfg.raster_cell));
    const int ny = static_cast<int>(std::lround(cfg.y_range.width() / cfg.raster_cell));
    const double hw = cfg.strip_half_width;
    std::vector<char> hit(static_cast<size_t>(nx) * ny, 0);
    for (size_t k = 1; k < lane.points.size(); ++k) {
        const Point3& a = lane.points[k - 1];
        const Point3& b = lane.points[k];
        const auto lo_cell = [&](double v, double origin) {
            return std::max(0, static_cast<int>(std::floor((v - hw - origin) / cfg.raster_cell)) - 1);
        };
        const auto hi_cell = [&](double v, double origin, int n) {
            return std::min(n - 1,
                            static_cast<int>(std::ceil((v + hw - origin) / cfg.raster_cell)) + 1);
        };
        const int i0 = lo_cell(std::min(a.x, b.x), cfg.x_range.lo);
        const int i1 = hi_cell(std::max(a.x, b.x), cfg.x_range.lo, nx);
        const int j0 = lo_cell(std::min(a.y, b.y), cfg.y_range.lo);
        const int j1 = hi_cell(std::max(a.y, b.y), cfg.y_range.lo, ny);
        for (int j = j0; j <= j1; ++j) {
            const double cy = cfg.y_range.lo + (j + 0.5) * cfg.raster_cell;
            for (int i = i0; i <= i1; ++i) {
                const double cx = cfg.x_range.lo + (i + 0.5) * cfg.raster_cell;
                if (seg_dist2(cx, cy, a, b) <= hw * hw)
                    hit[static_cast<size_t>(j) * nx + i] = 1;
            }
        }
    }
    std::vector<std::int64_t> cells;
    for (size_t f = 0; f < hit.size(); ++f)
        if (hit[f]) cells.push_back(static_cast<std::int64_t>(f));
    return cells;
}

// One-to-one pairing maximizing the number of admissible pairs; ok is
// predictions by ground truths. Assignment problems want columns <= rows, so
// the smaller side becomes the columns.
std::vector<std::pair<int, int>> max_tp_pairs(const std::vector<std::vector<char>>& ok) {
    const int p = static_cast<int>(ok.size());
    if (p == 0) return {};
    const int g = static_cast<int>(ok.front().size());
    if (g == 0) return {};
    std::vector<std::pair<int, int>> out;
    if (g <= p) {
        std::vector<std::vector<double>> cost(static_cast<size_t>(p),
                                              std::vector<double>(static_cast<size_t>(g)));
        for (int i = 0; i < p; ++i)
            for (int j = 0; j < g; ++j)
                cost[static_cast<size_t>(i)][static_cast<size_t>(j)] =
                    ok[static_cast<size_t>(i)][static_cast<size_t>(j)] ? 0.0 : 1.0;
        const Assignment z = hungarian(cost);
        for (int j = 0; j < g; ++j) {
            const int i = z.pred_for_gt[static_cast<size_t>(j)];
            if (ok[static_cast<size_t>(i)][static_cast<size_t>(j)]) out.emplace_back(i, j);
        }
    } else {
        std::vector<std::vector<double>> cost(static_cast<size_t>(g),
                                              std::vector<double>(static_cast<size_t>(p)));
        for (int j = 0; j < g; ++j)
            for (int i = 0; i < p; ++i)
                cost[static_cast<size_t>(j)][static_cast<size_t>(i)] =
                    ok[static_cast<size_t>(i)][static_cast<size_t>(j)] ? 0.0 : 1.0;
        const Assignment z = hungarian(cost);
        for (int i = 0; i < p; ++i) {
            const int j = z.pred_for_gt[static_cast<size_t>(i)];
            if (ok[static_cast<size_t>(i)][static_cast<size_t>(j)]) out.emplace_back(i, j);
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

void fill_rates(EvalReport* r, size_t tp, size_t preds, size_t gts) {
    r->precision = preds == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(preds);
    r->recall = gts == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(gts);
    const double pr = r->precision + r->recall;
    r->f1 = pr > 0.0 ? 2.0 * r->precision * r->recall / pr : 0.0;
}

}  // namespace

void validate_eval_config(const EvalConfig& cfg) {
    if (cfg.max_point_dist <= 0 || cfg.iou_thresh <= 0 || cfg.cd_thresh <= 0 ||
        cfg.strip_half_width <= 0 || cfg.raster_cell <= 0)
        throw ConfigError("eval config: thresholds must be positive");
    if (!(cfg.coverage_frac > 0.0) || cfg.coverage_frac > 1.0)
        throw ConfigError("eval config: coverage fraction must be in (0, 1]");
    validate_range(cfg.x_range, "eval x_range");
    validate_range(cfg.y_range, "eval y_range");
    for (size_t s = 1; s < cfg.y_samples.size(); ++s)
        if (!(cfg.y_samples[s] > cfg.y_samples[s - 1]))
            throw ConfigError("eval config: y_samples must be strictly increasing");
}

std::vector<double> eval_y_samples(const EvalConfig& cfg) {
    if (!cfg.y_samples.empty()) return cfg.y_samples;
    std::vector<double> ys;
    for (int y = 3; y <= 103; ++y) ys.push_back(y);
    return ys;
}

std::string report_csv(const EvalReport& r) {
    std::ostringstream out;
    if (!r.note.empty()) out << "# " << r.note << "\n";
    out << "f1,precision,recall,x_err_near,x_err_far,z_err_near,z_err_far,cd_err\n";
    out << fmt17(r.f1) << ',' << fmt17(r.precision) << ',' << fmt17(r.recall) << ','
        << fmt17(r.x_err_near) << ',' << fmt17(r.x_err_far) << ',' << fmt17(r.z_err_near) << ','
        << fmt17(r.z_err_far) << ',' << fmt17(r.cd_err) << '\n';
    return out.str();
}

std::string report_json(const EvalReport& r) {
    nlohmann::json j;
    j["f1"] = r.f1;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["x_err_near"] = r.x_err_near;
    j["x_err_far"] = r.x_err_far;
    j["z_err_near"] = r.z_err_near;
    j["z_err_far"] = r.z_err_far;
    j["cd_err"] = r.cd_err;
    j["note"] = r.note;
    return j.dump(2);
}

ResampledLane resample_at_y(const Lane3D& lane, const std::vector<double>& ys) {
    if (lane.points.size() < 2)
        throw ContractError("resample at y: lane needs at least 2 points");
    require_ordered(lane);
    ResampledLane out;
    out.x.assign(ys.size(), 0.0);
    out.z.assign(ys.size(), 0.0);
    out.covered.assign(ys.size(), 0);
    const auto& pts = lane.points;
    for (size_t s = 0; s < ys.size(); ++s) {
        const double y = ys[s];
        if (y < pts.front().y || y > pts.back().y) continue;
        size_t hi = static_cast<size_t>(
            std::upper_bound(pts.begin(), pts.end(), y,
                             [](double v, const Point3& p) { return v < p.y; }) -
            pts.begin());
        if (hi == pts.size()) hi = pts.size() - 1;
        const size_t lo = hi - 1;
        const double t = (y - pts[lo].y) / (pts[hi].y - pts[lo].y);
        out.x[s] = pts[lo].x * (1.0 - t) + pts[hi].x * t;
        out.z[s] = pts[lo].z * (1.0 - t) + pts[hi].z * t;
        out.covered[s] = 1;
    }
    return out;
}

double strip_iou(const Lane3D& a, const Lane3D& b, const EvalConfig& cfg) {
    validate_eval_config(cfg);
    const auto ma = strip_mask(a, cfg);
    const auto mb = strip_mask(b, cfg);
    if (ma.empty() && mb.empty()) return 0.0;
    std::vector<std::int64_t> inter;
    std::set_intersection(ma.begin(), ma.end(), mb.begin(), mb.end(), std::back_inserter(inter));
    const double uni = static_cast<double>(ma.size() + mb.size() - inter.size());
    return static_cast<double>(inter.size()) / uni;
}

double unilateral_chamfer(const Lane3D& from, const Lane3D& to) {
    if (from.points.size() < 2 || to.points.size() < 2)
        throw ContractError("chamfer: lanes need at least 2 points");
    const auto a = resample_polyline(from.points, 0.5);
    const auto b = resample_polyline(to.points, 0.5);
    double acc = 0.0;
    for (const Point3& p : a) {
        double best = std::numeric_limits<double>::infinity();
        for (const Point3& q : b) {
            const double dx = p.x - q.x, dy = p.y - q.y, dz = p.z - q.z;
            best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        acc += std::sqrt(best);
    }
    return acc / static_cast<double>(a.size());
}

EvalReport f_score_openlane(const std::vector<Lane3D>& preds, const std::vector<Lane3D>& gts,
                            const EvalConfig& cfg) {
    validate_eval_config(cfg);
    const auto ys = eval_y_samples(cfg);
    EvalReport r;
    r.note =
        "substitute protocol: true-positive-maximizing assignment in place of the official "
        "edit-distance matcher; near/far split at y=" +
        fmt17(cfg.near_far_split);

    std::vector<ResampledLane> ps, gs;
    std::vector<char> p_ok, g_ok;
    for (const auto& lane : preds) {
        p_ok.push_back(usable_lane(lane) ? 1 : 0);
        ps.push_back(p_ok.back() ? resample_at_y(lane, ys) : ResampledLane{});
    }
    for (const auto& lane : gts) {
        g_ok.push_back(usable_lane(lane) ? 1 : 0);
        gs.push_back(g_ok.back() ? resample_at_y(lane, ys) : ResampledLane{});
    }

    const double gate2 = cfg.max_point_dist * cfg.max_point_dist;
    std::vector<std::vector<char>> ok(preds.size(), std::vector<char>(gts.size(), 0));
    for (size_t i = 0; i < preds.size(); ++i) {
        if (!p_ok[i]) continue;
        for (size_t j = 0; j < gts.size(); ++j) {
            if (!g_ok[j]) continue;
            int covis = 0, close = 0;
            for (size_t s = 0; s < ys.size(); ++s) {
                if (!ps[i].covered[s] || !gs[j].covered[s]) continue;
                ++covis;
                const double dx = ps[i].x[s] - gs[j].x[s];
                const double dz = ps[i].z[s] - gs[j].z[s];
                if (dx * dx + dz * dz < gate2) ++close;
            }
            if (covis > 0 && close >= cfg.coverage_frac * covis) ok[i][j] = 1;
        }
    }

    const auto pairs = max_tp_pairs(ok);
    fill_rates(&r, pairs.size(), preds.size(), gts.size());

    double xn = 0, xf = 0, zn = 0, zf = 0;
    std::int64_t cn = 0, cf = 0;
    for (const auto& [i, j] : pairs) {
        for (size_t s = 0; s < ys.size(); ++s) {
            if (!ps[static_cast<size_t>(i)].covered[s] || !gs[static_cast<size_t>(j)].covered[s])
                continue;
            const double dx = ps[static_cast<size_t>(i)].x[s] - gs[static_cast<size_t>(j)].x[s];
            const double dz = ps[static_cast<size_t>(i)].z[s] - gs[static_cast<size_t>(j)].z[s];
            if (dx * dx + dz * dz >= gate2) continue;
            if (ys[s] < cfg.near_far_split) {
                xn += std::abs(dx);
                zn += std::abs(dz);
                ++cn;
            } else {
                xf += std::abs(dx);
                zf += std::abs(dz);
                ++cf;
            }
        }
    }
    if (cn > 0) {
        r.x_err_near = xn / static_cast<double>(cn);
        r.z_err_near = zn / static_cast<double>(cn);
    }
    if (cf > 0) {
        r.x_err_far = xf / static_cast<double>(cf);
        r.z_err_far = zf / static_cast<double>(cf);
    }
    return r;
}

EvalReport cd_once(const std::vector<Lane3D>& preds, const std::vector<Lane3D>& gts,
                   const EvalConfig& cfg) {
    validate_eval_config(cfg);
    EvalReport r;
    r.note =
        "substitute protocol: strip-raster IoU gate plus unilateral chamfer, matched by a "
        "true-positive-maximizing assignment";

    std::vector<std::vector<std::int64_t>> pm, gm;
    for (const auto& lane : preds) pm.push_back(strip_mask(lane, cfg));
    for (const auto& lane : gts) gm.push_back(strip_mask(lane, cfg));

    std::vector<std::vector<char>> ok(preds.size(), std::vector<char>(gts.size(), 0));
    std::vector<std::vector<double>> cd(preds.size(), std::vector<double>(gts.size(), 0.0));
    for (size_t i = 0; i < preds.size(); ++i) {
        if (pm[i].empty()) continue;
        for (size_t j = 0; j < gts.size(); ++j) {
            if (gm[j].empty()) continue;
            std::vector<std::int64_t> inter;
            std::set_intersection(pm[i].begin(), pm[i].end(), gm[j].begin(), gm[j].end(),
                                  std::back_inserter(inter));
            const double uni = static_cast<double>(pm[i].size() + gm[j].size() - inter.size());
            if (static_cast<double>(inter.size()) / uni <= cfg.iou_thresh) continue;
            cd[i][j] = unilateral_chamfer(preds[i], gts[j]);
            ok[i][j] = cd[i][j] < cfg.cd_thresh ? 1 : 0;
        }
    }

    const auto pairs = max_tp_pairs(ok);
    fill_rates(&r, pairs.size(), preds.size(), gts.size());
    if (!pairs.empty()) {
        double acc = 0.0;
        for (const auto& [i, j] : pairs) acc += cd[static_cast<size_t>(i)][static_cast<size_t>(j)];
        r.cd_err = acc / static_cast<double>(pairs.size());
    }
    return r;
}

}  // namespace lanedet
