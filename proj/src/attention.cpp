#include "lanedet/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lanedet/errors.hpp"

namespace lanedet {

namespace {

void require_width(const Tensor& t, int c, const char* name) {
    if (t.rank() != 2 || t.dim(1) != c)
        throw DimensionError(std::string(name) + ": expected (*, " + std::to_string(c) +
                             "), got " + shape_str(t.shape()));
}

void require_site(const AttnSite& w, int c, const char* name) {
    const Shape square{c, c};
    if (w.w_theta.shape() != square || w.w_phi.shape() != square || w.w_g.shape() != square)
        throw DimensionError(std::string(name) + ": site weights must all be " +
                             shape_str(square));
}

// (P + 2N) C^2 projections plus 2 P N C similarity/value work; zero queries
// or zero keys mean the stage never runs.
std::int64_t attend_macs(std::int64_t p, std::int64_t n, std::int64_t c) {
    if (p == 0 || n == 0) return 0;
    return (p + 2 * n) * c * c + 2 * p * n * c;
}

}  // namespace

void validate_attn_config(const AttnConfig& cfg, AttnVariant variant) {
    if (cfg.n_a <= 0 || cfg.n_b < 0 || cfg.lanes <= 0 || cfg.channels <= 0 ||
        cfg.layer_count <= 0)
        throw ConfigError("attention config: extents must be positive");
    if (variant == AttnVariant::Ipm) {
        if (cfg.window <= 0 || cfg.window % 2 == 0)
            throw ConfigError("attention config: ipm window must be odd and positive");
        if (cfg.image_h <= 0 || cfg.image_w <= 0 || cfg.image_h * cfg.image_w != cfg.n_a)
            throw ConfigError("attention config: ipm needs image_h * image_w == n_a");
    }
}

Tensor attend(const Tensor& queries, const Tensor& keys, const AttnSite& w) {
    if (queries.rank() != 2 || keys.rank() != 2)
        throw DimensionError("attend: expects rank-2 queries and keys");
    const int c = queries.dim(1);
    require_width(keys, c, "attend keys");
    require_site(w, c, "attend");
    Tensor sim = matmul(matmul(queries, w.w_theta), transpose(matmul(keys, w.w_phi)));
    return matmul(softmax(sim, 1), matmul(keys, w.w_g));
}

Tensor lane_cross_attn(const Tensor& q, const Tensor& image, const Tensor& bev,
                       const DecomposedWeights& w, bool joint_norm) {
    if (q.rank() != 2) throw DimensionError("lane cross attn: queries must be rank 2");
    const int c = q.dim(1);
    require_width(image, c, "lane cross attn image");
    require_width(bev, c, "lane cross attn bev");
    require_site(w.lane_from_image, c, "lane<-image");
    require_site(w.lane_from_bev, c, "lane<-bev");
    if (!joint_norm)
        return add(add(q, attend(q, image, w.lane_from_image)),
                   attend(q, bev, w.lane_from_bev));
    const int n_a = image.dim(0);
    const int n_b = bev.dim(0);
    Tensor sim_i = matmul(matmul(q, w.lane_from_image.w_theta),
                          transpose(matmul(image, w.lane_from_image.w_phi)));
    Tensor sim_b = matmul(matmul(q, w.lane_from_bev.w_theta),
                          transpose(matmul(bev, w.lane_from_bev.w_phi)));
    Tensor att = softmax(concat(sim_i, sim_b, 1), 1);
    Tensor from_image = matmul(slice(att, 1, 0, n_a), matmul(image, w.lane_from_image.w_g));
    Tensor from_bev = matmul(slice(att, 1, n_a, n_b), matmul(bev, w.lane_from_bev.w_g));
    return add(add(q, from_image), from_bev);
}

Tensor bev_from_lanes(const Tensor& bev, const Tensor& lanes, const AttnSite& w) {
    return add(bev, attend(bev, lanes, w));
}

Tensor image_update(const Tensor& image, const Tensor& lanes, const AttnSite& w) {
    return add(image, attend(image, lanes, w));
}

LayerOutputs decomposed_layer(const Tensor& q, const Tensor& image, const Tensor& bev,
                              const DecomposedWeights& w, bool joint_norm) {
    LayerOutputs out;
    out.lanes = lane_cross_attn(q, image, bev, w, joint_norm);
    out.bev = bev_from_lanes(bev, out.lanes, w.bev_from_lane);
    out.image = image_update(image, out.lanes, w.image_from_lane);
    return out;
}

LayerOutputs decomposed_stack(Tensor q, Tensor image, Tensor bev,
                              const std::vector<DecomposedWeights>& layers, bool joint_norm) {
    if (layers.empty()) throw ConfigError("decomposed stack: needs at least one layer");
    LayerOutputs out;
    for (const auto& layer : layers) {
        out = decomposed_layer(q, image, bev, layer, joint_norm);
        q = out.lanes;
        image = out.image;
        bev = out.bev;
    }
    return out;
}

Tensor original_cross_attn(const Tensor& bev, const Tensor& image, const OriginalWeights& w) {
    Tensor refined = add(image, attend(image, image, w.image_self));
    return add(bev, attend(bev, refined, w.bev_from_image));
}

void ipm_reference_pixel(const BevLayout& layout, int row, int col, const CameraModel& cam,
                         int* out_u, int* out_v) {
    const Projected p =
        project_point(cam, {layout.cell_x(col), layout.cell_y(row), 0.0});
    // Failed projections keep the default origin; clamping pins them to the
    // border like any other out-of-view reference.
    const auto clamp_to = [](double v, int hi) {
        const long r = std::lround(v);
        return static_cast<int>(std::clamp(r, 0L, static_cast<long>(hi - 1)));
    };
    *out_u = clamp_to(p.u, cam.image_w());
    *out_v = clamp_to(p.v, cam.image_h());
}

Tensor ipm_attn(const Tensor& bev, const Tensor& image, const BevLayout& layout,
                const CameraModel& cam, const AttnSite& w, int window) {
    if (bev.rank() != 2 || image.rank() != 2)
        throw DimensionError("ipm attn: expects rank-2 features");
    const int c = bev.dim(1);
    require_width(image, c, "ipm attn image");
    require_site(w, c, "ipm attn");
    const int h = cam.image_h(), wid = cam.image_w();
    if (image.dim(0) != h * wid)
        throw DimensionError("ipm attn: image rows must equal image_h * image_w");
    if (bev.dim(0) != layout.rows * layout.cols)
        throw DimensionError("ipm attn: bev rows must equal the layout cell count");
    if (window <= 0 || window % 2 == 0)
        throw ConfigError("ipm attn: window must be odd and positive");
    if (bev.dtype() != DType::F64 || image.dtype() != DType::F64)
        throw ContractError("ipm attn: 64-bit features only");

    Tensor theta = matmul(bev, w.w_theta).detach();
    Tensor phi = matmul(image, w.w_phi).detach();
    Tensor val = matmul(image, w.w_g).detach();
    const double* tb = theta.data64();
    const double* pk = phi.data64();
    const double* vk = val.data64();
    const double* src = bev.data64();

    const int win_w = std::min(window, wid);
    const int win_h = std::min(window, h);
    const int keys = win_w * win_h;

    Tensor out = bev.detach();
    double* dst = out.mut64();
    std::vector<double> sims(static_cast<size_t>(keys));
    for (int j = 0; j < layout.rows; ++j)
        for (int k = 0; k < layout.cols; ++k) {
            int ref_u = 0, ref_v = 0;
            ipm_reference_pixel(layout, j, k, cam, &ref_u, &ref_v);
            const int u0 = std::clamp(ref_u - window / 2, 0, wid - win_w);
            const int v0 = std::clamp(ref_v - window / 2, 0, h - win_h);
            const std::int64_t cell = static_cast<std::int64_t>(j) * layout.cols + k;
            const double* qrow = tb + cell * c;
            double mx = -1e300;
            for (int dv = 0; dv < win_h; ++dv)
                for (int du = 0; du < win_w; ++du) {
                    const std::int64_t pix = static_cast<std::int64_t>(v0 + dv) * wid + (u0 + du);
                    double acc = 0.0;
                    for (int ch = 0; ch < c; ++ch) acc += qrow[ch] * pk[pix * c + ch];
                    sims[static_cast<size_t>(dv * win_w + du)] = acc;
                    mx = std::max(mx, acc);
                }
            FlopCounter::add(static_cast<std::int64_t>(keys) * c);
            double denom = 0.0;
            for (double& s : sims) denom += (s = std::exp(s - mx));
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int dv = 0; dv < win_h; ++dv)
                    for (int du = 0; du < win_w; ++du) {
                        const std::int64_t pix =
                            static_cast<std::int64_t>(v0 + dv) * wid + (u0 + du);
                        acc += sims[static_cast<size_t>(dv * win_w + du)] * vk[pix * c + ch];
                    }
                dst[cell * c + ch] = src[cell * c + ch] + acc / denom;
            }
            FlopCounter::add(static_cast<std::int64_t>(keys) * c);
        }
    return out;
}

std::int64_t count_flops(const AttnConfig& cfg, AttnVariant variant) {
    validate_attn_config(cfg, variant);
    const std::int64_t na = cfg.n_a, nb = cfg.n_b, l = cfg.lanes, c = cfg.channels;
    switch (variant) {
        case AttnVariant::Decomposed:
            return attend_macs(l, na, c) + attend_macs(l, nb, c) + attend_macs(nb, l, c) +
                   attend_macs(na, l, c);
        case AttnVariant::Original:
            return attend_macs(na, na, c) + attend_macs(nb, na, c);
        case AttnVariant::Ipm: {
            const std::int64_t keys = static_cast<std::int64_t>(std::min(cfg.window, cfg.image_w)) *
                                      std::min(cfg.window, cfg.image_h);
            if (nb == 0) return 0;
            return (nb + 2 * na) * c * c + 2 * nb * keys * c;
        }
    }
    throw ConfigError("count_flops: unknown variant");
}

std::int64_t count_view_core_flops(const AttnConfig& cfg, AttnVariant variant) {
    validate_attn_config(cfg, variant);
    const std::int64_t na = cfg.n_a, nb = cfg.n_b, l = cfg.lanes, c = cfg.channels;
    switch (variant) {
        case AttnVariant::Decomposed:
            return 2 * l * (na + nb) * c;
        case AttnVariant::Original:
            return 2 * nb * na * c;
        case AttnVariant::Ipm: {
            const std::int64_t keys = static_cast<std::int64_t>(std::min(cfg.window, cfg.image_w)) *
                                      std::min(cfg.window, cfg.image_h);
            return 2 * nb * keys * c;
        }
    }
    throw ConfigError("count_view_core_flops: unknown variant");
}

}  // namespace lanedet
