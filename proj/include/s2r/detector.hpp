#pragma once

// Miniature PointPillars detector: pillar feature net, three-block strided
// backbone resampled to H/8 and concatenated, single-scale SSD head, anchor
// matching, detection losses, the sim/real training loop with CORAL on the
// backbone feature map, and inference with rotated NMS.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "s2r/autodiff.hpp"
#include "s2r/checkpoint.hpp"
#include "s2r/coral.hpp"
#include "s2r/core.hpp"
#include "s2r/iou.hpp"
#include "s2r/pillar.hpp"
#include "s2r/rng.hpp"

namespace s2r::det {

using ad::Mode;
using ad::Tape;
using ad::Tensor;
using ad::Var;

//////////////////////////// configuration ////////////////////////////

struct AnchorSpec {
    ClassId cls = ClassId::Car;
    Vec3 size{4.5, 1.8, 1.5};
    double z = -1.05;  // anchor center height
    double iou_pos = 0.6, iou_neg = 0.45;
    friend bool operator==(const AnchorSpec&, const AnchorSpec&) = default;
};

struct LossWeights {
    double cls = 1.0, loc = 2.0, dir = 0.2;
    friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct NetworkConfig {
    pillar::PillarGridConfig grid;
    std::size_t channels = 16;  // C
    std::array<std::size_t, 3> layers_per_block{1, 1, 1};
    std::array<std::size_t, 3> block_multipliers{1, 2, 2};
    std::vector<AnchorSpec> anchors{
        {ClassId::Car, {4.5, 1.8, 1.5}, -1.05, 0.6, 0.45},
        {ClassId::Pedestrian, {0.6, 0.6, 1.7}, -0.95, 0.5, 0.35},
    };
    std::vector<double> anchor_yaws{0.0, kPi / 2};
    LossWeights weights;
    double focal_alpha = 0.25, focal_gamma = 2.0;

    std::size_t feature_channels() const { return 4 * channels; }
    std::size_t num_classes() const { return anchors.size(); }
    std::size_t anchors_per_cell() const { return anchors.size() * anchor_yaws.size(); }
    std::size_t out_height() const { return grid.height() / 8; }
    std::size_t out_width() const { return grid.width() / 8; }

    void validate() const {
        grid.validate();
        if (grid.height() % 8 != 0 || grid.width() % 8 != 0)
            throw ConfigError("network: grid height and width must be divisible by 8");
        if (channels == 0) throw ConfigError("network: channels must be >= 1");
        for (std::size_t b = 0; b < 3; ++b)
            if (layers_per_block[b] == 0 || block_multipliers[b] == 0)
                throw ConfigError("network: every block needs >= 1 layer and a positive channel multiplier");
        if (anchors.empty() || anchor_yaws.empty()) throw ConfigError("network: need at least one anchor class and yaw");
        for (std::size_t i = 0; i < anchors.size(); ++i) {
            const AnchorSpec& a = anchors[i];
            if (!(a.size.x > 0 && a.size.y > 0 && a.size.z > 0)) throw ConfigError("network: anchor sizes must be positive");
            if (!(a.iou_neg < a.iou_pos) || a.iou_neg < 0 || a.iou_pos > 1)
                throw ConfigError("network: need 0 <= match_iou_neg < match_iou_pos <= 1");
            for (std::size_t j = 0; j < i; ++j)
                if (anchors[j].cls == a.cls) throw ConfigError("network: one anchor spec per class");
        }
        for (double w : {weights.cls, weights.loc, weights.dir})
            if (!std::isfinite(w) || w < 0) throw ConfigError("network: loss weights must be finite and >= 0");
        if (!(focal_alpha >= 0 && focal_alpha <= 1) || !(focal_gamma >= 0))
            throw ConfigError("network: focal alpha must lie in [0,1] and gamma >= 0");
    }
    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

inline NetworkConfig paper_network() {
    NetworkConfig cfg;
    cfg.grid = pillar::paper_grid();
    cfg.channels = 64;
    return cfg;
}

inline NetworkConfig desk_network() {
    NetworkConfig cfg;
    cfg.grid.range = {-8, 8, -8, 8, -3, 1};
    cfg.grid.dx = cfg.grid.dy = 0.5;
    cfg.grid.max_points_per_pillar = 16;
    cfg.grid.max_pillars = 1024;
    cfg.channels = 16;
    cfg.layers_per_block = {2, 2, 2};
    return cfg;
}

//////////////////////////// anchors & box encoding ////////////////////////////

/// Anchor i = ((row * W' + col) * classes + k) * yaws + y over the H/8 x W/8 output grid.
struct AnchorGrid {
    std::vector<Box3D> anchors;
    std::vector<std::size_t> spec;  // anchor spec (class slot) of each anchor
    std::size_t height = 0, width = 0, per_cell = 0;
};

inline AnchorGrid make_anchors(const NetworkConfig& cfg) {
    cfg.validate();
    AnchorGrid g;
    g.height = cfg.out_height();
    g.width = cfg.out_width();
    g.per_cell = cfg.anchors_per_cell();
    const auto& r = cfg.grid.range;
    const double sx = (r.x_max - r.x_min) / static_cast<double>(g.width);
    const double sy = (r.y_max - r.y_min) / static_cast<double>(g.height);
    for (std::size_t row = 0; row < g.height; ++row)
        for (std::size_t col = 0; col < g.width; ++col)
            for (std::size_t k = 0; k < cfg.anchors.size(); ++k)
                for (double yaw : cfg.anchor_yaws) {
                    const AnchorSpec& s = cfg.anchors[k];
                    g.anchors.push_back({{r.x_min + (static_cast<double>(col) + 0.5) * sx,
                                          r.y_min + (static_cast<double>(row) + 0.5) * sy, s.z},
                                         s.size, yaw, s.cls, std::nullopt});
                    g.spec.push_back(k);
                }
    return g;
}

using Encoding = std::array<double, 7>;  // dx, dy, dz, dl, dw, dh, dtheta

struct EncodedBox {
    Encoding delta{};
    int dir = 0;  // adds pi to the decoded heading when 1
};

/// Wraps into [-pi/2, pi/2).
inline double wrap_half_turn(double a) {
    double r = std::remainder(a, kPi);  // [-pi/2, pi/2]
    if (r >= kPi / 2) r -= kPi;
    return r;
}

inline EncodedBox encode_box(const Box3D& gt, const Box3D& anchor) {
    const double diag = std::hypot(anchor.size.x, anchor.size.y);
    EncodedBox e;
    e.delta = {(gt.center.x - anchor.center.x) / diag,
               (gt.center.y - anchor.center.y) / diag,
               (gt.center.z - anchor.center.z) / anchor.size.z,
               std::log(gt.size.x / anchor.size.x),
               std::log(gt.size.y / anchor.size.y),
               std::log(gt.size.z / anchor.size.z),
               0.0};
    const double d = normalize_yaw(gt.yaw - anchor.yaw);
    e.delta[6] = wrap_half_turn(d);
    e.dir = std::abs(normalize_yaw(d - e.delta[6])) > kPi / 2 ? 1 : 0;
    return e;
}

inline Box3D decode_box(const Encoding& t, int dir, const Box3D& anchor) {
    const double diag = std::hypot(anchor.size.x, anchor.size.y);
    // clamp size log-ratios so an untrained head cannot overflow exp
    auto ratio = [](double v) { return std::exp(std::clamp(v, -8.0, 8.0)); };
    Box3D b;
    b.center = {anchor.center.x + t[0] * diag, anchor.center.y + t[1] * diag, anchor.center.z + t[2] * anchor.size.z};
    b.size = {anchor.size.x * ratio(t[3]), anchor.size.y * ratio(t[4]), anchor.size.z * ratio(t[5])};
    b.yaw = normalize_yaw(anchor.yaw + t[6] + (dir ? kPi : 0.0));
    b.cls = anchor.cls;
    return b;
}

//////////////////////////// matching ////////////////////////////

enum class MatchKind { Negative, Ignore, Positive };

struct Assignment {
    MatchKind kind = MatchKind::Negative;
    int gt = -1;
    friend bool operator==(const Assignment&, const Assignment&) = default;
};

struct MatchResult {
    std::vector<Assignment> assign;
    std::size_t n_pos = 0;
};

inline MatchResult match_anchors(const AnchorGrid& grid, const std::vector<Box3D>& gts, const NetworkConfig& cfg) {
    const std::size_t A = grid.anchors.size();
    MatchResult m;
    m.assign.assign(A, {});
    std::vector<double> best_iou(A, 0.0);
    std::vector<int> best_gt(A, -1);
    std::vector<std::size_t> forced(gts.size(), A);
    for (std::size_t j = 0; j < gts.size(); ++j) {
        double top = 0.0;
        for (std::size_t i = 0; i < A; ++i) {
            if (grid.anchors[i].cls != gts[j].cls) continue;
            const double iou = geom::bev_iou(grid.anchors[i], gts[j]);
            if (iou > best_iou[i]) best_iou[i] = iou, best_gt[i] = static_cast<int>(j);
            if (iou > top) top = iou, forced[j] = i;
        }
    }
    for (std::size_t i = 0; i < A; ++i) {
        const AnchorSpec& s = cfg.anchors[grid.spec[i]];
        if (best_gt[i] >= 0 && best_iou[i] >= s.iou_pos) m.assign[i] = {MatchKind::Positive, best_gt[i]};
        else if (best_iou[i] >= s.iou_neg) m.assign[i] = {MatchKind::Ignore, -1};
    }
    // best-anchor forcing wins over the thresholds
    for (std::size_t j = 0; j < gts.size(); ++j)
        if (forced[j] < A) m.assign[forced[j]] = {MatchKind::Positive, static_cast<int>(j)};
    for (const Assignment& a : m.assign) m.n_pos += a.kind == MatchKind::Positive;
    return m;
}

/// Matching plus regression and direction targets for the positives.
struct AnchorTargets {
    MatchResult match;
    std::vector<EncodedBox> boxes;  // one per anchor; meaningful for positives only
};

inline AnchorTargets make_targets(const AnchorGrid& grid, const std::vector<Box3D>& gts, const NetworkConfig& cfg) {
    AnchorTargets t;
    t.match = match_anchors(grid, gts, cfg);
    t.boxes.resize(grid.anchors.size());
    for (std::size_t i = 0; i < grid.anchors.size(); ++i)
        if (t.match.assign[i].kind == MatchKind::Positive)
            t.boxes[i] = encode_box(gts[static_cast<std::size_t>(t.match.assign[i].gt)], grid.anchors[i]);
    return t;
}

//////////////////////////// parameters ////////////////////////////

struct Model {
    NetworkConfig cfg;
    std::vector<ad::NamedTensor> params;
    std::vector<std::string> bn_names;
    std::vector<ad::BatchNormStats> bn;

    std::size_t param_index(const std::string& name) const {
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].name == name) return i;
        throw Error("model has no parameter " + name);
    }
    std::size_t bn_index(const std::string& name) const {
        for (std::size_t i = 0; i < bn_names.size(); ++i)
            if (bn_names[i] == name) return i;
        throw Error("model has no batch-norm layer " + name);
    }
    Tensor& param(const std::string& name) { return params[param_index(name)].value; }
    const Tensor& param(const std::string& name) const { return params[param_index(name)].value; }
};

namespace detail {

struct Layout {
    std::array<std::size_t, 3> block_channels;
    std::array<std::size_t, 3> resample_channels;  // C, C, 2C
    std::array<std::size_t, 3> resample_kernel;    // 4, 2, 1 (stride == kernel)
};

inline Layout layout(const NetworkConfig& cfg) {
    const std::size_t C = cfg.channels;
    return {{C * cfg.block_multipliers[0], C * cfg.block_multipliers[1], C * cfg.block_multipliers[2]},
            {C, C, 2 * C},
            {4, 2, 1}};
}

inline std::string block_conv(std::size_t b, std::size_t l) {
    return "block" + std::to_string(b) + ".conv" + std::to_string(l);
}
inline std::string resample(std::size_t b) { return "resample" + std::to_string(b); }

}  // namespace detail

/// Builds a freshly initialised model: He-normal convolutions and linear
/// layers, unit/zero batch norm, small head weights, and a class-logit bias
/// giving every anchor a 0.01 prior.
inline Model init_model(const NetworkConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const auto L = detail::layout(cfg);
    auto add = [&](std::string name, ad::Shape shape, double std_dev, double fill = 0.0) {
        Tensor t(shape, fill);
        if (std_dev > 0) {
            Rng rng(mix_seed(seed, m.params.size()));
            for (double& v : t.data) v = std_dev * rng.normal();
        }
        m.params.push_back({std::move(name), std::move(t)});
    };
    auto add_bn = [&](const std::string& name, std::size_t c) {
        add(name + ".gamma", {c}, 0.0, 1.0);
        add(name + ".beta", {c}, 0.0, 0.0);
        m.bn_names.push_back(name);
        m.bn.emplace_back(c);
    };
    const std::size_t C = cfg.channels, D = cfg.grid.point_feature_dim;
    add("pfn.linear.w", {C, D}, std::sqrt(2.0 / static_cast<double>(D)));
    add("pfn.linear.b", {C}, 0.0);
    add_bn("pfn.bn", C);
    std::size_t in = C;
    for (std::size_t b = 0; b < 3; ++b) {
        for (std::size_t l = 0; l < cfg.layers_per_block[b]; ++l) {
            const std::size_t out = L.block_channels[b];
            add(detail::block_conv(b, l) + ".w", {out, in, 3, 3}, std::sqrt(2.0 / static_cast<double>(in * 9)));
            add_bn(detail::block_conv(b, l) + ".bn", out);
            in = out;
        }
    }
    for (std::size_t b = 0; b < 3; ++b) {
        const std::size_t k = L.resample_kernel[b], cin = L.block_channels[b];
        add(detail::resample(b) + ".w", {L.resample_channels[b], cin, k, k}, std::sqrt(2.0 / static_cast<double>(cin * k * k)));
        add_bn(detail::resample(b) + ".bn", L.resample_channels[b]);
    }
    const std::size_t F = cfg.feature_channels(), A = cfg.anchors_per_cell(), K = cfg.num_classes();
    const double prior = 0.01;
    add("head.cls.w", {A * K, F, 1, 1}, 0.01);
    add("head.cls.b", {A * K}, 0.0, -std::log((1.0 - prior) / prior));
    add("head.reg.w", {A * 7, F, 1, 1}, 0.01);
    add("head.reg.b", {A * 7}, 0.0);
    add("head.dir.w", {A * 2, F, 1, 1}, 0.01);
    add("head.dir.b", {A * 2}, 0.0);
    return m;
}

//////////////////////////// forward ////////////////////////////

/// A model bound to a tape for one forward pass. `stat_items` is the number
/// of leading batch items (sim frames) that feed batch-norm statistics.
struct Bound {
    Tape& tape;
    Model& model;
    std::vector<Var> vars;
    Mode mode = Mode::Train;
    std::size_t stat_items = 0;

    Bound(Tape& t, Model& m, Mode md, bool trainable) : tape(t), model(m), mode(md) {
        for (auto& p : m.params) vars.push_back(trainable ? t.leaf(p.value) : t.constant(p.value));
    }
    Var p(const std::string& name) const { return vars[model.param_index(name)]; }
    Var bn(const std::string& name, Var x, std::size_t stat) {
        ad::BatchNormOptions opt;
        opt.mode = mode;
        opt.stat_items = stat;
        return ad::batchnorm(x, p(name + ".gamma"), p(name + ".beta"), model.bn[model.bn_index(name)], opt);
    }
};

/// (D, P, N) pillars of every frame -> (B, C, H, W) pseudo-image. The first
/// `b.stat_items` frames provide the batch-norm statistics.
inline Var pfn_forward(Bound& b, const std::vector<const pillar::PillarTensor*>& frames) {
    const NetworkConfig& cfg = b.model.cfg;
    const std::size_t C = cfg.channels, D = cfg.grid.point_feature_dim, N = cfg.grid.max_points_per_pillar;
    const std::size_t H = cfg.grid.height(), W = cfg.grid.width(), B = frames.size();
    std::size_t total_p = 0, stat_p = 0;
    for (std::size_t f = 0; f < B; ++f) {
        const auto& pt = *frames[f];
        if (pt.num_pillars() > 0 && (pt.dim() != D || pt.max_points() != N))
            throw ShapeMismatch("pfn_forward: pillar tensor " + ad::shape_str(pt.features.shape) + " does not match (" +
                                std::to_string(D) + ", P, " + std::to_string(N) + ")");
        total_p += pt.num_pillars();
        if (f < b.stat_items) stat_p += pt.num_pillars();
    }
    if (total_p == 0) return b.tape.constant(Tensor({B, C, H, W}, 0.0));

    Tensor x({total_p * N, D});
    std::vector<std::size_t> frame_of(total_p), cell_of(total_p);
    std::size_t base = 0;
    for (std::size_t f = 0; f < B; ++f) {
        const auto& pt = *frames[f];
        const std::size_t P = pt.num_pillars();
        for (std::size_t p = 0; p < P; ++p) {
            frame_of[base + p] = f;
            cell_of[base + p] = pt.coords[p].row * W + pt.coords[p].col;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t d = 0; d < D; ++d) x[((base + p) * N + n) * D + d] = pt.features[(d * P + p) * N + n];
        }
        base += P;
    }
    Var h = ad::linear(b.tape.constant(std::move(x)), b.p("pfn.linear.w"), b.p("pfn.linear.b"));
    // zero-padded slots take part in the statistics
    h = ad::relu(b.bn("pfn.bn", h, b.mode == Mode::Train && stat_p > 0 ? stat_p * N : 0));
    Var pooled = ad::max_over_axis(ad::reshape(h, {total_p, N, C}), 1);  // (P_total, C)

    Tensor img({B, C, H, W}, 0.0);
    const Tensor& pv = pooled.value();
    const std::size_t plane = H * W;
    for (std::size_t p = 0; p < total_p; ++p)
        for (std::size_t c = 0; c < C; ++c) img[(frame_of[p] * C + c) * plane + cell_of[p]] = pv[p * C + c];
    return ad::custom({pooled}, std::move(img),
                      [frame_of = std::move(frame_of), cell_of = std::move(cell_of), C, plane](const Tensor& up,
                                                                                              std::span<Tensor*> sinks) {
                          if (!sinks[0]) return;
                          Tensor& g = *sinks[0];
                          for (std::size_t p = 0; p < frame_of.size(); ++p)
                              for (std::size_t c = 0; c < C; ++c) g[p * C + c] += up[(frame_of[p] * C + c) * plane + cell_of[p]];
                      });
}

/// (B, C, H, W) -> (B, 4C, H/8, W/8).
inline Var backbone_forward(Bound& b, Var img) {
    const NetworkConfig& cfg = b.model.cfg;
    const ad::Shape& s = img.shape();
    if (s.size() != 4 || s[1] != cfg.channels || s[2] % 8 != 0 || s[3] % 8 != 0)
        throw ShapeMismatch("backbone_forward: expected (B, " + std::to_string(cfg.channels) +
                            ", H, W) with H, W divisible by 8, got " + ad::shape_str(s));
    const std::size_t stat = b.mode == Mode::Train ? b.stat_items : 0;
    Var x = img;
    std::vector<Var> parts;
    for (std::size_t blk = 0; blk < 3; ++blk) {
        for (std::size_t l = 0; l < cfg.layers_per_block[blk]; ++l) {
            const std::string name = detail::block_conv(blk, l);
            x = ad::relu(b.bn(name + ".bn", ad::conv2d(x, b.p(name + ".w"), l == 0 ? 2 : 1, 1), stat));
        }
        const std::size_t k = detail::layout(cfg).resample_kernel[blk];
        const std::string r = detail::resample(blk);
        parts.push_back(ad::relu(b.bn(r + ".bn", ad::conv2d(x, b.p(r + ".w"), k, 0), stat)));
    }
    return ad::concat(parts, 1);
}

struct HeadOutput {
    Var cls;  // (B, A*K, H', W')
    Var reg;  // (B, A*7, H', W')
    Var dir;  // (B, A*2, H', W')
};

inline HeadOutput head_forward(Bound& b, Var fm) {
    const NetworkConfig& cfg = b.model.cfg;
    const ad::Shape& s = fm.shape();
    if (s.size() != 4 || s[1] != cfg.feature_channels() || s[2] != cfg.out_height() || s[3] != cfg.out_width())
        throw ShapeMismatch("head_forward: feature map " + ad::shape_str(s) + " does not match the anchor grid (B, " +
                            std::to_string(cfg.feature_channels()) + ", " + std::to_string(cfg.out_height()) + ", " +
                            std::to_string(cfg.out_width()) + ")");
    return {ad::conv2d(fm, b.p("head.cls.w"), b.p("head.cls.b"), 1, 0),
            ad::conv2d(fm, b.p("head.reg.w"), b.p("head.reg.b"), 1, 0),
            ad::conv2d(fm, b.p("head.dir.w"), b.p("head.dir.b"), 1, 0)};
}

//////////////////////////// losses ////////////////////////////

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
inline double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

/// Sigmoid focal loss of one logit and its derivative.
inline std::pair<double, double> focal(double z, bool positive, double alpha, double gamma) {
    const double p = sigmoid(z);
    if (positive) {
        const double log_p = -softplus(-z), q = 1.0 - p;
        const double qg = std::pow(q, gamma);
        return {-alpha * qg * log_p, alpha * qg * (gamma * p * log_p - q)};
    }
    const double log_q = -softplus(z);
    const double pg = std::pow(p, gamma);
    return {-(1.0 - alpha) * pg * log_q, (1.0 - alpha) * pg * (p - gamma * (1.0 - p) * log_q)};
}

inline std::pair<double, double> smooth_l1(double r) {
    const double a = std::abs(r);
    return a < 1.0 ? std::pair{0.5 * r * r, r} : std::pair{a - 0.5, r > 0 ? 1.0 : -1.0};
}

/// Summed (L_cls, L_loc, L_dir) over a batch as a (3,) tape value.
inline Var detection_loss(const HeadOutput& out, const std::vector<const AnchorTargets*>& targets,
                          const NetworkConfig& cfg) {
    const ad::Shape& cs = out.cls.shape();
    const std::size_t B = cs.at(0), Hh = cfg.out_height(), Ww = cfg.out_width(), plane = Hh * Ww;
    const std::size_t A = cfg.anchors_per_cell(), K = cfg.num_classes(), Y = cfg.anchor_yaws.size();
    if (targets.size() != B || cs != ad::Shape{B, A * K, Hh, Ww} || out.reg.shape() != ad::Shape{B, A * 7, Hh, Ww} ||
        out.dir.shape() != ad::Shape{B, A * 2, Hh, Ww})
        throw ShapeMismatch("detection_loss: head outputs do not match " + std::to_string(B) + " target sets");
    const Tensor &cls = out.cls.value(), &reg = out.reg.value(), &dir = out.dir.value();
    Tensor gc(cls.shape, 0.0), gr(reg.shape, 0.0), gd(dir.shape, 0.0);
    double l_cls = 0, l_loc = 0, l_dir = 0;
    auto idx = [&](std::size_t b, std::size_t ch, std::size_t chans, std::size_t cell) {
        return (b * chans + ch) * plane + cell;
    };
    for (std::size_t b = 0; b < B; ++b) {
        const AnchorTargets& t = *targets[b];
        if (t.match.assign.size() != plane * A) throw ShapeMismatch("detection_loss: target count does not match anchors");
        for (std::size_t cell = 0; cell < plane; ++cell)
            for (std::size_t a = 0; a < A; ++a) {
                const std::size_t i = cell * A + a;
                const Assignment& as = t.match.assign[i];
                if (as.kind == MatchKind::Ignore) continue;
                const bool pos = as.kind == MatchKind::Positive;
                const std::size_t k_anchor = a / Y;
                for (std::size_t j = 0; j < K; ++j) {
                    const std::size_t at = idx(b, a * K + j, A * K, cell);
                    const auto [l, g] = focal(cls[at], pos && j == k_anchor, cfg.focal_alpha, cfg.focal_gamma);
                    l_cls += l;
                    gc[at] = g;
                }
                if (!pos) continue;
                const EncodedBox& e = t.boxes[i];
                for (std::size_t r = 0; r < 7; ++r) {
                    const std::size_t at = idx(b, a * 7 + r, A * 7, cell);
                    const auto [l, g] = smooth_l1(reg[at] - e.delta[r]);
                    l_loc += l;
                    gr[at] = g;
                }
                const std::size_t d0 = idx(b, a * 2, A * 2, cell), d1 = idx(b, a * 2 + 1, A * 2, cell);
                const double m = std::max(dir[d0], dir[d1]);
                const double e0 = std::exp(dir[d0] - m), e1 = std::exp(dir[d1] - m);
                const double lse = m + std::log(e0 + e1);
                l_dir += lse - (e.dir ? dir[d1] : dir[d0]);
                gd[d0] = e0 / (e0 + e1) - (e.dir == 0);
                gd[d1] = e1 / (e0 + e1) - (e.dir == 1);
            }
    }
    Tensor value({3});
    value.data = {l_cls, l_loc, l_dir};
    return ad::custom({out.cls, out.reg, out.dir}, std::move(value),
                      [gc = std::move(gc), gr = std::move(gr), gd = std::move(gd)](const Tensor& up, std::span<Tensor*> s) {
                          if (s[0]) ad::detail::axpy(*s[0], gc, up[0]);
                          if (s[1]) ad::detail::axpy(*s[1], gr, up[1]);
                          if (s[2]) ad::detail::axpy(*s[2], gd, up[2]);
                      });
}

inline void check_weights(const LossWeights& w, double beta_da) {
    for (double v : {w.cls, w.loc, w.dir, beta_da})
        if (!std::isfinite(v) || v < 0) throw ConfigError("total_loss: weights must be finite and non-negative");
}

/// (1 / max(N_pos, 1)) (b_cls L_cls + b_loc L_loc + b_dir L_dir) + b_DA L_DA.
inline double total_loss(double l_cls, double l_loc, double l_dir, double l_da, const LossWeights& w, double beta_da,
                         std::size_t n_pos) {
    check_weights(w, beta_da);
    const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(n_pos, 1));
    return norm * (w.cls * l_cls + w.loc * l_loc + w.dir * l_dir) + beta_da * l_da;
}

inline Var total_loss(Var det, std::optional<Var> l_da, const LossWeights& w, double beta_da, std::size_t n_pos) {
    check_weights(w, beta_da);
    const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(n_pos, 1));
    Tensor coef({3});
    coef.data = {norm * w.cls, norm * w.loc, norm * w.dir};
    Var sup = ad::sum(ad::mul(det, det.tape().constant(std::move(coef))));
    return l_da ? ad::add(sup, ad::scale(*l_da, beta_da)) : sup;
}

//////////////////////////// training ////////////////////////////

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 2;  // bn, per domain
    double lr = 1e-3;
    double beta_da = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size == 0) throw ConfigError("training: batch size must be >= 1");
        if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("training: learning rate must be positive");
        if (!(beta_da >= 0) || !std::isfinite(beta_da)) throw ConfigError("training: beta_da must be finite and >= 0");
    }
};

struct LossRow {
    std::size_t step = 0;
    double l_cls = 0, l_loc = 0, l_dir = 0, l_da = 0, l_total = 0;
    friend bool operator==(const LossRow&, const LossRow&) = default;
};

inline std::string loss_log_csv(const std::vector<LossRow>& rows) {
    std::string out = "step,l_cls,l_loc,l_dir,l_da,l_total\n";
    char buf[256];
    for (const LossRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.10e,%.10e,%.10e,%.10e,%.10e\n", r.step, r.l_cls, r.l_loc, r.l_dir, r.l_da,
                      r.l_total);
        out += buf;
    }
    return out;
}

/// Pillarization seed of a frame: FNV-1a of its id, so training and inference
/// sample the same points.
inline std::uint64_t frame_seed(const std::string& frame_id) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : frame_id) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline pillar::PillarTensor prepare_frame(const Frame& f, const NetworkConfig& cfg) {
    return pillar::pillarize(clip_to_range(f.cloud, cfg.grid.range), cfg.grid, frame_seed(f.frame_id));
}

/// A total loss this many times above its first-step value (floored at 1) is
/// treated as divergence, like a non-finite loss. Adam bounds every update by
/// about lr, so an oversized step explodes the loss long before it overflows.
constexpr double kDivergenceFactor = 1e6;

struct TrainResult {
    Model model;
    std::vector<LossRow> log;
};

/// Called after each step with the step row; return false to stop early.
using StepCallback = std::function<bool(const LossRow&)>;

/// Each step takes bn sim frames (labeled) and, when beta_da > 0, bn real
/// frames. Both go through one shared forward pass with the sim half first;
/// batch-norm statistics come from the sim half. Detection losses use the sim
/// half, CORAL compares the two halves of the backbone feature map.
inline TrainResult train(const Dataset& sim, const Dataset& real, const NetworkConfig& cfg, const TrainConfig& tc,
                         const StepCallback& on_step = {}) {
    cfg.validate();
    tc.validate();
    if (sim.empty()) throw EmptyDataset("train: simulated dataset has no frames");
    if (!sim.labeled) throw ConfigError("train: simulated dataset must be labeled");
    const bool use_da = tc.beta_da > 0;
    if (use_da && real.empty()) throw EmptyDataset("train: real dataset has no frames");

    const AnchorGrid anchors = make_anchors(cfg);
    std::vector<pillar::PillarTensor> sim_p, real_p;
    std::vector<AnchorTargets> sim_t;
    for (const Frame& f : sim.frames) {
        sim_p.push_back(prepare_frame(f, cfg));
        sim_t.push_back(make_targets(anchors, f.boxes, cfg));
    }
    if (use_da)
        for (const Frame& f : real.frames) real_p.push_back(prepare_frame(f, cfg));

    TrainResult res{init_model(cfg, mix_seed(tc.seed, 0)), {}};
    Model& model = res.model;
    ad::AdamState adam;
    const ad::AdamOptions aopt{tc.lr};
    Rng shuffle(mix_seed(tc.seed, 1)), real_shuffle(mix_seed(tc.seed, 2));
    auto permutation = [](Rng& rng, std::size_t n) {
        std::vector<std::size_t> p(n);
        std::iota(p.begin(), p.end(), 0);
        for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
        return p;
    };
    std::vector<std::size_t> real_order;
    std::size_t real_pos = 0;
    auto next_real = [&]() {
        if (real_pos == real_order.size()) {
            real_order = permutation(real_shuffle, real_p.size());
            real_pos = 0;
        }
        return real_order[real_pos++];
    };

    double first_loss = 1.0;
    const std::size_t bn = tc.batch_size;
    const std::size_t steps_per_epoch = std::max<std::size_t>(1, sim_p.size() / bn);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto order = permutation(shuffle, sim_p.size());
        for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
            std::vector<const pillar::PillarTensor*> batch;
            std::vector<const AnchorTargets*> targets;
            std::size_t n_pos = 0;
            for (std::size_t j = s * bn; j < std::min(order.size(), (s + 1) * bn); ++j) {
                batch.push_back(&sim_p[order[j]]);
                targets.push_back(&sim_t[order[j]]);
                n_pos += sim_t[order[j]].match.n_pos;
            }
            const std::size_t n_sim = batch.size();
            if (use_da)
                for (std::size_t j = 0; j < n_sim; ++j) batch.push_back(&real_p[next_real()]);

            Tape tape;
            Bound b(tape, model, Mode::Train, true);
            b.stat_items = n_sim;
            Var fm = backbone_forward(b, pfn_forward(b, batch));
            Var fm_sim = use_da ? ad::slice(fm, 0, n_sim) : fm;
            Var det = detection_loss(head_forward(b, fm_sim), targets, cfg);
            std::optional<Var> l_da;
            if (use_da) {
                const ad::Shape& s4 = fm.shape();
                const ad::Shape flat{n_sim * s4[1], s4[2] * s4[3]};
                l_da = coral::coral_loss(ad::reshape(fm_sim, flat), ad::reshape(ad::slice(fm, n_sim, 2 * n_sim), flat));
            }
            Var total = total_loss(det, l_da, cfg.weights, tc.beta_da, n_pos);

            LossRow row{step, det.value()[0], det.value()[1], det.value()[2], l_da ? l_da->value()[0] : 0.0,
                        total.value()[0]};
            if (!std::isfinite(row.l_total) || !std::isfinite(row.l_da))
                throw NumericError("training diverged: non-finite loss at step " + std::to_string(step));
            if (step == 0) first_loss = std::max(row.l_total, 1.0);
            if (row.l_total > kDivergenceFactor * first_loss)
                throw NumericError("training diverged: loss " + std::to_string(row.l_total) + " at step " +
                                   std::to_string(step) + " exceeds " + std::to_string(kDivergenceFactor) +
                                   " times its initial value");
            const ad::GradientMap grads = tape.backward(total);
            std::vector<Tensor*> ps;
            std::vector<const Tensor*> gs;
            for (std::size_t i = 0; i < model.params.size(); ++i) {
                ps.push_back(&model.params[i].value);
                gs.push_back(&grads[b.vars[i]]);
            }
            ad::adam_step(ps, gs, adam, aopt);
            for (const Tensor* p : ps)
                for (double v : p->data)
                    if (!std::isfinite(v))
                        throw NumericError("training diverged: non-finite parameter after step " + std::to_string(step));
            res.log.push_back(row);
            if (on_step && !on_step(row)) return res;
        }
    }
    return res;
}

//////////////////////////// inference ////////////////////////////

/// Greedy rotated-BEV NMS; returns kept indices in descending score order.
inline std::vector<std::size_t> nms(const std::vector<Box3D>& boxes, double iou_threshold) {
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return boxes[a].score.value_or(0) > boxes[b].score.value_or(0);
    });
    std::vector<std::size_t> keep;
    for (std::size_t i : order) {
        bool ok = true;
        for (std::size_t k : keep)
            if (boxes[k].cls == boxes[i].cls && geom::bev_iou(boxes[k], boxes[i]) > iou_threshold) {
                ok = false;
                break;
            }
        if (ok) keep.push_back(i);
    }
    return keep;
}

struct InferConfig {
    double score_threshold = 0.1;
    double nms_iou = 0.5;
    std::size_t max_detections = 100;
};

/// Eval-mode forward of one or more frames; returns the head outputs.
inline HeadOutput forward_eval(Tape& tape, Model& model, const std::vector<const pillar::PillarTensor*>& frames) {
    Bound b(tape, model, Mode::Eval, false);
    return head_forward(b, backbone_forward(b, pfn_forward(b, frames)));
}

inline std::vector<Box3D> decode_predictions(const HeadOutput& out, std::size_t item, const AnchorGrid& grid,
                                             const NetworkConfig& cfg, const InferConfig& ic) {
    const std::size_t plane = grid.height * grid.width, A = grid.per_cell, K = cfg.num_classes();
    const Tensor &cls = out.cls.value(), &reg = out.reg.value(), &dir = out.dir.value();
    std::vector<Box3D> cand;
    for (std::size_t cell = 0; cell < plane; ++cell)
        for (std::size_t a = 0; a < A; ++a) {
            const std::size_t i = cell * A + a, k = grid.spec[i];
            const double score = sigmoid(cls[(item * A * K + a * K + k) * plane + cell]);
            if (!(score > ic.score_threshold)) continue;
            Encoding t;
            for (std::size_t r = 0; r < 7; ++r) t[r] = reg[(item * A * 7 + a * 7 + r) * plane + cell];
            const double d0 = dir[(item * A * 2 + a * 2) * plane + cell], d1 = dir[(item * A * 2 + a * 2 + 1) * plane + cell];
            Box3D b = decode_box(t, d1 > d0 ? 1 : 0, grid.anchors[i]);
            b.score = score;
            cand.push_back(b);
        }
    std::vector<Box3D> kept;
    for (std::size_t i : nms(cand, ic.nms_iou)) {
        if (kept.size() == ic.max_detections) break;
        kept.push_back(cand[i]);
    }
    return kept;
}

inline std::vector<Box3D> infer(const Frame& frame, const Model& model, const InferConfig& ic = {}) {
    Model m = model;
    const auto pt = prepare_frame(frame, m.cfg);
    if (pt.num_pillars() == 0) return {};
    Tape tape;
    const HeadOutput out = forward_eval(tape, m, {&pt});
    return decode_predictions(out, 0, make_anchors(m.cfg), m.cfg, ic);
}

//////////////////////////// checkpoints ////////////////////////////

inline std::vector<ad::NamedTensor> model_tensors(const Model& m) {
    std::vector<ad::NamedTensor> out = m.params;
    for (std::size_t i = 0; i < m.bn.size(); ++i) {
        out.push_back({m.bn_names[i] + ".running_mean", m.bn[i].mean});
        out.push_back({m.bn_names[i] + ".running_var", m.bn[i].var});
    }
    return out;
}

inline void save_model(const Model& m, const std::filesystem::path& path) { ad::save_checkpoint(model_tensors(m), path); }

/// Loads a checkpoint into a model built from `cfg`; every tensor name and
/// shape must match exactly.
inline Model model_from_tensors(const NetworkConfig& cfg, const std::vector<ad::NamedTensor>& tensors) {
    Model m = init_model(cfg, 0);
    auto expected = model_tensors(m);
    if (tensors.size() != expected.size())
        throw CheckpointMismatch("checkpoint has " + std::to_string(tensors.size()) + " tensors, network expects " +
                                 std::to_string(expected.size()));
    for (std::size_t i = 0; i < tensors.size(); ++i)
        if (tensors[i].name != expected[i].name || tensors[i].value.shape != expected[i].value.shape)
            throw CheckpointMismatch("checkpoint tensor " + tensors[i].name + " " + ad::shape_str(tensors[i].value.shape) +
                                     " does not match expected " + expected[i].name + " " +
                                     ad::shape_str(expected[i].value.shape));
    for (std::size_t i = 0; i < m.params.size(); ++i) m.params[i].value = tensors[i].value;
    for (std::size_t i = 0; i < m.bn.size(); ++i) {
        m.bn[i].mean = tensors[m.params.size() + 2 * i].value;
        m.bn[i].var = tensors[m.params.size() + 2 * i + 1].value;
    }
    return m;
}

inline Model load_model(const NetworkConfig& cfg, const std::filesystem::path& path) {
    return model_from_tensors(cfg, ad::load_checkpoint(path));
}

}  // namespace s2r::det
