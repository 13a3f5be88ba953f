// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   acceptance <path-to-s2r> [criterion ...]
//
// With no criterion names every check runs. The domain-adaptation check trains
// 20 desk-scale detectors and dominates the runtime.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <unistd.h>

#include "eval_oracles.hpp"
#include "iou_oracles.hpp"
#include "oracles.hpp"
#include "primitive_cases.hpp"
#include "s2r/config.hpp"
#include "s2r/coral.hpp"
#include "s2r/detector.hpp"
#include "s2r/diagnostics.hpp"
#include "s2r/eval.hpp"
#include "s2r/io.hpp"
#include "s2r/pillar.hpp"
#include "s2r/scenegen.hpp"

namespace fs = std::filesystem;
using namespace s2r;
using namespace s2r::testing;

namespace {

struct Verdict {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (ok) return;
        pass = false;
        detail += (detail.empty() ? "" : "; ") + what;
    }
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

//////////////////////////// coral ////////////////////////////

Verdict check_coral() {
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    auto column = [](std::vector<double> x) {
        const std::size_t n = x.size();
        return coral::FeatureMatrix{Tensor({n, 1}, std::move(x))};
    };
    v.require(coral::coral_loss(column({0, 2}), column({0, 0})) == 1.0, "d=1 case != 1");
    v.require(coral::coral_loss(column({0, 2}), column({0, 4})) == 9.0, "d=1 case != 9");
    Rng rng(31);
    double self = 0.0, worst = 0.0;
    for (int i = 0; i < 20; ++i) {
        const coral::FeatureMatrix a{random_tensor(rng, {6, 4})};
        self = std::max(self, std::abs(coral::coral_loss(a, a)));
    }
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng r(5000 + seed);
        const Tensor s = random_tensor(r, {6, 4}), t = random_tensor(r, {6, 4});
        auto [gs, gt] = coral::coral_backward({s}, {t});
        const auto fd = finite_difference(
            [](const std::vector<Tensor>& in) {
                return coral::coral_loss(coral::FeatureMatrix{in[0]}, coral::FeatureMatrix{in[1]});
            },
            {s, t}, 1e-6);
        worst = std::max({worst, relative_error(gs, fd[0]), relative_error(gt, fd[1])});
    }
    const double secs = seconds_since(t0);
    v.require(self <= 1e-12, "loss(A,A) = " + fmt("%.3g", self));
    v.require(worst < 1e-6, "gradient rel err " + fmt("%.3g", worst));
    v.require(secs < 1.0, "runtime " + fmt("%.2f s", secs));
    if (v.pass) v.detail = "hand cases exact, max loss(A,A) " + fmt("%.1e", self) + ", worst FD rel err " + fmt("%.1e", worst) + ", " + fmt("%.2f s", secs);
    return v;
}

//////////////////////////// autodiff ////////////////////////////

Verdict check_autodiff() {
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::string worst_name;
    std::size_t checked = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed)
        for (const auto& c : primitive_cases(seed)) {
            const double e = check_gradients(c.build, c.inputs).worst_relative_error;
            ++checked;
            if (e > worst) worst = e, worst_name = c.name;
            v.require(e < 1e-5, c.name + " seed " + std::to_string(seed) + " rel err " + fmt("%.3g", e));
        }
    const std::vector<double> losses = overfit_mlp(5, 500);
    const double ratio = losses.front() / losses.back();
    v.require(ratio >= 100.0, "MLP loss only fell " + fmt("%.1fx", ratio));
    const double secs = seconds_since(t0);
    v.require(secs < 30.0, "runtime " + fmt("%.1f s", secs));
    if (v.pass)
        v.detail = std::to_string(checked) + " primitive checks, worst rel err " + fmt("%.1e", worst) + " (" + worst_name +
                   "), MLP loss fell " + fmt("%.0fx", ratio) + ", " + fmt("%.1f s", secs);
    return v;
}

//////////////////////////// shape contract ////////////////////////////

Verdict check_shapes() {
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    const det::NetworkConfig cfg = det::paper_network();
    det::Model m = det::init_model(cfg, 0);
    ad::Tape tape;
    det::Bound b(tape, m, ad::Mode::Eval, false);
    const pillar::PillarTensor empty = pillar::pillarize(PointCloud{}, cfg.grid, 0);
    const ad::Var img = det::pfn_forward(b, {&empty});
    const ad::Var fm = det::backbone_forward(b, img);
    const coral::FeatureMatrix f = coral::reshape_feature_map(fm.value());
    const double secs = seconds_since(t0);
    v.require(img.shape() == ad::Shape{1, 64, 400, 400}, "pseudo-image " + ad::shape_str(img.shape()));
    v.require(fm.shape() == ad::Shape{1, 256, 50, 50}, "feature map " + ad::shape_str(fm.shape()));
    v.require(f.data.shape == ad::Shape{256, 2500}, "coral input " + ad::shape_str(f.data.shape));
    v.require(secs < 10.0, "runtime " + fmt("%.1f s", secs));
    if (v.pass)
        v.detail = "feature map " + ad::shape_str(fm.shape()) + ", coral input " + ad::shape_str(f.data.shape) + ", " +
                   fmt("%.1f s", secs);
    return v;
}

//////////////////////////// pillarization ////////////////////////////

PointCloud random_clipped_cloud(Rng& rng, const RangeConfig& r, std::size_t n) {
    PointCloud c;
    for (std::size_t i = 0; i < n; ++i)
        c.points.push_back({static_cast<float>(rng.uniform(r.x_min, r.x_max - 1e-3)),
                            static_cast<float>(rng.uniform(r.y_min, r.y_max - 1e-3)),
                            static_cast<float>(rng.uniform(r.z_min, r.z_max - 1e-3)), static_cast<float>(rng.uniform())});
    return c;
}

std::vector<std::vector<double>> sorted_rows(const pillar::PillarTensor& t, std::size_t p) {
    std::vector<std::vector<double>> rows;
    for (std::size_t n = 0; n < t.counts[p]; ++n) {
        std::vector<double> row;
        for (std::size_t d = 0; d < pillar::kDecoratedDim; ++d) row.push_back(t.at(d, p, n));
        rows.push_back(row);
    }
    std::sort(rows.begin(), rows.end());
    return rows;
}

Verdict check_pillarization() {
    Verdict v;
    pillar::PillarGridConfig base;
    base.range = {-2, 2, -2, 2, -3, 1};
    base.dx = base.dy = 1.0;
    Rng rng(404);
    std::size_t bad_conservation = 0, bad_padding = 0, bad_determinism = 0, bad_permutation = 0;
    for (int trial = 0; trial < 100; ++trial) {
        pillar::PillarGridConfig cfg = base;
        cfg.max_points_per_pillar = 1 + rng.below(8);
        cfg.max_pillars = 1 + rng.below(20);
        PointCloud c = random_clipped_cloud(rng, cfg.range, rng.below(120));
        const std::uint64_t seed = rng.next_u64();
        const pillar::PillarTensor t = pillar::pillarize(c, cfg, seed);
        bad_determinism += !(pillar::pillarize(c, cfg, seed) == t);

        std::map<std::size_t, std::size_t> cells;
        for (const Point& p : c.points) {
            const auto cell = pillar::cell_of(cfg, p.x, p.y);
            ++cells[cell.row * cfg.width() + cell.col];
        }
        std::size_t expected = 0;
        std::vector<std::size_t> sizes;
        for (auto [cell, n] : cells) sizes.push_back(std::min(n, cfg.max_points_per_pillar));
        // kept pillars are the fullest ones, so the kept point total is the top-P sum
        std::sort(sizes.rbegin(), sizes.rend());
        for (std::size_t i = 0; i < std::min(sizes.size(), cfg.max_pillars); ++i) expected += sizes[i];
        const std::size_t total = std::accumulate(t.counts.begin(), t.counts.end(), std::size_t{0});
        bad_conservation += total != expected || t.num_pillars() != std::min(cells.size(), cfg.max_pillars);

        for (std::size_t p = 0; p < t.num_pillars(); ++p)
            for (std::size_t n = t.counts[p]; n < t.max_points(); ++n)
                for (std::size_t d = 0; d < pillar::kDecoratedDim; ++d) bad_padding += t.at(d, p, n) != 0.0;

        // permutation: without truncation the per-pillar point sets must not change
        pillar::PillarGridConfig roomy = base;
        roomy.max_points_per_pillar = 200;
        roomy.max_pillars = 100;
        const pillar::PillarTensor a = pillar::pillarize(c, roomy, seed);
        rng.shuffle(c.points);
        const pillar::PillarTensor b = pillar::pillarize(c, roomy, seed);
        bool same = a.coords == b.coords && a.counts == b.counts;
        for (std::size_t p = 0; same && p < a.num_pillars(); ++p) {
            const auto ra = sorted_rows(a, p), rb = sorted_rows(b, p);
            for (std::size_t i = 0; i < ra.size(); ++i)
                for (std::size_t d = 0; d < ra[i].size(); ++d) same = same && std::abs(ra[i][d] - rb[i][d]) < 1e-12;
        }
        bad_permutation += !same;
    }
    v.require(bad_conservation == 0, std::to_string(bad_conservation) + " conservation failures");
    v.require(bad_padding == 0, std::to_string(bad_padding) + " nonzero padding entries");
    v.require(bad_determinism == 0, std::to_string(bad_determinism) + " nondeterministic results");
    v.require(bad_permutation == 0, std::to_string(bad_permutation) + " permutation failures");

    // 100 points in one pillar of the paper grid keep exactly 60
    PointCloud dense;
    for (int i = 0; i < 100; ++i)
        dense.points.push_back({static_cast<float>(rng.uniform(0.0, 0.24)), static_cast<float>(rng.uniform(0.0, 0.24)),
                                static_cast<float>(rng.uniform(-1, 0)), 0.5f});
    const pillar::PillarTensor t = pillar::pillarize(dense, pillar::paper_grid(), 3);
    v.require(t.num_pillars() == 1 && t.counts[0] == 60 && t.max_points() == 60,
              "paper grid kept " + std::to_string(t.num_pillars() ? t.counts[0] : 0) + " of 100 points");
    if (v.pass) v.detail = "100 random clouds: conservation, zero padding, determinism, permutation; N=60 truncation";
    return v;
}

//////////////////////////// iou ////////////////////////////

Verdict check_iou() {
    Verdict v;
    Rng rng(2024);
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
        const Box3D a = random_box(rng), b = random_box(rng);
        worst = std::max(worst, std::abs(geom::bev_iou(a, b) - raster_iou(a, b)));
    }
    const Box3D a = box(1, 2, 0, 4, 2, 1.5, 0.4);
    const double same = geom::bev_iou(a, a), apart = geom::bev_iou(a, box(101, 2, 0, 4, 2, 1.5));
    const double third = geom::bev_iou(box(0, 0, 0, 1, 1, 1), box(0.5, 0, 0, 1, 1, 1));
    v.require(worst < 5e-3, "raster oracle diff " + fmt("%.3g", worst));
    v.require(std::abs(same - 1.0) <= 1e-12, "identical boxes " + fmt("%.17g", same));
    v.require(apart == 0.0, "disjoint boxes " + fmt("%.17g", apart));
    v.require(std::abs(third - 1.0 / 3.0) <= 1e-12, "half-shifted squares " + fmt("%.17g", third));
    if (v.pass) v.detail = "200 rotated pairs within " + fmt("%.1e", worst) + " of the raster oracle; hand cases exact";
    return v;
}

//////////////////////////// ap / aos ////////////////////////////

Verdict check_ap_aos() {
    Verdict v;
    const Box3D g = car(0, 0), g2 = car(10, 0);
    const double ap11 = eval::average_precision({with_score(g, 0.9), with_score(car(30, 0), 0.8)}, {g, g2}, ClassId::Car,
                                                0.5, eval::Interpolation::Points11);
    v.require(std::abs(ap11 - 600.0 / 11.0) <= 1e-9, "11-point hand case " + fmt("%.12f", ap11));

    Rng rng(88);
    std::size_t exceed = 0, unequal = 0, mismatches = 0;
    for (int i = 0; i < 50; ++i) {
        const auto frames = random_frames(rng, 5);
        const auto c = eval::pr_curve(frames, ClassId::Car, 0.5, eval::Metric::Bev, eval::Interpolation::Points41);
        exceed += c.aos > c.ap + 1e-12;
        const auto exact = random_frames(rng, 5, true);
        const auto e = eval::pr_curve(exact, ClassId::Car, 0.5, eval::Metric::Bev, eval::Interpolation::Points41);
        unequal += std::abs(e.aos - e.ap) > 1e-9;
    }
    std::size_t compared = 0;
    for (int i = 0; i < 100; ++i) {
        const auto frames = random_frames(rng, 5);
        std::size_t n_gt = 0;
        for (const auto& f : frames) n_gt += f.second.size();
        if (n_gt == 0) continue;
        for (auto interp : {eval::Interpolation::Points41, eval::Interpolation::Points11}) {
            const auto c = eval::pr_curve(frames, ClassId::Car, 0.5, eval::Metric::Bev, interp);
            const Brute b = brute_force(frames, ClassId::Car, 0.5, eval::recall_points(interp));
            ++compared;
            mismatches += std::abs(c.ap - b.ap) > 1e-9 || std::abs(c.aos - b.aos) > 1e-9;
        }
    }
    v.require(exceed == 0, std::to_string(exceed) + " of 50 instances with AOS > AP");
    v.require(unequal == 0, std::to_string(unequal) + " of 50 exact-orientation instances with AOS != AP");
    v.require(mismatches == 0, std::to_string(mismatches) + " brute-force mismatches");
    if (v.pass)
        v.detail = "11-point hand case " + fmt("%.9f", ap11) + "; AOS <= AP and AOS == AP properties on 50 instances; " +
                   std::to_string(compared) + " brute-force comparisons";
    return v;
}

//////////////////////////// gap tooling ////////////////////////////

Verdict check_gap() {
    Verdict v;
    scene::GapConfig gap;
    gap.dropout_rate = 0.3;
    const auto ds = scene::generate_dataset(scene::desk_scene(), gap, 20, 2024);
    const double est = diag::gap_report(ds.sim, ds.real).dropout_estimate;
    v.require(std::abs(est - 0.3) <= 0.03, "dropout estimate " + fmt("%.4f", est));

    // Constructed occlusions: behind the sensor on the ground is dark, while a
    // point short of the body, one above the roof line, and one ahead survive.
    const Box3D ego = scene::SceneConfig{}.ego_footprint;
    scene::GapConfig shadow;
    shadow.ego_shadow = true;
    Frame f;
    f.cloud.points = {{-10, 0, -1.8f, 0}, {-0.3f, 0, 0, 0}, {-10, 0, 0.5f, 0}, {10, 0, -1.8f, 0}, {-2, 0, -1.8f, 0}};
    const Frame r = scene::realify(f, shadow, 0, ego);
    const bool cases_ok = r.cloud.size() == 3 && r.cloud.points[0] == f.cloud.points[1] &&
                          r.cloud.points[1] == f.cloud.points[2] && r.cloud.points[2] == f.cloud.points[3];
    v.require(cases_ok, "occlusion cases kept " + std::to_string(r.cloud.size()) + " of 5 points (want 3)");

    // Ground points: hidden exactly when the roof plane is crossed before the ray leaves the footprint.
    const scene::SceneConfig sc = scene::desk_scene();
    const double h = sc.lidar.sensor_height, factor = h / -sc.ego_footprint.z_max();
    auto exit_distance = [&](double phi) {
        const Box3D& e = sc.ego_footprint;
        const double c = std::cos(phi), s = std::sin(phi);
        double d = 1e300;
        if (c > 0) d = std::min(d, (e.center.x + e.size.x / 2) / c);
        if (c < 0) d = std::min(d, (e.center.x - e.size.x / 2) / c);
        if (s > 0) d = std::min(d, (e.center.y + e.size.y / 2) / s);
        if (s < 0) d = std::min(d, (e.center.y - e.size.y / 2) / s);
        return d;
    };
    Rng rng(12);
    Frame ground;
    for (int i = 0; i < 5000; ++i) {
        const double phi = rng.uniform(-kPi, kPi), rho = rng.uniform(0.1, 30);
        ground.cloud.points.push_back({static_cast<float>(rho * std::cos(phi)), static_cast<float>(rho * std::sin(phi)),
                                       static_cast<float>(-h), 0});
    }
    const Frame rg = scene::realify(ground, shadow, 0, sc.ego_footprint);
    std::size_t j = 0, wrong = 0;
    for (const Point& p : ground.cloud.points) {
        const bool kept = j < rg.cloud.size() && rg.cloud.points[j] == p;
        j += kept;
        const double rho = std::hypot(p.x, p.y), boundary = exit_distance(std::atan2(p.y, p.x)) * factor;
        if (std::abs(rho - boundary) >= 1e-3) wrong += kept != (rho > boundary);
    }
    v.require(wrong == 0, std::to_string(wrong) + " ground points on the wrong side of the shadow boundary");
    if (v.pass)
        v.detail = "dropout 0.3 estimated as " + fmt("%.4f", est) + " over 20 frames; occlusion cases and 5000-point shadow boundary exact";
    return v;
}

//////////////////////////// domain adaptation ////////////////////////////

struct SeedRun {
    double base_ap = 0, da_ap = 0, da_initial = 0, da_at_fifth = 0, seconds = 0;
};

double real_car_ap(const det::Model& m, const Dataset& real_eval, const config::RunConfig& rc) {
    eval::Predictions preds;
    for (const Frame& f : real_eval.frames) preds[f.frame_id] = det::infer(f, m, rc.infer);
    return eval::evaluate(preds, real_eval, rc.eval_config()).value("car_bev@0.50");
}

// Same data path as `s2r gen` followed by two `s2r train` runs.
SeedRun run_seed(std::uint64_t seed, double beta) {
    const auto t0 = std::chrono::steady_clock::now();
    config::RunConfig rc;
    rc.scene.seed = rc.training.seed = seed;
    const auto train = scene::generate_dataset(rc.scene, rc.gap, rc.train_frames, seed, scene::Split::Train);
    const auto evals = scene::generate_dataset(rc.scene, rc.gap, rc.eval_frames, mix_seed(seed, 1), scene::Split::Eval);
    SeedRun out;
    det::TrainConfig tc = rc.train_config();
    tc.beta_da = 0.0;
    out.base_ap = real_car_ap(det::train(train.sim, {}, rc.network, tc).model, evals.real, rc);
    tc.beta_da = beta;
    const det::TrainResult da = det::train(train.sim, train.real, rc.network, tc);
    out.da_ap = real_car_ap(da.model, evals.real, rc);
    // CORAL term at the 20% mark, averaged over the preceding 10 steps to damp batch noise
    const std::size_t mark = da.log.size() / 5, from = mark >= 10 ? mark - 10 : 0;
    double acc = 0;
    for (std::size_t i = from; i < mark; ++i) acc += da.log[i].l_da;
    out.da_initial = da.log.front().l_da;
    out.da_at_fifth = acc / static_cast<double>(std::max<std::size_t>(1, mark - from));
    out.seconds = seconds_since(t0);
    return out;
}

Verdict check_domain_adaptation() {
    Verdict v;
    const double beta = config::kDeskBetaDa;
    std::size_t wins = 0, fast_drops = 0;
    double worst_seconds = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const SeedRun r = run_seed(seed, beta);
        const bool win = r.da_ap > r.base_ap, drop = r.da_at_fifth <= 0.5 * r.da_initial;
        wins += win;
        fast_drops += drop;
        worst_seconds = std::max(worst_seconds, r.seconds);
        std::printf("    seed %llu: real car_bev@0.50 baseline %.2f, coral %.2f (%s); coral loss %.3e -> %.3e at 20%% (%s); %.0f s\n",
                    static_cast<unsigned long long>(seed), r.base_ap, r.da_ap, win ? "higher" : "not higher", r.da_initial,
                    r.da_at_fifth, drop ? "-50% ok" : "-50% missed", r.seconds);
        std::fflush(stdout);
    }
    v.require(wins >= 7, "coral higher in " + std::to_string(wins) + "/10 seeds");
    v.require(fast_drops == 10, "coral loss halved by 20% of steps in " + std::to_string(fast_drops) + "/10 seeds");
    v.require(worst_seconds < 15 * 60, "slowest seed " + fmt("%.0f s", worst_seconds));
    if (v.pass)
        v.detail = "beta_da " + fmt("%g", beta) + ": coral higher in " + std::to_string(wins) +
                   "/10 seeds, coral loss halved by 20% of steps in 10/10, slowest seed " + fmt("%.0f s", worst_seconds);
    return v;
}

//////////////////////////// determinism ////////////////////////////

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    if (!fs::exists(dir)) return files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = io::detail::read_file(e.path());
    return files;
}

Verdict check_determinism(const std::string& s2r) {
    Verdict v;
    const fs::path w = fs::temp_directory_path() / ("s2r_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(w);
    fs::create_directories(w);
    io::detail::write_file(w / "cfg.json",
                           R"({"scene": {"train_frames": 6, "eval_frames": 4}, "training": {"epochs": 2}, "coral": {"beta_da": 100}})");
    auto run = [&](const std::string& args) {
        const std::string cmd = "\"" + s2r + "\" " + args + " --config \"" + (w / "cfg.json").string() + "\" > /dev/null 2>&1";
        return std::system(cmd.c_str()) == 0;
    };
    auto p = [&](const char* name) { return "\"" + (w / name).string() + "\""; };
    std::size_t files = 0;
    for (const char* k : {"a", "b"}) {
        const std::string s(k);
        v.require(run("gen --seed 7 --out " + p(("gen_" + s).c_str())), "gen failed");
        v.require(run("stats --data " + p("gen_a") + " --out " + p(("stats_" + s).c_str())), "stats failed");
        v.require(run("train --data " + p("gen_a") + " --out " + p(("train_" + s).c_str())), "train failed");
        v.require(run("eval --data " + p("gen_a") + " --checkpoint " + p("train_a/checkpoint.ckpt") + " --out " +
                      p(("eval_" + s).c_str())),
                  "eval failed");
    }
    for (const char* stage : {"gen", "stats", "train", "eval"}) {
        const auto a = snapshot(w / (std::string(stage) + "_a")), b = snapshot(w / (std::string(stage) + "_b"));
        v.require(!a.empty() && a == b, std::string(stage) + " outputs differ between reruns");
        files += a.size();
    }
    fs::remove_all(w);
    if (v.pass) v.detail = "gen, stats, train (with coral) and eval reruns byte-identical across " + std::to_string(files) + " files";
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: acceptance <path-to-s2r> [criterion ...]\n");
        return 2;
    }
    const std::string s2r = argv[1];
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"coral", check_coral},
        {"autodiff", check_autodiff},
        {"shape-contract", check_shapes},
        {"pillarization", check_pillarization},
        {"iou", check_iou},
        {"ap-aos", check_ap_aos},
        {"gap-tooling", check_gap},
        {"determinism", [&] { return check_determinism(s2r); }},
        {"domain-adaptation", check_domain_adaptation},
    };
    std::vector<std::string> wanted(argv + 2, argv + argc);
    int failed = 0, ran = 0;
    for (const auto& [name, check] : criteria) {
        if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), name) == wanted.end()) continue;
        ++ran;
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v.pass = false;
            v.detail = std::string("threw: ") + e.what();
        }
        failed += !v.pass;
        std::printf("%s %-18s %s\n", v.pass ? "PASS" : "FAIL", name.c_str(), v.detail.c_str());
        std::fflush(stdout);
    }
    if (ran == 0) {
        std::fprintf(stderr, "no criterion matched\n");
        return 2;
    }
    return failed == 0 ? 0 : 1;
}
