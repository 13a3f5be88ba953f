// s2r: generate paired sim/real datasets, train with or without CORAL,
// evaluate, and emit dataset diagnostics.
//
// Exit codes: 0 ok, 1 other error, 2 config, 3 io, 4 numeric, 5 checkpoint.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "s2r/config.hpp"
#include "s2r/detector.hpp"
#include "s2r/diagnostics.hpp"
#include "s2r/eval.hpp"
#include "s2r/io.hpp"
#include "s2r/scenegen.hpp"

namespace fs = std::filesystem;
using namespace s2r;

namespace {

struct Common {
    std::string config_path;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
    cmd->add_option("--config", c.config_path, "JSON run configuration (defaults apply to missing keys)");
    auto* o = cmd->add_option("--out", c.out, "output directory");
    if (out_required) o->required();
    cmd->add_option("--seed", c.seed, "overrides scene.seed and training.seed");
    cmd->add_option("--set", c.sets, "override, e.g. --set training.epochs=5")->take_all();
}

config::RunConfig resolve(const Common& c) {
    config::json doc = config::json::object();
    if (!c.config_path.empty()) {
        if (!fs::exists(c.config_path)) throw IoError("missing config file: " + c.config_path);
        doc = config::json::parse(io::detail::read_file(c.config_path), nullptr, false);
        if (doc.is_discarded()) throw ConfigError("config file is not valid JSON: " + c.config_path);
    }
    doc = config::merge_over_defaults(doc);
    for (const std::string& s : c.sets) config::apply_override(doc, s);
    if (c.seed) {
        doc["scene"]["seed"] = *c.seed;
        doc["training"]["seed"] = *c.seed;
    }
    return config::from_json(doc);
}

void write_text(const fs::path& p, const std::string& text) { io::detail::write_file(p, text); }

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

int cmd_gen(const Common& c) {
    const config::RunConfig cfg = resolve(c);
    const fs::path out = c.out;
    ensure_dir(out);
    const std::uint64_t seed = cfg.scene.seed;
    const auto train = scene::generate_dataset(cfg.scene, cfg.gap, cfg.train_frames, seed, scene::Split::Train);
    const auto eval = scene::generate_dataset(cfg.scene, cfg.gap, cfg.eval_frames, mix_seed(seed, 1), scene::Split::Eval);
    io::save_dataset(train.sim, out / "sim");
    io::save_dataset(train.real, out / "real");
    io::save_dataset(eval.sim, out / "sim_eval");
    io::save_dataset(eval.real, out / "real_eval");
    write_text(out / "config.json", config::to_json(cfg).dump(2) + "\n");
    const auto sim_stats = diag::count_stats(train.sim), real_stats = diag::count_stats(train.real);
    std::printf("generated %zu train + %zu eval frames per domain in %s\n", cfg.train_frames, cfg.eval_frames,
                out.string().c_str());
    std::printf("mean points per frame: sim %.1f, real %.1f\n", sim_stats.mean, real_stats.mean);
    return 0;
}

int cmd_train(const Common& c, const std::string& data, std::optional<std::size_t> epochs) {
    config::RunConfig cfg = resolve(c);
    if (epochs) cfg.training.epochs = *epochs;
    const fs::path dir = data;
    const Dataset sim = io::load_dataset(dir / "sim");
    const det::TrainConfig tc = cfg.train_config();
    const Dataset real = tc.beta_da > 0 ? io::load_dataset(dir / "real") : Dataset{};
    const fs::path out = c.out;
    ensure_dir(out);
    const std::size_t total_steps = tc.epochs * std::max<std::size_t>(1, sim.size() / tc.batch_size);
    const std::size_t every = std::max<std::size_t>(1, total_steps / 10);
    const det::TrainResult r = det::train(sim, real, cfg.network, tc, [&](const det::LossRow& row) {
        if (row.step % every == 0 || row.step + 1 == total_steps)
            std::printf("step %5zu  l_cls %.4f  l_loc %.4f  l_dir %.4f  l_da %.3e  l_total %.4f\n", row.step, row.l_cls,
                        row.l_loc, row.l_dir, row.l_da, row.l_total);
        return true;
    });
    write_text(out / "loss_log.csv", det::loss_log_csv(r.log));
    det::save_model(r.model, out / "checkpoint.ckpt");
    write_text(out / "config.json", config::to_json(cfg).dump(2) + "\n");
    std::printf("trained %zu steps; checkpoint %s\n", r.log.size(), (out / "checkpoint.ckpt").string().c_str());
    return 0;
}

int cmd_eval(const Common& c, const std::string& data, const std::string& split, const std::string& checkpoint,
             const std::string& predictions, const std::string& baseline) {
    const config::RunConfig cfg = resolve(c);
    const Dataset ds = io::load_dataset(fs::path(data) / split);
    if (!ds.labeled) throw ConfigError("eval: split '" + split + "' has no labels");
    eval::Predictions preds;
    if (!predictions.empty()) {
        preds = eval::load_predictions(predictions, ds);
    } else {
        const det::Model model = det::load_model(cfg.network, checkpoint);
        for (const Frame& f : ds.frames) preds[f.frame_id] = det::infer(f, model, cfg.infer);
    }
    const eval::EvalReport report = eval::evaluate(preds, ds, cfg.eval_config());
    const fs::path out = c.out;
    ensure_dir(out);
    write_text(out / "report.csv", eval::report_csv(report));
    if (predictions.empty()) eval::save_predictions(preds, out / "predictions");
    std::optional<eval::EvalReport> base;
    if (!baseline.empty()) {
        if (!fs::exists(baseline)) throw IoError("missing baseline report: " + baseline);
        base = eval::parse_report_csv(io::detail::read_file(baseline));
    }
    std::printf("%s", eval::format_table(report, base ? &*base : nullptr).c_str());
    return 0;
}

int cmd_stats(const Common& c, const std::string& data, bool log_scale) {
    resolve(c);  // validates --config / --set even though no setting is used
    const fs::path dir = data;
    const Dataset sim = io::load_dataset(dir / "sim");
    const Dataset real = io::load_dataset(dir / "real");
    const fs::path out = c.out;
    ensure_dir(out);
    const auto hist = diag::class_histogram(sim);
    const auto polar = diag::polar_density(sim, 20, 36, log_scale);
    const auto curve = diag::points_per_box_curve(sim);
    const auto gap = diag::gap_report(sim, real);
    write_text(out / "class_histogram.csv", diag::class_histogram_csv(hist));
    write_text(out / "polar_density.csv", diag::polar_density_csv(polar));
    write_text(out / "points_per_box.csv", diag::points_per_box_csv(curve));
    write_text(out / "gap_report.csv", diag::gap_report_csv(gap));
    write_text(out / "class_histogram.svg", diag::class_histogram_svg(hist));
    write_text(out / "polar_density.svg", diag::polar_density_svg(polar));
    write_text(out / "points_per_box.svg", diag::points_per_box_svg(curve));
    std::printf("%zu sim frames, %zu real frames; dropout estimate %.4f; shadow coverage %.4f\n", sim.size(), real.size(),
                gap.dropout_estimate, gap.shadow_coverage);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sim-to-real CORAL domain adaptation for pillar-based 3D detection"};
    app.require_subcommand(1);

    Common gen_c, train_c, eval_c, stats_c;
    auto* gen = app.add_subcommand("gen", "generate paired sim/real train and eval datasets");
    add_common(gen, gen_c);

    std::string train_data;
    std::optional<std::size_t> epochs;
    auto* train = app.add_subcommand("train", "train a detector, optionally with CORAL");
    add_common(train, train_c);
    train->add_option("--data", train_data, "directory written by gen")->required();
    train->add_option("--epochs", epochs, "shortcut for --set training.epochs=N");

    std::string eval_data, split = "real_eval", checkpoint, predictions, baseline;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint or stored predictions");
    add_common(ev, eval_c);
    ev->add_option("--data", eval_data, "directory written by gen")->required();
    ev->add_option("--split", split, "dataset under --data to evaluate on")->capture_default_str();
    auto* ck = ev->add_option("--checkpoint", checkpoint, "trained checkpoint");
    auto* pr = ev->add_option("--predictions", predictions, "directory of per-frame prediction files");
    ck->excludes(pr);
    ev->add_option("--baseline", baseline, "report.csv to print per-row deltas against");

    std::string stats_data;
    bool log_scale = false;
    auto* st = app.add_subcommand("stats", "class histogram, polar density, points per box, gap report");
    add_common(st, stats_c);
    st->add_option("--data", stats_data, "directory written by gen")->required();
    st->add_flag("--log-scale", log_scale, "emit ln(1 + count) in the polar density map");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen) return cmd_gen(gen_c);
        if (*train) return cmd_train(train_c, train_data, epochs);
        if (*ev) {
            if (checkpoint.empty() && predictions.empty()) throw ConfigError("eval: pass --checkpoint or --predictions");
            return cmd_eval(eval_c, eval_data, split, checkpoint, predictions, baseline);
        }
        if (*st) return cmd_stats(stats_c, stats_data, log_scale);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const CheckpointMismatch& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return 5;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const EmptyDataset& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const FrameMismatch& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
