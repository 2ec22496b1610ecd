// Command-line front end for the whole pipeline: synthetic cohort generation,
// FVTC extraction, representation training, session embedding, downstream
// training, evaluation, error analysis, and the gradient verification suite.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "mmvq/config.hpp"
#include "mmvq/csv.hpp"
#include "mmvq/data.hpp"
#include "mmvq/hash.hpp"
#include "mmvq/metrics.hpp"
#include "mmvq/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mmvq;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "runs";
    int64_t seed = -1;  // -1: keep the config seed
    bool force = false;
};

config::RunConfig resolve_config(const CommonOpts& o) {
    auto cfg = o.config_path.empty() ? config::RunConfig::defaults() : config::RunConfig::load(o.config_path);
    if (o.seed >= 0) cfg.set_seed(static_cast<uint64_t>(o.seed));
    return cfg;
}

fs::path run_dir(const config::RunConfig& cfg, const CommonOpts& o) {
    fs::path dir = fs::path(o.out_dir) / hash_hex(cfg.hash());
    fs::create_directories(dir);
    const auto resolved = dir / "resolved_config.json";
    if (!fs::exists(resolved)) config::atomic_write_text(resolved, cfg.dump() + "\n");
    return dir;
}

void guard_overwrite(const fs::path& artifact, bool force) {
    if (fs::exists(artifact) && !force)
        throw ValidationError("'" + artifact.string() + "' already exists; pass --force to overwrite");
}

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "JSON config; omitted keys fall back to defaults");
    cmd->add_option("--out", o.out_dir, "output root; artifacts live under <out>/<config-hash>/");
    cmd->add_option("--seed", o.seed, "override the config seed");
    cmd->add_flag("--force", o.force, "overwrite existing artifacts");
}

pipeline::Logger logger() {
    return [](const std::string& line) { std::cout << line << "\n"; };
}

int cmd_synth_data(const CommonOpts& o) {
    auto cfg = resolve_config(o);
    const auto dir = run_dir(cfg, o);
    guard_overwrite(dir / "data" / "manifest.jsonl", o.force);
    auto manifest = data::generate_synthetic(cfg.cohort(), derive_seed(cfg.seed(), "data"), dir / "data");
    std::cout << "wrote " << manifest.sessions.size() << " sessions for " << manifest.subject_ids().size()
              << " subjects under " << (dir / "data").string() << "\n";
    return 0;
}

int cmd_extract(const CommonOpts& o, const std::string& manifest_override) {
    auto cfg = resolve_config(o);
    const auto dir = run_dir(cfg, o);
    const fs::path manifest_path = manifest_override.empty() ? dir / "data" / "manifest.jsonl"
                                                             : fs::path(manifest_override);
    const auto cache = dir / "fvtc.mmvq";
    guard_overwrite(cache, o.force);
    auto manifest = data::Manifest::load(manifest_path);
    auto res = pipeline::extract_features(manifest, manifest_path.parent_path(), cfg, cache, logger());
    std::cout << "cached " << res.segments << " segments from " << res.sessions << " sessions to " << cache.string()
              << "\n";
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
    return 0;
}

int cmd_train_mrl(const CommonOpts& o, const std::string& manifest_override, const std::string& select_on) {
    auto cfg = resolve_config(o);
    if (!select_on.empty()) cfg.doc()["training"]["select_on"] = select_on;
    const auto dir = run_dir(cfg, o);
    const fs::path manifest_path = manifest_override.empty() ? dir / "data" / "manifest.jsonl"
                                                             : fs::path(manifest_override);
    const auto out = dir / "mrl.mmvq";
    guard_overwrite(out, o.force);
    auto manifest = data::Manifest::load(manifest_path);
    auto ck = pipeline::run_train_mrl(dir / "fvtc.mmvq", manifest, cfg, logger());
    mrl::save_mrl_checkpoint(ck, out);
    std::cout << "selected epoch " << ck.best_epoch << "; checkpoint at " << out.string() << "\n";
    return 0;
}

int cmd_embed(const CommonOpts& o, const std::string& manifest_override) {
    auto cfg = resolve_config(o);
    const auto dir = run_dir(cfg, o);
    const fs::path manifest_path = manifest_override.empty() ? dir / "data" / "manifest.jsonl"
                                                             : fs::path(manifest_override);
    const auto out = dir / "sessions.mmvq";
    guard_overwrite(out, o.force);
    auto manifest = data::Manifest::load(manifest_path);
    auto ck = mrl::load_mrl_checkpoint<float>(dir / "mrl.mmvq");
    auto res = pipeline::embed_sessions(ck, dir / "fvtc.mmvq", manifest, cfg, out, logger());
    std::cout << "embedded " << res.sessions << " sessions as " << res.t_max << "x" << res.dim << " matrices to "
              << out.string() << "\n";
    return 0;
}

int cmd_train_downstream(const CommonOpts& o, const std::string& manifest_override, const std::string& mode_str) {
    auto cfg = resolve_config(o);
    if (!mode_str.empty()) cfg.doc()["downstream"]["mode"] = mode_str;
    const auto dir = run_dir(cfg, o);
    const fs::path manifest_path = manifest_override.empty() ? dir / "data" / "manifest.jsonl"
                                                             : fs::path(manifest_override);
    auto manifest = data::Manifest::load(manifest_path);
    const auto mode = downstream::task_mode_from_string(cfg.doc()["downstream"]["mode"].get<std::string>());
    const std::string tag = downstream::to_string(mode);
    const auto ck_path = dir / ("downstream_" + tag + ".mmvq");
    guard_overwrite(ck_path, o.force);

    auto dataset = pipeline::load_session_dataset(dir / "sessions.mmvq", manifest);
    const auto split = data::split_subjects(manifest, cfg.split_ratios(), derive_seed(cfg.seed(), "split"));
    auto run = pipeline::run_train_downstream(dataset, split, cfg, mode, logger());
    downstream::save_downstream_checkpoint(run.checkpoint, ck_path);
    io::write_predictions_csv(dir / ("predictions_" + tag + "_test.csv"), run.test_predictions);
    io::write_predictions_csv(dir / ("predictions_" + tag + "_all.csv"), run.all_predictions);
    std::cout << "selected epoch " << run.checkpoint.best_epoch << "; wrote predictions for "
              << run.test_predictions.size() << " test sessions\n";
    if (!run.test_predictions.empty()) {
        auto rep = metrics::evaluate_predictions(run.test_predictions);
        std::cout << rep.pretty("test split (" + tag + ")");
    }
    return 0;
}

int cmd_evaluate(const std::vector<std::string>& pred_files, const std::string& json_out, bool force) {
    if (pred_files.empty()) throw ValidationError("evaluate: pass at least one predictions CSV");
    std::vector<metrics::ComparisonRow> rows;
    for (const auto& f : pred_files) {
        auto preds = io::read_predictions_csv(f);
        auto rep = metrics::evaluate_predictions(preds);
        std::cout << rep.pretty(f);
        // infer the trained tasks from the file name tag when present
        const bool is_cls = f.find("_cls_") != std::string::npos;
        const bool is_reg = f.find("_reg_") != std::string::npos;
        rows.push_back({fs::path(f).filename().string(), rep, !is_reg, !is_cls});
        if (!json_out.empty() && pred_files.size() == 1) {
            guard_overwrite(json_out, force);
            config::atomic_write_text(json_out, rep.to_json() + "\n");
        }
    }
    if (rows.size() > 1) std::cout << "\n" << metrics::comparison_table(rows);
    return 0;
}

int cmd_error_analysis(const std::string& pred_file, const std::string& exclude_subject,
                       const std::string& replacement_file) {
    auto preds = io::read_predictions_csv(pred_file);
    auto rep = metrics::leave_subject_out_mae(preds);
    std::cout << rep.pretty();
    if (!exclude_subject.empty()) {
        bool found = false;
        for (const auto& row : rep.rows)
            if (row.subject_id == exclude_subject) {
                std::cout << "excluding " << exclude_subject << ": MAE " << rep.baseline_mae << " -> "
                          << row.mae_excluded << " (" << row.percent_change << "% change)\n";
                found = true;
            }
        if (!found) throw ValidationError("error-analysis: subject '" + exclude_subject + "' not in predictions");
        if (!replacement_file.empty()) {
            auto replacement = io::read_predictions_csv(replacement_file);
            const double replaced = metrics::replacement_mae(preds, exclude_subject, replacement);
            std::cout << "replacing " << exclude_subject << " with " << replacement_file << ": MAE "
                      << rep.baseline_mae << " -> " << replaced << " ("
                      << (rep.baseline_mae > 0 ? (rep.baseline_mae - replaced) / rep.baseline_mae * 100.0 : 0.0)
                      << "% change)\n";
        }
    }
    return 0;
}

int cmd_grad_check() {
    auto lines = pipeline::run_grad_suite();
    bool ok = true;
    for (const auto& l : lines) {
        std::printf("%-28s max relative error %.3e\n", l.name.c_str(), l.max_rel_err);
        ok = ok && l.max_rel_err < 1e-5;
    }
    if (!ok) {
        std::cerr << "gradient check failed the 1e-5 threshold\n";
        return 2;
    }
    std::cout << "all gradients within 1e-5 of central finite differences at 64-bit\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multimodal VQ-VAE representation learning and multi-task severity assessment"};
    app.require_subcommand(1);

    CommonOpts synth_o, extract_o, mrl_o, embed_o, ds_o;
    std::string manifest_override, mode_str, select_on;
    std::vector<std::string> pred_files;
    std::string pred_file, exclude_subject, replacement_file, json_out;
    bool eval_force = false;

    auto* synth = app.add_subcommand("synth-data", "generate a synthetic cohort (channel CSVs + manifest)");
    add_common(synth, synth_o);

    auto* extract = app.add_subcommand("extract-features", "channel CSVs -> per-segment FVTC cache");
    add_common(extract, extract_o);
    extract->add_option("--manifest", manifest_override, "manifest path (default: run dir data/manifest.jsonl)");

    auto* train_mrl = app.add_subcommand("train-mrl", "train the multimodal VQ-VAE representation learner");
    add_common(train_mrl, mrl_o);
    train_mrl->add_option("--manifest", manifest_override, "manifest path");
    train_mrl->add_option("--select-on", select_on, "checkpoint selection split: val (default) or test")
        ->check(CLI::IsMember({"val", "test"}));

    auto* embed = app.add_subcommand("embed", "checkpoint + FVTC cache -> per-session stacked embeddings");
    add_common(embed, embed_o);
    embed->add_option("--manifest", manifest_override, "manifest path");

    auto* train_ds = app.add_subcommand("train-downstream", "train the session-level predictor");
    add_common(train_ds, ds_o);
    train_ds->add_option("--manifest", manifest_override, "manifest path");
    train_ds->add_option("--mode", mode_str, "mtl | cls | reg")->check(CLI::IsMember({"mtl", "cls", "reg"}));

    auto* evaluate = app.add_subcommand("evaluate", "predictions CSV(s) -> metric report (table when several)");
    evaluate->add_option("predictions", pred_files, "predictions CSV files")->required();
    evaluate->add_option("--json-out", json_out, "also write the report as JSON (single input only)");
    evaluate->add_flag("--force", eval_force, "overwrite an existing JSON report");

    auto* error_analysis = app.add_subcommand("error-analysis", "leave-subject-out MAE table");
    error_analysis->add_option("predictions", pred_file, "predictions CSV")->required();
    error_analysis->add_option("--exclude-subject", exclude_subject, "report the exclusion of one subject");
    error_analysis->add_option("--replacement-file", replacement_file,
                               "predictions CSV standing in for the excluded subject");

    app.add_subcommand("grad-check", "finite-difference verification of every primitive and the composed losses");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return cmd_synth_data(synth_o);
        if (extract->parsed()) return cmd_extract(extract_o, manifest_override);
        if (train_mrl->parsed()) return cmd_train_mrl(mrl_o, manifest_override, select_on);
        if (embed->parsed()) return cmd_embed(embed_o, manifest_override);
        if (train_ds->parsed()) return cmd_train_downstream(ds_o, manifest_override, mode_str);
        if (evaluate->parsed()) return cmd_evaluate(pred_files, json_out, eval_force);
        if (error_analysis->parsed()) return cmd_error_analysis(pred_file, exclude_subject, replacement_file);
        if (app.get_subcommand("grad-check")->parsed()) return cmd_grad_check();
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
