// Command-line front end: one subcommand per pipeline stage.
//
// Exit codes: 0 success, 2 partial (some cells or stages failed), 1 failure.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "recdet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace recdet;

namespace {

struct Options {
    std::string config;
    std::string workspace = "workspace";
    std::string out;
    bool force = false;
    std::string log_level = "info";
    std::vector<std::string> formats{"csv", "json", "plots"};
};

std::vector<ReportFormat> parse_formats(const std::vector<std::string>& names) {
    std::vector<ReportFormat> out;
    for (const auto& n : names) {
        if (n == "csv") out.push_back(ReportFormat::csv);
        else if (n == "json") out.push_back(ReportFormat::json);
        else if (n == "plots") out.push_back(ReportFormat::plots);
        else throw ValidationError("unknown report format '" + n + "' (csv, json, plots)");
    }
    return out;
}

LogLevel parse_level(const std::string& name) {
    if (name == "debug") return LogLevel::debug;
    if (name == "info") return LogLevel::info;
    if (name == "warn") return LogLevel::warn;
    if (name == "error") return LogLevel::error;
    if (name == "off") return LogLevel::off;
    throw ValidationError("unknown log level '" + name + "'");
}

fs::path report_dir(const Options& o) { return o.out.empty() ? fs::path(o.workspace) / "report" : fs::path(o.out); }

Pipeline open_pipeline(const Options& o) {
    require(!o.config.empty(), "--config is required");
    return Pipeline(load_config(o.config), o.workspace, PipelineOptions{o.force});
}

int finish(Pipeline& pipeline, EvaluationReport& report, const Options& o) {
    pipeline.record_models(report);
    pipeline.write_timings();
    const auto files = emit_report(report, report_dir(o), parse_formats(o.formats));
    for (const auto& f : files) std::cout << f.string() << '\n';
    for (const auto& f : report.failures) std::cerr << "failed: " << f << '\n';
    return report.partial() ? 2 : 0;
}

/// Runs `body` on a fresh report, emitting whatever it produced even when a
/// stage throws midway.
int run_report_stage(const Options& o, const std::function<void(Pipeline&, EvaluationReport&)>& body) {
    preflight_output_dir(report_dir(o));
    auto pipeline = open_pipeline(o);
    auto report = pipeline.new_report();
    try {
        body(pipeline, report);
    } catch (const std::exception& e) {
        report.failures.push_back(e.what());
    }
    return finish(pipeline, report, o);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Reconstruction-error adversarial example detection: training, attacks and evaluation"};
    app.require_subcommand(1);
    Options o;
    auto common = [&o](CLI::App* cmd, bool with_report) {
        cmd->add_option("-c,--config", o.config, "experiment config (JSON)")->check(CLI::ExistingFile);
        cmd->add_option("-w,--workspace", o.workspace, "artifact workspace")->capture_default_str();
        cmd->add_flag("--force", o.force, "reuse artifacts produced under another config hash");
        cmd->add_option("--log-level", o.log_level, "debug, info, warn, error or off")->capture_default_str();
        if (with_report) {
            cmd->add_option("-o,--out", o.out, "report directory (default: <workspace>/report)");
            cmd->add_option("--formats", o.formats, "csv, json, plots")->capture_default_str();
        }
    };

    std::string scale = "desk";
    std::string config_out = "config.json";
    auto* init = app.add_subcommand("init-config", "write a preset config");
    init->add_option("--scale,--preset", scale, "smoke, desk or paper")->capture_default_str();
    init->add_option("-o,--out", config_out, "output path")->capture_default_str();

    std::string vae_target = "all";
    auto* train_vae_cmd = app.add_subcommand("train-vae", "train the pixel, amplitude and phase VAEs");
    common(train_vae_cmd, false);
    train_vae_cmd->add_option("--target", vae_target, "pixel, amplitude, phase or all")->capture_default_str();

    std::string role = "all";
    auto* train_cls = app.add_subcommand("train-classifier", "train victim, pretrained and threat classifiers");
    common(train_cls, false);
    train_cls->add_option("--role", role, "victim, pretrained, threats or all")->capture_default_str();

    auto* attack_cmd = app.add_subcommand("attack", "craft and cache every adversarial archive");
    common(attack_cmd, false);
    auto* features_cmd = app.add_subcommand("build-features", "build detection sets and export feature dumps");
    common(features_cmd, false);
    auto* detector_cmd = app.add_subcommand("train-detector", "train one detector per training attack");
    common(detector_cmd, false);
    auto* bad_cmd = app.add_subcommand("evaluate-bad", "fill the black-box detection matrix");
    common(bad_cmd, true);
    auto* layers_cmd = app.add_subcommand("sweep-layers", "AUC per tapped-layer set");
    common(layers_cmd, true);
    auto* strengths_cmd = app.add_subcommand("sweep-strengths", "AUC per perturbation strength, total and CTR-balance");
    common(strengths_cmd, true);
    auto* analyze_cmd = app.add_subcommand("analyze", "patch differences, KDE, CTR, similarity, probe");
    common(analyze_cmd, true);
    auto* report_cmd = app.add_subcommand("report", "run every stage and emit the full report");
    common(report_cmd, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        set_log_level(parse_level(o.log_level));
        if (init->parsed()) {
            save_config(config_out, preset(scale));
            std::cout << config_out << '\n';
            return 0;
        }
        if (train_vae_cmd->parsed()) {
            auto p = open_pipeline(o);
            for (const auto t : {VaeTarget::pixel, VaeTarget::amplitude, VaeTarget::phase}) {
                if (vae_target == "all" || parse_vae_target(vae_target) == t) p.vae(t);
            }
            return 0;
        }
        if (train_cls->parsed()) {
            require(role == "all" || role == "victim" || role == "pretrained" || role == "threats",
                    "unknown role '", role, "'");
            auto p = open_pipeline(o);
            if (role == "all" || role == "victim") p.victim();
            if (role == "all" || role == "pretrained") p.pretrained();
            if (role == "all" || role == "threats") {
                for (const auto& t : p.config().threats) p.threat_models(t);
            }
            return 0;
        }
        if (attack_cmd->parsed()) {
            auto p = open_pipeline(o);
            for (const auto& a : p.config().attacks) {
                p.archive(a, nullptr, Side::train);
                p.archive(a, nullptr, Side::test);
                for (const auto& t : p.config().threats) p.archive(a, &t, Side::test);
            }
            return 0;
        }
        if (features_cmd->parsed()) {
            auto p = open_pipeline(o);
            const auto& method = p.config().method;
            const auto fingerprint = p.extractor(method).fingerprint();
            const auto dir = fs::path(o.workspace) / "features";
            fs::create_directories(dir);
            auto dump = [&](const DetectionSet& set, const std::string& name) {
                FeatureDump d{set.features, set.labels, p.extractor(method).spec().layer_ids, fingerprint,
                              {{"config_hash", p.config_hash()}, {"method", method.name()}}};
                const auto path = dir / (name + ".pt");
                save_feature_dump(path.string(), d);
                std::cout << path.string() << '\n';
            };
            for (const auto& a : p.config().attacks) {
                const auto key = attack_key(a);
                dump(p.detection_set(method, a, nullptr, Side::train), key + "__white-box__train");
                dump(p.detection_set(method, a, nullptr, Side::test), key + "__white-box__test");
                for (const auto& t : p.config().threats) {
                    std::string id = t.id();
                    for (auto& ch : id) {
                        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-') ch = '_';
                    }
                    dump(p.detection_set(method, a, &t, Side::test), key + "__" + id + "__test");
                }
            }
            return 0;
        }
        if (detector_cmd->parsed()) {
            auto p = open_pipeline(o);
            for (const auto& a : p.config().attacks) p.detector(p.config().method, a);
            return 0;
        }
        if (bad_cmd->parsed()) {
            return run_report_stage(o, [](Pipeline& p, EvaluationReport& r) { p.run_bad_matrix(r); });
        }
        if (layers_cmd->parsed()) {
            return run_report_stage(o, [](Pipeline& p, EvaluationReport& r) { p.sweep_layers(r); });
        }
        if (strengths_cmd->parsed()) {
            return run_report_stage(o, [](Pipeline& p, EvaluationReport& r) { p.sweep_strengths(r); });
        }
        if (analyze_cmd->parsed()) {
            return run_report_stage(o, [](Pipeline& p, EvaluationReport& r) { p.analyze(r); });
        }
        if (report_cmd->parsed()) {
            preflight_output_dir(report_dir(o));
            auto p = open_pipeline(o);
            auto report = p.run_all();
            return finish(p, report, o);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
