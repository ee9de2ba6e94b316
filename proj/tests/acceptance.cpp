// Acceptance run: every criterion prints one PASS/FAIL line; the exit code is
// non-zero when any criterion fails.
//
// The desk pipeline runs twice. Workspace A is cached between invocations;
// workspace B is wiped first, so the determinism check always compares a
// from-scratch run against the cached one.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "recdet/pipeline.hpp"

using namespace recdet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void emit(int number, const std::string& name, const Outcome& o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << number << "] " << name << ": " << o.detail << std::endl;
    if (!o.pass) ++failures;
}

std::string num(double v, int digits = 4) {
    std::ostringstream s;
    s << std::setprecision(digits) << v;
    return s.str();
}

std::string secs(std::chrono::steady_clock::time_point start) {
    const auto d = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return num(d, 3) + " s";
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

struct DeskRun {
    std::optional<EvaluationReport> report;
    fs::path report_dir;
    std::string error;
    std::string elapsed;
};

DeskRun desk_run(const ExperimentConfig& config, const fs::path& workspace) {
    DeskRun run;
    run.report_dir = workspace / "report";
    const auto start = std::chrono::steady_clock::now();
    try {
        fs::remove_all(run.report_dir);
        Pipeline pipeline(config, workspace);
        auto report = pipeline.run_all();
        emit_report(report, run.report_dir);
        run.report = std::move(report);
    } catch (const std::exception& e) {
        run.error = e.what();
    }
    run.elapsed = secs(start);
    return run;
}

/// Metric lookup that turns a missing value into a readable failure.
struct Metrics {
    const EvaluationReport& report;
    std::vector<std::string> missing;

    double operator()(const std::string& key) {
        const auto v = report.metric(key);
        if (!v) {
            missing.push_back(key);
            return std::nan("");
        }
        return *v;
    }
    Outcome check(bool ok, std::string detail) const {
        if (!missing.empty()) {
            std::string m;
            for (const auto& k : missing) m += (m.empty() ? "" : ", ") + k;
            return {false, "missing metric(s) " + m};
        }
        return {ok, std::move(detail)};
    }
};

Outcome not_run(const DeskRun& run) { return {false, "desk run failed: " + run.error}; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    const auto cache = cache_root() / "acceptance";
    std::string workspace_a = (cache / "desk-a").string();
    std::string workspace_b = (cache / "desk-b").string();
    std::string config_path;
    std::string level = "info";
    app.add_option("--workspace-a", workspace_a, "cached desk workspace")->capture_default_str();
    app.add_option("--workspace-b", workspace_b, "scratch desk workspace (wiped)")->capture_default_str();
    app.add_option("-c,--config", config_path, "desk config (default: the desk preset)");
    app.add_option("--log-level", level, "info, warn or error")->capture_default_str();
    CLI11_PARSE(app, argc, argv);
    set_log_level(level == "warn" ? LogLevel::warn : level == "error" ? LogLevel::error : LogLevel::info);

    {
        const auto start = std::chrono::steady_clock::now();
        const auto trip = oracle::dft_round_trip(1000, 101);
        const auto naive = oracle::dft_against_naive(50, 102);
        emit(1, "DFT correctness",
             {trip.worst < 1e-4 && naive.worst < 1e-5,
              "round-trip max error " + num(trip.worst) + " on 1000 images (< 1e-4), 4x4 oracle max error " +
                  num(naive.worst) + " (< 1e-5), " + secs(start)});
    }
    {
        const auto start = std::chrono::steady_clock::now();
        const auto r = oracle::auc_against_pairwise(1000, 200, 103);
        emit(2, "AUC oracle equivalence",
             {r.worst < 1e-9 && r.compared == 1000,
              "max deviation " + num(r.worst) + " over " + std::to_string(r.compared) + " sets of 200 (< 1e-9), " +
                  secs(start)});
    }
    {
        const auto start = std::chrono::steady_clock::now();
        bool ok = true;
        std::string detail;
        for (const auto domain : {PatchDomain::pixel, PatchDomain::amplitude, PatchDomain::phase}) {
            const auto r = oracle::patch_differences_against_hybrids(100, domain, 104);
            // Exact up to double rounding: batched and one-at-a-time convolutions
            // may sum in a different order.
            ok = ok && r.worst <= 1e-12 && r.compared + r.skipped == 100;
            detail += to_string(domain) + " max " + num(r.worst) + " (" + std::to_string(r.compared) + " compared, " +
                      std::to_string(r.skipped) + " not fooled); ";
        }
        emit(3, "Patch-difference oracle equivalence", {ok, detail + secs(start)});
    }

    const auto config = config_path.empty() ? preset("desk") : load_config(config_path);
    std::cout << "desk run A (cached) in " << workspace_a << std::endl;
    const auto run_a = desk_run(config, workspace_a);
    std::cout << "desk run A finished in " << run_a.elapsed << std::endl;

    if (!run_a.report) {
        for (int c = 4; c <= 10; ++c) emit(c, "desk criterion", not_run(run_a));
    } else {
        const auto& report = *run_a.report;
        {
            Metrics m{report, {}};
            bool ok = config.subsets.vae_train >= 10000 && config.vae_pixel.epochs >= 20 &&
                      config.vae_amplitude.epochs >= 20;
            std::string detail = "VAEs on " + std::to_string(config.subsets.vae_train) + " images, " +
                                 std::to_string(config.vae_amplitude.epochs) + " epochs; ";
            for (const auto* name : {"pixel", "amp"}) {
                const std::string p = std::string("separability.") + name + ".";
                const double adv = m(p + "adversarial_mean"), normal = m(p + "normal_mean");
                const double n_adv = m(p + "adversarial_count"), n_normal = m(p + "normal_count");
                const double pv = m(p + "p_value");
                ok = ok && adv > normal && n_adv >= 500 && n_normal >= 500 && pv < 0.01;
                detail += std::string(name) + ": adversarial " + num(adv) + " (n=" + num(n_adv, 6) + ") vs normal " +
                          num(normal) + " (n=" + num(n_normal, 6) + "), p=" + num(pv) + "; ";
            }
            emit(4, "VAE separability", m.check(ok, detail));
        }
        const auto& matrix = report.tables.count("bad_matrix") ? report.tables.at("bad_matrix") : ResultTable{};
        const auto pgd = reference_attack(config).id();
        const auto white = matrix.cell(pgd, "white-box");
        const auto black = matrix.cell(pgd, "SM-NT");
        emit(5, "Desk white-box detection",
             white ? Outcome{*white >= 0.80, config.method.name() + " on " + pgd + ": AUC " + num(*white) + " (>= 0.80)"}
                   : Outcome{false, "white-box cell for " + pgd + " missing"});
        emit(6, "BAD trend",
             white && black ? Outcome{std::abs(*white - *black) <= 0.15,
                                      "white-box " + num(*white) + ", SM-NT " + num(*black) + ", gap " +
                                          num(*white - *black) + " (<= 0.15)"}
                            : Outcome{false, "white-box or SM-NT cell missing"});
        {
            Metrics m{report, {}};
            const double freq = m("eq1.frequency.mean"), pixel = m("eq1.pixel.mean");
            const double n = std::min({m("eq1.pixel.samples"), m("eq1.amplitude.samples"), m("eq1.phase.samples")});
            emit(7, "Frequency vs pixel differences",
                 m.check(freq > pixel && n >= 500, "frequency mean " + num(freq) + " vs pixel mean " + num(pixel) +
                                                       " over " + num(n, 6) + " samples (>= 500)"));
        }
        {
            Metrics m{report, {}};
            const double normal = m("ctr.normal.lc_rate"), adv = m("ctr.eps=2/255.lc_rate");
            const double n_normal = m("ctr.normal.count"), n_adv = m("ctr.eps=2/255.count");
            const double gap = normal - adv;
            emit(8, "CTR trend",
                 m.check(gap >= 0.15 && n_normal >= 1000,
                         config.strength_method.name() + ": LC normal " + num(normal) + " (n=" + num(n_normal, 6) +
                             ") - LC 2/255 " + num(adv) + " (n=" + num(n_adv, 6) + ") = " + num(gap) + " (>= 0.15)"));
        }
        {
            const auto& t = report.tables.count("strengths") ? report.tables.at("strengths") : ResultTable{};
            const auto balance = t.row_average("ctr-balance"), total = t.row_average("total");
            emit(9, "CTR-balance vs total",
                 balance && total ? Outcome{*balance >= *total, "CTR-balance average " + num(*balance) +
                                                                    " vs total average " + num(*total)}
                                  : Outcome{false, "strength table rows missing"});
        }
        {
            Metrics m{report, {}};
            const double zero = m("control.zero_epsilon.auc"), shuffled = m("control.shuffled_labels.auc");
            auto inside = [](double v) { return v >= 0.45 && v <= 0.55; };
            emit(10, "No-signal controls",
                 m.check(inside(zero) && inside(shuffled),
                         "epsilon=0 AUC " + num(zero) + ", shuffled-label AUC " + num(shuffled) + " (both in [0.45, 0.55])"));
        }
    }

    std::cout << "desk run B (from scratch) in " << workspace_b << std::endl;
    fs::remove_all(workspace_b);
    const auto run_b = desk_run(config, workspace_b);
    std::cout << "desk run B finished in " << run_b.elapsed << std::endl;
    if (!run_a.report || !run_b.report) {
        emit(11, "Determinism", not_run(run_a.report ? run_b : run_a));
    } else {
        std::vector<std::string> names_a, names_b, differing;
        for (const auto& e : fs::recursive_directory_iterator(run_a.report_dir)) {
            if (e.is_regular_file()) names_a.push_back(fs::relative(e.path(), run_a.report_dir).string());
        }
        for (const auto& e : fs::recursive_directory_iterator(run_b.report_dir)) {
            if (e.is_regular_file()) names_b.push_back(fs::relative(e.path(), run_b.report_dir).string());
        }
        std::sort(names_a.begin(), names_a.end());
        std::sort(names_b.begin(), names_b.end());
        if (names_a == names_b) {
            for (const auto& n : names_a) {
                if (slurp(run_a.report_dir / n) != slurp(run_b.report_dir / n)) differing.push_back(n);
            }
        }
        std::string detail = std::to_string(names_a.size()) + " report files";
        if (names_a != names_b) detail += ", file lists differ";
        for (const auto& d : differing) detail += ", " + d + " differs";
        emit(11, "Determinism", {names_a == names_b && differing.empty(), detail});
    }

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criterion/criteria failed")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
