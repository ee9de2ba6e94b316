#include <filesystem>
#include <fstream>
#include <sstream>

#include "testing.hpp"
#include "recdet/config.hpp"
#include "recdet/dataset.hpp"
#include "recdet/report.hpp"

using namespace recdet;
namespace fs = std::filesystem;

namespace {

EvaluationReport sample_report() {
    EvaluationReport r;
    r.header = {{"seed", 0}, {"method", "FRD-base(amp)"}};
    ResultTable t;
    t.set("FGSM", "white-box", 0.912345);
    t.set("FGSM", "SM-NT", 0.81);
    t.set("PGD", "white-box", 0.9);
    r.tables["bad_matrix"] = t;
    r.set_metric("control.zero_epsilon.auc", 0.5);
    r.failures.push_back("PGD / SM-NT: no fooled sample");
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

TEST_CASE("tables round to four decimals and render missing cells as NA") {
    const auto r = sample_report();
    const auto& t = r.tables.at("bad_matrix");
    CHECK(*t.cell("FGSM", "white-box") == 0.9123);
    CHECK_FALSE(t.cell("PGD", "SM-NT").has_value());
    CHECK_FALSE(t.complete());
    CHECK(*t.row_average("FGSM") == doctest::Approx((0.9123 + 0.81) / 2));
    const auto csv = table_csv(t);
    CHECK(csv.find("NA") != std::string::npos);
    CHECK(csv.find("0.9123") != std::string::npos);
    CHECK(r.partial());
}

TEST_CASE("report emission is byte-identical and round-trips") {
    const auto r = sample_report();
    const auto a = fs::temp_directory_path() / "recdet_report_a";
    const auto b = fs::temp_directory_path() / "recdet_report_b";
    fs::remove_all(a);
    fs::remove_all(b);
    const auto files_a = emit_report(r, a);
    const auto files_b = emit_report(r, b);
    REQUIRE(files_a.size() == files_b.size());
    for (size_t i = 0; i < files_a.size(); ++i) {
        CAPTURE(files_a[i].string());
        CHECK(files_a[i].filename() == files_b[i].filename());
        CHECK(slurp(files_a[i]) == slurp(files_b[i]));
    }
    const auto back = load_report(a / "report.json");
    CHECK(back == r);
    CHECK(dump_fixed(nlohmann::json{{"x", 0.5}}).find("0.5000") != std::string::npos);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("preflight refuses an unwritable output") {
    const auto file = fs::temp_directory_path() / "recdet_not_a_dir";
    std::ofstream(file) << "x";
    CHECK_THROWS(preflight_output_dir(file / "sub"));
    fs::remove(file);
}

TEST_CASE("config presets validate, round-trip and hash stably") {
    for (const auto* scale : {"smoke", "desk", "paper"}) {
        CAPTURE(scale);
        const auto c = preset(scale);
        CHECK_NOTHROW(c.validate());
        const auto path = fs::temp_directory_path() / "recdet_config.json";
        save_config(path.string(), c);
        const auto back = load_config(path.string());
        CHECK(back.hash() == c.hash());
        fs::remove(path);
    }
    CHECK(preset("smoke").hash() != preset("desk").hash());
    auto changed = preset("desk");
    changed.seed += 1;
    CHECK(changed.hash() != preset("desk").hash());
    CHECK_THROWS_AS(preset("huge"), ValidationError);

    auto bad = preset("smoke");
    bad.train_fraction = 1.5;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("method names parse and print") {
    for (const auto* name : {"FRD-base(amp)", "FRD-online(pha)", "PRD-base(pixel)", "FRD-base(joint)"}) {
        CHECK(parse_method(name).name() == name);
    }
    CHECK_THROWS_AS(parse_method("FRD-base(pixel)"), ValidationError);
    CHECK_THROWS_AS(parse_method("PRD-base(amp)"), ValidationError);
}

TEST_CASE("subsets are seeded, sorted and bounded") {
    const auto a = subset_indices(1000, 100, 5);
    CHECK(torch::equal(a, subset_indices(1000, 100, 5)));
    CHECK_FALSE(torch::equal(a, subset_indices(1000, 100, 6)));
    CHECK(torch::equal(std::get<0>(a.sort()), a));
    CHECK(std::get<0>(at::_unique(a)).numel() == 100);
    CHECK_THROWS_AS(subset_indices(10, 11, 0), ValidationError);
}
