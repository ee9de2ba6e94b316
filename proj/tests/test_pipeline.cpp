#include <filesystem>

#include "testing.hpp"
#include "recdet/pipeline.hpp"

using namespace recdet;
namespace fs = std::filesystem;

// End-to-end plumbing on the smoke preset (tiny models, real CIFAR-10 data).
TEST_CASE("smoke pipeline runs, caches and reproduces" * doctest::timeout(3600)) {
    if (!fs::exists(cache_root() / "cifar-10-batches-bin")) {
        MESSAGE("CIFAR-10 not cached; skipped");
        return;
    }
    const auto ws = fs::temp_directory_path() / "recdet_smoke_ws";
    fs::remove_all(ws);
    const auto config = preset("smoke");

    EvaluationReport first;
    {
        Pipeline p(config, ws);
        const auto& images = p.detection_images();
        const auto train_idx = images.train.labels.size(0);
        CHECK(train_idx > 0);
        CHECK(images.test.size() > 0);
        first = p.run_all();
        const auto& matrix = first.tables.at("bad_matrix");
        CHECK(matrix.rows.size() == config.attacks.size());
        CHECK(matrix.columns == p.settings());
        for (const auto& a : config.attacks) CHECK(matrix.cell(a.id(), "white-box").has_value());
        CHECK(first.metric("control.zero_epsilon.auc").has_value());
        CHECK(fs::exists(ws / "timings.json"));
        CHECK_FALSE(first.header.contains("durations_seconds"));
    }
    {
        Pipeline again(config, ws);
        const auto second = again.run_all();
        CHECK(to_json_value(second) == to_json_value(first));
    }
    auto other = config;
    other.seed += 1;
    CHECK_THROWS_AS(Pipeline(other, ws), ArtifactError);
    CHECK_NOTHROW(Pipeline(other, ws, PipelineOptions{true}));
    fs::remove_all(ws);
}

TEST_CASE("derived seeds are stable and key-specific") {
    const auto ws = fs::temp_directory_path() / "recdet_seed_ws";
    fs::remove_all(ws);
    Pipeline p(preset("smoke"), ws);
    CHECK(p.derive_seed("a") == p.derive_seed("a"));
    CHECK(p.derive_seed("a") != p.derive_seed("b"));
    CHECK(attack_key(AttackSpec::defaults(AttackFamily::pgd_linf, 8.0 / 255.0)) !=
          attack_key(AttackSpec::defaults(AttackFamily::pgd_linf, 4.0 / 255.0)));
    fs::remove_all(ws);
}
