#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "testing.hpp"
#include "recdet/analysis.hpp"

using namespace recdet;

namespace {

using oracle::toy_model;

}  // namespace

TEST_CASE("patch differences match the hybrid-enumeration oracle") {
    for (const auto domain : {PatchDomain::pixel, PatchDomain::amplitude, PatchDomain::phase}) {
        CAPTURE(to_string(domain));
        const auto r = oracle::patch_differences_against_hybrids(100, domain, 21);
        CHECK(r.compared + r.skipped == 100);
        CHECK(r.compared > 50);
        CHECK(r.worst < 1e-12);
    }
}

TEST_CASE("the single-sample entry point agrees with the batch") {
    auto model = toy_model(21, torch::kDouble);
    torch::manual_seed(22);
    const auto images = torch::rand({20, 3, 8, 8}, torch::kDouble);
    const auto deltas = (torch::rand({20, 3, 8, 8}, torch::kDouble) * 2 - 1) * 0.5;
    const auto labels = torch::randint(0, 10, {20}, torch::kLong);
    for (const auto domain : {PatchDomain::pixel, PatchDomain::amplitude, PatchDomain::phase}) {
        const auto batch = difference_maps(images, deltas, model, labels, domain, {2, 2}, 1e-3);
        REQUIRE(batch.sample_index.size(0) > 0);
        const int64_t n = batch.sample_index[0].item<int64_t>();
        const int64_t t = predict(model, (images[n] + deltas[n]).unsqueeze(0))[0].item<int64_t>();
        const auto single =
            difference_map(images[n], deltas[n], model, labels[n].item<int64_t>(), t, domain, {2, 2}, 1e-3);
        REQUIRE(single.has_value());
        CHECK((single->suppression - batch.suppression[0]).abs().max().item<double>() < 1e-12);
        CHECK((single->promotion - batch.promotion[0]).abs().max().item<double>() < 1e-12);
    }
}

TEST_CASE("zero perturbation floors every entry at xi") {
    auto model = toy_model(23);
    const auto x = torch::rand({1, 3, 8, 8});
    for (const auto domain : {PatchDomain::pixel, PatchDomain::amplitude, PatchDomain::phase}) {
        const auto map = difference_map(x, torch::zeros_like(x), model, 0, 1, domain, {2, 2}, 1e-3);
        REQUIRE(map.has_value());
        CHECK(map->suppression.eq(1e-3f).all().item<bool>());
        CHECK(map->promotion.eq(1e-3f).all().item<bool>());
    }
    CHECK_FALSE(difference_map(x, torch::zeros_like(x), model, 2, 2, PatchDomain::pixel).has_value());
}

TEST_CASE("a single full-image pixel patch is the plain logit difference") {
    auto model = toy_model(24);
    const auto x = torch::rand({1, 3, 8, 8});
    const auto d = torch::rand({1, 3, 8, 8}) * 0.3;
    const auto map = difference_map(x, d, model, 3, 5, PatchDomain::pixel, {1, 1}, 1e-3);
    REQUIRE(map.has_value());
    torch::NoGradGuard g;
    const auto base = model->forward(x)[0];
    const auto adv = model->forward(x + d)[0];
    CHECK(map->suppression[0].item<double>() ==
          doctest::Approx(std::max((base[3] - adv[3]).item<double>(), 1e-3)).epsilon(1e-6));
    CHECK(map->promotion[0].item<double>() ==
          doctest::Approx(std::max((adv[5] - base[5]).item<double>(), 1e-3)).epsilon(1e-6));
}

TEST_CASE("KDE against the analytic Gaussian") {
    std::mt19937_64 rng(25);
    std::normal_distribution<double> normal;
    std::vector<double> values(10000);
    for (auto& v : values) v = normal(rng);
    const auto kde = kde_summary(values, 0.3, 2001);
    // Density at the grid point nearest zero.
    size_t nearest = 0;
    for (size_t i = 0; i < kde.support.size(); ++i) {
        if (std::abs(kde.support[i]) < std::abs(kde.support[nearest])) nearest = i;
    }
    CHECK(std::abs(kde.density[nearest] - 1.0 / std::sqrt(2.0 * M_PI)) < 0.05);

    double integral = 0.0;
    for (size_t i = 1; i < kde.support.size(); ++i) {
        integral += 0.5 * (kde.density[i] + kde.density[i - 1]) * (kde.support[i] - kde.support[i - 1]);
    }
    CHECK(std::abs(integral - 1.0) < 1e-3);
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / values.size();
    CHECK(std::abs(kde.mean - mean) < 1e-9);
    CHECK(kde.support.front() == doctest::Approx(*std::min_element(values.begin(), values.end()) - 0.9));
}

TEST_CASE("KDE defaults and degenerate input") {
    const auto spike = kde_summary({0.0, 0.0, 0.0});
    CHECK(spike.degenerate);
    CHECK(spike.mean == 0.0);
    REQUIRE(spike.support.size() == 1);
    CHECK(spike.support[0] == 0.0);
    const std::vector<double> v{1.0, 2.0, 2.5, 4.0, 7.0};
    CHECK(kde_summary(v).bandwidth == doctest::Approx(silverman_bandwidth(v)));
    CHECK_THROWS_AS(kde_summary({1.0}), ValidationError);
}

TEST_CASE("cosine similarity of features") {
    auto model = toy_model(26);
    ExtractorSpec spec;
    spec.layer_ids = {"penultimate"};
    const FeatureExtractor ex(model, spec);
    const auto x = torch::rand({6, 3, 32, 32});
    CHECK(feature_cosine_similarity(ex, x, x, "penultimate").mean == doctest::Approx(1.0).epsilon(1e-6));
    const auto zeros = feature_cosine_similarity(ex, x, torch::zeros_like(x) - 100.0, "penultimate");
    CHECK(zeros.used + zeros.excluded == 6);
}

TEST_CASE("CTR records") {
    auto model = toy_model(27);
    const auto x = torch::rand({20, 3, 32, 32});
    const auto same = ctr_scores(model, x, x, "normal");
    CHECK(same.lc_rate() == 1.0);
    CHECK(same.lc_rate() + same.li_rate() == 1.0);
    const auto other = ctr_scores(model, x, torch::rand({20, 3, 32, 32}));
    CHECK(other.lc_rate() + other.li_rate() == 1.0);
    CHECK(other.lc_count + other.li_count == 20);
    CHECK_THROWS_AS(ctr_scores(model, x.slice(0, 0, 0), x.slice(0, 0, 0)), ValidationError);
}

namespace {

StrengthPool pool(double eps, int64_t clean, int64_t adversarial, int64_t lc, std::uint64_t seed) {
    auto gen = make_generator(seed);
    StrengthPool p;
    p.epsilon = eps;
    const int64_t n = 2 * clean + adversarial;
    p.set.features = torch::randn({n, 3}, gen);
    p.set.labels = torch::cat({torch::zeros({clean}, torch::kLong), torch::ones({clean}, torch::kLong),
                               torch::full({adversarial}, 2, torch::kLong)});
    p.set.origin = torch::zeros({n}, torch::kLong);
    p.set.source = torch::arange(n, torch::kLong);
    p.set.provenance = {Provenance{"PGD", eps, "white-box", "train"}};
    p.adversarial_lc = torch::arange(adversarial) < lc;
    return p;
}

}  // namespace

TEST_CASE("CTR-balance draws equal cells") {
    std::vector<StrengthPool> pools;
    const double eps[] = {2, 4, 6, 8};
    const int64_t lc[] = {30, 12, 50, 70};
    for (int k = 0; k < 4; ++k) pools.push_back(pool(eps[k] / 255.0, 80, 80, lc[k], 30 + k));
    const auto out = ctr_balance_sample(pools, 5);
    CHECK_FALSE(out.fallback);
    REQUIRE(out.cell_counts.size() == 8);
    const auto [lo, hi] = std::minmax_element(out.cell_counts.begin(), out.cell_counts.end());
    CHECK(*hi - *lo <= 1);
    CHECK(out.cell_counts[0] == 10);  // min over cells: 80 - 70 LI at 8/255
    const auto counts = out.balanced.class_counts();
    CHECK(counts[2] == 80);
    CHECK(counts[0] == 80);
    CHECK(counts[1] == 80);
    CHECK(out.total.size() == 4 * 240);

    // Already balanced pools keep every cell equal.
    std::vector<StrengthPool> even;
    for (int k = 0; k < 4; ++k) even.push_back(pool(eps[k] / 255.0, 20, 20, 10, 40 + k));
    const auto same = ctr_balance_sample(even, 6);
    for (const auto c : same.cell_counts) CHECK(c == 10);

    // An empty cell switches to the proportional fallback.
    std::vector<StrengthPool> broken = even;
    broken[1] = pool(4.0 / 255.0, 20, 20, 20, 50);
    CHECK(ctr_balance_sample(broken, 7).fallback);
}

TEST_CASE("inner-class probe") {
    auto gen = make_generator(28);
    const auto a = torch::randn({300, 10}, gen);
    CHECK_THROWS_AS(inner_class_probe(a.slice(0, 0, 50), a.slice(0, 0, 50), a, a, 1), ValidationError);
    const double same = linear_probe_accuracy(a, a.clone(), 2);
    CHECK(same == doctest::Approx(0.5).epsilon(0.12));
    const double apart = linear_probe_accuracy(a, a + 3.0, 3);
    CHECK(apart > 0.95);
    const auto r = inner_class_probe(a, a.clone(), a, a + 3.0, 4);
    CHECK(r.adversarial_accuracy > r.normal_accuracy);
}

TEST_CASE("Mann-Whitney one-sided test") {
    std::vector<double> hi, lo;
    for (int i = 0; i < 600; ++i) {
        hi.push_back(1.0 + 0.01 * i);
        lo.push_back(0.01 * i);
    }
    CHECK(mann_whitney_greater(hi, lo).p_value < 1e-6);
    CHECK(mann_whitney_greater(lo, hi).p_value > 0.99);
    const auto tie = mann_whitney_greater(std::vector<double>(50, 1.0), std::vector<double>(50, 1.0));
    // No rank information at all: no evidence for "greater".
    CHECK(tie.p_value == 1.0);
}
