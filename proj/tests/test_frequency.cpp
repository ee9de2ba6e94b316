#include <cmath>
#include <complex>
#include <vector>

#include "oracles.hpp"
#include "testing.hpp"
#include "recdet/frequency.hpp"

using namespace recdet;

TEST_CASE("forward transform matches a double-loop DFT on 4x4 inputs") {
    const auto r = oracle::dft_against_naive(5, 3);
    CHECK(r.compared == 5 * 3 * 16);
    CHECK(r.worst < 1e-5);
}

TEST_CASE("decompose then recompose returns the image") {
    CHECK(oracle::dft_round_trip(1000, 4).worst < 1e-4);
}

TEST_CASE("spectrum ranges and Parseval") {
    torch::manual_seed(5);
    const auto images = torch::rand({4, 3, 32, 32});
    const auto spec = dft_decompose(images);
    CHECK(spec.amplitude.min().item<double>() >= 0.0);
    CHECK(spec.phase.abs().max().item<double>() <= M_PI + 1e-6);
    const double energy = images.to(torch::kDouble).pow(2).sum().item<double>();
    const double spectral = spec.amplitude.to(torch::kDouble).pow(2).sum().item<double>() / (32.0 * 32.0);
    CHECK(spectral == doctest::Approx(energy).epsilon(1e-5));
}

TEST_CASE("recomposition variants select the right components") {
    torch::manual_seed(6);
    const auto a = torch::rand({2, 3, 16, 16});
    const auto b = torch::rand({2, 3, 16, 16});
    const auto sa = dft_decompose(a), sb = dft_decompose(b);
    const auto joint = recompose_variant(sa, sb, Recomposition::joint, {.expect_real = false});
    CHECK((joint - b).abs().max().item<double>() < 1e-4);
    const auto pha = recompose_variant(sa, sa, Recomposition::pha);
    CHECK((pha - a).abs().max().item<double>() < 1e-4);
    const auto amp = recompose_variant(sa, sb, Recomposition::amp, {.expect_real = false});
    const auto expected = idft_recompose(sb.amplitude, sa.phase, {.expect_real = false});
    CHECK((amp - expected).abs().max().item<double>() == 0.0);
}

TEST_CASE("patch masks tile the plane exactly once") {
    const PatchGrid grid{4, 4};
    auto total = torch::zeros({32, 32}, torch::kInt);
    for (int i = 0; i < grid.count(); ++i) {
        const auto m = patch_mask(32, 32, grid, i);
        CHECK(m.sum().item<int64_t>() == 64);
        total += m.to(torch::kInt);
    }
    CHECK(total.eq(1).all().item<bool>());
    CHECK(patch_mask(32, 32, grid, 0).index({0, 0}).item<bool>());
    CHECK(patch_mask(32, 32, grid, 1).index({0, 8}).item<bool>());
    CHECK(patch_mask(32, 32, grid, 4).index({8, 0}).item<bool>());
    CHECK_THROWS_AS(patch_mask(32, 32, grid, 16), ValidationError);
}

TEST_CASE("pixel patch substitution adds only the patch of the perturbation") {
    torch::manual_seed(7);
    const auto x = torch::rand({1, 3, 8, 8});
    const auto d = torch::rand({1, 3, 8, 8});
    const auto h = patch_substitute(x, d, 3, PatchDomain::pixel, {2, 2});
    const auto m = patch_mask(8, 8, {2, 2}, 3);
    CHECK(torch::equal(h.masked_select(m.expand_as(h)), (x + d).masked_select(m.expand_as(h))));
    CHECK(torch::equal(h.masked_select(~m.expand_as(h)), x.masked_select(~m.expand_as(h))));
}

TEST_CASE("spectral substitution of every patch from the same image is the identity") {
    torch::manual_seed(8);
    const auto x = torch::rand({2, 3, 8, 8});
    for (const auto domain : {PatchDomain::amplitude, PatchDomain::phase}) {
        const auto h = patch_substitute(x, x, 0, domain, {2, 2});
        CHECK((h - x).abs().max().item<double>() < 1e-5);
    }
}

TEST_CASE("invalid inputs are rejected") {
    CHECK_THROWS_AS(dft_decompose(torch::rand({3, 8, 8})), ValidationError);
    auto bad = torch::rand({1, 1, 4, 4});
    bad.index_put_({0, 0, 0, 0}, std::nan(""));
    CHECK_THROWS_AS(dft_decompose(bad), ValidationError);
    CHECK(parse_patch_domain(to_string(PatchDomain::phase)) == PatchDomain::phase);
    CHECK_THROWS_AS(parse_recomposition("nope"), ValidationError);
}
