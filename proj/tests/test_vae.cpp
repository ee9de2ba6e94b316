#include <filesystem>

#include "testing.hpp"
#include "recdet/vae.hpp"

using namespace recdet;
namespace fs = std::filesystem;

namespace {

VaeConfig small(VaeTarget target) {
    VaeConfig c;
    c.target = target;
    c.channels = {8, 16, 16, 16};
    c.latent_dim = 8;
    c.epochs = 5;
    c.batch_size = 50;
    c.beta = 1e-4;
    c.learning_rate = 0.05;
    c.seed = 3;
    return c;
}

}  // namespace

TEST_CASE("VAE loss examples") {
    const auto x = torch::rand({3, 3, 8, 8});
    const auto zeros = torch::zeros({3, 4});
    CHECK(vae_loss(x, x, zeros, zeros, 1.0).total.item<double>() == 0.0);
    const auto shifted = vae_loss(x + 0.1, x, zeros, zeros, 1.0);
    CHECK(shifted.total.item<double>() == doctest::Approx(0.01).epsilon(1e-5));
}

TEST_CASE("KL term equals the hand-computed closed form") {
    torch::manual_seed(1);
    const auto mu = torch::randn({2, 4}, torch::kDouble);
    const auto logvar = torch::randn({2, 4}, torch::kDouble);
    const auto x = torch::rand({2, 1, 4, 4}, torch::kDouble);
    double expected = 0.0;
    for (int n = 0; n < 2; ++n) {
        for (int k = 0; k < 4; ++k) {
            const double m = mu[n][k].item<double>(), lv = logvar[n][k].item<double>();
            expected += 0.5 * (std::exp(lv) + m * m - 1.0 - lv);
        }
    }
    expected /= 2.0;
    CHECK(vae_loss(x, x, mu, logvar, 1.0).kl.item<double>() == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("KL is non-negative and the loss ignores batch order") {
    torch::manual_seed(2);
    for (int trial = 0; trial < 50; ++trial) {
        const auto mu = torch::randn({4, 6}) * 3.0;
        const auto logvar = torch::randn({4, 6}) * 3.0;
        const auto x = torch::rand({4, 3, 4, 4});
        const auto r = torch::rand({4, 3, 4, 4});
        const auto loss = vae_loss(r, x, mu, logvar, 0.5);
        CHECK(loss.kl.item<double>() >= 0.0);
        const auto perm = torch::randperm(4, torch::kLong);
        const auto permuted = vae_loss(r.index_select(0, perm), x.index_select(0, perm), mu.index_select(0, perm),
                                       logvar.index_select(0, perm), 0.5);
        CHECK(permuted.total.item<double>() == doctest::Approx(loss.total.item<double>()).epsilon(1e-6));
    }
}

TEST_CASE("encoder and decoder shapes for every target") {
    for (const auto target : {VaeTarget::pixel, VaeTarget::amplitude, VaeTarget::phase}) {
        CAPTURE(to_string(target));
        Vae vae(small(target));
        vae->eval();
        const auto x = torch::rand({5, 3, 32, 32});
        const auto [mu, logvar] = vae->encode(x);
        CHECK((mu.sizes() == std::vector<int64_t>{5, 8}));
        CHECK(torch::isfinite(mu).all().item<bool>());
        CHECK(torch::isfinite(logvar).all().item<bool>());
        const auto out = vae->forward(x, false);
        CHECK(out.decoded.sizes() == x.sizes());
        CHECK(out.reconstruction.sizes() == x.sizes());
        if (target == VaeTarget::amplitude) CHECK(out.decoded.min().item<double>() >= 0.0);
        if (target == VaeTarget::phase) CHECK(out.decoded.abs().max().item<double>() <= M_PI);
    }
}

TEST_CASE("training lowers the loss and checkpoints round-trip") {
    torch::manual_seed(4);
    // Smooth toy images: random low-frequency blobs.
    const auto base = torch::rand({200, 3, 4, 4});
    const auto images = torch::nn::functional::interpolate(
        base, torch::nn::functional::InterpolateFuncOptions().size(std::vector<int64_t>{32, 32}).mode(torch::kBilinear).align_corners(false));
    const auto path = fs::temp_directory_path() / "recdet_test_vae.pt";
    VaeTrainOptions opts;
    opts.checkpoint_path = path.string();
    for (const auto target : {VaeTarget::pixel, VaeTarget::amplitude, VaeTarget::phase}) {
        CAPTURE(to_string(target));
        const auto result = train_vae(images, small(target), opts);
        REQUIRE(result.history.size() == 5);
        CHECK(result.history.back().loss < result.history.front().loss);
        auto loaded = load_vae(path.string());
        VaeSet a, b;
        const auto variant = target == VaeTarget::pixel       ? ReconVariant::pixel
                             : target == VaeTarget::amplitude ? ReconVariant::amp
                                                              : ReconVariant::pha;
        (target == VaeTarget::pixel ? a.pixel : target == VaeTarget::amplitude ? a.amplitude : a.phase) = result.model;
        (target == VaeTarget::pixel ? b.pixel : target == VaeTarget::amplitude ? b.amplitude : b.phase) = loaded;
        const auto x = images.slice(0, 0, 10);
        CHECK(torch::equal(reconstruct(a, x, variant), reconstruct(b, x, variant)));
        CHECK(torch::equal(reconstruct(a, x, variant), reconstruct(a, x, variant)));
    }
    fs::remove(path);
}

TEST_CASE("reconstruct composes with the untouched component") {
    torch::manual_seed(5);
    VaeSet set;
    set.phase = Vae(small(VaeTarget::phase));
    set.amplitude = Vae(small(VaeTarget::amplitude));
    set.phase->eval();
    set.amplitude->eval();
    const auto x = torch::rand({4, 3, 32, 32});
    const auto spec = dft_decompose(x);
    torch::NoGradGuard g;
    const auto decoded = set.phase->decode(set.phase->encode(x).first);
    const auto expected = recompose_variant(spec, SpectrumPair{spec.amplitude, decoded}, Recomposition::pha,
                                            {.clamp = false, .expect_real = false});
    CHECK(torch::equal(reconstruct(set, x, ReconVariant::pha), expected));

    const auto black = torch::zeros({2, 3, 32, 32});
    for (const auto v : {ReconVariant::pha, ReconVariant::amp, ReconVariant::joint}) {
        CHECK(torch::isfinite(reconstruct(set, black, v)).all().item<bool>());
    }
    CHECK_THROWS_AS(reconstruct(set, x, ReconVariant::pixel), ValidationError);
    VaeSet swapped;
    swapped.phase = set.amplitude;
    CHECK_THROWS_AS(check_variant_models(swapped, ReconVariant::pha), ValidationError);
}

TEST_CASE("VAE checkpoints keep the config and extra metadata") {
    const auto path = fs::temp_directory_path() / "recdet_test_vae_meta.pt";
    Vae vae(small(VaeTarget::phase));
    save_vae(path.string(), vae, {{"config_hash", "abc"}});
    nlohmann::json meta;
    const auto back = load_vae(path.string(), &meta);
    CHECK(back->config().target == VaeTarget::phase);
    CHECK(back->config().latent_dim == 8);
    CHECK(meta.at("config_hash") == "abc");
    fs::remove(path);
}
