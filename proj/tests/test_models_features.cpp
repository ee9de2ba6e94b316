#include <filesystem>

#include "testing.hpp"
#include "recdet/features.hpp"

using namespace recdet;
namespace fs = std::filesystem;

namespace {

Classifier model_of(Architecture a, int width) {
    torch::manual_seed(1);
    ClassifierConfig c;
    c.architecture = a;
    c.width = width;
    Classifier m(c);
    m->eval();
    return m;
}

FeatureExtractor toy_extractor(Pooling pooling = Pooling::avg) {
    return FeatureExtractor(model_of(Architecture::toy_cnn, 4), {"toy", ExtractorRole::victim, {"conv1", "conv2", "penultimate"}, pooling});
}

}  // namespace

TEST_CASE("every architecture exposes its taps with the expected shapes") {
    const auto x = torch::rand({2, 3, 32, 32});
    for (const auto a : {Architecture::vgg16, Architecture::resnet18, Architecture::wrn28, Architecture::toy_cnn}) {
        CAPTURE(to_string(a));
        auto m = model_of(a, 8);
        torch::NoGradGuard g;
        CHECK((m->forward(x).sizes() == std::vector<int64_t>{2, 10}));
        const auto taps = m->forward_taps(x, tap_names(a));
        CHECK(taps.size() == tap_names(a).size());
        CHECK((taps.at("logits").sizes() == std::vector<int64_t>{2, 10}));
        CHECK(taps.at("penultimate").dim() == 2);
        for (const auto& t : stage_taps(a)) CHECK(taps.at(t).dim() == 4);
        for (const auto& t : default_taps(a)) CHECK(taps.count(t) == 1);
        CHECK(torch::allclose(taps.at("logits"), m->forward(x)));
    }
}

TEST_CASE("unknown layers are rejected when the extractor is built") {
    CHECK_THROWS_AS(FeatureExtractor(model_of(Architecture::toy_cnn, 4), {"toy", ExtractorRole::victim, {"conv9"}}),
                    ValidationError);
    CHECK_THROWS_AS(FeatureExtractor(model_of(Architecture::toy_cnn, 4), {"toy", ExtractorRole::victim, {}}),
                    ValidationError);
}

TEST_CASE("reconstruction-error features") {
    const auto extractor = toy_extractor();
    torch::manual_seed(2);
    const auto x = torch::rand({6, 3, 32, 32});
    const auto r = torch::rand({6, 3, 32, 32});

    CHECK(extractor.feature_dim() == 4 + 8 + 8);
    CHECK((extractor.layer_dims() == std::vector<int64_t>{4, 8, 8}));

    const auto same = reconstruction_error(extractor, x, x);
    CHECK(same.vector.abs().max().item<double>() == 0.0);
    CHECK(same.layer_ids == extractor.spec().layer_ids);

    const auto forward = reconstruction_error(extractor, x, r).vector;
    const auto backward = reconstruction_error(extractor, r, x).vector;
    CHECK(torch::equal(forward, backward));
    CHECK(forward.min().item<double>() >= 0.0);
    CHECK((forward.sizes() == std::vector<int64_t>{6, extractor.feature_dim()}));

    const auto one = reconstruction_error(extractor, x.slice(0, 0, 1), r.slice(0, 0, 1)).vector;
    CHECK(one.size(1) == forward.size(1));
    CHECK(torch::allclose(one[0], forward[0], 1e-5, 1e-6));

    // Batched extraction is independent of the batch size.
    const auto chunked = reconstruction_error(extractor, x, r, 4).vector;
    CHECK(torch::allclose(chunked, forward, 1e-5, 1e-6));

    // Features are pooled |difference|, not the difference of pooled activations.
    const auto conv1_x = extractor.extract_activation(x, "conv1");
    const auto conv1_r = extractor.extract_activation(r, "conv1");
    const auto expected = (conv1_x - conv1_r).abs().mean({2, 3});
    CHECK(torch::allclose(forward.slice(1, 0, 4), expected, 1e-5, 1e-6));

    const auto max_pooled = reconstruction_error(toy_extractor(Pooling::max), x, r).vector;
    CHECK(torch::allclose(max_pooled.slice(1, 0, 4), (conv1_x - conv1_r).abs().amax({2, 3}), 1e-5, 1e-6));
}

TEST_CASE("extractor fingerprint tracks weights and taps") {
    const auto a = toy_extractor();
    const auto b = toy_extractor();
    CHECK(a.fingerprint() == b.fingerprint());
    const FeatureExtractor fewer(model_of(Architecture::toy_cnn, 4), {"toy", ExtractorRole::victim, {"conv1"}});
    CHECK(fewer.fingerprint() != a.fingerprint());
    torch::manual_seed(9);
    ClassifierConfig c;
    c.architecture = Architecture::toy_cnn;
    c.width = 4;
    const FeatureExtractor other(Classifier(c), a.spec());
    CHECK(other.fingerprint() != a.fingerprint());
}

TEST_CASE("feature dump round-trip") {
    FeatureDump d{torch::rand({5, 7}), torch::tensor({0, 1, 2, 1, 0}, torch::kLong), {"conv1", "conv2"}, "abc",
                  {{"method", "FRD-base(amp)"}}};
    const auto path = fs::temp_directory_path() / "recdet_test_features.pt";
    save_feature_dump(path.string(), d);
    const auto back = load_feature_dump(path.string());
    CHECK(torch::equal(back.features, d.features));
    CHECK(torch::equal(back.labels, d.labels));
    CHECK(back.layer_ids == d.layer_ids);
    CHECK(back.extractor_fingerprint == "abc");
    CHECK(back.meta.at("method") == "FRD-base(amp)");
    fs::remove(path);
}
