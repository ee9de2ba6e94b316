#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "testing.hpp"
#include "recdet/detector.hpp"

using namespace recdet;
namespace fs = std::filesystem;

namespace {

DetectionSet synthetic_set(int64_t per_class, const std::array<double, 3>& means, double sd, int64_t dim,
                           std::uint64_t seed) {
    auto gen = make_generator(seed);
    std::vector<torch::Tensor> feats, labels;
    for (int64_t c = 0; c < 3; ++c) {
        feats.push_back(torch::randn({per_class, dim}, gen) * sd + means[static_cast<size_t>(c)]);
        labels.push_back(torch::full({per_class}, c, torch::kLong));
    }
    DetectionSet set;
    set.features = torch::cat(feats);
    set.labels = torch::cat(labels);
    set.origin = torch::zeros({set.labels.size(0)}, torch::kLong);
    set.source = torch::arange(set.labels.size(0), torch::kLong);
    set.provenance = {Provenance{"synthetic", 0.0, "white-box", "train"}};
    return set;
}

}  // namespace

TEST_CASE("AUC matches the pairwise oracle on random sets with ties") {
    const auto r = oracle::auc_against_pairwise(1000, 200, 11);
    CHECK(r.compared == 1000);
    CHECK(r.worst < 1e-9);
}

TEST_CASE("AUC edge cases") {
    CHECK(evaluate_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<bool>{false, false, true, true}) == 1.0);
    CHECK(evaluate_auc(std::vector<double>(10, 0.3), std::vector<bool>{1, 0, 1, 0, 1, 0, 1, 0, 1, 1}) == 0.5);
    CHECK_THROWS_AS(evaluate_auc(std::vector<double>{0.1, 0.2}, std::vector<bool>{true, true}), ValidationError);
    const auto scores = torch::tensor({0.1, 0.5, 0.4, 0.9});
    const auto labels = torch::tensor({false, true, false, true});
    CHECK(evaluate_auc(scores, labels) == doctest::Approx(1.0));
}

TEST_CASE("AUC is invariant under strictly monotone transforms") {
    torch::manual_seed(12);
    const auto s = torch::randn({300}, torch::kDouble);
    const auto y = torch::rand({300}) < 0.5;
    const double base = evaluate_auc(s, y);
    CHECK(evaluate_auc(torch::exp(s), y) == doctest::Approx(base).epsilon(1e-12));
    CHECK(evaluate_auc(3.0 * s + 7.0, y) == doctest::Approx(base).epsilon(1e-12));
    CHECK(evaluate_auc(torch::atan(s), y) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("scores follow 1 - P(clean)") {
    DetectorNet net(2, 4);
    {
        torch::NoGradGuard g;
        for (auto& p : net->parameters()) p.zero_();
    }
    Detector uniform(net, DetectorConfig{}, "fp");
    const auto s = score(uniform, torch::randn({5, 2}));
    CHECK(s.sub(2.0 / 3.0).abs().max().item<double>() < 1e-6);

    DetectorNet sure(2, 4);
    {
        torch::NoGradGuard g;
        for (auto& p : sure->parameters()) p.zero_();
        sure->fc2->bias.index_put_({0}, 200.0);
    }
    CHECK(score(Detector(sure, DetectorConfig{}, "fp"), torch::randn({3, 2})).max().item<double>() == 0.0);

    DetectorNet random_net(6, 8);
    const auto r = score(Detector(random_net, DetectorConfig{}, "fp"), torch::randn({100, 6}) * 50.0);
    CHECK(r.min().item<double>() >= 0.0);
    CHECK(r.max().item<double>() <= 1.0);
    CHECK_THROWS_AS(score(Detector(random_net, DetectorConfig{}, "fp"), torch::randn({3, 5})), ValidationError);
}

TEST_CASE("separable synthetic features train to high accuracy with decreasing loss") {
    const auto set = synthetic_set(200, {0.0, 0.0, 10.0}, 0.1, 8, 1);
    DetectorConfig cfg;
    cfg.epochs = 15;
    const auto result = train_detector(set, cfg);
    CHECK(result.epoch_losses.back() < result.epoch_losses.front());
    const auto predicted = result.detector.probabilities(set.features).argmax(1);
    const auto merged = predicted.eq(2).eq(set.labels.eq(2)).to(torch::kDouble).mean().item<double>();
    CHECK(merged > 0.99);

    const auto clear = synthetic_set(200, {0.0, 5.0, 10.0}, 0.1, 8, 2);
    CHECK(train_detector(clear, cfg).train_accuracy > 0.99);
}

// A single shuffled-label detector still ranks test rows by whatever noise it
// fitted, so its AUC lands on either side of 0.5; the mean over seeds does not.
TEST_CASE("shuffled labels carry no signal on average") {
    double sum = 0.0;
    const int trials = 12;
    for (int t = 0; t < trials; ++t) {
        auto train = synthetic_set(400, {0.0, 1.0, 2.0}, 1.0, 6, 3 + 10 * t);
        auto gen = make_generator(4 + t);
        train.labels = train.labels.index_select(0, torch::randperm(train.size(), gen, torch::kLong));
        DetectorConfig cfg;
        cfg.epochs = 10;
        cfg.seed = t;
        const auto det = train_detector(train, cfg).detector;
        sum += detection_auc(det, synthetic_set(1000, {0.0, 1.0, 2.0}, 1.0, 6, 5 + 10 * t));
    }
    MESSAGE("mean shuffled-label AUC " << sum / trials);
    CHECK(sum / trials >= 0.45);
    CHECK(sum / trials <= 0.55);
}

TEST_CASE("a single class is refused and the standardization travels with the checkpoint") {
    auto one = synthetic_set(10, {0.0, 0.0, 0.0}, 1.0, 3, 6);
    one.labels.fill_(0);
    CHECK_THROWS_AS(train_detector(one, DetectorConfig{}), ValidationError);

    const auto set = synthetic_set(100, {1.0, 3.0, 8.0}, 2.0, 5, 7);
    DetectorConfig cfg;
    cfg.epochs = 5;
    const auto det = train_detector(set, cfg, "abc").detector;
    const auto path = fs::temp_directory_path() / "recdet_test_detector.pt";
    save_detector(path.string(), det);
    const auto back = load_detector(path.string());
    CHECK(back.extractor_fingerprint() == "abc");
    CHECK(back.input_dim() == 5);
    CHECK(torch::equal(score(det, set.features), score(back, set.features)));
    fs::remove(path);
}

TEST_CASE("stratified split keeps class proportions and partitions the rows") {
    const auto set = synthetic_set(50, {0.0, 1.0, 2.0}, 1.0, 2, 8);
    const auto [train, test] = stratified_split(set, 0.7, 9);
    CHECK(train.size() + test.size() == set.size());
    for (const auto count : train.class_counts()) CHECK(count == 35);
    for (const auto count : test.class_counts()) CHECK(count == 15);
    const auto again = stratified_split(set, 0.7, 9);
    CHECK(torch::equal(again.first.features, train.features));
}

TEST_CASE("detection sets concatenate and round-trip") {
    const auto a = synthetic_set(5, {0.0, 1.0, 2.0}, 1.0, 4, 10);
    auto b = synthetic_set(3, {0.0, 1.0, 2.0}, 1.0, 4, 11);
    b.provenance[0].threat = "SM-NT[VGG16]";
    const auto both = concat_sets({a, b});
    CHECK(both.size() == 24);
    CHECK(both.provenance.size() == 2);
    CHECK(both.origin.slice(0, 15).eq(1).all().item<bool>());
    const auto path = fs::temp_directory_path() / "recdet_test_set.pt";
    save_detection_set(path.string(), both);
    const auto back = load_detection_set(path.string());
    CHECK(torch::equal(back.features, both.features));
    CHECK(torch::equal(back.source, both.source));
    CHECK(back.provenance[1].threat == "SM-NT[VGG16]");
    fs::remove(path);
    CHECK_THROWS_AS(concat_sets({a, synthetic_set(2, {0.0, 1.0, 2.0}, 1.0, 3, 12)}), ValidationError);
}

TEST_CASE("per-attack optimizer settings") {
    const auto pgd = DetectorConfig::for_attack(AttackFamily::pgd_linf, DatasetName::cifar10, ReconFamily::frd);
    CHECK(pgd.weight_decay == doctest::Approx(5e-4));
    const auto fgsm = DetectorConfig::for_attack(AttackFamily::fgsm, DatasetName::cifar10, ReconFamily::frd);
    CHECK(fgsm.weight_decay == doctest::Approx(5e-3));
    const auto c100 = DetectorConfig::for_attack(AttackFamily::deepfool, DatasetName::cifar100, ReconFamily::frd);
    CHECK(c100.batch_size == 256);
    CHECK(c100.learning_rate == doctest::Approx(5e-2));
}

TEST_CASE("build_detection_dataset filters, labels and counts") {
    ClassifierConfig cc;
    cc.architecture = Architecture::toy_cnn;
    cc.width = 4;
    torch::manual_seed(13);
    Classifier victim(cc);
    victim->eval();
    VaeConfig vc;
    vc.target = VaeTarget::amplitude;
    vc.channels = {4, 8, 8, 8};
    vc.latent_dim = 4;
    VaeSet vaes;
    vaes.amplitude = Vae(vc);
    vaes.amplitude->eval();
    ExtractorSpec spec;
    spec.layer_ids = {"conv1", "penultimate"};
    const FeatureExtractor extractor(victim, spec);

    const auto clean = torch::rand({12, 3, 32, 32});
    const auto labels = predict(victim, clean);
    const DetectionInputs inputs{clean, clean.clone(), (clean + 0.03).clamp(0, 1), labels};
    const auto build = build_detection_dataset(inputs, victim, vaes, ReconVariant::amp, extractor,
                                               Provenance{"PGD_LINF-8of255", 8.0 / 255.0, "white-box", "train"});
    CHECK(build.dropped_clean == 0);
    CHECK(build.dropped_noisy == 0);
    CHECK(build.counts[0] == 12);
    CHECK(build.counts[0] == build.counts[1]);
    CHECK(build.counts[2] == 12);
    CHECK(build.set.dim() == extractor.feature_dim());

    // Wrong labels empty the clean class.
    const DetectionInputs wrong{clean, clean, clean, (labels + 1) % 10};
    CHECK_THROWS_WITH_AS(build_detection_dataset(wrong, victim, vaes, ReconVariant::amp, extractor, {}),
                         doctest::Contains("clean"), ValidationError);
}
