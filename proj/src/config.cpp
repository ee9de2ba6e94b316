#include "recdet/config.hpp"

#include "recdet/dataset.hpp"

#include <algorithm>
#include <fstream>

namespace recdet {

ExtractorVariant parse_extractor_variant(std::string_view name) {
    if (name == "base") return ExtractorVariant::base;
    if (name == "online") return ExtractorVariant::online;
    throw ValidationError("unknown extractor variant '" + std::string(name) + "'");
}

std::string to_string(ExtractorVariant v) { return v == ExtractorVariant::base ? "base" : "online"; }

EvalComposition parse_composition(std::string_view name) {
    if (name == "same-attack") return EvalComposition::same_attack;
    if (name == "union-of-six" || name == "union") return EvalComposition::union_of_attacks;
    throw ValidationError("unknown evaluation composition '" + std::string(name) + "'");
}

std::string to_string(EvalComposition c) {
    return c == EvalComposition::same_attack ? "same-attack" : "union-of-six";
}

ReconFamily parse_recon_family(std::string_view name) {
    if (name == "PRD") return ReconFamily::prd;
    if (name == "FRD") return ReconFamily::frd;
    throw ValidationError("unknown reconstruction family '" + std::string(name) + "'");
}

std::string to_string(ReconFamily f) { return f == ReconFamily::prd ? "PRD" : "FRD"; }

std::string MethodVariant::name() const {
    return to_string(family) + "-" + to_string(extractor) + "(" + to_string(recon) + ")";
}

void MethodVariant::validate() const {
    require((family == ReconFamily::prd) == (recon == ReconVariant::pixel), "method ", name(),
            ": PRD reconstructs pixels, FRD reconstructs pha, amp or joint");
}

MethodVariant parse_method(std::string_view name) {
    const auto dash = name.find('-');
    const auto open = name.find('(');
    const auto close = name.find(')');
    require(dash != std::string_view::npos && open != std::string_view::npos && close == name.size() - 1 &&
                dash < open,
            "method must look like FRD-base(amp), got '", name, "'");
    MethodVariant m;
    m.family = parse_recon_family(name.substr(0, dash));
    m.extractor = parse_extractor_variant(name.substr(dash + 1, open - dash - 1));
    m.recon = parse_recon_variant(name.substr(open + 1, close - open - 1));
    m.validate();
    return m;
}

namespace {

nlohmann::json recipe_json(const ModelRecipe& r) {
    return {{"architecture", r.architecture}, {"training", r.training}};
}

ModelRecipe recipe_from(const nlohmann::json& j) {
    return {j.at("architecture").get<ClassifierConfig>(), j.at("training").get<ClassifierTrainConfig>()};
}

}  // namespace

const ModelRecipe& ExperimentConfig::threat_recipe(Architecture a) const {
    for (const auto& r : threat_recipes) {
        if (r.architecture.architecture == a) return r;
    }
    throw ValidationError("no threat recipe for architecture " + to_string(a));
}

void ExperimentConfig::validate() const {
    require(schema_version == kConfigSchemaVersion, "config schema version ", schema_version,
            " is not supported (expected ", kConfigSchemaVersion, ")");
    method.validate();
    strength_method.validate();
    require(!attacks.empty(), "config needs at least one training attack");
    for (const auto& a : attacks) a.validate();
    for (const auto& t : threats) {
        t.validate();
        for (auto arch : t.architectures) threat_recipe(arch);
    }
    require(train_fraction > 0.0 && train_fraction < 1.0, "train_fraction must be in (0, 1)");
    require(subsets.classifier_train > 0 && subsets.vae_train > 0 && subsets.detection_pool > 0,
            "subset sizes must be positive");
    require(subsets.detection_train >= 0 && subsets.detection_test >= 0 &&
                (subsets.detection_train > 0) == (subsets.detection_test > 0),
            "detection_train and detection_test are both set or both zero");
    require(subsets.detection_train + subsets.detection_test <= subsets.detection_pool,
            "detection_train + detection_test exceeds detection_pool");
    require(victim.architecture.num_classes == num_classes(dataset), "victim has ",
            victim.architecture.num_classes, " classes but ", to_string(dataset), " has ", num_classes(dataset));
    if (method.extractor == ExtractorVariant::online || strength_method.extractor == ExtractorVariant::online) {
        const bool same_recipe = recipe_json(pretrained) == recipe_json(victim);
        require(!same_recipe, "online variant needs a pretrained extractor distinct from the victim");
    }
    for (double e : strengths) require(e > 0.0, "sweep strengths must be positive");
    require(xi > 0.0, "xi must be positive");
    detector.validate();
    vae_pixel.validate();
    vae_amplitude.validate();
    vae_phase.validate();
}

std::string ExperimentConfig::hash() const {
    nlohmann::json j = *this;
    j.erase("name");
    return sha256_hex(j.dump()).substr(0, 16);
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    nlohmann::json recipes = nlohmann::json::array();
    for (const auto& r : c.threat_recipes) recipes.push_back(recipe_json(r));
    j = {
        {"schema_version", c.schema_version},
        {"name", c.name},
        {"dataset", to_string(c.dataset)},
        {"seed", c.seed},
        {"strict_determinism", c.strict_determinism},
        {"subsets",
         {{"classifier_train", c.subsets.classifier_train},
          {"vae_train", c.subsets.vae_train},
          {"detection_pool", c.subsets.detection_pool},
          {"analysis_samples", c.subsets.analysis_samples},
          {"difference_samples", c.subsets.difference_samples},
          {"detection_train", c.subsets.detection_train},
          {"detection_test", c.subsets.detection_test}}},
        {"victim", recipe_json(c.victim)},
        {"pretrained", recipe_json(c.pretrained)},
        {"threats", c.threats},
        {"threat_recipes", recipes},
        {"vae", {{"pixel", c.vae_pixel}, {"amplitude", c.vae_amplitude}, {"phase", c.vae_phase}}},
        {"method", c.method.name()},
        {"strength_method", c.strength_method.name()},
        {"attacks", c.attacks},
        {"layer_ids", c.layer_ids},
        {"pooling", to_string(c.pooling)},
        {"detector", c.detector},
        {"detector_defaults_per_attack", c.detector_defaults_per_attack},
        {"composition", to_string(c.composition)},
        {"train_fraction", c.train_fraction},
        {"strengths", c.strengths},
        {"layer_sets", c.layer_sets},
        {"grid", {{"rows", c.grid.rows}, {"cols", c.grid.cols}}},
        {"xi", c.xi},
    };
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    c = ExperimentConfig{};
    c.schema_version = j.at("schema_version").get<int>();
    require(c.schema_version == kConfigSchemaVersion, "config schema version ", c.schema_version,
            " is not supported (expected ", kConfigSchemaVersion, ")");
    c.name = j.value("name", c.name);
    c.dataset = parse_dataset_name(j.at("dataset").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.strict_determinism = j.value("strict_determinism", c.strict_determinism);
    if (j.contains("subsets")) {
        const auto& s = j.at("subsets");
        c.subsets.classifier_train = s.value("classifier_train", c.subsets.classifier_train);
        c.subsets.vae_train = s.value("vae_train", c.subsets.vae_train);
        c.subsets.detection_pool = s.value("detection_pool", c.subsets.detection_pool);
        c.subsets.analysis_samples = s.value("analysis_samples", c.subsets.analysis_samples);
        c.subsets.difference_samples = s.value("difference_samples", c.subsets.difference_samples);
        c.subsets.detection_train = s.value("detection_train", c.subsets.detection_train);
        c.subsets.detection_test = s.value("detection_test", c.subsets.detection_test);
    }
    c.victim = recipe_from(j.at("victim"));
    c.pretrained = recipe_from(j.at("pretrained"));
    c.threats = j.value("threats", std::vector<ThreatModelSpec>{});
    for (const auto& r : j.value("threat_recipes", nlohmann::json::array())) c.threat_recipes.push_back(recipe_from(r));
    const auto& vae = j.at("vae");
    c.vae_pixel = vae.at("pixel").get<VaeConfig>();
    c.vae_amplitude = vae.at("amplitude").get<VaeConfig>();
    c.vae_phase = vae.at("phase").get<VaeConfig>();
    c.method = parse_method(j.at("method").get<std::string>());
    c.strength_method = parse_method(j.value("strength_method", c.strength_method.name()));
    c.attacks = j.at("attacks").get<std::vector<AttackSpec>>();
    c.layer_ids = j.value("layer_ids", c.layer_ids);
    c.pooling = parse_pooling(j.value("pooling", std::string("avg")));
    c.detector = j.value("detector", c.detector);
    c.detector_defaults_per_attack = j.value("detector_defaults_per_attack", c.detector_defaults_per_attack);
    c.composition = parse_composition(j.value("composition", to_string(c.composition)));
    c.train_fraction = j.value("train_fraction", c.train_fraction);
    c.strengths = j.value("strengths", c.strengths);
    c.layer_sets = j.value("layer_sets", c.layer_sets);
    if (j.contains("grid")) {
        c.grid.rows = j.at("grid").value("rows", c.grid.rows);
        c.grid.cols = j.at("grid").value("cols", c.grid.cols);
    }
    c.xi = j.value("xi", c.xi);
}

namespace {

ModelRecipe make_recipe(Architecture arch, int width, int epochs, int classes, std::uint64_t seed,
                        double floor) {
    ModelRecipe r;
    r.architecture.architecture = arch;
    r.architecture.width = width;
    r.architecture.num_classes = classes;
    r.training.epochs = epochs;
    r.training.seed = seed;
    r.training.accuracy_floor = floor;
    return r;
}

VaeConfig make_vae(VaeTarget target, int epochs, std::vector<int> channels, int latent, std::uint64_t seed) {
    VaeConfig v;
    v.target = target;
    v.epochs = epochs;
    v.channels = std::move(channels);
    v.latent_dim = latent;
    v.seed = seed;
    // Tuned for the pixel-domain mean-squared error: at beta = 1 the KL term
    // dominates a per-element MSE and the posterior collapses.
    v.beta = 1e-4;
    v.learning_rate = 0.1;
    return v;
}

ThreatModelSpec threat(std::vector<Architecture> archs, TrainingStrategy strategy) {
    ThreatModelSpec t;
    t.mode = archs.size() > 1 ? ThreatMode::ensemble : ThreatMode::single;
    t.architectures = std::move(archs);
    t.strategy = strategy;
    return t;
}

}  // namespace

ExperimentConfig preset(std::string_view scale) {
    ExperimentConfig c;
    c.name = std::string(scale);
    const int classes = 10;
    if (scale == "smoke") {
        c.subsets = {512, 512, 240, 120, 24};
        c.victim = make_recipe(Architecture::resnet18, 4, 1, classes, 11, 0.0);
        c.pretrained = make_recipe(Architecture::wrn28, 4, 1, classes, 12, 0.0);
        c.threat_recipes = {make_recipe(Architecture::vgg16, 4, 1, classes, 13, 0.0)};
        c.threats = {threat({Architecture::vgg16}, TrainingStrategy::nt)};
        c.vae_pixel = make_vae(VaeTarget::pixel, 1, {8, 16, 32, 64}, 16, 21);
        c.vae_amplitude = make_vae(VaeTarget::amplitude, 1, {8, 16, 32, 64}, 16, 22);
        c.vae_phase = make_vae(VaeTarget::phase, 1, {8, 16, 32, 64}, 16, 23);
        auto pgd = AttackSpec::defaults(AttackFamily::pgd_linf, 8.0 / 255.0);
        pgd.steps = 3;
        pgd.step_size = 8.0 / 255.0 / 3.0;
        c.attacks = {pgd, AttackSpec::defaults(AttackFamily::fgsm, 8.0 / 255.0)};
        c.detector.epochs = 3;
        c.strengths = {2.0 / 255.0, 8.0 / 255.0};
        return c;
    }
    if (scale == "desk") {
        c.subsets = {10000, 10000, 10000, 1000, 500, 5000, 2000};
        c.victim = make_recipe(Architecture::resnet18, 8, 20, classes, 11, 0.60);
        c.pretrained = make_recipe(Architecture::wrn28, 8, 20, classes, 12, 0.60);
        c.threat_recipes = {make_recipe(Architecture::vgg16, 8, 20, classes, 13, 0.60)};
        c.threats = {threat({Architecture::vgg16}, TrainingStrategy::nt)};
        c.vae_pixel = make_vae(VaeTarget::pixel, 20, {32, 64, 128, 256}, 128, 21);
        c.vae_amplitude = make_vae(VaeTarget::amplitude, 20, {32, 64, 128, 256}, 128, 22);
        c.vae_phase = make_vae(VaeTarget::phase, 20, {32, 64, 128, 256}, 128, 23);
        c.attacks = {AttackSpec::defaults(AttackFamily::pgd_linf, 8.0 / 255.0),
                     AttackSpec::defaults(AttackFamily::fgsm, 8.0 / 255.0)};
        // One method for the whole desk run: detection, strength sweep and CTR.
        c.strength_method = c.method;
        return c;
    }
    if (scale == "paper") {
        c.subsets = {50000, 50000, 10000, 1000, 500};
        c.victim = make_recipe(Architecture::resnet18, 64, 100, classes, 11, 0.60);
        c.pretrained = make_recipe(Architecture::wrn28, 160, 100, classes, 12, 0.60);
        c.threat_recipes = {make_recipe(Architecture::vgg16, 64, 100, classes, 13, 0.60),
                            make_recipe(Architecture::wrn28, 160, 100, classes, 14, 0.60),
                            make_recipe(Architecture::resnet18, 64, 100, classes, 15, 0.60)};
        c.threats = {threat({Architecture::vgg16}, TrainingStrategy::nt),
                     threat({Architecture::wrn28}, TrainingStrategy::nt),
                     threat({Architecture::resnet18}, TrainingStrategy::at),
                     threat({Architecture::vgg16, Architecture::wrn28}, TrainingStrategy::nt),
                     threat({Architecture::vgg16, Architecture::wrn28}, TrainingStrategy::at)};
        c.vae_pixel = make_vae(VaeTarget::pixel, 50, {32, 64, 128, 256}, 128, 21);
        c.vae_amplitude = make_vae(VaeTarget::amplitude, 50, {32, 64, 128, 256}, 128, 22);
        c.vae_phase = make_vae(VaeTarget::phase, 50, {32, 64, 128, 256}, 128, 23);
        c.attacks = {AttackSpec::defaults(AttackFamily::fgsm, 8.0 / 255.0),
                     AttackSpec::defaults(AttackFamily::bim, 8.0 / 255.0),
                     AttackSpec::defaults(AttackFamily::pgd_linf, 8.0 / 255.0),
                     AttackSpec::defaults(AttackFamily::pgd_l2, 0.5),
                     AttackSpec::defaults(AttackFamily::deepfool, 8.0 / 255.0),
                     AttackSpec::defaults(AttackFamily::cw, 8.0 / 255.0)};
        return c;
    }
    throw ValidationError("unknown scale preset '" + std::string(scale) + "' (smoke, desk, paper)");
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot read config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config " + path + " is not valid JSON: " + e.what());
    }
    auto c = j.get<ExperimentConfig>();
    c.validate();
    return c;
}

void save_config(const std::string& path, const ExperimentConfig& config) {
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write config " + path);
    out << nlohmann::json(config).dump(2) << '\n';
}

}  // namespace recdet
