#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "recdet/analysis.hpp"
#include "recdet/attacks.hpp"
#include "recdet/detector.hpp"
#include "recdet/features.hpp"
#include "recdet/models.hpp"
#include "recdet/vae.hpp"

namespace recdet {

inline constexpr int kConfigSchemaVersion = 1;

enum class ExtractorVariant { base, online };
enum class EvalComposition { same_attack, union_of_attacks };

ExtractorVariant parse_extractor_variant(std::string_view name);
std::string to_string(ExtractorVariant v);
EvalComposition parse_composition(std::string_view name);
std::string to_string(EvalComposition c);
ReconFamily parse_recon_family(std::string_view name);
std::string to_string(ReconFamily f);

/// Detection method, e.g. FRD-base(amp) or PRD-online(pixel).
struct MethodVariant {
    ReconFamily family = ReconFamily::frd;
    ExtractorVariant extractor = ExtractorVariant::base;
    ReconVariant recon = ReconVariant::amp;

    std::string name() const;
    void validate() const;
};

/// Parses "FRD-base(amp)", "PRD-online(pixel)" and friends.
MethodVariant parse_method(std::string_view name);

struct ModelRecipe {
    ClassifierConfig architecture;
    ClassifierTrainConfig training;
};

struct SubsetSizes {
    int64_t classifier_train = 50000;  // train split, classifiers
    int64_t vae_train = 50000;         // train split, VAEs
    int64_t detection_pool = 10000;    // test split, clean images feeding detection
    int64_t analysis_samples = 1000;   // CTR / similarity / probe populations
    int64_t difference_samples = 500;  // adversarial samples for the patch analysis
    /// Fixed detection split sizes (victim-correct clean images, drawn
    /// class-balanced). Both zero: split the pool by train_fraction instead.
    int64_t detection_train = 0;
    int64_t detection_test = 0;
};

struct ExperimentConfig {
    int schema_version = kConfigSchemaVersion;
    std::string name = "experiment";
    DatasetName dataset = DatasetName::cifar10;
    std::uint64_t seed = 0;
    bool strict_determinism = true;
    SubsetSizes subsets;

    ModelRecipe victim;
    ModelRecipe pretrained;  // online extractor
    /// Threat architectures are trained once per (architecture, strategy) and
    /// shared by every setting that names them. Each architecture used by a
    /// threat needs a recipe; its strategy is taken from the threat spec.
    std::vector<ThreatModelSpec> threats;
    std::vector<ModelRecipe> threat_recipes;

    VaeConfig vae_pixel{VaeTarget::pixel};
    VaeConfig vae_amplitude{VaeTarget::amplitude};
    VaeConfig vae_phase{VaeTarget::phase};

    MethodVariant method;
    /// Variant used by the strength sweep and the CTR analyses.
    MethodVariant strength_method{ReconFamily::frd, ExtractorVariant::base, ReconVariant::pha};
    std::vector<AttackSpec> attacks;  // one detector per training attack
    std::vector<std::string> layer_ids;  // empty: architecture default taps
    Pooling pooling = Pooling::avg;
    DetectorConfig detector;
    bool detector_defaults_per_attack = true;
    EvalComposition composition = EvalComposition::same_attack;
    double train_fraction = 0.7;

    std::vector<double> strengths{2.0 / 255.0, 4.0 / 255.0, 6.0 / 255.0, 8.0 / 255.0};
    std::vector<std::vector<std::string>> layer_sets;  // empty: single-stage sweep
    PatchGrid grid;
    double xi = kDefaultXi;

    const ModelRecipe& threat_recipe(Architecture a) const;
    void validate() const;
    /// Hash over the canonical JSON of everything that affects results.
    std::string hash() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// smoke: seconds, for pipeline plumbing tests. desk: hours on one CPU.
/// paper: the published protocol at full scale.
ExperimentConfig preset(std::string_view scale);

ExperimentConfig load_config(const std::string& path);
void save_config(const std::string& path, const ExperimentConfig& config);

}  // namespace recdet
