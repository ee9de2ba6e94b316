#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "recdet/common.hpp"
#include "recdet/models.hpp"

namespace recdet {

enum class AttackFamily { fgsm, bim, pgd_linf, pgd_l2, deepfool, cw };

AttackFamily parse_attack_family(std::string_view name);
std::string to_string(AttackFamily f);

/// One attack configuration. `epsilon` is the l-inf budget (pixel units) for
/// FGSM/BIM/PGD-linf and the l2 radius for PGD-l2. DeepFool and C&W are
/// minimum-norm attacks; their epsilon is recorded but does not bound them.
struct AttackSpec {
    AttackFamily family = AttackFamily::pgd_linf;
    double epsilon = 8.0 / 255.0;
    int steps = 20;
    double step_size = 0.8 / 255.0;
    bool targeted = false;
    bool random_start = true;
    // DeepFool
    double overshoot = 0.02;
    int deepfool_candidates = 10;
    // C&W l2
    double cw_confidence = 0.0;
    double cw_learning_rate = 0.01;
    double cw_initial_const = 1.0;
    int cw_binary_search_steps = 1;

    /// Declared defaults per family: BIM/PGD 20 steps with step epsilon/10,
    /// FGSM one step of epsilon, DeepFool 50 iterations with overshoot 0.02,
    /// C&W 100 iterations with confidence 0.
    static AttackSpec defaults(AttackFamily family, double epsilon);

    bool is_linf() const;
    std::string id() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const AttackSpec& s);
void from_json(const nlohmann::json& j, AttackSpec& s);

enum class TrainingStrategy { nt, at };
enum class ThreatMode { single, ensemble };

TrainingStrategy parse_strategy(std::string_view name);
std::string to_string(TrainingStrategy s);
ThreatMode parse_threat_mode(std::string_view name);
std::string to_string(ThreatMode m);

struct ThreatModelSpec {
    std::vector<Architecture> architectures;
    TrainingStrategy strategy = TrainingStrategy::nt;
    ThreatMode mode = ThreatMode::single;

    void validate() const;
    /// Setting label, e.g. "SM-NT" or "EM-AT".
    std::string setting() const;
    /// Unique id including the members, e.g. "SM-NT[VGG16]".
    std::string id() const;
};

void to_json(nlohmann::json& j, const ThreatModelSpec& s);
void from_json(const nlohmann::json& j, ThreatModelSpec& s);

/// Members are queried in eval mode; the ensemble output is the arithmetic
/// mean of member logits (a single member is returned unchanged).
class ModelEnsemble {
public:
    ModelEnsemble() = default;
    explicit ModelEnsemble(std::vector<Classifier> members);

    torch::Tensor logits(const torch::Tensor& images) const;
    size_t size() const { return members_.size(); }
    const std::vector<Classifier>& members() const { return members_; }

private:
    std::vector<Classifier> members_;
};

struct CraftResult {
    ImageBatch adversarial;
    /// Samples that hit a dead end (zero gradient, no adversarial found by C&W)
    /// and were returned unperturbed.
    int64_t fallback_count = 0;
};

/// Non-targeted attack against `model`. Outputs are clipped to [0, 1] and,
/// for l-inf families, satisfy |x' - x| <= epsilon sample-wise.
CraftResult craft(const AttackSpec& spec, const ModelEnsemble& model, const ImageBatch& images,
                  const torch::Tensor& labels, std::uint64_t seed, int64_t batch_size = 256);

/// Per-sample uniform noise whose l-inf magnitude matches that sample's
/// adversarial perturbation max|x_adv - x|, clipped to [0, 1].
ImageBatch add_matched_noise(const ImageBatch& clean, const ImageBatch& adversarial, std::uint64_t seed);

/// Fraction of `images` whose prediction differs from `labels`.
double fooling_rate(const ModelEnsemble& model, const ImageBatch& images, const torch::Tensor& labels);

struct ClassifierTrainConfig {
    TrainingStrategy strategy = TrainingStrategy::nt;
    int epochs = 30;
    int batch_size = 128;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    bool augment = true;
    std::uint64_t seed = 0;
    /// Inner maximization for adversarial training: PGD-linf 8/255, 7 steps of 2/255.
    AttackSpec adversarial{AttackFamily::pgd_linf, 8.0 / 255.0, 7, 2.0 / 255.0};
    double accuracy_floor = 0.60;
};

void to_json(nlohmann::json& j, const ClassifierTrainConfig& c);
void from_json(const nlohmann::json& j, ClassifierTrainConfig& c);

struct TrainedClassifier {
    Classifier model{nullptr};
    double clean_accuracy = 0.0;
    /// False when clean accuracy fell below the configured floor.
    bool usable = false;
    std::vector<double> epoch_losses;
};

TrainedClassifier train_classifier(const ClassifierConfig& architecture, const ClassifierTrainConfig& config,
                                   const ImageBatch& train_images, const torch::Tensor& train_labels,
                                   const ImageBatch& test_images, const torch::Tensor& test_labels);

void save_classifier(const std::string& path, Classifier& model, const nlohmann::json& extra_meta = {});
Classifier load_classifier(const std::string& path, nlohmann::json* meta_out = nullptr);

/// Random crop (4 px reflect padding) plus horizontal flip.
ImageBatch augment_batch(const ImageBatch& images, torch::Generator& generator);

/// Cached attack output for one (dataset, attack, threat model) triple.
struct AdversarialArchive {
    ImageBatch clean;
    ImageBatch adversarial;
    torch::Tensor labels;
    torch::Tensor victim_predictions;  // victim argmax on `adversarial`
    int64_t fallback_count = 0;
    nlohmann::json config;  // attack spec, threat id, dataset, seeds
};

void save_archive(const std::string& path, const AdversarialArchive& archive);
AdversarialArchive load_archive(const std::string& path);

}  // namespace recdet
