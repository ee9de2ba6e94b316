#pragma once

#include <array>
#include <string>
#include <vector>

#include "json.hpp"
#include "recdet/attacks.hpp"
#include "recdet/common.hpp"
#include "recdet/features.hpp"
#include "recdet/vae.hpp"

namespace recdet {

/// Detection classes. Noisy and adversarial are merged against clean at test time.
enum class DetectionClass : int64_t { clean = 0, noisy = 1, adversarial = 2 };
inline constexpr int64_t kDetectionClasses = 3;

struct Provenance {
    std::string attack;  // AttackSpec::id()
    double epsilon = 0.0;
    std::string threat;  // ThreatModelSpec::id(), "white-box" for the victim itself
    std::string split;
};

void to_json(nlohmann::json& j, const Provenance& p);
void from_json(const nlohmann::json& j, Provenance& p);

/// Column-major view of a list of detection samples: row i of `features`
/// carries label `labels[i]` and origin `provenance[origin[i]]`.
struct DetectionSet {
    torch::Tensor features;  // [N, D] float
    torch::Tensor labels;    // [N] int64 in {0, 1, 2}
    torch::Tensor origin;    // [N] int64 index into `provenance`
    torch::Tensor source;    // [N] int64 row of the source image in its input batch
    std::vector<Provenance> provenance;

    int64_t size() const { return labels.defined() ? labels.size(0) : 0; }
    int64_t dim() const { return features.defined() ? features.size(1) : 0; }
    std::array<int64_t, kDetectionClasses> class_counts() const;
    /// Rows selected by `index`, provenance table shared.
    DetectionSet subset(const torch::Tensor& index) const;
    /// 1 for noisy or adversarial rows.
    torch::Tensor is_positive() const;
    void validate() const;
};

DetectionSet concat_sets(const std::vector<DetectionSet>& sets);

/// Images entering the dataset builder. `adversarial` is crafted from `clean`
/// row by row and `noisy` comes from add_matched_noise on the same pair.
struct DetectionInputs {
    ImageBatch clean;
    ImageBatch noisy;
    ImageBatch adversarial;
    torch::Tensor labels;
};

struct DetectionBuild {
    DetectionSet set;
    int64_t dropped_clean = 0;
    int64_t dropped_noisy = 0;
    /// Indices into the inputs kept after the victim filter.
    torch::Tensor kept;
    std::array<int64_t, kDetectionClasses> counts{};
};

/// Filters clean and noisy rows to those the victim classifies correctly,
/// keeps the adversarial rows derived from surviving clean images, reconstructs
/// all three sets with `variant` and emits labeled reconstruction-error rows.
DetectionBuild build_detection_dataset(const DetectionInputs& inputs, Classifier& victim, const VaeSet& vaes,
                                       ReconVariant variant, const FeatureExtractor& extractor,
                                       const Provenance& provenance);

/// Stratified split by class, seeded. Each class contributes
/// round(train_fraction * count) rows to the training side.
std::pair<DetectionSet, DetectionSet> stratified_split(const DetectionSet& set, double train_fraction,
                                                       std::uint64_t seed);

enum class ReconFamily { prd, frd };
enum class DatasetName { cifar10, cifar100 };

struct DetectorConfig {
    int64_t hidden = 128;
    int epochs = 30;
    int batch_size = 128;
    double learning_rate = 1e-2;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::uint64_t seed = 0;

    /// Optimizer settings per training attack, dataset and reconstruction family.
    static DetectorConfig for_attack(AttackFamily attack, DatasetName dataset, ReconFamily family);
    void validate() const;
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);

struct DetectorNetImpl : torch::nn::Module {
    DetectorNetImpl(int64_t input_dim, int64_t hidden);
    /// Standardizes with the stored statistics, returns 3-way logits.
    torch::Tensor forward(const torch::Tensor& features);

    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
    torch::Tensor feature_mean, feature_std;
};
TORCH_MODULE(DetectorNet);

class Detector {
public:
    Detector(DetectorNet net, DetectorConfig config, std::string extractor_fingerprint);

    int64_t input_dim() const { return input_dim_; }
    const DetectorConfig& config() const { return config_; }
    const std::string& extractor_fingerprint() const { return fingerprint_; }
    DetectorNet& net() const { return net_; }

    /// Class probabilities [N, 3].
    torch::Tensor probabilities(const torch::Tensor& features) const;

private:
    mutable DetectorNet net_;
    DetectorConfig config_;
    std::string fingerprint_;
    int64_t input_dim_ = 0;
};

struct DetectorTrainResult {
    Detector detector;
    std::vector<double> epoch_losses;
    double train_accuracy = 0.0;
};

/// Standardization statistics come from `train` alone and travel with the model.
DetectorTrainResult train_detector(const DetectionSet& train, const DetectorConfig& config,
                                   const std::string& extractor_fingerprint = {});

/// Adversarial-ness 1 - P(clean), in [0, 1].
torch::Tensor score(const Detector& detector, const torch::Tensor& features);

/// Area under the ROC curve with adversarial (true) as positives; tied scores
/// count one half. Both classes must be present.
double evaluate_auc(const torch::Tensor& scores, const torch::Tensor& is_adversarial);
double evaluate_auc(const std::vector<double>& scores, const std::vector<bool>& is_adversarial);

/// Scores `set` and returns the merged-class AUC.
double detection_auc(const Detector& detector, const DetectionSet& set);

void save_detector(const std::string& path, const Detector& detector, const nlohmann::json& extra_meta = {});
Detector load_detector(const std::string& path, nlohmann::json* meta_out = nullptr);

void save_detection_set(const std::string& path, const DetectionSet& set, const nlohmann::json& meta = {});
DetectionSet load_detection_set(const std::string& path, nlohmann::json* meta_out = nullptr);

/// CSV with one row per sample: id,source,score,label,setting.
void write_scores_csv(const std::string& path, const torch::Tensor& scores, const DetectionSet& set,
                      const std::string& setting);

}  // namespace recdet
