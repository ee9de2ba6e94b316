#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "recdet/config.hpp"
#include "recdet/dataset.hpp"
#include "recdet/report.hpp"

namespace recdet {

enum class Side { train, test };
std::string to_string(Side s);

struct PipelineOptions {
    /// Accept on-disk artifacts written under a different config hash.
    bool force = false;
};

/// Victim-correct detection images, split image-wise so that no clean image
/// contributes rows to both the detector's training and test data.
struct DetectionImages {
    Split train;
    Split test;
};

/// Stage runner over one workspace. Every artifact (classifier, VAE, attack
/// archive, detection set, detector) is built on first request, written under
/// `workspace/artifacts` with the config hash, and reloaded afterwards.
class Pipeline {
public:
    Pipeline(ExperimentConfig config, std::filesystem::path workspace, PipelineOptions options = {});

    const ExperimentConfig& config() const { return config_; }
    const std::filesystem::path& workspace() const { return workspace_; }
    const std::string& config_hash() const { return hash_; }

    /// Stable per-artifact seed derived from the config seed and a key.
    std::uint64_t derive_seed(const std::string& key) const;

    const DatasetSplits& data();
    Classifier victim();
    Classifier pretrained();
    Classifier threat_member(Architecture architecture, TrainingStrategy strategy);
    ModelEnsemble threat_models(const ThreatModelSpec& spec);
    Vae vae(VaeTarget target);
    VaeSet vaes_for(ReconVariant variant);
    /// Layer ids default to the config's taps, else the architecture's default taps.
    FeatureExtractor extractor(const MethodVariant& method, const std::vector<std::string>& layers = {});

    const DetectionImages& detection_images();
    /// White-box when `threat` is null. Black-box archives exist for the test side only.
    AdversarialArchive archive(const AttackSpec& attack, const ThreatModelSpec* threat, Side side);
    ImageBatch noisy_images(const AttackSpec& attack, const ThreatModelSpec* threat, Side side);

    DetectionSet detection_set(const MethodVariant& method, const AttackSpec& attack, const ThreatModelSpec* threat,
                               Side side, const std::vector<std::string>& layers = {});
    /// Detector trained on the white-box training set of `attack`.
    Detector detector(const MethodVariant& method, const AttackSpec& attack,
                      const std::vector<std::string>& layers = {});
    /// Detector trained on an arbitrary set, cached under `key`.
    Detector detector_for(const std::string& key, const DetectionSet& train, AttackFamily family,
                          ReconFamily recon_family, const std::string& fingerprint);

    /// PGD-linf at 8/255 from the attack list (or its declared defaults).
    AttackSpec reference_attack() const;
    /// The reference attack rescaled to `epsilon`.
    AttackSpec strength_attack(double epsilon) const;

    /// Column labels: "white-box" followed by each distinct threat setting.
    std::vector<std::string> settings() const;

    // Stages. Each fills its part of `report`; failed cells stay absent and
    // are listed in report.failures.
    void run_bad_matrix(EvaluationReport& report);
    void sweep_layers(EvaluationReport& report);
    void sweep_strengths(EvaluationReport& report);
    void analyze(EvaluationReport& report);
    void controls(EvaluationReport& report);

    /// Report header with the run facts (no durations).
    EvaluationReport new_report() const;
    /// Every stage in order.
    EvaluationReport run_all();

    /// Wall-clock seconds per stage, written to `workspace/timings.json`.
    const std::map<std::string, double>& timings() const { return timings_; }
    void write_timings() const;
    /// Clean accuracy of every classifier touched so far, as metrics.
    void record_models(EvaluationReport& report) const;

private:
    std::filesystem::path artifact(const std::string& kind, const std::string& key) const;
    void check_meta(const nlohmann::json& meta, const std::filesystem::path& path) const;
    nlohmann::json stamp(nlohmann::json meta = nlohmann::json::object()) const;
    Classifier classifier(const std::string& key, const ModelRecipe& recipe);
    std::vector<std::string> resolve_layers(const MethodVariant& method, const std::vector<std::string>& layers);
    /// AUC on the union of `test_attacks` test sets, averaged over the threats of `setting`.
    double setting_auc(const Detector& detector, const MethodVariant& method,
                       const std::vector<AttackSpec>& test_attacks, const std::string& setting,
                       const std::vector<std::string>& layers = {});
    void timed(const std::string& stage, EvaluationReport& report, const std::function<void()>& body);

    ExperimentConfig config_;
    std::filesystem::path workspace_;
    PipelineOptions options_;
    std::string hash_;

    std::optional<DatasetSplits> data_;
    std::optional<DetectionImages> detection_images_;
    std::map<std::string, Classifier> classifiers_;
    std::map<std::string, Vae> vaes_;
    std::map<std::string, DetectionSet> sets_;
    std::map<std::string, std::shared_ptr<Detector>> detectors_;
    std::map<std::string, double> model_accuracy_;
    std::map<std::string, double> timings_;
};

/// PGD-linf at 8/255 from the config's attack list, else its declared defaults.
AttackSpec reference_attack(const ExperimentConfig& config);

/// Key for an attack spec that stays readable but distinguishes step counts.
std::string attack_key(const AttackSpec& attack);

}  // namespace recdet
