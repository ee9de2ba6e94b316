#pragma once

#include <optional>
#include <string>
#include <vector>

#include "recdet/common.hpp"
#include "recdet/detector.hpp"
#include "recdet/features.hpp"
#include "recdet/frequency.hpp"
#include "recdet/models.hpp"

namespace recdet {

/// Per-patch logit differences of one (x, delta) pair. `suppression[i]` is how
/// much patch i of the perturbation lowers the true-label logit, `promotion[i]`
/// how much it raises the adversarial label's logit; both floored at `xi`.
struct PatchDifferenceMap {
    torch::Tensor suppression;  // [m]
    torch::Tensor promotion;    // [m]
    PatchDomain domain = PatchDomain::pixel;
    PatchGrid grid;
    double xi = 1e-3;
};

inline constexpr double kDefaultXi = 1e-3;

/// Returns nullopt when `true_label == target_label` (nothing to attribute).
std::optional<PatchDifferenceMap> difference_map(const ImageBatch& image, const torch::Tensor& delta,
                                                 Classifier& model, int64_t true_label, int64_t target_label,
                                                 PatchDomain domain, PatchGrid grid = {}, double xi = kDefaultXi);

/// Batched form: the target label is the model's prediction on image + delta.
/// Rows of the outputs correspond to `sample_index`; skipped samples are counted.
struct DifferenceBatch {
    torch::Tensor suppression;   // [K, m]
    torch::Tensor promotion;     // [K, m]
    torch::Tensor sample_index;  // [K]
    int64_t skipped = 0;
    PatchDomain domain = PatchDomain::pixel;
    PatchGrid grid;
    double xi = kDefaultXi;

    /// Mean over every entry of both maps.
    double mean_value() const;
};

DifferenceBatch difference_maps(const ImageBatch& images, const torch::Tensor& deltas, Classifier& model,
                                const torch::Tensor& true_labels, PatchDomain domain, PatchGrid grid = {},
                                double xi = kDefaultXi, int64_t batch_size = 256);

struct KdeSummary {
    std::vector<double> support;
    std::vector<double> density;
    double mean = 0.0;
    double bandwidth = 0.0;
    /// Zero spread: support holds the single value and density its unit mass.
    bool degenerate = false;
};

/// Silverman's rule of thumb: 0.9 * min(sd, IQR / 1.34) * n^(-1/5).
double silverman_bandwidth(const std::vector<double>& values);

/// Gaussian KDE evaluated on `points` evenly spaced support values covering
/// [min - 3h, max + 3h]. A non-positive `bandwidth` selects Silverman's rule.
KdeSummary kde_summary(const std::vector<double>& values, double bandwidth = 0.0, int points = 512);

struct SimilaritySummary {
    double mean = 0.0;
    int64_t used = 0;
    int64_t excluded = 0;  // zero-norm activations
};

/// Mean per-sample cosine similarity of flattened activations at `layer`.
SimilaritySummary feature_cosine_similarity(const FeatureExtractor& extractor, const ImageBatch& originals,
                                            const ImageBatch& reconstructions, const std::string& layer);

struct CtrRecord {
    int64_t lc_count = 0;
    int64_t li_count = 0;
    std::string population;

    double lc_rate() const;
    double li_rate() const;
};

/// True where the victim predicts the same label before and after reconstruction.
torch::Tensor label_consistency(Classifier& victim, const ImageBatch& originals, const ImageBatch& reconstructions);

CtrRecord ctr_scores(Classifier& victim, const ImageBatch& originals, const ImageBatch& reconstructions,
                     const std::string& population = {});

/// One perturbation strength's detection pool plus the LC flag of its
/// adversarial rows (same order as the adversarial rows of `set`).
struct StrengthPool {
    double epsilon = 0.0;
    DetectionSet set;
    torch::Tensor adversarial_lc;  // [A] bool
};

struct BalancedPools {
    DetectionSet balanced;
    DetectionSet total;
    /// Adversarial rows drawn per (strength, case) cell, LC before LI.
    std::vector<int64_t> cell_counts;
    bool fallback = false;
};

/// Draws the same number of adversarial rows from every (strength, LC/LI)
/// cell, together with as many clean and noisy rows per strength as
/// adversarial rows were drawn there. An empty cell switches to drawing an
/// equal count per strength in the natural LC/LI proportion, with a warning.
BalancedPools ctr_balance_sample(const std::vector<StrengthPool>& pools, std::uint64_t seed);

struct ProbeResult {
    double normal_accuracy = 0.0;
    double adversarial_accuracy = 0.0;
};

inline constexpr int64_t kProbeMinimumSamples = 100;

/// Logistic-regression probe separating features before vs after
/// reconstruction within each population (rows are paired LC samples).
/// Held-out accuracy on a seeded 70/30 split.
ProbeResult inner_class_probe(const torch::Tensor& normal_before, const torch::Tensor& normal_after,
                              const torch::Tensor& adversarial_before, const torch::Tensor& adversarial_after,
                              std::uint64_t seed);

/// Held-out accuracy of one before/after probe.
double linear_probe_accuracy(const torch::Tensor& before, const torch::Tensor& after, std::uint64_t seed);

struct RankTest {
    double u = 0.0;
    double z = 0.0;
    double p_value = 1.0;  // one-sided, H1: first sample stochastically larger
};

/// Mann-Whitney U with normal approximation and tie correction.
RankTest mann_whitney_greater(const std::vector<double>& first, const std::vector<double>& second);

std::vector<double> to_vector(const torch::Tensor& t);

}  // namespace recdet
