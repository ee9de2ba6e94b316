#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "recdet/common.hpp"
#include "recdet/models.hpp"

namespace recdet {

/// victim: the protected model doubles as feature extractor ("base").
/// pretrained: an independent model supplies the features ("online").
enum class ExtractorRole { victim, pretrained };
enum class Pooling { avg, max };

ExtractorRole parse_extractor_role(std::string_view name);
std::string to_string(ExtractorRole r);
Pooling parse_pooling(std::string_view name);
std::string to_string(Pooling p);

struct ExtractorSpec {
    std::string model_ref;  // checkpoint id in the model zoo
    ExtractorRole role = ExtractorRole::victim;
    std::vector<std::string> layer_ids;
    Pooling pooling = Pooling::avg;
};

void to_json(nlohmann::json& j, const ExtractorSpec& s);
void from_json(const nlohmann::json& j, ExtractorSpec& s);

/// Layerwise |M_l(x_r) - M_l(x_o)|, spatially pooled per channel and
/// concatenated over the tapped layers in spec order. Shape [N, D].
struct ReconErrorFeature {
    torch::Tensor vector;
    std::vector<std::string> layer_ids;
};

/// Read-only wrapper around a classifier used as feature extractor.
/// Layer ids are validated on construction, never mid-run.
class FeatureExtractor {
public:
    FeatureExtractor(Classifier model, ExtractorSpec spec);

    /// Activation at one tap, inference mode, no gradients.
    torch::Tensor extract_activation(const ImageBatch& images, const std::string& layer_id,
                                     int64_t batch_size = 256) const;

    /// Pooled per-layer vectors concatenated: [N, D]. Exposed for analyses
    /// that need the raw (non-differenced) features.
    torch::Tensor pooled_features(const ImageBatch& images, int64_t batch_size = 256) const;

    /// Flattened activation of one tap, [N, prod(dims)].
    torch::Tensor flat_activation(const ImageBatch& images, const std::string& layer_id,
                                  int64_t batch_size = 256) const;

    int64_t feature_dim() const { return feature_dim_; }
    const std::vector<int64_t>& layer_dims() const { return layer_dims_; }
    const ExtractorSpec& spec() const { return spec_; }
    Classifier& model() const { return model_; }

    /// Stable identity of (model weights, taps, pooling).
    std::string fingerprint() const { return fingerprint_; }

private:
    torch::Tensor pool(const torch::Tensor& activation) const;

    mutable Classifier model_;
    ExtractorSpec spec_;
    int64_t feature_dim_ = 0;
    std::vector<int64_t> layer_dims_;
    std::string fingerprint_;
};

ReconErrorFeature reconstruction_error(const FeatureExtractor& extractor, const ImageBatch& originals,
                                       const ImageBatch& reconstructions, int64_t batch_size = 256);

/// On-disk feature set consumed by the detector stage and external tools.
struct FeatureDump {
    torch::Tensor features;  // [N, D] float
    torch::Tensor labels;    // [N] int64
    std::vector<std::string> layer_ids;
    std::string extractor_fingerprint;
    nlohmann::json meta = nlohmann::json::object();
};

void save_feature_dump(const std::string& path, const FeatureDump& dump);
FeatureDump load_feature_dump(const std::string& path);

}  // namespace recdet
