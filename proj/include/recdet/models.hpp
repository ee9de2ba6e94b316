#pragma once

#include <array>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "recdet/common.hpp"

namespace recdet {

enum class Architecture { vgg16, resnet18, wrn28, toy_cnn };

Architecture parse_architecture(std::string_view name);
std::string to_string(Architecture a);

struct ClassifierConfig {
    Architecture architecture = Architecture::resnet18;
    int num_classes = 10;
    int in_channels = 3;
    /// Width of the first stage. Standard widths: VGG16/ResNet18 64, WRN28-10 160.
    int width = 64;
    /// Input normalization owned by the model; callers always pass [0, 1] images.
    std::vector<float> mean{0.4914f, 0.4822f, 0.4465f};
    std::vector<float> std{0.2470f, 0.2435f, 0.2616f};
};

void to_json(nlohmann::json& j, const ClassifierConfig& c);
void from_json(const nlohmann::json& j, ClassifierConfig& c);

/// Ordered tap names an architecture exposes, bottom to top. "penultimate" is the
/// pooled feature vector feeding the classifier head, "logits" the head output.
std::vector<std::string> tap_names(Architecture a);

/// Residual stage outputs by default (top three) plus the penultimate feature.
std::vector<std::string> default_taps(Architecture a);

/// Stage-level taps for layer sweeps (one per stage/block, bottom to top).
std::vector<std::string> stage_taps(Architecture a);

using TapSink = std::function<void(const std::string&, const torch::Tensor&)>;

class BackboneImpl : public torch::nn::Module {
public:
    /// Runs the network on normalized input, reporting every tap to `sink`.
    virtual torch::Tensor run(const torch::Tensor& x, const TapSink& sink) = 0;
};

class ClassifierImpl : public torch::nn::Module {
public:
    explicit ClassifierImpl(ClassifierConfig config);

    /// Logits for images in [0, 1].
    torch::Tensor forward(const torch::Tensor& images);

    /// Activations at the requested taps (and nothing else is retained).
    std::map<std::string, torch::Tensor> forward_taps(const torch::Tensor& images,
                                                      const std::vector<std::string>& taps);

    const ClassifierConfig& config() const { return config_; }

private:
    torch::Tensor normalize(const torch::Tensor& images) const;

    ClassifierConfig config_;
    torch::Tensor mean_;
    torch::Tensor std_;
    std::shared_ptr<BackboneImpl> backbone_;
};
TORCH_MODULE(Classifier);

/// Argmax predictions in eval mode, batched, without gradients.
torch::Tensor predict(Classifier& model, const ImageBatch& images, int64_t batch_size = 500);

/// Logits in eval mode, batched, without gradients.
torch::Tensor predict_logits(Classifier& model, const ImageBatch& images, int64_t batch_size = 500);

double accuracy(Classifier& model, const ImageBatch& images, const torch::Tensor& labels);

}  // namespace recdet
