#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "recdet/common.hpp"
#include "recdet/frequency.hpp"

namespace recdet {

/// What a VAE reconstructs: raw pixels, the DFT amplitude, or the DFT phase.
enum class VaeTarget { pixel, amplitude, phase };

VaeTarget parse_vae_target(std::string_view name);
std::string to_string(VaeTarget t);

struct VaeConfig {
    VaeTarget target = VaeTarget::pixel;
    int latent_dim = 128;
    double beta = 1.0;
    int epochs = 50;
    int batch_size = 128;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::vector<int> channels{32, 64, 128, 256};
    int in_channels = 3;
    int height = 32;
    int width = 32;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const VaeConfig& c);
void from_json(const nlohmann::json& j, VaeConfig& c);

struct VaeOutput {
    ImageBatch reconstruction;  // pixel domain
    torch::Tensor decoded;      // target domain (pixels, amplitude or phase)
    torch::Tensor mu;
    torch::Tensor logvar;
};

/// Convolutional VAE. The encoder sees the target representation (pixels,
/// log1p(amplitude) or phase / pi); the decoder emits the same representation,
/// which is recomposed with the untouched component of the input.
class VaeImpl : public torch::nn::Module {
public:
    explicit VaeImpl(VaeConfig config);

    std::pair<torch::Tensor, torch::Tensor> encode(const ImageBatch& images);

    /// Decoder output mapped back to the target domain:
    /// pixels in (0, 1), amplitude >= 0, phase in (-pi, pi).
    torch::Tensor decode(const torch::Tensor& latent);

    /// Pixel-domain image from a decoded target tensor and the source spectrum.
    ImageBatch to_pixels(const torch::Tensor& decoded, const SpectrumPair& source) const;

    /// Full pass. `sample` draws z from the posterior (training); otherwise z = mu.
    VaeOutput forward(const ImageBatch& images, bool sample, torch::Generator* generator = nullptr);

    const VaeConfig& config() const { return config_; }

    /// Amplitude decoding is anchored at a per-frequency mean log1p(amplitude);
    /// the decoder learns the residual. Set from training data before training.
    void set_amplitude_offset(const torch::Tensor& mean_log_amplitude);

private:
    torch::Tensor encoder_input(const ImageBatch& images) const;

    VaeConfig config_;
    torch::nn::Sequential encoder_{nullptr};
    torch::nn::Linear to_mu_{nullptr};
    torch::nn::Linear to_logvar_{nullptr};
    torch::nn::Linear from_latent_{nullptr};
    torch::nn::Sequential decoder_{nullptr};
    int64_t bottom_height_ = 0;
    int64_t bottom_width_ = 0;
    torch::Tensor amplitude_offset_;
};
TORCH_MODULE(Vae);

struct VaeLoss {
    torch::Tensor total;
    torch::Tensor mse;  // mean over every element
    torch::Tensor kl;   // closed-form KL(N(mu, exp(logvar)) || N(0, I)), summed over latents, mean over batch
};

/// Negative ELBO with a pixel-domain MSE reconstruction term.
VaeLoss vae_loss(const ImageBatch& reconstruction, const ImageBatch& original, const torch::Tensor& mu,
                 const torch::Tensor& logvar, double beta);

struct VaeEpochStats {
    int epoch = 0;
    double loss = 0.0;
    double mse = 0.0;
    double kl = 0.0;
};

struct VaeTrainResult {
    Vae model{nullptr};
    std::vector<VaeEpochStats> history;
};

struct VaeTrainOptions {
    /// When set, the trained model is written here; on divergence the last stable
    /// state is written before the error propagates.
    std::optional<std::string> checkpoint_path;
    nlohmann::json extra_meta = nlohmann::json::object();
};

/// Trains on normal images only ([N, C, H, W] in [0, 1]).
VaeTrainResult train_vae(const ImageBatch& dataset, const VaeConfig& config, const VaeTrainOptions& options = {});

void save_vae(const std::string& path, Vae& model, const nlohmann::json& extra_meta = nlohmann::json::object());
Vae load_vae(const std::string& path, nlohmann::json* meta_out = nullptr);

/// How input images are rebuilt before feature extraction.
enum class ReconVariant { pixel, pha, amp, joint };

ReconVariant parse_recon_variant(std::string_view name);
std::string to_string(ReconVariant v);

/// The VAEs available to `reconstruct`; unused slots stay null.
struct VaeSet {
    Vae pixel{nullptr};
    Vae amplitude{nullptr};
    Vae phase{nullptr};
};

/// Throws if `models` lacks a VAE that `variant` needs.
void check_variant_models(const VaeSet& models, ReconVariant variant);

/// Deterministic reconstruction (posterior mean), pixel domain, not clamped.
ImageBatch reconstruct(const VaeSet& models, const ImageBatch& images, ReconVariant variant,
                       int64_t batch_size = 256);

}  // namespace recdet
