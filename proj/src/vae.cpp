#include "recdet/vae.hpp"

#include <cmath>
#include <numbers>

#include "recdet/checkpoint.hpp"

namespace recdet {

namespace nn = torch::nn;

VaeTarget parse_vae_target(std::string_view name) {
    if (name == "pixel") return VaeTarget::pixel;
    if (name == "amplitude" || name == "amp") return VaeTarget::amplitude;
    if (name == "phase" || name == "pha") return VaeTarget::phase;
    throw ValidationError("unknown VAE target '" + std::string(name) + "'");
}

std::string to_string(VaeTarget t) {
    switch (t) {
        case VaeTarget::pixel: return "pixel";
        case VaeTarget::amplitude: return "amplitude";
        case VaeTarget::phase: return "phase";
    }
    throw ValidationError("invalid VAE target value");
}

void VaeConfig::validate() const {
    require(latent_dim > 0, "VaeConfig: latent_dim must be positive");
    require(beta >= 0.0, "VaeConfig: beta must be non-negative");
    require(epochs >= 1, "VaeConfig: epochs must be >= 1");
    require(batch_size >= 1, "VaeConfig: batch_size must be >= 1");
    require(learning_rate > 0.0, "VaeConfig: learning_rate must be positive");
    require(!channels.empty(), "VaeConfig: need at least one encoder layer");
    const int factor = 1 << channels.size();
    require(height % factor == 0 && width % factor == 0, "VaeConfig: ", height, "x", width,
            " is not divisible by 2^", channels.size());
}

void to_json(nlohmann::json& j, const VaeConfig& c) {
    j = {{"target", to_string(c.target)}, {"latent_dim", c.latent_dim},   {"beta", c.beta},
         {"epochs", c.epochs},            {"batch_size", c.batch_size},   {"learning_rate", c.learning_rate},
         {"momentum", c.momentum},        {"weight_decay", c.weight_decay}, {"channels", c.channels},
         {"in_channels", c.in_channels},  {"height", c.height},           {"width", c.width},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, VaeConfig& c) {
    c.target = parse_vae_target(j.at("target").get<std::string>());
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.beta = j.value("beta", c.beta);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.channels = j.value("channels", c.channels);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.seed = j.value("seed", c.seed);
}

VaeImpl::VaeImpl(VaeConfig config) : config_(std::move(config)) {
    config_.validate();
    encoder_ = nn::Sequential();
    int in = config_.in_channels;
    for (int c : config_.channels) {
        encoder_->push_back(nn::Conv2d(nn::Conv2dOptions(in, c, 4).stride(2).padding(1)));
        encoder_->push_back(nn::BatchNorm2d(c));
        encoder_->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
        in = c;
    }
    register_module("encoder", encoder_);

    bottom_height_ = config_.height >> config_.channels.size();
    bottom_width_ = config_.width >> config_.channels.size();
    const int64_t flat = static_cast<int64_t>(in) * bottom_height_ * bottom_width_;
    to_mu_ = register_module("to_mu", nn::Linear(flat, config_.latent_dim));
    to_logvar_ = register_module("to_logvar", nn::Linear(flat, config_.latent_dim));
    from_latent_ = register_module("from_latent", nn::Linear(config_.latent_dim, flat));

    decoder_ = nn::Sequential();
    for (size_t i = config_.channels.size() - 1; i > 0; --i) {
        const int a = config_.channels[i];
        const int b = config_.channels[i - 1];
        decoder_->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(a, b, 4).stride(2).padding(1)));
        decoder_->push_back(nn::BatchNorm2d(b));
        decoder_->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
    }
    decoder_->push_back(nn::ConvTranspose2d(
        nn::ConvTranspose2dOptions(config_.channels.front(), config_.in_channels, 4).stride(2).padding(1)));
    register_module("decoder", decoder_);
    amplitude_offset_ =
        register_buffer("amplitude_offset", torch::zeros({config_.in_channels, config_.height, config_.width}));
}

void VaeImpl::set_amplitude_offset(const torch::Tensor& mean_log_amplitude) {
    check_same_shape(mean_log_amplitude, amplitude_offset_, "amplitude offset");
    torch::NoGradGuard no_grad;
    amplitude_offset_.copy_(mean_log_amplitude);
}

torch::Tensor VaeImpl::encoder_input(const ImageBatch& images) const {
    switch (config_.target) {
        case VaeTarget::pixel: return images;
        case VaeTarget::amplitude: return torch::log1p(dft_decompose(images).amplitude);
        case VaeTarget::phase: return dft_decompose(images).phase / std::numbers::pi;
    }
    throw ValidationError("invalid VAE target");
}

std::pair<torch::Tensor, torch::Tensor> VaeImpl::encode(const ImageBatch& images) {
    require(images.dim() == 4 && images.size(1) == config_.in_channels && images.size(2) == config_.height &&
                images.size(3) == config_.width,
            "VAE expects [N, ", config_.in_channels, ", ", config_.height, ", ", config_.width, "], got ",
            images.sizes());
    const auto h = encoder_->forward(encoder_input(images)).flatten(1);
    // The clamp keeps exp(logvar) finite; it is inactive for a healthy posterior.
    return {to_mu_->forward(h), to_logvar_->forward(h).clamp(-20.0, 20.0)};
}

torch::Tensor VaeImpl::decode(const torch::Tensor& latent) {
    auto h = from_latent_->forward(latent).view(
        {latent.size(0), config_.channels.back(), bottom_height_, bottom_width_});
    const auto raw = decoder_->forward(h);
    switch (config_.target) {
        case VaeTarget::pixel: return torch::sigmoid(raw);
        case VaeTarget::amplitude: {
            // An image in [0, 1] cannot have a DFT amplitude above H * W.
            const double ceiling = std::log1p(static_cast<double>(config_.height * config_.width));
            return torch::expm1((amplitude_offset_ + raw).clamp(0.0, ceiling));
        }
        case VaeTarget::phase: return std::numbers::pi * torch::tanh(raw);
    }
    throw ValidationError("invalid VAE target");
}

ImageBatch VaeImpl::to_pixels(const torch::Tensor& decoded, const SpectrumPair& source) const {
    // Decoded spectra are not Hermitian, so the inverse transform has an imaginary part.
    const RecomposeOptions options{.clamp = false, .expect_real = false};
    switch (config_.target) {
        case VaeTarget::pixel: return decoded;
        case VaeTarget::amplitude:
            return recompose_variant(source, SpectrumPair{decoded, source.phase}, Recomposition::amp, options);
        case VaeTarget::phase:
            return recompose_variant(source, SpectrumPair{source.amplitude, decoded}, Recomposition::pha, options);
    }
    throw ValidationError("invalid VAE target");
}

VaeOutput VaeImpl::forward(const ImageBatch& images, bool sample, torch::Generator* generator) {
    VaeOutput out;
    std::tie(out.mu, out.logvar) = encode(images);
    auto z = out.mu;
    if (sample) {
        const auto noise = generator ? torch::randn(out.mu.sizes(), *generator, out.mu.options())
                                     : torch::randn_like(out.mu);
        z = out.mu + noise * torch::exp(0.5 * out.logvar);
    }
    out.decoded = decode(z);
    if (config_.target == VaeTarget::pixel) {
        out.reconstruction = out.decoded;
    } else {
        out.reconstruction = to_pixels(out.decoded, dft_decompose(images));
    }
    return out;
}

VaeLoss vae_loss(const ImageBatch& reconstruction, const ImageBatch& original, const torch::Tensor& mu,
                 const torch::Tensor& logvar, double beta) {
    check_same_shape(reconstruction, original, "vae_loss reconstruction");
    check_same_shape(mu, logvar, "vae_loss posterior");
    require(mu.dim() == 2 && mu.size(0) == original.size(0), "vae_loss: mu/logvar must be [N, latent_dim]");
    VaeLoss loss;
    loss.mse = torch::mse_loss(reconstruction, original);
    loss.kl = 0.5 * (torch::exp(logvar) + mu * mu - 1.0 - logvar).sum(1).mean();
    loss.total = loss.mse + beta * loss.kl;
    return loss;
}

VaeTrainResult train_vae(const ImageBatch& dataset, const VaeConfig& config, const VaeTrainOptions& options) {
    config.validate();
    check_image_batch(dataset, "train_vae dataset");
    require(dataset.size(0) > 0, "train_vae: empty dataset");

    torch::manual_seed(config.seed);
    auto generator = make_generator(config.seed + 1);
    VaeTrainResult result;
    result.model = Vae(config);
    auto& model = result.model;
    if (config.target == VaeTarget::amplitude) {
        torch::NoGradGuard no_grad;
        auto sum = torch::zeros({config.in_channels, config.height, config.width});
        for (int64_t s = 0; s < dataset.size(0); s += 1000) {
            sum += torch::log1p(dft_decompose(dataset.slice(0, s, s + 1000)).amplitude).sum(0);
        }
        model->set_amplitude_offset(sum / static_cast<double>(dataset.size(0)));
    }
    torch::optim::SGD optimizer(model->parameters(), torch::optim::SGDOptions(config.learning_rate)
                                                         .momentum(config.momentum)
                                                         .weight_decay(config.weight_decay));

    auto write = [&](const std::string& path) { save_vae(path, model, options.extra_meta); };
    std::map<std::string, torch::Tensor> last_stable;
    collect_state(*model, last_stable);

    const int64_t n = dataset.size(0);
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        model->train();
        const auto order = torch::randperm(n, generator, torch::kLong);
        double sum_loss = 0.0, sum_mse = 0.0, sum_kl = 0.0;
        for (int64_t start = 0; start < n; start += config.batch_size) {
            const auto idx = order.slice(0, start, std::min(n, start + config.batch_size));
            const auto batch = dataset.index_select(0, idx);
            const auto out = model->forward(batch, /*sample=*/true, &generator);
            const auto loss = vae_loss(out.reconstruction, batch, out.mu, out.logvar, config.beta);
            const double total = loss.total.item<double>();
            if (!std::isfinite(total)) {
                restore_state(*model, last_stable);
                if (options.checkpoint_path) {
                    write(*options.checkpoint_path);
                }
                throw DivergenceError(detail::concat("VAE (", to_string(config.target),
                                                     ") diverged: epoch=", epoch, " lr=", config.learning_rate,
                                                     " mse=", loss.mse.item<double>(),
                                                     " kl=", loss.kl.item<double>()));
            }
            optimizer.zero_grad();
            loss.total.backward();
            optimizer.step();
            const auto count = static_cast<double>(idx.size(0));
            sum_loss += total * count;
            sum_mse += loss.mse.item<double>() * count;
            sum_kl += loss.kl.item<double>() * count;
        }
        result.history.push_back({epoch, sum_loss / n, sum_mse / n, sum_kl / n});
        last_stable.clear();
        collect_state(*model, last_stable);
        log_info("vae[", to_string(config.target), "] epoch ", epoch, "/", config.epochs, " loss=", sum_loss / n,
                 " mse=", sum_mse / n, " kl=", sum_kl / n);
    }
    model->eval();
    if (options.checkpoint_path) {
        write(*options.checkpoint_path);
    }
    return result;
}

void save_vae(const std::string& path, Vae& model, const nlohmann::json& extra_meta) {
    Checkpoint ckpt;
    ckpt.kind = "vae";
    ckpt.meta = extra_meta;
    ckpt.meta["config"] = model->config();
    collect_state(*model, ckpt.tensors);
    save_checkpoint(path, ckpt);
}

Vae load_vae(const std::string& path, nlohmann::json* meta_out) {
    const auto ckpt = load_checkpoint(path, "vae");
    Vae model(ckpt.meta.at("config").get<VaeConfig>());
    restore_state(*model, ckpt.tensors);
    model->eval();
    if (meta_out) {
        *meta_out = ckpt.meta;
    }
    return model;
}

ReconVariant parse_recon_variant(std::string_view name) {
    if (name == "pixel") return ReconVariant::pixel;
    if (name == "pha") return ReconVariant::pha;
    if (name == "amp") return ReconVariant::amp;
    if (name == "joint") return ReconVariant::joint;
    throw ValidationError("unknown reconstruction variant '" + std::string(name) + "'");
}

std::string to_string(ReconVariant v) {
    switch (v) {
        case ReconVariant::pixel: return "pixel";
        case ReconVariant::pha: return "pha";
        case ReconVariant::amp: return "amp";
        case ReconVariant::joint: return "joint";
    }
    throw ValidationError("invalid reconstruction variant value");
}

void check_variant_models(const VaeSet& models, ReconVariant variant) {
    auto expect = [](const Vae& m, VaeTarget target, ReconVariant v) {
        require(!m.is_empty(), "variant '", to_string(v), "' needs a ", to_string(target), " VAE");
        require(m->config().target == target, "variant '", to_string(v), "' got a ", to_string(m->config().target),
                " VAE where a ", to_string(target), " VAE is required");
    };
    switch (variant) {
        case ReconVariant::pixel: expect(models.pixel, VaeTarget::pixel, variant); break;
        case ReconVariant::pha: expect(models.phase, VaeTarget::phase, variant); break;
        case ReconVariant::amp: expect(models.amplitude, VaeTarget::amplitude, variant); break;
        case ReconVariant::joint:
            expect(models.amplitude, VaeTarget::amplitude, variant);
            expect(models.phase, VaeTarget::phase, variant);
            break;
    }
}

ImageBatch reconstruct(const VaeSet& models, const ImageBatch& images, ReconVariant variant, int64_t batch_size) {
    check_variant_models(models, variant);
    check_image_batch(images, "reconstruct");
    torch::NoGradGuard no_grad;

    auto decode_mean = [](Vae m, const ImageBatch& x) { return m->decode(m->encode(x).first); };
    const RecomposeOptions options{.clamp = false, .expect_real = false};

    std::vector<torch::Tensor> chunks;
    for (int64_t start = 0; start < images.size(0); start += batch_size) {
        const auto x = images.slice(0, start, std::min(images.size(0), start + batch_size));
        if (variant == ReconVariant::pixel) {
            chunks.push_back(decode_mean(models.pixel, x));
            continue;
        }
        const auto original = dft_decompose(x);
        SpectrumPair rebuilt = original;
        if (variant == ReconVariant::amp || variant == ReconVariant::joint) {
            rebuilt.amplitude = decode_mean(models.amplitude, x);
        }
        if (variant == ReconVariant::pha || variant == ReconVariant::joint) {
            rebuilt.phase = decode_mean(models.phase, x);
        }
        const auto recomposition = variant == ReconVariant::pha   ? Recomposition::pha
                                   : variant == ReconVariant::amp ? Recomposition::amp
                                                                  : Recomposition::joint;
        chunks.push_back(recompose_variant(original, rebuilt, recomposition, options));
    }
    if (chunks.empty()) {
        return images.clone();
    }
    return torch::cat(chunks);
}

}  // namespace recdet
