#include "recdet/features.hpp"

#include <algorithm>

#include "recdet/checkpoint.hpp"

namespace recdet {

ExtractorRole parse_extractor_role(std::string_view name) {
    if (name == "VICTIM" || name == "victim" || name == "base") return ExtractorRole::victim;
    if (name == "PRETRAINED" || name == "pretrained" || name == "online") return ExtractorRole::pretrained;
    throw ValidationError("unknown extractor role '" + std::string(name) + "'");
}

std::string to_string(ExtractorRole r) { return r == ExtractorRole::victim ? "VICTIM" : "PRETRAINED"; }

Pooling parse_pooling(std::string_view name) {
    if (name == "avg") return Pooling::avg;
    if (name == "max") return Pooling::max;
    throw ValidationError("unknown pooling '" + std::string(name) + "'");
}

std::string to_string(Pooling p) { return p == Pooling::avg ? "avg" : "max"; }

void to_json(nlohmann::json& j, const ExtractorSpec& s) {
    j = {{"model_ref", s.model_ref},
         {"role", to_string(s.role)},
         {"layer_ids", s.layer_ids},
         {"pooling", to_string(s.pooling)}};
}

void from_json(const nlohmann::json& j, ExtractorSpec& s) {
    s.model_ref = j.value("model_ref", std::string{});
    s.role = parse_extractor_role(j.value("role", std::string("VICTIM")));
    s.layer_ids = j.value("layer_ids", std::vector<std::string>{});
    s.pooling = parse_pooling(j.value("pooling", std::string("avg")));
}

FeatureExtractor::FeatureExtractor(Classifier model, ExtractorSpec spec)
    : model_(std::move(model)), spec_(std::move(spec)) {
    require(!model_.is_empty(), "feature extractor needs a model");
    require(!spec_.layer_ids.empty(), "extractor spec needs at least one layer id");
    const auto known = tap_names(model_->config().architecture);
    for (const auto& id : spec_.layer_ids) {
        require(std::find(known.begin(), known.end(), id) != known.end(), "layer id '", id,
                "' does not exist in ", to_string(model_->config().architecture));
    }
    model_->eval();

    // Probe once to fix the per-layer widths; they depend only on the model and taps.
    torch::NoGradGuard no_grad;
    const auto probe = torch::zeros({1, model_->config().in_channels, 32, 32});
    const auto taps = model_->forward_taps(probe, spec_.layer_ids);
    for (const auto& id : spec_.layer_ids) {
        layer_dims_.push_back(taps.at(id).size(1));
        feature_dim_ += layer_dims_.back();
    }

    std::string identity = spec_.model_ref + "|" + to_string(spec_.pooling);
    for (const auto& id : spec_.layer_ids) identity += "|" + id;
    for (const auto& p : model_->named_parameters(true)) {
        const auto t = p.value().detach().contiguous();
        identity += "|" + p.key() + ":";
        identity.append(static_cast<const char*>(t.data_ptr()), t.numel() * t.element_size());
    }
    fingerprint_ = sha256_hex(identity).substr(0, 16);
}

torch::Tensor FeatureExtractor::pool(const torch::Tensor& activation) const {
    if (activation.dim() == 2) {
        return activation;
    }
    return spec_.pooling == Pooling::avg ? activation.mean({2, 3}) : activation.amax({2, 3});
}

torch::Tensor FeatureExtractor::extract_activation(const ImageBatch& images, const std::string& layer_id,
                                                   int64_t batch_size) const {
    check_image_batch(images, "extract_activation");
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> chunks;
    for (int64_t s = 0; s < images.size(0); s += batch_size) {
        const auto x = images.slice(0, s, std::min(images.size(0), s + batch_size));
        chunks.push_back(model_->forward_taps(x, {layer_id}).at(layer_id));
    }
    require(!chunks.empty(), "extract_activation: empty batch");
    return torch::cat(chunks);
}

torch::Tensor FeatureExtractor::flat_activation(const ImageBatch& images, const std::string& layer_id,
                                                int64_t batch_size) const {
    return extract_activation(images, layer_id, batch_size).flatten(1);
}

torch::Tensor FeatureExtractor::pooled_features(const ImageBatch& images, int64_t batch_size) const {
    check_image_batch(images, "pooled_features");
    torch::NoGradGuard no_grad;
    std::vector<torch::Tensor> chunks;
    for (int64_t s = 0; s < images.size(0); s += batch_size) {
        const auto x = images.slice(0, s, std::min(images.size(0), s + batch_size));
        const auto taps = model_->forward_taps(x, spec_.layer_ids);
        std::vector<torch::Tensor> parts;
        for (const auto& id : spec_.layer_ids) parts.push_back(pool(taps.at(id)));
        chunks.push_back(torch::cat(parts, 1));
    }
    if (chunks.empty()) {
        return torch::empty({0, feature_dim_});
    }
    return torch::cat(chunks);
}

ReconErrorFeature reconstruction_error(const FeatureExtractor& extractor, const ImageBatch& originals,
                                       const ImageBatch& reconstructions, int64_t batch_size) {
    check_image_batch(originals, "reconstruction_error originals");
    check_image_batch(reconstructions, "reconstruction_error reconstructions");
    check_same_shape(originals, reconstructions, "reconstruction_error");
    torch::NoGradGuard no_grad;

    const auto& layers = extractor.spec().layer_ids;
    std::vector<torch::Tensor> chunks;
    for (int64_t s = 0; s < originals.size(0); s += batch_size) {
        const auto e = std::min(originals.size(0), s + batch_size);
        const auto a = extractor.model()->forward_taps(originals.slice(0, s, e), layers);
        const auto b = extractor.model()->forward_taps(reconstructions.slice(0, s, e), layers);
        std::vector<torch::Tensor> parts;
        for (const auto& id : layers) {
            const auto diff = (b.at(id) - a.at(id)).abs();
            parts.push_back(diff.dim() == 2 ? diff
                            : extractor.spec().pooling == Pooling::avg ? diff.mean({2, 3})
                                                                       : diff.amax({2, 3}));
        }
        chunks.push_back(torch::cat(parts, 1));
    }
    ReconErrorFeature out;
    out.layer_ids = layers;
    out.vector = chunks.empty() ? torch::empty({0, extractor.feature_dim()}) : torch::cat(chunks);
    return out;
}

void save_feature_dump(const std::string& path, const FeatureDump& dump) {
    require(dump.features.dim() == 2 && dump.labels.dim() == 1 && dump.features.size(0) == dump.labels.size(0),
            "feature dump: features must be [N, D] with [N] labels");
    Checkpoint ckpt;
    ckpt.kind = "feature_dump";
    ckpt.meta = dump.meta;
    ckpt.meta["layer_ids"] = dump.layer_ids;
    ckpt.meta["extractor_fingerprint"] = dump.extractor_fingerprint;
    ckpt.tensors["features"] = dump.features.to(torch::kFloat);
    ckpt.tensors["labels"] = dump.labels.to(torch::kLong);
    save_checkpoint(path, ckpt);
}

FeatureDump load_feature_dump(const std::string& path) {
    auto ckpt = load_checkpoint(path, "feature_dump");
    FeatureDump dump;
    dump.features = ckpt.tensors.at("features");
    dump.labels = ckpt.tensors.at("labels");
    dump.layer_ids = ckpt.meta.at("layer_ids").get<std::vector<std::string>>();
    dump.extractor_fingerprint = ckpt.meta.at("extractor_fingerprint").get<std::string>();
    dump.meta = ckpt.meta;
    return dump;
}

}  // namespace recdet
