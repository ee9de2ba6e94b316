#include "recdet/models.hpp"

#include <algorithm>

namespace recdet {

namespace nn = torch::nn;

namespace {

nn::Conv2d conv3x3(int in, int out, int stride = 1) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false));
}

int scaled(int width, int base, int multiplier) { return std::max(1, width * multiplier / base); }

// --------------------------------------------------------------------------- VGG16

class VggImpl : public BackboneImpl {
public:
    VggImpl(const ClassifierConfig& c) {
        // Channel multipliers of the standard 13-conv configuration, -1 marks a pool.
        const int plan[] = {1, 1, -1, 2, 2, -1, 4, 4, 4, -1, 8, 8, 8, -1, 8, 8, 8, -1};
        int in = c.in_channels;
        int block = 1;
        nn::Sequential current;
        for (int m : plan) {
            if (m < 0) {
                current->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(2)));
                blocks_.push_back(register_module("block" + std::to_string(block++), current));
                current = nn::Sequential();
                continue;
            }
            const int out = scaled(c.width, 64, 64 * m);
            current->push_back(conv3x3(in, out));
            current->push_back(nn::BatchNorm2d(out));
            current->push_back(nn::ReLU());
            in = out;
        }
        head_ = register_module("head", nn::Linear(in, c.num_classes));
    }

    torch::Tensor run(const torch::Tensor& x, const TapSink& sink) override {
        auto h = x;
        for (size_t i = 0; i < blocks_.size(); ++i) {
            h = blocks_[i]->forward(h);
            sink("block" + std::to_string(i + 1), h);
        }
        // Five pools bring 32x32 to 1x1; average whatever remains for other sizes.
        h = torch::adaptive_avg_pool2d(h, {1, 1}).flatten(1);
        sink("penultimate", h);
        auto logits = head_->forward(h);
        sink("logits", logits);
        return logits;
    }

private:
    std::vector<nn::Sequential> blocks_;
    nn::Linear head_{nullptr};
};

// ------------------------------------------------------------------------ ResNet18

class BasicBlockImpl : public nn::Module {
public:
    BasicBlockImpl(int in, int out, int stride) {
        conv1_ = register_module("conv1", conv3x3(in, out, stride));
        bn1_ = register_module("bn1", nn::BatchNorm2d(out));
        conv2_ = register_module("conv2", conv3x3(out, out));
        bn2_ = register_module("bn2", nn::BatchNorm2d(out));
        if (stride != 1 || in != out) {
            shortcut_ = register_module(
                "shortcut", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
                                           nn::BatchNorm2d(out)));
        }
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto h = torch::relu(bn1_->forward(conv1_->forward(x)));
        h = bn2_->forward(conv2_->forward(h));
        return torch::relu(h + (shortcut_ ? shortcut_->forward(x) : x));
    }

private:
    nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
    nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(BasicBlock);

class ResNetImpl : public BackboneImpl {
public:
    ResNetImpl(const ClassifierConfig& c) {
        stem_ = register_module("stem", nn::Sequential(conv3x3(c.in_channels, c.width), nn::BatchNorm2d(c.width),
                                                       nn::ReLU()));
        int in = c.width;
        for (int s = 0; s < 4; ++s) {
            const int out = c.width << s;
            nn::Sequential stage(BasicBlock(in, out, s == 0 ? 1 : 2), BasicBlock(out, out, 1));
            stages_.push_back(register_module("stage" + std::to_string(s + 1), stage));
            in = out;
        }
        head_ = register_module("head", nn::Linear(in, c.num_classes));
    }

    torch::Tensor run(const torch::Tensor& x, const TapSink& sink) override {
        auto h = stem_->forward(x);
        sink("stem", h);
        for (size_t s = 0; s < stages_.size(); ++s) {
            h = stages_[s]->forward(h);
            sink("stage" + std::to_string(s + 1), h);
        }
        h = torch::adaptive_avg_pool2d(h, {1, 1}).flatten(1);
        sink("penultimate", h);
        auto logits = head_->forward(h);
        sink("logits", logits);
        return logits;
    }

private:
    nn::Sequential stem_{nullptr};
    std::vector<nn::Sequential> stages_;
    nn::Linear head_{nullptr};
};

// -------------------------------------------------------------------------- WRN-28

class WideBlockImpl : public nn::Module {
public:
    WideBlockImpl(int in, int out, int stride) {
        bn1_ = register_module("bn1", nn::BatchNorm2d(in));
        conv1_ = register_module("conv1", conv3x3(in, out, stride));
        bn2_ = register_module("bn2", nn::BatchNorm2d(out));
        conv2_ = register_module("conv2", conv3x3(out, out));
        if (stride != 1 || in != out) {
            shortcut_ = register_module("shortcut",
                                        nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
        }
    }

    torch::Tensor forward(const torch::Tensor& x) {
        const auto pre = torch::relu(bn1_->forward(x));
        auto h = conv1_->forward(pre);
        h = conv2_->forward(torch::relu(bn2_->forward(h)));
        return h + (shortcut_ ? shortcut_->forward(pre) : x);
    }

private:
    nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
    nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, shortcut_{nullptr};
};
TORCH_MODULE(WideBlock);

class WideResNetImpl : public BackboneImpl {
public:
    static constexpr int kBlocksPerStage = 4;  // (28 - 4) / 6

    WideResNetImpl(const ClassifierConfig& c) {
        const int stem_width = std::min(16, c.width);
        stem_ = register_module("stem", conv3x3(c.in_channels, stem_width));
        int in = stem_width;
        for (int s = 0; s < 3; ++s) {
            const int out = c.width << s;
            nn::Sequential stage;
            for (int b = 0; b < kBlocksPerStage; ++b) {
                stage->push_back(WideBlock(b == 0 ? in : out, out, (b == 0 && s > 0) ? 2 : 1));
            }
            stages_.push_back(register_module("stage" + std::to_string(s + 1), stage));
            in = out;
        }
        final_bn_ = register_module("final_bn", nn::BatchNorm2d(in));
        head_ = register_module("head", nn::Linear(in, c.num_classes));
    }

    torch::Tensor run(const torch::Tensor& x, const TapSink& sink) override {
        auto h = stem_->forward(x);
        sink("stem", h);
        for (size_t s = 0; s < stages_.size(); ++s) {
            h = stages_[s]->forward(h);
            if (s + 1 == stages_.size()) {
                h = torch::relu(final_bn_->forward(h));
            }
            sink("stage" + std::to_string(s + 1), h);
        }
        h = torch::adaptive_avg_pool2d(h, {1, 1}).flatten(1);
        sink("penultimate", h);
        auto logits = head_->forward(h);
        sink("logits", logits);
        return logits;
    }

private:
    nn::Conv2d stem_{nullptr};
    std::vector<nn::Sequential> stages_;
    nn::BatchNorm2d final_bn_{nullptr};
    nn::Linear head_{nullptr};
};

// ------------------------------------------------------------------------- toy CNN

// Small batch-norm-free network for tests and oracles.
class ToyCnnImpl : public BackboneImpl {
public:
    ToyCnnImpl(const ClassifierConfig& c) {
        conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(c.in_channels, c.width, 3).padding(1)));
        conv2_ = register_module("conv2",
                                 nn::Conv2d(nn::Conv2dOptions(c.width, 2 * c.width, 3).stride(2).padding(1)));
        head_ = register_module("head", nn::Linear(2 * c.width, c.num_classes));
    }

    torch::Tensor run(const torch::Tensor& x, const TapSink& sink) override {
        auto h = torch::relu(conv1_->forward(x));
        sink("conv1", h);
        h = torch::relu(conv2_->forward(h));
        sink("conv2", h);
        h = torch::adaptive_avg_pool2d(h, {1, 1}).flatten(1);
        sink("penultimate", h);
        auto logits = head_->forward(h);
        sink("logits", logits);
        return logits;
    }

private:
    nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
    nn::Linear head_{nullptr};
};

}  // namespace

Architecture parse_architecture(std::string_view name) {
    if (name == "VGG16" || name == "vgg16") return Architecture::vgg16;
    if (name == "RESNET18" || name == "resnet18" || name == "ResNet18") return Architecture::resnet18;
    if (name == "WRN28" || name == "wrn28") return Architecture::wrn28;
    if (name == "TOY_CNN" || name == "toy_cnn") return Architecture::toy_cnn;
    throw ValidationError("unknown architecture '" + std::string(name) + "'");
}

std::string to_string(Architecture a) {
    switch (a) {
        case Architecture::vgg16: return "VGG16";
        case Architecture::resnet18: return "RESNET18";
        case Architecture::wrn28: return "WRN28";
        case Architecture::toy_cnn: return "TOY_CNN";
    }
    throw ValidationError("invalid architecture value");
}

void to_json(nlohmann::json& j, const ClassifierConfig& c) {
    j = {{"architecture", to_string(c.architecture)},
         {"num_classes", c.num_classes},
         {"in_channels", c.in_channels},
         {"width", c.width},
         {"mean", c.mean},
         {"std", c.std}};
}

void from_json(const nlohmann::json& j, ClassifierConfig& c) {
    c.architecture = parse_architecture(j.at("architecture").get<std::string>());
    c.num_classes = j.value("num_classes", c.num_classes);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.width = j.value("width", c.width);
    c.mean = j.value("mean", c.mean);
    c.std = j.value("std", c.std);
}

std::vector<std::string> tap_names(Architecture a) {
    switch (a) {
        case Architecture::vgg16:
            return {"block1", "block2", "block3", "block4", "block5", "penultimate", "logits"};
        case Architecture::resnet18:
            return {"stem", "stage1", "stage2", "stage3", "stage4", "penultimate", "logits"};
        case Architecture::wrn28:
            return {"stem", "stage1", "stage2", "stage3", "penultimate", "logits"};
        case Architecture::toy_cnn:
            return {"conv1", "conv2", "penultimate", "logits"};
    }
    return {};
}

std::vector<std::string> default_taps(Architecture a) {
    switch (a) {
        case Architecture::vgg16: return {"block3", "block4", "block5", "penultimate"};
        case Architecture::resnet18: return {"stage2", "stage3", "stage4", "penultimate"};
        case Architecture::wrn28: return {"stage1", "stage2", "stage3", "penultimate"};
        case Architecture::toy_cnn: return {"conv1", "conv2", "penultimate"};
    }
    return {};
}

std::vector<std::string> stage_taps(Architecture a) {
    switch (a) {
        case Architecture::vgg16: return {"block1", "block2", "block3", "block4", "block5"};
        case Architecture::resnet18: return {"stage1", "stage2", "stage3", "stage4"};
        case Architecture::wrn28: return {"stage1", "stage2", "stage3"};
        case Architecture::toy_cnn: return {"conv1", "conv2"};
    }
    return {};
}

ClassifierImpl::ClassifierImpl(ClassifierConfig config) : config_(std::move(config)) {
    require(config_.num_classes >= 2, "classifier needs at least two classes");
    require(config_.width >= 1, "classifier width must be positive");
    require(static_cast<int>(config_.mean.size()) == config_.in_channels &&
                static_cast<int>(config_.std.size()) == config_.in_channels,
            "normalization statistics must have one entry per input channel");
    mean_ = register_buffer("norm_mean", torch::tensor(config_.mean).view({1, -1, 1, 1}));
    std_ = register_buffer("norm_std", torch::tensor(config_.std).view({1, -1, 1, 1}));
    switch (config_.architecture) {
        case Architecture::vgg16: backbone_ = std::make_shared<VggImpl>(config_); break;
        case Architecture::resnet18: backbone_ = std::make_shared<ResNetImpl>(config_); break;
        case Architecture::wrn28: backbone_ = std::make_shared<WideResNetImpl>(config_); break;
        case Architecture::toy_cnn: backbone_ = std::make_shared<ToyCnnImpl>(config_); break;
    }
    register_module("backbone", backbone_);
}

torch::Tensor ClassifierImpl::normalize(const torch::Tensor& images) const {
    return (images - mean_) / std_;
}

torch::Tensor ClassifierImpl::forward(const torch::Tensor& images) {
    return backbone_->run(normalize(images), [](const std::string&, const torch::Tensor&) {});
}

std::map<std::string, torch::Tensor> ClassifierImpl::forward_taps(const torch::Tensor& images,
                                                                  const std::vector<std::string>& taps) {
    const auto known = tap_names(config_.architecture);
    for (const auto& t : taps) {
        require(std::find(known.begin(), known.end(), t) != known.end(), "unknown tap '", t, "' for ",
                to_string(config_.architecture));
    }
    std::map<std::string, torch::Tensor> out;
    backbone_->run(normalize(images), [&](const std::string& name, const torch::Tensor& value) {
        if (std::find(taps.begin(), taps.end(), name) != taps.end()) {
            out.emplace(name, value);
        }
    });
    return out;
}

torch::Tensor predict_logits(Classifier& model, const ImageBatch& images, int64_t batch_size) {
    torch::NoGradGuard no_grad;
    const bool was_training = model->is_training();
    model->eval();
    std::vector<torch::Tensor> chunks;
    for (int64_t start = 0; start < images.size(0); start += batch_size) {
        chunks.push_back(model->forward(images.slice(0, start, std::min(images.size(0), start + batch_size))));
    }
    model->train(was_training);
    if (chunks.empty()) {
        return torch::empty({0, model->config().num_classes});
    }
    return torch::cat(chunks);
}

torch::Tensor predict(Classifier& model, const ImageBatch& images, int64_t batch_size) {
    return predict_logits(model, images, batch_size).argmax(1);
}

double accuracy(Classifier& model, const ImageBatch& images, const torch::Tensor& labels) {
    if (images.size(0) == 0) {
        return 0.0;
    }
    return predict(model, images).eq(labels).to(torch::kDouble).mean().item<double>();
}

}  // namespace recdet
