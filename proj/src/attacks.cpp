#include "recdet/attacks.hpp"

#include <cmath>
#include <iomanip>
#include <limits>

#include "recdet/checkpoint.hpp"

namespace recdet {

AttackFamily parse_attack_family(std::string_view name) {
    if (name == "FGSM" || name == "fgsm") return AttackFamily::fgsm;
    if (name == "BIM" || name == "bim") return AttackFamily::bim;
    if (name == "PGD_LINF" || name == "pgd_linf" || name == "PGD") return AttackFamily::pgd_linf;
    if (name == "PGD_L2" || name == "pgd_l2") return AttackFamily::pgd_l2;
    if (name == "DEEPFOOL" || name == "deepfool" || name == "DeepFool") return AttackFamily::deepfool;
    if (name == "CW" || name == "cw") return AttackFamily::cw;
    throw ValidationError("unknown attack family '" + std::string(name) + "'");
}

std::string to_string(AttackFamily f) {
    switch (f) {
        case AttackFamily::fgsm: return "FGSM";
        case AttackFamily::bim: return "BIM";
        case AttackFamily::pgd_linf: return "PGD_LINF";
        case AttackFamily::pgd_l2: return "PGD_L2";
        case AttackFamily::deepfool: return "DEEPFOOL";
        case AttackFamily::cw: return "CW";
    }
    throw ValidationError("invalid attack family value");
}

AttackSpec AttackSpec::defaults(AttackFamily family, double epsilon) {
    AttackSpec s;
    s.family = family;
    s.epsilon = epsilon;
    switch (family) {
        case AttackFamily::fgsm:
            s.steps = 1;
            s.step_size = epsilon;
            s.random_start = false;
            break;
        case AttackFamily::bim:
            s.steps = 20;
            s.step_size = epsilon / 10.0;
            s.random_start = false;
            break;
        case AttackFamily::pgd_linf:
        case AttackFamily::pgd_l2:
            s.steps = 20;
            s.step_size = epsilon / 10.0;
            s.random_start = true;
            break;
        case AttackFamily::deepfool:
            s.steps = 50;
            s.step_size = 0.0;
            s.random_start = false;
            break;
        case AttackFamily::cw:
            s.steps = 100;
            s.step_size = 0.0;
            s.random_start = false;
            break;
    }
    return s;
}

bool AttackSpec::is_linf() const {
    return family == AttackFamily::fgsm || family == AttackFamily::bim || family == AttackFamily::pgd_linf;
}

std::string AttackSpec::id() const {
    std::ostringstream os;
    os << to_string(family);
    if (family == AttackFamily::pgd_l2) {
        os << "-" << std::fixed << std::setprecision(3) << epsilon;
    } else if (is_linf()) {
        os << "-" << std::lround(epsilon * 255.0) << "of255";
    }
    return os.str();
}

void AttackSpec::validate() const {
    // epsilon == 0 is accepted as the degenerate no-signal control.
    require(epsilon >= 0.0 && std::isfinite(epsilon), "attack epsilon must be finite and >= 0");
    require(steps >= 1, "attack steps must be >= 1");
    require(family != AttackFamily::fgsm || steps == 1, "FGSM is single-step");
    require(!targeted, "only non-targeted attacks are supported");
    require(deepfool_candidates >= 2, "DeepFool needs at least two candidate classes");
    require(cw_binary_search_steps >= 1, "C&W needs at least one binary search step");
}

void to_json(nlohmann::json& j, const AttackSpec& s) {
    j = {{"family", to_string(s.family)},
         {"epsilon", s.epsilon},
         {"steps", s.steps},
         {"step_size", s.step_size},
         {"targeted", s.targeted},
         {"random_start", s.random_start},
         {"overshoot", s.overshoot},
         {"deepfool_candidates", s.deepfool_candidates},
         {"cw_confidence", s.cw_confidence},
         {"cw_learning_rate", s.cw_learning_rate},
         {"cw_initial_const", s.cw_initial_const},
         {"cw_binary_search_steps", s.cw_binary_search_steps}};
}

void from_json(const nlohmann::json& j, AttackSpec& s) {
    const auto family = parse_attack_family(j.at("family").get<std::string>());
    const double eps = j.value("epsilon", family == AttackFamily::pgd_l2 ? 0.5 : 8.0 / 255.0);
    s = AttackSpec::defaults(family, eps);
    s.steps = j.value("steps", s.steps);
    s.step_size = j.value("step_size", s.step_size);
    s.targeted = j.value("targeted", s.targeted);
    s.random_start = j.value("random_start", s.random_start);
    s.overshoot = j.value("overshoot", s.overshoot);
    s.deepfool_candidates = j.value("deepfool_candidates", s.deepfool_candidates);
    s.cw_confidence = j.value("cw_confidence", s.cw_confidence);
    s.cw_learning_rate = j.value("cw_learning_rate", s.cw_learning_rate);
    s.cw_initial_const = j.value("cw_initial_const", s.cw_initial_const);
    s.cw_binary_search_steps = j.value("cw_binary_search_steps", s.cw_binary_search_steps);
}

TrainingStrategy parse_strategy(std::string_view name) {
    if (name == "NT" || name == "nt") return TrainingStrategy::nt;
    if (name == "AT" || name == "at") return TrainingStrategy::at;
    throw ValidationError("unknown training strategy '" + std::string(name) + "'");
}

std::string to_string(TrainingStrategy s) { return s == TrainingStrategy::nt ? "NT" : "AT"; }

ThreatMode parse_threat_mode(std::string_view name) {
    if (name == "SINGLE" || name == "single" || name == "SM") return ThreatMode::single;
    if (name == "ENSEMBLE" || name == "ensemble" || name == "EM") return ThreatMode::ensemble;
    throw ValidationError("unknown threat mode '" + std::string(name) + "'");
}

std::string to_string(ThreatMode m) { return m == ThreatMode::single ? "SINGLE" : "ENSEMBLE"; }

void ThreatModelSpec::validate() const {
    if (mode == ThreatMode::single) {
        require(architectures.size() == 1, "single-model threat needs exactly one architecture, got ",
                architectures.size());
    } else {
        require(architectures.size() >= 2, "ensemble threat needs at least two architectures, got ",
                architectures.size());
    }
}

std::string ThreatModelSpec::setting() const {
    return std::string(mode == ThreatMode::single ? "SM-" : "EM-") + to_string(strategy);
}

std::string ThreatModelSpec::id() const {
    std::string out = setting() + "[";
    for (size_t i = 0; i < architectures.size(); ++i) {
        out += (i ? "&" : "") + to_string(architectures[i]);
    }
    return out + "]";
}

void to_json(nlohmann::json& j, const ThreatModelSpec& s) {
    std::vector<std::string> archs;
    for (auto a : s.architectures) archs.push_back(to_string(a));
    j = {{"architectures", archs}, {"strategy", to_string(s.strategy)}, {"mode", to_string(s.mode)}};
}

void from_json(const nlohmann::json& j, ThreatModelSpec& s) {
    s.architectures.clear();
    for (const auto& a : j.at("architectures")) s.architectures.push_back(parse_architecture(a.get<std::string>()));
    s.strategy = parse_strategy(j.at("strategy").get<std::string>());
    s.mode = parse_threat_mode(j.value("mode", s.architectures.size() > 1 ? "ENSEMBLE" : "SINGLE"));
    s.validate();
}

// ------------------------------------------------------------------------ ensemble

ModelEnsemble::ModelEnsemble(std::vector<Classifier> members) : members_(std::move(members)) {
    require(!members_.empty(), "model ensemble needs at least one member");
    const auto classes = members_.front()->config().num_classes;
    for (auto& m : members_) {
        require(m->config().num_classes == classes, "ensemble members disagree on the number of classes");
        m->eval();
    }
}

torch::Tensor ModelEnsemble::logits(const torch::Tensor& images) const {
    require(!members_.empty(), "empty model ensemble");
    if (members_.size() == 1) {
        auto only = members_.front();
        return only->forward(images);
    }
    std::vector<torch::Tensor> outs;
    for (auto m : members_) {
        outs.push_back(m->forward(images));
    }
    return torch::stack(outs).mean(0);
}

double fooling_rate(const ModelEnsemble& model, const ImageBatch& images, const torch::Tensor& labels) {
    torch::NoGradGuard no_grad;
    int64_t fooled = 0;
    for (int64_t s = 0; s < images.size(0); s += 500) {
        const auto e = std::min(images.size(0), s + 500);
        fooled += model.logits(images.slice(0, s, e)).argmax(1).ne(labels.slice(0, s, e)).sum().item<int64_t>();
    }
    return images.size(0) ? static_cast<double>(fooled) / static_cast<double>(images.size(0)) : 0.0;
}

// ------------------------------------------------------------------------- attacks

namespace {

torch::Tensor input_gradient(const ModelEnsemble& model, const torch::Tensor& x, const torch::Tensor& labels) {
    auto input = x.detach().requires_grad_(true);
    const auto loss = torch::nn::functional::cross_entropy(
        model.logits(input), labels, torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kSum));
    return torch::autograd::grad({loss}, {input})[0];
}

torch::Tensor per_sample_l2(const torch::Tensor& t) {
    return t.flatten(1).norm(2, 1).view({-1, 1, 1, 1});
}

torch::Tensor linf_iterative(const AttackSpec& spec, const ModelEnsemble& model, const torch::Tensor& x,
                             const torch::Tensor& labels, torch::Generator& gen, bool random_start) {
    const double eps = spec.epsilon;
    auto delta = torch::zeros_like(x);
    if (random_start) {
        delta = (torch::rand(x.sizes(), gen, x.options()) * 2.0 - 1.0) * eps;
        delta = (x + delta).clamp(0.0, 1.0) - x;
    }
    for (int step = 0; step < spec.steps; ++step) {
        const auto grad = input_gradient(model, x + delta, labels);
        delta = (delta + spec.step_size * grad.sign()).clamp(-eps, eps);
        delta = (x + delta).clamp(0.0, 1.0) - x;
    }
    return (x + delta).clamp(0.0, 1.0);
}

torch::Tensor pgd_l2(const AttackSpec& spec, const ModelEnsemble& model, const torch::Tensor& x,
                     const torch::Tensor& labels, torch::Generator& gen) {
    const double eps = spec.epsilon;
    auto project = [eps](const torch::Tensor& d) {
        const auto norm = per_sample_l2(d);
        return d * torch::clamp_max(eps / (norm + 1e-12), 1.0);
    };
    auto delta = torch::zeros_like(x);
    if (spec.random_start) {
        auto direction = torch::randn(x.sizes(), gen, x.options());
        direction = direction / (per_sample_l2(direction) + 1e-12);
        const auto radius = torch::rand({x.size(0), 1, 1, 1}, gen, x.options()) * eps;
        delta = (x + direction * radius).clamp(0.0, 1.0) - x;
    }
    for (int step = 0; step < spec.steps; ++step) {
        const auto grad = input_gradient(model, x + delta, labels);
        const auto unit = grad / (per_sample_l2(grad) + 1e-12);
        delta = project(delta + spec.step_size * unit);
        delta = (x + delta).clamp(0.0, 1.0) - x;
    }
    return (x + delta).clamp(0.0, 1.0);
}

// Multi-class DeepFool restricted to the top-k classes of the clean logits.
torch::Tensor deepfool(const AttackSpec& spec, const ModelEnsemble& model, const torch::Tensor& x,
                       const torch::Tensor& labels, int64_t& fallbacks) {
    const int64_t n = x.size(0);
    torch::Tensor candidates;
    {
        torch::NoGradGuard no_grad;
        const auto logits = model.logits(x);
        const int64_t k = std::min<int64_t>(spec.deepfool_candidates, logits.size(1));
        // Rank by logit but force the true label into slot 0.
        auto masked = logits.scatter(1, labels.view({-1, 1}), std::numeric_limits<float>::infinity());
        candidates = std::get<1>(masked.topk(k, 1));
    }
    const int64_t k = candidates.size(1);
    auto total = torch::zeros_like(x);
    auto active = torch::ones({n}, torch::kBool);
    auto dead = torch::zeros({n}, torch::kBool);
    auto x_adv = x.clone();

    for (int iter = 0; iter < spec.steps; ++iter) {
        auto input = x_adv.detach().requires_grad_(true);
        const auto logits = model.logits(input);
        const auto picked = logits.gather(1, candidates);  // [n, k]
        {
            torch::NoGradGuard no_grad;
            active = active & logits.argmax(1).eq(labels);
        }
        if (!active.any().item<bool>()) {
            break;
        }
        std::vector<torch::Tensor> grads;
        for (int64_t j = 0; j < k; ++j) {
            grads.push_back(torch::autograd::grad({picked.select(1, j).sum()}, {input}, {}, /*retain_graph=*/true)[0]);
        }
        torch::NoGradGuard no_grad;
        const auto g = torch::stack(grads, 1);                    // [n, k, C, H, W]
        const auto w = g.slice(1, 1) - g.select(1, 0).unsqueeze(1);  // [n, k-1, C, H, W]
        const auto f = (picked.slice(1, 1) - picked.select(1, 0).unsqueeze(1)).detach();  // [n, k-1]
        const auto w_norm = w.flatten(2).norm(2, 2);               // [n, k-1]
        const auto ratio = f.abs() / (w_norm + 1e-12);
        const auto best = ratio.argmin(1);
        const auto best_norm = w_norm.gather(1, best.view({-1, 1})).squeeze(1);
        const auto best_ratio = ratio.gather(1, best.view({-1, 1})).squeeze(1);
        const auto best_w = w.index({torch::arange(n), best});
        const auto stuck = active & (best_norm <= 1e-12);
        dead = dead | stuck;
        active = active & ~stuck;
        const auto r = (best_ratio + 1e-4).view({-1, 1, 1, 1}) * best_w / (best_norm.view({-1, 1, 1, 1}) + 1e-12);
        total = total + r * active.view({-1, 1, 1, 1}).to(r.scalar_type());
        x_adv = (x + (1.0 + spec.overshoot) * total).clamp(0.0, 1.0);
    }
    fallbacks += dead.sum().item<int64_t>();
    return torch::where(dead.view({-1, 1, 1, 1}), x, x_adv).detach();
}

// Carlini-Wagner l2 in tanh space with Adam, keeping the smallest successful perturbation.
torch::Tensor carlini_wagner(const AttackSpec& spec, const ModelEnsemble& model, const torch::Tensor& x,
                             const torch::Tensor& labels, int64_t& fallbacks) {
    const int64_t n = x.size(0);
    const auto to_tanh = torch::atanh((x * 2.0 - 1.0).clamp(-1.0 + 1e-6, 1.0 - 1e-6));
    auto best_l2 = torch::full({n}, std::numeric_limits<float>::infinity(), x.options());
    auto best = x.clone();
    auto lower = torch::zeros({n}, torch::kDouble);
    auto upper = torch::full({n}, 1e10, torch::kDouble);
    auto constant = torch::full({n}, spec.cw_initial_const, torch::kDouble);
    const auto onehot = torch::one_hot(labels, -1).to(x.scalar_type());

    for (int search = 0; search < spec.cw_binary_search_steps; ++search) {
        auto w = to_tanh.clone().requires_grad_(true);
        torch::optim::Adam optimizer({w}, torch::optim::AdamOptions(spec.cw_learning_rate));
        auto succeeded = torch::zeros({n}, torch::kBool);
        const auto c = constant.to(x.scalar_type());
        for (int it = 0; it < spec.steps; ++it) {
            const auto candidate = (torch::tanh(w) + 1.0) * 0.5;
            const auto logits = model.logits(candidate);
            const auto real = (logits * onehot).sum(1);
            const auto other = std::get<0>((logits - onehot * 1e4).max(1));
            const auto margin = torch::clamp_min(real - other, -spec.cw_confidence);
            const auto l2 = (candidate - x).flatten(1).pow(2).sum(1);
            const auto loss = (l2 + c * margin).sum();
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();

            torch::NoGradGuard no_grad;
            const auto fooled = (real - other) < -spec.cw_confidence;
            const auto improve = fooled & (l2 < best_l2);
            best_l2 = torch::where(improve, l2, best_l2);
            best = torch::where(improve.view({-1, 1, 1, 1}), candidate.detach(), best);
            succeeded = succeeded | fooled;
        }
        // Standard binary search on the trade-off constant.
        const auto ok = succeeded;
        upper = torch::where(ok, torch::minimum(upper, constant), upper);
        lower = torch::where(ok, lower, torch::maximum(lower, constant));
        constant = torch::where(upper < 1e9, (lower + upper) / 2.0, constant * 10.0);
    }
    const auto found = torch::isfinite(best_l2);
    fallbacks += (~found).sum().item<int64_t>();
    return torch::where(found.view({-1, 1, 1, 1}), best, x).detach();
}

}  // namespace

CraftResult craft(const AttackSpec& spec, const ModelEnsemble& model, const ImageBatch& images,
                  const torch::Tensor& labels, std::uint64_t seed, int64_t batch_size) {
    spec.validate();
    check_image_batch(images, "craft");
    require(labels.dim() == 1 && labels.size(0) == images.size(0), "craft: labels must be [N]");
    require(model.size() > 0, "craft: no threat model loaded");

    CraftResult result;
    if (spec.epsilon == 0.0 && spec.family != AttackFamily::deepfool && spec.family != AttackFamily::cw) {
        result.adversarial = images.clone();
        return result;
    }
    std::vector<torch::Tensor> chunks;
    int64_t chunk_index = 0;
    for (int64_t start = 0; start < images.size(0); start += batch_size, ++chunk_index) {
        const auto end = std::min(images.size(0), start + batch_size);
        const auto x = images.slice(0, start, end).detach();
        const auto y = labels.slice(0, start, end).to(torch::kLong);
        auto gen = make_generator(seed * 1000003ULL + static_cast<std::uint64_t>(chunk_index));
        torch::Tensor out;
        switch (spec.family) {
            case AttackFamily::fgsm: {
                const auto grad = input_gradient(model, x, y);
                out = (x + spec.epsilon * grad.sign()).clamp(0.0, 1.0);
                break;
            }
            case AttackFamily::bim: out = linf_iterative(spec, model, x, y, gen, false); break;
            case AttackFamily::pgd_linf: out = linf_iterative(spec, model, x, y, gen, spec.random_start); break;
            case AttackFamily::pgd_l2: out = pgd_l2(spec, model, x, y, gen); break;
            case AttackFamily::deepfool: out = deepfool(spec, model, x, y, result.fallback_count); break;
            case AttackFamily::cw: out = carlini_wagner(spec, model, x, y, result.fallback_count); break;
        }
        if (spec.is_linf()) {
            // Final projection guards against clamp round-off.
            out = torch::min(torch::max(out, x - spec.epsilon), x + spec.epsilon).clamp(0.0, 1.0);
        }
        chunks.push_back(out.detach());
    }
    result.adversarial = chunks.empty() ? images.clone() : torch::cat(chunks);
    if (result.fallback_count > 0) {
        log_info("craft ", spec.id(), ": ", result.fallback_count, " sample(s) fell back to the clean image");
    }
    return result;
}

ImageBatch add_matched_noise(const ImageBatch& clean, const ImageBatch& adversarial, std::uint64_t seed) {
    check_image_batch(clean, "add_matched_noise clean");
    check_same_shape(clean, adversarial, "add_matched_noise");
    auto gen = make_generator(seed);
    const auto magnitude = (adversarial - clean).abs().flatten(1).amax(1).view({-1, 1, 1, 1});
    const auto noise = (torch::rand(clean.sizes(), gen, clean.options()) * 2.0 - 1.0) * magnitude;
    return (clean + noise).clamp(0.0, 1.0);
}

// ---------------------------------------------------------------------- training

void to_json(nlohmann::json& j, const ClassifierTrainConfig& c) {
    j = {{"strategy", to_string(c.strategy)},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"momentum", c.momentum},
         {"weight_decay", c.weight_decay},
         {"augment", c.augment},
         {"seed", c.seed},
         {"adversarial", c.adversarial},
         {"accuracy_floor", c.accuracy_floor}};
}

void from_json(const nlohmann::json& j, ClassifierTrainConfig& c) {
    c.strategy = parse_strategy(j.value("strategy", std::string("NT")));
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.augment = j.value("augment", c.augment);
    c.seed = j.value("seed", c.seed);
    if (j.contains("adversarial")) c.adversarial = j.at("adversarial").get<AttackSpec>();
    c.accuracy_floor = j.value("accuracy_floor", c.accuracy_floor);
}

ImageBatch augment_batch(const ImageBatch& images, torch::Generator& generator) {
    const int64_t n = images.size(0);
    const int64_t h = images.size(2), w = images.size(3);
    const auto padded = torch::nn::functional::pad(
        images, torch::nn::functional::PadFuncOptions({4, 4, 4, 4}).mode(torch::kReflect));
    const auto offsets = torch::randint(0, 9, {n, 2}, generator, torch::kLong);
    const auto flips = torch::rand({n}, generator) < 0.5;
    auto off = offsets.accessor<int64_t, 2>();
    auto flip = flips.accessor<bool, 1>();
    std::vector<torch::Tensor> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        auto crop = padded[i].slice(1, off[i][0], off[i][0] + h).slice(2, off[i][1], off[i][1] + w);
        out.push_back(flip[i] ? crop.flip({2}) : crop);
    }
    return torch::stack(out);
}

namespace {
// Warm up linearly over the first 30% of steps, then cosine-anneal to zero.
double one_cycle_lr(double peak, int64_t step, int64_t total) {
    const double warm = 0.3 * static_cast<double>(total);
    const double t = static_cast<double>(step);
    if (t < warm) {
        return peak * (0.04 + 0.96 * t / warm);
    }
    const double progress = (t - warm) / std::max(1.0, static_cast<double>(total) - warm);
    return peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}
}  // namespace

TrainedClassifier train_classifier(const ClassifierConfig& architecture, const ClassifierTrainConfig& config,
                                   const ImageBatch& train_images, const torch::Tensor& train_labels,
                                   const ImageBatch& test_images, const torch::Tensor& test_labels) {
    check_image_batch(train_images, "train_classifier images");
    require(train_labels.size(0) == train_images.size(0), "train_classifier: label count mismatch");
    require(config.epochs >= 1 && config.batch_size >= 1, "train_classifier: invalid epochs/batch size");

    torch::manual_seed(config.seed);
    auto generator = make_generator(config.seed + 17);
    TrainedClassifier result;
    result.model = Classifier(architecture);
    auto& model = result.model;
    torch::optim::SGD optimizer(model->parameters(), torch::optim::SGDOptions(config.learning_rate)
                                                         .momentum(config.momentum)
                                                         .weight_decay(config.weight_decay));
    const int64_t n = train_images.size(0);
    const int64_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const int64_t total_steps = steps_per_epoch * config.epochs;
    int64_t step = 0;
    const ModelEnsemble self({model});

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto order = torch::randperm(n, generator, torch::kLong);
        double sum = 0.0;
        for (int64_t start = 0; start < n; start += config.batch_size, ++step) {
            const auto idx = order.slice(0, start, std::min(n, start + config.batch_size));
            auto batch = train_images.index_select(0, idx);
            const auto labels = train_labels.index_select(0, idx).to(torch::kLong);
            if (config.augment) {
                batch = augment_batch(batch, generator);
            }
            if (config.strategy == TrainingStrategy::at) {
                model->eval();
                batch = craft(config.adversarial, self, batch, labels,
                              config.seed * 7919ULL + static_cast<std::uint64_t>(step), batch.size(0))
                            .adversarial;
            }
            model->train();
            for (auto& group : optimizer.param_groups()) {
                static_cast<torch::optim::SGDOptions&>(group.options())
                    .lr(one_cycle_lr(config.learning_rate, step, total_steps));
            }
            const auto loss = torch::nn::functional::cross_entropy(model->forward(batch), labels);
            const double value = loss.item<double>();
            if (!std::isfinite(value)) {
                throw DivergenceError(detail::concat("classifier training diverged at epoch ", epoch));
            }
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();
            sum += value * static_cast<double>(idx.size(0));
        }
        result.epoch_losses.push_back(sum / static_cast<double>(n));
        log_info("classifier[", to_string(architecture.architecture), "/", to_string(config.strategy), "] epoch ",
                 epoch, "/", config.epochs, " loss=", result.epoch_losses.back());
    }
    model->eval();
    result.clean_accuracy = accuracy(model, test_images, test_labels);
    result.usable = result.clean_accuracy >= config.accuracy_floor;
    if (!result.usable) {
        log_line(LogLevel::warn, detail::concat("classifier ", to_string(architecture.architecture), "/",
                                                to_string(config.strategy), " clean accuracy ",
                                                result.clean_accuracy, " is below the floor ",
                                                config.accuracy_floor, "; flagged unusable"));
    }
    return result;
}

void save_classifier(const std::string& path, Classifier& model, const nlohmann::json& extra_meta) {
    Checkpoint ckpt;
    ckpt.kind = "classifier";
    ckpt.meta = extra_meta.is_null() ? nlohmann::json::object() : extra_meta;
    ckpt.meta["architecture"] = model->config();
    collect_state(*model, ckpt.tensors);
    save_checkpoint(path, ckpt);
}

Classifier load_classifier(const std::string& path, nlohmann::json* meta_out) {
    const auto ckpt = load_checkpoint(path, "classifier");
    Classifier model(ckpt.meta.at("architecture").get<ClassifierConfig>());
    restore_state(*model, ckpt.tensors);
    model->eval();
    if (meta_out) {
        *meta_out = ckpt.meta;
    }
    return model;
}

void save_archive(const std::string& path, const AdversarialArchive& archive) {
    Checkpoint ckpt;
    ckpt.kind = "adversarial_archive";
    ckpt.meta = archive.config;
    ckpt.meta["fallback_count"] = archive.fallback_count;
    ckpt.tensors["clean"] = archive.clean;
    ckpt.tensors["adversarial"] = archive.adversarial;
    ckpt.tensors["labels"] = archive.labels;
    ckpt.tensors["victim_predictions"] = archive.victim_predictions;
    save_checkpoint(path, ckpt);
}

AdversarialArchive load_archive(const std::string& path) {
    auto ckpt = load_checkpoint(path, "adversarial_archive");
    AdversarialArchive archive;
    archive.clean = ckpt.tensors.at("clean");
    archive.adversarial = ckpt.tensors.at("adversarial");
    archive.labels = ckpt.tensors.at("labels");
    archive.victim_predictions = ckpt.tensors.at("victim_predictions");
    archive.fallback_count = ckpt.meta.value("fallback_count", int64_t{0});
    archive.config = ckpt.meta;
    return archive;
}

}  // namespace recdet
