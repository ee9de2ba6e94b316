#include "recdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "recdet/checkpoint.hpp"

namespace recdet {

void to_json(nlohmann::json& j, const Provenance& p) {
    j = {{"attack", p.attack}, {"epsilon", p.epsilon}, {"threat", p.threat}, {"split", p.split}};
}

void from_json(const nlohmann::json& j, Provenance& p) {
    p.attack = j.value("attack", std::string{});
    p.epsilon = j.value("epsilon", 0.0);
    p.threat = j.value("threat", std::string{});
    p.split = j.value("split", std::string{});
}

std::array<int64_t, kDetectionClasses> DetectionSet::class_counts() const {
    std::array<int64_t, kDetectionClasses> counts{};
    if (size() == 0) return counts;
    const auto hist = torch::bincount(labels, {}, kDetectionClasses);
    for (int64_t c = 0; c < kDetectionClasses; ++c) counts[c] = hist[c].item<int64_t>();
    return counts;
}

DetectionSet DetectionSet::subset(const torch::Tensor& index) const {
    DetectionSet out;
    out.features = features.index_select(0, index);
    out.labels = labels.index_select(0, index);
    out.origin = origin.index_select(0, index);
    out.source = source.index_select(0, index);
    out.provenance = provenance;
    return out;
}

torch::Tensor DetectionSet::is_positive() const { return labels.ne(0); }

void DetectionSet::validate() const {
    require(features.defined() && features.dim() == 2, "detection set: features must be [N, D]");
    require(labels.defined() && labels.dim() == 1 && labels.size(0) == features.size(0),
            "detection set: labels must be [N]");
    require(origin.defined() && origin.size(0) == labels.size(0), "detection set: origin must be [N]");
    require(source.defined() && source.size(0) == labels.size(0), "detection set: source must be [N]");
    if (size() > 0) {
        require(labels.min().item<int64_t>() >= 0 && labels.max().item<int64_t>() < kDetectionClasses,
                "detection set: labels must lie in {0, 1, 2}");
        require(origin.max().item<int64_t>() < static_cast<int64_t>(provenance.size()),
                "detection set: origin index out of range");
    }
    check_finite(features, "detection features");
}

DetectionSet concat_sets(const std::vector<DetectionSet>& sets) {
    require(!sets.empty(), "concat_sets: nothing to concatenate");
    DetectionSet out;
    std::vector<torch::Tensor> f, l, o, src;
    for (const auto& s : sets) {
        require(s.dim() == sets.front().dim(), "concat_sets: feature widths differ (", s.dim(), " vs ",
                sets.front().dim(), ")");
        src.push_back(s.source);
        f.push_back(s.features);
        l.push_back(s.labels);
        o.push_back(s.origin + static_cast<int64_t>(out.provenance.size()));
        out.provenance.insert(out.provenance.end(), s.provenance.begin(), s.provenance.end());
    }
    out.features = torch::cat(f);
    out.labels = torch::cat(l);
    out.origin = torch::cat(o);
    out.source = torch::cat(src);
    return out;
}

DetectionBuild build_detection_dataset(const DetectionInputs& inputs, Classifier& victim, const VaeSet& vaes,
                                       ReconVariant variant, const FeatureExtractor& extractor,
                                       const Provenance& provenance) {
    check_variant_models(vaes, variant);
    check_image_batch(inputs.clean, "clean");
    check_same_shape(inputs.clean, inputs.noisy, "noisy vs clean");
    check_same_shape(inputs.clean, inputs.adversarial, "adversarial vs clean");
    require(inputs.labels.dim() == 1 && inputs.labels.size(0) == inputs.clean.size(0),
            "build_detection_dataset: labels must be [N]");

    const auto clean_ok = predict(victim, inputs.clean).eq(inputs.labels);
    const auto noisy_ok = predict(victim, inputs.noisy).eq(inputs.labels).logical_and(clean_ok);

    DetectionBuild build;
    build.kept = clean_ok.nonzero().flatten();
    const auto noisy_keep = noisy_ok.nonzero().flatten();
    build.dropped_clean = inputs.clean.size(0) - build.kept.size(0);
    build.dropped_noisy = build.kept.size(0) - noisy_keep.size(0);

    const char* names[] = {"clean", "noisy", "adversarial"};
    const torch::Tensor* sources[] = {&inputs.clean, &inputs.noisy, &inputs.adversarial};
    const torch::Tensor rows[] = {build.kept, noisy_keep, build.kept};

    std::vector<torch::Tensor> feats, labels, source;
    for (int64_t c = 0; c < kDetectionClasses; ++c) {
        if (rows[c].size(0) == 0) {
            throw ValidationError(detail::concat("build_detection_dataset: class '", names[c],
                                                 "' is empty after the victim filter"));
        }
        const auto originals = sources[c]->index_select(0, rows[c]);
        const auto rebuilt = reconstruct(vaes, originals, variant);
        feats.push_back(reconstruction_error(extractor, originals, rebuilt).vector);
        labels.push_back(torch::full({rows[c].size(0)}, c, torch::kLong));
        source.push_back(rows[c]);
        build.counts[c] = rows[c].size(0);
    }
    build.set.features = torch::cat(feats);
    build.set.labels = torch::cat(labels);
    build.set.origin = torch::zeros_like(build.set.labels);
    build.set.source = torch::cat(source);
    build.set.provenance = {provenance};
    log_info("detection set [", provenance.attack, " / ", provenance.threat, "]: clean=", build.counts[0],
             " noisy=", build.counts[1], " adversarial=", build.counts[2], " dropped_clean=", build.dropped_clean,
             " dropped_noisy=", build.dropped_noisy);
    return build;
}

std::pair<DetectionSet, DetectionSet> stratified_split(const DetectionSet& set, double train_fraction,
                                                       std::uint64_t seed) {
    require(train_fraction > 0.0 && train_fraction < 1.0, "stratified_split: train_fraction must be in (0, 1)");
    auto generator = make_generator(seed);
    std::vector<torch::Tensor> train_idx, test_idx;
    for (int64_t c = 0; c < kDetectionClasses; ++c) {
        const auto members = set.labels.eq(c).nonzero().flatten();
        const int64_t n = members.size(0);
        if (n == 0) continue;
        const auto perm = members.index_select(0, torch::randperm(n, generator, torch::kLong));
        const auto n_train = static_cast<int64_t>(std::llround(train_fraction * static_cast<double>(n)));
        train_idx.push_back(perm.slice(0, 0, n_train));
        test_idx.push_back(perm.slice(0, n_train, n));
    }
    require(!train_idx.empty(), "stratified_split: empty set");
    return {set.subset(std::get<0>(torch::sort(torch::cat(train_idx)))),
            set.subset(std::get<0>(torch::sort(torch::cat(test_idx))))};
}

DetectorConfig DetectorConfig::for_attack(AttackFamily attack, DatasetName dataset, ReconFamily family) {
    DetectorConfig c;
    c.learning_rate = 1e-2;
    c.momentum = 0.9;
    const bool pgd = attack == AttackFamily::pgd_linf || attack == AttackFamily::pgd_l2;
    c.weight_decay = pgd ? 5e-4 : 5e-3;
    if (dataset == DatasetName::cifar100) {
        c.batch_size = 256;
        if (attack == AttackFamily::deepfool) c.weight_decay = 5e-4;
        if (family == ReconFamily::frd && (pgd || attack == AttackFamily::deepfool)) c.learning_rate = 5e-2;
    }
    return c;
}

void DetectorConfig::validate() const {
    require(hidden > 0, "detector hidden width must be positive");
    require(epochs >= 1, "detector epochs must be >= 1");
    require(batch_size >= 1, "detector batch size must be >= 1");
    require(learning_rate > 0.0, "detector learning rate must be positive");
    require(momentum >= 0.0 && momentum < 1.0, "detector momentum must be in [0, 1)");
    require(weight_decay >= 0.0, "detector weight decay must be non-negative");
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
    j = {{"hidden", c.hidden},         {"epochs", c.epochs},     {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate}, {"momentum", c.momentum}, {"weight_decay", c.weight_decay},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
    const DetectorConfig d;
    c.hidden = j.value("hidden", d.hidden);
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.momentum = j.value("momentum", d.momentum);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.seed = j.value("seed", d.seed);
}

DetectorNetImpl::DetectorNetImpl(int64_t input_dim, int64_t hidden) {
    fc1 = register_module("fc1", torch::nn::Linear(input_dim, hidden));
    fc2 = register_module("fc2", torch::nn::Linear(hidden, kDetectionClasses));
    // A zero head starts at the uniform prior; with random weights a detector
    // fed uninformative labels keeps its initial, feature-dependent slope.
    torch::NoGradGuard no_grad;
    fc2->weight.zero_();
    fc2->bias.zero_();
    feature_mean = register_buffer("feature_mean", torch::zeros({input_dim}));
    feature_std = register_buffer("feature_std", torch::ones({input_dim}));
}

torch::Tensor DetectorNetImpl::forward(const torch::Tensor& features) {
    const auto z = (features - feature_mean) / feature_std;
    return fc2(torch::relu(fc1(z)));
}

Detector::Detector(DetectorNet net, DetectorConfig config, std::string extractor_fingerprint)
    : net_(std::move(net)), config_(std::move(config)), fingerprint_(std::move(extractor_fingerprint)) {
    input_dim_ = net_->fc1->options.in_features();
    net_->eval();
}

torch::Tensor Detector::probabilities(const torch::Tensor& features) const {
    require(features.dim() == 2 && features.size(1) == input_dim_, "detector expects features of width ",
            input_dim_, ", got ", features.dim() == 2 ? features.size(1) : -1);
    torch::NoGradGuard no_grad;
    net_->eval();
    return torch::softmax(net_->forward(features.to(torch::kFloat)), 1);
}

DetectorTrainResult train_detector(const DetectionSet& train, const DetectorConfig& config,
                                   const std::string& extractor_fingerprint) {
    config.validate();
    train.validate();
    const auto counts = train.class_counts();
    require(std::count_if(counts.begin(), counts.end(), [](int64_t c) { return c > 0; }) >= 2,
            "train_detector: at least two classes are required");

    torch::manual_seed(config.seed);
    auto generator = make_generator(config.seed + 1);
    DetectorNet net(train.dim(), config.hidden);
    {
        torch::NoGradGuard no_grad;
        net->feature_mean.copy_(train.features.mean(0));
        // Constant columns keep unit scale instead of dividing by zero.
        auto std = train.features.std(0, /*unbiased=*/false);
        net->feature_std.copy_(torch::where(std > 1e-12, std, torch::ones_like(std)));
    }
    torch::optim::SGD optimizer(net->parameters(), torch::optim::SGDOptions(config.learning_rate)
                                                       .momentum(config.momentum)
                                                       .weight_decay(config.weight_decay));

    std::map<std::string, torch::Tensor> last_stable;
    collect_state(*net, last_stable);
    std::vector<double> losses;
    const int64_t n = train.size();
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        net->train();
        const auto order = torch::randperm(n, generator, torch::kLong);
        double sum = 0.0;
        for (int64_t s = 0; s < n; s += config.batch_size) {
            const auto idx = order.slice(0, s, std::min(n, s + config.batch_size));
            const auto loss = torch::cross_entropy_loss(net->forward(train.features.index_select(0, idx)),
                                                        train.labels.index_select(0, idx));
            const double value = loss.item<double>();
            if (!std::isfinite(value)) {
                restore_state(*net, last_stable);
                throw DivergenceError(detail::concat("detector diverged: epoch=", epoch,
                                                     " lr=", config.learning_rate, " loss=", value));
            }
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();
            sum += value * static_cast<double>(idx.size(0));
        }
        losses.push_back(sum / static_cast<double>(n));
        last_stable.clear();
        collect_state(*net, last_stable);
        log_debug("detector epoch ", epoch, "/", config.epochs, " loss=", losses.back());
    }

    Detector detector(net, config, extractor_fingerprint);
    const auto predicted = detector.probabilities(train.features).argmax(1);
    const double acc = predicted.eq(train.labels).to(torch::kDouble).mean().item<double>();
    return {std::move(detector), std::move(losses), acc};
}

torch::Tensor score(const Detector& detector, const torch::Tensor& features) {
    return (1.0 - detector.probabilities(features).select(1, 0)).clamp(0.0, 1.0);
}

double evaluate_auc(const std::vector<double>& scores, const std::vector<bool>& is_adversarial) {
    require(scores.size() == is_adversarial.size(), "evaluate_auc: scores and labels differ in length");
    const auto n = scores.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // Mann-Whitney: sum of midranks of positives.
    double positive_rank_sum = 0.0;
    size_t positives = 0;
    for (size_t i = 0; i < n;) {
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);
        for (size_t k = i; k < j; ++k) {
            if (is_adversarial[order[k]]) {
                positive_rank_sum += midrank;
                ++positives;
            }
        }
        i = j;
    }
    const size_t negatives = n - positives;
    require(positives > 0 && negatives > 0, "evaluate_auc: both classes must be present (positives=", positives,
            ", negatives=", negatives, ")");
    const double p = static_cast<double>(positives), q = static_cast<double>(negatives);
    return (positive_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

double evaluate_auc(const torch::Tensor& scores, const torch::Tensor& is_adversarial) {
    require(scores.dim() == 1 && is_adversarial.dim() == 1 && scores.size(0) == is_adversarial.size(0),
            "evaluate_auc: expects two [N] tensors");
    check_finite(scores, "scores");
    const auto s = scores.to(torch::kDouble).contiguous();
    const auto y = is_adversarial.to(torch::kBool).contiguous();
    std::vector<double> sv(s.data_ptr<double>(), s.data_ptr<double>() + s.numel());
    std::vector<bool> yv(static_cast<size_t>(y.numel()));
    const auto* yp = y.data_ptr<bool>();
    for (size_t i = 0; i < yv.size(); ++i) yv[i] = yp[i];
    return evaluate_auc(sv, yv);
}

double detection_auc(const Detector& detector, const DetectionSet& set) {
    return evaluate_auc(score(detector, set.features), set.is_positive());
}

void save_detector(const std::string& path, const Detector& detector, const nlohmann::json& extra_meta) {
    Checkpoint ckpt;
    ckpt.kind = "detector";
    ckpt.meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
    ckpt.meta["config"] = detector.config();
    ckpt.meta["input_dim"] = detector.input_dim();
    ckpt.meta["extractor_fingerprint"] = detector.extractor_fingerprint();
    collect_state(*detector.net(), ckpt.tensors);
    save_checkpoint(path, ckpt);
}

Detector load_detector(const std::string& path, nlohmann::json* meta_out) {
    auto ckpt = load_checkpoint(path, "detector");
    const auto config = ckpt.meta.at("config").get<DetectorConfig>();
    const auto input_dim = ckpt.meta.at("input_dim").get<int64_t>();
    DetectorNet net(input_dim, config.hidden);
    restore_state(*net, ckpt.tensors);
    if (meta_out) *meta_out = ckpt.meta;
    return Detector(net, config, ckpt.meta.value("extractor_fingerprint", std::string{}));
}

void save_detection_set(const std::string& path, const DetectionSet& set, const nlohmann::json& meta) {
    set.validate();
    Checkpoint ckpt;
    ckpt.kind = "detection_set";
    ckpt.meta = meta.is_object() ? meta : nlohmann::json::object();
    ckpt.meta["provenance"] = set.provenance;
    ckpt.tensors["features"] = set.features;
    ckpt.tensors["labels"] = set.labels;
    ckpt.tensors["origin"] = set.origin;
    ckpt.tensors["source"] = set.source;
    save_checkpoint(path, ckpt);
}

DetectionSet load_detection_set(const std::string& path, nlohmann::json* meta_out) {
    auto ckpt = load_checkpoint(path, "detection_set");
    DetectionSet set;
    set.features = ckpt.tensors.at("features");
    set.labels = ckpt.tensors.at("labels");
    set.origin = ckpt.tensors.at("origin");
    set.source = ckpt.tensors.at("source");
    set.provenance = ckpt.meta.at("provenance").get<std::vector<Provenance>>();
    set.validate();
    if (meta_out) *meta_out = ckpt.meta;
    return set;
}

void write_scores_csv(const std::string& path, const torch::Tensor& scores, const DetectionSet& set,
                      const std::string& setting) {
    require(scores.dim() == 1 && scores.size(0) == set.size(), "write_scores_csv: one score per sample required");
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write " + path);
    out << "id,source,score,label,setting\n" << std::fixed << std::setprecision(6);
    const auto s = scores.to(torch::kDouble).contiguous();
    const auto l = set.labels.contiguous();
    for (int64_t i = 0; i < set.size(); ++i) {
        out << i << ',' << set.source[i].item<int64_t>() << ',' << s[i].item<double>() << ','
            << l[i].item<int64_t>() << ',' << setting << '\n';
    }
}

}  // namespace recdet
