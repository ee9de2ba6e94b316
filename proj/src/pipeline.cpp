#include "recdet/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace recdet {

namespace fs = std::filesystem;

std::string to_string(Side s) { return s == Side::train ? "train" : "test"; }

namespace {

constexpr const char* kWhiteBox = "white-box";

std::string sanitize(const std::string& key) {
    std::string out = key;
    for (auto& ch : out) {
        const bool keep = std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.' ||
                          ch == '=' || ch == '+';
        if (!keep) ch = '_';
    }
    return out;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
    return out;
}

std::string strength_label(double epsilon) {
    const double scaled = epsilon * 255.0;
    if (std::abs(scaled - std::round(scaled)) < 1e-6) {
        return "eps=" + std::to_string(std::lround(scaled)) + "/255";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "eps=%.4f", epsilon);
    return buf;
}

std::string archive_key(const AttackSpec& attack, const ThreatModelSpec* threat, Side side) {
    return attack_key(attack) + "__" + (threat ? threat->id() : std::string(kWhiteBox)) + "__" + to_string(side);
}

/// Rows whose victim prediction differs from the true label, capped at `limit`.
torch::Tensor fooled_rows(const AdversarialArchive& archive, int64_t limit) {
    const auto idx = archive.victim_predictions.ne(archive.labels).nonzero().flatten();
    return idx.slice(0, 0, std::min(limit, idx.size(0)));
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out << text;
}

std::string fixed4(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

}  // namespace

std::string attack_key(const AttackSpec& attack) {
    return attack.id() + "-" + sha256_hex(nlohmann::json(attack).dump()).substr(0, 8);
}

Pipeline::Pipeline(ExperimentConfig config, fs::path workspace, PipelineOptions options)
    : config_(std::move(config)), workspace_(std::move(workspace)), options_(options) {
    config_.validate();
    hash_ = config_.hash();
    fs::create_directories(workspace_ / "artifacts");
    const auto stored = workspace_ / "config.json";
    if (fs::exists(stored)) {
        const auto previous = load_config(stored.string()).hash();
        if (previous != hash_) {
            if (!options_.force) {
                throw ArtifactError("workspace " + workspace_.string() + " belongs to config hash " + previous +
                                    ", current config hash is " + hash_ +
                                    " (use a fresh workspace or --force)");
            }
            log_line(LogLevel::warn, "workspace config hash " + previous + " differs from " + hash_ +
                                         "; continuing because --force is set");
        }
    }
    save_config(stored.string(), config_);
    seed_everything(config_.seed, config_.strict_determinism);
}

std::uint64_t Pipeline::derive_seed(const std::string& key) const {
    const auto digest = sha256_hex(std::to_string(config_.seed) + "/" + key);
    return std::stoull(digest.substr(0, 16), nullptr, 16);
}

fs::path Pipeline::artifact(const std::string& kind, const std::string& key) const {
    const auto dir = workspace_ / "artifacts" / kind;
    fs::create_directories(dir);
    return dir / (sanitize(key) + ".pt");
}

void Pipeline::check_meta(const nlohmann::json& meta, const fs::path& path) const {
    const auto found = meta.value("config_hash", std::string{});
    if (found == hash_) return;
    if (!options_.force) {
        throw ArtifactError("artifact " + path.string() + " was produced under config hash '" + found +
                            "', current hash is '" + hash_ + "'");
    }
    log_line(LogLevel::warn, "reusing " + path.string() + " from config hash '" + found + "' (--force)");
}

nlohmann::json Pipeline::stamp(nlohmann::json meta) const {
    if (meta.is_null()) meta = nlohmann::json::object();
    meta["config_hash"] = hash_;
    return meta;
}

const DatasetSplits& Pipeline::data() {
    if (!data_) data_ = ingest_dataset(config_.dataset);
    return *data_;
}

Classifier Pipeline::classifier(const std::string& key, const ModelRecipe& recipe) {
    if (const auto it = classifiers_.find(key); it != classifiers_.end()) return it->second;
    const auto path = artifact("models", key);
    Classifier model{nullptr};
    double clean_accuracy = 0.0;
    bool usable = true;
    if (fs::exists(path)) {
        nlohmann::json meta;
        model = load_classifier(path.string(), &meta);
        check_meta(meta, path);
        clean_accuracy = meta.value("clean_accuracy", 0.0);
        usable = meta.value("usable", true);
    } else {
        const auto& d = data();
        const auto idx = subset_indices(d.train.size(), config_.subsets.classifier_train,
                                        derive_seed("classifier_train"));
        const auto train = d.train.take(idx);
        log_info("training classifier ", key, " on ", train.size(), " images");
        auto trained = train_classifier(recipe.architecture, recipe.training, train.images, train.labels,
                                        d.test.images, d.test.labels);
        model = trained.model;
        clean_accuracy = trained.clean_accuracy;
        usable = trained.usable;
        save_classifier(path.string(), model,
                        stamp({{"clean_accuracy", clean_accuracy}, {"usable", usable}, {"training", recipe.training}}));
    }
    require(usable, "classifier '", key, "' is flagged unusable: clean accuracy ", clean_accuracy,
            " is below the floor ", recipe.training.accuracy_floor);
    model->eval();
    for (auto& p : model->parameters()) p.set_requires_grad(false);
    model_accuracy_[key] = clean_accuracy;
    classifiers_.emplace(key, model);
    return model;
}

Classifier Pipeline::victim() { return classifier("victim", config_.victim); }

Classifier Pipeline::pretrained() { return classifier("pretrained", config_.pretrained); }

Classifier Pipeline::threat_member(Architecture architecture, TrainingStrategy strategy) {
    auto recipe = config_.threat_recipe(architecture);
    recipe.training.strategy = strategy;
    return classifier(to_string(architecture) + "-" + to_string(strategy), recipe);
}

ModelEnsemble Pipeline::threat_models(const ThreatModelSpec& spec) {
    spec.validate();
    std::vector<Classifier> members;
    for (const auto a : spec.architectures) members.push_back(threat_member(a, spec.strategy));
    return ModelEnsemble(std::move(members));
}

Vae Pipeline::vae(VaeTarget target) {
    const auto key = to_string(target);
    if (const auto it = vaes_.find(key); it != vaes_.end()) return it->second;
    const auto path = artifact("vaes", key);
    Vae model{nullptr};
    if (fs::exists(path)) {
        nlohmann::json meta;
        model = load_vae(path.string(), &meta);
        check_meta(meta, path);
    } else {
        const auto& cfg = target == VaeTarget::pixel       ? config_.vae_pixel
                          : target == VaeTarget::amplitude ? config_.vae_amplitude
                                                           : config_.vae_phase;
        const auto& d = data();
        const auto idx = subset_indices(d.train.size(), config_.subsets.vae_train, derive_seed("vae_train"));
        log_info("training ", key, " VAE on ", idx.size(0), " images");
        VaeTrainOptions opts;
        opts.checkpoint_path = path.string();
        opts.extra_meta = stamp();
        model = train_vae(d.train.images.index_select(0, idx), cfg, opts).model;
    }
    model->eval();
    for (auto& p : model->parameters()) p.set_requires_grad(false);
    vaes_.emplace(key, model);
    return model;
}

VaeSet Pipeline::vaes_for(ReconVariant variant) {
    VaeSet set;
    switch (variant) {
        case ReconVariant::pixel: set.pixel = vae(VaeTarget::pixel); break;
        case ReconVariant::amp: set.amplitude = vae(VaeTarget::amplitude); break;
        case ReconVariant::pha: set.phase = vae(VaeTarget::phase); break;
        case ReconVariant::joint:
            set.amplitude = vae(VaeTarget::amplitude);
            set.phase = vae(VaeTarget::phase);
            break;
    }
    return set;
}

std::vector<std::string> Pipeline::resolve_layers(const MethodVariant& method, const std::vector<std::string>& layers) {
    if (!layers.empty()) return layers;
    if (!config_.layer_ids.empty()) return config_.layer_ids;
    const auto& recipe = method.extractor == ExtractorVariant::base ? config_.victim : config_.pretrained;
    return default_taps(recipe.architecture.architecture);
}

FeatureExtractor Pipeline::extractor(const MethodVariant& method, const std::vector<std::string>& layers) {
    method.validate();
    ExtractorSpec spec;
    spec.layer_ids = resolve_layers(method, layers);
    spec.pooling = config_.pooling;
    if (method.extractor == ExtractorVariant::base) {
        spec.model_ref = "victim";
        spec.role = ExtractorRole::victim;
        return FeatureExtractor(victim(), spec);
    }
    spec.model_ref = "pretrained";
    spec.role = ExtractorRole::pretrained;
    return FeatureExtractor(pretrained(), spec);
}

const DetectionImages& Pipeline::detection_images() {
    if (detection_images_) return *detection_images_;
    const auto& d = data();
    const auto pool = d.test.take(
        subset_indices(d.test.size(), config_.subsets.detection_pool, derive_seed("detection_pool")));
    auto model = victim();
    const auto correct = predict(model, pool.images).eq(pool.labels).nonzero().flatten();
    const auto kept = pool.take(correct);
    log_info("detection pool: ", kept.size(), " of ", pool.size(), " images classified correctly by the victim");

    auto generator = make_generator(derive_seed("detection_split"));
    std::vector<std::vector<int64_t>> by_class;
    for (int64_t c = 0; c < num_classes(config_.dataset); ++c) {
        const auto members = kept.labels.eq(c).nonzero().flatten();
        const int64_t n = members.size(0);
        if (n == 0) continue;
        const auto shuffled = members.index_select(0, torch::randperm(n, generator, torch::kLong)).contiguous();
        by_class.emplace_back(shuffled.data_ptr<int64_t>(), shuffled.data_ptr<int64_t>() + n);
    }
    std::vector<torch::Tensor> train_rows, test_rows;
    const auto& sizes = config_.subsets;
    if (sizes.detection_train > 0) {
        // Round-robin over classes: test first, then train from the remainder.
        std::vector<int64_t> order;
        for (size_t depth = 0;; ++depth) {
            bool any = false;
            for (const auto& members : by_class) {
                if (depth < members.size()) {
                    order.push_back(members[depth]);
                    any = true;
                }
            }
            if (!any) break;
        }
        const auto n = static_cast<int64_t>(order.size());
        const int64_t n_test = std::min(sizes.detection_test, n);
        const int64_t n_train = std::min(sizes.detection_train, n - n_test);
        if (n_test + n_train < sizes.detection_test + sizes.detection_train) {
            log_warn("detection split: only ", n, " victim-correct images for ", sizes.detection_train, " train + ",
                     sizes.detection_test, " test");
        }
        const auto all = torch::tensor(order, torch::kLong);
        test_rows.push_back(all.slice(0, 0, n_test));
        train_rows.push_back(all.slice(0, n_test, n_test + n_train));
    } else {
        for (const auto& members : by_class) {
            const auto n = static_cast<int64_t>(members.size());
            const auto n_train = static_cast<int64_t>(std::llround(config_.train_fraction * static_cast<double>(n)));
            const auto rows = torch::tensor(members, torch::kLong);
            train_rows.push_back(rows.slice(0, 0, n_train));
            test_rows.push_back(rows.slice(0, n_train));
        }
    }
    require(!train_rows.empty(), "detection pool is empty after the victim filter");
    const auto train_idx = std::get<0>(torch::cat(train_rows).sort());
    const auto test_idx = std::get<0>(torch::cat(test_rows).sort());
    require(train_idx.size(0) > 0 && test_idx.size(0) > 0, "detection split left one side empty");
    detection_images_ = DetectionImages{kept.take(train_idx), kept.take(test_idx)};
    return *detection_images_;
}

AdversarialArchive Pipeline::archive(const AttackSpec& attack, const ThreatModelSpec* threat, Side side) {
    require(threat == nullptr || side == Side::test, "black-box archives are crafted for the test side only");
    const auto key = archive_key(attack, threat, side);
    const auto path = artifact("archives", key);
    if (fs::exists(path)) {
        auto loaded = load_archive(path.string());
        check_meta(loaded.config, path);
        return loaded;
    }
    const auto& split = side == Side::train ? detection_images().train : detection_images().test;
    const auto model = threat ? threat_models(*threat) : ModelEnsemble({victim()});
    log_info("crafting ", attack.id(), " against ", threat ? threat->id() : kWhiteBox, " on ", split.size(), " ",
             to_string(side), " images");
    auto crafted = craft(attack, model, split.images, split.labels, derive_seed("craft/" + key));
    AdversarialArchive out;
    out.clean = split.images;
    out.adversarial = crafted.adversarial;
    out.labels = split.labels;
    auto v = victim();
    out.victim_predictions = predict(v, out.adversarial);
    out.fallback_count = crafted.fallback_count;
    out.config = stamp({{"attack", attack},
                        {"threat", threat ? threat->id() : kWhiteBox},
                        {"side", to_string(side)},
                        {"dataset", to_string(config_.dataset)}});
    save_archive(path.string(), out);
    return out;
}

ImageBatch Pipeline::noisy_images(const AttackSpec& attack, const ThreatModelSpec* threat, Side side) {
    const auto a = archive(attack, threat, side);
    return add_matched_noise(a.clean, a.adversarial, derive_seed("noise/" + archive_key(attack, threat, side)));
}

DetectionSet Pipeline::detection_set(const MethodVariant& method, const AttackSpec& attack,
                                     const ThreatModelSpec* threat, Side side, const std::vector<std::string>& layers) {
    const auto taps = resolve_layers(method, layers);
    const auto source_key = archive_key(attack, threat, side);
    const auto key = method.name() + "__" + source_key + "__" + join(taps, "+");
    if (const auto it = sets_.find(key); it != sets_.end()) return it->second;
    const auto path = artifact("sets", key);
    DetectionSet set;
    if (fs::exists(path)) {
        nlohmann::json meta;
        set = load_detection_set(path.string(), &meta);
        check_meta(meta, path);
    } else {
        const auto a = archive(attack, threat, side);
        DetectionInputs inputs{a.clean, add_matched_noise(a.clean, a.adversarial, derive_seed("noise/" + source_key)),
                               a.adversarial, a.labels};
        Provenance prov{attack.id(), attack.epsilon, threat ? threat->id() : kWhiteBox, to_string(side)};
        const auto ex = extractor(method, taps);
        auto v = victim();
        auto build = build_detection_dataset(inputs, v, vaes_for(method.recon), method.recon, ex, prov);
        log_info("detection set ", key, ": clean=", build.counts[0], " noisy=", build.counts[1],
                 " adversarial=", build.counts[2], " dropped_noisy=", build.dropped_noisy);
        set = std::move(build.set);
        save_detection_set(path.string(), set,
                           stamp({{"fingerprint", ex.fingerprint()},
                                  {"layers", taps},
                                  {"counts", build.counts},
                                  {"dropped_clean", build.dropped_clean},
                                  {"dropped_noisy", build.dropped_noisy}}));
    }
    sets_.emplace(key, set);
    return set;
}

Detector Pipeline::detector_for(const std::string& key, const DetectionSet& train, AttackFamily family,
                                ReconFamily recon_family, const std::string& fingerprint) {
    if (const auto it = detectors_.find(key); it != detectors_.end()) return *it->second;
    const auto path = artifact("detectors", key);
    std::shared_ptr<Detector> det;
    if (fs::exists(path)) {
        nlohmann::json meta;
        det = std::make_shared<Detector>(load_detector(path.string(), &meta));
        check_meta(meta, path);
        if (det->extractor_fingerprint() != fingerprint && !options_.force) {
            throw ArtifactError("detector " + path.string() + " was trained on features from extractor " +
                                det->extractor_fingerprint() + ", current extractor is " + fingerprint);
        }
    } else {
        auto cfg = config_.detector;
        if (config_.detector_defaults_per_attack) {
            const auto defaults = DetectorConfig::for_attack(family, config_.dataset, recon_family);
            cfg.learning_rate = defaults.learning_rate;
            cfg.momentum = defaults.momentum;
            cfg.weight_decay = defaults.weight_decay;
            cfg.batch_size = defaults.batch_size;
        }
        cfg.seed = derive_seed("detector/" + key);
        auto result = train_detector(train, cfg, fingerprint);
        log_info("detector ", key, ": train accuracy ", result.train_accuracy, ", loss ",
                 result.epoch_losses.front(), " -> ", result.epoch_losses.back());
        save_detector(path.string(), result.detector, stamp({{"train_accuracy", result.train_accuracy}}));
        det = std::make_shared<Detector>(std::move(result.detector));
    }
    detectors_.emplace(key, det);
    return *det;
}

Detector Pipeline::detector(const MethodVariant& method, const AttackSpec& attack,
                            const std::vector<std::string>& layers) {
    const auto taps = resolve_layers(method, layers);
    const auto train = detection_set(method, attack, nullptr, Side::train, taps);
    const auto key = method.name() + "__" + attack_key(attack) + "__" + join(taps, "+");
    return detector_for(key, train, attack.family, method.family, extractor(method, taps).fingerprint());
}

AttackSpec reference_attack(const ExperimentConfig& config) {
    for (const auto& a : config.attacks) {
        if (a.family == AttackFamily::pgd_linf && std::abs(a.epsilon - 8.0 / 255.0) < 1e-9) return a;
    }
    return AttackSpec::defaults(AttackFamily::pgd_linf, 8.0 / 255.0);
}

AttackSpec Pipeline::reference_attack() const { return recdet::reference_attack(config_); }

AttackSpec Pipeline::strength_attack(double epsilon) const {
    auto a = reference_attack();
    if (std::abs(a.epsilon - epsilon) < 1e-12) return a;
    a.step_size = a.step_size * epsilon / a.epsilon;
    a.epsilon = epsilon;
    return a;
}

std::vector<std::string> Pipeline::settings() const {
    std::vector<std::string> out{kWhiteBox};
    for (const auto& t : config_.threats) {
        if (std::find(out.begin(), out.end(), t.setting()) == out.end()) out.push_back(t.setting());
    }
    return out;
}

double Pipeline::setting_auc(const Detector& detector, const MethodVariant& method,
                             const std::vector<AttackSpec>& test_attacks, const std::string& setting,
                             const std::vector<std::string>& layers) {
    std::vector<const ThreatModelSpec*> threats;
    if (setting == kWhiteBox) {
        threats.push_back(nullptr);
    } else {
        for (const auto& t : config_.threats) {
            if (t.setting() == setting) threats.push_back(&t);
        }
    }
    require(!threats.empty(), "no threat model for setting ", setting);
    double total = 0.0;
    for (const auto* threat : threats) {
        std::vector<DetectionSet> parts;
        for (const auto& a : test_attacks) parts.push_back(detection_set(method, a, threat, Side::test, layers));
        total += detection_auc(detector, concat_sets(parts));
    }
    return total / static_cast<double>(threats.size());
}

void Pipeline::timed(const std::string& stage, EvaluationReport& report, const std::function<void()>& body) {
    const auto start = std::chrono::steady_clock::now();
    try {
        body();
    } catch (const std::exception& e) {
        report.failures.push_back(stage + ": " + e.what());
        log_line(LogLevel::error, stage + " failed: " + e.what());
    }
    timings_[stage] += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void Pipeline::run_bad_matrix(EvaluationReport& report) {
    auto& table = report.tables["bad_matrix"];
    const auto columns = settings();
    for (const auto& c : columns) table.add_column(c);
    const auto& method = config_.method;
    const auto scores_dir = workspace_ / "scores";
    fs::create_directories(scores_dir);
    for (const auto& attack : config_.attacks) {
        const auto row = attack.id();
        table.add_row(row);
        std::optional<Detector> det;
        try {
            det = detector(method, attack);
        } catch (const std::exception& e) {
            report.failures.push_back("bad_matrix/" + row + ": " + e.what());
            continue;
        }
        const auto test_attacks =
            config_.composition == EvalComposition::same_attack ? std::vector<AttackSpec>{attack} : config_.attacks;
        for (const auto& setting : columns) {
            try {
                table.set(row, setting, setting_auc(*det, method, test_attacks, setting));
            } catch (const std::exception& e) {
                report.failures.push_back("bad_matrix/" + row + "/" + setting + ": " + e.what());
            }
        }
        try {
            const auto test = detection_set(method, attack, nullptr, Side::test);
            write_scores_csv((scores_dir / sanitize(method.name() + "__" + row + "__white-box.csv")).string(),
                             score(*det, test.features), test, kWhiteBox);
        } catch (const std::exception& e) {
            report.failures.push_back("bad_matrix/" + row + "/scores: " + e.what());
        }
    }
    for (const auto& c : columns) {
        if (const auto avg = table.column_average(c)) report.set_metric("bad_matrix.average." + c, *avg);
    }
}

void Pipeline::sweep_layers(EvaluationReport& report) {
    const auto& method = config_.method;
    const auto& recipe = method.extractor == ExtractorVariant::base ? config_.victim : config_.pretrained;
    std::vector<std::vector<std::string>> sets = config_.layer_sets;
    if (sets.empty()) {
        for (const auto& tap : stage_taps(recipe.architecture.architecture)) sets.push_back({tap});
    }
    std::vector<std::vector<std::string>> unique;
    for (const auto& s : sets) {
        if (std::find(unique.begin(), unique.end(), s) != unique.end()) {
            log_line(LogLevel::warn, "layer sweep: duplicate layer set '" + join(s, "+") + "' ignored");
            continue;
        }
        unique.push_back(s);
    }
    auto& table = report.tables["layers"];
    const auto columns = settings();
    for (const auto& c : columns) table.add_column(c);
    const auto attack = reference_attack();
    for (const auto& layers : unique) {
        const auto row = join(layers, "+");
        table.add_row(row);
        try {
            const auto det = detector(method, attack, layers);
            for (const auto& setting : columns) {
                try {
                    table.set(row, setting, setting_auc(det, method, {attack}, setting, layers));
                } catch (const std::exception& e) {
                    report.failures.push_back("layers/" + row + "/" + setting + ": " + e.what());
                }
            }
        } catch (const std::exception& e) {
            report.failures.push_back("layers/" + row + ": " + e.what());
        }
    }
}

void Pipeline::sweep_strengths(EvaluationReport& report) {
    const auto& method = config_.strength_method;
    auto& table = report.tables["strengths"];
    const auto columns = settings();
    for (const auto& c : columns) table.add_column(c);

    std::vector<AttackSpec> attacks;
    std::vector<StrengthPool> pools;
    auto v = victim();
    for (const double eps : config_.strengths) {
        const auto row = strength_label(eps);
        table.add_row(row);
        const auto attack = strength_attack(eps);
        try {
            auto train = detection_set(method, attack, nullptr, Side::train);
            const auto a = archive(attack, nullptr, Side::train);
            const auto lc = label_consistency(v, a.adversarial,
                                              reconstruct(vaes_for(method.recon), a.adversarial, method.recon));
            const auto adversarial_source = train.source.masked_select(train.labels.eq(2));
            pools.push_back({eps, train, lc.index_select(0, adversarial_source)});
            attacks.push_back(attack);
        } catch (const std::exception& e) {
            report.failures.push_back("strengths/" + row + ": pool unavailable, row skipped: " + e.what());
        }
    }
    require(!pools.empty(), "no perturbation-strength pool is available");

    auto fill_row = [&](const std::string& row, const Detector& det) {
        for (const auto& setting : columns) {
            try {
                table.set(row, setting, setting_auc(det, method, attacks, setting));
            } catch (const std::exception& e) {
                report.failures.push_back("strengths/" + row + "/" + setting + ": " + e.what());
            }
        }
    };
    for (const auto& attack : attacks) {
        const auto row = strength_label(attack.epsilon);
        try {
            fill_row(row, detector(method, attack));
        } catch (const std::exception& e) {
            report.failures.push_back("strengths/" + row + ": " + e.what());
        }
    }

    const auto fingerprint = extractor(method).fingerprint();
    const auto pooled = ctr_balance_sample(pools, derive_seed("ctr_balance"));
    report.set_metric("strengths.total.size", static_cast<double>(pooled.total.size()));
    report.set_metric("strengths.ctr_balance.size", static_cast<double>(pooled.balanced.size()));
    report.set_metric("strengths.ctr_balance.fallback", pooled.fallback ? 1.0 : 0.0);
    for (size_t i = 0; i < pooled.cell_counts.size(); ++i) {
        const auto& eps_row = strength_label(pools[i / 2].epsilon);
        report.set_metric("strengths.ctr_balance.cell." + eps_row + (i % 2 == 0 ? ".lc" : ".li"),
                          static_cast<double>(pooled.cell_counts[i]));
    }
    const auto family = reference_attack().family;
    table.add_row("total");
    fill_row("total", detector_for(method.name() + "__strengths-total", pooled.total, family, method.family,
                                   fingerprint));
    table.add_row("ctr-balance");
    fill_row("ctr-balance", detector_for(method.name() + "__strengths-ctr-balance", pooled.balanced, family,
                                         method.family, fingerprint));
}

void Pipeline::analyze(EvaluationReport& report) {
    const auto dir = workspace_ / "analysis";
    fs::create_directories(dir / "plots");
    const auto reference = reference_attack();
    const auto limit = config_.subsets.analysis_samples;
    auto v = victim();

    timed("analysis/separability", report, [&] {
        std::ostringstream csv;
        csv << "method,population,count,mean_norm\n";
        for (const auto* name : {"PRD-base(pixel)", "FRD-base(amp)"}) {
            const auto method = parse_method(name);
            const auto set = detection_set(method, reference, nullptr, Side::test);
            const auto norms = set.features.norm(2, 1);
            const auto adversarial = to_vector(norms.masked_select(set.labels.eq(2)));
            const auto normal = to_vector(norms.masked_select(set.labels.lt(2)));
            const auto test = mann_whitney_greater(adversarial, normal);
            const auto tag = "separability." + to_string(method.recon);
            const auto mean = [](const std::vector<double>& x) {
                double s = 0.0;
                for (double e : x) s += e;
                return s / static_cast<double>(x.size());
            };
            report.set_metric(tag + ".adversarial_mean", mean(adversarial));
            report.set_metric(tag + ".normal_mean", mean(normal));
            report.set_metric(tag + ".adversarial_count", static_cast<double>(adversarial.size()));
            report.set_metric(tag + ".normal_count", static_cast<double>(normal.size()));
            report.set_metric(tag + ".p_value", test.p_value);
            report.set_metric(tag + ".z", test.z);
            csv << name << ",adversarial," << adversarial.size() << ',' << fixed4(mean(adversarial)) << '\n';
            csv << name << ",normal," << normal.size() << ',' << fixed4(mean(normal)) << '\n';
        }
        write_text(dir / "separability.csv", csv.str());
    });

    timed("analysis/patch_differences", report, [&] {
        const auto a = archive(reference, nullptr, Side::test);
        const auto rows = fooled_rows(a, config_.subsets.difference_samples);
        require(rows.size(0) > 0, "no fooled sample for the patch analysis");
        const auto images = a.clean.index_select(0, rows);
        const auto deltas = a.adversarial.index_select(0, rows) - images;
        const auto labels = a.labels.index_select(0, rows);
        std::ostringstream patches, kde_csv;
        patches << "domain,sample,patch,suppression,promotion\n";
        kde_csv << "domain,value,density\n";
        std::vector<NamedCurve> curves;
        std::map<PatchDomain, double> means;
        for (const auto domain : {PatchDomain::pixel, PatchDomain::amplitude, PatchDomain::phase}) {
            const auto name = to_string(domain);
            const auto batch = difference_maps(images, deltas, v, labels, domain, config_.grid, config_.xi);
            require(batch.suppression.size(0) > 0, "every sample was skipped in the ", name, " domain");
            means[domain] = batch.mean_value();
            report.set_metric("eq1." + name + ".mean", means[domain]);
            report.set_metric("eq1." + name + ".samples", static_cast<double>(batch.suppression.size(0)));
            report.set_metric("eq1." + name + ".skipped", static_cast<double>(batch.skipped));
            const auto sup = batch.suppression.to(torch::kDouble).contiguous();
            const auto pro = batch.promotion.to(torch::kDouble).contiguous();
            for (int64_t k = 0; k < sup.size(0); ++k) {
                const auto sample = batch.sample_index[k].item<int64_t>();
                for (int64_t i = 0; i < sup.size(1); ++i) {
                    patches << name << ',' << sample << ',' << i << ',' << fixed4(sup[k][i].item<double>()) << ','
                            << fixed4(pro[k][i].item<double>()) << '\n';
                }
            }
            const auto values = to_vector(torch::cat({sup.flatten(), pro.flatten()}));
            const auto kde = kde_summary(values);
            NamedCurve curve{name, kde.support, kde.density};
            for (size_t i = 0; i < kde.support.size(); ++i) {
                kde_csv << name << ',' << fixed4(kde.support[i]) << ',' << fixed4(kde.density[i]) << '\n';
            }
            curves.push_back(std::move(curve));
            for (int64_t k = 0; k < std::min<int64_t>(2, sup.size(0)); ++k) {
                const auto sample = batch.sample_index[k].item<int64_t>();
                const auto stem = "heatmap_" + name + "_" + std::to_string(sample);
                write_patch_heatmap(dir / "plots" / (stem + "_suppression.svg"), images[sample], sup[k],
                                    config_.grid, name + " suppression, sample " + std::to_string(sample));
                write_patch_heatmap(dir / "plots" / (stem + "_promotion.svg"), images[sample], pro[k], config_.grid,
                                    name + " promotion, sample " + std::to_string(sample));
            }
        }
        report.set_metric("eq1.frequency.mean", 0.5 * (means[PatchDomain::amplitude] + means[PatchDomain::phase]));
        write_text(dir / "patch_values.csv", patches.str());
        write_text(dir / "kde.csv", kde_csv.str());
        write_line_plot(dir / "plots" / "kde.svg", "Patch difference density", curves, "difference value",
                        "density");
    });

    const auto& test = detection_images().test;
    const auto normal_rows = torch::arange(std::min(limit, test.size()), torch::kLong);
    const auto normal = test.images.index_select(0, normal_rows);

    timed("analysis/ctr", report, [&] {
        // The configured variant fills ctr.*; the other single-spectrum
        // variant is measured alongside under ctr.<recon>.*.
        const auto primary = config_.strength_method.recon;
        std::vector<ReconVariant> variants{primary};
        for (const auto other : {ReconVariant::amp, ReconVariant::pha}) {
            if (other != primary && primary != ReconVariant::pixel) variants.push_back(other);
        }
        std::ostringstream csv;
        csv << "recon,population,lc,li,lc_rate\n";
        for (const auto recon : variants) {
            const std::string prefix = recon == primary ? "ctr." : "ctr." + to_string(recon) + ".";
            const auto vaes = vaes_for(recon);
            const auto normal_record = ctr_scores(v, normal, reconstruct(vaes, normal, recon), "normal");
            report.set_metric(prefix + "normal.lc_rate", normal_record.lc_rate());
            report.set_metric(prefix + "normal.count",
                              static_cast<double>(normal_record.lc_count + normal_record.li_count));
            csv << to_string(recon) << ",normal," << normal_record.lc_count << ',' << normal_record.li_count << ','
                << fixed4(normal_record.lc_rate()) << '\n';
            for (const double eps : config_.strengths) {
                const auto label = strength_label(eps);
                const auto a = archive(strength_attack(eps), nullptr, Side::test);
                const auto rows = fooled_rows(a, limit);
                if (rows.size(0) == 0) {
                    report.failures.push_back("analysis/ctr/" + label + ": no fooled sample");
                    continue;
                }
                const auto adv = a.adversarial.index_select(0, rows);
                const auto record = ctr_scores(v, adv, reconstruct(vaes, adv, recon), "adversarial " + label);
                report.set_metric(prefix + label + ".lc_rate", record.lc_rate());
                report.set_metric(prefix + label + ".count", static_cast<double>(record.lc_count + record.li_count));
                report.set_metric(prefix + label + ".gap", normal_record.lc_rate() - record.lc_rate());
                csv << to_string(recon) << ",adversarial " << label << ',' << record.lc_count << ','
                    << record.li_count << ',' << fixed4(record.lc_rate()) << '\n';
            }
        }
        write_text(dir / "ctr.csv", csv.str());
    });

    timed("analysis/similarity", report, [&] {
        const auto& method = config_.method;
        const auto vaes = vaes_for(method.recon);
        const auto ex = extractor(method);
        const std::string layer = "penultimate";
        std::ostringstream csv;
        csv << "population,mean,used,excluded\n";
        const auto s = feature_cosine_similarity(ex, normal, reconstruct(vaes, normal, method.recon), layer);
        report.set_metric("similarity.normal", s.mean);
        csv << "normal," << fixed4(s.mean) << ',' << s.used << ',' << s.excluded << '\n';
        for (const auto& setting : settings()) {
            std::vector<const ThreatModelSpec*> threats;
            if (setting == kWhiteBox) threats.push_back(nullptr);
            for (const auto& t : config_.threats) {
                if (t.setting() == setting) threats.push_back(&t);
            }
            double total = 0.0;
            for (const auto* threat : threats) {
                const auto a = archive(reference, threat, Side::test);
                const auto rows = fooled_rows(a, limit);
                require(rows.size(0) > 0, "no fooled sample for similarity in ", setting);
                const auto adv = a.adversarial.index_select(0, rows);
                const auto r = feature_cosine_similarity(ex, adv, reconstruct(vaes, adv, method.recon), layer);
                total += r.mean;
                csv << (threat ? threat->id() : kWhiteBox) << ',' << fixed4(r.mean) << ',' << r.used << ','
                    << r.excluded << '\n';
            }
            report.set_metric("similarity." + setting, total / static_cast<double>(threats.size()));
        }
        write_text(dir / "similarity.csv", csv.str());
    });

    timed("analysis/probe", report, [&] {
        const auto& method = config_.method;
        const auto vaes = vaes_for(method.recon);
        const auto ex = extractor(method);
        const std::string layer = "penultimate";
        auto lc_pair = [&](const ImageBatch& images) {
            const auto rec = reconstruct(vaes, images, method.recon);
            const auto keep = label_consistency(v, images, rec).nonzero().flatten();
            return std::make_pair(ex.flat_activation(images.index_select(0, keep), layer),
                                  ex.flat_activation(rec.index_select(0, keep), layer));
        };
        const auto a = archive(reference, nullptr, Side::test);
        const auto [nb, na] = lc_pair(normal);
        const auto [ab, aa] = lc_pair(a.adversarial.index_select(0, fooled_rows(a, limit)));
        const auto result = inner_class_probe(nb, na, ab, aa, derive_seed("probe"));
        report.set_metric("probe.normal_accuracy", result.normal_accuracy);
        report.set_metric("probe.adversarial_accuracy", result.adversarial_accuracy);
        report.set_metric("probe.normal_count", static_cast<double>(nb.size(0)));
        report.set_metric("probe.adversarial_count", static_cast<double>(ab.size(0)));
    });
}

void Pipeline::controls(EvaluationReport& report) {
    const auto& method = config_.method;
    const auto reference = reference_attack();
    timed("controls/zero_epsilon", report, [&] {
        auto zero = reference;
        zero.epsilon = 0.0;
        zero.step_size = 0.0;
        const auto det = detector(method, zero);
        report.set_metric("control.zero_epsilon.auc",
                          detection_auc(det, detection_set(method, zero, nullptr, Side::test)));
    });
    timed("controls/shuffled_labels", report, [&] {
        auto train = detection_set(method, reference, nullptr, Side::train);
        auto generator = make_generator(derive_seed("shuffled_labels"));
        train.labels = train.labels.index_select(0, torch::randperm(train.size(), generator, torch::kLong));
        const auto det = detector_for(method.name() + "__" + attack_key(reference) + "__shuffled-labels", train,
                                      reference.family, method.family, extractor(method).fingerprint());
        report.set_metric("control.shuffled_labels.auc",
                          detection_auc(det, detection_set(method, reference, nullptr, Side::test)));
    });
}

EvaluationReport Pipeline::new_report() const {
    EvaluationReport report;
    std::vector<std::string> attacks;
    for (const auto& a : config_.attacks) attacks.push_back(a.id());
    std::vector<std::string> threats;
    for (const auto& t : config_.threats) threats.push_back(t.id());
    report.header = {{"config_hash", hash_},
                     {"seed", config_.seed},
                     {"dataset", to_string(config_.dataset)},
                     {"method", config_.method.name()},
                     {"strength_method", config_.strength_method.name()},
                     {"composition", to_string(config_.composition)},
                     {"strict_determinism", config_.strict_determinism},
                     {"attacks", attacks},
                     {"threats", threats},
                     {"settings", settings()},
                     {"score", "1 - P(clean)"},
                     {"durations", "timings.json in the workspace"}};
    return report;
}

EvaluationReport Pipeline::run_all() {
    auto report = new_report();
    timed("bad_matrix", report, [&] { run_bad_matrix(report); });
    timed("layers", report, [&] { sweep_layers(report); });
    timed("strengths", report, [&] { sweep_strengths(report); });
    timed("analysis", report, [&] { analyze(report); });
    timed("controls", report, [&] { controls(report); });
    // Cached archives skip the threat models; load them so the report lists
    // the same classifiers whether or not the run started from scratch.
    victim();
    for (const auto& t : config_.threats) threat_models(t);
    if (config_.method.extractor == ExtractorVariant::online ||
        config_.strength_method.extractor == ExtractorVariant::online) {
        pretrained();
    }
    record_models(report);
    write_timings();
    return report;
}

void Pipeline::record_models(EvaluationReport& report) const {
    for (const auto& [key, acc] : model_accuracy_) report.set_metric("model." + key + ".clean_accuracy", acc);
}

void Pipeline::write_timings() const {
    nlohmann::json j = timings_;
    write_text(workspace_ / "timings.json", j.dump(2) + "\n");
}

}  // namespace recdet
