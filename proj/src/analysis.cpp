#include "recdet/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace recdet {

namespace {

struct DifferenceCore {
    torch::Tensor suppression, promotion;
};

// Rows of `images`/`deltas` are attributed against explicit true/target labels.
DifferenceCore patch_differences(const ImageBatch& images, const torch::Tensor& deltas, Classifier& model,
                                 const torch::Tensor& true_labels, const torch::Tensor& target_labels,
                                 PatchDomain domain, PatchGrid grid, double xi, int64_t batch_size) {
    const auto donor = domain == PatchDomain::pixel ? deltas : images + deltas;
    const auto base = predict_logits(model, images, batch_size);
    const auto o = true_labels.unsqueeze(1);
    const auto t = target_labels.unsqueeze(1);
    const auto base_o = base.gather(1, o).squeeze(1);
    const auto base_t = base.gather(1, t).squeeze(1);

    std::vector<torch::Tensor> sup, pro;
    for (int i = 0; i < grid.count(); ++i) {
        const auto hybrid = patch_substitute(images, donor, i, domain, grid);
        const auto logits = predict_logits(model, hybrid, batch_size);
        sup.push_back((base_o - logits.gather(1, o).squeeze(1)).clamp_min(xi));
        pro.push_back((logits.gather(1, t).squeeze(1) - base_t).clamp_min(xi));
    }
    return {torch::stack(sup, 1), torch::stack(pro, 1)};
}

}  // namespace

std::optional<PatchDifferenceMap> difference_map(const ImageBatch& image, const torch::Tensor& delta,
                                                 Classifier& model, int64_t true_label, int64_t target_label,
                                                 PatchDomain domain, PatchGrid grid, double xi) {
    require(xi > 0.0, "difference_map: xi must be positive");
    const auto x = image.dim() == 3 ? image.unsqueeze(0) : image;
    const auto d = delta.dim() == 3 ? delta.unsqueeze(0) : delta;
    check_image_batch(x, "difference_map image");
    check_same_shape(x, d, "difference_map delta");
    require(x.size(0) == 1, "difference_map takes a single image");
    if (true_label == target_label) {
        return std::nullopt;
    }
    const auto core = patch_differences(x, d, model, torch::tensor({true_label}), torch::tensor({target_label}),
                                        domain, grid, xi, 1);
    return PatchDifferenceMap{core.suppression[0], core.promotion[0], domain, grid, xi};
}

double DifferenceBatch::mean_value() const {
    require(suppression.numel() > 0, "difference batch is empty");
    return 0.5 * (suppression.to(torch::kDouble).mean().item<double>() +
                  promotion.to(torch::kDouble).mean().item<double>());
}

DifferenceBatch difference_maps(const ImageBatch& images, const torch::Tensor& deltas, Classifier& model,
                                const torch::Tensor& true_labels, PatchDomain domain, PatchGrid grid, double xi,
                                int64_t batch_size) {
    require(xi > 0.0, "difference_maps: xi must be positive");
    check_image_batch(images, "difference_maps images");
    check_same_shape(images, deltas, "difference_maps deltas");
    require(true_labels.dim() == 1 && true_labels.size(0) == images.size(0), "difference_maps: labels must be [N]");

    const auto targets = predict(model, (images + deltas), batch_size);
    const auto keep = targets.ne(true_labels).nonzero().flatten();
    DifferenceBatch out;
    out.domain = domain;
    out.grid = grid;
    out.xi = xi;
    out.skipped = images.size(0) - keep.size(0);
    out.sample_index = keep;
    if (keep.size(0) == 0) {
        out.suppression = torch::empty({0, grid.count()});
        out.promotion = torch::empty({0, grid.count()});
        return out;
    }
    const auto core = patch_differences(images.index_select(0, keep), deltas.index_select(0, keep), model,
                                        true_labels.index_select(0, keep), targets.index_select(0, keep), domain,
                                        grid, xi, batch_size);
    out.suppression = core.suppression;
    out.promotion = core.promotion;
    return out;
}

double silverman_bandwidth(const std::vector<double>& values) {
    require(values.size() >= 2, "silverman_bandwidth needs at least two values");
    const auto n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1.0));

    auto sorted = values;
    std::sort(sorted.begin(), sorted.end());
    auto quantile = [&](double q) {
        const double pos = q * (n - 1.0);
        const auto lo = static_cast<size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, sorted.size() - 1);
        return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
    };
    const double iqr = quantile(0.75) - quantile(0.25);
    const double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
    return 0.9 * spread * std::pow(n, -0.2);
}

KdeSummary kde_summary(const std::vector<double>& values, double bandwidth, int points) {
    require(values.size() >= 2, "kde_summary needs at least two values");
    require(points >= 2, "kde_summary needs at least two support points");
    for (double v : values) require(std::isfinite(v), "kde_summary: non-finite value");

    KdeSummary out;
    const auto n = static_cast<double>(values.size());
    out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it, hi = *hi_it;
    out.bandwidth = bandwidth > 0.0 ? bandwidth : silverman_bandwidth(values);
    if (lo == hi || out.bandwidth <= 0.0) {
        out.degenerate = true;
        out.bandwidth = 0.0;
        out.support = {out.mean};
        out.density = {1.0};
        return out;
    }

    const double h = out.bandwidth;
    const double start = lo - 3.0 * h, stop = hi + 3.0 * h;
    const double step = (stop - start) / static_cast<double>(points - 1);
    const double norm = 1.0 / (n * h * std::sqrt(2.0 * M_PI));
    out.support.resize(points);
    out.density.resize(points);
    for (int k = 0; k < points; ++k) {
        const double s = start + step * k;
        double acc = 0.0;
        for (double v : values) {
            const double u = (s - v) / h;
            acc += std::exp(-0.5 * u * u);
        }
        out.support[k] = s;
        out.density[k] = acc * norm;
    }
    return out;
}

SimilaritySummary feature_cosine_similarity(const FeatureExtractor& extractor, const ImageBatch& originals,
                                            const ImageBatch& reconstructions, const std::string& layer) {
    check_same_shape(originals, reconstructions, "feature_cosine_similarity");
    require(originals.size(0) > 0, "feature_cosine_similarity: empty batch");
    const auto a = extractor.flat_activation(originals, layer).to(torch::kDouble);
    const auto b = extractor.flat_activation(reconstructions, layer).to(torch::kDouble);
    const auto na = a.norm(2, 1), nb = b.norm(2, 1);
    const auto ok = na.gt(0).logical_and(nb.gt(0));
    SimilaritySummary out;
    out.used = ok.sum().item<int64_t>();
    out.excluded = originals.size(0) - out.used;
    if (out.used > 0) {
        const auto cos = (a * b).sum(1) / (na * nb);
        out.mean = cos.masked_select(ok).mean().item<double>();
    }
    return out;
}

double CtrRecord::lc_rate() const {
    const auto total = lc_count + li_count;
    return total == 0 ? 0.0 : static_cast<double>(lc_count) / static_cast<double>(total);
}

double CtrRecord::li_rate() const {
    const auto total = lc_count + li_count;
    return total == 0 ? 0.0 : static_cast<double>(li_count) / static_cast<double>(total);
}

torch::Tensor label_consistency(Classifier& victim, const ImageBatch& originals, const ImageBatch& reconstructions) {
    check_same_shape(originals, reconstructions, "label_consistency");
    require(originals.size(0) > 0, "label_consistency: empty batch");
    return predict(victim, originals).eq(predict(victim, reconstructions));
}

CtrRecord ctr_scores(Classifier& victim, const ImageBatch& originals, const ImageBatch& reconstructions,
                     const std::string& population) {
    const auto lc = label_consistency(victim, originals, reconstructions);
    CtrRecord r;
    r.lc_count = lc.sum().item<int64_t>();
    r.li_count = lc.size(0) - r.lc_count;
    r.population = population;
    return r;
}

namespace {

torch::Tensor draw(const torch::Tensor& candidates, int64_t count, torch::Generator& generator) {
    const auto n = candidates.size(0);
    count = std::min(count, n);
    return candidates.index_select(0, torch::randperm(n, generator, torch::kLong).slice(0, 0, count));
}

}  // namespace

BalancedPools ctr_balance_sample(const std::vector<StrengthPool>& pools, std::uint64_t seed) {
    require(!pools.empty(), "ctr_balance_sample: no strength pools");
    auto generator = make_generator(seed);

    struct Cells {
        torch::Tensor clean, noisy, lc, li;
    };
    std::vector<Cells> cells;
    int64_t smallest_cell = std::numeric_limits<int64_t>::max();
    int64_t smallest_pool = std::numeric_limits<int64_t>::max();
    for (const auto& pool : pools) {
        pool.set.validate();
        const auto adv = pool.set.labels.eq(2).nonzero().flatten();
        require(pool.adversarial_lc.dim() == 1 && pool.adversarial_lc.size(0) == adv.size(0),
                "ctr_balance_sample: one LC flag per adversarial row is required (epsilon=", pool.epsilon, ")");
        const auto lc_flag = pool.adversarial_lc.to(torch::kBool);
        Cells c{pool.set.labels.eq(0).nonzero().flatten(), pool.set.labels.eq(1).nonzero().flatten(),
                adv.masked_select(lc_flag), adv.masked_select(lc_flag.logical_not())};
        smallest_cell = std::min({smallest_cell, c.lc.size(0), c.li.size(0)});
        smallest_pool = std::min(smallest_pool, adv.size(0));
        cells.push_back(std::move(c));
    }

    BalancedPools out;
    out.fallback = smallest_cell == 0;
    if (out.fallback) {
        TORCH_WARN("ctr_balance_sample: an (epsilon, LC/LI) cell is empty; drawing ", smallest_pool,
                   " adversarial rows per strength in natural LC/LI proportion");
    }

    std::vector<DetectionSet> balanced, total;
    for (size_t p = 0; p < pools.size(); ++p) {
        const auto& c = cells[p];
        torch::Tensor adv_rows;
        if (!out.fallback) {
            const auto lc = draw(c.lc, smallest_cell, generator);
            const auto li = draw(c.li, smallest_cell, generator);
            out.cell_counts.push_back(lc.size(0));
            out.cell_counts.push_back(li.size(0));
            adv_rows = torch::cat({lc, li});
        } else {
            adv_rows = draw(torch::cat({c.lc, c.li}), smallest_pool, generator);
            const auto lc_drawn = torch::isin(adv_rows, c.lc).sum().item<int64_t>();
            out.cell_counts.push_back(lc_drawn);
            out.cell_counts.push_back(adv_rows.size(0) - lc_drawn);
        }
        const auto count = adv_rows.size(0);
        const auto rows = torch::cat({draw(c.clean, count, generator), draw(c.noisy, count, generator), adv_rows});
        balanced.push_back(pools[p].set.subset(std::get<0>(torch::sort(rows))));
        total.push_back(pools[p].set);
    }
    out.balanced = concat_sets(balanced);
    out.total = concat_sets(total);
    return out;
}

namespace {

// Logistic regression on standardized features, full-batch gradient descent.
double fit_probe(const torch::Tensor& train_x, const torch::Tensor& train_y, const torch::Tensor& test_x,
                 const torch::Tensor& test_y) {
    const auto mean = train_x.mean(0);
    auto sd = train_x.std(0, false);
    sd = torch::where(sd > 1e-12, sd, torch::ones_like(sd));
    const auto xtr = (train_x - mean) / sd;
    const auto xte = (test_x - mean) / sd;

    auto w = torch::zeros({xtr.size(1)}, torch::requires_grad());
    auto b = torch::zeros({1}, torch::requires_grad());
    torch::optim::LBFGS opt({w, b}, torch::optim::LBFGSOptions(1.0).max_iter(200).line_search_fn("strong_wolfe"));
    const double l2 = 1e-3;
    auto closure = [&]() {
        opt.zero_grad();
        const auto logits = torch::mv(xtr, w) + b;
        auto loss = torch::binary_cross_entropy_with_logits(logits, train_y) + l2 * w.pow(2).sum();
        loss.backward();
        return loss;
    };
    opt.step(closure);
    torch::NoGradGuard no_grad;
    const auto predicted = (torch::mv(xte, w) + b).gt(0).to(torch::kFloat);
    return predicted.eq(test_y).to(torch::kDouble).mean().item<double>();
}

}  // namespace

double linear_probe_accuracy(const torch::Tensor& before, const torch::Tensor& after, std::uint64_t seed) {
    check_same_shape(before, after, "linear_probe_accuracy");
    require(before.dim() == 2, "linear_probe_accuracy: features must be [N, D]");
    require(before.size(0) >= kProbeMinimumSamples, "inner-class probe needs at least ", kProbeMinimumSamples,
            " samples per population, got ", before.size(0));
    auto generator = make_generator(seed);
    const int64_t n = before.size(0);
    // Split by pair so a sample and its reconstruction land on the same side.
    const auto perm = torch::randperm(n, generator, torch::kLong);
    const auto n_train = static_cast<int64_t>(std::llround(0.7 * static_cast<double>(n)));
    const auto tr = perm.slice(0, 0, n_train), te = perm.slice(0, n_train, n);
    auto take = [&](const torch::Tensor& idx) {
        const auto x = torch::cat({before.index_select(0, idx), after.index_select(0, idx)}).to(torch::kFloat);
        const auto y = torch::cat({torch::zeros({idx.size(0)}), torch::ones({idx.size(0)})});
        return std::make_pair(x, y);
    };
    const auto [xtr, ytr] = take(tr);
    const auto [xte, yte] = take(te);
    return fit_probe(xtr, ytr, xte, yte);
}

ProbeResult inner_class_probe(const torch::Tensor& normal_before, const torch::Tensor& normal_after,
                              const torch::Tensor& adversarial_before, const torch::Tensor& adversarial_after,
                              std::uint64_t seed) {
    return {linear_probe_accuracy(normal_before, normal_after, seed),
            linear_probe_accuracy(adversarial_before, adversarial_after, seed)};
}

RankTest mann_whitney_greater(const std::vector<double>& first, const std::vector<double>& second) {
    require(!first.empty() && !second.empty(), "mann_whitney_greater: both samples must be non-empty");
    std::vector<std::pair<double, int>> all;
    all.reserve(first.size() + second.size());
    for (double v : first) all.emplace_back(v, 0);
    for (double v : second) all.emplace_back(v, 1);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    const double n1 = static_cast<double>(first.size()), n2 = static_cast<double>(second.size());
    const double n = n1 + n2;
    double rank_sum = 0.0, tie_term = 0.0;
    for (size_t i = 0; i < all.size();) {
        size_t j = i;
        while (j < all.size() && all[j].first == all[i].first) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);
        const double t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        for (size_t k = i; k < j; ++k) {
            if (all[k].second == 0) rank_sum += midrank;
        }
        i = j;
    }
    RankTest r;
    r.u = rank_sum - n1 * (n1 + 1.0) / 2.0;
    const double mean = n1 * n2 / 2.0;
    const double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if (var <= 0.0) {
        r.z = 0.0;
        r.p_value = 1.0;
        return r;
    }
    r.z = (r.u - mean) / std::sqrt(var);
    r.p_value = 0.5 * std::erfc(r.z / std::sqrt(2.0));
    return r;
}

std::vector<double> to_vector(const torch::Tensor& t) {
    const auto d = t.detach().to(torch::kDouble).contiguous().flatten();
    return {d.data_ptr<double>(), d.data_ptr<double>() + d.numel()};
}

}  // namespace recdet
