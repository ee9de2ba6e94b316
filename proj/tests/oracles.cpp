#include "oracles.hpp"

#include <cmath>
#include <random>

#include "recdet/detector.hpp"
#include "recdet/frequency.hpp"

using namespace recdet;

namespace oracle {

std::vector<std::complex<double>> naive_dft(const torch::Tensor& plane) {
    const auto p = plane.to(torch::kDouble).contiguous();
    const int64_t H = p.size(0), W = p.size(1);
    const auto* v = p.data_ptr<double>();
    std::vector<std::complex<double>> out(static_cast<size_t>(H * W));
    for (int64_t u = 0; u < H; ++u) {
        for (int64_t k = 0; k < W; ++k) {
            std::complex<double> acc = 0.0;
            for (int64_t y = 0; y < H; ++y) {
                for (int64_t x = 0; x < W; ++x) {
                    const double angle =
                        -2.0 * M_PI * (static_cast<double>(u * y) / H + static_cast<double>(k * x) / W);
                    acc += v[y * W + x] * std::complex<double>(std::cos(angle), std::sin(angle));
                }
            }
            out[static_cast<size_t>(u * W + k)] = acc;
        }
    }
    return out;
}

double pairwise_auc(const std::vector<double>& s, const std::vector<bool>& y) {
    double wins = 0.0, pairs = 0.0;
    for (size_t i = 0; i < s.size(); ++i) {
        if (!y[i]) continue;
        for (size_t j = 0; j < s.size(); ++j) {
            if (y[j]) continue;
            pairs += 1.0;
            wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    }
    return wins / pairs;
}

torch::Tensor hybrid(const torch::Tensor& x, const torch::Tensor& delta, int patch, PatchDomain domain,
                     PatchGrid grid) {
    const int64_t H = x.size(1), W = x.size(2);
    const int64_t ph = H / grid.rows, pw = W / grid.cols;
    const int64_t r0 = (patch / grid.cols) * ph, c0 = (patch % grid.cols) * pw;
    if (domain == PatchDomain::pixel) {
        auto h = x.clone();
        for (int64_t c = 0; c < x.size(0); ++c)
            for (int64_t r = r0; r < r0 + ph; ++r)
                for (int64_t q = c0; q < c0 + pw; ++q) h[c][r][q] += delta[c][r][q];
        return h;
    }
    const auto X = torch::fft::fft2(x);
    const auto A = torch::fft::fft2(x + delta);
    auto amp = X.abs(), pha = torch::angle(X);
    const auto donor_amp = A.abs(), donor_pha = torch::angle(A);
    for (int64_t c = 0; c < x.size(0); ++c)
        for (int64_t r = r0; r < r0 + ph; ++r)
            for (int64_t q = c0; q < c0 + pw; ++q) {
                if (domain == PatchDomain::amplitude) amp[c][r][q] = donor_amp[c][r][q];
                else pha[c][r][q] = donor_pha[c][r][q];
            }
    return torch::real(torch::fft::ifft2(torch::polar(amp, pha)));
}

Classifier toy_model(std::uint64_t seed, torch::Dtype dtype) {
    ClassifierConfig cc;
    cc.architecture = Architecture::toy_cnn;
    cc.width = 4;
    torch::manual_seed(seed);
    Classifier m(cc);
    m->to(dtype);
    m->eval();
    return m;
}

Comparison dft_against_naive(int64_t images, std::uint64_t seed) {
    torch::manual_seed(seed);
    const auto batch = torch::rand({images, 3, 4, 4});
    const auto spec = dft_decompose(batch);
    Comparison out;
    for (int64_t n = 0; n < images; ++n) {
        for (int64_t c = 0; c < 3; ++c) {
            const auto ref = naive_dft(batch[n][c]);
            const auto amp = spec.amplitude[n][c].to(torch::kDouble).contiguous();
            const auto pha = spec.phase[n][c].to(torch::kDouble).contiguous();
            for (int64_t i = 0; i < 16; ++i) {
                const auto got = std::polar(amp.data_ptr<double>()[i], pha.data_ptr<double>()[i]);
                out.worst = std::max(out.worst, std::abs(got - ref[static_cast<size_t>(i)]));
                ++out.compared;
            }
        }
    }
    return out;
}

Comparison dft_round_trip(int64_t images, std::uint64_t seed) {
    torch::manual_seed(seed);
    const auto batch = torch::rand({images, 3, 32, 32});
    const auto spec = dft_decompose(batch);
    const auto back = idft_recompose(spec.amplitude, spec.phase);
    return {(back - batch).abs().max().item<double>(), images, 0};
}

Comparison auc_against_pairwise(int trials, int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> coarse(0, 20);
    std::bernoulli_distribution coin(0.4), tie(0.3);
    std::normal_distribution<double> normal;
    Comparison out;
    for (int trial = 0; trial < trials; ++trial) {
        std::vector<double> s(static_cast<size_t>(size));
        std::vector<bool> y(static_cast<size_t>(size));
        for (size_t i = 0; i < s.size(); ++i) {
            y[i] = coin(rng);
            s[i] = tie(rng) ? coarse(rng) / 20.0 : normal(rng) + (y[i] ? 0.5 : 0.0);
        }
        y[0] = true;
        y[1] = false;
        out.worst = std::max(out.worst, std::abs(evaluate_auc(s, y) - pairwise_auc(s, y)));
        ++out.compared;
    }
    return out;
}

Comparison patch_differences_against_hybrids(int64_t samples, PatchDomain domain, std::uint64_t seed) {
    auto model = toy_model(seed, torch::kDouble);
    const PatchGrid grid{2, 2};
    const double xi = 1e-3;
    torch::manual_seed(seed + 1);
    const auto images = torch::rand({samples, 3, 8, 8}, torch::kDouble);
    const auto deltas = (torch::rand({samples, 3, 8, 8}, torch::kDouble) * 2 - 1) * 0.5;
    const auto labels = torch::randint(0, 10, {samples}, torch::kLong);
    const auto batch = difference_maps(images, deltas, model, labels, domain, grid, xi);

    torch::NoGradGuard no_grad;
    Comparison out;
    int64_t row = 0;
    for (int64_t n = 0; n < samples; ++n) {
        const auto x = images[n];
        const auto base = model->forward(x.unsqueeze(0))[0];
        const int64_t o = labels[n].item<int64_t>();
        const int64_t t = model->forward((x + deltas[n]).unsqueeze(0))[0].argmax().item<int64_t>();
        if (o == t) {
            ++out.skipped;
            continue;
        }
        if (row >= batch.sample_index.size(0) || batch.sample_index[row].item<int64_t>() != n) {
            out.worst = std::numeric_limits<double>::infinity();
            return out;
        }
        for (int i = 0; i < grid.count(); ++i) {
            const auto logits = model->forward(hybrid(x, deltas[n], i, domain, grid).unsqueeze(0))[0];
            const double d_o = std::max(base[o].item<double>() - logits[o].item<double>(), xi);
            const double d_t = std::max(logits[t].item<double>() - base[t].item<double>(), xi);
            out.worst = std::max(out.worst, std::abs(batch.suppression[row][i].item<double>() - d_o));
            out.worst = std::max(out.worst, std::abs(batch.promotion[row][i].item<double>() - d_t));
        }
        ++row;
        ++out.compared;
    }
    if (batch.skipped != out.skipped || row != batch.sample_index.size(0)) {
        out.worst = std::numeric_limits<double>::infinity();
    }
    return out;
}

}  // namespace oracle
