#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance run. They are deliberately naive: explicit loops, one item at a time.

#include <complex>
#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "recdet/analysis.hpp"

namespace oracle {

/// Textbook double-loop DFT of one [H, W] plane, row-major.
std::vector<std::complex<double>> naive_dft(const torch::Tensor& plane);

/// Sum over positive/negative pairs of [s_p > s_n] + 0.5 [s_p == s_n], over P * N.
double pairwise_auc(const std::vector<double>& scores, const std::vector<bool>& positive);

/// Hybrid i of (x, delta) built by explicit loops over the patch: the pixel
/// perturbation added on the patch, or the patch's amplitude / phase taken from x + delta.
torch::Tensor hybrid(const torch::Tensor& x, const torch::Tensor& delta, int patch, recdet::PatchDomain domain,
                     recdet::PatchGrid grid);

/// Toy CNN (width 4) used by the patch-difference checks.
recdet::Classifier toy_model(std::uint64_t seed, torch::Dtype dtype = torch::kFloat);

struct Comparison {
    double worst = 0.0;     // largest absolute deviation from the oracle
    int64_t compared = 0;   // items compared
    int64_t skipped = 0;    // items the implementation legitimately skipped
};

/// dft_decompose on `images` random 4x4x3 inputs against naive_dft.
Comparison dft_against_naive(int64_t images, std::uint64_t seed);
/// max |recompose(decompose(x)) - x| over `images` random 32x32x3 inputs.
Comparison dft_round_trip(int64_t images, std::uint64_t seed);
/// evaluate_auc against pairwise_auc on `trials` sets of `size` scores with injected ties.
Comparison auc_against_pairwise(int trials, int size, std::uint64_t seed);
/// difference_maps on a double-precision toy CNN, 8x8 inputs, 2x2 grid,
/// against per-hybrid evaluation, for one domain.
Comparison patch_differences_against_hybrids(int64_t samples, recdet::PatchDomain domain, std::uint64_t seed);

}  // namespace oracle
