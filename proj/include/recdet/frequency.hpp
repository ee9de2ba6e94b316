#pragma once

#include <string>
#include <string_view>

#include "recdet/common.hpp"

namespace recdet {

/// Per-channel amplitude and phase of the 2D DFT of an image batch, in natural
/// (unshifted) frequency order. amplitude >= 0, phase in (-pi, pi].
struct SpectrumPair {
    torch::Tensor amplitude;
    torch::Tensor phase;
};

/// Which spectral components come from the reconstruction when recomposing.
///   pha:   IDFT(A_original, P_reconstructed)
///   amp:   IDFT(A_reconstructed, P_original)
///   joint: IDFT(A_reconstructed, P_reconstructed)
enum class Recomposition { pha, amp, joint };

enum class PatchDomain { pixel, amplitude, phase };

struct PatchGrid {
    int rows = 4;
    int cols = 4;

    int count() const { return rows * cols; }
};

Recomposition parse_recomposition(std::string_view name);
std::string to_string(Recomposition r);
PatchDomain parse_patch_domain(std::string_view name);
std::string to_string(PatchDomain d);

struct RecomposeOptions {
    /// Clamp the output to [0, 1]; meant for display and attack inputs.
    bool clamp = false;
    /// The spectrum came from real images, so the inverse transform should be
    /// (almost) real. A large imaginary residue is reported as a warning.
    bool expect_real = true;
    double residue_tolerance = 1e-3;
};

struct Recomposed {
    ImageBatch image;
    double imaginary_residue = 0.0;  // max |Im(IDFT)|
};

/// Forward 2D DFT per channel, split into amplitude and phase.
SpectrumPair dft_decompose(const ImageBatch& images);

/// Real part of IDFT(amplitude * exp(i * phase)). Differentiable in both inputs.
ImageBatch idft_recompose(const torch::Tensor& amplitude,
                          const torch::Tensor& phase,
                          const RecomposeOptions& options = {});

Recomposed idft_recompose_detailed(const torch::Tensor& amplitude,
                                   const torch::Tensor& phase,
                                   const RecomposeOptions& options = {});

ImageBatch recompose_variant(const SpectrumPair& original,
                             const SpectrumPair& reconstructed,
                             Recomposition variant,
                             const RecomposeOptions& options = {});

/// Boolean [H, W] mask of patch `patch_index` in a row-major rows x cols tiling.
torch::Tensor patch_mask(int64_t height, int64_t width, PatchGrid grid, int patch_index);

/// Hybrid input for the patch-wise difference measurement.
///
/// pixel:            base + donor restricted to the patch; `donor` is a perturbation.
/// amplitude/phase:  the named spectral component of `base` has its patch replaced by
///                   the donor image's, then the spectrum is inverse transformed
///                   (real part, not clamped).
ImageBatch patch_substitute(const ImageBatch& base,
                            const ImageBatch& donor,
                            int patch_index,
                            PatchDomain domain,
                            PatchGrid grid);

}  // namespace recdet
