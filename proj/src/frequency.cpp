#include "recdet/frequency.hpp"

#include <cmath>
#include <numbers>

namespace recdet {

namespace {
constexpr std::int64_t kSpatialDims[] = {-2, -1};

torch::Tensor wrap_phase(const torch::Tensor& phase) {
    // atan2 yields -pi for (-0, negative); fold it onto +pi so the range is (-pi, pi].
    const double pi = std::numbers::pi;
    return torch::where(phase <= -pi, phase + 2.0 * pi, phase);
}
}  // namespace

Recomposition parse_recomposition(std::string_view name) {
    if (name == "pha") return Recomposition::pha;
    if (name == "amp") return Recomposition::amp;
    if (name == "joint") return Recomposition::joint;
    throw ValidationError("unknown recomposition variant '" + std::string(name) + "'");
}

std::string to_string(Recomposition r) {
    switch (r) {
        case Recomposition::pha: return "pha";
        case Recomposition::amp: return "amp";
        case Recomposition::joint: return "joint";
    }
    throw ValidationError("invalid recomposition value");
}

PatchDomain parse_patch_domain(std::string_view name) {
    if (name == "pixel") return PatchDomain::pixel;
    if (name == "amplitude") return PatchDomain::amplitude;
    if (name == "phase") return PatchDomain::phase;
    throw ValidationError("unknown patch domain '" + std::string(name) + "'");
}

std::string to_string(PatchDomain d) {
    switch (d) {
        case PatchDomain::pixel: return "pixel";
        case PatchDomain::amplitude: return "amplitude";
        case PatchDomain::phase: return "phase";
    }
    throw ValidationError("invalid patch domain value");
}

SpectrumPair dft_decompose(const ImageBatch& images) {
    check_image_batch(images);
    const auto spectrum = torch::fft::fft2(images, c10::nullopt, kSpatialDims);
    const auto real = torch::real(spectrum);
    const auto imag = torch::imag(spectrum);
    return {torch::sqrt(real * real + imag * imag), wrap_phase(torch::atan2(imag, real))};
}

Recomposed idft_recompose_detailed(const torch::Tensor& amplitude,
                                   const torch::Tensor& phase,
                                   const RecomposeOptions& options) {
    check_same_shape(amplitude, phase, "idft_recompose");
    require(amplitude.dim() >= 2, "idft_recompose: need at least two spatial dims");

    const auto spectrum = torch::complex(amplitude * torch::cos(phase), amplitude * torch::sin(phase));
    const auto inverse = torch::fft::ifft2(spectrum, c10::nullopt, kSpatialDims);

    Recomposed out;
    out.image = torch::real(inverse);
    out.imaginary_residue =
        inverse.numel() == 0 ? 0.0 : torch::imag(inverse).detach().abs().max().item<double>();
    if (options.expect_real && out.imaginary_residue > options.residue_tolerance) {
        TORCH_WARN("idft_recompose: imaginary residue ", out.imaginary_residue,
                   " exceeds ", options.residue_tolerance, " for a spectrum expected to be real");
    }
    if (options.clamp) {
        out.image = out.image.clamp(0.0, 1.0);
    }
    return out;
}

ImageBatch idft_recompose(const torch::Tensor& amplitude,
                          const torch::Tensor& phase,
                          const RecomposeOptions& options) {
    return idft_recompose_detailed(amplitude, phase, options).image;
}

ImageBatch recompose_variant(const SpectrumPair& original,
                             const SpectrumPair& reconstructed,
                             Recomposition variant,
                             const RecomposeOptions& options) {
    check_same_shape(original.amplitude, reconstructed.amplitude, "recompose_variant amplitude");
    check_same_shape(original.phase, reconstructed.phase, "recompose_variant phase");
    switch (variant) {
        case Recomposition::pha:
            return idft_recompose(original.amplitude, reconstructed.phase, options);
        case Recomposition::amp:
            return idft_recompose(reconstructed.amplitude, original.phase, options);
        case Recomposition::joint:
            return idft_recompose(reconstructed.amplitude, reconstructed.phase, options);
    }
    throw ValidationError("recompose_variant: unknown variant");
}

torch::Tensor patch_mask(int64_t height, int64_t width, PatchGrid grid, int patch_index) {
    require(grid.rows > 0 && grid.cols > 0, "patch grid must be positive, got ", grid.rows, "x", grid.cols);
    require(height % grid.rows == 0 && width % grid.cols == 0, "patch grid ", grid.rows, "x", grid.cols,
            " does not tile ", height, "x", width, " evenly");
    require(patch_index >= 0 && patch_index < grid.count(), "patch index ", patch_index,
            " out of range for ", grid.count(), " patches");
    const int64_t ph = height / grid.rows;
    const int64_t pw = width / grid.cols;
    const int64_t r0 = (patch_index / grid.cols) * ph;
    const int64_t c0 = (patch_index % grid.cols) * pw;
    auto mask = torch::zeros({height, width}, torch::kBool);
    mask.slice(0, r0, r0 + ph).slice(1, c0, c0 + pw).fill_(true);
    return mask;
}

ImageBatch patch_substitute(const ImageBatch& base,
                            const ImageBatch& donor,
                            int patch_index,
                            PatchDomain domain,
                            PatchGrid grid) {
    check_image_batch(base, "patch_substitute base");
    check_image_batch(donor, "patch_substitute donor");
    check_same_shape(base, donor, "patch_substitute");
    const auto mask = patch_mask(base.size(2), base.size(3), grid, patch_index);

    if (domain == PatchDomain::pixel) {
        return base + donor * mask.to(base.scalar_type());
    }

    auto base_spec = dft_decompose(base);
    const auto donor_spec = dft_decompose(donor);
    if (domain == PatchDomain::amplitude) {
        base_spec.amplitude = torch::where(mask, donor_spec.amplitude, base_spec.amplitude);
    } else {
        base_spec.phase = torch::where(mask, donor_spec.phase, base_spec.phase);
    }
    // Swapping one block breaks Hermitian symmetry, so a residue is expected here.
    return idft_recompose(base_spec.amplitude, base_spec.phase, {.clamp = false, .expect_real = false});
}

}  // namespace recdet
