#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include <torch/torch.h>

namespace recdet {

/// Base of every error the library raises on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input: wrong shape, non-finite values, unknown tags, inconsistent configs.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// A training loop produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// Corrupt or mismatched on-disk artifact (checkpoint, archive, dataset file).
class ArtifactError : public Error {
public:
    using Error::Error;
};

namespace detail {
template <typename... Args>
std::string concat(Args&&... args) {
    std::ostringstream os;
    (os << ... << std::forward<Args>(args));
    return os.str();
}
}  // namespace detail

template <typename... Args>
void require(bool condition, Args&&... message) {
    if (!condition) {
        throw ValidationError(detail::concat(std::forward<Args>(message)...));
    }
}

/// Images and spectra are NCHW float tensors. These aliases name the role,
/// the checks below enforce the contract at API boundaries.
using ImageBatch = torch::Tensor;

void check_image_batch(const torch::Tensor& images, std::string_view what = "images");
void check_finite(const torch::Tensor& t, std::string_view what);
void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, std::string_view what);

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

void set_log_level(LogLevel level);
LogLevel log_level();
void log_line(LogLevel level, const std::string& line);

template <typename... Args>
void log_info(Args&&... args) {
    if (log_level() <= LogLevel::info) {
        log_line(LogLevel::info, detail::concat(std::forward<Args>(args)...));
    }
}

template <typename... Args>
void log_warn(Args&&... args) {
    if (log_level() <= LogLevel::warn) {
        log_line(LogLevel::warn, detail::concat(std::forward<Args>(args)...));
    }
}

template <typename... Args>
void log_debug(Args&&... args) {
    if (log_level() <= LogLevel::debug) {
        log_line(LogLevel::debug, detail::concat(std::forward<Args>(args)...));
    }
}

/// Seeds torch's global generator and pins CPU execution to a single thread
/// with deterministic kernels when `strict` is set.
void seed_everything(std::uint64_t seed, bool strict = true);

/// Deterministic torch generator for code that must not disturb global state.
torch::Generator make_generator(std::uint64_t seed);

/// SHA-256 of a byte string, lowercase hex.
std::string sha256_hex(std::string_view bytes);

/// SHA-256 of a file's content, lowercase hex.
std::string sha256_file(const std::string& path);

}  // namespace recdet
