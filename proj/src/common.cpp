#include "recdet/common.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <vector>

#include <ATen/CPUGeneratorImpl.h>
#include <openssl/evp.h>

namespace recdet {

namespace {
std::atomic<LogLevel> g_level{LogLevel::info};
std::mutex g_log_mutex;

const char* level_tag(LogLevel level) {
    switch (level) {
        case LogLevel::debug: return "debug";
        case LogLevel::info: return "info";
        case LogLevel::warn: return "warn";
        case LogLevel::error: return "error";
        default: return "";
    }
}

std::string to_hex(const unsigned char* digest, unsigned int len) {
    std::ostringstream os;
    os << std::hex << std::setfill('0');
    for (unsigned int i = 0; i < len; ++i) {
        os << std::setw(2) << static_cast<int>(digest[i]);
    }
    return os.str();
}
}  // namespace

void check_image_batch(const torch::Tensor& images, std::string_view what) {
    require(images.defined(), what, ": tensor is undefined");
    require(images.dim() == 4, what, ": expected [N, C, H, W], got ", images.sizes());
    require(images.size(1) >= 1, what, ": need at least one channel");
    require(images.is_floating_point(), what, ": expected a floating point tensor");
    check_finite(images, what);
}

void check_finite(const torch::Tensor& t, std::string_view what) {
    if (t.numel() == 0) {
        return;
    }
    require(torch::isfinite(t).all().item<bool>(), what, ": contains non-finite values");
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, std::string_view what) {
    require(a.sizes() == b.sizes(), what, ": shape mismatch ", a.sizes(), " vs ", b.sizes());
}

void set_log_level(LogLevel level) { g_level = level; }

LogLevel log_level() { return g_level; }

void log_line(LogLevel level, const std::string& line) {
    if (level < g_level.load()) {
        return;
    }
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    std::lock_guard<std::mutex> lock(g_log_mutex);
    std::cerr << std::put_time(&tm, "%H:%M:%S") << " [" << level_tag(level) << "] " << line << '\n';
}

void seed_everything(std::uint64_t seed, bool strict) {
    torch::manual_seed(seed);
    if (strict) {
        at::set_num_threads(1);
        at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/false);
    }
}

torch::Generator make_generator(std::uint64_t seed) {
    return at::make_generator<at::CPUGeneratorImpl>(seed);
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
    return to_hex(digest, len);
}

std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ArtifactError("cannot open " + path);
    }
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    std::vector<char> buffer(1 << 20);
    while (in) {
        in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
        EVP_DigestUpdate(ctx, buffer.data(), static_cast<size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    return to_hex(digest, len);
}

}  // namespace recdet
