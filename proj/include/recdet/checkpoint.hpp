#pragma once

#include <map>
#include <string>

#include "json.hpp"
#include "recdet/common.hpp"

namespace recdet {

inline constexpr int kCheckpointFormatVersion = 1;

/// Self-describing artifact: a kind tag, a format version, JSON metadata (which
/// always carries the producing config) and named tensors.
struct Checkpoint {
    std::string kind;
    nlohmann::json meta;
    std::map<std::string, torch::Tensor> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

/// Loads and validates the container. `expected_kind` must match the stored kind.
Checkpoint load_checkpoint(const std::string& path, const std::string& expected_kind);

/// Every parameter and buffer of `module`, prefixed.
void collect_state(const torch::nn::Module& module, std::map<std::string, torch::Tensor>& out,
                   const std::string& prefix = "state/");

/// Copies stored tensors into `module`. Missing entries or shape disagreements
/// between the stored tensors and the module built from the stored config are
/// hard errors.
void restore_state(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& tensors,
                   const std::string& prefix = "state/");

}  // namespace recdet
