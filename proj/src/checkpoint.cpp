#include "recdet/checkpoint.hpp"

#include <filesystem>

namespace recdet {

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    torch::serialize::OutputArchive archive;
    archive.write("format_version", c10::IValue(static_cast<int64_t>(kCheckpointFormatVersion)));
    archive.write("kind", c10::IValue(ckpt.kind));
    archive.write("meta", c10::IValue(ckpt.meta.dump()));
    std::vector<std::string> names;
    for (const auto& [name, tensor] : ckpt.tensors) {
        archive.write("tensor/" + name, tensor.detach().contiguous());
        names.push_back(name);
    }
    archive.write("tensor_names", c10::IValue(nlohmann::json(names).dump()));

    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) {
        std::filesystem::create_directories(parent);
    }
    // Write-then-rename so readers never observe a half-written artifact.
    const std::string tmp = path + ".partial";
    archive.save_to(tmp);
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path, const std::string& expected_kind) {
    if (!std::filesystem::exists(path)) {
        throw ArtifactError("checkpoint not found: " + path);
    }
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path);
    } catch (const c10::Error& e) {
        throw ArtifactError("unreadable checkpoint " + path + ": " + e.what_without_backtrace());
    }
    c10::IValue value;
    if (!archive.try_read("format_version", value) || !value.isInt()) {
        throw ArtifactError(path + ": missing format_version");
    }
    if (value.toInt() != kCheckpointFormatVersion) {
        throw ArtifactError(path + ": unsupported format version " + std::to_string(value.toInt()));
    }
    Checkpoint ckpt;
    if (!archive.try_read("kind", value) || !value.isString()) {
        throw ArtifactError(path + ": missing kind");
    }
    ckpt.kind = value.toStringRef();
    if (ckpt.kind != expected_kind) {
        throw ArtifactError(path + ": expected a '" + expected_kind + "' artifact, found '" + ckpt.kind + "'");
    }
    if (!archive.try_read("meta", value) || !value.isString()) {
        throw ArtifactError(path + ": missing metadata");
    }
    ckpt.meta = nlohmann::json::parse(value.toStringRef());
    if (!archive.try_read("tensor_names", value) || !value.isString()) {
        throw ArtifactError(path + ": missing tensor index");
    }
    for (const auto& name : nlohmann::json::parse(value.toStringRef())) {
        torch::Tensor t;
        if (!archive.try_read("tensor/" + name.get<std::string>(), t)) {
            throw ArtifactError(path + ": missing tensor " + name.get<std::string>());
        }
        ckpt.tensors.emplace(name.get<std::string>(), t);
    }
    return ckpt;
}

void collect_state(const torch::nn::Module& module, std::map<std::string, torch::Tensor>& out,
                   const std::string& prefix) {
    for (const auto& p : module.named_parameters(/*recurse=*/true)) {
        out[prefix + p.key()] = p.value().detach().clone();
    }
    for (const auto& b : module.named_buffers(/*recurse=*/true)) {
        out[prefix + b.key()] = b.value().detach().clone();
    }
}

void restore_state(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& tensors,
                   const std::string& prefix) {
    torch::NoGradGuard no_grad;
    auto assign = [&](const std::string& name, torch::Tensor& target) {
        const auto it = tensors.find(prefix + name);
        if (it == tensors.end()) {
            throw ArtifactError("checkpoint lacks tensor '" + name + "'");
        }
        if (it->second.sizes() != target.sizes()) {
            std::ostringstream os;
            os << "checkpoint tensor '" << name << "' has shape " << it->second.sizes()
               << " but the configured model expects " << target.sizes();
            throw ArtifactError(os.str());
        }
        target.copy_(it->second);
    };
    for (auto& p : module.named_parameters(true)) {
        assign(p.key(), p.value());
    }
    for (auto& b : module.named_buffers(true)) {
        assign(b.key(), b.value());
    }
}

}  // namespace recdet
