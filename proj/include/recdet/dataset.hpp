#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "recdet/common.hpp"
#include "recdet/detector.hpp"

namespace recdet {

DatasetName parse_dataset_name(std::string_view name);
std::string to_string(DatasetName d);
int64_t num_classes(DatasetName d);

struct Split {
    ImageBatch images;     // [N, 3, 32, 32] float in [0, 1]
    torch::Tensor labels;  // [N] int64

    int64_t size() const { return labels.defined() ? labels.size(0) : 0; }
    Split take(const torch::Tensor& index) const;
};

struct DatasetSplits {
    DatasetName name = DatasetName::cifar10;
    Split train;
    Split test;
};

/// Cache root: $RECDET_CACHE, else ~/.cache/recdet.
std::filesystem::path cache_root();

/// Reads the binary CIFAR distribution under `cache_dir`
/// (cifar-10-batches-bin/ or cifar-100-binary/). CIFAR-10 files are verified
/// against pinned SHA-256 digests; CIFAR-100 digests are recorded on first
/// use and verified afterwards. Mismatch raises ArtifactError naming both.
DatasetSplits ingest_dataset(DatasetName name, const std::filesystem::path& cache_dir = cache_root());

/// `size` distinct indices drawn from [0, split_size), sorted, seeded.
torch::Tensor subset_indices(int64_t split_size, int64_t size, std::uint64_t seed);

}  // namespace recdet
