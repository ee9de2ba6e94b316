#include "recdet/dataset.hpp"

#include <array>
#include <cstdlib>
#include <fstream>
#include <map>
#include <vector>

namespace recdet {

namespace fs = std::filesystem;

DatasetName parse_dataset_name(std::string_view name) {
    if (name == "CIFAR10" || name == "cifar10" || name == "CIFAR-10") return DatasetName::cifar10;
    if (name == "CIFAR100" || name == "cifar100" || name == "CIFAR-100") return DatasetName::cifar100;
    throw ValidationError("unknown dataset '" + std::string(name) + "'");
}

std::string to_string(DatasetName d) { return d == DatasetName::cifar10 ? "CIFAR10" : "CIFAR100"; }

int64_t num_classes(DatasetName d) { return d == DatasetName::cifar10 ? 10 : 100; }

Split Split::take(const torch::Tensor& index) const {
    return {images.index_select(0, index), labels.index_select(0, index)};
}

fs::path cache_root() {
    if (const char* env = std::getenv("RECDET_CACHE"); env != nullptr && *env != '\0') {
        return env;
    }
    const char* home = std::getenv("HOME");
    return fs::path(home ? home : ".") / ".cache" / "recdet";
}

namespace {

constexpr int64_t kImageBytes = 3 * 32 * 32;

const std::map<std::string, std::string>& cifar10_digests() {
    static const std::map<std::string, std::string> digests = {
        {"data_batch_1.bin", "cee916563c9f80d84e3cc88e17fdc0941787f1244f00a67874d45b261883ada5"},
        {"data_batch_2.bin", "a591ca11fa1708a91ee40f54b3da4784ccd871ecf2137de63f51ada8b3fa57ed"},
        {"data_batch_3.bin", "bbe8596564c0f86427f876058170b84dac6670ddf06d79402899d93ceea26f67"},
        {"data_batch_4.bin", "014e562d6e23c72197cc727519169a60359f5eccd8945ad5a09d710285ff4e48"},
        {"data_batch_5.bin", "755304fc0b379caeae8c14f0dac912fbc7d6cd469eb67a1029a08a39453a9add"},
        {"test_batch.bin", "8e2eb146ae340b09e24670f29cabc6326dba54da8789dab6768acf480273f65b"},
    };
    return digests;
}

std::vector<char> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ArtifactError("dataset file missing: " + path.string() +
                            " (populate the cache or set RECDET_CACHE)");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void verify_digest(const fs::path& path, const std::string& expected) {
    const auto actual = sha256_file(path.string());
    if (actual != expected) {
        throw ArtifactError("checksum mismatch for " + path.string() + ": expected " + expected + ", actual " +
                            actual);
    }
}

// CIFAR-100 has no digest we can vouch for offline; pin whatever is seen first.
void verify_recorded_digest(const fs::path& path) {
    const fs::path record = path.string() + ".sha256";
    if (fs::exists(record)) {
        std::ifstream in(record);
        std::string expected;
        in >> expected;
        verify_digest(path, expected);
        return;
    }
    std::ofstream(record) << sha256_file(path.string()) << '\n';
    log_info("recorded digest for ", path.string());
}

// Records are [label bytes..., 3072 image bytes]; `label_offset` selects the label byte.
Split parse_records(const std::vector<std::vector<char>>& blobs, int64_t label_bytes, int64_t label_offset) {
    const int64_t record = label_bytes + kImageBytes;
    int64_t total = 0;
    for (const auto& b : blobs) {
        if (static_cast<int64_t>(b.size()) % record != 0) {
            throw ArtifactError("dataset file size is not a multiple of the record size");
        }
        total += static_cast<int64_t>(b.size()) / record;
    }
    auto images = torch::empty({total, 3, 32, 32}, torch::kUInt8);
    auto labels = torch::empty({total}, torch::kLong);
    auto* img = images.data_ptr<uint8_t>();
    auto* lab = labels.data_ptr<int64_t>();
    int64_t row = 0;
    for (const auto& b : blobs) {
        const auto* p = reinterpret_cast<const uint8_t*>(b.data());
        for (int64_t off = 0; off < static_cast<int64_t>(b.size()); off += record, ++row) {
            lab[row] = p[off + label_offset];
            std::copy(p + off + label_bytes, p + off + record, img + row * kImageBytes);
        }
    }
    return {images.to(torch::kFloat).div_(255.0), labels};
}

}  // namespace

DatasetSplits ingest_dataset(DatasetName name, const fs::path& cache_dir) {
    DatasetSplits splits;
    splits.name = name;
    if (name == DatasetName::cifar10) {
        const auto dir = cache_dir / "cifar-10-batches-bin";
        std::vector<std::vector<char>> train;
        for (int i = 1; i <= 5; ++i) {
            const auto file = "data_batch_" + std::to_string(i) + ".bin";
            verify_digest(dir / file, cifar10_digests().at(file));
            train.push_back(read_bytes(dir / file));
        }
        verify_digest(dir / "test_batch.bin", cifar10_digests().at("test_batch.bin"));
        splits.train = parse_records(train, 1, 0);
        splits.test = parse_records({read_bytes(dir / "test_batch.bin")}, 1, 0);
    } else {
        const auto dir = cache_dir / "cifar-100-binary";
        verify_recorded_digest(dir / "train.bin");
        verify_recorded_digest(dir / "test.bin");
        splits.train = parse_records({read_bytes(dir / "train.bin")}, 2, 1);
        splits.test = parse_records({read_bytes(dir / "test.bin")}, 2, 1);
    }
    log_info("ingested ", to_string(name), ": train=", splits.train.size(), " test=", splits.test.size());
    return splits;
}

torch::Tensor subset_indices(int64_t split_size, int64_t size, std::uint64_t seed) {
    require(size >= 0, "subset size must be non-negative");
    require(size <= split_size, "subset size ", size, " exceeds split size ", split_size);
    auto generator = make_generator(seed);
    const auto perm = torch::randperm(split_size, generator, torch::kLong).slice(0, 0, size);
    return std::get<0>(torch::sort(perm));
}

}  // namespace recdet
