#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ctm/rng.hpp"
#include "ctm/tensor.hpp"

namespace ctm {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One N-way K-shot task. Support and query batches are class-major: all K
// (resp. Q) samples of episode label 0 first, then label 1, and so on.
struct EpisodeSpec {
    int n = 5;
    int k = 1;
    int q = 15;  // queries per class
    std::uint64_t seed = 0;
};

struct Episode {
    Tensor<float> support_images;  // (N*K, 3, H, W)
    Tensor<float> query_images;    // (N*Q, 3, H, W)
    std::vector<int> support_labels;
    std::vector<int> query_labels;
    std::vector<int> class_map;  // episode label -> original class id
    // provenance (original class id, image index); image index is -1 for
    // generated samples
    std::vector<std::pair<int, int>> support_src, query_src;
    int n = 0, k = 0, q = 0;
};

struct ImageRecord {
    std::string path;
    std::shared_ptr<Tensor<float>> pixels;  // set by preload()
};

struct ClassEntry {
    std::string name;
    std::vector<ImageRecord> images;
};

struct DatasetIndex {
    std::map<std::string, std::vector<ClassEntry>> splits;
    int height = 0, width = 0;
    std::string root;

    const std::vector<ClassEntry>& split(const std::string& name) const;
    // Loads every image into memory and validates geometry.
    void preload();
};

// Expects root/<split>/<class>/<files> with splits train, val and test.
// Classes and files are sorted lexicographically so the index is
// deterministic; class names must not repeat across splits.
DatasetIndex load_dataset_index(const std::filesystem::path& root);

// PPM P6 (maxval 255) or a CTMT tensor record; values scaled to [0,1], RGB.
Tensor<float> decode_image(const std::vector<std::uint8_t>& bytes);
Tensor<float> load_image_file(const std::string& path);
void write_ppm(const std::filesystem::path& path, const Tensor<float>& chw);

// Draws N distinct classes then K+Q distinct images per class; the first K
// of each class form the support set. Labels are remapped by class draw
// order. Advances rng deterministically.
Episode sample_episode(const DatasetIndex& index, const std::string& split,
                       const EpisodeSpec& spec, Rng& rng);

}  // namespace ctm
