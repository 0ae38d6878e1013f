#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "ctm/episodes.hpp"
#include "ctm/serialize.hpp"
#include "ctm/synth.hpp"

using namespace ctm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// 10 train / 5 val / 5 test classes, 8 images each, written once per binary.
const fs::path& toy_dataset() {
    static TempDir dir("ctm_test_dataset");
    static bool built = false;
    if (!built) {
        ToySpec spec;
        spec.seed = 77;
        gen_toy_dataset(spec, 10, 5, 5, 8, dir.path);
        built = true;
    }
    return dir.path;
}

}  // namespace

TEST_CASE("load_dataset_index reflects the directory layout") {
    DatasetIndex index = load_dataset_index(toy_dataset());
    CHECK(index.split("train").size() == 10);
    CHECK(index.split("val").size() == 5);
    CHECK(index.split("test").size() == 5);
    CHECK(index.height == 32);
    CHECK(index.width == 32);
    for (const auto& cls : index.split("train")) CHECK(cls.images.size() == 8);
}

TEST_CASE("split class sets are pairwise disjoint") {
    DatasetIndex index = load_dataset_index(toy_dataset());
    std::set<std::string> names;
    size_t total = 0;
    for (const char* split : {"train", "val", "test"}) {
        for (const auto& cls : index.split(split)) {
            names.insert(cls.name);
            ++total;
        }
    }
    CHECK(names.size() == total);
}

TEST_CASE("loading the same directory twice gives an identical index") {
    DatasetIndex a = load_dataset_index(toy_dataset());
    DatasetIndex b = load_dataset_index(toy_dataset());
    for (const char* split : {"train", "val", "test"}) {
        const auto& ca = a.split(split);
        const auto& cb = b.split(split);
        REQUIRE(ca.size() == cb.size());
        for (size_t i = 0; i < ca.size(); ++i) {
            CHECK(ca[i].name == cb[i].name);
            REQUIRE(ca[i].images.size() == cb[i].images.size());
            for (size_t j = 0; j < ca[i].images.size(); ++j)
                CHECK(ca[i].images[j].path == cb[i].images[j].path);
        }
    }
}

TEST_CASE("missing split directory and empty class directory are errors") {
    TempDir dir("ctm_test_badlayout");
    fs::create_directories(dir.path / "train" / "class_a");
    write_ppm(dir.path / "train" / "class_a" / "img.ppm", Tensor<float>({3, 4, 4}));
    CHECK_THROWS_AS((void)load_dataset_index(dir.path), DataError);  // no val/test

    fs::create_directories(dir.path / "val" / "class_b");
    fs::create_directories(dir.path / "test" / "class_c");
    write_ppm(dir.path / "val" / "class_b" / "img.ppm", Tensor<float>({3, 4, 4}));
    write_ppm(dir.path / "test" / "class_c" / "img.ppm", Tensor<float>({3, 4, 4}));
    fs::create_directories(dir.path / "train" / "class_empty");
    try {
        (void)load_dataset_index(dir.path);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("class_empty") != std::string::npos);
    }
}

TEST_CASE("decode_image handles a 1x1 red P6 pixel") {
    std::string ppm = "P6\n1 1\n255\n";
    ppm.push_back(static_cast<char>(255));
    ppm.push_back(static_cast<char>(0));
    ppm.push_back(static_cast<char>(0));
    std::vector<std::uint8_t> bytes(ppm.begin(), ppm.end());
    Tensor<float> img = decode_image(bytes);
    REQUIRE(img.shape() == Shape{3, 1, 1});
    CHECK(img.data()[0] == 1.0f);
    CHECK(img.data()[1] == 0.0f);
    CHECK(img.data()[2] == 0.0f);
}

TEST_CASE("decode_image rejects truncated and unknown payloads") {
    std::string ppm = "P6\n2 2\n255\n";
    ppm.push_back(static_cast<char>(255));  // 1 of 12 payload bytes
    std::vector<std::uint8_t> bytes(ppm.begin(), ppm.end());
    CHECK_THROWS_AS((void)decode_image(bytes), DataError);

    std::vector<std::uint8_t> junk = {'J', 'U', 'N', 'K'};
    CHECK_THROWS_AS((void)decode_image(junk), DataError);
}

TEST_CASE("PPM round trip preserves 8-bit pixel data") {
    TempDir dir("ctm_test_ppm");
    Tensor<float> img({3, 5, 7});
    Rng rng(5);
    for (auto& v : img.data())
        v = static_cast<float>(rng.uniform_int(256)) / 255.0f;
    write_ppm(dir.path / "x.ppm", img);
    Tensor<float> back = load_image_file((dir.path / "x.ppm").string());
    REQUIRE(back.shape() == img.shape());
    for (std::int64_t i = 0; i < img.numel(); ++i)
        CHECK(back.data()[i] == doctest::Approx(img.data()[i]).epsilon(1e-6));
}

TEST_CASE("CTMT image files decode through decode_image") {
    Tensor<float> img({3, 4, 4});
    Rng rng(6);
    for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
    std::ostringstream os(std::ios::binary);
    write_tensor(os, img);
    const std::string s = os.str();
    std::vector<std::uint8_t> bytes(s.begin(), s.end());
    Tensor<float> back = decode_image(bytes);
    REQUIRE(back.shape() == img.shape());
    for (std::int64_t i = 0; i < img.numel(); ++i)
        CHECK(back.data()[i] == img.data()[i]);
}

TEST_CASE("sample_episode produces the spec'd counts") {
    DatasetIndex index = load_dataset_index(toy_dataset());
    index.preload();
    Rng rng(11);
    EpisodeSpec spec{5, 1, 15, 0};
    // 5-way 1-shot with 15 queries needs 16 images per class; our classes
    // have 8, so use the val-sized spec below for counts and a smaller q.
    spec.q = 7;
    Episode ep = sample_episode(index, "train", spec, rng);
    CHECK(ep.support_images.dim(0) == 5);
    CHECK(ep.query_images.dim(0) == 35);
    CHECK(ep.support_labels.size() == 5);
    CHECK(ep.query_labels.size() == 35);

    EpisodeSpec big{5, 5, 3, 0};
    Episode ep2 = sample_episode(index, "train", big, rng);
    CHECK(ep2.support_images.dim(0) == 25);
    CHECK(ep2.query_images.dim(0) == 15);
}

TEST_CASE("episodes are class-major with exact per-label counts and no overlap") {
    DatasetIndex index = load_dataset_index(toy_dataset());
    index.preload();
    Rng rng(13);
    EpisodeSpec spec{4, 2, 3, 0};
    for (int trial = 0; trial < 200; ++trial) {
        Episode ep = sample_episode(index, "train", spec, rng);
        for (size_t i = 0; i < ep.support_labels.size(); ++i)
            CHECK(ep.support_labels[i] == static_cast<int>(i) / spec.k);
        for (size_t i = 0; i < ep.query_labels.size(); ++i)
            CHECK(ep.query_labels[i] == static_cast<int>(i) / spec.q);
        std::set<std::pair<int, int>> support(ep.support_src.begin(),
                                              ep.support_src.end());
        CHECK(support.size() == ep.support_src.size());
        for (const auto& q : ep.query_src) CHECK(support.count(q) == 0);
        std::set<int> classes(ep.class_map.begin(), ep.class_map.end());
        CHECK(classes.size() == static_cast<size_t>(spec.n));
    }
}

TEST_CASE("same seed reproduces bit-identical episodes") {
    DatasetIndex index = load_dataset_index(toy_dataset());
    index.preload();
    EpisodeSpec spec{5, 2, 3, 0};
    Rng r1(42), r2(42);
    Episode a = sample_episode(index, "train", spec, r1);
    Episode b = sample_episode(index, "train", spec, r2);
    CHECK(a.class_map == b.class_map);
    CHECK(a.support_src == b.support_src);
    CHECK(a.query_src == b.query_src);
    for (std::int64_t i = 0; i < a.support_images.numel(); ++i)
        CHECK(a.support_images.data()[i] == b.support_images.data()[i]);
    for (std::int64_t i = 0; i < a.query_images.numel(); ++i)
        CHECK(a.query_images.data()[i] == b.query_images.data()[i]);
}

TEST_CASE("unsatisfiable specs raise capacity errors") {
    DatasetIndex index = load_dataset_index(toy_dataset());
    Rng rng(1);
    EpisodeSpec too_many_ways{11, 1, 1, 0};  // train has 10 classes
    CHECK_THROWS_AS((void)sample_episode(index, "train", too_many_ways, rng), DataError);
    EpisodeSpec too_many_images{5, 4, 5, 0};  // 9 > 8 images per class
    CHECK_THROWS_AS((void)sample_episode(index, "train", too_many_images, rng),
                    DataError);
    EpisodeSpec ok{5, 1, 2, 0};
    CHECK_THROWS_AS((void)sample_episode(index, "missing", ok, rng), DataError);
}
