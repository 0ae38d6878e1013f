#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ctm/episodes.hpp"
#include "ctm/rng.hpp"
#include "ctm/tensor.hpp"

namespace ctm {

// Task generator over rendered shape/color images. The attribute that
// defines class identity alternates between episodes, so a static per-class
// metric cannot commit to either dimension while a task-conditioned one can.
struct ToySpec {
    enum class Family { color_relevant, shape_relevant, mixed };

    int size = 32;
    int palette = 8;  // number of colors used from the built-in table
    int shapes = 8;   // number of shapes used from the built-in set
    Family family = Family::mixed;
    double jitter_pos = 2.0;     // +/- pixels of center displacement
    double jitter_scale = 0.10;  // +/- relative size
    std::uint64_t seed = 0;
};

ToySpec::Family parse_family(const std::string& s);
std::string family_name(ToySpec::Family f);

inline constexpr int kToyPaletteSize = 8;
inline constexpr int kToyShapeCount = 8;

// RGB in [0,1]; pairwise channel-wise L-inf separation >= 0.25.
const std::array<std::array<float, 3>, kToyPaletteSize>& toy_palette();
const std::array<const char*, kToyShapeCount>& toy_shape_names();

struct Jitter {
    double dx = 0, dy = 0;
    double scale = 1.0;
};

// Hard-edged rasterization on black background; deterministic in all args.
Tensor<float> render_shape(int shape_id, int color_id, const Jitter& jitter, int size);

struct ToyEpisode {
    Episode episode;
    ToySpec::Family family = ToySpec::Family::color_relevant;
};

// Episode-relative classes: class c's defining attribute is drawn without
// replacement; the other attribute is sampled freely per image.
ToyEpisode gen_toy_episode(const ToySpec& spec, const EpisodeSpec& ep, Rng& rng);

// Writes a directory dataset in the episodes layout; classes are distinct
// (color, shape) pairs dealt disjointly across train/val/test.
void gen_toy_dataset(const ToySpec& spec, int train_classes, int val_classes,
                     int test_classes, int images_per_class,
                     const std::filesystem::path& out_dir);

}  // namespace ctm
