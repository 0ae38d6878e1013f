#include "ctm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ctm {

namespace fs = std::filesystem;

ToySpec::Family parse_family(const std::string& s) {
    if (s == "color_relevant") return ToySpec::Family::color_relevant;
    if (s == "shape_relevant") return ToySpec::Family::shape_relevant;
    if (s == "mixed") return ToySpec::Family::mixed;
    throw std::invalid_argument("unknown family '" + s + "'");
}

std::string family_name(ToySpec::Family f) {
    switch (f) {
        case ToySpec::Family::color_relevant: return "color_relevant";
        case ToySpec::Family::shape_relevant: return "shape_relevant";
        default: return "mixed";
    }
}

const std::array<std::array<float, 3>, kToyPaletteSize>& toy_palette() {
    static const std::array<std::array<float, 3>, kToyPaletteSize> palette = {{
        {1.0f, 0.0f, 0.0f},  // red
        {0.0f, 1.0f, 0.0f},  // green
        {0.0f, 0.0f, 1.0f},  // blue
        {1.0f, 1.0f, 0.0f},  // yellow
        {1.0f, 0.0f, 1.0f},  // magenta
        {0.0f, 1.0f, 1.0f},  // cyan
        {1.0f, 0.5f, 0.0f},  // orange
        {1.0f, 1.0f, 1.0f},  // white
    }};
    return palette;
}

const std::array<const char*, kToyShapeCount>& toy_shape_names() {
    static const std::array<const char*, kToyShapeCount> names = {
        "circle", "square", "triangle", "cross", "diamond", "ring", "bar", "plus"};
    return names;
}

namespace {

// Occupancy predicate in shape-local coordinates u,v in [-1,1].
bool inside(int shape_id, double u, double v) {
    const double au = std::abs(u), av = std::abs(v);
    switch (shape_id) {
        case 0: return u * u + v * v <= 1.0;                      // circle
        case 1: return au <= 1.0 && av <= 1.0;                    // square
        case 2: return av <= 1.0 && au <= (v + 1.0) * 0.5;        // triangle, apex up
        case 3: return au <= 1.0 && av <= 1.0 && std::abs(au - av) <= 0.35;  // cross (X)
        case 4: return au + av <= 1.0;                            // diamond
        case 5: {                                                 // ring
            const double r2 = u * u + v * v;
            return r2 <= 1.0 && r2 >= 0.55 * 0.55;
        }
        case 6: return au <= 1.0 && av <= 0.40;                   // horizontal bar
        case 7: return (au <= 0.35 && av <= 1.0) || (av <= 0.35 && au <= 1.0);  // plus
        default: throw std::out_of_range("shape id");
    }
}

}  // namespace

Tensor<float> render_shape(int shape_id, int color_id, const Jitter& jitter, int size) {
    if (shape_id < 0 || shape_id >= kToyShapeCount)
        throw std::out_of_range("shape id " + std::to_string(shape_id));
    if (color_id < 0 || color_id >= kToyPaletteSize)
        throw std::out_of_range("color id " + std::to_string(color_id));
    const auto& rgb = toy_palette()[static_cast<size_t>(color_id)];
    Tensor<float> img({3, size, size});
    auto d = img.data();
    const double cx = size * 0.5 + jitter.dx;
    const double cy = size * 0.5 + jitter.dy;
    const double radius = 0.32 * size * jitter.scale;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double u = (x + 0.5 - cx) / radius;
            const double v = (y + 0.5 - cy) / radius;
            if (!inside(shape_id, u, v)) continue;
            for (int c = 0; c < 3; ++c)
                d[static_cast<std::int64_t>(c) * size * size + y * size + x] =
                    rgb[static_cast<size_t>(c)];
        }
    return img;
}

namespace {

Jitter draw_jitter(const ToySpec& spec, Rng& rng) {
    Jitter j;
    j.dx = rng.uniform(-spec.jitter_pos, spec.jitter_pos);
    j.dy = rng.uniform(-spec.jitter_pos, spec.jitter_pos);
    j.scale = 1.0 + rng.uniform(-spec.jitter_scale, spec.jitter_scale);
    return j;
}

}  // namespace

ToyEpisode gen_toy_episode(const ToySpec& spec, const EpisodeSpec& ep, Rng& rng) {
    if (spec.palette < 1 || spec.palette > kToyPaletteSize ||
        spec.shapes < 1 || spec.shapes > kToyShapeCount)
        throw std::invalid_argument("toy palette/shape counts out of range");
    ToySpec::Family family = spec.family;
    if (family == ToySpec::Family::mixed)
        family = rng.uniform() < 0.5 ? ToySpec::Family::color_relevant
                                     : ToySpec::Family::shape_relevant;
    const bool color_rel = family == ToySpec::Family::color_relevant;
    const int attr_count = color_rel ? spec.palette : spec.shapes;
    const int other_count = color_rel ? spec.shapes : spec.palette;
    if (attr_count < ep.n)
        throw DataError("toy episode needs " + std::to_string(ep.n) +
                        " distinct class attributes, have " + std::to_string(attr_count));

    std::vector<int> attrs(static_cast<size_t>(attr_count));
    for (int i = 0; i < attr_count; ++i) attrs[static_cast<size_t>(i)] = i;
    rng.partial_shuffle(attrs, ep.n);

    const std::int64_t sz = spec.size;
    ToyEpisode out;
    out.family = family;
    Episode& e = out.episode;
    e.n = ep.n;
    e.k = ep.k;
    e.q = ep.q;
    e.support_images = Tensor<float>({static_cast<std::int64_t>(ep.n) * ep.k, 3, sz, sz});
    e.query_images = Tensor<float>({static_cast<std::int64_t>(ep.n) * ep.q, 3, sz, sz});
    const std::int64_t img_len = 3 * sz * sz;

    auto render_sample = [&](int class_attr) {
        const int other = static_cast<int>(rng.uniform_int(other_count));
        const int shape = color_rel ? other : class_attr;
        const int color = color_rel ? class_attr : other;
        return render_shape(shape, color, draw_jitter(spec, rng), spec.size);
    };

    for (int c = 0; c < ep.n; ++c) {
        const int attr = attrs[static_cast<size_t>(c)];
        e.class_map.push_back(attr);
        for (int i = 0; i < ep.k; ++i) {
            Tensor<float> img = render_sample(attr);
            std::copy_n(img.data().data(), img_len,
                        e.support_images.data().data() +
                            (static_cast<std::int64_t>(c) * ep.k + i) * img_len);
            e.support_labels.push_back(c);
            e.support_src.emplace_back(attr, -1);
        }
        for (int i = 0; i < ep.q; ++i) {
            Tensor<float> img = render_sample(attr);
            std::copy_n(img.data().data(), img_len,
                        e.query_images.data().data() +
                            (static_cast<std::int64_t>(c) * ep.q + i) * img_len);
            e.query_labels.push_back(c);
            e.query_src.emplace_back(attr, -1);
        }
    }
    return out;
}

void gen_toy_dataset(const ToySpec& spec, int train_classes, int val_classes,
                     int test_classes, int images_per_class, const fs::path& out_dir) {
    const int total = train_classes + val_classes + test_classes;
    if (total > spec.palette * spec.shapes)
        throw std::invalid_argument("requested " + std::to_string(total) +
                                    " classes, only " +
                                    std::to_string(spec.palette * spec.shapes) +
                                    " distinct (color,shape) pairs available");
    Rng rng(mix_seed(spec.seed, 0x7079u));
    std::vector<std::pair<int, int>> combos;
    for (int c = 0; c < spec.palette; ++c)
        for (int s = 0; s < spec.shapes; ++s) combos.emplace_back(c, s);
    rng.partial_shuffle(combos, total);

    int next = 0;
    for (auto [split, count] :
         {std::pair{"train", train_classes}, {"val", val_classes}, {"test", test_classes}}) {
        const fs::path split_dir = out_dir / split;
        fs::create_directories(split_dir);
        for (int i = 0; i < count; ++i, ++next) {
            auto [color, shape] = combos[static_cast<size_t>(next)];
            char name[32];
            std::snprintf(name, sizeof(name), "c%d_s%d", color, shape);
            const fs::path class_dir = split_dir / name;
            fs::create_directories(class_dir);
            for (int img = 0; img < images_per_class; ++img) {
                Tensor<float> px = render_shape(shape, color, draw_jitter(spec, rng),
                                                spec.size);
                char fname[32];
                std::snprintf(fname, sizeof(fname), "img_%04d.ppm", img);
                write_ppm(class_dir / fname, px);
            }
        }
    }
}

}  // namespace ctm
