#include "ctm/episodes.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "ctm/serialize.hpp"

namespace ctm {

namespace fs = std::filesystem;

const std::vector<ClassEntry>& DatasetIndex::split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw DataError("unknown split '" + name + "'");
    return it->second;
}

namespace {

// P6 header: "P6", whitespace/comment runs, width, height, maxval, then a
// single whitespace byte before the binary payload.
Tensor<float> decode_ppm(const std::vector<std::uint8_t>& bytes) {
    size_t pos = 2;  // past "P6"
    auto skip_space = [&] {
        for (;;) {
            while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
    };
    auto read_int = [&]() -> std::int64_t {
        skip_space();
        if (pos >= bytes.size() || !std::isdigit(bytes[pos]))
            throw DataError("PPM: malformed header");
        std::int64_t v = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos] - '0');
            ++pos;
        }
        return v;
    };
    const std::int64_t w = read_int();
    const std::int64_t h = read_int();
    const std::int64_t maxval = read_int();
    if (maxval != 255) throw DataError("PPM: only maxval 255 is supported");
    if (pos >= bytes.size() || !std::isspace(bytes[pos]))
        throw DataError("PPM: malformed header");
    ++pos;
    const size_t need = static_cast<size_t>(3 * w * h);
    if (bytes.size() - pos < need) throw DataError("PPM: truncated payload");
    Tensor<float> img({3, h, w});
    auto d = img.data();
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            const size_t src = pos + static_cast<size_t>(3 * (y * w + x));
            for (std::int64_t c = 0; c < 3; ++c)
                d[c * h * w + y * w + x] =
                    static_cast<float>(bytes[src + static_cast<size_t>(c)]) / 255.0f;
        }
    return img;
}

}  // namespace

Tensor<float> decode_image(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), "CTMT", 4) == 0) {
        std::string s(reinterpret_cast<const char*>(bytes.data()), bytes.size());
        std::istringstream is(s, std::ios::binary);
        TensorRecord rec = read_tensor_record(is);
        Tensor<float> img = rec.dtype == 0 ? rec.f32 : rec.f64.cast<float>();
        if (img.rank() != 3 || img.dim(0) != 3)
            throw DataError("tensor image must have shape (3,H,W), got " +
                            shape_str(img.shape()));
        return img;
    }
    throw DataError("unrecognized image magic");
}

Tensor<float> load_image_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open image " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
    try {
        return decode_image(bytes);
    } catch (const std::exception& e) {
        throw DataError(std::string(e.what()) + " [" + path + "]");
    }
}

void write_ppm(const fs::path& path, const Tensor<float>& chw) {
    if (chw.rank() != 3 || chw.dim(0) != 3)
        throw DataError("write_ppm: expected (3,H,W), got " + shape_str(chw.shape()));
    const std::int64_t h = chw.dim(1), w = chw.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os << "P6\n" << w << " " << h << "\n255\n";
    auto d = chw.data();
    std::vector<unsigned char> row(static_cast<size_t>(3 * w));
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x)
            for (std::int64_t c = 0; c < 3; ++c) {
                float v = d[c * h * w + y * w + x];
                v = std::clamp(v, 0.0f, 1.0f);
                row[static_cast<size_t>(3 * x + c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0f));
            }
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw DataError("write failed: " + path.string());
}

DatasetIndex load_dataset_index(const fs::path& root) {
    DatasetIndex index;
    index.root = root.string();
    std::set<std::string> seen_classes;
    for (const char* split : {"train", "val", "test"}) {
        const fs::path dir = root / split;
        if (!fs::is_directory(dir))
            throw DataError("missing split directory " + dir.string());
        std::vector<ClassEntry> classes;
        std::vector<fs::path> class_dirs;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_directory()) class_dirs.push_back(e.path());
        std::sort(class_dirs.begin(), class_dirs.end());
        for (const auto& cd : class_dirs) {
            ClassEntry entry;
            entry.name = cd.filename().string();
            if (!seen_classes.insert(entry.name).second)
                throw DataError("class '" + entry.name +
                                "' appears in more than one split");
            std::vector<fs::path> files;
            for (const auto& f : fs::directory_iterator(cd))
                if (f.is_regular_file()) files.push_back(f.path());
            std::sort(files.begin(), files.end());
            if (files.empty())
                throw DataError("class '" + entry.name + "' in split '" +
                                std::string(split) + "' has no images");
            for (const auto& f : files) entry.images.push_back({f.string(), nullptr});
            classes.push_back(std::move(entry));
        }
        index.splits.emplace(split, std::move(classes));
    }
    // Geometry comes from the first train image; every image is validated
    // against it when actually loaded.
    const auto& train = index.split("train");
    if (!train.empty()) {
        Tensor<float> first = load_image_file(train[0].images[0].path);
        index.height = static_cast<int>(first.dim(1));
        index.width = static_cast<int>(first.dim(2));
    }
    return index;
}

void DatasetIndex::preload() {
    for (auto& [name, classes] : splits) {
        for (auto& cls : classes) {
            for (auto& rec : cls.images) {
                if (rec.pixels) continue;
                Tensor<float> img = load_image_file(rec.path);
                if (height && (img.dim(1) != height || img.dim(2) != width))
                    throw DataError("image geometry mismatch: " + rec.path + " is " +
                                    shape_str(img.shape()));
                rec.pixels = std::make_shared<Tensor<float>>(std::move(img));
            }
        }
    }
}

namespace {

Tensor<float> fetch_pixels(const ImageRecord& rec) {
    if (rec.pixels) return *rec.pixels;
    return load_image_file(rec.path);
}

}  // namespace

Episode sample_episode(const DatasetIndex& index, const std::string& split,
                       const EpisodeSpec& spec, Rng& rng) {
    if (spec.n < 2 || spec.k < 1 || spec.q < 1)
        throw DataError("episode spec requires n>=2, k>=1, q>=1");
    const auto& classes = index.split(split);
    if (static_cast<int>(classes.size()) < spec.n)
        throw DataError("split '" + split + "' has " + std::to_string(classes.size()) +
                        " classes, episode needs " + std::to_string(spec.n));

    std::vector<int> class_idx(classes.size());
    for (size_t i = 0; i < class_idx.size(); ++i) class_idx[i] = static_cast<int>(i);
    rng.partial_shuffle(class_idx, spec.n);

    const std::int64_t h = index.height, w = index.width;
    Episode ep;
    ep.n = spec.n;
    ep.k = spec.k;
    ep.q = spec.q;
    ep.support_images = Tensor<float>({static_cast<std::int64_t>(spec.n) * spec.k, 3, h, w});
    ep.query_images = Tensor<float>({static_cast<std::int64_t>(spec.n) * spec.q, 3, h, w});
    const std::int64_t img_len = 3 * h * w;

    for (int c = 0; c < spec.n; ++c) {
        const int orig = class_idx[static_cast<size_t>(c)];
        const auto& cls = classes[static_cast<size_t>(orig)];
        const int m = static_cast<int>(cls.images.size());
        if (m < spec.k + spec.q)
            throw DataError("class '" + cls.name + "' has " + std::to_string(m) +
                            " images, episode needs " + std::to_string(spec.k + spec.q));
        std::vector<int> img_idx(static_cast<size_t>(m));
        for (int i = 0; i < m; ++i) img_idx[static_cast<size_t>(i)] = i;
        rng.partial_shuffle(img_idx, spec.k + spec.q);

        ep.class_map.push_back(orig);
        for (int i = 0; i < spec.k + spec.q; ++i) {
            const int ii = img_idx[static_cast<size_t>(i)];
            Tensor<float> img = fetch_pixels(cls.images[static_cast<size_t>(ii)]);
            if (img.dim(1) != h || img.dim(2) != w)
                throw DataError("image geometry mismatch: " +
                                cls.images[static_cast<size_t>(ii)].path);
            const bool is_support = i < spec.k;
            const std::int64_t slot =
                is_support ? static_cast<std::int64_t>(c) * spec.k + i
                           : static_cast<std::int64_t>(c) * spec.q + (i - spec.k);
            float* dst = (is_support ? ep.support_images : ep.query_images).data().data() +
                         slot * img_len;
            std::copy_n(img.data().data(), img_len, dst);
            if (is_support) {
                ep.support_labels.push_back(c);
                ep.support_src.emplace_back(orig, ii);
            } else {
                ep.query_labels.push_back(c);
                ep.query_src.emplace_back(orig, ii);
            }
        }
    }
    return ep;
}

}  // namespace ctm
