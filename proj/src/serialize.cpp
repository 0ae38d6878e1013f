#include "ctm/serialize.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <vector>

namespace ctm {

namespace {

constexpr char kMagic[4] = {'C', 'T', 'M', 'T'};
constexpr std::uint8_t kVersion = 1;

void put_u64le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw SerializeError("CTMT: truncated extent field");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

template <class T>
void write_record(std::ostream& os, const Tensor<T>& t, std::uint8_t dtype) {
    os.write(kMagic, 4);
    os.put(static_cast<char>(kVersion));
    os.put(static_cast<char>(dtype));
    os.put(static_cast<char>(t.rank()));
    for (auto e : t.shape()) put_u64le(os, static_cast<std::uint64_t>(e));
    // Values are written verbatim; the build targets little-endian hosts.
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(T)));
    if (!os) throw SerializeError("CTMT: write failed");
}

template <class T>
Tensor<T> read_values(std::istream& is, const Shape& shape) {
    std::vector<T> values(static_cast<size_t>(numel_of(shape)));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(T)));
    if (!is) throw SerializeError("CTMT: truncated payload");
    return Tensor<T>::from_data(shape, std::move(values));
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor<float>& t) { write_record(os, t, 0); }
void write_tensor(std::ostream& os, const Tensor<double>& t) { write_record(os, t, 1); }

TensorRecord read_tensor_record(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw SerializeError("CTMT: bad magic");
    const int version = is.get();
    if (version != kVersion)
        throw SerializeError("CTMT: unsupported version " + std::to_string(version));
    const int dtype = is.get();
    const int rank = is.get();
    if (!is || (dtype != 0 && dtype != 1) || rank < 0)
        throw SerializeError("CTMT: corrupt header");
    Shape shape;
    for (int i = 0; i < rank; ++i)
        shape.push_back(static_cast<std::int64_t>(get_u64le(is)));
    TensorRecord rec;
    rec.dtype = dtype;
    if (dtype == 0)
        rec.f32 = read_values<float>(is, shape);
    else
        rec.f64 = read_values<double>(is, shape);
    return rec;
}

Tensor<float> read_tensor_f32(std::istream& is) {
    TensorRecord rec = read_tensor_record(is);
    if (rec.dtype != 0) throw SerializeError("CTMT: expected f32 record, got f64");
    return rec.f32;
}

Tensor<double> read_tensor_f64(std::istream& is) {
    TensorRecord rec = read_tensor_record(is);
    if (rec.dtype != 1) throw SerializeError("CTMT: expected f64 record, got f32");
    return rec.f64;
}

namespace {
template <class T>
void save_file(const std::string& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw SerializeError("cannot open " + path + " for writing");
    write_tensor(os, t);
}
}  // namespace

void save_tensor_file(const std::string& path, const Tensor<float>& t) {
    save_file(path, t);
}
void save_tensor_file(const std::string& path, const Tensor<double>& t) {
    save_file(path, t);
}

TensorRecord load_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw SerializeError("cannot open " + path);
    return read_tensor_record(is);
}

}  // namespace ctm
