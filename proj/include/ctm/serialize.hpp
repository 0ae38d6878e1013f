#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include "ctm/tensor.hpp"

namespace ctm {

struct SerializeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// CTMT tensor record: magic "CTMT", u8 version=1, u8 dtype (0=f32, 1=f64),
// u8 rank, little-endian u64 extents, then little-endian raw values.
void write_tensor(std::ostream& os, const Tensor<float>& t);
void write_tensor(std::ostream& os, const Tensor<double>& t);

// Runtime-typed record for readers that accept either precision.
struct TensorRecord {
    int dtype = 0;  // 0=f32, 1=f64
    Tensor<float> f32;
    Tensor<double> f64;
};

TensorRecord read_tensor_record(std::istream& is);
Tensor<float> read_tensor_f32(std::istream& is);    // errors if record is f64
Tensor<double> read_tensor_f64(std::istream& is);   // errors if record is f32

// Whole-file helpers.
void save_tensor_file(const std::string& path, const Tensor<float>& t);
void save_tensor_file(const std::string& path, const Tensor<double>& t);
TensorRecord load_tensor_file(const std::string& path);

}  // namespace ctm
