#pragma once

#include <string>

#include "streamconv/tensor.hpp"

namespace streamconv {

// Tensor file format, little-endian throughout:
//   magic "STEN1" | u8 dtype (0 = f32, 1 = f64) | u8 rank | rank x u32 dims | payload
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

// As read_tensor, but a file whose dtype differs from `expect` is a DtypeError
// (graphs never mix precisions, so the caller's choice wins).
Tensor read_tensor(const std::string& path, Dtype expect);

}  // namespace streamconv
