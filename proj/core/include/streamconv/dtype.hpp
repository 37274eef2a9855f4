#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace streamconv {

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

inline size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }

inline const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

// Relative epsilon used when deciding whether a probe value counts as
// "maximal". The smallest genuine border deficit after a chain of averaging
// kernels is 1/(product of window element counts); eight chained width-7
// kernels give 7^-8 = 1.7e-7 per spatial dim. Interior probe values repeat
// the same summation bit for bit, so rounding noise sits near 1e-14. 1e-8
// separates the two with wide margin in f64; f32 probes are never used for
// geometry, the value exists for completeness only.
inline double probe_epsilon(Dtype d) { return d == Dtype::F32 ? 1e-4 : 1e-8; }

Dtype dtype_from_name(const std::string& name);  // throws ParseError

}  // namespace streamconv
