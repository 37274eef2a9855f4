#pragma once

#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "streamconv/dtype.hpp"
#include "streamconv/error.hpp"
#include "streamconv/ledger.hpp"

namespace streamconv {

// Dense row-major tensor. Shape order is fixed project-wide as
// (batch, channels, spatial...) so flat indices are portable between the
// full-pass and streamed code paths.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Dtype dtype, std::vector<int64_t> shape);

  static Tensor zeros(Dtype dtype, std::vector<int64_t> shape) {
    return Tensor(dtype, std::move(shape));
  }
  static Tensor full(Dtype dtype, std::vector<int64_t> shape, double value);
  // Values given in f64, stored converted to `dtype`.
  static Tensor from(Dtype dtype, std::vector<int64_t> shape,
                     const std::vector<double>& values);

  Tensor(const Tensor& other);
  Tensor& operator=(const Tensor& other);
  Tensor(Tensor&& other) noexcept;
  Tensor& operator=(Tensor&& other) noexcept;
  ~Tensor();

  Dtype dtype() const { return dtype_; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t numel() const { return numel_; }
  int64_t bytes() const { return numel_ * static_cast<int64_t>(dtype_size(dtype_)); }
  bool empty() const { return numel_ == 0; }

  template <typename T>
  std::span<T> data() {
    check_type<T>();
    return {reinterpret_cast<T*>(buf_.data()), static_cast<size_t>(numel_)};
  }
  template <typename T>
  std::span<const T> data() const {
    check_type<T>();
    return {reinterpret_cast<const T*>(buf_.data()), static_cast<size_t>(numel_)};
  }

  // Dtype-agnostic element access; converts through double. Convenient for
  // diagnostics and tests, not for kernels.
  double value_at(int64_t flat) const;
  void set_at(int64_t flat, double v);

  // Metadata-only reshape; element count must match.
  Tensor reshaped(std::vector<int64_t> new_shape) &&;

  std::string shape_str() const;

 private:
  template <typename T>
  void check_type() const {
    constexpr Dtype want = sizeof(T) == 4 ? Dtype::F32 : Dtype::F64;
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    if (want != dtype_) {
      throw DtypeError("tensor holds " + std::string(dtype_name(dtype_)) +
                       ", accessed as " + std::string(dtype_name(want)));
    }
  }

  void register_alloc();
  void release();

  Dtype dtype_ = Dtype::F64;
  std::vector<int64_t> shape_;
  int64_t numel_ = 0;
  std::vector<std::byte> buf_;
  AllocationLedger* ledger_ = nullptr;
  uint32_t phase_ = 0;
};

// True if both tensors have the same dtype; throws DtypeError otherwise.
void check_same_dtype(const Tensor& a, const Tensor& b, const char* what);

}  // namespace streamconv
