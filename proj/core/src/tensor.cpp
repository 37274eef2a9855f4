#include "streamconv/tensor.hpp"

#include <sstream>

namespace streamconv {

namespace {
int64_t count_elems(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 1) throw ShapeError("tensor dims must be >= 1");
    n *= d;
  }
  return shape.empty() ? 0 : n;
}
}  // namespace

Tensor::Tensor(Dtype dtype, std::vector<int64_t> shape)
    : dtype_(dtype), shape_(std::move(shape)), numel_(count_elems(shape_)) {
  buf_.assign(static_cast<size_t>(bytes()), std::byte{0});
  register_alloc();
}

Tensor Tensor::full(Dtype dtype, std::vector<int64_t> shape, double value) {
  Tensor t(dtype, std::move(shape));
  if (dtype == Dtype::F32) {
    for (auto& v : t.data<float>()) v = static_cast<float>(value);
  } else {
    for (auto& v : t.data<double>()) v = value;
  }
  return t;
}

Tensor Tensor::from(Dtype dtype, std::vector<int64_t> shape,
                    const std::vector<double>& values) {
  Tensor t(dtype, std::move(shape));
  if (static_cast<int64_t>(values.size()) != t.numel()) {
    throw ShapeError("value count does not match shape");
  }
  for (int64_t i = 0; i < t.numel(); ++i) t.set_at(i, values[static_cast<size_t>(i)]);
  return t;
}

Tensor::Tensor(const Tensor& other)
    : dtype_(other.dtype_), shape_(other.shape_), numel_(other.numel_), buf_(other.buf_) {
  register_alloc();
}

Tensor& Tensor::operator=(const Tensor& other) {
  if (this == &other) return *this;
  release();
  dtype_ = other.dtype_;
  shape_ = other.shape_;
  numel_ = other.numel_;
  buf_ = other.buf_;
  register_alloc();
  return *this;
}

Tensor::Tensor(Tensor&& other) noexcept
    : dtype_(other.dtype_),
      shape_(std::move(other.shape_)),
      numel_(other.numel_),
      buf_(std::move(other.buf_)),
      ledger_(other.ledger_),
      phase_(other.phase_) {
  other.shape_.clear();
  other.numel_ = 0;
  other.ledger_ = nullptr;
}

Tensor& Tensor::operator=(Tensor&& other) noexcept {
  if (this == &other) return *this;
  release();
  dtype_ = other.dtype_;
  shape_ = std::move(other.shape_);
  numel_ = other.numel_;
  buf_ = std::move(other.buf_);
  ledger_ = other.ledger_;
  phase_ = other.phase_;
  other.shape_.clear();
  other.numel_ = 0;
  other.ledger_ = nullptr;
  return *this;
}

Tensor::~Tensor() { release(); }

void Tensor::register_alloc() {
  if (numel_ == 0) return;
  ledger_ = AllocationLedger::active();
  if (ledger_) {
    phase_ = ledger_->current_phase();
    ledger_->on_alloc(bytes(), phase_);
  }
}

void Tensor::release() {
  if (ledger_ && numel_ > 0) ledger_->on_free(bytes(), phase_);
  ledger_ = nullptr;
}

double Tensor::value_at(int64_t flat) const {
  if (flat < 0 || flat >= numel_) throw ShapeError("flat index out of range");
  if (dtype_ == Dtype::F32) return data<float>()[static_cast<size_t>(flat)];
  return data<double>()[static_cast<size_t>(flat)];
}

void Tensor::set_at(int64_t flat, double v) {
  if (flat < 0 || flat >= numel_) throw ShapeError("flat index out of range");
  if (dtype_ == Dtype::F32) {
    data<float>()[static_cast<size_t>(flat)] = static_cast<float>(v);
  } else {
    data<double>()[static_cast<size_t>(flat)] = v;
  }
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) && {
  if (count_elems(new_shape) != numel_) {
    throw ShapeError("reshape changes element count");
  }
  Tensor out(std::move(*this));
  out.shape_ = std::move(new_shape);
  return out;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ",";
    os << shape_[i];
  }
  os << ")";
  return os.str();
}

Dtype dtype_from_name(const std::string& name) {
  if (name == "f32") return Dtype::F32;
  if (name == "f64") return Dtype::F64;
  throw ParseError("unknown dtype '" + name + "' (expected f32 or f64)");
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* what) {
  if (a.dtype() != b.dtype()) {
    throw DtypeError(std::string(what) + ": dtype mismatch (" + dtype_name(a.dtype()) +
                     " vs " + dtype_name(b.dtype()) + ")");
  }
}

}  // namespace streamconv
