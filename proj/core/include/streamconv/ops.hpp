#pragma once

#include <utility>
#include <vector>

#include "streamconv/tensor.hpp"

namespace streamconv {

// All spatial ops accept (batch, channels, width) or (batch, channels, height,
// width) tensors. Convolutions are valid-mode cross-correlations: no padding,
// output extent (in - k) / stride + 1. Anything that needs "same" semantics
// pads the full image once before entering this layer stack.

struct ConvParams {
  Tensor kernel;             // (out_ch, in_ch, k) or (out_ch, in_ch, kh, kw)
  Tensor bias;               // (out_ch) or empty
  std::vector<int> stride;   // one entry per spatial dim
};

struct PoolParams {
  int window = 2;
  int stride = 2;
};

// Flat indices into the pooling *input* tensor, one per output element, in the
// output's row-major order. Ties select the lowest flat index.
struct ArgmaxMap {
  std::vector<int64_t> idx;
};

// Rectangular region over the spatial dims only (batch/channels untouched).
struct Region {
  std::vector<int64_t> pos;
  std::vector<int64_t> extent;
};

Tensor conv_forward(const Tensor& input, const ConvParams& p);
// d(loss)/d(kernel); shapes follow p.kernel.
Tensor conv_backward_kernel(const Tensor& input, const Tensor& grad_out, const ConvParams& p);
// d(loss)/d(bias): per-out-channel sum of grad_out.
Tensor conv_backward_bias(const Tensor& grad_out);
// d(loss)/d(input). The true input spatial extents must be passed because the
// forward floor-division is not invertible when stride does not divide evenly;
// trailing positions that fed no window get zero gradient.
Tensor conv_backward_input(const Tensor& grad_out, const ConvParams& p,
                           const std::vector<int64_t>& input_spatial);

std::pair<Tensor, ArgmaxMap> maxpool_forward(const Tensor& input, const PoolParams& p);
Tensor maxpool_backward(const Tensor& grad_out, const ArgmaxMap& argmax,
                        const std::vector<int64_t>& input_shape);

// Average pooling mirrors max pooling geometrically; the overlap probe swaps
// it in so constant plateaus survive the backward pass.
Tensor avgpool_forward(const Tensor& input, const PoolParams& p);
Tensor avgpool_backward(const Tensor& grad_out, const PoolParams& p,
                        const std::vector<int64_t>& input_spatial);

Tensor relu_forward(const Tensor& input);
Tensor relu_backward(const Tensor& grad_out, const Tensor& input);

struct LinearParams {
  Tensor weight;  // (out_features, in_features)
  Tensor bias;    // (out_features) or empty
};

struct LinearGrads {
  Tensor weight;
  Tensor bias;
  Tensor input;
};

// Input (batch, features); higher-rank input is flattened per sample.
Tensor linear_forward(const Tensor& input, const LinearParams& p);
LinearGrads linear_backward(const Tensor& input, const Tensor& grad_out, const LinearParams& p);

// Copy of the spatial region (all batches/channels).
Tensor crop(const Tensor& t, const Region& r);

// Assemble tiles into a (batch, channels, out_spatial) tensor. Every output
// cell must be written exactly once; a double write or a gap is a
// PlacementError.
Tensor concat_spatial(const std::vector<Tensor>& tiles, const std::vector<Region>& placements,
                      const std::vector<int64_t>& out_spatial);

// into += x (same shape, same dtype).
void accumulate(Tensor& into, const Tensor& x);
// y += alpha * x
void axpy(Tensor& y, double alpha, const Tensor& x);
// Sum of all elements, accumulated in double.
double sum_all(const Tensor& t);
double max_abs(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Valid-conv output extent; throws ShapeError if in < k.
int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, const char* what);

}  // namespace streamconv
