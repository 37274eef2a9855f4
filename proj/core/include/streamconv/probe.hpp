#pragma once

#include <array>
#include <vector>

#include "streamconv/network.hpp"

namespace streamconv {

// Border widths per spatial dim, (before, after) in that dim's order.
struct BorderWidths {
  std::vector<std::array<int64_t, 2>> per_dim;
  bool operator==(const BorderWidths&) const = default;
};

struct LayerOverlap {
  // Output positions of this layer whose value would differ from a full-pass
  // value at a tile border (valid ops: zero).
  BorderWidths invalid_forward;
  // Input-gradient positions of this layer that are incomplete at a tile
  // border without neighbour context.
  BorderWidths invalid_backward;
  bool operator==(const LayerOverlap&) const = default;
};

struct ProbeReport {
  std::vector<LayerOverlap> layers;      // prefix layers, network order
  std::vector<int64_t> output_stride;    // per spatial dim, product of prefix strides
  std::vector<int64_t> tile_size_probed; // empty for the analytic report

  // Input pixels each side of a tile that need neighbour context for a full
  // gradient reconstruction; equals the adjacent-tile input overlap.
  std::vector<int64_t> input_overlap() const;

  bool same_widths(const ProbeReport& other) const;
};

// Count, per side of each spatial dim, the consecutive rows/columns whose
// values all fall below (1 - epsilon) * max. Values are aggregated over batch
// and channels (min across both). Throws ProbeError if sub-maximal values
// continue past a contiguous border, which would make the width meaningless.
//
// `period`: positions are compared against the maximum of their own residue
// class modulo period. Strided ops give interior gradients a legitimate
// periodic ripple; class-wise comparison sees through it. period = 1 is the
// plain global-max rule.
BorderWidths non_max_indices(const Tensor& t, double epsilon, int64_t period = 1);

// Receptive extent and cumulative stride of one split-layer output position,
// per spatial dim. A split output at position j depends on input pixels
// [j * stride, j * stride + receptive).
struct PrefixGeometry {
  std::vector<int64_t> receptive;
  std::vector<int64_t> stride;
};
PrefixGeometry prefix_geometry(const Network& net);

// Empirical overlap measurement. Runs the prefix of a copy of the network on
// an all-ones tile with every kernel replaced by its average (1/elements),
// biases zeroed and max-pools swapped for average pools, then feeds a uniform
// gradient back down and measures non-maximum border widths per layer. The
// passed network is never modified.
ProbeReport probe(const Network& net, const std::vector<int64_t>& tile_size);

// Closed-form counterpart for sequential prefixes; must agree with probe().
ProbeReport analytic_overlap(const Network& net);

}  // namespace streamconv
