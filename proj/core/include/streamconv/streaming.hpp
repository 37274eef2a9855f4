#pragma once

#include <vector>

#include "streamconv/network.hpp"
#include "streamconv/probe.hpp"

namespace streamconv {

struct TileInfo {
  std::vector<int64_t> in_pos, in_extent;    // input-space span this tile reads
  std::vector<int64_t> out_pos, out_extent;  // split-space chunk this tile owns
};

// Tiles are laid out row-major on a grid. Input coordinates are multiples of
// the output stride; every split-layer output position belongs to exactly one
// tile's chunk. Adjacent input spans overlap by (receptive - stride) pixels.
struct TilePlan {
  std::vector<int64_t> input_spatial;
  std::vector<int64_t> requested_tile;
  std::vector<int64_t> grid;             // tile count per dim
  std::vector<TileInfo> tiles;
  std::vector<int64_t> output_stride;    // per dim
  std::vector<int64_t> overlap;          // adjacent-tile input overlap per dim
  std::vector<int64_t> context;          // split-space one-sided halo for backward
  std::vector<int64_t> split_extent;     // split-layer spatial extents
  std::vector<int64_t> effective_input;  // input pixels that influence any output
  std::vector<int64_t> receptive;        // receptive extent of one split position

  size_t tile_count() const { return tiles.size(); }
};

// Chop the input into tiles no larger than requested_tile (clamped to the
// input when bigger). The report supplies stride and overlap; it must belong
// to this network's prefix.
TilePlan plan_tiles(const Network& net, const std::vector<int64_t>& input_spatial,
                    const std::vector<int64_t>& requested_tile, const ProbeReport& report);

// Same, but aiming for a given tile count per dim.
TilePlan plan_grid(const Network& net, const std::vector<int64_t>& input_spatial,
                   const std::vector<int64_t>& grid, const ProbeReport& report);

struct StreamState {
  // tail_acts[0] is the concatenated split activation (the checkpoint);
  // tail_acts[i+1] the output of tail layer i.
  std::vector<Tensor> tail_acts;
  std::vector<ArgmaxMap> tail_argmax;  // parallel to tail layers
  bool valid = false;

  const Tensor& checkpoint() const { return tail_acts.front(); }
  const Tensor& prediction() const { return tail_acts.back(); }
};

struct StreamOptions {
  int threads = 1;
  bool want_input_grad = false;
  // Testing hook: shave this many split positions off the backward halo to
  // demonstrate that the reconstruction then fails.
  int64_t corrupt_context = 0;
};

// Tile-by-tile prefix forward into the checkpoint, then the tail run
// conventionally. Holds one tile's activations at a time plus the checkpoint.
// Returns state.prediction().
const Tensor& stream_forward(const Network& net, const Tensor& input, const TilePlan& plan,
                             StreamState& state, const StreamOptions& opts = {});

// Tail backward once, then per-tile prefix recomputation with unique-region
// kernel-gradient accumulation, summed in fixed row-major tile order.
// Consumes the state (activations are freed as they are used up).
GradientSet stream_backward(const Network& net, const Tensor& input, const TilePlan& plan,
                            StreamState& state, const Tensor& loss_grad,
                            const StreamOptions& opts = {});

// Slice of the split-layer gradient a tile needs: its own chunk plus halo.
Region tile_extended_out_region(const TilePlan& plan, size_t tile_index);
Tensor crop_relevant_gradient(const Tensor& split_grad, const TilePlan& plan, size_t tile_index);

// Cell boundaries of the gradient-claim partition per dim. `level` is a
// prefix layer index (cells over that layer's output) or -1 for the input.
std::vector<std::vector<int64_t>> claim_boundaries(const Network& net, const TilePlan& plan,
                                                   int64_t level);

// Marks regions exactly once; used to prove claim coverage during backward.
class FilledMask {
 public:
  explicit FilledMask(std::vector<int64_t> extents);
  void mark(const Region& r);       // InternalError on a double mark
  void require_complete() const;    // InternalError on a gap
  int64_t marked() const { return marked_; }

 private:
  std::vector<int64_t> extents_;
  std::vector<uint8_t> cells_;
  int64_t marked_ = 0;
};

// Per-channel mean / stddev of the split activation over a dataset, streamed
// tile by tile (the full map is never materialized). A negative variance from
// cancellation is clamped to zero and flagged.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  bool clamped = false;
};
ChannelStats stream_stats(const Network& net, const std::vector<Tensor>& inputs,
                          const TilePlan& plan);

// |input gradient| for one class logit, clipped at its 99th percentile and
// rescaled to [0, 1]. Output shape equals the input's.
Tensor saliency(const Network& net, const Tensor& input, const TilePlan& plan,
                int64_t class_index, const StreamOptions& opts = {});

}  // namespace streamconv
