#include "streamconv/streaming.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <mutex>
#include <thread>

#include "streamconv/error.hpp"
#include "streamconv/ledger.hpp"

namespace streamconv {

namespace {

int64_t product(const std::vector<int64_t>& v) {
  int64_t p = 1;
  for (int64_t x : v) p *= x;
  return p;
}

std::vector<int64_t> spatial_of(const Tensor& t) {
  return {t.shape().begin() + 2, t.shape().end()};
}

void set_phase(const char* name) {
  if (AllocationLedger* l = AllocationLedger::active()) l->set_phase(name);
}

// Split [0, total) into chunks of `chunk` (last one shorter).
struct DimChunks {
  std::vector<int64_t> start, extent;
};

DimChunks chop(int64_t total, int64_t chunk) {
  DimChunks c;
  for (int64_t o = 0; o < total; o += chunk) {
    c.start.push_back(o);
    c.extent.push_back(std::min(chunk, total - o));
  }
  return c;
}

// Copy `tile` into `dst` at spatial region r. The caller guarantees regions
// never overlap; a FilledMask enforces it.
void paste(Tensor& dst, const Tensor& tile, const Region& r) {
  check_same_dtype(dst, tile, "paste");
  if (dst.rank() != tile.rank() || (dst.rank() != 3 && dst.rank() != 4)) {
    throw ShapeError("paste expects matching rank 3 or 4 tensors");
  }
  if (dst.shape()[0] != tile.shape()[0] || dst.shape()[1] != tile.shape()[1]) {
    throw ShapeError("paste batch/channel mismatch");
  }
  auto dsp = spatial_of(dst);
  auto tsp = spatial_of(tile);
  if (tsp != r.extent) throw ShapeError("paste tile extent does not match region");
  for (size_t d = 0; d < dsp.size(); ++d) {
    if (r.pos[d] < 0 || r.pos[d] + r.extent[d] > dsp[d]) {
      throw ShapeError("paste region out of bounds");
    }
  }
  bool one_d = (dst.rank() == 3);
  int64_t N = dst.shape()[0], C = dst.shape()[1];
  int64_t OH = one_d ? 1 : dsp[0], OW = one_d ? dsp[0] : dsp[1];
  int64_t ph = one_d ? 0 : r.pos[0], pw = one_d ? r.pos[0] : r.pos[1];
  int64_t eh = one_d ? 1 : r.extent[0], ew = one_d ? r.extent[0] : r.extent[1];
  size_t esz = dtype_size(dst.dtype());
  size_t row = static_cast<size_t>(ew) * esz;
  const std::byte* src = nullptr;
  std::byte* out = nullptr;
  if (dst.dtype() == Dtype::F64) {
    src = reinterpret_cast<const std::byte*>(tile.data<double>().data());
    out = reinterpret_cast<std::byte*>(dst.data<double>().data());
  } else {
    src = reinterpret_cast<const std::byte*>(tile.data<float>().data());
    out = reinterpret_cast<std::byte*>(dst.data<float>().data());
  }
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const std::byte* ip = src + static_cast<size_t>(((n * C + c) * eh) * ew) * esz;
      std::byte* op = out + static_cast<size_t>(((n * C + c) * OH) * OW) * esz;
      for (int64_t h = 0; h < eh; ++h) {
        std::memcpy(op + static_cast<size_t>((ph + h) * OW + pw) * esz,
                    ip + static_cast<size_t>(h * ew) * esz, row);
      }
    }
  }
}

// Runs fn(0..n-1); with threads > 1 the order is arbitrary but every call
// still happens exactly once. The first exception wins and is rethrown.
void run_tiles(int64_t n, int threads, const std::function<void(int64_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  int workers = static_cast<int>(std::min<int64_t>(threads, n));
  std::atomic<int64_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  auto body = [&]() {
    for (;;) {
      int64_t i = next.fetch_add(1);
      if (i >= n) return;
      {
        std::lock_guard<std::mutex> lk(err_mu);
        if (err) return;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!err) err = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

void local_footprint(const LayerDesc& d, int64_t& k, int64_t& s) {
  switch (d.kind) {
    case LayerKind::Conv:
    case LayerKind::MaxPool:
      k = d.kernel;
      s = d.stride;
      return;
    case LayerKind::ReLU:
      k = 1;
      s = 1;
      return;
    default:
      throw InternalError("non-local layer in the streamed prefix");
  }
}

// Geometry of one split-layer output position seen from the input of each
// prefix layer: levels[l] = (support extent r, spacing t) at layer l's input,
// levels[split] = (1, 1). levels[0] equals (receptive, output stride).
struct LevelGeom {
  std::vector<int64_t> r, t;
};

std::vector<LevelGeom> level_geometry(const Network& net) {
  int64_t sr = net.spatial_rank();
  int64_t split = net.split();
  std::vector<LevelGeom> lv(static_cast<size_t>(split) + 1);
  lv[split] = {std::vector<int64_t>(sr, 1), std::vector<int64_t>(sr, 1)};
  for (int64_t l = split - 1; l >= 0; --l) {
    int64_t k = 0, s = 0;
    local_footprint(net.spec().layers[l], k, s);
    lv[l].r.resize(sr);
    lv[l].t.resize(sr);
    for (int64_t d = 0; d < sr; ++d) {
      lv[l].r[d] = (lv[l + 1].r[d] - 1) * s + k;
      lv[l].t[d] = lv[l + 1].t[d] * s;
    }
  }
  return lv;
}

std::vector<int64_t> grid_index(const TilePlan& plan, size_t tile) {
  std::vector<int64_t> idx(plan.grid.size());
  int64_t rem = static_cast<int64_t>(tile);
  for (size_t d = plan.grid.size(); d-- > 0;) {
    idx[d] = rem % plan.grid[d];
    rem /= plan.grid[d];
  }
  return idx;
}

// Claim boundaries over level geometry (r, t): cell i of a dim is
// [B[i], B[i+1]). A tile's cell starts where the previous tile's own span
// ends, so every effective position lands in exactly one cell. Positions in a
// cell ahead of its owner's span (possible when t > r) feed no split output
// and carry an exactly zero gradient.
std::vector<std::vector<int64_t>> boundaries_for(const TilePlan& plan,
                                                 const std::vector<int64_t>& r,
                                                 const std::vector<int64_t>& t) {
  size_t sr = plan.grid.size();
  std::vector<std::vector<int64_t>> bounds(sr);
  for (size_t d = 0; d < sr; ++d) {
    int64_t chunk = plan.tiles[0].out_extent[d];
    DimChunks ch = chop(plan.split_extent[d], chunk);
    int64_t eff = (plan.split_extent[d] - 1) * t[d] + r[d];
    bounds[d].resize(ch.start.size() + 1);
    bounds[d][0] = 0;
    for (size_t i = 0; i < ch.start.size(); ++i) {
      int64_t own_end = (ch.start[i] + ch.extent[i] - 1) * t[d] + r[d];
      bounds[d][i + 1] = (i + 1 == ch.start.size()) ? eff : own_end;
      if (bounds[d][i + 1] <= bounds[d][i]) {
        throw InternalError("claim boundaries are not strictly increasing");
      }
    }
  }
  return bounds;
}

TilePlan build_plan(const Network& net, const std::vector<int64_t>& input_spatial,
                    const std::vector<int64_t>& tile_request, const ProbeReport& report) {
  int64_t sr = net.spatial_rank();
  if (static_cast<int64_t>(input_spatial.size()) != sr ||
      static_cast<int64_t>(tile_request.size()) != sr) {
    throw UsageError("plan ranks do not match the network's spatial rank");
  }
  PrefixGeometry geom = prefix_geometry(net);
  if (report.output_stride != geom.stride) {
    throw UsageError("overlap report does not match this network (output stride differs)");
  }
  std::vector<int64_t> w0 = report.input_overlap();
  for (int64_t d = 0; d < sr; ++d) {
    int64_t expect = std::max<int64_t>(geom.receptive[d] - geom.stride[d], 0);
    if (w0[d] != expect) {
      throw UsageError("overlap report does not match this network (input overlap " +
                       std::to_string(w0[d]) + ", geometry says " + std::to_string(expect) + ")");
    }
  }

  TilePlan plan;
  plan.input_spatial = input_spatial;
  plan.requested_tile = tile_request;
  plan.output_stride = geom.stride;
  plan.receptive = geom.receptive;
  plan.grid.resize(sr);
  plan.overlap.resize(sr);
  plan.context.resize(sr);
  plan.split_extent.resize(sr);
  plan.effective_input.resize(sr);

  std::vector<DimChunks> chunks(static_cast<size_t>(sr));
  for (int64_t d = 0; d < sr; ++d) {
    int64_t R = geom.receptive[d], S = geom.stride[d];
    // Split extent for this input, folded layer by layer.
    int64_t m = input_spatial[d];
    for (int64_t l = 0; l < net.split(); ++l) {
      int64_t k = 0, s = 0;
      local_footprint(net.spec().layers[l], k, s);
      m = conv_out_extent(m, k, s, "input too small for the streamed prefix");
    }
    plan.split_extent[d] = m;
    plan.effective_input[d] = (m - 1) * S + R;
    plan.overlap[d] = std::max<int64_t>(R - S, 0);
    plan.context[d] = (plan.overlap[d] + S - 1) / S;

    int64_t T = std::min(tile_request[d], input_spatial[d]);
    if (T < R) {
      throw UsageError("tile extent " + std::to_string(T) + " is smaller than the receptive extent " +
                       std::to_string(R) + "; a tile must cover at least one output");
    }
    T -= (T - R) % S;  // aligned tiles never waste trailing positions
    int64_t out_chunk = (T - R) / S + 1;
    chunks[d] = chop(m, out_chunk);
    plan.grid[d] = static_cast<int64_t>(chunks[d].start.size());
  }

  int64_t n_tiles = product(plan.grid);
  plan.tiles.resize(static_cast<size_t>(n_tiles));
  for (int64_t t = 0; t < n_tiles; ++t) {
    std::vector<int64_t> idx(static_cast<size_t>(sr));
    int64_t rem = t;
    for (int64_t d = sr - 1; d >= 0; --d) {
      idx[d] = rem % plan.grid[d];
      rem /= plan.grid[d];
    }
    TileInfo& ti = plan.tiles[t];
    ti.in_pos.resize(sr);
    ti.in_extent.resize(sr);
    ti.out_pos.resize(sr);
    ti.out_extent.resize(sr);
    for (int64_t d = 0; d < sr; ++d) {
      int64_t R = geom.receptive[d], S = geom.stride[d];
      ti.out_pos[d] = chunks[d].start[idx[d]];
      ti.out_extent[d] = chunks[d].extent[idx[d]];
      ti.in_pos[d] = ti.out_pos[d] * S;
      ti.in_extent[d] = (ti.out_extent[d] - 1) * S + R;
    }
  }
  return plan;
}

int64_t split_channels(const Network& net) {
  int64_t c = net.input_shape()[1];
  for (int64_t l = 0; l < net.split(); ++l) {
    if (net.spec().layers[l].kind == LayerKind::Conv) c = net.spec().layers[l].out_channels;
  }
  return c;
}

void check_plan_matches(const Network& net, const Tensor& input, const TilePlan& plan) {
  if (input.dtype() != net.dtype()) {
    throw DtypeError("input dtype does not match the network");
  }
  if (input.rank() != net.spatial_rank() + 2) {
    throw ShapeError("input rank does not match the network");
  }
  if (input.shape()[1] != net.input_shape()[1]) {
    throw ShapeError("input channel count does not match the network");
  }
  if (spatial_of(input) != plan.input_spatial) {
    throw UsageError("plan was built for input extents that do not match this input");
  }
  if (plan.tiles.empty()) throw UsageError("plan has no tiles");
}

}  // namespace

TilePlan plan_tiles(const Network& net, const std::vector<int64_t>& input_spatial,
                    const std::vector<int64_t>& requested_tile, const ProbeReport& report) {
  return build_plan(net, input_spatial, requested_tile, report);
}

TilePlan plan_grid(const Network& net, const std::vector<int64_t>& input_spatial,
                   const std::vector<int64_t>& grid, const ProbeReport& report) {
  int64_t sr = net.spatial_rank();
  if (static_cast<int64_t>(grid.size()) != sr) {
    throw UsageError("grid rank does not match the network's spatial rank");
  }
  PrefixGeometry geom = prefix_geometry(net);
  std::vector<int64_t> tile(static_cast<size_t>(sr));
  for (int64_t d = 0; d < sr; ++d) {
    if (grid[d] < 1) throw UsageError("grid counts must be positive");
    int64_t m = input_spatial[d];
    for (int64_t l = 0; l < net.split(); ++l) {
      int64_t k = 0, s = 0;
      local_footprint(net.spec().layers[l], k, s);
      m = conv_out_extent(m, k, s, "input too small for the streamed prefix");
    }
    int64_t want = std::min(grid[d], m);
    int64_t chunk = (m + want - 1) / want;
    tile[d] = (chunk - 1) * geom.stride[d] + geom.receptive[d];
  }
  return build_plan(net, input_spatial, tile, report);
}

FilledMask::FilledMask(std::vector<int64_t> extents) : extents_(std::move(extents)) {
  cells_.assign(static_cast<size_t>(product(extents_)), 0);
}

void FilledMask::mark(const Region& r) {
  if (r.pos.size() != extents_.size() || r.extent.size() != extents_.size()) {
    throw InternalError("filled mask: region rank mismatch");
  }
  for (size_t d = 0; d < extents_.size(); ++d) {
    if (r.pos[d] < 0 || r.extent[d] < 1 || r.pos[d] + r.extent[d] > extents_[d]) {
      throw InternalError("filled mask: region out of bounds");
    }
  }
  // Row-major walk over the region.
  std::vector<int64_t> c(r.pos);
  for (;;) {
    int64_t flat = 0;
    for (size_t d = 0; d < extents_.size(); ++d) flat = flat * extents_[d] + c[d];
    uint8_t& cell = cells_[static_cast<size_t>(flat)];
    if (cell) throw InternalError("filled mask: cell claimed twice");
    cell = 1;
    ++marked_;
    size_t d = extents_.size() - 1;
    for (;;) {
      if (++c[d] < r.pos[d] + r.extent[d]) break;
      c[d] = r.pos[d];
      if (d == 0) return;
      --d;
    }
  }
}

void FilledMask::require_complete() const {
  if (marked_ != static_cast<int64_t>(cells_.size())) {
    throw InternalError("filled mask: " + std::to_string(cells_.size() - marked_) +
                        " cells were never claimed");
  }
}

Region tile_extended_out_region(const TilePlan& plan, size_t tile_index) {
  if (tile_index >= plan.tiles.size()) throw UsageError("tile index out of range");
  const TileInfo& ti = plan.tiles[tile_index];
  Region r;
  size_t sr = plan.grid.size();
  r.pos.resize(sr);
  r.extent.resize(sr);
  for (size_t d = 0; d < sr; ++d) {
    int64_t lo = std::max<int64_t>(ti.out_pos[d] - plan.context[d], 0);
    int64_t hi = std::min(ti.out_pos[d] + ti.out_extent[d] + plan.context[d], plan.split_extent[d]);
    r.pos[d] = lo;
    r.extent[d] = hi - lo;
  }
  return r;
}

Tensor crop_relevant_gradient(const Tensor& split_grad, const TilePlan& plan, size_t tile_index) {
  if (spatial_of(split_grad) != plan.split_extent) {
    throw ShapeError("gradient extents do not match the plan's split extents");
  }
  return crop(split_grad, tile_extended_out_region(plan, tile_index));
}

std::vector<std::vector<int64_t>> claim_boundaries(const Network& net, const TilePlan& plan,
                                                   int64_t level) {
  if (level < -1 || level >= net.split()) {
    throw UsageError("claim level must be -1 (input) or a prefix layer index");
  }
  std::vector<LevelGeom> lv = level_geometry(net);
  const LevelGeom& g = lv[static_cast<size_t>(level + 1)];
  return boundaries_for(plan, g.r, g.t);
}

const Tensor& stream_forward(const Network& net, const Tensor& input, const TilePlan& plan,
                             StreamState& state, const StreamOptions& opts) {
  check_plan_matches(net, input, plan);
  int64_t split = net.split();
  int64_t batch = input.shape()[0];

  set_phase("stream_prefix");
  state.tail_acts.clear();
  state.tail_argmax.clear();
  state.valid = false;

  std::vector<int64_t> dest_shape{batch, split_channels(net)};
  dest_shape.insert(dest_shape.end(), plan.split_extent.begin(), plan.split_extent.end());
  Tensor dest(input.dtype(), dest_shape);
  FilledMask mask(plan.split_extent);
  std::mutex mu;

  run_tiles(static_cast<int64_t>(plan.tiles.size()), opts.threads, [&](int64_t t) {
    const TileInfo& ti = plan.tiles[static_cast<size_t>(t)];
    Tensor x = crop(input, Region{ti.in_pos, ti.in_extent});
    for (int64_t l = 0; l < split; ++l) {
      x = layer_forward(net.layers()[static_cast<size_t>(l)], x, nullptr);
    }
    if (spatial_of(x) != ti.out_extent) {
      throw InternalError("tile output extents " + x.shape_str() + " do not match the plan");
    }
    Region r{ti.out_pos, ti.out_extent};
    std::lock_guard<std::mutex> lk(mu);
    mask.mark(r);
    paste(dest, x, r);
  });
  mask.require_complete();

  set_phase("stream_tail");
  state.tail_acts.push_back(std::move(dest));
  size_t n_tail = net.layers().size() - static_cast<size_t>(split);
  state.tail_argmax.assign(n_tail, ArgmaxMap{});
  for (size_t i = 0; i < n_tail; ++i) {
    state.tail_acts.push_back(layer_forward(net.layers()[static_cast<size_t>(split) + i],
                                            state.tail_acts.back(), &state.tail_argmax[i]));
  }
  state.valid = true;
  return state.prediction();
}

GradientSet stream_backward(const Network& net, const Tensor& input, const TilePlan& plan,
                            StreamState& state, const Tensor& loss_grad,
                            const StreamOptions& opts) {
  check_plan_matches(net, input, plan);
  if (!state.valid) {
    throw UsageError("stream state is stale; run stream_forward before stream_backward");
  }
  if (loss_grad.shape() != state.prediction().shape()) {
    throw ShapeError("loss gradient shape " + loss_grad.shape_str() +
                     " does not match the prediction " + state.prediction().shape_str());
  }
  size_t n = net.layers().size();
  int64_t split = net.split();
  int64_t sr = net.spatial_rank();
  GradientSet grads;
  grads.kernel.resize(n);
  grads.bias.resize(n);

  // Tail backward on the stored activations, freeing each as it is consumed.
  // After this the checkpoint itself is released; tiles recompute their own.
  set_phase("tail_backward");
  Tensor g = loss_grad;
  for (size_t ri = n; ri-- > static_cast<size_t>(split);) {
    const Layer& layer = net.layers()[ri];
    size_t ai = ri - static_cast<size_t>(split);  // tail_acts index of this layer's input
    if (ai + 1 < state.tail_acts.size()) state.tail_acts[ai + 1] = Tensor();
    const Tensor& in = state.tail_acts[ai];
    switch (layer.desc.kind) {
      case LayerKind::Conv: {
        grads.kernel[ri] = conv_backward_kernel(in, g, layer.conv);
        if (!layer.conv.bias.empty()) grads.bias[ri] = conv_backward_bias(g);
        g = conv_backward_input(g, layer.conv, spatial_of(in));
        break;
      }
      case LayerKind::MaxPool:
        g = maxpool_backward(g, state.tail_argmax[ai], in.shape());
        break;
      case LayerKind::ReLU:
        g = relu_backward(g, in);
        break;
      case LayerKind::Flatten: {
        Tensor gg = std::move(g);
        g = std::move(gg).reshaped(in.shape());
        break;
      }
      case LayerKind::Linear: {
        LinearGrads lg = linear_backward(in, g, layer.linear);
        grads.kernel[ri] = std::move(lg.weight);
        grads.bias[ri] = std::move(lg.bias);
        Tensor gin = std::move(lg.input);
        g = std::move(gin).reshaped(in.shape());
        break;
      }
    }
  }
  state.tail_acts.clear();
  state.tail_argmax.clear();
  state.valid = false;

  set_phase("prefix_backward");
  if (spatial_of(g) != plan.split_extent) {
    throw InternalError("split gradient extents do not match the plan");
  }

  // Read-only context shared by the tile workers.
  std::vector<LevelGeom> lv = level_geometry(net);
  std::vector<int64_t> ker(static_cast<size_t>(split)), str(static_cast<size_t>(split));
  for (int64_t l = 0; l < split; ++l) {
    local_footprint(net.spec().layers[static_cast<size_t>(l)], ker[l], str[l]);
  }
  std::vector<std::vector<std::vector<int64_t>>> bounds(static_cast<size_t>(split));
  for (int64_t l = 0; l < split; ++l) {
    if (net.spec().layers[static_cast<size_t>(l)].kind == LayerKind::Conv) {
      bounds[l] = boundaries_for(plan, lv[l + 1].r, lv[l + 1].t);
    }
  }
  std::vector<std::vector<int64_t>> in_bounds;
  Tensor input_grad;
  if (opts.want_input_grad) {
    in_bounds = boundaries_for(plan, lv[0].r, lv[0].t);
    input_grad = Tensor(input.dtype(), input.shape());
  }

  std::vector<int64_t> gamma(static_cast<size_t>(sr));
  for (int64_t d = 0; d < sr; ++d) {
    gamma[d] = std::max<int64_t>(plan.context[d] - opts.corrupt_context, 0);
  }

  // One coverage mask per prefix level (grid granularity; the per-dim claim
  // boundaries are a partition by construction) plus one for the input.
  std::vector<FilledMask> masks;
  for (int64_t l = 0; l <= split; ++l) masks.emplace_back(plan.grid);
  std::mutex mask_mu;

  struct TileGrads {
    std::vector<Tensor> kernel, bias;
  };
  std::vector<TileGrads> slots(plan.tiles.size());

  run_tiles(static_cast<int64_t>(plan.tiles.size()), opts.threads, [&](int64_t t) {
    const TileInfo& ti = plan.tiles[static_cast<size_t>(t)];
    std::vector<int64_t> idx = grid_index(plan, static_cast<size_t>(t));
    TileGrads& tg = slots[static_cast<size_t>(t)];
    tg.kernel.resize(static_cast<size_t>(split));
    tg.bias.resize(static_cast<size_t>(split));

    // Extended split region: the tile's own chunk plus the halo that makes
    // gradients over the own span complete at every level.
    Region ext;
    ext.pos.resize(static_cast<size_t>(sr));
    ext.extent.resize(static_cast<size_t>(sr));
    for (int64_t d = 0; d < sr; ++d) {
      int64_t lo = std::max<int64_t>(ti.out_pos[d] - gamma[d], 0);
      int64_t hi = std::min(ti.out_pos[d] + ti.out_extent[d] + gamma[d], plan.split_extent[d]);
      ext.pos[d] = lo;
      ext.extent[d] = hi - lo;
    }
    Tensor gt = crop(g, ext);

    Region in_r;
    in_r.pos.resize(static_cast<size_t>(sr));
    in_r.extent.resize(static_cast<size_t>(sr));
    for (int64_t d = 0; d < sr; ++d) {
      in_r.pos[d] = ext.pos[d] * plan.output_stride[d];
      in_r.extent[d] = (ext.extent[d] - 1) * plan.output_stride[d] + plan.receptive[d];
    }

    // Checkpoint replay of the prefix over the extended span.
    std::vector<Tensor> acts;
    std::vector<ArgmaxMap> argmax(static_cast<size_t>(split));
    std::vector<std::vector<int64_t>> gstart(static_cast<size_t>(split) + 1);
    std::vector<std::vector<int64_t>> extents(static_cast<size_t>(split) + 1);
    acts.push_back(crop(input, in_r));
    gstart[0] = in_r.pos;
    extents[0] = in_r.extent;
    for (int64_t l = 0; l < split; ++l) {
      acts.push_back(layer_forward(net.layers()[static_cast<size_t>(l)], acts.back(), &argmax[l]));
      gstart[l + 1].resize(static_cast<size_t>(sr));
      for (int64_t d = 0; d < sr; ++d) {
        if (gstart[l][d] % str[l] != 0) {
          throw InternalError("tile span start is not aligned to the layer stride");
        }
        gstart[l + 1][d] = gstart[l][d] / str[l];
      }
      extents[l + 1] = spatial_of(acts.back());
    }
    if (extents[split] != ext.extent || gstart[split] != ext.pos) {
      throw InternalError("recomputed tile does not line up with the split crop");
    }

    for (size_t l = static_cast<size_t>(split); l-- > 0;) {
      acts[l + 1] = Tensor();  // the output itself is not needed for backward
      const Layer& layer = net.layers()[l];
      if (layer.desc.kind == LayerKind::Conv) {
        // This tile's claim cell at the layer's output, clipped to the part
        // the tile actually computed; the remainder feeds no split output and
        // is exactly zero everywhere, so skipping it drops nothing.
        std::vector<int64_t> vs(static_cast<size_t>(sr)), ve(static_cast<size_t>(sr));
        bool empty = false;
        for (int64_t d = 0; d < sr; ++d) {
          int64_t lo = bounds[l][d][idx[d]];
          int64_t hi = bounds[l][d][idx[d] + 1];
          vs[d] = std::max(lo, gstart[l + 1][d]);
          ve[d] = std::min(hi, gstart[l + 1][d] + extents[l + 1][d]);
          if (ve[d] <= vs[d]) empty = true;
        }
        if (!empty) {
          Region gcell;
          gcell.pos.resize(static_cast<size_t>(sr));
          gcell.extent.resize(static_cast<size_t>(sr));
          Region icell = gcell;
          for (int64_t d = 0; d < sr; ++d) {
            gcell.pos[d] = vs[d] - gstart[l + 1][d];
            gcell.extent[d] = ve[d] - vs[d];
            icell.pos[d] = gcell.pos[d] * str[l];
            icell.extent[d] = (gcell.extent[d] - 1) * str[l] + ker[l];
          }
          Tensor gslice = crop(gt, gcell);
          Tensor islice = crop(acts[l], icell);
          Tensor dk = conv_backward_kernel(islice, gslice, layer.conv);
          if (tg.kernel[l].empty()) {
            tg.kernel[l] = std::move(dk);
          } else {
            accumulate(tg.kernel[l], dk);
          }
          if (!layer.conv.bias.empty()) {
            Tensor db = conv_backward_bias(gslice);
            if (tg.bias[l].empty()) {
              tg.bias[l] = std::move(db);
            } else {
              accumulate(tg.bias[l], db);
            }
          }
        }
      }
      {
        std::lock_guard<std::mutex> lk(mask_mu);
        masks[l].mark(Region{idx, std::vector<int64_t>(static_cast<size_t>(sr), 1)});
      }
      gt = layer_backward_input(layer, gt, acts[l], argmax[l]);
    }

    if (opts.want_input_grad) {
      std::vector<int64_t> vs(static_cast<size_t>(sr)), ve(static_cast<size_t>(sr));
      bool empty = false;
      for (int64_t d = 0; d < sr; ++d) {
        int64_t lo = in_bounds[d][idx[d]];
        int64_t hi = in_bounds[d][idx[d] + 1];
        vs[d] = std::max(lo, gstart[0][d]);
        ve[d] = std::min(hi, gstart[0][d] + extents[0][d]);
        if (ve[d] <= vs[d]) empty = true;
      }
      std::lock_guard<std::mutex> lk(mask_mu);
      masks[static_cast<size_t>(split)].mark(
          Region{idx, std::vector<int64_t>(static_cast<size_t>(sr), 1)});
      if (!empty) {
        Region local;
        local.pos.resize(static_cast<size_t>(sr));
        local.extent.resize(static_cast<size_t>(sr));
        for (int64_t d = 0; d < sr; ++d) {
          local.pos[d] = vs[d] - gstart[0][d];
          local.extent[d] = ve[d] - vs[d];
        }
        Tensor slice = crop(gt, local);
        paste(input_grad, slice, Region{vs, local.extent});
      }
    }
  });

  g = Tensor();  // the split gradient map is no longer needed

  for (int64_t l = 0; l <= split; ++l) {
    if (l < split || opts.want_input_grad) masks[l].require_complete();
  }

  // Fixed row-major reduction so thread scheduling cannot change the result.
  for (size_t t = 0; t < slots.size(); ++t) {
    for (size_t l = 0; l < static_cast<size_t>(split); ++l) {
      if (!slots[t].kernel[l].empty()) {
        if (grads.kernel[l].empty()) {
          grads.kernel[l] = std::move(slots[t].kernel[l]);
        } else {
          accumulate(grads.kernel[l], slots[t].kernel[l]);
        }
      }
      if (!slots[t].bias[l].empty()) {
        if (grads.bias[l].empty()) {
          grads.bias[l] = std::move(slots[t].bias[l]);
        } else {
          accumulate(grads.bias[l], slots[t].bias[l]);
        }
      }
    }
  }
  if (opts.want_input_grad) grads.input = std::move(input_grad);
  return grads;
}

ChannelStats stream_stats(const Network& net, const std::vector<Tensor>& inputs,
                          const TilePlan& plan) {
  if (inputs.empty()) throw UsageError("stream_stats needs at least one input");
  int64_t split = net.split();
  int64_t channels = split_channels(net);
  std::vector<double> sum(static_cast<size_t>(channels), 0.0);
  std::vector<double> sumsq(static_cast<size_t>(channels), 0.0);
  int64_t count = 0;

  set_phase("stream_stats");
  for (const Tensor& input : inputs) {
    check_plan_matches(net, input, plan);
    for (const TileInfo& ti : plan.tiles) {
      Tensor x = crop(input, Region{ti.in_pos, ti.in_extent});
      for (int64_t l = 0; l < split; ++l) {
        x = layer_forward(net.layers()[static_cast<size_t>(l)], x, nullptr);
      }
      if (spatial_of(x) != ti.out_extent) {
        throw InternalError("tile output extents do not match the plan");
      }
      int64_t ns = product(ti.out_extent);
      int64_t batch = x.shape()[0];
      auto bump = [&](auto span) {
        for (int64_t n = 0; n < batch; ++n) {
          for (int64_t c = 0; c < channels; ++c) {
            const auto* p = span.data() + (n * channels + c) * ns;
            double s = 0, s2 = 0;
            for (int64_t i = 0; i < ns; ++i) {
              double v = static_cast<double>(p[i]);
              s += v;
              s2 += v * v;
            }
            sum[static_cast<size_t>(c)] += s;
            sumsq[static_cast<size_t>(c)] += s2;
          }
        }
      };
      if (x.dtype() == Dtype::F64) {
        bump(x.data<double>());
      } else {
        bump(x.data<float>());
      }
      count += batch * ns;
    }
  }

  ChannelStats st;
  st.mean.resize(static_cast<size_t>(channels));
  st.stddev.resize(static_cast<size_t>(channels));
  for (int64_t c = 0; c < channels; ++c) {
    double mean = sum[c] / static_cast<double>(count);
    double var = sumsq[c] / static_cast<double>(count) - mean * mean;
    if (var < 0) {
      // Catastrophic cancellation can push the estimate slightly negative.
      var = 0;
      st.clamped = true;
    }
    st.mean[c] = mean;
    st.stddev[c] = std::sqrt(var);
  }
  return st;
}

Tensor saliency(const Network& net, const Tensor& input, const TilePlan& plan,
                int64_t class_index, const StreamOptions& opts) {
  StreamState state;
  const Tensor& pred = stream_forward(net, input, plan, state, opts);
  if (pred.rank() != 2) {
    throw UsageError("saliency needs a classifier head producing (batch, classes) logits");
  }
  int64_t classes = pred.shape()[1];
  if (class_index < 0 || class_index >= classes) {
    throw UsageError("class index " + std::to_string(class_index) + " out of range [0, " +
                     std::to_string(classes) + ")");
  }
  Tensor lg(pred.dtype(), pred.shape());
  for (int64_t nrow = 0; nrow < pred.shape()[0]; ++nrow) {
    lg.set_at(nrow * classes + class_index, 1.0);
  }
  StreamOptions bopts = opts;
  bopts.want_input_grad = true;
  GradientSet grads = stream_backward(net, input, plan, state, lg, bopts);

  Tensor out = std::move(grads.input);
  std::vector<double> mags(static_cast<size_t>(out.numel()));
  for (int64_t i = 0; i < out.numel(); ++i) {
    double v = std::abs(out.value_at(i));
    out.set_at(i, v);
    mags[static_cast<size_t>(i)] = v;
  }
  // Nearest-rank 99th percentile as the clip ceiling; a handful of extreme
  // pixels otherwise flattens everything else to black.
  std::sort(mags.begin(), mags.end());
  size_t rank = static_cast<size_t>(
      std::ceil(0.99 * static_cast<double>(mags.size())));
  double cap = mags[std::min(mags.size() - 1, rank == 0 ? 0 : rank - 1)];
  if (cap > 0) {
    for (int64_t i = 0; i < out.numel(); ++i) {
      out.set_at(i, std::min(out.value_at(i), cap) / cap);
    }
  }
  return out;
}

}  // namespace streamconv
