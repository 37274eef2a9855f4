#include "streamconv/probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "streamconv/error.hpp"

namespace streamconv {

namespace {

int64_t product(const std::vector<int64_t>& v) {
  int64_t p = 1;
  for (int64_t x : v) p *= x;
  return p;
}

// (kernel, stride) footprint of a prefix layer; ReLU is (1, 1).
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
      throw InternalError(std::string("non-local layer '") + layer_kind_name(d.kind) +
                          "' in the streamed prefix");
  }
}

void check_widths_fit(const BorderWidths& w, const std::vector<int64_t>& extents,
                      const char* where) {
  for (size_t d = 0; d < w.per_dim.size(); ++d) {
    for (int side = 0; side < 2; ++side) {
      if (2 * w.per_dim[d][side] >= extents[d]) {
        throw ProbeError(std::string("probe tile too small: border width ") +
                         std::to_string(w.per_dim[d][side]) + " fills half of extent " +
                         std::to_string(extents[d]) + " at " + where);
      }
    }
  }
}

}  // namespace

std::vector<int64_t> ProbeReport::input_overlap() const {
  if (layers.empty()) return std::vector<int64_t>(output_stride.size(), 0);
  const BorderWidths& w = layers.front().invalid_backward;
  std::vector<int64_t> out(w.per_dim.size());
  for (size_t d = 0; d < out.size(); ++d) out[d] = std::max(w.per_dim[d][0], w.per_dim[d][1]);
  return out;
}

bool ProbeReport::same_widths(const ProbeReport& other) const {
  return layers == other.layers && output_stride == other.output_stride;
}

PrefixGeometry prefix_geometry(const Network& net) {
  int64_t sr = net.spatial_rank();
  PrefixGeometry g{std::vector<int64_t>(sr, 1), std::vector<int64_t>(sr, 1)};
  for (int64_t l = 0; l < net.split(); ++l) {
    int64_t k = 0, s = 0;
    local_footprint(net.spec().layers[l], k, s);
    for (int64_t d = 0; d < sr; ++d) {
      g.receptive[d] += (k - 1) * g.stride[d];
      g.stride[d] *= s;
    }
  }
  return g;
}

BorderWidths non_max_indices(const Tensor& t, double epsilon, int64_t period) {
  if (t.rank() < 3) throw ShapeError("non_max_indices expects (batch, channels, spatial...)");
  if (period < 1) throw UsageError("non_max_indices period must be >= 1");
  int64_t sr = t.rank() - 2;
  std::vector<int64_t> ext(t.shape().begin() + 2, t.shape().end());
  int64_t ns = product(ext);
  int64_t outer = t.shape()[0] * t.shape()[1];
  if (ns == 0 || outer == 0) throw ShapeError("non_max_indices got an empty tensor");

  // Worst case over batch and channels per spatial position.
  std::vector<double> agg(static_cast<size_t>(ns), std::numeric_limits<double>::infinity());
  if (t.dtype() == Dtype::F64) {
    auto v = t.data<double>();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < ns; ++j) agg[j] = std::min(agg[j], v[o * ns + j]);
  } else {
    auto v = t.data<float>();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < ns; ++j) agg[j] = std::min(agg[j], static_cast<double>(v[o * ns + j]));
  }

  // Strided ops leave a legitimate ripple with this period; every position is
  // judged against the maximum of its own residue class.
  int64_t nclass = 1;
  for (int64_t d = 0; d < sr; ++d) nclass *= period;
  std::vector<int64_t> res_stride(sr);  // class id = sum residue_d * res_stride[d]
  {
    int64_t acc = 1;
    for (int64_t d = sr - 1; d >= 0; --d) {
      res_stride[d] = acc;
      acc *= period;
    }
  }
  auto class_of = [&](int64_t j) {
    int64_t cls = 0, rem = j;
    for (int64_t d = sr - 1; d >= 0; --d) {
      int64_t coord = rem % ext[d];
      rem /= ext[d];
      cls += (coord % period) * res_stride[d];
    }
    return cls;
  };
  std::vector<double> cmax(static_cast<size_t>(nclass), -std::numeric_limits<double>::infinity());
  for (int64_t j = 0; j < ns; ++j) {
    double& m = cmax[class_of(j)];
    m = std::max(m, agg[j]);
  }
  auto is_invalid = [&](int64_t j) {
    double m = cmax[class_of(j)];
    return m > 0.0 && agg[j] < (1.0 - epsilon) * m;
  };

  BorderWidths out;
  out.per_dim.assign(static_cast<size_t>(sr), {0, 0});
  for (int64_t d = 0; d < sr; ++d) {
    int64_t inner = 1;
    for (int64_t e = d + 1; e < sr; ++e) inner *= ext[e];
    int64_t outer_d = ns / (ext[d] * inner);

    // A hyperplane counts toward the border only if every position in it that
    // belongs to a class with a positive maximum falls below that maximum.
    auto plane_dirty = [&](int64_t h) {
      bool has = false;
      for (int64_t a = 0; a < outer_d; ++a) {
        int64_t base = (a * ext[d] + h) * inner;
        for (int64_t b = 0; b < inner; ++b) {
          int64_t j = base + b;
          double m = cmax[class_of(j)];
          if (m <= 0.0) continue;
          has = true;
          if (agg[j] >= (1.0 - epsilon) * m) return false;
        }
      }
      return has;
    };

    int64_t left = 0;
    for (int64_t r = 0; r < std::min(period, ext[d]); ++r) {
      int64_t c = 0;
      for (int64_t h = r; h < ext[d]; h += period) {
        if (plane_dirty(h))
          ++c;
        else
          break;
      }
      if (c > 0) left = std::max(left, r + (c - 1) * period + 1);
    }
    int64_t right = 0;
    for (int64_t r = 0; r < std::min(period, ext[d]); ++r) {
      int64_t h0 = r + ((ext[d] - 1 - r) / period) * period;
      int64_t c = 0;
      for (int64_t h = h0; h >= 0; h -= period) {
        if (plane_dirty(h))
          ++c;
        else
          break;
      }
      if (c > 0) right = std::max(right, ext[d] - (h0 - (c - 1) * period));
    }
    if (left + right >= ext[d]) {
      throw ProbeError("sub-maximal borders cover the whole extent; nothing maximal remains");
    }
    out.per_dim[d] = {left, right};
  }

  // The region between the borders must be fully maximal, otherwise a border
  // width is meaningless.
  {
    std::vector<int64_t> coord(static_cast<size_t>(sr), 0);
    for (int64_t j = 0; j < ns; ++j) {
      int64_t rem = j;
      bool inside = true;
      for (int64_t d = sr - 1; d >= 0; --d) {
        int64_t c = rem % ext[d];
        rem /= ext[d];
        if (c < out.per_dim[d][0] || c >= ext[d] - out.per_dim[d][1]) {
          inside = false;
          break;
        }
      }
      if (inside && is_invalid(j)) {
        throw ProbeError("sub-maximal position inside the interior; the invalid region is "
                         "not contiguous with the border");
      }
    }
  }
  return out;
}

ProbeReport probe(const Network& net, const std::vector<int64_t>& tile_size) {
  int64_t sr = net.spatial_rank();
  if (static_cast<int64_t>(tile_size.size()) != sr) {
    throw UsageError("probe tile rank " + std::to_string(tile_size.size()) +
                     " does not match the network's spatial rank " + std::to_string(sr));
  }
  int64_t split = net.split();
  PrefixGeometry geom = prefix_geometry(net);

  // Snap the tile to the stride grid so no layer drops trailing positions;
  // planned tiles always satisfy this, so the measured widths carry over.
  std::vector<int64_t> tile(tile_size);
  for (int64_t d = 0; d < sr; ++d) {
    if (tile[d] < geom.receptive[d]) {
      throw ProbeError("probe tile extent " + std::to_string(tile[d]) +
                       " is smaller than the receptive extent " +
                       std::to_string(geom.receptive[d]));
    }
    tile[d] -= (tile[d] - geom.receptive[d]) % geom.stride[d];
  }

  // Geometry does not depend on the network dtype; measuring in f64 keeps
  // deep dilution of border dips above the decision threshold.
  const double eps = probe_epsilon(Dtype::F64);
  int64_t channels = net.input_shape()[1];
  std::vector<int64_t> shape{1, channels};
  shape.insert(shape.end(), tile.begin(), tile.end());
  Tensor x = Tensor::full(Dtype::F64, shape, 1.0);

  // Averaged stand-ins for the real parameters: any constant plateau passes
  // through unchanged, so border effects are the only thing measured.
  std::vector<ConvParams> avg(static_cast<size_t>(split));
  std::vector<std::vector<int64_t>> in_extents(static_cast<size_t>(split));
  ProbeReport rep;
  rep.layers.resize(static_cast<size_t>(split));

  for (int64_t l = 0; l < split; ++l) {
    const LayerDesc& d = net.spec().layers[l];
    in_extents[l].assign(x.shape().begin() + 2, x.shape().end());
    switch (d.kind) {
      case LayerKind::Conv: {
        int64_t in_ch = x.shape()[1];
        std::vector<int64_t> kshape{d.out_channels, in_ch};
        int64_t elems = in_ch;
        for (int64_t e = 0; e < sr; ++e) {
          kshape.push_back(d.kernel);
          elems *= d.kernel;
        }
        avg[l].kernel = Tensor::full(Dtype::F64, kshape, 1.0 / static_cast<double>(elems));
        avg[l].stride.assign(static_cast<size_t>(sr), static_cast<int>(d.stride));
        x = conv_forward(x, avg[l]);
        break;
      }
      case LayerKind::MaxPool:
        // Average semantics: the scatter-to-argmax backward of a real max
        // pool breaks plateaus even in the interior.
        x = avgpool_forward(x, PoolParams{static_cast<int>(d.kernel), static_cast<int>(d.stride)});
        break;
      case LayerKind::ReLU:
        // Plateau is non-negative; identity.
        break;
      default:
        throw InternalError(std::string("non-local layer '") + layer_kind_name(d.kind) +
                            "' in the streamed prefix");
    }
    rep.layers[l].invalid_forward = non_max_indices(x, eps, 1);
    std::vector<int64_t> out_ext(x.shape().begin() + 2, x.shape().end());
    check_widths_fit(rep.layers[l].invalid_forward, out_ext,
                     ("forward of layer " + std::to_string(l)).c_str());
  }

  // The tail cannot run on a lone tile (fully connected features bind to the
  // full image), so the backward measurement seeds a uniform gradient here.
  Tensor g = Tensor::full(Dtype::F64, x.shape(), 1.0);
  int64_t period = 1;
  for (int64_t l = split - 1; l >= 0; --l) {
    const LayerDesc& d = net.spec().layers[l];
    switch (d.kind) {
      case LayerKind::Conv:
        g = conv_backward_input(g, avg[l], in_extents[l]);
        break;
      case LayerKind::MaxPool:
        g = avgpool_backward(g, PoolParams{static_cast<int>(d.kernel), static_cast<int>(d.stride)},
                             in_extents[l]);
        break;
      case LayerKind::ReLU:
        break;
      default:
        break;  // already rejected on the forward walk
    }
    int64_t k = 0, s = 0;
    local_footprint(d, k, s);
    period *= s;
    rep.layers[l].invalid_backward = non_max_indices(g, eps, period);
    check_widths_fit(rep.layers[l].invalid_backward, in_extents[l],
                     ("backward of layer " + std::to_string(l)).c_str());
  }

  rep.output_stride = geom.stride;
  rep.tile_size_probed = tile;
  return rep;
}

ProbeReport analytic_overlap(const Network& net) {
  int64_t sr = net.spatial_rank();
  int64_t split = net.split();
  ProbeReport rep;
  rep.layers.resize(static_cast<size_t>(split));
  for (int64_t l = 0; l < split; ++l) {
    rep.layers[l].invalid_forward.per_dim.assign(static_cast<size_t>(sr), {0, 0});
  }
  // Walking down from the split: v tracks receptive minus stride of the
  // chain from this level up, via v_in = s*v_out + (k - s). The width is
  // max(v, 0); clamping the carried value instead would overstate deeper
  // widths whenever a pointwise strided layer drives v negative mid-chain.
  // Valid ops never make the forward band non-zero.
  std::vector<int64_t> v(static_cast<size_t>(sr), 0);
  for (int64_t l = split - 1; l >= 0; --l) {
    int64_t k = 0, s = 0;
    local_footprint(net.spec().layers[l], k, s);
    rep.layers[l].invalid_backward.per_dim.resize(static_cast<size_t>(sr));
    for (int64_t d = 0; d < sr; ++d) {
      v[d] = s * v[d] + (k - s);
      int64_t w = std::max<int64_t>(v[d], 0);
      rep.layers[l].invalid_backward.per_dim[d] = {w, w};
    }
  }
  rep.output_stride = prefix_geometry(net).stride;
  return rep;
}

}  // namespace streamconv
