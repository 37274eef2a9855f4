#include "streamconv/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace streamconv {

namespace {

template <typename Fn>
decltype(auto) with_dtype(Dtype d, Fn&& fn) {
  if (d == Dtype::F32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

struct ConvDims {
  int64_t N, C, H, W;    // input
  int64_t O, KH, KW;     // kernel
  int64_t SH, SW;        // stride
  int64_t OH, OW;        // output
  bool one_d;
};

// Rank-3 tensors are handled as rank-4 with a unit height; the flat layouts
// coincide, so kernels only ever see the 2D form.
ConvDims conv_dims(const Tensor& input, const ConvParams& p) {
  const auto& is = input.shape();
  const auto& ks = p.kernel.shape();
  if (is.size() != 3 && is.size() != 4) {
    throw ShapeError("conv input must be rank 3 or 4, got " + input.shape_str());
  }
  if (ks.size() != is.size()) {
    throw ShapeError("kernel rank must match input rank");
  }
  size_t sdims = is.size() - 2;
  if (p.stride.size() != sdims) throw ShapeError("stride rank must match spatial rank");
  for (int s : p.stride) {
    if (s < 1) throw ShapeError("stride must be >= 1");
  }
  check_same_dtype(input, p.kernel, "conv");
  if (!p.bias.empty()) {
    check_same_dtype(input, p.bias, "conv bias");
    if (p.bias.shape() != std::vector<int64_t>{ks[0]}) {
      throw ShapeError("bias must be (out_channels)");
    }
  }
  ConvDims d{};
  d.one_d = (is.size() == 3);
  d.N = is[0];
  d.C = is[1];
  d.H = d.one_d ? 1 : is[2];
  d.W = d.one_d ? is[2] : is[3];
  d.O = ks[0];
  if (ks[1] != d.C) {
    throw ShapeError("kernel in_channels " + std::to_string(ks[1]) +
                     " does not match input channels " + std::to_string(d.C));
  }
  d.KH = d.one_d ? 1 : ks[2];
  d.KW = d.one_d ? ks[2] : ks[3];
  d.SH = d.one_d ? 1 : p.stride[0];
  d.SW = d.one_d ? p.stride[0] : p.stride[1];
  d.OH = conv_out_extent(d.H, d.KH, d.SH, "conv height");
  d.OW = conv_out_extent(d.W, d.KW, d.SW, "conv width");
  return d;
}

std::vector<int64_t> out_shape(const ConvDims& d) {
  if (d.one_d) return {d.N, d.O, d.OW};
  return {d.N, d.O, d.OH, d.OW};
}

template <typename T>
void conv_forward_impl(const ConvDims& d, std::span<const T> in, std::span<const T> k,
                       const T* bias, std::span<T> out) {
  for (int64_t n = 0; n < d.N; ++n) {
    for (int64_t oc = 0; oc < d.O; ++oc) {
      T* op = out.data() + ((n * d.O + oc) * d.OH) * d.OW;
      T b = bias ? bias[oc] : T(0);
      std::fill(op, op + d.OH * d.OW, b);
      for (int64_t ic = 0; ic < d.C; ++ic) {
        const T* ip = in.data() + ((n * d.C + ic) * d.H) * d.W;
        const T* kp = k.data() + ((oc * d.C + ic) * d.KH) * d.KW;
        for (int64_t kh = 0; kh < d.KH; ++kh) {
          for (int64_t kw = 0; kw < d.KW; ++kw) {
            T w = kp[kh * d.KW + kw];
            for (int64_t oh = 0; oh < d.OH; ++oh) {
              const T* irow = ip + (oh * d.SH + kh) * d.W + kw;
              T* orow = op + oh * d.OW;
              if (d.SW == 1) {
                for (int64_t ow = 0; ow < d.OW; ++ow) orow[ow] += w * irow[ow];
              } else {
                for (int64_t ow = 0; ow < d.OW; ++ow) orow[ow] += w * irow[ow * d.SW];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward_kernel_impl(const ConvDims& d, std::span<const T> in, std::span<const T> g,
                               std::span<T> dk) {
  for (int64_t oc = 0; oc < d.O; ++oc) {
    for (int64_t ic = 0; ic < d.C; ++ic) {
      for (int64_t kh = 0; kh < d.KH; ++kh) {
        for (int64_t kw = 0; kw < d.KW; ++kw) {
          T acc = 0;
          for (int64_t n = 0; n < d.N; ++n) {
            const T* ip = in.data() + ((n * d.C + ic) * d.H) * d.W;
            const T* gp = g.data() + ((n * d.O + oc) * d.OH) * d.OW;
            for (int64_t oh = 0; oh < d.OH; ++oh) {
              const T* irow = ip + (oh * d.SH + kh) * d.W + kw;
              const T* grow = gp + oh * d.OW;
              if (d.SW == 1) {
                for (int64_t ow = 0; ow < d.OW; ++ow) acc += grow[ow] * irow[ow];
              } else {
                for (int64_t ow = 0; ow < d.OW; ++ow) acc += grow[ow] * irow[ow * d.SW];
              }
            }
          }
          dk[((oc * d.C + ic) * d.KH + kh) * d.KW + kw] = acc;
        }
      }
    }
  }
}

template <typename T>
void conv_backward_input_impl(const ConvDims& d, std::span<const T> g, std::span<const T> k,
                              std::span<T> din) {
  for (int64_t n = 0; n < d.N; ++n) {
    for (int64_t oc = 0; oc < d.O; ++oc) {
      const T* gp = g.data() + ((n * d.O + oc) * d.OH) * d.OW;
      for (int64_t ic = 0; ic < d.C; ++ic) {
        T* ip = din.data() + ((n * d.C + ic) * d.H) * d.W;
        const T* kp = k.data() + ((oc * d.C + ic) * d.KH) * d.KW;
        for (int64_t kh = 0; kh < d.KH; ++kh) {
          for (int64_t kw = 0; kw < d.KW; ++kw) {
            T w = kp[kh * d.KW + kw];
            for (int64_t oh = 0; oh < d.OH; ++oh) {
              T* irow = ip + (oh * d.SH + kh) * d.W + kw;
              const T* grow = gp + oh * d.OW;
              if (d.SW == 1) {
                for (int64_t ow = 0; ow < d.OW; ++ow) irow[ow] += w * grow[ow];
              } else {
                for (int64_t ow = 0; ow < d.OW; ++ow) irow[ow * d.SW] += w * grow[ow];
              }
            }
          }
        }
      }
    }
  }
}

struct PoolDims {
  int64_t N, C, H, W, K, S, OH, OW;
  bool one_d;
};

PoolDims pool_dims(const std::vector<int64_t>& is, const PoolParams& p, const char* what) {
  if (is.size() != 3 && is.size() != 4) {
    throw ShapeError(std::string(what) + " input must be rank 3 or 4");
  }
  if (p.window < 1 || p.stride < 1) throw ShapeError("pool window/stride must be >= 1");
  PoolDims d{};
  d.one_d = (is.size() == 3);
  d.N = is[0];
  d.C = is[1];
  d.H = d.one_d ? 1 : is[2];
  d.W = d.one_d ? is[2] : is[3];
  d.K = p.window;
  d.S = p.stride;
  d.OH = d.one_d ? 1 : conv_out_extent(d.H, d.K, d.S, what);
  d.OW = conv_out_extent(d.W, d.K, d.S, what);
  return d;
}

}  // namespace

int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, const char* what) {
  if (in < k) {
    throw ShapeError(std::string(what) + ": extent " + std::to_string(in) +
                     " smaller than window " + std::to_string(k));
  }
  return (in - k) / stride + 1;
}

Tensor conv_forward(const Tensor& input, const ConvParams& p) {
  ConvDims d = conv_dims(input, p);
  Tensor out(input.dtype(), out_shape(d));
  with_dtype(input.dtype(), [&]<typename T>() {
    conv_forward_impl<T>(d, input.data<T>(), p.kernel.data<T>(),
                         p.bias.empty() ? nullptr : p.bias.data<T>().data(), out.data<T>());
  });
  return out;
}

Tensor conv_backward_kernel(const Tensor& input, const Tensor& grad_out, const ConvParams& p) {
  ConvDims d = conv_dims(input, p);
  check_same_dtype(input, grad_out, "conv_backward_kernel");
  if (grad_out.shape() != out_shape(d)) {
    throw ShapeError("grad_out shape " + grad_out.shape_str() + " does not match conv output");
  }
  Tensor dk(input.dtype(), p.kernel.shape());
  with_dtype(input.dtype(), [&]<typename T>() {
    conv_backward_kernel_impl<T>(d, input.data<T>(), grad_out.data<T>(), dk.data<T>());
  });
  return dk;
}

Tensor conv_backward_bias(const Tensor& grad_out) {
  const auto& gs = grad_out.shape();
  if (gs.size() != 3 && gs.size() != 4) throw ShapeError("grad_out must be rank 3 or 4");
  int64_t N = gs[0], O = gs[1];
  int64_t spatial = grad_out.numel() / (N * O);
  Tensor db(grad_out.dtype(), {O});
  with_dtype(grad_out.dtype(), [&]<typename T>() {
    auto g = grad_out.data<T>();
    auto out = db.data<T>();
    for (int64_t oc = 0; oc < O; ++oc) {
      T acc = 0;
      for (int64_t n = 0; n < N; ++n) {
        const T* gp = g.data() + (n * O + oc) * spatial;
        for (int64_t i = 0; i < spatial; ++i) acc += gp[i];
      }
      out[oc] = acc;
    }
  });
  return db;
}

Tensor conv_backward_input(const Tensor& grad_out, const ConvParams& p,
                           const std::vector<int64_t>& input_spatial) {
  const auto& ks = p.kernel.shape();
  const auto& gs = grad_out.shape();
  if (gs.size() != ks.size()) throw ShapeError("grad_out rank must match kernel rank");
  if (input_spatial.size() != gs.size() - 2) {
    throw ShapeError("input_spatial rank mismatch");
  }
  check_same_dtype(grad_out, p.kernel, "conv_backward_input");
  bool one_d = (gs.size() == 3);
  ConvDims d{};
  d.one_d = one_d;
  d.N = gs[0];
  d.C = ks[1];
  d.O = ks[0];
  d.H = one_d ? 1 : input_spatial[0];
  d.W = one_d ? input_spatial[0] : input_spatial[1];
  d.KH = one_d ? 1 : ks[2];
  d.KW = one_d ? ks[2] : ks[3];
  d.SH = one_d ? 1 : p.stride.at(0);
  d.SW = one_d ? p.stride.at(0) : p.stride.at(1);
  d.OH = one_d ? 1 : gs[2];
  d.OW = one_d ? gs[2] : gs[3];
  if (gs[1] != d.O) throw ShapeError("grad_out channels do not match kernel out_channels");
  if (d.OH > conv_out_extent(d.H, d.KH, d.SH, "conv height") ||
      d.OW > conv_out_extent(d.W, d.KW, d.SW, "conv width")) {
    throw ShapeError("grad_out larger than the given input could produce");
  }
  std::vector<int64_t> ishape =
      one_d ? std::vector<int64_t>{d.N, d.C, d.W} : std::vector<int64_t>{d.N, d.C, d.H, d.W};
  Tensor din(grad_out.dtype(), ishape);
  with_dtype(grad_out.dtype(), [&]<typename T>() {
    conv_backward_input_impl<T>(d, grad_out.data<T>(), p.kernel.data<T>(), din.data<T>());
  });
  return din;
}

std::pair<Tensor, ArgmaxMap> maxpool_forward(const Tensor& input, const PoolParams& p) {
  PoolDims d = pool_dims(input.shape(), p, "maxpool");
  std::vector<int64_t> oshape = d.one_d ? std::vector<int64_t>{d.N, d.C, d.OW}
                                        : std::vector<int64_t>{d.N, d.C, d.OH, d.OW};
  Tensor out(input.dtype(), oshape);
  ArgmaxMap argmax;
  argmax.idx.resize(static_cast<size_t>(out.numel()));
  with_dtype(input.dtype(), [&]<typename T>() {
    auto in = input.data<T>();
    auto o = out.data<T>();
    int64_t oi = 0;
    for (int64_t n = 0; n < d.N; ++n) {
      for (int64_t c = 0; c < d.C; ++c) {
        const T* ip = in.data() + ((n * d.C + c) * d.H) * d.W;
        int64_t base = ((n * d.C + c) * d.H) * d.W;
        int64_t kh_max = d.one_d ? 1 : d.K;
        for (int64_t oh = 0; oh < d.OH; ++oh) {
          for (int64_t ow = 0; ow < d.OW; ++ow) {
            T best{};
            int64_t best_idx = -1;
            for (int64_t kh = 0; kh < kh_max; ++kh) {
              int64_t ih = (d.one_d ? 0 : oh * d.S) + kh;
              for (int64_t kw = 0; kw < d.K; ++kw) {
                int64_t iw = ow * d.S + kw;
                T v = ip[ih * d.W + iw];
                if (best_idx < 0 || v > best) {
                  best = v;
                  best_idx = base + ih * d.W + iw;
                }
              }
            }
            o[oi] = best;
            argmax.idx[static_cast<size_t>(oi)] = best_idx;
            ++oi;
          }
        }
      }
    }
  });
  return {std::move(out), std::move(argmax)};
}

Tensor maxpool_backward(const Tensor& grad_out, const ArgmaxMap& argmax,
                        const std::vector<int64_t>& input_shape) {
  if (argmax.idx.size() != static_cast<size_t>(grad_out.numel())) {
    throw ShapeError("argmax map size does not match grad_out");
  }
  Tensor din(grad_out.dtype(), input_shape);
  with_dtype(grad_out.dtype(), [&]<typename T>() {
    auto g = grad_out.data<T>();
    auto o = din.data<T>();
    for (int64_t i = 0; i < grad_out.numel(); ++i) {
      int64_t idx = argmax.idx[static_cast<size_t>(i)];
      if (idx < 0 || idx >= din.numel()) {
        throw InternalError("argmax index out of range");
      }
      o[static_cast<size_t>(idx)] += g[static_cast<size_t>(i)];
    }
  });
  return din;
}

Tensor avgpool_forward(const Tensor& input, const PoolParams& p) {
  PoolDims d = pool_dims(input.shape(), p, "avgpool");
  std::vector<int64_t> oshape = d.one_d ? std::vector<int64_t>{d.N, d.C, d.OW}
                                        : std::vector<int64_t>{d.N, d.C, d.OH, d.OW};
  Tensor out(input.dtype(), oshape);
  int64_t kh_max = d.one_d ? 1 : d.K;
  double inv = 1.0 / static_cast<double>(kh_max * d.K);
  with_dtype(input.dtype(), [&]<typename T>() {
    auto in = input.data<T>();
    auto o = out.data<T>();
    int64_t oi = 0;
    for (int64_t n = 0; n < d.N; ++n) {
      for (int64_t c = 0; c < d.C; ++c) {
        const T* ip = in.data() + ((n * d.C + c) * d.H) * d.W;
        for (int64_t oh = 0; oh < d.OH; ++oh) {
          for (int64_t ow = 0; ow < d.OW; ++ow) {
            T acc = 0;
            for (int64_t kh = 0; kh < kh_max; ++kh) {
              int64_t ih = (d.one_d ? 0 : oh * d.S) + kh;
              for (int64_t kw = 0; kw < d.K; ++kw) acc += ip[ih * d.W + ow * d.S + kw];
            }
            o[oi++] = acc * static_cast<T>(inv);
          }
        }
      }
    }
  });
  return out;
}

Tensor avgpool_backward(const Tensor& grad_out, const PoolParams& p,
                        const std::vector<int64_t>& input_spatial) {
  const auto& gs = grad_out.shape();
  if (gs.size() != input_spatial.size() + 2) throw ShapeError("avgpool rank mismatch");
  std::vector<int64_t> ishape{gs[0], gs[1]};
  for (int64_t e : input_spatial) ishape.push_back(e);
  PoolDims d = pool_dims(ishape, p, "avgpool");
  if ((d.one_d && gs[2] != d.OW) || (!d.one_d && (gs[2] != d.OH || gs[3] != d.OW))) {
    throw ShapeError("avgpool grad_out does not match input extents");
  }
  Tensor din(grad_out.dtype(), ishape);
  int64_t kh_max = d.one_d ? 1 : d.K;
  double inv = 1.0 / static_cast<double>(kh_max * d.K);
  with_dtype(grad_out.dtype(), [&]<typename T>() {
    auto g = grad_out.data<T>();
    auto o = din.data<T>();
    int64_t gi = 0;
    for (int64_t n = 0; n < d.N; ++n) {
      for (int64_t c = 0; c < d.C; ++c) {
        T* ip = o.data() + ((n * d.C + c) * d.H) * d.W;
        for (int64_t oh = 0; oh < d.OH; ++oh) {
          for (int64_t ow = 0; ow < d.OW; ++ow) {
            T v = g[gi++] * static_cast<T>(inv);
            for (int64_t kh = 0; kh < kh_max; ++kh) {
              int64_t ih = (d.one_d ? 0 : oh * d.S) + kh;
              for (int64_t kw = 0; kw < d.K; ++kw) ip[ih * d.W + ow * d.S + kw] += v;
            }
          }
        }
      }
    }
  });
  return din;
}

Tensor relu_forward(const Tensor& input) {
  Tensor out(input.dtype(), input.shape());
  with_dtype(input.dtype(), [&]<typename T>() {
    auto in = input.data<T>();
    auto o = out.data<T>();
    for (int64_t i = 0; i < input.numel(); ++i) o[i] = in[i] > T(0) ? in[i] : T(0);
  });
  return out;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& input) {
  check_same_dtype(grad_out, input, "relu_backward");
  if (grad_out.shape() != input.shape()) throw ShapeError("relu_backward shape mismatch");
  Tensor din(input.dtype(), input.shape());
  with_dtype(input.dtype(), [&]<typename T>() {
    auto g = grad_out.data<T>();
    auto in = input.data<T>();
    auto o = din.data<T>();
    for (int64_t i = 0; i < input.numel(); ++i) o[i] = in[i] > T(0) ? g[i] : T(0);
  });
  return din;
}

Tensor linear_forward(const Tensor& input, const LinearParams& p) {
  check_same_dtype(input, p.weight, "linear");
  const auto& ws = p.weight.shape();
  if (ws.size() != 2) throw ShapeError("linear weight must be rank 2");
  int64_t N = input.shape().at(0);
  int64_t F = input.numel() / N;
  if (ws[1] != F) {
    throw ShapeError("linear expects " + std::to_string(ws[1]) + " features, input flattens to " +
                     std::to_string(F));
  }
  int64_t O = ws[0];
  if (!p.bias.empty() && p.bias.shape() != std::vector<int64_t>{O}) {
    throw ShapeError("linear bias must be (out_features)");
  }
  Tensor out(input.dtype(), {N, O});
  with_dtype(input.dtype(), [&]<typename T>() {
    auto x = input.data<T>();
    auto w = p.weight.data<T>();
    auto o = out.data<T>();
    const T* b = p.bias.empty() ? nullptr : p.bias.data<T>().data();
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t oc = 0; oc < O; ++oc) {
        T acc = b ? b[oc] : T(0);
        const T* xr = x.data() + n * F;
        const T* wr = w.data() + oc * F;
        for (int64_t f = 0; f < F; ++f) acc += wr[f] * xr[f];
        o[n * O + oc] = acc;
      }
    }
  });
  return out;
}

LinearGrads linear_backward(const Tensor& input, const Tensor& grad_out, const LinearParams& p) {
  check_same_dtype(input, grad_out, "linear_backward");
  const auto& ws = p.weight.shape();
  int64_t N = input.shape().at(0);
  int64_t F = input.numel() / N;
  int64_t O = ws.at(0);
  if (grad_out.shape() != std::vector<int64_t>{N, O}) {
    throw ShapeError("linear grad_out must be (batch, out_features)");
  }
  if (ws[1] != F) throw ShapeError("linear_backward feature mismatch");
  LinearGrads gr;
  gr.weight = Tensor(input.dtype(), {O, F});
  gr.bias = p.bias.empty() ? Tensor() : Tensor(input.dtype(), {O});
  gr.input = Tensor(input.dtype(), input.shape());
  with_dtype(input.dtype(), [&]<typename T>() {
    auto x = input.data<T>();
    auto g = grad_out.data<T>();
    auto w = p.weight.data<T>();
    auto dw = gr.weight.data<T>();
    auto dx = gr.input.data<T>();
    for (int64_t n = 0; n < N; ++n) {
      const T* xr = x.data() + n * F;
      T* dxr = dx.data() + n * F;
      for (int64_t oc = 0; oc < O; ++oc) {
        T gv = g[n * O + oc];
        T* dwr = dw.data() + oc * F;
        const T* wr = w.data() + oc * F;
        for (int64_t f = 0; f < F; ++f) {
          dwr[f] += gv * xr[f];
          dxr[f] += gv * wr[f];
        }
      }
    }
    if (!gr.bias.empty()) {
      auto db = gr.bias.data<T>();
      for (int64_t oc = 0; oc < O; ++oc) {
        T acc = 0;
        for (int64_t n = 0; n < N; ++n) acc += g[n * O + oc];
        db[oc] = acc;
      }
    }
  });
  return gr;
}

namespace {

void check_region(const Region& r, const std::vector<int64_t>& spatial, const char* what) {
  if (r.pos.size() != spatial.size() || r.extent.size() != spatial.size()) {
    throw ShapeError(std::string(what) + ": region rank mismatch");
  }
  for (size_t i = 0; i < spatial.size(); ++i) {
    if (r.pos[i] < 0 || r.extent[i] < 1 || r.pos[i] + r.extent[i] > spatial[i]) {
      throw ShapeError(std::string(what) + ": region out of bounds");
    }
  }
}

std::vector<int64_t> spatial_of(const Tensor& t) {
  return {t.shape().begin() + 2, t.shape().end()};
}

}  // namespace

Tensor crop(const Tensor& t, const Region& r) {
  if (t.rank() != 3 && t.rank() != 4) throw ShapeError("crop input must be rank 3 or 4");
  auto spatial = spatial_of(t);
  check_region(r, spatial, "crop");
  bool one_d = (t.rank() == 3);
  int64_t N = t.shape()[0], C = t.shape()[1];
  int64_t H = one_d ? 1 : spatial[0], W = one_d ? spatial[0] : spatial[1];
  int64_t ph = one_d ? 0 : r.pos[0], pw = one_d ? r.pos[0] : r.pos[1];
  int64_t eh = one_d ? 1 : r.extent[0], ew = one_d ? r.extent[0] : r.extent[1];
  std::vector<int64_t> oshape =
      one_d ? std::vector<int64_t>{N, C, ew} : std::vector<int64_t>{N, C, eh, ew};
  Tensor out(t.dtype(), oshape);
  size_t esz = dtype_size(t.dtype());
  with_dtype(t.dtype(), [&]<typename T>() {
    auto in = t.data<T>();
    auto o = out.data<T>();
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t c = 0; c < C; ++c) {
        const T* ip = in.data() + ((n * C + c) * H) * W;
        T* op = o.data() + ((n * C + c) * eh) * ew;
        for (int64_t h = 0; h < eh; ++h) {
          std::memcpy(op + h * ew, ip + (ph + h) * W + pw, static_cast<size_t>(ew) * esz);
        }
      }
    }
  });
  return out;
}

Tensor concat_spatial(const std::vector<Tensor>& tiles, const std::vector<Region>& placements,
                      const std::vector<int64_t>& out_spatial) {
  if (tiles.empty()) throw PlacementError("concat: no tiles");
  if (tiles.size() != placements.size()) throw PlacementError("concat: tiles/placements mismatch");
  const Tensor& first = tiles.front();
  bool one_d = (first.rank() == 3);
  if (out_spatial.size() != (one_d ? 1u : 2u)) throw ShapeError("concat: out_spatial rank");
  int64_t N = first.shape()[0], C = first.shape()[1];
  int64_t OH = one_d ? 1 : out_spatial[0], OW = one_d ? out_spatial[0] : out_spatial[1];

  std::vector<uint8_t> covered(static_cast<size_t>(OH * OW), 0);
  for (size_t t = 0; t < tiles.size(); ++t) {
    const Tensor& tile = tiles[t];
    if (tile.rank() != first.rank() || tile.shape()[0] != N || tile.shape()[1] != C) {
      throw PlacementError("concat: tile layout mismatch");
    }
    check_same_dtype(first, tile, "concat");
    const Region& r = placements[t];
    check_region(r, out_spatial, "concat");
    auto tsp = spatial_of(tile);
    if (tsp != r.extent) throw PlacementError("concat: tile extent does not match placement");
    int64_t ph = one_d ? 0 : r.pos[0], pw = one_d ? r.pos[0] : r.pos[1];
    int64_t eh = one_d ? 1 : r.extent[0], ew = one_d ? r.extent[0] : r.extent[1];
    for (int64_t h = 0; h < eh; ++h) {
      for (int64_t w = 0; w < ew; ++w) {
        uint8_t& cell = covered[static_cast<size_t>((ph + h) * OW + (pw + w))];
        if (cell) {
          throw PlacementError("concat: cell (" + std::to_string(ph + h) + "," +
                               std::to_string(pw + w) + ") written twice");
        }
        cell = 1;
      }
    }
  }
  for (size_t i = 0; i < covered.size(); ++i) {
    if (!covered[i]) {
      throw PlacementError("concat: cell " + std::to_string(i) + " never written");
    }
  }

  std::vector<int64_t> oshape =
      one_d ? std::vector<int64_t>{N, C, OW} : std::vector<int64_t>{N, C, OH, OW};
  Tensor out(first.dtype(), oshape);
  size_t esz = dtype_size(first.dtype());
  with_dtype(first.dtype(), [&]<typename T>() {
    auto o = out.data<T>();
    for (size_t t = 0; t < tiles.size(); ++t) {
      const Region& r = placements[t];
      auto in = tiles[t].data<T>();
      int64_t ph = one_d ? 0 : r.pos[0], pw = one_d ? r.pos[0] : r.pos[1];
      int64_t eh = one_d ? 1 : r.extent[0], ew = one_d ? r.extent[0] : r.extent[1];
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t c = 0; c < C; ++c) {
          const T* ip = in.data() + ((n * C + c) * eh) * ew;
          T* op = o.data() + ((n * C + c) * OH) * OW;
          for (int64_t h = 0; h < eh; ++h) {
            std::memcpy(op + (ph + h) * OW + pw, ip + h * ew, static_cast<size_t>(ew) * esz);
          }
        }
      }
    }
  });
  return out;
}

void accumulate(Tensor& into, const Tensor& x) {
  check_same_dtype(into, x, "accumulate");
  if (into.shape() != x.shape()) throw ShapeError("accumulate shape mismatch");
  with_dtype(into.dtype(), [&]<typename T>() {
    auto a = into.data<T>();
    auto b = x.data<T>();
    for (int64_t i = 0; i < into.numel(); ++i) a[i] += b[i];
  });
}

void axpy(Tensor& y, double alpha, const Tensor& x) {
  check_same_dtype(y, x, "axpy");
  if (y.shape() != x.shape()) throw ShapeError("axpy shape mismatch");
  with_dtype(y.dtype(), [&]<typename T>() {
    auto a = y.data<T>();
    auto b = x.data<T>();
    T al = static_cast<T>(alpha);
    for (int64_t i = 0; i < y.numel(); ++i) a[i] += al * b[i];
  });
}

double sum_all(const Tensor& t) {
  double acc = 0;
  with_dtype(t.dtype(), [&]<typename T>() {
    for (T v : t.data<T>()) acc += static_cast<double>(v);
  });
  return acc;
}

double max_abs(const Tensor& t) {
  double m = 0;
  with_dtype(t.dtype(), [&]<typename T>() {
    for (T v : t.data<T>()) m = std::max(m, std::abs(static_cast<double>(v)));
  });
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff shape mismatch");
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a.value_at(i) - b.value_at(i)));
  }
  return m;
}

}  // namespace streamconv
