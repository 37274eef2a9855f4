#include "streamconv/demo.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "streamconv/error.hpp"
#include "streamconv/probe.hpp"
#include "streamconv/rng.hpp"

namespace streamconv {

namespace {

// Stack (1, C, H, W) images into one (B, C, H, W) batch.
Tensor make_batch(const std::vector<Tensor>& images, const std::vector<size_t>& idx) {
  const Tensor& first = images[idx[0]];
  std::vector<int64_t> shape = first.shape();
  shape[0] = static_cast<int64_t>(idx.size());
  Tensor out(first.dtype(), shape);
  size_t per = static_cast<size_t>(first.bytes());
  for (size_t i = 0; i < idx.size(); ++i) {
    const Tensor& img = images[idx[i]];
    if (img.shape() != first.shape()) throw ShapeError("demo images differ in shape");
    const void* src = img.dtype() == Dtype::F64
                          ? static_cast<const void*>(img.data<double>().data())
                          : static_cast<const void*>(img.data<float>().data());
    void* dst = out.dtype() == Dtype::F64
                    ? static_cast<void*>(out.data<double>().data() + i * (per / 8))
                    : static_cast<void*>(out.data<float>().data() + i * (per / 4));
    std::memcpy(dst, src, per);
  }
  return out;
}

int64_t argmax_row(const Tensor& logits, int64_t row) {
  int64_t k = logits.shape()[1];
  int64_t best = 0;
  double bv = logits.value_at(row * k);
  for (int64_t j = 1; j < k; ++j) {
    double v = logits.value_at(row * k + j);
    if (v > bv) {
      bv = v;
      best = j;
    }
  }
  return best;
}

double param_diff(const Network& a, const Network& b) {
  double m = 0;
  for (size_t i = 0; i < a.layers().size(); ++i) {
    const Layer& la = a.layers()[i];
    const Layer& lb = b.layers()[i];
    if (la.desc.kind == LayerKind::Conv) {
      m = std::max(m, max_abs_diff(la.conv.kernel, lb.conv.kernel));
      if (!la.conv.bias.empty()) m = std::max(m, max_abs_diff(la.conv.bias, lb.conv.bias));
    } else if (la.desc.kind == LayerKind::Linear) {
      m = std::max(m, max_abs_diff(la.linear.weight, lb.linear.weight));
      m = std::max(m, max_abs_diff(la.linear.bias, lb.linear.bias));
    }
  }
  return m;
}

}  // namespace

void make_motif_dataset(const DemoConfig& cfg, std::vector<Tensor>& images,
                        std::vector<int64_t>& labels) {
  images.clear();
  labels.clear();
  int64_t H = cfg.image, W = cfg.image;
  const int64_t stamp = 4;
  if (H < 4 * stamp) throw UsageError("demo images must be at least 16 pixels");
  for (int64_t c = 0; c < cfg.classes; ++c) {
    for (int64_t i = 0; i < cfg.per_class; ++i) {
      Rng rng(cfg.seed * 1000003 + static_cast<uint64_t>(c * cfg.per_class + i));
      Tensor img(cfg.dtype, {1, 1, H, W});
      // Smooth low-frequency background; nothing a 4x4 window can count.
      double ph1 = rng.uniform(0, 6.28318), ph2 = rng.uniform(0, 6.28318);
      double amp = rng.uniform(0.05, 0.15);
      for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x) {
          double v = 0.2 + amp * std::sin(ph1 + 2.5 * static_cast<double>(y) / H) *
                               std::cos(ph2 + 2.5 * static_cast<double>(x) / W);
          img.set_at(y * W + x, v);
        }
      }
      // c+1 checkerboard blobs at distinct spots: high-frequency texture a
      // small kernel detects, counted over the whole image by the head.
      std::vector<std::pair<int64_t, int64_t>> spots;
      for (int64_t s = 0; s < c + 1; ++s) {
        int64_t sy = 0, sx = 0;
        bool ok = false;
        for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
          sy = rng.uniform_int(0, H - stamp);
          sx = rng.uniform_int(0, W - stamp);
          ok = true;
          for (auto& p : spots) {
            if (std::abs(p.first - sy) < 2 * stamp && std::abs(p.second - sx) < 2 * stamp) {
              ok = false;
              break;
            }
          }
        }
        spots.emplace_back(sy, sx);
        for (int64_t dy = 0; dy < stamp; ++dy) {
          for (int64_t dx = 0; dx < stamp; ++dx) {
            double v = ((dy + dx) % 2 == 0) ? 0.9 : -0.5;
            img.set_at((sy + dy) * W + (sx + dx), v);
          }
        }
      }
      images.push_back(std::move(img));
      labels.push_back(c);
    }
  }
}

NetworkSpec demo_spec(Dtype dtype) {
  NetworkSpec s;
  s.dtype = dtype;
  s.split_index = 6;
  auto conv = [](int64_t out, int64_t k) {
    return LayerDesc{LayerKind::Conv, out, k, 1, true};
  };
  auto pool = [] { return LayerDesc{LayerKind::MaxPool, 0, 2, 2, false}; };
  auto relu = [] { return LayerDesc{LayerKind::ReLU, 0, 0, 1, false}; };
  s.layers = {conv(8, 5), relu(), pool(), conv(16, 3), relu(), pool(),
              conv(32, 3), relu(), pool(), LayerDesc{LayerKind::Linear, 0, 0, 1, true}};
  return s;
}

DemoResult train_demo(const DemoConfig& cfg) {
  if (!cfg.run_full && !cfg.run_stream) throw UsageError("demo: no mode selected");
  std::vector<Tensor> images;
  std::vector<int64_t> labels;
  make_motif_dataset(cfg, images, labels);

  NetworkSpec spec = demo_spec(cfg.dtype);
  spec.layers.back().out_channels = cfg.classes;
  std::vector<int64_t> input_shape{cfg.batch, 1, cfg.image, cfg.image};
  validate(spec, input_shape);

  Network net_full = Network::build(spec, input_shape, cfg.seed);
  Network net_stream = Network::build(spec, input_shape, cfg.seed);

  TilePlan plan;
  if (cfg.run_stream) {
    ProbeReport rep = probe(net_stream, cfg.tile);
    plan = plan_tiles(net_stream, {cfg.image, cfg.image}, cfg.tile, rep);
  }
  StreamOptions sopts;
  sopts.threads = cfg.threads;

  size_t n = images.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});

  auto eval = [&](Network& net, bool streamed) {
    int64_t hits = 0;
    for (size_t at = 0; at < n; at += static_cast<size_t>(cfg.batch)) {
      std::vector<size_t> idx;
      for (size_t j = at; j < std::min(n, at + static_cast<size_t>(cfg.batch)); ++j) {
        idx.push_back(j);
      }
      Tensor batch = make_batch(images, idx);
      Tensor logits;
      if (streamed) {
        StreamState st;
        stream_forward(net, batch, plan, st, sopts);
        logits = st.prediction();
      } else {
        logits = forward_full(net, batch);
      }
      for (size_t j = 0; j < idx.size(); ++j) {
        if (argmax_row(logits, static_cast<int64_t>(j)) == labels[idx[j]]) ++hits;
      }
    }
    return static_cast<double>(hits) / static_cast<double>(n);
  };

  DemoResult result;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Same shuffle for both modes: seeded by epoch, not by global state.
    Rng shuffle_rng(cfg.seed + 77777 + static_cast<uint64_t>(epoch));
    for (size_t i = n; i > 1; --i) {
      size_t j = static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    EpochRow row;
    int64_t steps = 0;
    for (size_t at = 0; at + static_cast<size_t>(cfg.batch) <= n;
         at += static_cast<size_t>(cfg.batch)) {
      std::vector<size_t> idx(order.begin() + at, order.begin() + at + cfg.batch);
      Tensor batch = make_batch(images, idx);
      std::vector<int64_t> y;
      for (size_t j : idx) y.push_back(labels[j]);

      if (cfg.run_full) {
        ActivationStore store;
        forward_full_store(net_full, batch, store);
        const Tensor& logits = store.acts.back();
        row.loss_full += cross_entropy(logits, y);
        GradientSet g = backward_full(net_full, store, cross_entropy_grad(logits, y));
        sgd_step(net_full, g, cfg.lr);
      }
      if (cfg.run_stream) {
        StreamState st;
        const Tensor& logits = stream_forward(net_stream, batch, plan, st, sopts);
        row.loss_stream += cross_entropy(logits, y);
        Tensor lg = cross_entropy_grad(logits, y);
        GradientSet g = stream_backward(net_stream, batch, plan, st, lg, sopts);
        sgd_step(net_stream, g, cfg.lr);
      }
      ++steps;
    }
    if (steps > 0) {
      row.loss_full /= static_cast<double>(steps);
      row.loss_stream /= static_cast<double>(steps);
    }
    if (cfg.run_full) row.acc_full = eval(net_full, false);
    if (cfg.run_stream) row.acc_stream = eval(net_stream, true);
    result.epochs.push_back(row);
  }
  if (cfg.run_full && cfg.run_stream) {
    result.max_param_diff = param_diff(net_full, net_stream);
  }
  return result;
}

}  // namespace streamconv
