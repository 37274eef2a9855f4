#pragma once

#include <vector>

#include "streamconv/network.hpp"
#include "streamconv/streaming.hpp"

namespace streamconv {

struct DemoConfig {
  int64_t classes = 10;
  int64_t per_class = 6;
  int64_t image = 64;   // square extent
  int64_t batch = 4;
  int64_t epochs = 3;
  double lr = 0.05;
  uint64_t seed = 1;
  Dtype dtype = Dtype::F32;
  std::vector<int64_t> tile = {48, 48};
  int threads = 1;
  bool run_full = true;    // conventional whole-image training
  bool run_stream = true;  // tiled training
};

struct EpochRow {
  double loss_full = 0, acc_full = 0;
  double loss_stream = 0, acc_stream = 0;
};

struct DemoResult {
  std::vector<EpochRow> epochs;
  // Largest parameter difference between the two trained networks when both
  // modes ran; they start identical and drift only by summation order.
  double max_param_diff = 0;
};

// Count-based synthetic classification set: class c shows c+1 small textured
// blobs on a smooth background, so the evidence is local but the answer needs
// the whole image. Images are (1, 1, image, image).
void make_motif_dataset(const DemoConfig& cfg, std::vector<Tensor>& images,
                        std::vector<int64_t>& labels);

// Two conv/pool blocks streamed, one block plus a linear head as the tail.
NetworkSpec demo_spec(Dtype dtype);

// Trains the selected modes on identical data, batch order and initial
// parameters; the streamed run plans its tiles from an empirical probe.
DemoResult train_demo(const DemoConfig& cfg);

}  // namespace streamconv
