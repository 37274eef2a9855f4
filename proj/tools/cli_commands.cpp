#include "cli_commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "streamconv/demo.hpp"
#include "streamconv/error.hpp"
#include "streamconv/io.hpp"
#include "streamconv/ledger.hpp"
#include "streamconv/network.hpp"
#include "streamconv/probe.hpp"
#include "streamconv/rng.hpp"
#include "streamconv/streaming.hpp"

namespace streamconv_cli {

namespace {

using nlohmann::json;
using namespace streamconv;

std::vector<int64_t> parse_dims(const std::string& s, const char* what) {
  std::vector<int64_t> out;
  std::string tok;
  std::istringstream is(s);
  while (std::getline(is, tok, 'x')) {
    try {
      size_t pos = 0;
      int64_t v = std::stoll(tok, &pos);
      if (pos != tok.size() || v < 1) throw std::invalid_argument("bad");
      out.push_back(v);
    } catch (const std::exception&) {
      throw UsageError(std::string(what) + ": expected positive integers like 512 or 512x512, got '" +
                       s + "'");
    }
  }
  if (out.empty()) throw UsageError(std::string(what) + ": empty dimension list");
  return out;
}

// Extend "527" to a square when the network is 2-d.
std::vector<int64_t> square_dims(std::vector<int64_t> dims, int64_t rank) {
  if (static_cast<int64_t>(dims.size()) == 1 && rank == 2) dims.push_back(dims[0]);
  return dims;
}

struct InputSpec {
  bool random = false;
  std::vector<int64_t> dims;       // random only
  std::optional<uint64_t> seed;    // random:HxW:seed form
  std::string path;                // file only
};

InputSpec parse_input_arg(const std::string& arg) {
  InputSpec spec;
  if (arg.rfind("random:", 0) == 0) {
    spec.random = true;
    std::string rest = arg.substr(7);
    size_t colon = rest.find(':');
    if (colon != std::string::npos) {
      try {
        size_t pos = 0;
        spec.seed = std::stoull(rest.substr(colon + 1), &pos);
        if (pos != rest.size() - colon - 1) throw std::invalid_argument("bad");
      } catch (const std::exception&) {
        throw UsageError("--input random:HxW:seed: bad seed in '" + arg + "'");
      }
      rest = rest.substr(0, colon);
    }
    spec.dims = parse_dims(rest, "--input random:");
  } else {
    spec.path = arg;
  }
  return spec;
}

Tensor make_random_input(Dtype dtype, std::vector<int64_t> shape, uint64_t seed) {
  Tensor t(dtype, std::move(shape));
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  rng.fill_uniform(t, -1.0, 1.0);
  return t;
}

json widths_json(const BorderWidths& w) {
  json arr = json::array();
  for (const auto& pd : w.per_dim) arr.push_back({pd[0], pd[1]});
  return arr;
}

int64_t projected_full_bytes(const NetworkSpec& spec, const std::vector<int64_t>& input_shape) {
  ShapeTrace trace = validate(spec, input_shape);
  int64_t total = 0;
  for (const auto& shape : trace.shapes) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    total += n * static_cast<int64_t>(dtype_size(spec.dtype));
  }
  return total;
}

double mb(int64_t bytes) { return static_cast<double>(bytes) / (1024.0 * 1024.0); }

void print_phase_peaks(const AllocationLedger& ledger) {
  std::printf("  %-18s %12s\n", "phase", "peak MiB");
  for (const auto& [name, peak] : ledger.phase_peaks()) {
    std::printf("  %-18s %12.2f\n", name.c_str(), mb(peak));
  }
}

struct Tolerances {
  double atol_forward, atol_grad, rtol;
};

Tolerances tolerances_for(Dtype d) {
  // f64 streams must agree to summation-order noise; f32 additionally loses
  // bits to the lower mantissa, so a relative term enters.
  if (d == Dtype::F64) return {1e-12, 1e-10, 0.0};
  return {1e-6, 1e-6, 1e-4};
}

struct DiffTracker {
  double worst = 0;
  bool ok = true;
  void check(const Tensor& ref, const Tensor& got, double atol, double rtol) {
    double diff = max_abs_diff(ref, got);
    worst = std::max(worst, diff);
    if (diff > atol + rtol * max_abs(ref)) ok = false;
  }
};

// ---- shared option bundle ----

struct CommonOpts {
  std::string net_path;
  std::string input_arg;
  std::string tile_arg;
  std::string grid_arg;
  std::string dtype_arg;
  int64_t channels = 1;
  uint64_t seed = 1;
  int threads = 1;
  bool json_out = false;
  bool use_analytic = false;
};

NetworkSpec load_spec(const CommonOpts& c) {
  NetworkSpec spec = parse_spec_file(c.net_path);
  if (!c.dtype_arg.empty()) spec.dtype = dtype_from_name(c.dtype_arg);
  return spec;
}

// Resolve input tensor + built network together: the network's shape trace
// depends on the input extents.
struct Session {
  NetworkSpec spec;
  Network net;
  Tensor input;
};

Session open_session(const CommonOpts& c) {
  NetworkSpec spec = load_spec(c);
  InputSpec in = parse_input_arg(c.input_arg);
  Tensor input;
  std::vector<int64_t> input_shape;
  if (in.random) {
    std::vector<int64_t> dims = in.dims;
    input_shape = {1, c.channels};
    input_shape.insert(input_shape.end(), dims.begin(), dims.end());
    input = make_random_input(spec.dtype, input_shape, in.seed.value_or(c.seed));
  } else {
    input = read_tensor(in.path);
    if (input.dtype() != spec.dtype) {
      throw DtypeError("input file holds " + std::string(dtype_name(input.dtype())) +
                       " but the network wants " + dtype_name(spec.dtype));
    }
    input_shape = input.shape();
  }
  Network net = Network::build(spec, input_shape, c.seed);
  return Session{std::move(spec), std::move(net), std::move(input)};
}

// Border widths do not depend on the probed tile size, so the default probe
// tile is the cheapest one with every width strictly inside its extent.
std::vector<int64_t> default_probe_tile(const Network& net) {
  PrefixGeometry g = prefix_geometry(net);
  std::vector<int64_t> tile(g.receptive.size());
  for (size_t d = 0; d < tile.size(); ++d) tile[d] = 2 * g.receptive[d] + g.stride[d];
  return tile;
}

ProbeReport probe_for_plan(const Network& net, const std::vector<int64_t>& spatial,
                           const CommonOpts& c) {
  std::vector<int64_t> probe_tile =
      c.tile_arg.empty() ? default_probe_tile(net)
                         : square_dims(parse_dims(c.tile_arg, "--tile"), net.spatial_rank());
  for (size_t d = 0; d < probe_tile.size(); ++d) {
    probe_tile[d] = std::min(probe_tile[d], spatial[d]);
  }
  return probe(net, probe_tile);
}

TilePlan make_plan(const Network& net, const Tensor& input, const CommonOpts& c) {
  std::vector<int64_t> spatial(input.shape().begin() + 2, input.shape().end());
  ProbeReport rep = c.use_analytic ? analytic_overlap(net) : probe_for_plan(net, spatial, c);
  if (!c.grid_arg.empty()) {
    return plan_grid(net, spatial, square_dims(parse_dims(c.grid_arg, "--grid"), net.spatial_rank()),
                     rep);
  }
  if (c.tile_arg.empty()) throw UsageError("one of --tile or --grid is required");
  return plan_tiles(net, spatial, square_dims(parse_dims(c.tile_arg, "--tile"), net.spatial_rank()),
                    rep);
}

// ---- probe ----

int cmd_probe(const CommonOpts& c) {
  NetworkSpec spec = load_spec(c);
  if (c.tile_arg.empty()) throw UsageError("probe needs --tile");
  // Build only the prefix against a tile-sized input: that is all the probe
  // touches, and a deep tail may not fit a tile-sized extent at all.
  NetworkSpec prefix = spec;
  prefix.layers.resize(static_cast<size_t>(spec.split_index));
  std::vector<int64_t> rank_probe{1, c.channels};
  std::vector<int64_t> tile = parse_dims(c.tile_arg, "--tile");
  // Spatial rank comes from the tile request for a fresh spec.
  tile = square_dims(tile, 2);
  std::vector<int64_t> input_shape = rank_probe;
  input_shape.insert(input_shape.end(), tile.begin(), tile.end());
  Network net = Network::build(prefix, input_shape, c.seed);

  ProbeReport emp = probe(net, tile);
  ProbeReport ana = analytic_overlap(net);
  bool agrees = emp.same_widths(ana);

  if (c.json_out) {
    json out;
    out["tile"] = emp.tile_size_probed;
    out["output_stride"] = emp.output_stride;
    out["input_overlap"] = emp.input_overlap();
    out["analytic_agrees"] = agrees;
    out["layers"] = json::array();
    for (size_t l = 0; l < emp.layers.size(); ++l) {
      json row;
      row["layer"] = l;
      row["kind"] = layer_kind_name(spec.layers[l].kind);
      row["invalid_forward"] = widths_json(emp.layers[l].invalid_forward);
      row["invalid_backward"] = widths_json(emp.layers[l].invalid_backward);
      out["layers"].push_back(row);
    }
    std::cout << out.dump(2) << "\n";
  } else {
    std::printf("probed tile:");
    for (int64_t t : emp.tile_size_probed) std::printf(" %lld", static_cast<long long>(t));
    std::printf("\noutput stride:");
    for (int64_t s : emp.output_stride) std::printf(" %lld", static_cast<long long>(s));
    std::printf("\ninput overlap:");
    for (int64_t o : emp.input_overlap()) std::printf(" %lld", static_cast<long long>(o));
    std::printf("\n%-6s %-9s %-22s %-22s\n", "layer", "kind", "invalid fwd (lo,hi)", "invalid bwd (lo,hi)");
    for (size_t l = 0; l < emp.layers.size(); ++l) {
      std::string fw, bw;
      for (const auto& pd : emp.layers[l].invalid_forward.per_dim) {
        fw += "(" + std::to_string(pd[0]) + "," + std::to_string(pd[1]) + ") ";
      }
      for (const auto& pd : emp.layers[l].invalid_backward.per_dim) {
        bw += "(" + std::to_string(pd[0]) + "," + std::to_string(pd[1]) + ") ";
      }
      std::printf("%-6zu %-9s %-22s %-22s\n", l, layer_kind_name(spec.layers[l].kind), fw.c_str(),
                  bw.c_str());
    }
    std::printf("analytic agreement: %s\n", agrees ? "yes" : "NO");
  }
  return agrees ? 0 : 3;
}

// ---- equiv ----

struct EquivOpts {
  bool input_grad = false;
  int64_t corrupt = 0;
  std::string dump_dir;
  bool ledger = false;
};

int cmd_equiv(const CommonOpts& c, const EquivOpts& e) {
  Session s = open_session(c);
  TilePlan plan = make_plan(s.net, s.input, c);
  StreamOptions opts;
  opts.threads = c.threads;
  opts.want_input_grad = e.input_grad;
  opts.corrupt_context = e.corrupt;

  AllocationLedger full_ledger, stream_ledger;
  Tensor pred_full, pred_stream;
  GradientSet g_full, g_stream;
  {
    LedgerScope scope(full_ledger);
    ActivationStore store;
    forward_full_store(s.net, s.input, store);
    pred_full = store.acts.back();
    BackwardOptions bo;
    bo.want_input_grad = e.input_grad;
    g_full = backward_full(s.net, store, sum_loss_grad(pred_full), bo);
  }
  {
    LedgerScope scope(stream_ledger);
    StreamState st;
    stream_forward(s.net, s.input, plan, st, opts);
    pred_stream = st.prediction();
    g_stream = stream_backward(s.net, s.input, plan, st, sum_loss_grad(pred_stream), opts);
  }

  Tolerances tol = tolerances_for(s.spec.dtype);
  DiffTracker fwd, grad;
  fwd.check(pred_full, pred_stream, tol.atol_forward, tol.rtol);
  size_t worst_layer = 0;
  double worst_layer_diff = -1;
  for (size_t l = 0; l < s.net.layers().size(); ++l) {
    auto check_pair = [&](const Tensor& a, const Tensor& b) {
      if (a.empty() != b.empty()) {
        grad.ok = false;
        return;
      }
      if (a.empty()) return;
      double before = grad.worst;
      grad.check(a, b, tol.atol_grad, tol.rtol);
      if (grad.worst > before && grad.worst > worst_layer_diff) {
        worst_layer_diff = grad.worst;
        worst_layer = l;
      }
    };
    check_pair(g_full.kernel[l], g_stream.kernel[l]);
    check_pair(g_full.bias[l], g_stream.bias[l]);
  }
  DiffTracker igrad;
  if (e.input_grad) igrad.check(g_full.input, g_stream.input, tol.atol_grad, tol.rtol);

  bool pass = fwd.ok && grad.ok && (!e.input_grad || igrad.ok);

  if (!e.dump_dir.empty()) {
    write_tensor(e.dump_dir + "/pred_full.sten", pred_full);
    write_tensor(e.dump_dir + "/pred_stream.sten", pred_stream);
    if (!g_full.kernel[worst_layer].empty()) {
      write_tensor(e.dump_dir + "/grad_full_layer" + std::to_string(worst_layer) + ".sten",
                   g_full.kernel[worst_layer]);
      write_tensor(e.dump_dir + "/grad_stream_layer" + std::to_string(worst_layer) + ".sten",
                   g_stream.kernel[worst_layer]);
    }
  }

  if (c.json_out) {
    json out;
    out["dtype"] = dtype_name(s.spec.dtype);
    out["grid"] = plan.grid;
    out["n_tiles"] = plan.tile_count();
    out["max_abs_forward_diff"] = fwd.worst;
    out["max_abs_grad_diff"] = grad.worst;
    if (e.input_grad) out["max_abs_input_grad_diff"] = igrad.worst;
    out["pass"] = pass;
    std::cout << out.dump(2) << "\n";
  } else {
    std::printf("tiles: %zu (grid", plan.tile_count());
    for (int64_t gdim : plan.grid) std::printf(" %lld", static_cast<long long>(gdim));
    std::printf(")\nforward:    max |diff| = %.3e %s\n", fwd.worst, fwd.ok ? "ok" : "FAIL");
    std::printf("gradients:  max |diff| = %.3e %s\n", grad.worst, grad.ok ? "ok" : "FAIL");
    if (e.input_grad) {
      std::printf("input grad: max |diff| = %.3e %s\n", igrad.worst, igrad.ok ? "ok" : "FAIL");
    }
    if (e.ledger) {
      std::printf("full-pass peak:    %.2f MiB\n", mb(full_ledger.peak_bytes()));
      std::printf("streamed peak:     %.2f MiB\n", mb(stream_ledger.peak_bytes()));
      print_phase_peaks(stream_ledger);
    }
    std::printf("%s\n", pass ? "PASS" : "FAIL");
  }
  return pass ? 0 : 3;
}

// ---- bench ----

struct BenchOpts {
  std::string sizes_arg = "1024";
  std::string csv_path;
  int64_t repeats = 1;
  bool ledger = false;
  bool forward_only = false;
};

int cmd_bench(const CommonOpts& c, const BenchOpts& b) {
  NetworkSpec spec = load_spec(c);
  if (c.tile_arg.empty() && c.grid_arg.empty()) throw UsageError("bench needs --tile or --grid");
  std::vector<int64_t> sizes;
  {
    std::istringstream is(b.sizes_arg);
    std::string tok;
    while (std::getline(is, tok, ',')) {
      sizes.push_back(parse_dims(tok, "--sizes")[0]);
    }
  }

  std::ostringstream csv;
  csv << "input,tile,n_tiles,mode,forward_ms,backward_ms,peak_bytes,projected_full_bytes\n";
  std::printf("%-8s %-8s %-8s %-8s %12s %12s %12s %16s\n", "input", "tile", "n_tiles", "mode",
              "fwd ms", "bwd ms", "peak MiB", "full-proj MiB");

  for (int64_t size : sizes) {
    std::vector<int64_t> input_shape{1, c.channels, size, size};
    Network net = Network::build(spec, input_shape, c.seed);
    std::vector<int64_t> spatial{size, size};
    ProbeReport rep = c.use_analytic ? analytic_overlap(net) : probe_for_plan(net, spatial, c);
    TilePlan plan = c.grid_arg.empty()
                        ? plan_tiles(net, spatial, square_dims(parse_dims(c.tile_arg, "--tile"), 2),
                                     rep)
                        : plan_grid(net, spatial, square_dims(parse_dims(c.grid_arg, "--grid"), 2),
                                    rep);
    int64_t projected = projected_full_bytes(spec, input_shape);
    bool conventional = plan.tile_count() == 1;

    for (int64_t repeat = 0; repeat < std::max<int64_t>(b.repeats, 1); ++repeat) {
      AllocationLedger ledger;
      double fwd_ms = 0, bwd_ms = 0;
      {
        LedgerScope scope(ledger);
        Tensor input = make_random_input(spec.dtype, input_shape, c.seed);
        auto t0 = std::chrono::steady_clock::now();
        if (conventional) {
          // A single tile covers the whole input: run the ordinary pass, which
          // is what any plan without tiling degenerates to.
          ActivationStore store;
          forward_full_store(net, std::move(input), store);
          auto t1 = std::chrono::steady_clock::now();
          fwd_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
          if (!b.forward_only) {
            Tensor lg = sum_loss_grad(store.acts.back());
            GradientSet g = backward_full(net, store, lg);
            auto t2 = std::chrono::steady_clock::now();
            bwd_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
          }
        } else {
          StreamOptions opts;
          opts.threads = c.threads;
          StreamState st;
          stream_forward(net, input, plan, st, opts);
          auto t1 = std::chrono::steady_clock::now();
          fwd_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
          if (!b.forward_only) {
            Tensor lg = sum_loss_grad(st.prediction());
            GradientSet g = stream_backward(net, input, plan, st, lg, opts);
            auto t2 = std::chrono::steady_clock::now();
            bwd_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
          }
        }
      }

      int64_t tile_out = plan.requested_tile[0];
      csv << size << "," << tile_out << "," << plan.tile_count() << ","
          << (conventional ? "full" : "stream") << "," << fwd_ms << "," << bwd_ms << ","
          << ledger.peak_bytes() << "," << projected << "\n";
      std::printf("%-8lld %-8lld %-8zu %-8s %12.1f %12.1f %12.2f %16.2f\n",
                  static_cast<long long>(size), static_cast<long long>(tile_out), plan.tile_count(),
                  conventional ? "full" : "stream", fwd_ms, bwd_ms, mb(ledger.peak_bytes()),
                  mb(projected));
      if (b.ledger) print_phase_peaks(ledger);
    }
  }

  if (!b.csv_path.empty()) {
    std::ofstream out(b.csv_path);
    if (!out) throw IoError("cannot write " + b.csv_path);
    out << csv.str();
  }
  return 0;
}

// ---- train-demo ----

struct DemoOpts {
  int64_t epochs = 3;
  int64_t image = 64;
  int64_t per_class = 6;
  int64_t classes = 10;
  int64_t batch = 4;
  double lr = 0.05;
  std::string mode = "both";
};

int cmd_train_demo(const CommonOpts& c, const DemoOpts& d) {
  DemoConfig cfg;
  cfg.epochs = d.epochs;
  cfg.image = d.image;
  cfg.per_class = d.per_class;
  cfg.classes = d.classes;
  cfg.batch = d.batch;
  cfg.lr = d.lr;
  cfg.seed = c.seed;
  cfg.threads = c.threads;
  cfg.dtype = c.dtype_arg.empty() ? Dtype::F32 : dtype_from_name(c.dtype_arg);
  if (!c.tile_arg.empty()) cfg.tile = square_dims(parse_dims(c.tile_arg, "--tile"), 2);
  if (d.mode == "full") {
    cfg.run_stream = false;
  } else if (d.mode == "stream") {
    cfg.run_full = false;
  } else if (d.mode != "both") {
    throw UsageError("--mode must be full, stream or both");
  }

  DemoResult res = train_demo(cfg);
  std::printf("%-6s %-12s %-10s %-12s %-10s\n", "epoch", "loss(full)", "acc(full)", "loss(str)",
              "acc(str)");
  for (size_t i = 0; i < res.epochs.size(); ++i) {
    const EpochRow& r = res.epochs[i];
    std::printf("%-6zu %-12.4f %-10.3f %-12.4f %-10.3f\n", i + 1, r.loss_full, r.acc_full,
                r.loss_stream, r.acc_stream);
  }
  if (cfg.run_full && cfg.run_stream) {
    std::printf("max parameter difference between the two runs: %.3e\n", res.max_param_diff);
  }
  return 0;
}

// ---- saliency ----

int cmd_saliency(const CommonOpts& c, int64_t class_index, const std::string& out_path) {
  Session s = open_session(c);
  TilePlan plan = make_plan(s.net, s.input, c);
  StreamOptions opts;
  opts.threads = c.threads;
  Tensor map = saliency(s.net, s.input, plan, class_index, opts);
  if (!out_path.empty()) write_tensor(out_path, map);
  double mx = max_abs(map);
  if (c.json_out) {
    json out;
    out["class"] = class_index;
    out["shape"] = map.shape();
    out["max"] = mx;
    if (!out_path.empty()) out["out"] = out_path;
    std::cout << out.dump(2) << "\n";
  } else {
    std::printf("saliency for class %lld: shape %s, max %.3f%s%s\n",
                static_cast<long long>(class_index), map.shape_str().c_str(), mx,
                out_path.empty() ? "" : ", written to ", out_path.c_str());
  }
  return 0;
}

// ---- stats ----

int cmd_stats(const CommonOpts& c, int64_t count) {
  Session s = open_session(c);
  TilePlan plan = make_plan(s.net, s.input, c);
  std::vector<Tensor> inputs;
  inputs.push_back(s.input);
  for (int64_t i = 1; i < count; ++i) {
    inputs.push_back(make_random_input(s.spec.dtype, s.input.shape(), c.seed + i));
  }
  ChannelStats st = stream_stats(s.net, inputs, plan);
  if (c.json_out) {
    json out;
    out["mean"] = st.mean;
    out["stddev"] = st.stddev;
    out["variance_clamped"] = st.clamped;
    std::cout << out.dump(2) << "\n";
  } else {
    std::printf("%-8s %14s %14s\n", "channel", "mean", "stddev");
    for (size_t ch = 0; ch < st.mean.size(); ++ch) {
      std::printf("%-8zu %14.6f %14.6f\n", ch, st.mean[ch], st.stddev[ch]);
    }
    if (st.clamped) std::printf("note: a variance was clamped to zero\n");
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Train and evaluate convolutional networks on inputs larger than memory by "
               "streaming tiles through the local prefix"};
  app.require_subcommand(1);

  CommonOpts c;
  EquivOpts e;
  BenchOpts b;
  DemoOpts d;
  int64_t class_index = 0;
  std::string saliency_out;
  int64_t stats_count = 1;

  auto add_common = [&](CLI::App* cmd, bool needs_net, bool needs_input) {
    auto* net = cmd->add_option("--net", c.net_path, "network description file");
    if (needs_net) net->required();
    auto* in = cmd->add_option("--input", c.input_arg,
                               "tensor file, or random:HxW for a seeded random input");
    if (needs_input) in->required();
    cmd->add_option("--tile", c.tile_arg, "tile extents, e.g. 527 or 527x527");
    cmd->add_option("--grid,--tiles", c.grid_arg,
                    "tile counts per dim, e.g. 2x2 (alternative to --tile)");
    cmd->add_option("--dtype", c.dtype_arg, "override the network dtype (f32|f64)");
    cmd->add_option("--channels", c.channels, "input channels for random inputs (default 1)");
    cmd->add_option("--seed", c.seed, "seed for parameters and random inputs");
    cmd->add_option("--threads", c.threads, "tile worker threads (default 1)");
    cmd->add_flag("--json", c.json_out, "machine-readable output");
    cmd->add_flag("--analytic", c.use_analytic, "plan from the closed-form overlap, not the probe");
  };

  CLI::App* probe_cmd = app.add_subcommand("probe", "measure per-layer border overlap empirically "
                                                    "and compare with the closed form");
  add_common(probe_cmd, true, false);

  CLI::App* equiv_cmd = app.add_subcommand(
      "equiv", "verify streamed forward/backward against the conventional whole-input pass");
  add_common(equiv_cmd, true, true);
  equiv_cmd->add_flag("--input-grad", e.input_grad, "also compare input gradients");
  equiv_cmd->add_option("--corrupt-context", e.corrupt,
                        "shrink the backward halo by this many positions (negative control)");
  equiv_cmd->add_option("--dump", e.dump_dir, "write predictions and worst-layer gradients here");
  equiv_cmd->add_flag("--ledger", e.ledger, "print peak memory of both passes");

  CLI::App* bench_cmd = app.add_subcommand("bench", "time and meter streamed vs conventional runs");
  add_common(bench_cmd, true, false);
  bench_cmd->add_option("--sizes", b.sizes_arg, "comma-separated square input sizes");
  bench_cmd->add_option("--repeats", b.repeats, "timing rows per configuration (default 1)");
  bench_cmd->add_option("--csv", b.csv_path, "also write rows to this CSV file");
  bench_cmd->add_flag("--ledger", b.ledger, "print per-phase peak memory");
  bench_cmd->add_flag("--forward-only", b.forward_only, "skip the backward pass");

  CLI::App* demo_cmd = app.add_subcommand(
      "train-demo", "train a small counting classifier conventionally and tiled, side by side");
  add_common(demo_cmd, false, false);
  demo_cmd->add_option("--epochs", d.epochs, "training epochs");
  demo_cmd->add_option("--image", d.image, "square image extent");
  demo_cmd->add_option("--per-class", d.per_class, "images per class");
  demo_cmd->add_option("--classes", d.classes, "number of classes");
  demo_cmd->add_option("--batch", d.batch, "batch size");
  demo_cmd->add_option("--lr", d.lr, "learning rate");
  demo_cmd->add_option("--mode", d.mode, "full | stream | both");

  CLI::App* sal_cmd = app.add_subcommand(
      "saliency", "input-gradient saliency for one class, computed tile by tile");
  add_common(sal_cmd, true, true);
  sal_cmd->add_option("--class", class_index, "class logit to differentiate")->required();
  sal_cmd->add_option("--out", saliency_out, "write the map as a tensor file");

  CLI::App* stats_cmd = app.add_subcommand(
      "stats", "streamed per-channel mean/stddev of the split activation");
  add_common(stats_cmd, true, true);
  stats_cmd->add_option("--count", stats_count, "number of random inputs to pool");

  try {
    app.parse(argc, const_cast<char**>(argv));
  } catch (const CLI::ParseError& err) {
    int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(probe_cmd)) return cmd_probe(c);
    if (app.got_subcommand(equiv_cmd)) return cmd_equiv(c, e);
    if (app.got_subcommand(bench_cmd)) return cmd_bench(c, b);
    if (app.got_subcommand(demo_cmd)) return cmd_train_demo(c, d);
    if (app.got_subcommand(sal_cmd)) return cmd_saliency(c, class_index, saliency_out);
    if (app.got_subcommand(stats_cmd)) return cmd_stats(c, stats_count);
    throw UsageError("no subcommand");
  } catch (const IoError& err) {
    std::fprintf(stderr, "io error: %s\n", err.what());
    return 4;
  } catch (const InternalError& err) {
    std::fprintf(stderr, "internal error: %s\n", err.what());
    return 4;
  } catch (const Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  } catch (const std::bad_alloc&) {
    std::fprintf(stderr, "error: out of memory\n");
    return 4;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 4;
  }
}

}  // namespace streamconv_cli
