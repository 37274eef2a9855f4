#include "streamconv/network.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "streamconv/rng.hpp"

namespace streamconv {

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Linear: return "linear";
  }
  return "?";
}

namespace {

bool is_local(LayerKind k) {
  return k == LayerKind::Conv || k == LayerKind::MaxPool || k == LayerKind::ReLU;
}

[[noreturn]] void parse_fail(size_t line_no, const std::string& msg) {
  throw ParseError("line " + std::to_string(line_no) + ": " + msg);
}

// Layer kinds we recognise but deliberately do not support; naming them beats
// a generic "unknown layer".
bool is_normalization_name(const std::string& s) {
  return s == "batchnorm" || s == "batchnorm2d" || s == "layernorm" || s == "groupnorm" ||
         s == "instancenorm";
}

struct KV {
  std::string key, value;
  bool flag = false;
};

std::vector<KV> split_fields(std::istringstream& is) {
  std::vector<KV> out;
  std::string tok;
  while (is >> tok) {
    auto eq = tok.find('=');
    if (eq == std::string::npos) {
      out.push_back({tok, "", true});
    } else {
      out.push_back({tok.substr(0, eq), tok.substr(eq + 1), false});
    }
  }
  return out;
}

int64_t parse_int(const KV& kv, size_t line_no) {
  try {
    size_t pos = 0;
    int64_t v = std::stoll(kv.value, &pos);
    if (pos != kv.value.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    parse_fail(line_no, "field " + kv.key + " needs an integer, got '" + kv.value + "'");
  }
}

}  // namespace

NetworkSpec parse_spec(const std::string& text) {
  NetworkSpec spec;
  bool header_seen = false;
  std::istringstream lines(text);
  std::string raw;
  size_t line_no = 0;
  while (std::getline(lines, raw)) {
    ++line_no;
    auto hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    std::istringstream is(raw);
    if (!header_seen) {
      auto fields = split_fields(is);
      if (fields.empty()) continue;  // blank/comment line before the header
      bool have_split = false, have_dtype = false;
      for (const auto& kv : fields) {
        if (kv.key == "split" && !kv.flag) {
          spec.split_index = parse_int(kv, line_no);
          have_split = true;
        } else if (kv.key == "dtype" && !kv.flag) {
          try {
            spec.dtype = dtype_from_name(kv.value);
          } catch (const ParseError& e) {
            parse_fail(line_no, e.what());
          }
          have_dtype = true;
        } else {
          parse_fail(line_no, "header takes split=<i> dtype=<f32|f64>, got '" + kv.key + "'");
        }
      }
      if (!have_split || !have_dtype) parse_fail(line_no, "header needs both split= and dtype=");
      header_seen = true;
      continue;
    }

    std::string kind;
    if (!(is >> kind)) continue;
    LayerDesc d;
    if (kind == "conv") {
      d.kind = LayerKind::Conv;
    } else if (kind == "maxpool") {
      d.kind = LayerKind::MaxPool;
      d.kernel = 2;
      d.stride = 2;
    } else if (kind == "relu") {
      d.kind = LayerKind::ReLU;
    } else if (kind == "flatten") {
      d.kind = LayerKind::Flatten;
    } else if (kind == "linear") {
      d.kind = LayerKind::Linear;
    } else if (is_normalization_name(kind)) {
      parse_fail(line_no, "normalization layer '" + kind + "' is not supported");
    } else {
      parse_fail(line_no, "unknown layer kind '" + kind + "'");
    }

    for (const auto& kv : split_fields(is)) {
      if (kv.flag && kv.key == "bias" && d.kind == LayerKind::Conv) {
        d.bias = true;
      } else if (!kv.flag && kv.key == "out" &&
                 (d.kind == LayerKind::Conv || d.kind == LayerKind::Linear)) {
        d.out_channels = parse_int(kv, line_no);
      } else if (!kv.flag && kv.key == "k" &&
                 (d.kind == LayerKind::Conv || d.kind == LayerKind::MaxPool)) {
        d.kernel = parse_int(kv, line_no);
      } else if (!kv.flag && kv.key == "stride" &&
                 (d.kind == LayerKind::Conv || d.kind == LayerKind::MaxPool)) {
        d.stride = parse_int(kv, line_no);
      } else {
        parse_fail(line_no, std::string(layer_kind_name(d.kind)) + " does not take '" + kv.key + "'");
      }
    }
    if (d.kind == LayerKind::Conv && (d.out_channels < 1 || d.kernel < 1)) {
      parse_fail(line_no, "conv needs out=<c> and k=<n>");
    }
    if (d.kind == LayerKind::MaxPool && (d.kernel < 1 || d.stride < 1)) {
      parse_fail(line_no, "maxpool needs k>=1 and stride>=1");
    }
    if (d.kind == LayerKind::Linear && d.out_channels < 1) {
      parse_fail(line_no, "linear needs out=<c>");
    }
    if (d.stride < 1) parse_fail(line_no, "stride must be >= 1");
    spec.layers.push_back(d);
  }
  if (!header_seen) throw ParseError("missing header line (split=<i> dtype=<f32|f64>)");
  return spec;
}

NetworkSpec parse_spec_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open network file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_spec(ss.str());
}

std::string emit_spec(const NetworkSpec& spec) {
  std::ostringstream os;
  os << "split=" << spec.split_index << " dtype=" << dtype_name(spec.dtype) << "\n";
  for (const auto& d : spec.layers) {
    switch (d.kind) {
      case LayerKind::Conv:
        os << "conv out=" << d.out_channels << " k=" << d.kernel << " stride=" << d.stride;
        if (d.bias) os << " bias";
        os << "\n";
        break;
      case LayerKind::MaxPool:
        os << "maxpool k=" << d.kernel << " stride=" << d.stride << "\n";
        break;
      case LayerKind::ReLU:
        os << "relu\n";
        break;
      case LayerKind::Flatten:
        os << "flatten\n";
        break;
      case LayerKind::Linear:
        os << "linear out=" << d.out_channels << "\n";
        break;
    }
  }
  return os.str();
}

ShapeTrace validate(const NetworkSpec& spec, const std::vector<int64_t>& input_shape) {
  if (input_shape.size() != 3 && input_shape.size() != 4) {
    throw ValidationError("input shape must be (batch, channels, spatial...), got rank " +
                          std::to_string(input_shape.size()));
  }
  for (int64_t d : input_shape) {
    if (d < 1) throw ValidationError("input dims must be >= 1");
  }
  if (spec.layers.empty()) throw ValidationError("network has no layers");
  int64_t n = static_cast<int64_t>(spec.layers.size());
  if (spec.split_index < 1 || spec.split_index > n) {
    throw ValidationError("split index " + std::to_string(spec.split_index) +
                          " outside [1, " + std::to_string(n) + "]");
  }

  ShapeTrace trace;
  trace.shapes.push_back(input_shape);
  std::vector<int64_t> cur = input_shape;
  bool flat = false;
  for (int64_t i = 0; i < n; ++i) {
    const LayerDesc& d = spec.layers[i];
    std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(d.kind) + ")";
    if (i < spec.split_index && !is_local(d.kind)) {
      throw ValidationError(where + ": non-local layer before the split; move the split or the layer");
    }
    switch (d.kind) {
      case LayerKind::Conv:
      case LayerKind::MaxPool: {
        if (flat) throw ValidationError(where + ": spatial layer after flatten");
        int64_t k = d.kernel, s = d.stride;
        std::vector<int64_t> next{cur[0],
                                  d.kind == LayerKind::Conv ? d.out_channels : cur[1]};
        for (size_t sd = 2; sd < cur.size(); ++sd) {
          if (cur[sd] < k) {
            throw ValidationError(where + ": shape underflow, extent " + std::to_string(cur[sd]) +
                                  " smaller than window " + std::to_string(k));
          }
          next.push_back((cur[sd] - k) / s + 1);
        }
        cur = next;
        break;
      }
      case LayerKind::ReLU:
        break;
      case LayerKind::Flatten: {
        if (flat) throw ValidationError(where + ": flatten applied twice");
        int64_t f = 1;
        for (size_t sd = 1; sd < cur.size(); ++sd) f *= cur[sd];
        cur = {cur[0], f};
        flat = true;
        break;
      }
      case LayerKind::Linear: {
        int64_t f = 1;
        for (size_t sd = 1; sd < cur.size(); ++sd) f *= cur[sd];
        cur = {cur[0], d.out_channels};
        flat = true;
        (void)f;
        break;
      }
    }
    trace.shapes.push_back(cur);
  }
  return trace;
}

Network Network::build(NetworkSpec spec, std::vector<int64_t> input_shape, uint64_t seed) {
  Network net;
  net.trace_ = validate(spec, input_shape);
  net.spec_ = std::move(spec);
  net.input_shape_ = std::move(input_shape);
  Rng rng(seed);
  size_t sdims = net.input_shape_.size() - 2;
  for (size_t i = 0; i < net.spec_.layers.size(); ++i) {
    const LayerDesc& d = net.spec_.layers[i];
    Layer layer;
    layer.desc = d;
    const auto& in_shape = net.trace_.shapes[i];
    if (d.kind == LayerKind::Conv) {
      int64_t in_ch = in_shape[1];
      std::vector<int64_t> kshape{d.out_channels, in_ch};
      for (size_t sd = 0; sd < sdims; ++sd) kshape.push_back(d.kernel);
      layer.conv.kernel = Tensor(net.spec_.dtype, kshape);
      double fan_in = static_cast<double>(in_ch) * std::pow(static_cast<double>(d.kernel),
                                                            static_cast<double>(sdims));
      rng.fill_normal(layer.conv.kernel, std::sqrt(2.0 / fan_in));
      if (d.bias) layer.conv.bias = Tensor(net.spec_.dtype, {d.out_channels});
      layer.conv.stride.assign(sdims, static_cast<int>(d.stride));
    } else if (d.kind == LayerKind::Linear) {
      int64_t f = 1;
      for (size_t sd = 1; sd < in_shape.size(); ++sd) f *= in_shape[sd];
      layer.linear.weight = Tensor(net.spec_.dtype, {d.out_channels, f});
      rng.fill_normal(layer.linear.weight, std::sqrt(2.0 / static_cast<double>(f)));
      layer.linear.bias = Tensor(net.spec_.dtype, {d.out_channels});
    }
    net.layers_.push_back(std::move(layer));
  }
  return net;
}

Tensor layer_forward(const Layer& layer, const Tensor& input, ArgmaxMap* argmax) {
  switch (layer.desc.kind) {
    case LayerKind::Conv:
      return conv_forward(input, layer.conv);
    case LayerKind::MaxPool: {
      auto [out, am] = maxpool_forward(
          input, PoolParams{static_cast<int>(layer.desc.kernel), static_cast<int>(layer.desc.stride)});
      if (argmax) *argmax = std::move(am);
      return std::move(out);
    }
    case LayerKind::ReLU:
      return relu_forward(input);
    case LayerKind::Flatten: {
      Tensor copy = input;
      int64_t f = input.numel() / input.shape()[0];
      return std::move(copy).reshaped({input.shape()[0], f});
    }
    case LayerKind::Linear:
      return linear_forward(input, layer.linear);
  }
  throw InternalError("unhandled layer kind");
}

Tensor layer_backward_input(const Layer& layer, const Tensor& grad_out, const Tensor& input,
                            const ArgmaxMap& argmax) {
  switch (layer.desc.kind) {
    case LayerKind::Conv: {
      std::vector<int64_t> spatial(input.shape().begin() + 2, input.shape().end());
      return conv_backward_input(grad_out, layer.conv, spatial);
    }
    case LayerKind::MaxPool:
      return maxpool_backward(grad_out, argmax, input.shape());
    case LayerKind::ReLU:
      return relu_backward(grad_out, input);
    default:
      throw UsageError("layer_backward_input only handles local layers");
  }
}

Tensor forward_full(const Network& net, const Tensor& input) {
  Tensor cur = input;
  for (const auto& layer : net.layers()) {
    cur = layer_forward(layer, cur, nullptr);
  }
  return cur;
}

void forward_full_store(const Network& net, Tensor input, ActivationStore& store) {
  store.acts.clear();
  store.argmax.assign(net.layers().size(), ArgmaxMap{});
  store.acts.push_back(std::move(input));
  for (size_t i = 0; i < net.layers().size(); ++i) {
    store.acts.push_back(layer_forward(net.layers()[i], store.acts.back(), &store.argmax[i]));
  }
}

GradientSet backward_full(const Network& net, const ActivationStore& store,
                          const Tensor& loss_grad, const BackwardOptions& opts) {
  size_t n = net.layers().size();
  if (store.acts.size() != n + 1) throw UsageError("activation store does not match network");
  if (loss_grad.shape() != store.acts.back().shape()) {
    throw ShapeError("loss_grad shape " + loss_grad.shape_str() + " != prediction shape " +
                     store.acts.back().shape_str());
  }
  GradientSet grads;
  grads.kernel.resize(n);
  grads.bias.resize(n);
  if (opts.retain_layer_grads) grads.layer_input_grads.resize(n);
  Tensor g = loss_grad;
  for (size_t ri = n; ri-- > 0;) {
    const Layer& layer = net.layers()[ri];
    const Tensor& input = store.acts[ri];
    switch (layer.desc.kind) {
      case LayerKind::Conv: {
        grads.kernel[ri] = conv_backward_kernel(input, g, layer.conv);
        if (!layer.conv.bias.empty()) grads.bias[ri] = conv_backward_bias(g);
        std::vector<int64_t> spatial(input.shape().begin() + 2, input.shape().end());
        g = conv_backward_input(g, layer.conv, spatial);
        break;
      }
      case LayerKind::MaxPool:
        g = maxpool_backward(g, store.argmax[ri], input.shape());
        break;
      case LayerKind::ReLU:
        g = relu_backward(g, input);
        break;
      case LayerKind::Flatten: {
        Tensor gg = std::move(g);
        g = std::move(gg).reshaped(input.shape());
        break;
      }
      case LayerKind::Linear: {
        LinearGrads lg = linear_backward(input, g, layer.linear);
        grads.kernel[ri] = std::move(lg.weight);
        grads.bias[ri] = std::move(lg.bias);
        Tensor gin = std::move(lg.input);
        g = std::move(gin).reshaped(input.shape());
        break;
      }
    }
    if (opts.retain_layer_grads) grads.layer_input_grads[ri] = g;
  }
  if (opts.want_input_grad) grads.input = std::move(g);
  return grads;
}

double sum_loss(const Tensor& pred) { return sum_all(pred); }

Tensor sum_loss_grad(const Tensor& pred) {
  return Tensor::full(pred.dtype(), pred.shape(), 1.0);
}

double cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels) {
  const auto& s = logits.shape();
  if (s.size() != 2) throw ShapeError("cross_entropy expects (batch, classes) logits");
  int64_t n = s[0], k = s[1];
  if (static_cast<int64_t>(labels.size()) != n) throw ShapeError("label count != batch");
  double total = 0;
  for (int64_t i = 0; i < n; ++i) {
    int64_t lbl = labels[static_cast<size_t>(i)];
    if (lbl < 0 || lbl >= k) throw ShapeError("label out of range");
    double m = logits.value_at(i * k);
    for (int64_t j = 1; j < k; ++j) m = std::max(m, logits.value_at(i * k + j));
    double lse = 0;
    for (int64_t j = 0; j < k; ++j) lse += std::exp(logits.value_at(i * k + j) - m);
    total += m + std::log(lse) - logits.value_at(i * k + lbl);
  }
  return total / static_cast<double>(n);
}

Tensor cross_entropy_grad(const Tensor& logits, const std::vector<int64_t>& labels) {
  const auto& s = logits.shape();
  int64_t n = s.at(0), k = s.at(1);
  if (static_cast<int64_t>(labels.size()) != n) throw ShapeError("label count != batch");
  Tensor g(logits.dtype(), s);
  for (int64_t i = 0; i < n; ++i) {
    double m = logits.value_at(i * k);
    for (int64_t j = 1; j < k; ++j) m = std::max(m, logits.value_at(i * k + j));
    double lse = 0;
    for (int64_t j = 0; j < k; ++j) lse += std::exp(logits.value_at(i * k + j) - m);
    for (int64_t j = 0; j < k; ++j) {
      double soft = std::exp(logits.value_at(i * k + j) - m) / lse;
      double onehot = (labels[static_cast<size_t>(i)] == j) ? 1.0 : 0.0;
      g.set_at(i * k + j, (soft - onehot) / static_cast<double>(n));
    }
  }
  return g;
}

void sgd_step(Network& net, const GradientSet& grads, double lr) {
  auto& layers = net.layers();
  if (grads.kernel.size() != layers.size()) throw UsageError("gradient set does not match network");
  for (size_t i = 0; i < layers.size(); ++i) {
    Layer& layer = layers[i];
    if (layer.desc.kind == LayerKind::Conv) {
      if (!grads.kernel[i].empty()) axpy(layer.conv.kernel, -lr, grads.kernel[i]);
      if (!layer.conv.bias.empty() && !grads.bias[i].empty()) {
        axpy(layer.conv.bias, -lr, grads.bias[i]);
      }
    } else if (layer.desc.kind == LayerKind::Linear) {
      if (!grads.kernel[i].empty()) axpy(layer.linear.weight, -lr, grads.kernel[i]);
      if (!grads.bias[i].empty()) axpy(layer.linear.bias, -lr, grads.bias[i]);
    }
  }
}

}  // namespace streamconv
