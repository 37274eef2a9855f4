#pragma once

#include <string>
#include <vector>

#include "streamconv/ops.hpp"
#include "streamconv/tensor.hpp"

namespace streamconv {

enum class LayerKind { Conv, MaxPool, ReLU, Flatten, Linear };

const char* layer_kind_name(LayerKind k);

struct LayerDesc {
  LayerKind kind = LayerKind::ReLU;
  int64_t out_channels = 0;  // Conv, Linear
  int64_t kernel = 0;        // Conv, MaxPool (square windows)
  int64_t stride = 1;        // Conv, MaxPool
  bool bias = false;         // Conv only; Linear always carries a bias
};

// Architecture plus the streaming split: layers [0, split_index) form the
// local prefix executed tile by tile, the rest run conventionally.
struct NetworkSpec {
  std::vector<LayerDesc> layers;
  int64_t split_index = 0;
  Dtype dtype = Dtype::F32;
};

// Text format, one layer per line after a header:
//   split=<i> dtype=<f32|f64>
//   conv out=<c> k=<n> stride=<s> [bias]
//   maxpool k=<n> stride=<s>
//   relu | flatten
//   linear out=<c>
// '#' starts a comment. parse(emit(s)) round-trips exactly.
NetworkSpec parse_spec(const std::string& text);
NetworkSpec parse_spec_file(const std::string& path);
std::string emit_spec(const NetworkSpec& spec);

// shapes[0] is the input shape, shapes[i+1] the output of layer i.
struct ShapeTrace {
  std::vector<std::vector<int64_t>> shapes;
};

// Rejects non-local layers before the split, extents that underflow a window,
// and malformed splits. Input shape is (batch, channels, spatial...).
ShapeTrace validate(const NetworkSpec& spec, const std::vector<int64_t>& input_shape);

struct Layer {
  LayerDesc desc;
  ConvParams conv;      // Conv
  LinearParams linear;  // Linear
};

// A spec bound to an input geometry with materialized parameters.
class Network {
 public:
  // Seeded He-style init; deterministic for a given (spec, shape, seed).
  static Network build(NetworkSpec spec, std::vector<int64_t> input_shape, uint64_t seed);

  const NetworkSpec& spec() const { return spec_; }
  const std::vector<int64_t>& input_shape() const { return input_shape_; }
  const ShapeTrace& trace() const { return trace_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  int64_t split() const { return spec_.split_index; }
  Dtype dtype() const { return spec_.dtype; }
  int64_t spatial_rank() const { return static_cast<int64_t>(input_shape_.size()) - 2; }

 private:
  NetworkSpec spec_;
  std::vector<int64_t> input_shape_;
  ShapeTrace trace_;
  std::vector<Layer> layers_;
};

struct ActivationStore {
  std::vector<Tensor> acts;       // acts[0] = input, acts[i+1] = output of layer i
  std::vector<ArgmaxMap> argmax;  // parallel to layers, used by MaxPool entries
};

// Evaluation path: keeps only the rolling activation.
Tensor forward_full(const Network& net, const Tensor& input);
// Training path: retains every activation for the backward pass. The input is
// taken by value so the store holds the only copy.
void forward_full_store(const Network& net, Tensor input, ActivationStore& store);

struct GradientSet {
  std::vector<Tensor> kernel;  // parallel to layers; empty tensor where no params
  std::vector<Tensor> bias;
  Tensor input;                          // set when requested
  std::vector<Tensor> layer_input_grads; // set when retain_layer_grads (diagnostics)
};

struct BackwardOptions {
  bool want_input_grad = false;
  bool retain_layer_grads = false;
};

GradientSet backward_full(const Network& net, const ActivationStore& store,
                          const Tensor& loss_grad, const BackwardOptions& opts = {});

// Single-layer helpers shared with the streaming engine.
Tensor layer_forward(const Layer& layer, const Tensor& input, ArgmaxMap* argmax);
// Gradient w.r.t. this layer's input; prefix-local kinds only (Conv/MaxPool/ReLU).
Tensor layer_backward_input(const Layer& layer, const Tensor& grad_out, const Tensor& input,
                            const ArgmaxMap& argmax);

// Toy loss: sum of every logit. Gradient is all-ones.
double sum_loss(const Tensor& pred);
Tensor sum_loss_grad(const Tensor& pred);

// Mean cross-entropy over the batch; logits (batch, classes).
double cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels);
Tensor cross_entropy_grad(const Tensor& logits, const std::vector<int64_t>& labels);

// theta -= lr * grad for every parameter with a gradient present.
void sgd_step(Network& net, const GradientSet& grads, double lr);

}  // namespace streamconv
