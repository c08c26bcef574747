#pragma once

#include "slicetrack/core.hpp"
#include "slicetrack/edge_profile.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace slicetrack {

/// Shape of the residual feature extractor. With residual_blocks == 0 the
/// network is a single linear convolution input -> embedding; otherwise it is
/// stem conv + ReLU, residual basic blocks, and a 1×1 linear embedding head.
struct NetworkConfig {
  std::size_t input_channels = 24;
  std::size_t base_filters = 16;
  std::size_t residual_blocks = 4;
  std::size_t kernel_size = 3;
  std::size_t embedding_channels = 16;
  /// Per-block widths; empty means every block is base_filters wide. Width
  /// changes get a 1×1 projection on the shortcut.
  std::vector<std::size_t> block_widths;
  /// Maps each input channel x to (x - 1/C)·C before the first convolution, so
  /// a uniform edge profile enters as zeros.
  bool standardize_input = true;
  std::uint64_t rng_seed = 0;

  std::size_t block_width(std::size_t b) const {
    return block_widths.empty() ? base_filters : block_widths[b];
  }
  void validate() const;

  /// Approximation of a ResNet18 without pooling and stride 1 everywhere:
  /// four stages of two blocks, 16/32/64/128 filters.
  static NetworkConfig resnet18_stride1(std::size_t input_channels, std::uint64_t seed = 0);

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

struct LayerSpec {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 1;
};

/// Declaration order of every convolution for `cfg`; checkpoints and
/// gradient sets follow the same order.
std::vector<LayerSpec> layer_plan(const NetworkConfig& cfg);

/// Weight rows are indexed (ky·k + kx)·in + ci, columns by output channel.
template <typename T>
struct ConvLayer {
  LayerSpec spec;
  PixelMatrix<T> weight;
  Vec<T> bias;
};

template <typename T>
struct Network {
  NetworkConfig config;
  std::vector<ConvLayer<T>> layers;

  std::size_t parameter_count() const;
  /// Flat parameter access across layers (weights then bias, per layer).
  T& parameter(std::size_t i);
  T parameter(std::size_t i) const;

  template <typename U>
  Network<U> cast() const {
    Network<U> out{config, {}};
    for (const auto& l : layers) out.layers.push_back({l.spec, l.weight.template cast<U>(), l.bias.template cast<U>()});
    return out;
  }
};

template <typename T>
struct FeatureMap {
  std::size_t height = 0;
  std::size_t width = 0;
  PixelMatrix<T> values;  // (H·W)×c

  std::size_t channels() const { return static_cast<std::size_t>(values.cols()); }
};

template <typename T>
struct GradientSet {
  std::vector<PixelMatrix<T>> weights;
  std::vector<Vec<T>> biases;

  static GradientSet zeros_like(const Network<T>& net);
  GradientSet& operator+=(const GradientSet& other);
  GradientSet& operator*=(T s);
  std::size_t parameter_count() const;
  T parameter(std::size_t i) const;
};

/// Everything backward needs from one forward call.
template <typename T>
struct ForwardTape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<PixelMatrix<T>> conv_inputs;  // per layer
  std::vector<PixelMatrix<T>> relu_outputs; // per layer, empty where no ReLU follows
};

template <typename T>
Network<T> init_network(const NetworkConfig& cfg);

/// Stride-1, zero-padded convolutions; output spatial dims equal input dims.
template <typename T>
FeatureMap<T> forward(const Network<T>& net, const EdgeProfileMap<T>& input, ForwardTape<T>* tape = nullptr);

/// Reverse-mode gradients of <upstream, forward(...)> w.r.t. every parameter.
template <typename T>
GradientSet<T> backward(const Network<T>& net, const ForwardTape<T>& tape, const PixelMatrix<T>& upstream);

struct AdamHyper {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  AdamHyper hyper;
  std::uint64_t step = 0;
  GradientSet<T> first_moment;
  GradientSet<T> second_moment;

  static AdamState fresh(const Network<T>& net, AdamHyper hyper = {});
};

/// One bias-corrected ADAM update. Throws TrainingError naming the layer if a
/// gradient is non-finite; the network is left untouched in that case.
template <typename T>
void adam_step(Network<T>& net, const GradientSet<T>& grads, AdamState<T>& state);

}  // namespace slicetrack
