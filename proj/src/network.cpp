#include "slicetrack/network.hpp"

#include <cmath>
#include <random>

namespace slicetrack {

void NetworkConfig::validate() const {
  if (input_channels < 1 || base_filters < 1 || embedding_channels < 1 || kernel_size < 1)
    throw SpecError("network channel counts and kernel size must be >= 1");
  if (kernel_size % 2 == 0) throw SpecError("network kernel size must be odd");
  if (!block_widths.empty() && block_widths.size() != residual_blocks)
    throw SpecError("block_widths must list one width per residual block");
  for (auto w : block_widths)
    if (w < 1) throw SpecError("block widths must be >= 1");
}

NetworkConfig NetworkConfig::resnet18_stride1(std::size_t input_channels, std::uint64_t seed) {
  NetworkConfig c;
  c.input_channels = input_channels;
  c.base_filters = 16;
  c.residual_blocks = 8;
  c.block_widths = {16, 16, 32, 32, 64, 64, 128, 128};
  c.embedding_channels = 16;
  c.rng_seed = seed;
  return c;
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"input_channels", c.input_channels},
                     {"base_filters", c.base_filters},
                     {"residual_blocks", c.residual_blocks},
                     {"kernel_size", c.kernel_size},
                     {"embedding_channels", c.embedding_channels},
                     {"block_widths", c.block_widths},
                     {"standardize_input", c.standardize_input},
                     {"rng_seed", c.rng_seed}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  NetworkConfig d;
  if (j.value("preset", std::string{}) == "resnet18-stride1") {
    d = NetworkConfig::resnet18_stride1(d.input_channels);
  }
  c.input_channels = j.value("input_channels", d.input_channels);
  c.base_filters = j.value("base_filters", d.base_filters);
  c.residual_blocks = j.value("residual_blocks", d.residual_blocks);
  c.kernel_size = j.value("kernel_size", d.kernel_size);
  c.embedding_channels = j.value("embedding_channels", d.embedding_channels);
  c.block_widths = j.value("block_widths", d.block_widths);
  c.standardize_input = j.value("standardize_input", d.standardize_input);
  c.rng_seed = j.value("rng_seed", d.rng_seed);
  c.validate();
}

std::vector<LayerSpec> layer_plan(const NetworkConfig& cfg) {
  cfg.validate();
  const std::size_t k = cfg.kernel_size;
  std::vector<LayerSpec> plan;
  if (cfg.residual_blocks == 0) {
    plan.push_back({"head", cfg.input_channels, cfg.embedding_channels, k});
    return plan;
  }
  plan.push_back({"stem", cfg.input_channels, cfg.base_filters, k});
  std::size_t width = cfg.base_filters;
  for (std::size_t b = 0; b < cfg.residual_blocks; ++b) {
    const std::size_t next = cfg.block_width(b);
    const std::string prefix = "block" + std::to_string(b + 1);
    plan.push_back({prefix + ".conv1", width, next, k});
    plan.push_back({prefix + ".conv2", next, next, k});
    if (next != width) plan.push_back({prefix + ".proj", width, next, 1});
    width = next;
  }
  plan.push_back({"head", width, cfg.embedding_channels, 1});
  return plan;
}

// ---------------------------------------------------------------------------
// Parameter bookkeeping

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

template <typename T>
T& Network<T>::parameter(std::size_t i) {
  for (auto& l : layers) {
    const auto nw = static_cast<std::size_t>(l.weight.size());
    if (i < nw) return l.weight.data()[i];
    i -= nw;
    const auto nb = static_cast<std::size_t>(l.bias.size());
    if (i < nb) return l.bias[static_cast<Eigen::Index>(i)];
    i -= nb;
  }
  throw RangeError("parameter index out of range");
}

template <typename T>
T Network<T>::parameter(std::size_t i) const {
  return const_cast<Network<T>*>(this)->parameter(i);
}

template <typename T>
GradientSet<T> GradientSet<T>::zeros_like(const Network<T>& net) {
  GradientSet g;
  for (const auto& l : net.layers) {
    g.weights.push_back(PixelMatrix<T>::Zero(l.weight.rows(), l.weight.cols()));
    g.biases.push_back(Vec<T>::Zero(l.bias.size()));
  }
  return g;
}

template <typename T>
GradientSet<T>& GradientSet<T>::operator+=(const GradientSet& other) {
  if (other.weights.size() != weights.size()) throw DimensionError("gradient sets are not congruent");
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] += other.weights[i];
    biases[i] += other.biases[i];
  }
  return *this;
}

template <typename T>
GradientSet<T>& GradientSet<T>::operator*=(T s) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    weights[i] *= s;
    biases[i] *= s;
  }
  return *this;
}

template <typename T>
std::size_t GradientSet<T>::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < weights.size(); ++i)
    n += static_cast<std::size_t>(weights[i].size() + biases[i].size());
  return n;
}

template <typename T>
T GradientSet<T>::parameter(std::size_t i) const {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    const auto nw = static_cast<std::size_t>(weights[l].size());
    if (i < nw) return weights[l].data()[i];
    i -= nw;
    const auto nb = static_cast<std::size_t>(biases[l].size());
    if (i < nb) return biases[l][static_cast<Eigen::Index>(i)];
    i -= nb;
  }
  throw RangeError("gradient index out of range");
}

// ---------------------------------------------------------------------------
// Convolution kernels

namespace {

template <typename T>
PixelMatrix<T> im2col(const PixelMatrix<T>& in, Eigen::Index H, Eigen::Index W, Eigen::Index k) {
  const Eigen::Index C = in.cols();
  const Eigen::Index pad = k / 2;
  PixelMatrix<T> col(H * W, k * k * C);
  for (Eigen::Index y = 0; y < H; ++y) {
    for (Eigen::Index x = 0; x < W; ++x) {
      T* dst = col.row(y * W + x).data();
      for (Eigen::Index ky = 0; ky < k; ++ky) {
        const Eigen::Index sy = y + ky - pad;
        for (Eigen::Index kx = 0; kx < k; ++kx, dst += C) {
          const Eigen::Index sx = x + kx - pad;
          if (sy < 0 || sy >= H || sx < 0 || sx >= W) {
            std::fill(dst, dst + C, T(0));
          } else {
            const T* src = in.row(sy * W + sx).data();
            std::copy(src, src + C, dst);
          }
        }
      }
    }
  }
  return col;
}

template <typename T>
PixelMatrix<T> col2im(const PixelMatrix<T>& col, Eigen::Index H, Eigen::Index W, Eigen::Index k,
                      Eigen::Index C) {
  const Eigen::Index pad = k / 2;
  PixelMatrix<T> out = PixelMatrix<T>::Zero(H * W, C);
  for (Eigen::Index y = 0; y < H; ++y) {
    for (Eigen::Index x = 0; x < W; ++x) {
      const T* src = col.row(y * W + x).data();
      for (Eigen::Index ky = 0; ky < k; ++ky) {
        const Eigen::Index sy = y + ky - pad;
        for (Eigen::Index kx = 0; kx < k; ++kx, src += C) {
          const Eigen::Index sx = x + kx - pad;
          if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
          out.row(sy * W + sx) += Eigen::Map<const Eigen::Matrix<T, 1, Dyn>>(src, C);
        }
      }
    }
  }
  return out;
}

template <typename T>
PixelMatrix<T> conv_forward(const ConvLayer<T>& layer, const PixelMatrix<T>& in, Eigen::Index H, Eigen::Index W) {
  const auto k = static_cast<Eigen::Index>(layer.spec.kernel);
  PixelMatrix<T> out;
  if (k == 1) {
    out.noalias() = in * layer.weight;
  } else {
    out.noalias() = im2col(in, H, W, k) * layer.weight;
  }
  out.rowwise() += layer.bias.transpose();
  return out;
}

/// Accumulates weight/bias gradients; returns the input gradient when asked.
template <typename T>
PixelMatrix<T> conv_backward(const ConvLayer<T>& layer, const PixelMatrix<T>& in, const PixelMatrix<T>& gout,
                             Eigen::Index H, Eigen::Index W, PixelMatrix<T>& dweight, Vec<T>& dbias,
                             bool want_input_grad) {
  const auto k = static_cast<Eigen::Index>(layer.spec.kernel);
  dbias += gout.colwise().sum().transpose();
  if (k == 1) {
    dweight.noalias() += in.transpose() * gout;
    if (!want_input_grad) return {};
    return gout * layer.weight.transpose();
  }
  const PixelMatrix<T> col = im2col(in, H, W, k);
  dweight.noalias() += col.transpose() * gout;
  if (!want_input_grad) return {};
  const PixelMatrix<T> dcol = gout * layer.weight.transpose();
  return col2im(dcol, H, W, k, in.cols());
}

template <typename T>
void relu_inplace(PixelMatrix<T>& m) {
  m = m.cwiseMax(T(0));
}

template <typename T>
void relu_backward_inplace(PixelMatrix<T>& g, const PixelMatrix<T>& activated) {
  g = (activated.array() > T(0)).select(g, T(0));
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Network<T> init_network(const NetworkConfig& cfg) {
  Network<T> net{cfg, {}};
  std::mt19937_64 rng(cfg.rng_seed);
  for (const auto& spec : layer_plan(cfg)) {
    const auto fan_in = spec.kernel * spec.kernel * spec.in;
    const double bound = std::sqrt(6.0 / double(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    ConvLayer<T> layer{spec, PixelMatrix<T>(fan_in, spec.out), Vec<T>::Zero(spec.out)};
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = static_cast<T>(dist(rng));
    net.layers.push_back(std::move(layer));
  }
  return net;
}

template <typename T>
FeatureMap<T> forward(const Network<T>& net, const EdgeProfileMap<T>& input, ForwardTape<T>* tape) {
  if (input.channels() != net.config.input_channels)
    throw ConfigMismatchError("network expects " + std::to_string(net.config.input_channels) +
                              " input channels, profile has " + std::to_string(input.channels()));
  const auto H = static_cast<Eigen::Index>(input.height);
  const auto W = static_cast<Eigen::Index>(input.width);
  if (tape) {
    tape->height = input.height;
    tape->width = input.width;
    tape->conv_inputs.assign(net.layers.size(), {});
    tape->relu_outputs.assign(net.layers.size(), {});
  }
  auto record_input = [&](std::size_t li, auto&& x) {
    if (tape) tape->conv_inputs[li] = std::forward<decltype(x)>(x);
  };
  auto record_relu = [&](std::size_t li, const PixelMatrix<T>& x) {
    if (tape) tape->relu_outputs[li] = x;
  };

  const auto& layers = net.layers;
  PixelMatrix<T> x = input.values;
  if (net.config.standardize_input) {
    const T channels = static_cast<T>(input.channels());
    x = (x.array() * channels - T(1)).matrix();
  }
  if (net.config.residual_blocks == 0) {
    PixelMatrix<T> out = conv_forward(layers[0], x, H, W);
    record_input(0, std::move(x));
    return {input.height, input.width, std::move(out)};
  }

  std::size_t li = 0;
  PixelMatrix<T> act = conv_forward(layers[li], x, H, W);
  record_input(li, std::move(x));
  relu_inplace(act);
  record_relu(li, act);
  ++li;
  for (std::size_t b = 0; b < net.config.residual_blocks; ++b) {
    const std::size_t c1 = li++, c2 = li++;
    const bool projected = layers[c1].spec.in != layers[c1].spec.out;
    const std::size_t proj = projected ? li++ : 0;

    record_input(c1, act);
    PixelMatrix<T> hidden = conv_forward(layers[c1], act, H, W);
    relu_inplace(hidden);
    record_relu(c1, hidden);
    record_input(c2, hidden);
    PixelMatrix<T> sum = conv_forward(layers[c2], hidden, H, W);
    if (projected) {
      record_input(proj, act);
      sum += conv_forward(layers[proj], act, H, W);
    } else {
      sum += act;
    }
    relu_inplace(sum);
    record_relu(c2, sum);
    act = std::move(sum);
  }
  record_input(li, act);
  return {input.height, input.width, conv_forward(layers[li], act, H, W)};
}

template <typename T>
GradientSet<T> backward(const Network<T>& net, const ForwardTape<T>& tape, const PixelMatrix<T>& upstream) {
  const auto& layers = net.layers;
  if (tape.conv_inputs.size() != layers.size())
    throw DimensionError("tape was not recorded by this network");
  const auto H = static_cast<Eigen::Index>(tape.height);
  const auto W = static_cast<Eigen::Index>(tape.width);
  if (upstream.rows() != H * W || upstream.cols() != static_cast<Eigen::Index>(net.config.embedding_channels))
    throw DimensionError("upstream gradient shape does not match the recorded forward output");

  GradientSet<T> grads = GradientSet<T>::zeros_like(net);
  auto back = [&](std::size_t li, const PixelMatrix<T>& gout, bool want) {
    return conv_backward(layers[li], tape.conv_inputs[li], gout, H, W, grads.weights[li], grads.biases[li], want);
  };

  if (net.config.residual_blocks == 0) {
    back(0, upstream, false);
    return grads;
  }

  // Recover the per-block layer indices in forward order.
  struct BlockIdx { std::size_t c1, c2, proj; bool projected; };
  std::vector<BlockIdx> blocks;
  std::size_t li = 1;
  for (std::size_t b = 0; b < net.config.residual_blocks; ++b) {
    BlockIdx idx{li, li + 1, 0, layers[li].spec.in != layers[li].spec.out};
    li += 2;
    if (idx.projected) idx.proj = li++;
    blocks.push_back(idx);
  }
  const std::size_t head = li;

  PixelMatrix<T> g = back(head, upstream, true);
  for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
    relu_backward_inplace(g, tape.relu_outputs[it->c2]);
    PixelMatrix<T> g_hidden = back(it->c2, g, true);
    relu_backward_inplace(g_hidden, tape.relu_outputs[it->c1]);
    PixelMatrix<T> g_in = back(it->c1, g_hidden, true);
    if (it->projected) {
      g_in += back(it->proj, g, true);
    } else {
      g_in += g;
    }
    g = std::move(g_in);
  }
  relu_backward_inplace(g, tape.relu_outputs[0]);
  back(0, g, false);
  return grads;
}

// ---------------------------------------------------------------------------
// ADAM

template <typename T>
AdamState<T> AdamState<T>::fresh(const Network<T>& net, AdamHyper hyper) {
  return {hyper, 0, GradientSet<T>::zeros_like(net), GradientSet<T>::zeros_like(net)};
}

template <typename T>
void adam_step(Network<T>& net, const GradientSet<T>& grads, AdamState<T>& state) {
  const std::size_t n = net.layers.size();
  if (grads.weights.size() != n || state.first_moment.weights.size() != n || state.second_moment.weights.size() != n)
    throw DimensionError("adam_step: gradient/state layer count does not match network");
  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = net.layers[i];
    auto congruent = [&](const GradientSet<T>& g) {
      return g.weights[i].rows() == l.weight.rows() && g.weights[i].cols() == l.weight.cols() &&
             g.biases[i].size() == l.bias.size();
    };
    if (!congruent(grads) || !congruent(state.first_moment) || !congruent(state.second_moment))
      throw DimensionError("adam_step: shape mismatch at layer " + l.spec.name);
    if (!grads.weights[i].allFinite() || !grads.biases[i].allFinite())
      throw TrainingError("non-finite gradient at layer " + l.spec.name);
  }

  state.step += 1;
  const auto& h = state.hyper;
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(h.beta1, double(state.step)));
  const T c2 = static_cast<T>(1.0 - std::pow(h.beta2, double(state.step)));
  const T lr = static_cast<T>(h.learning_rate), eps = static_cast<T>(h.epsilon);

  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  for (std::size_t i = 0; i < n; ++i) {
    update(net.layers[i].weight, grads.weights[i], state.first_moment.weights[i], state.second_moment.weights[i]);
    update(net.layers[i].bias, grads.biases[i], state.first_moment.biases[i], state.second_moment.biases[i]);
  }
}

#define SLICETRACK_INSTANTIATE(T)                                                                        \
  template struct Network<T>;                                                                           \
  template struct GradientSet<T>;                                                                       \
  template struct AdamState<T>;                                                                         \
  template Network<T> init_network<T>(const NetworkConfig&);                                            \
  template FeatureMap<T> forward<T>(const Network<T>&, const EdgeProfileMap<T>&, ForwardTape<T>*);       \
  template GradientSet<T> backward<T>(const Network<T>&, const ForwardTape<T>&, const PixelMatrix<T>&);  \
  template void adam_step<T>(Network<T>&, const GradientSet<T>&, AdamState<T>&);

SLICETRACK_INSTANTIATE(float)
SLICETRACK_INSTANTIATE(double)

}  // namespace slicetrack
