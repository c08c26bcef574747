#include "slicetrack/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace slicetrack {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  auto b = std::bit_cast<std::array<std::uint8_t, 4>>(v);
  out.insert(out.end(), b.begin(), b.end());
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  return v;
}

template <typename Derived>
void put_tensor(std::vector<std::uint8_t>& out, const Eigen::DenseBase<Derived>& t) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(t.derived().data());
  out.insert(out.end(), p, p + t.size() * sizeof(float));
}

struct Reader {
  std::span<const std::uint8_t> bytes;
  std::size_t at = 0;

  template <typename Derived>
  void tensor(Eigen::DenseBase<Derived>& t) {
    const std::size_t n = static_cast<std::size_t>(t.size()) * sizeof(float);
    if (at + n > bytes.size()) throw CorruptFileError("checkpoint truncated inside tensor payload");
    std::memcpy(t.derived().data(), bytes.data() + at, n);
    at += n;
  }
};

void put_gradient_set(std::vector<std::uint8_t>& out, const GradientSet<float>& g) {
  for (std::size_t i = 0; i < g.weights.size(); ++i) {
    put_tensor(out, g.weights[i]);
    put_tensor(out, g.biases[i]);
  }
}

}  // namespace

void require_compatible(const Network<float>& net, const ProfileConfig& profile) {
  if (net.config.input_channels != profile.channels())
    throw ConfigMismatchError("checkpoint network expects " + std::to_string(net.config.input_channels) +
                              " input channels but the profile config produces " +
                              std::to_string(profile.channels()));
}

std::vector<std::uint8_t> encode_checkpoint(const Network<float>& net, const AdamState<float>* adam,
                                            const ProfileConfig& profile) {
  require_compatible(net, profile);
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& l : net.layers)
    shapes.push_back({{"name", l.spec.name}, {"weight", {l.weight.rows(), l.weight.cols()}}, {"bias", l.bias.size()}});
  nlohmann::json header{{"network", net.config}, {"profile", profile}, {"tensors", shapes}};
  if (adam) {
    header["adam"] = {{"learning_rate", adam->hyper.learning_rate},
                      {"beta1", adam->hyper.beta1},
                      {"beta2", adam->hyper.beta2},
                      {"epsilon", adam->hyper.epsilon},
                      {"step", adam->step}};
  }
  const std::string text = header.dump();

  std::vector<std::uint8_t> out{'S', 'C', 'K', '1'};
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& l : net.layers) {
    put_tensor(out, l.weight);
    put_tensor(out, l.bias);
  }
  if (adam) {
    put_gradient_set(out, adam->first_moment);
    put_gradient_set(out, adam->second_moment);
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SCK1", 4) != 0)
    throw FormatError("not a checkpoint (bad magic)");
  if (bytes.size() < 12) throw CorruptFileError("checkpoint header truncated");
  if (const auto version = get_u32(bytes, 4); version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::size_t len = get_u32(bytes, 8);
  if (12 + len > bytes.size()) throw CorruptFileError("checkpoint truncated inside config block");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(std::string("checkpoint config block is not valid JSON: ") + e.what());
  }

  Checkpoint ck{init_network<float>(header.at("network").get<NetworkConfig>()), std::nullopt,
                header.at("profile").get<ProfileConfig>()};
  const auto& shapes = header.at("tensors");
  if (shapes.size() != ck.network.layers.size())
    throw CorruptFileError("checkpoint tensor table does not match its network config");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& l = ck.network.layers[i];
    const auto& s = shapes[i];
    if (s.at("weight").at(0).get<Eigen::Index>() != l.weight.rows() ||
        s.at("weight").at(1).get<Eigen::Index>() != l.weight.cols() || s.at("bias").get<Eigen::Index>() != l.bias.size())
      throw CorruptFileError("checkpoint tensor table inconsistent at layer " + l.spec.name);
  }

  Reader reader{bytes, 12 + len};
  for (auto& l : ck.network.layers) {
    reader.tensor(l.weight);
    reader.tensor(l.bias);
  }
  if (header.contains("adam")) {
    const auto& a = header.at("adam");
    AdamHyper hyper{a.at("learning_rate").get<double>(), a.at("beta1").get<double>(), a.at("beta2").get<double>(),
                    a.at("epsilon").get<double>()};
    auto state = AdamState<float>::fresh(ck.network, hyper);
    state.step = a.at("step").get<std::uint64_t>();
    for (auto* g : {&state.first_moment, &state.second_moment})
      for (std::size_t i = 0; i < g->weights.size(); ++i) {
        reader.tensor(g->weights[i]);
        reader.tensor(g->biases[i]);
      }
    ck.adam = std::move(state);
  }
  if (reader.at != bytes.size()) throw CorruptFileError("checkpoint has trailing bytes after the tensor payload");
  require_compatible(ck.network, ck.profile);
  return ck;
}

void save_checkpoint(const Network<float>& net, const AdamState<float>* adam, const ProfileConfig& profile,
                     const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(net, adam, profile);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

}  // namespace slicetrack
