#include "slicetrack/volume_ops.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace slicetrack {

static_assert(std::endian::native == std::endian::little, "SVL1/SMK1 I/O assumes a little-endian host");

Volume::Volume(std::size_t height, std::size_t width, std::size_t depth, std::vector<float> voxels,
               std::array<float, 3> spacing)
    : height_(height), width_(width), depth_(depth), voxels_(std::move(voxels)), spacing_(spacing) {
  if (height < 2 || width < 2 || depth < 2)
    throw DimensionError("volume dims must be at least 2x2x2, got " + std::to_string(height) + "x" +
                         std::to_string(width) + "x" + std::to_string(depth));
  if (voxels_.size() != height * width * depth)
    throw DimensionError("voxel count does not match volume dims");
  for (float v : voxels_)
    if (!std::isfinite(v) || v < 0.f || v > 1.f)
      throw DataError("volume voxels must be finite and within [0,1]");
}

MaskVolume::MaskVolume(std::size_t height, std::size_t width, std::size_t depth)
    : height_(height), width_(width), depth_(depth), bits_(height * width * depth, 0) {}

MaskVolume::MaskVolume(std::size_t height, std::size_t width, std::size_t depth,
                       std::vector<std::uint8_t> bits)
    : height_(height), width_(width), depth_(depth), bits_(std::move(bits)) {
  if (bits_.size() != height * width * depth)
    throw DimensionError("mask payload does not match dims");
  for (auto b : bits_)
    if (b > 1) throw DataError("mask values must be 0 or 1");
}

MaskPlane MaskVolume::plane(std::size_t k) const {
  if (k >= depth_) throw RangeError("mask slice index out of range");
  MaskPlane m(height_, width_);
  std::memcpy(m.data(), bits_.data() + k * plane_size(), plane_size());
  return m;
}

void MaskVolume::set_plane(std::size_t k, const MaskPlane& m) {
  if (k >= depth_) throw RangeError("mask slice index out of range");
  if (static_cast<std::size_t>(m.rows()) != height_ || static_cast<std::size_t>(m.cols()) != width_)
    throw DimensionError("mask plane dims do not match mask volume");
  std::memcpy(bits_.data() + k * plane_size(), m.data(), plane_size());
}

std::size_t MaskVolume::count(std::size_t k) const {
  auto first = bits_.begin() + static_cast<std::ptrdiff_t>(k * plane_size());
  return static_cast<std::size_t>(std::count(first, first + static_cast<std::ptrdiff_t>(plane_size()), 1));
}

namespace {

template <typename V>
void put(std::vector<std::uint8_t>& out, V value) {
  auto bytes = std::bit_cast<std::array<std::uint8_t, sizeof(V)>>(value);
  out.insert(out.end(), bytes.begin(), bytes.end());
}

template <typename V>
V get(std::span<const std::uint8_t> in, std::size_t offset) {
  std::array<std::uint8_t, sizeof(V)> bytes;
  std::memcpy(bytes.data(), in.data() + offset, sizeof(V));
  return std::bit_cast<V>(bytes);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

std::vector<std::uint8_t> encode_volume(const Volume& v) {
  std::vector<std::uint8_t> out;
  out.reserve(kSvlHeaderBytes + 4 * v.voxels().size());
  out.insert(out.end(), {'S', 'V', 'L', '1'});
  put(out, static_cast<std::uint32_t>(v.height()));
  put(out, static_cast<std::uint32_t>(v.width()));
  put(out, static_cast<std::uint32_t>(v.depth()));
  for (float s : v.spacing()) put(out, s);
  put(out, 0.f);
  put(out, 1.f);
  for (float x : v.voxels()) put(out, x);
  return out;
}

Volume decode_volume(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SVL1", 4) != 0)
    throw FormatError("not an SVL1 volume (bad magic)");
  if (bytes.size() < kSvlHeaderBytes) throw CorruptFileError("SVL1 header truncated");
  const auto h = get<std::uint32_t>(bytes, 4);
  const auto w = get<std::uint32_t>(bytes, 8);
  const auto d = get<std::uint32_t>(bytes, 12);
  if (h == 0 || w == 0 || d == 0) throw CorruptFileError("SVL1 header has a zero dimension");
  const std::array<float, 3> spacing{get<float>(bytes, 16), get<float>(bytes, 20), get<float>(bytes, 24)};
  const float lo = get<float>(bytes, 28);
  const float hi = get<float>(bytes, 32);
  const std::size_t n = std::size_t{h} * w * d;
  if (bytes.size() != kSvlHeaderBytes + 4 * n)
    throw CorruptFileError("SVL1 payload size does not match header dims");
  if (!std::isfinite(lo) || !std::isfinite(hi) || !(hi > lo))
    throw CorruptFileError("SVL1 header has an invalid intensity range");

  std::vector<float> voxels(n);
  const bool identity = lo == 0.f && hi == 1.f;
  for (std::size_t i = 0; i < n; ++i) {
    float raw = get<float>(bytes, kSvlHeaderBytes + 4 * i);
    if (!std::isfinite(raw)) throw DataError("SVL1 payload contains a non-finite value");
    voxels[i] = identity ? raw : (raw - lo) / (hi - lo);
    voxels[i] = std::clamp(voxels[i], 0.f, 1.f);
  }
  return Volume(h, w, d, std::move(voxels), spacing);
}

Volume load_volume(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return decode_volume(bytes);
}

void save_volume(const Volume& v, const std::filesystem::path& path) {
  write_file(path, encode_volume(v));
}

std::vector<std::uint8_t> encode_mask(const MaskVolume& m) {
  std::vector<std::uint8_t> out;
  out.reserve(kSmkHeaderBytes + m.bits().size());
  out.insert(out.end(), {'S', 'M', 'K', '1'});
  put(out, static_cast<std::uint32_t>(m.height()));
  put(out, static_cast<std::uint32_t>(m.width()));
  put(out, static_cast<std::uint32_t>(m.depth()));
  out.insert(out.end(), m.bits().begin(), m.bits().end());
  return out;
}

MaskVolume decode_mask(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SMK1", 4) != 0)
    throw FormatError("not an SMK1 mask (bad magic)");
  if (bytes.size() < kSmkHeaderBytes) throw CorruptFileError("SMK1 header truncated");
  const auto h = get<std::uint32_t>(bytes, 4);
  const auto w = get<std::uint32_t>(bytes, 8);
  const auto d = get<std::uint32_t>(bytes, 12);
  if (h == 0 || w == 0 || d == 0) throw CorruptFileError("SMK1 header has a zero dimension");
  const std::size_t n = std::size_t{h} * w * d;
  if (bytes.size() != kSmkHeaderBytes + n)
    throw CorruptFileError("SMK1 payload size does not match header dims");
  return MaskVolume(h, w, d, {bytes.begin() + kSmkHeaderBytes, bytes.end()});
}

MaskVolume load_mask(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return decode_mask(bytes);
}

void save_mask(const MaskVolume& m, const std::filesystem::path& path) {
  write_file(path, encode_mask(m));
}

Volume normalize_intensity(std::span<const float> raw, std::size_t height, std::size_t width,
                           std::size_t depth, std::array<float, 3> spacing) {
  if (raw.size() != height * width * depth) throw DimensionError("raw payload does not match dims");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (float x : raw) {
    if (!std::isfinite(x)) throw DataError("raw intensities contain NaN or Inf");
    lo = std::min<double>(lo, x);
    hi = std::max<double>(hi, x);
  }
  if (!(hi > lo)) throw DataError("degenerate intensity range: input is constant");
  std::vector<float> voxels(raw.size());
  const double span = hi - lo;
  std::transform(raw.begin(), raw.end(), voxels.begin(),
                 [&](float x) { return static_cast<float>((x - lo) / span); });
  return Volume(height, width, depth, std::move(voxels), spacing);
}

SlicePlane extract_slice(const Volume& v, std::size_t index) {
  if (index >= v.depth())
    throw RangeError("slice index " + std::to_string(index) + " out of range for depth " +
                     std::to_string(v.depth()));
  return v.plane(index);
}

SlicePlane resize_bilinear(const SlicePlane& s, std::size_t out_h, std::size_t out_w) {
  if (out_h < 2 || out_w < 2) throw DimensionError("resize target must be at least 2x2");
  const auto in_h = s.rows();
  const auto in_w = s.cols();
  if (static_cast<std::size_t>(in_h) == out_h && static_cast<std::size_t>(in_w) == out_w) return s;

  SlicePlane out(out_h, out_w);
  const double sy = in_h > 1 ? double(in_h - 1) / double(out_h - 1) : 0.0;
  const double sx = in_w > 1 ? double(in_w - 1) / double(out_w - 1) : 0.0;
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = y * sy;
    const auto y0 = std::min<Eigen::Index>(static_cast<Eigen::Index>(fy), in_h - 1);
    const auto y1 = std::min<Eigen::Index>(y0 + 1, in_h - 1);
    const double ty = fy - y0;
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = x * sx;
      const auto x0 = std::min<Eigen::Index>(static_cast<Eigen::Index>(fx), in_w - 1);
      const auto x1 = std::min<Eigen::Index>(x0 + 1, in_w - 1);
      const double tx = fx - x0;
      const double top = (1 - tx) * s(y0, x0) + tx * s(y0, x1);
      const double bottom = (1 - tx) * s(y1, x0) + tx * s(y1, x1);
      out(y, x) = static_cast<float>((1 - ty) * top + ty * bottom);
    }
  }
  return out;
}

namespace {
double dice_counts(std::size_t inter, std::size_t a, std::size_t b) {
  if (a + b == 0) return 100.0;
  return 200.0 * double(inter) / double(a + b);
}

double dice_bits(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i];
    nb += b[i];
    inter += a[i] & b[i];
  }
  return dice_counts(inter, na, nb);
}
}  // namespace

double dice(const MaskPlane& a, const MaskPlane& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("dice: mask shapes differ");
  return dice_bits({a.data(), static_cast<std::size_t>(a.size())},
                   {b.data(), static_cast<std::size_t>(b.size())});
}

double dice(const MaskVolume& a, const MaskVolume& b) {
  if (a.height() != b.height() || a.width() != b.width() || a.depth() != b.depth())
    throw DimensionError("dice: mask volume shapes differ");
  return dice_bits(a.bits(), b.bits());
}

}  // namespace slicetrack
