#pragma once

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace slicetrack {

static constexpr auto Dyn = Eigen::Dynamic;

/// H×W plane, row-major, indexed (y, x).
template <typename T>
using Plane = Eigen::Matrix<T, Dyn, Dyn, Eigen::RowMajor>;

/// Multi-channel map stored as (H·W)×C, pixel p = y·W + x, row-major so a
/// pixel's channel vector is contiguous.
template <typename T>
using PixelMatrix = Eigen::Matrix<T, Dyn, Dyn, Eigen::RowMajor>;

template <typename T>
using Vec = Eigen::Matrix<T, Dyn, 1>;

using SlicePlane = Plane<float>;
using MaskPlane = Plane<std::uint8_t>;

// Errors. Every failure the library reports derives from Error.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : Error { using Error::Error; };
struct CorruptFileError : Error { using Error::Error; };
struct DataError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct RangeError : Error { using Error::Error; };
struct DimensionError : Error { using Error::Error; };
struct SpecError : Error { using Error::Error; };
struct ConfigMismatchError : Error { using Error::Error; };
struct SeedError : Error { using Error::Error; };
struct TrainingError : Error { using Error::Error; };
struct WireError : Error { using Error::Error; };

/// H×W×D scalar grid with voxels in [0,1]. Slice k occupies the contiguous
/// range [k·H·W, (k+1)·H·W), x fastest.
class Volume {
 public:
  Volume(std::size_t height, std::size_t width, std::size_t depth, std::vector<float> voxels,
         std::array<float, 3> spacing = {1.f, 1.f, 1.f});

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t depth() const { return depth_; }
  std::size_t plane_size() const { return height_ * width_; }
  const std::array<float, 3>& spacing() const { return spacing_; }
  const std::vector<float>& voxels() const { return voxels_; }

  float at(std::size_t y, std::size_t x, std::size_t z) const {
    return voxels_[(z * height_ + y) * width_ + x];
  }

  /// Read-only view of slice k (no bounds check; see extract_slice).
  Eigen::Map<const SlicePlane> plane(std::size_t k) const {
    return Eigen::Map<const SlicePlane>(voxels_.data() + k * plane_size(),
                                        static_cast<Eigen::Index>(height_),
                                        static_cast<Eigen::Index>(width_));
  }

  friend bool operator==(const Volume&, const Volume&) = default;

 private:
  std::size_t height_;
  std::size_t width_;
  std::size_t depth_;
  std::vector<float> voxels_;
  std::array<float, 3> spacing_;
};

/// One binary plane per slice, same dims as the volume it annotates.
class MaskVolume {
 public:
  MaskVolume(std::size_t height, std::size_t width, std::size_t depth);
  MaskVolume(std::size_t height, std::size_t width, std::size_t depth,
             std::vector<std::uint8_t> bits);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t depth() const { return depth_; }
  std::size_t plane_size() const { return height_ * width_; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }

  MaskPlane plane(std::size_t k) const;
  void set_plane(std::size_t k, const MaskPlane& m);
  std::size_t count(std::size_t k) const;

  friend bool operator==(const MaskVolume&, const MaskVolume&) = default;

 private:
  std::size_t height_;
  std::size_t width_;
  std::size_t depth_;
  std::vector<std::uint8_t> bits_;
};

inline bool same_dims(const Volume& v, const MaskVolume& m) {
  return v.height() == m.height() && v.width() == m.width() && v.depth() == m.depth();
}

}  // namespace slicetrack
