#pragma once

#include "slicetrack/core.hpp"

#include <filesystem>
#include <span>
#include <string>

namespace slicetrack {

// SVL1: "SVL1", u32 H, W, D, f32 sx, sy, sz, f32 raw_min, raw_max, then H·W·D
// f32 voxels (x fastest, then y, then z). All little-endian.
inline constexpr std::size_t kSvlHeaderBytes = 36;
// SMK1: "SMK1", u32 H, W, D, then H·W·D u8 values in the same order.
inline constexpr std::size_t kSmkHeaderBytes = 16;

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);
Volume decode_volume(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_volume(const Volume& v);

MaskVolume load_mask(const std::filesystem::path& path);
void save_mask(const MaskVolume& m, const std::filesystem::path& path);
MaskVolume decode_mask(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_mask(const MaskVolume& m);

/// Linear min-max map of raw intensities (x fastest) onto [0,1].
Volume normalize_intensity(std::span<const float> raw, std::size_t height, std::size_t width,
                           std::size_t depth, std::array<float, 3> spacing = {1.f, 1.f, 1.f});

SlicePlane extract_slice(const Volume& v, std::size_t index);

/// Bilinear resize with corner-aligned sampling (output corners hit input corners).
SlicePlane resize_bilinear(const SlicePlane& s, std::size_t out_h, std::size_t out_w);

/// Dice overlap on a 0-100 scale; two empty masks score 100.
double dice(const MaskPlane& a, const MaskPlane& b);
double dice(const MaskVolume& a, const MaskVolume& b);

}  // namespace slicetrack
