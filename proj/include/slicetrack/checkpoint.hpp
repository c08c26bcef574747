#pragma once

#include "slicetrack/edge_profile.hpp"
#include "slicetrack/network.hpp"

#include <filesystem>
#include <optional>
#include <span>

namespace slicetrack {

// SCK1: "SCK1", u32 version, u32 config length, JSON config block, then every
// tensor as little-endian f32 in declaration order (network parameters, then
// ADAM first and second moments when present).
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Network<float> network;
  std::optional<AdamState<float>> adam;
  ProfileConfig profile;
};

/// Written to a temporary sibling and renamed into place.
void save_checkpoint(const Network<float>& net, const AdamState<float>* adam, const ProfileConfig& profile,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_checkpoint(const Network<float>& net, const AdamState<float>* adam,
                                            const ProfileConfig& profile);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Throws ConfigMismatchError unless `net` consumes what `profile` produces.
void require_compatible(const Network<float>& net, const ProfileConfig& profile);

}  // namespace slicetrack
