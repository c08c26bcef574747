#pragma once

#include "slicetrack/core.hpp"

#include <json.hpp>

#include <vector>

namespace slicetrack {

/// Row-major run lengths alternating background/foreground, starting with
/// background (the first run may be 0).
struct RleMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::size_t> runs;

  friend bool operator==(const RleMask&, const RleMask&) = default;
};

RleMask rle_encode(const MaskPlane& m);

/// Throws WireError when the runs do not cover exactly height·width pixels.
MaskPlane rle_decode(const RleMask& r);

void to_json(nlohmann::json& j, const RleMask& r);
/// Throws WireError on missing fields, negative or non-integer runs.
void from_json(const nlohmann::json& j, RleMask& r);

}  // namespace slicetrack
