#include "slicetrack/rle.hpp"

#include <algorithm>

namespace slicetrack {

RleMask rle_encode(const MaskPlane& m) {
  RleMask r{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()), {}};
  const std::uint8_t* bits = m.data();
  const std::size_t n = r.height * r.width;
  std::uint8_t current = 0;
  std::size_t run = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t b = bits[i] ? 1 : 0;
    if (b != current) {
      r.runs.push_back(run);
      current = b;
      run = 0;
    }
    ++run;
  }
  r.runs.push_back(run);
  return r;
}

MaskPlane rle_decode(const RleMask& r) {
  const std::size_t n = r.height * r.width;
  std::size_t total = 0;
  for (std::size_t run : r.runs) {
    if (run > n) throw WireError("run length exceeds mask size");
    total += run;
  }
  if (total != n)
    throw WireError("runs sum to " + std::to_string(total) + ", expected " + std::to_string(n));
  MaskPlane m(r.height, r.width);
  std::uint8_t* bits = m.data();
  std::uint8_t value = 0;
  for (std::size_t run : r.runs) {
    std::fill(bits, bits + run, value);
    bits += run;
    value ^= 1;
  }
  return m;
}

void to_json(nlohmann::json& j, const RleMask& r) {
  j = {{"height", r.height}, {"width", r.width}, {"runs", r.runs}};
}

void from_json(const nlohmann::json& j, RleMask& r) {
  auto dim = [&](const char* key) {
    if (!j.is_object() || !j.contains(key) || !j.at(key).is_number_unsigned())
      throw WireError(std::string("mask field '") + key + "' must be a non-negative integer");
    return j.at(key).get<std::size_t>();
  };
  r.height = dim("height");
  r.width = dim("width");
  if (!j.contains("runs") || !j.at("runs").is_array()) throw WireError("mask field 'runs' must be an array");
  r.runs.clear();
  for (const auto& v : j.at("runs")) {
    if (!v.is_number_unsigned()) throw WireError("runs must be non-negative integers");
    r.runs.push_back(v.get<std::size_t>());
  }
}

}  // namespace slicetrack
