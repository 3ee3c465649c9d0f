#pragma once

#include <cstdint>
#include <vector>

namespace sscd {

// Pixel value reserved for pixels without ground-truth class.
inline constexpr uint8_t kUnlabeled = 255;

// Per-pixel class-index image, values 0..K-1 plus kUnlabeled.
struct LabelMap {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> v;

  LabelMap() = default;
  LabelMap(int h_, int w_, uint8_t fill = 0)
      : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}

  uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  size_t size() const { return v.size(); }

  bool operator==(const LabelMap&) const = default;
};

// Per-pixel binary change image (values 0 or 1).
struct Mask {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> v;

  Mask() = default;
  Mask(int h_, int w_, uint8_t fill = 0)
      : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}

  uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  size_t size() const { return v.size(); }

  int64_t count() const {
    int64_t n = 0;
    for (uint8_t b : v) n += b;
    return n;
  }

  bool operator==(const Mask&) const = default;
};

}  // namespace sscd
