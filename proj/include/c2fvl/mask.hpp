#pragma once

#include <cstdint>
#include <vector>

#include "c2fvl/errors.hpp"

namespace c2fvl {

// Binary segmentation mask, row-major, one byte per pixel (0 or 1).
struct Mask {
  int h = 0, w = 0;
  std::vector<uint8_t> data;

  Mask() = default;
  Mask(int h_, int w_) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_, 0) {}

  uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * w + x]; }
  int64_t count() const {
    int64_t n = 0;
    for (uint8_t v : data) n += v;
    return n;
  }
  bool operator==(const Mask&) const = default;
};

}  // namespace c2fvl
