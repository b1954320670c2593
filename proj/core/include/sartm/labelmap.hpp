#pragma once

#include <cstdint>
#include <vector>

#include "sartm/config.hpp"
#include "sartm/error.hpp"

SARTM_NS_BEGIN

inline constexpr int32_t kIgnoreLabel = 255;

// Integer class raster; 255 marks pixels excluded from every loss and metric.
struct LabelMap {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<int32_t> values;  // row-major, size height * width

  int32_t at(int64_t y, int64_t x) const {
    return values[static_cast<size_t>(y * width + x)];
  }
  int64_t numel() const { return height * width; }
};

// Nearest-neighbor downsample to (h, w), sampling at cell centers.
LabelMap downsample_nearest(const LabelMap& src, int64_t h, int64_t w);

SARTM_NS_END
