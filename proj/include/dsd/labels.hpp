#pragma once

#include <cstddef>
#include <vector>

namespace dsd {

inline constexpr int kIgnoreLabel = 255;

// Dense integer class map, row-major.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, int fill = 0)
      : height(h), width(w), labels(h * w, fill) {}

  int& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  int at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::size_t size() const { return labels.size(); }

  bool operator==(const LabelMap&) const = default;
};

}  // namespace dsd
