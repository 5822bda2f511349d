#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "dsd/errors.hpp"
#include "dsd/labels.hpp"

namespace dsd {

// counts(i, j) = number of pixels of true class i predicted as class j.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0);

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const {
    return counts_[truth * classes_ + pred];
  }
  std::uint64_t& at(std::size_t truth, std::size_t pred) {
    return counts_[truth * classes_ + pred];
  }
  std::uint64_t total() const;
  std::uint64_t trace() const;

  // Accumulates one prediction/ground-truth pair.
  void add(const LabelMap& pred, const LabelMap& gt,
           int ignore_label = kIgnoreLabel);

  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt,
                          std::size_t classes, int ignore_label = kIgnoreLabel);

// IoU per class; std::nullopt for classes absent from both prediction and
// ground truth.
std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm);

// Mean IoU over classes with a non-empty union.
double miou(const ConfusionMatrix& cm);

double pixel_acc(const ConfusionMatrix& cm);

}  // namespace dsd
