#include "dsd/metrics.hpp"

#include <string>

#include "dsd/tensor.hpp"

namespace dsd {

ConfusionMatrix::ConfusionMatrix(std::size_t classes)
    : classes_(classes), counts_(classes * classes, 0) {}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < classes_; ++i) t += at(i, i);
  return t;
}

void ConfusionMatrix::add(const LabelMap& pred, const LabelMap& gt,
                          int ignore_label) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw InvalidArgument("confusion: prediction and ground truth differ in size");
  }
  auto check = [this](int label, const char* what) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes_) {
      throw InvalidArgument(std::string("confusion: ") + what + " label " +
                            std::to_string(label) + " out of range for " +
                            std::to_string(classes_) + " classes");
    }
  };
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int truth = gt.labels[i];
    if (truth == ignore_label) continue;
    check(truth, "ground-truth");
    check(pred.labels[i], "predicted");
    ++at(static_cast<std::size_t>(truth), static_cast<std::size_t>(pred.labels[i]));
  }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) {
    throw InvalidArgument("confusion: class count mismatch");
  }
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix confusion(const LabelMap& pred, const LabelMap& gt,
                          std::size_t classes, int ignore_label) {
  ConfusionMatrix cm(classes);
  cm.add(pred, gt, ignore_label);
  return cm;
}

std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm) {
  const std::size_t c = cm.classes();
  std::vector<std::optional<double>> out(c);
  for (std::size_t i = 0; i < c; ++i) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row += cm.at(i, j);
      col += cm.at(j, i);
    }
    const std::uint64_t uni = row + col - cm.at(i, i);
    if (uni > 0) {
      out[i] = static_cast<double>(cm.at(i, i)) / static_cast<double>(uni);
    }
  }
  return out;
}

double miou(const ConfusionMatrix& cm) {
  double sum = 0.0;
  std::size_t present = 0;
  for (const auto& iou : per_class_iou(cm)) {
    if (!iou) continue;
    sum += *iou;
    ++present;
  }
  if (present == 0) throw UndefinedMetric("mIoU undefined: no evaluated pixels");
  return sum / static_cast<double>(present);
}

double pixel_acc(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) {
    throw UndefinedMetric("pixel accuracy undefined: no evaluated pixels");
  }
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

}  // namespace dsd
