#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "dsd/metrics.hpp"

namespace {

dsd::LabelMap row(std::vector<int> v) {
  dsd::LabelMap m(1, v.size());
  m.labels = std::move(v);
  return m;
}

dsd::LabelMap random_map(std::mt19937_64& rng, std::size_t n, int classes) {
  dsd::LabelMap m(1, n);
  for (int& v : m.labels) v = static_cast<int>(rng() % static_cast<unsigned>(classes));
  return m;
}

}  // namespace

TEST_CASE("confusion examples") {
  const auto cm = dsd::confusion(row({0, 1, 1, 1}), row({0, 0, 1, 1}), 2);
  CHECK(cm.at(0, 0) == 1);
  CHECK(cm.at(0, 1) == 1);
  CHECK(cm.at(1, 0) == 0);
  CHECK(cm.at(1, 1) == 2);

  const auto diag = dsd::confusion(row({0, 2, 1, 2}), row({0, 2, 1, 2}), 3);
  CHECK(diag.trace() == diag.total());

  const auto none = dsd::confusion(row({0, 1}), row({255, 255}), 2);
  CHECK(none.total() == 0);

  CHECK_THROWS_AS(dsd::confusion(row({0, 2}), row({0, 1}), 2), dsd::InvalidArgument);
  CHECK_THROWS_AS(dsd::confusion(row({0, 1}), row({0, 5}), 2), dsd::InvalidArgument);
  CHECK_THROWS_AS(dsd::confusion(row({0, 1, 1}), row({0, 1}), 2), dsd::InvalidArgument);
}

TEST_CASE("miou and pixel_acc examples") {
  const auto cm = dsd::confusion(row({0, 1, 1, 1}), row({0, 0, 1, 1}), 2);
  CHECK(std::abs(dsd::miou(cm) - (0.5 + 2.0 / 3.0) / 2.0) < 1e-9);
  CHECK(std::abs(dsd::miou(cm) - 0.583333) < 1e-6);
  CHECK(std::abs(dsd::pixel_acc(cm) - 0.75) < 1e-9);

  const auto perfect = dsd::confusion(row({0, 1, 2}), row({0, 1, 2}), 4);
  CHECK(dsd::miou(perfect) == 1.0);
  CHECK(dsd::pixel_acc(perfect) == 1.0);

  const auto disjoint = dsd::confusion(row({1, 0}), row({0, 1}), 2);
  CHECK(dsd::miou(disjoint) == 0.0);

  CHECK_THROWS_AS(dsd::pixel_acc(dsd::ConfusionMatrix(3)), dsd::UndefinedMetric);
  CHECK_THROWS_AS(dsd::miou(dsd::ConfusionMatrix(3)), dsd::UndefinedMetric);
}

TEST_CASE("classes with an empty union are excluded") {
  const auto cm = dsd::confusion(row({0, 1}), row({0, 1}), 5);
  const auto iou = dsd::per_class_iou(cm);
  CHECK(iou[0].has_value());
  CHECK_FALSE(iou[4].has_value());
  CHECK(dsd::miou(cm) == 1.0);
}

TEST_CASE("confusion is additive") {
  std::mt19937_64 rng(1);
  dsd::ConfusionMatrix sum(4);
  dsd::LabelMap all_pred(1, 0), all_gt(1, 0);
  for (int i = 0; i < 10; ++i) {
    auto p = random_map(rng, 30, 4), g = random_map(rng, 30, 4);
    g.labels[static_cast<std::size_t>(i)] = dsd::kIgnoreLabel;
    sum += dsd::confusion(p, g, 4);
    all_pred.labels.insert(all_pred.labels.end(), p.labels.begin(), p.labels.end());
    all_gt.labels.insert(all_gt.labels.end(), g.labels.begin(), g.labels.end());
  }
  all_pred.width = all_gt.width = all_pred.labels.size();
  CHECK(dsd::confusion(all_pred, all_gt, 4) == sum);
  CHECK(sum.total() == 290);
}

TEST_CASE("metrics are invariant under class relabelling") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = 2 + static_cast<int>(rng() % 6);
    const auto p = random_map(rng, 50, c);
    const auto g = random_map(rng, 50, c);
    std::vector<int> perm(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) perm[static_cast<std::size_t>(i)] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    auto relabel = [&](dsd::LabelMap m) {
      for (int& v : m.labels) v = perm[static_cast<std::size_t>(v)];
      return m;
    };
    const auto cm = dsd::confusion(p, g, static_cast<std::size_t>(c));
    const auto cm2 = dsd::confusion(relabel(p), relabel(g), static_cast<std::size_t>(c));
    CHECK(std::abs(dsd::miou(cm) - dsd::miou(cm2)) < 1e-12);
    CHECK(dsd::pixel_acc(cm) == dsd::pixel_acc(cm2));
    for (int i = 0; i < c; ++i) {
      for (int j = 0; j < c; ++j) {
        CHECK(cm.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) ==
              cm2.at(static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]),
                     static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])));
      }
    }
    CHECK(dsd::miou(cm) >= 0.0);
    CHECK(dsd::miou(cm) <= 1.0);
  }
}

TEST_CASE("uniform random predictions give accuracy near 1/C") {
  std::mt19937_64 rng(3);
  const int c = 5;
  const std::size_t n = 200000;
  const auto cm = dsd::confusion(random_map(rng, n, c), random_map(rng, n, c), c);
  const double p = 1.0 / c;
  const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
  CHECK(std::abs(dsd::pixel_acc(cm) - p) < 3.0 * sigma);
}
