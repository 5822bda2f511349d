#include <cmath>
#include <sstream>

#include "doctest.h"
#include "dsd/gradcheck.hpp"
#include "dsd/tensor.hpp"
#include "helpers.hpp"

using dsd::Tensor;

TEST_CASE("l2_normalize examples") {
  const Tensor v = dsd::l2_normalize(Tensor::from({3.0, 4.0}));
  CHECK(v[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(v[1] == doctest::Approx(0.8).epsilon(1e-15));

  const Tensor z = dsd::l2_normalize(Tensor::from({0.0, 0.0}));
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);

  const Tensor unit = Tensor::from({0.0, 1.0, 0.0});
  CHECK(dsd::l2_normalize(unit) == unit);
}

TEST_CASE("l2_normalize passes sub-eps vectors through scaled") {
  const Tensor v = dsd::l2_normalize(Tensor::from({1e-13, 0.0}), 1e-12);
  CHECK(v[0] == doctest::Approx(0.1));
}

TEST_CASE("l2_normalize output has unit norm") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor v = testing::random_tensor({2, 3, 5}, rng);
    const double n = dsd::l2_normalize(v).norm();
    CHECK(std::abs(n - 1.0) <= 1e-9);
  }
}

TEST_CASE("softmax_over_channels examples") {
  Tensor z({2, 1, 1});
  auto q = dsd::softmax_over_channels(z, 3.0);
  CHECK(q[0] == doctest::Approx(0.5));
  CHECK(q[1] == doctest::Approx(0.5));

  z[0] = std::log(4.0);
  q = dsd::softmax_over_channels(z, 1.0);
  CHECK(q[0] == doctest::Approx(0.8).epsilon(1e-14));
  CHECK(q[1] == doctest::Approx(0.2).epsilon(1e-14));

  q = dsd::softmax_over_channels(z, 1e6);
  CHECK(std::abs(q[0] - 0.5) < 1e-5);
  CHECK(std::abs(q[1] - 0.5) < 1e-5);

  CHECK_THROWS_AS(dsd::softmax_over_channels(z, 0.0), dsd::InvalidArgument);
  CHECK_THROWS_AS(dsd::softmax_over_channels(z, -1.0), dsd::InvalidArgument);
}

TEST_CASE("softmax_over_channels sums to one and ignores per-site shifts") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor z = testing::random_tensor({5, 3, 4}, rng, -30.0, 30.0);
    const Tensor q = dsd::softmax_over_channels(z, 2.0);
    Tensor shifted = z;
    for (std::size_t s = 0; s < 12; ++s) {
      const double c = std::uniform_real_distribution<double>(-50, 50)(rng);
      for (std::size_t ch = 0; ch < 5; ++ch) shifted[ch * 12 + s] += c;
    }
    const Tensor q2 = dsd::softmax_over_channels(shifted, 2.0);
    for (std::size_t s = 0; s < 12; ++s) {
      double total = 0.0;
      for (std::size_t ch = 0; ch < 5; ++ch) {
        CHECK(q[ch * 12 + s] > 0.0);
        total += q[ch * 12 + s];
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
    CHECK((q - q2).max_abs() < 1e-12);
  }
}

TEST_CASE("softmax stays finite for huge logits") {
  Tensor z({2, 1, 1});
  z[0] = 1e300;
  z[1] = -1e300;
  const Tensor q = dsd::softmax_over_channels(z, 1.0);
  CHECK(q.all_finite());
  CHECK(q[0] == 1.0);
}

TEST_CASE("resize_bilinear examples") {
  const Tensor m({2, 2}, {1.0, 2.0, 3.0, 4.0});
  CHECK(dsd::resize_bilinear(m, 2, 2) == m);

  const Tensor ramp({2, 2}, {0.0, 1.0, 0.0, 1.0});
  const Tensor r = dsd::resize_bilinear(ramp, 2, 3);
  CHECK(r.shape() == dsd::Shape{2, 3});
  CHECK(r.at(0, 1) == doctest::Approx(0.5));
  CHECK(r.at(1, 1) == doctest::Approx(0.5));
  CHECK(r.at(0, 0) == 0.0);
  CHECK(r.at(1, 2) == 1.0);

  const Tensor c = dsd::resize_bilinear(Tensor({3, 2}, 2.5), 7, 5);
  for (double x : c.data()) CHECK(x == doctest::Approx(2.5).epsilon(1e-15));

  CHECK_THROWS_AS(dsd::resize_bilinear(m, 0, 3), dsd::InvalidArgument);
}

TEST_CASE("resize_bilinear keeps corners and bounds") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t h = 1 + rng() % 6, w = 1 + rng() % 6;
    const std::size_t oh = 1 + rng() % 9, ow = 1 + rng() % 9;
    const Tensor m = testing::random_tensor({h, w}, rng);
    const Tensor r = dsd::resize_bilinear(m, oh, ow);
    double lo = m[0], hi = m[0];
    for (double x : m.data()) lo = std::min(lo, x), hi = std::max(hi, x);
    for (double x : r.data()) {
      CHECK(x >= lo - 1e-12);
      CHECK(x <= hi + 1e-12);
    }
    if (oh > 1 && ow > 1 && h > 1 && w > 1) {
      CHECK(r.at(0, 0) == doctest::Approx(m.at(0, 0)));
      CHECK(r.at(oh - 1, ow - 1) == doctest::Approx(m.at(h - 1, w - 1)));
      CHECK(r.at(0, ow - 1) == doctest::Approx(m.at(0, w - 1)));
      CHECK(r.at(oh - 1, 0) == doctest::Approx(m.at(h - 1, 0)));
    }
  }
}

TEST_CASE("resize_bilinear_backward is the adjoint of resize") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = 1 + rng() % 5, w = 1 + rng() % 5;
    const std::size_t oh = 1 + rng() % 8, ow = 1 + rng() % 8;
    const Tensor x = testing::random_tensor({h, w}, rng);
    const Tensor y = testing::random_tensor({oh, ow}, rng);
    const double lhs = dsd::resize_bilinear(x, oh, ow).dot(y);
    const double rhs = x.dot(dsd::resize_bilinear_backward(y, h, w));
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("DST1 round trip is bit exact") {
  std::mt19937_64 rng(21);
  for (std::size_t rank = 1; rank <= 4; ++rank) {
    dsd::Shape shape;
    for (std::size_t i = 0; i < rank; ++i) shape.push_back(1 + rng() % 4);
    const Tensor t = testing::random_tensor(shape, rng, -1e5, 1e5);
    std::stringstream ss;
    dsd::write_dst1(ss, t);
    CHECK(dsd::read_dst1(ss) == t);
  }
}

TEST_CASE("DST1 layout") {
  std::stringstream ss;
  dsd::write_dst1(ss, Tensor({2}, {1.0, -2.0}));
  const std::string bytes = ss.str();
  REQUIRE(bytes.size() == 4 + 1 + 4 + 16);
  CHECK(bytes.substr(0, 4) == "DST1");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 2);
  CHECK(bytes[6] == 0);
  CHECK(bytes[8] == 0);
  // 1.0 = 0x3FF0000000000000 little-endian
  CHECK(static_cast<unsigned char>(bytes[15]) == 0xF0);
  CHECK(static_cast<unsigned char>(bytes[16]) == 0x3F);
}

TEST_CASE("DST1 rejects malformed input") {
  std::stringstream bad_magic("DST2\x01");
  CHECK_THROWS_AS(dsd::read_dst1(bad_magic), dsd::FormatError);
  std::stringstream ss;
  dsd::write_dst1(ss, Tensor({3}, 1.0));
  std::string bytes = ss.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream truncated(bytes);
  CHECK_THROWS_AS(dsd::read_dst1(truncated), dsd::FormatError);
}

TEST_CASE("finite_diff_check examples") {
  dsd::TensorMap in{{"x", Tensor::from({1.0, 2.0})}};
  auto sum_sq = [](const dsd::TensorMap& m) {
    const Tensor& x = m.at("x");
    dsd::GradPair out;
    out.value = x.dot(x);
    out.grads["x"] = 2.0 * x;
    return out;
  };
  CHECK(dsd::finite_diff_check(sum_sq, in, 1e-3) < 1e-6);

  auto constant = [](const dsd::TensorMap& m) {
    dsd::GradPair out;
    out.value = 3.0;
    out.grads["x"] = Tensor(m.at("x").shape());
    return out;
  };
  CHECK(dsd::finite_diff_check(constant, in, 1e-3) == 0.0);

  auto wrong = [](const dsd::TensorMap& m) {
    const Tensor& x = m.at("x");
    dsd::GradPair out;
    out.value = x.dot(x);
    out.grads["x"] = x;
    return out;
  };
  // |2 - 4| / 4 at the second coordinate.
  CHECK(dsd::finite_diff_check(wrong, in, 1e-3) == doctest::Approx(0.5));

  CHECK_THROWS_AS(dsd::finite_diff_check(sum_sq, in, 1.0), dsd::InvalidArgument);
}

TEST_CASE("gradients of normalize and softmax") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor w = testing::random_tensor({3, 2, 2}, rng);
    dsd::TensorMap in{{"z", testing::random_tensor({3, 2, 2}, rng, -3, 3)}};
    auto norm_fn = [&](const dsd::TensorMap& m) {
      dsd::GradPair out;
      out.value = dsd::l2_normalize(m.at("z")).dot(w);
      out.grads["z"] = dsd::l2_normalize_backward(m.at("z"), w);
      return out;
    };
    CHECK(dsd::finite_diff_check(norm_fn, in, 1e-5) < 1e-6);
    auto soft_fn = [&](const dsd::TensorMap& m) {
      const Tensor q = dsd::softmax_over_channels(m.at("z"), 1.7);
      dsd::GradPair out;
      out.value = q.dot(w);
      out.grads["z"] = dsd::softmax_over_channels_backward(q, w, 1.7);
      return out;
    };
    CHECK(dsd::finite_diff_check(soft_fn, in, 1e-5) < 1e-6);
  }
}
