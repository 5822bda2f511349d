#include "dsd/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

namespace dsd {

namespace {

constexpr double kPixelNoise = 0.30;
constexpr double kShapeJitter = 0.06;

using Rgb = std::array<double, 3>;

Rgb hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  Rgb rgb{};
  switch (static_cast<int>(hp) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  const double m = v - c;
  for (double& ch : rgb) ch += m;
  return rgb;
}

// Class 0 is a mid grey; foreground classes are spread around the hue wheel.
Rgb class_color(std::size_t cls, std::size_t classes) {
  if (cls == 0) return {0.5, 0.5, 0.5};
  const double hue = static_cast<double>(cls - 1) / static_cast<double>(classes - 1);
  return hsv_to_rgb(hue, 0.55, 0.75);
}

enum class Kind { kRect, kDisc, kBar };

}  // namespace

ShapePolicy parse_shape_policy(const std::string& name) {
  if (name == "mixed") return ShapePolicy::kMixed;
  if (name == "rects") return ShapePolicy::kRectangles;
  if (name == "discs") return ShapePolicy::kDiscs;
  if (name == "bars") return ShapePolicy::kBars;
  throw InvalidArgument("unknown shape policy '" + name + "'");
}

std::string to_string(ShapePolicy policy) {
  switch (policy) {
    case ShapePolicy::kMixed: return "mixed";
    case ShapePolicy::kRectangles: return "rects";
    case ShapePolicy::kDiscs: return "discs";
    case ShapePolicy::kBars: return "bars";
  }
  return "mixed";
}

SynthSample generate_sample(std::uint64_t seed, std::uint64_t index,
                            std::size_t height, std::size_t width,
                            std::size_t classes, ShapePolicy policy) {
  if (classes < 2) throw InvalidArgument("generate: need at least 2 classes");
  if (height < 16 || width < 16) {
    throw InvalidArgument("generate: height and width must be >= 16");
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(kGeneratorVersion)};
  std::mt19937_64 rng(seq);
  auto uniform_int = [&rng](long lo, long hi) {
    return std::uniform_int_distribution<long>(lo, hi)(rng);
  };
  auto uniform = [&rng](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  std::normal_distribution<double> jitter(0.0, kShapeJitter);
  std::normal_distribution<double> noise(0.0, kPixelNoise);

  const long h = static_cast<long>(height);
  const long w = static_cast<long>(width);
  const long side = std::min(h, w);

  SynthSample sample{Tensor({3, height, width}), LabelMap(height, width, 0)};
  std::vector<Rgb> fill(height * width, class_color(0, classes));

  const long shapes = uniform_int(1, 4);
  for (long s = 0; s < shapes; ++s) {
    const auto cls = static_cast<std::size_t>(uniform_int(1, static_cast<long>(classes) - 1));
    Kind kind = Kind::kRect;
    switch (policy) {
      case ShapePolicy::kMixed: kind = static_cast<Kind>(uniform_int(0, 2)); break;
      case ShapePolicy::kRectangles: kind = Kind::kRect; break;
      case ShapePolicy::kDiscs: kind = Kind::kDisc; break;
      case ShapePolicy::kBars: kind = Kind::kBar; break;
    }
    Rgb color = class_color(cls, classes);
    for (double& ch : color) ch += jitter(rng);

    long y0 = 0, y1 = 0, x0 = 0, x1 = 0;
    double cy = 0, cx = 0, radius = 0;
    if (kind == Kind::kRect) {
      const long rh = uniform_int(side / 8, side / 2);
      const long rw = uniform_int(side / 8, side / 2);
      y0 = uniform_int(0, h - rh);
      x0 = uniform_int(0, w - rw);
      y1 = y0 + rh;
      x1 = x0 + rw;
    } else if (kind == Kind::kBar) {
      const long length = uniform_int(side / 2, side);
      const long thick = uniform_int(side / 16, side / 8);
      if (uniform_int(0, 1) == 0) {
        y0 = uniform_int(0, h - thick);
        x0 = uniform_int(0, w - length);
        y1 = y0 + thick;
        x1 = x0 + length;
      } else {
        y0 = uniform_int(0, h - length);
        x0 = uniform_int(0, w - thick);
        y1 = y0 + length;
        x1 = x0 + thick;
      }
    } else {
      radius = uniform(static_cast<double>(side) / 10.0, static_cast<double>(side) / 4.0);
      cy = uniform(0.0, static_cast<double>(h));
      cx = uniform(0.0, static_cast<double>(w));
    }
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        bool inside = false;
        if (kind == Kind::kDisc) {
          const double dy = static_cast<double>(y) + 0.5 - cy;
          const double dx = static_cast<double>(x) + 0.5 - cx;
          inside = dy * dy + dx * dx <= radius * radius;
        } else {
          inside = y >= y0 && y < y1 && x >= x0 && x < x1;
        }
        if (inside) {
          sample.mask.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
              static_cast<int>(cls);
          fill[static_cast<std::size_t>(y * w + x)] = color;
        }
      }
    }
  }

  const std::size_t sites = height * width;
  for (std::size_t s = 0; s < sites; ++s) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      sample.image[ch * sites + s] = std::clamp(fill[s][ch] + noise(rng), 0.0, 1.0);
    }
  }
  return sample;
}

std::vector<SynthSample> generate(std::uint64_t seed, std::size_t count,
                                  std::size_t height, std::size_t width,
                                  std::size_t classes, ShapePolicy policy) {
  std::vector<SynthSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(generate_sample(seed, i, height, width, classes, policy));
  }
  return out;
}

Dataset make_dataset(const DatasetManifest& m) {
  return {m, generate(m.seed, m.count, m.height, m.width, m.classes, m.policy)};
}

void save_dataset(const std::string& dir, const Dataset& data) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const DatasetManifest& m = data.manifest;
  nlohmann::ordered_json j;
  j["generator_version"] = m.generator_version;
  j["seed"] = m.seed;
  j["n"] = m.count;
  j["height"] = m.height;
  j["width"] = m.width;
  j["classes"] = m.classes;
  j["shape_policy"] = to_string(m.policy);
  j["images"] = "images.dst1";
  j["masks"] = "masks.dst1";
  std::ofstream(fs::path(dir) / "manifest.json") << j.dump(2) << '\n';

  const std::size_t n = data.samples.size();
  if (n == 0) {
    // DST1 extents must be >= 1 in practice; an empty dataset is manifest-only.
    return;
  }
  Tensor images({n, 3, m.height, m.width});
  Tensor masks({n, m.height, m.width});
  for (std::size_t i = 0; i < n; ++i) {
    images.set_slice(i, data.samples[i].image);
    Tensor mask({m.height, m.width});
    for (std::size_t s = 0; s < mask.size(); ++s) {
      mask[s] = data.samples[i].mask.labels[s];
    }
    masks.set_slice(i, mask);
  }
  save_dst1((fs::path(dir) / "images.dst1").string(), images);
  save_dst1((fs::path(dir) / "masks.dst1").string(), masks);
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw FormatError("cannot open dataset manifest in " + dir);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad dataset manifest: ") + e.what());
  }
  Dataset data;
  DatasetManifest& m = data.manifest;
  try {
    m.generator_version = j.at("generator_version").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.count = j.at("n").get<std::size_t>();
    m.height = j.at("height").get<std::size_t>();
    m.width = j.at("width").get<std::size_t>();
    m.classes = j.at("classes").get<std::size_t>();
    m.policy = parse_shape_policy(j.at("shape_policy").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad dataset manifest: ") + e.what());
  }
  if (m.generator_version != kGeneratorVersion) {
    throw FormatError("dataset was written by generator version " +
                      std::to_string(m.generator_version) + ", expected " +
                      std::to_string(kGeneratorVersion));
  }
  if (m.count == 0) return data;

  const Tensor images = load_dst1((fs::path(dir) / "images.dst1").string());
  const Tensor masks = load_dst1((fs::path(dir) / "masks.dst1").string());
  if (images.shape() != Shape{m.count, 3, m.height, m.width} ||
      masks.shape() != Shape{m.count, m.height, m.width}) {
    throw FormatError("dataset tensors do not match manifest");
  }
  for (std::size_t i = 0; i < m.count; ++i) {
    SynthSample s{images.slice(i), LabelMap(m.height, m.width)};
    const Tensor mask = masks.slice(i);
    for (std::size_t p = 0; p < mask.size(); ++p) {
      s.mask.labels[p] = static_cast<int>(mask[p]);
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

Tensor stack_images(const std::vector<SynthSample>& samples,
                    const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw InvalidArgument("stack_images: empty selection");
  const Shape& one = samples.at(indices.front()).image.shape();
  Tensor batch({indices.size(), one[0], one[1], one[2]});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    batch.set_slice(i, samples.at(indices[i]).image);
  }
  return batch;
}

}  // namespace dsd
