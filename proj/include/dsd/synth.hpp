#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsd/labels.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

inline constexpr int kGeneratorVersion = 1;

struct SynthSample {
  Tensor image;  // 3 x H x W, values in [0, 1]
  LabelMap mask;
};

enum class ShapePolicy { kMixed, kRectangles, kDiscs, kBars };

ShapePolicy parse_shape_policy(const std::string& name);
std::string to_string(ShapePolicy policy);

// One sample of the synthetic segmentation task: a noisy class-0 background
// with 1..4 random shapes of foreground classes, each filled with a jittered
// class colour plus per-pixel noise. Deterministic in (seed, index).
SynthSample generate_sample(std::uint64_t seed, std::uint64_t index,
                            std::size_t height, std::size_t width,
                            std::size_t classes,
                            ShapePolicy policy = ShapePolicy::kMixed);

std::vector<SynthSample> generate(std::uint64_t seed, std::size_t count,
                                  std::size_t height, std::size_t width,
                                  std::size_t classes,
                                  ShapePolicy policy = ShapePolicy::kMixed);

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  ShapePolicy policy = ShapePolicy::kMixed;
  int generator_version = kGeneratorVersion;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SynthSample> samples;
};

Dataset make_dataset(const DatasetManifest& manifest);

// Writes manifest.json, images.dst1 (n x 3 x H x W) and masks.dst1
// (n x H x W, labels stored as exact small integers) into `dir`.
void save_dataset(const std::string& dir, const Dataset& data);
Dataset load_dataset(const std::string& dir);

// Stacks the selected samples into an n x 3 x H x W batch.
Tensor stack_images(const std::vector<SynthSample>& samples,
                    const std::vector<std::size_t>& indices);

}  // namespace dsd
