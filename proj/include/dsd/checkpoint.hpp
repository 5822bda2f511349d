#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dsd/segnet.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

// Trained network state. On disk: "DSDCKPT1", u64 spec digest, u64
// iteration, u32-length-prefixed spec JSON and RNG state, u32 parameter and
// velocity counts, then DST1 blocks (parameters, then velocities) in
// declaration order.
struct Checkpoint {
  SegNetSpec spec;
  std::vector<Tensor> params;
  std::vector<Tensor> velocity;
  std::uint64_t iteration = 0;
  std::string rng_state;
  // Trainable state outside the network, e.g. the FitNet adapter and its velocity.
  std::vector<Tensor> aux;

  bool operator==(const Checkpoint&) const = default;
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
std::string checkpoint_bytes(const Checkpoint& ckpt);

}  // namespace dsd
