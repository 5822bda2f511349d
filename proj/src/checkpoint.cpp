#include "dsd/checkpoint.hpp"

#include <array>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace dsd {

namespace {

constexpr std::array<char, 8> kTag = {'D', 'S', 'D', 'C', 'K', 'P', 'T', '1'};

void put_uint(std::ostream& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint64_t get_uint(std::istream& in, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int ch = in.get();
    if (ch == std::char_traits<char>::eof()) {
      throw FormatError("checkpoint: unexpected end of stream");
    }
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(ch)) << (8 * i);
  }
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put_uint(out, s.size(), 4);
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const auto n = static_cast<std::size_t>(get_uint(in, 4));
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw FormatError("checkpoint: truncated string");
  return s;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kTag.data(), kTag.size());
  put_uint(out, ckpt.spec.digest(), 8);
  put_uint(out, ckpt.iteration, 8);
  put_string(out, ckpt.spec.to_json());
  put_string(out, ckpt.rng_state);
  put_uint(out, ckpt.params.size(), 4);
  put_uint(out, ckpt.velocity.size(), 4);
  put_uint(out, ckpt.aux.size(), 4);
  for (const Tensor& t : ckpt.params) write_dst1(out, t);
  for (const Tensor& t : ckpt.velocity) write_dst1(out, t);
  for (const Tensor& t : ckpt.aux) write_dst1(out, t);
  if (!out) throw FormatError("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  std::array<char, 8> tag{};
  in.read(tag.data(), tag.size());
  if (!in || tag != kTag) throw FormatError("checkpoint: bad format tag");
  Checkpoint ckpt;
  const std::uint64_t digest = get_uint(in, 8);
  ckpt.iteration = get_uint(in, 8);
  ckpt.spec = SegNetSpec::from_json(get_string(in));
  if (ckpt.spec.digest() != digest) {
    throw FormatError("checkpoint: spec digest mismatch");
  }
  ckpt.rng_state = get_string(in);
  const auto n_params = get_uint(in, 4);
  const auto n_velocity = get_uint(in, 4);
  const auto n_aux = get_uint(in, 4);
  for (std::uint64_t i = 0; i < n_params; ++i) ckpt.params.push_back(read_dst1(in));
  for (std::uint64_t i = 0; i < n_velocity; ++i) ckpt.velocity.push_back(read_dst1(in));
  for (std::uint64_t i = 0; i < n_aux; ++i) ckpt.aux.push_back(read_dst1(in));
  // Validates parameter shapes against the spec.
  SegNet check(ckpt.spec, ckpt.params);
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

std::string checkpoint_bytes(const Checkpoint& ckpt) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, ckpt);
  return os.str();
}

}  // namespace dsd
