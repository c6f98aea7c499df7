#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "raidx/grpo.hpp"
#include "raidx/harness/dataset.hpp"
#include "raidx/policy/policy.hpp"

namespace raidx {

/// Checkpoint layout, all integers little-endian:
///   "RDXC" | u32 version | u32 echo length | echo bytes | u32 record count |
///   per record: u32 name length | name | u32 rows | u32 cols | rows·cols f64
/// The echo is PolicyConfig::echo(); a loader built for a different config
/// refuses the file.
inline constexpr char kCheckpointMagic[4] = {'R', 'D', 'X', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& s) : s_(s) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s_[pos_ + b])) << (8 * b);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + b])) << (8 * b);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Policy& policy) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string echo = policy.config().echo();
  detail::put_u32(out, static_cast<std::uint32_t>(echo.size()));
  out += echo;
  detail::put_u32(out, static_cast<std::uint32_t>(policy.parameters().size()));
  for (const auto& p : policy.parameters()) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put_u32(out, static_cast<std::uint32_t>(p.value.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(p.value.cols()));
    for (double x : p.value.data()) detail::put_f64(out, x);
  }
  return out;
}

/// Restores a policy saved under `expected`. A different config echo is a
/// ConfigError; a damaged file is a CheckpointError.
inline Policy deserialize_checkpoint(const std::string& bytes, const PolicyConfig& expected) {
  detail::ByteReader in(bytes);
  if (in.bytes(4) != std::string(kCheckpointMagic, 4))
    throw CheckpointError("checkpoint: bad magic");
  if (const auto v = in.u32(); v != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(v));
  const std::string echo = in.bytes(in.u32());
  if (echo != expected.echo())
    throw ConfigError("checkpoint was written for a different policy config:\n  file:     " +
                      echo + "\n  expected: " + expected.echo());
  Policy policy = Policy::skeleton(expected);
  const std::uint32_t count = in.u32();
  if (count != policy.parameters().size())
    throw CheckpointError("checkpoint: expected " + std::to_string(policy.parameters().size()) +
                          " records, found " + std::to_string(count));
  for (auto& p : policy.parameters()) {
    const std::string name = in.bytes(in.u32());
    if (name != p.name) throw CheckpointError("checkpoint: expected record " + p.name +
                                              ", found " + name);
    const std::uint32_t rows = in.u32(), cols = in.u32();
    if (rows != p.value.rows() || cols != p.value.cols())
      throw CheckpointError("checkpoint: record " + name + " has shape " + std::to_string(rows) +
                            "x" + std::to_string(cols) + ", expected " +
                            p.value.shape_string());
    for (double& x : p.value.data()) x = in.f64();
  }
  if (!in.done()) throw CheckpointError("checkpoint: trailing bytes");
  return policy;
}

inline void save_checkpoint(const Policy& policy, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize_checkpoint(policy);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Policy load_checkpoint(const std::filesystem::path& path, const PolicyConfig& expected) {
  return deserialize_checkpoint(read_file_bytes(path), expected);
}

/// FNV-1a of the checkpoint bytes, as 16 hex digits.
inline std::string checkpoint_hash(const Policy& policy) {
  return hex64(fnv1a(serialize_checkpoint(policy)));
}

}  // namespace raidx
