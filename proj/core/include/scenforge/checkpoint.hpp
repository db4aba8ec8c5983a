#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "scenforge/tensor.hpp"

namespace scenforge::nn {

/// Versioned text container for named tensors. Values are hex-encoded 64-bit
/// bit patterns: full precision, endianness-free, exact round trip.
///
///   NUMCORE-CKPT v1
///   <name> <d0>x<d1>... <hex> <hex> ...
struct CheckpointRecord {
  std::string name;
  Tensor tensor;
};

inline constexpr const char* kCheckpointHeader = "NUMCORE-CKPT v1";

void write_records(std::ostream& os, const std::vector<CheckpointRecord>& records);
std::vector<CheckpointRecord> read_records(std::istream& is);

void save_records(const std::string& path, const std::vector<CheckpointRecord>& records);
std::vector<CheckpointRecord> load_records(const std::string& path);

std::string hex_of_double(double v);
double double_of_hex(const std::string& hex);

/// FNV-1a over a file's bytes; used to stamp scenario sidecars with the
/// checkpoint they came from.
std::uint64_t file_hash(const std::string& path);
std::string hash_hex(std::uint64_t h);

}  // namespace scenforge::nn
