#include "scenforge/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace scenforge::nn {

std::string hex_of_double(double v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(v)));
  return buf;
}

double double_of_hex(const std::string& hex) {
  if (hex.size() != 16) throw std::runtime_error("checkpoint: bad hex value '" + hex + "'");
  std::uint64_t bits = 0;
  for (char c : hex) {
    bits <<= 4;
    if (c >= '0' && c <= '9') bits |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') bits |= static_cast<std::uint64_t>(c - 'a' + 10);
    else if (c >= 'A' && c <= 'F') bits |= static_cast<std::uint64_t>(c - 'A' + 10);
    else throw std::runtime_error("checkpoint: bad hex value '" + hex + "'");
  }
  return std::bit_cast<double>(bits);
}

void write_records(std::ostream& os, const std::vector<CheckpointRecord>& records) {
  os << kCheckpointHeader << '\n';
  for (const auto& rec : records) {
    os << rec.name << ' ';
    const Shape& shape = rec.tensor.shape();
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) os << 'x';
      os << shape[i];
    }
    for (std::size_t i = 0; i < rec.tensor.numel(); ++i) os << ' ' << hex_of_double(rec.tensor[i]);
    os << '\n';
  }
}

std::vector<CheckpointRecord> read_records(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointHeader) {
    throw std::runtime_error("checkpoint: expected header '" + std::string(kCheckpointHeader) + "', got '" + line +
                             "'");
  }
  std::vector<CheckpointRecord> records;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, shape_tok;
    if (!(ls >> name >> shape_tok)) throw std::runtime_error("checkpoint: malformed record '" + line + "'");
    Shape shape;
    std::size_t pos = 0;
    while (pos < shape_tok.size()) {
      std::size_t next = shape_tok.find('x', pos);
      if (next == std::string::npos) next = shape_tok.size();
      shape.push_back(static_cast<std::size_t>(std::stoull(shape_tok.substr(pos, next - pos))));
      pos = next + 1;
    }
    std::vector<double> values;
    values.reserve(shape_numel(shape));
    std::string hex;
    while (ls >> hex) values.push_back(double_of_hex(hex));
    if (values.size() != shape_numel(shape)) {
      throw std::runtime_error("checkpoint: record '" + name + "' has " + std::to_string(values.size()) +
                               " values, shape needs " + std::to_string(shape_numel(shape)));
    }
    records.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  return records;
}

void save_records(const std::string& path, const std::vector<CheckpointRecord>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  write_records(os, records);
}

std::vector<CheckpointRecord> load_records(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  return read_records(is);
}

std::uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("file_hash: cannot open '" + path + "'");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace scenforge::nn
