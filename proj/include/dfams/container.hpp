#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dfams {

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<double> data;  // row-major
};

/// Versioned binary artifact: magic, format version, kind tag, JSON metadata,
/// named tensors (row-major float64 little-endian) and a trailing FNV-1a
/// checksum over every preceding byte.
struct Container {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::uint32_t format_version = kFormatVersion;
  std::string kind;
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor& tensor(const std::string& name) const;
};

std::string serialize(const Container& c);
Container deserialize(const std::string& bytes);

void save_container(const Container& c, const std::filesystem::path& path);
Container load_container(const std::filesystem::path& path, const std::string& expected_kind);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& content);

}  // namespace dfams
