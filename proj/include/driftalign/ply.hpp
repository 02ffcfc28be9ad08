#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace driftalign {

enum class PlyType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

struct PlyProperty {
  std::string name;
  PlyType type;
};

/// A single "vertex" element held column-wise. Values are widened to double
/// in memory; every supported PLY scalar type round-trips exactly.
struct PlyTable {
  std::vector<PlyProperty> properties;
  std::vector<std::vector<double>> columns;

  size_t rows() const { return columns.empty() ? 0 : columns.front().size(); }
  bool has(const std::string& name) const { return index_of(name) >= 0; }
  int index_of(const std::string& name) const;
  const std::vector<double>& column(const std::string& name) const;
  void add(std::string name, PlyType type, std::vector<double> values);
};

void write_ply_table(const std::filesystem::path& path, const PlyTable& table);
/// Reads binary_little_endian files with a single vertex element.
PlyTable read_ply_table(const std::filesystem::path& path);

}  // namespace driftalign
