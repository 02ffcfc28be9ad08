#include "driftalign/point_cloud.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "driftalign/ply.hpp"

namespace driftalign {

static_assert(std::endian::native == std::endian::little, "PLY I/O assumes a little-endian host");

void PointCloud::reserve(size_t n) {
  positions.reserve(n);
  colors.reserve(n);
  confidences.reserve(n);
  frame_ids.reserve(n);
  if (has_normals()) normals.reserve(n);
  if (has_pixels()) pixels.reserve(n);
}

void PointCloud::push_back_from(const PointCloud& other, size_t i) {
  positions.push_back(other.positions[i]);
  colors.push_back(other.colors[i]);
  confidences.push_back(other.confidences[i]);
  frame_ids.push_back(other.frame_ids[i]);
  if (other.has_normals()) normals.push_back(other.normals[i]);
  if (other.has_pixels()) pixels.push_back(other.pixels[i]);
}

PointCloud PointCloud::subset(std::span<const size_t> indices) const {
  PointCloud out;
  out.positions.reserve(indices.size());
  for (size_t i : indices) out.push_back_from(*this, i);
  return out;
}

void PointCloud::append(const PointCloud& other) {
  if (empty()) {
    *this = other;
    return;
  }
  if (has_normals() != other.has_normals() || has_pixels() != other.has_pixels()) {
    throw Error("invariant", "PointCloud::append: clouds carry different optional attributes");
  }
  positions.insert(positions.end(), other.positions.begin(), other.positions.end());
  colors.insert(colors.end(), other.colors.begin(), other.colors.end());
  confidences.insert(confidences.end(), other.confidences.begin(), other.confidences.end());
  frame_ids.insert(frame_ids.end(), other.frame_ids.begin(), other.frame_ids.end());
  normals.insert(normals.end(), other.normals.begin(), other.normals.end());
  pixels.insert(pixels.end(), other.pixels.begin(), other.pixels.end());
}

void PointCloud::validate() const {
  const size_t n = size();
  if (colors.size() != n || confidences.size() != n || frame_ids.size() != n ||
      (has_normals() && normals.size() != n) || (has_pixels() && pixels.size() != n)) {
    throw Error("invariant", "PointCloud: attribute arrays have different lengths");
  }
  for (size_t i = 0; i < normals.size(); ++i) {
    const double len = normals[i].norm();
    if (len != 0.0 && std::abs(len - 1.0) > 1e-6) {
      throw Error("invariant", "PointCloud: normal " + std::to_string(i) + " is not unit length");
    }
  }
}

// ---------------------------------------------------------------------------
// PLY table

namespace {

size_t type_size(PlyType t) {
  switch (t) {
    case PlyType::Int8:
    case PlyType::UInt8:
      return 1;
    case PlyType::Int16:
    case PlyType::UInt16:
      return 2;
    case PlyType::Int32:
    case PlyType::UInt32:
    case PlyType::Float32:
      return 4;
    case PlyType::Float64:
      return 8;
  }
  return 0;
}

const char* type_name(PlyType t) {
  switch (t) {
    case PlyType::Int8: return "char";
    case PlyType::UInt8: return "uchar";
    case PlyType::Int16: return "short";
    case PlyType::UInt16: return "ushort";
    case PlyType::Int32: return "int";
    case PlyType::UInt32: return "uint";
    case PlyType::Float32: return "float";
    case PlyType::Float64: return "double";
  }
  return "";
}

PlyType parse_type(const std::string& s) {
  if (s == "char" || s == "int8") return PlyType::Int8;
  if (s == "uchar" || s == "uint8") return PlyType::UInt8;
  if (s == "short" || s == "int16") return PlyType::Int16;
  if (s == "ushort" || s == "uint16") return PlyType::UInt16;
  if (s == "int" || s == "int32") return PlyType::Int32;
  if (s == "uint" || s == "uint32") return PlyType::UInt32;
  if (s == "float" || s == "float32") return PlyType::Float32;
  if (s == "double" || s == "float64") return PlyType::Float64;
  throw Error("io", "PLY: unsupported property type '" + s + "'");
}

template <typename T>
void put(char* dst, double value) {
  T x;
  if constexpr (std::is_integral_v<T>) {
    x = static_cast<T>(std::llround(value));
  } else {
    x = static_cast<T>(value);
  }
  std::memcpy(dst, &x, sizeof(T));
}

template <typename T>
double get(const char* src) {
  T x;
  std::memcpy(&x, src, sizeof(T));
  return static_cast<double>(x);
}

void encode(char* dst, PlyType t, double v) {
  switch (t) {
    case PlyType::Int8: put<int8_t>(dst, v); break;
    case PlyType::UInt8: put<uint8_t>(dst, v); break;
    case PlyType::Int16: put<int16_t>(dst, v); break;
    case PlyType::UInt16: put<uint16_t>(dst, v); break;
    case PlyType::Int32: put<int32_t>(dst, v); break;
    case PlyType::UInt32: put<uint32_t>(dst, v); break;
    case PlyType::Float32: put<float>(dst, v); break;
    case PlyType::Float64: put<double>(dst, v); break;
  }
}

double decode(const char* src, PlyType t) {
  switch (t) {
    case PlyType::Int8: return get<int8_t>(src);
    case PlyType::UInt8: return get<uint8_t>(src);
    case PlyType::Int16: return get<int16_t>(src);
    case PlyType::UInt16: return get<uint16_t>(src);
    case PlyType::Int32: return get<int32_t>(src);
    case PlyType::UInt32: return get<uint32_t>(src);
    case PlyType::Float32: return get<float>(src);
    case PlyType::Float64: return get<double>(src);
  }
  return 0.0;
}

}  // namespace

int PlyTable::index_of(const std::string& name) const {
  for (size_t i = 0; i < properties.size(); ++i) {
    if (properties[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

const std::vector<double>& PlyTable::column(const std::string& name) const {
  const int i = index_of(name);
  if (i < 0) throw Error("io", "PLY: missing property '" + name + "'");
  return columns[static_cast<size_t>(i)];
}

void PlyTable::add(std::string name, PlyType type, std::vector<double> values) {
  if (!columns.empty() && values.size() != rows()) throw Error("invariant", "PLY: column length mismatch");
  properties.push_back({std::move(name), type});
  columns.push_back(std::move(values));
}

void write_ply_table(const std::filesystem::path& path, const PlyTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot open " + path.string() + " for writing");
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << table.rows() << "\n";
  size_t stride = 0;
  for (const auto& p : table.properties) {
    out << "property " << type_name(p.type) << " " << p.name << "\n";
    stride += type_size(p.type);
  }
  out << "end_header\n";
  std::vector<char> row(stride);
  for (size_t r = 0; r < table.rows(); ++r) {
    size_t offset = 0;
    for (size_t c = 0; c < table.properties.size(); ++c) {
      encode(row.data() + offset, table.properties[c].type, table.columns[c][r]);
      offset += type_size(table.properties[c].type);
    }
    out.write(row.data(), static_cast<std::streamsize>(stride));
  }
  if (!out) throw Error("io", "write failed: " + path.string());
}

PlyTable read_ply_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "ply") throw Error("io", path.string() + ": not a PLY file");
  PlyTable table;
  size_t count = 0;
  bool in_vertex = false, seen_vertex = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt != "binary_little_endian") throw Error("io", path.string() + ": only binary_little_endian PLY is supported");
    } else if (key == "element") {
      std::string name;
      ss >> name;
      if (name == "vertex") {
        if (seen_vertex) throw Error("io", path.string() + ": duplicate vertex element");
        ss >> count;
        in_vertex = seen_vertex = true;
      } else {
        throw Error("io", path.string() + ": unsupported element '" + name + "'");
      }
    } else if (key == "property") {
      if (!in_vertex) throw Error("io", path.string() + ": property outside vertex element");
      std::string type, name;
      ss >> type;
      if (type == "list") throw Error("io", path.string() + ": list properties are not supported");
      ss >> name;
      table.properties.push_back({name, parse_type(type)});
    } else if (key == "end_header") {
      break;
    }
  }
  size_t stride = 0;
  for (const auto& p : table.properties) stride += type_size(p.type);
  table.columns.assign(table.properties.size(), std::vector<double>(count));
  std::vector<char> row(stride);
  for (size_t r = 0; r < count; ++r) {
    if (!in.read(row.data(), static_cast<std::streamsize>(stride))) {
      throw Error("io", path.string() + ": truncated vertex data");
    }
    size_t offset = 0;
    for (size_t c = 0; c < table.properties.size(); ++c) {
      table.columns[c][r] = decode(row.data() + offset, table.properties[c].type);
      offset += type_size(table.properties[c].type);
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// PointCloud <-> PLY

void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  cloud.validate();
  const size_t n = cloud.size();
  auto col = [n](auto&& f) {
    std::vector<double> c(n);
    for (size_t i = 0; i < n; ++i) c[i] = f(i);
    return c;
  };
  auto to_byte = [](double x) { return std::round(std::clamp(x, 0.0, 1.0) * 255.0); };
  PlyTable t;
  for (int a = 0; a < 3; ++a) {
    t.add(std::string(1, "xyz"[a]), PlyType::Float32, col([&](size_t i) { return cloud.positions[i][a]; }));
  }
  const char* rgb[] = {"red", "green", "blue"};
  for (int a = 0; a < 3; ++a) {
    t.add(rgb[a], PlyType::UInt8, col([&](size_t i) { return to_byte(cloud.colors[i][a]); }));
  }
  const char* nrm[] = {"nx", "ny", "nz"};
  for (int a = 0; a < 3; ++a) {
    t.add(nrm[a], PlyType::Float32,
          col([&](size_t i) { return cloud.has_normals() ? cloud.normals[i][a] : 0.0; }));
  }
  t.add("confidence", PlyType::Float32, col([&](size_t i) { return cloud.confidences[i]; }));
  t.add("frame_id", PlyType::Int32, col([&](size_t i) { return cloud.frame_ids[i]; }));
  if (cloud.has_pixels()) {
    t.add("u", PlyType::Int32, col([&](size_t i) { return cloud.pixels[i].u; }));
    t.add("v", PlyType::Int32, col([&](size_t i) { return cloud.pixels[i].v; }));
  }
  write_ply_table(path, t);
}

PointCloud read_ply(const std::filesystem::path& path) {
  const PlyTable t = read_ply_table(path);
  const size_t n = t.rows();
  PointCloud c;
  c.positions.resize(n);
  c.colors.assign(n, Vec3::Constant(0.5));
  c.confidences.assign(n, 1.0);
  c.frame_ids.assign(n, 0);
  const auto& x = t.column("x");
  const auto& y = t.column("y");
  const auto& z = t.column("z");
  for (size_t i = 0; i < n; ++i) c.positions[i] = Vec3(x[i], y[i], z[i]);
  if (t.has("red")) {
    const auto &r = t.column("red"), &g = t.column("green"), &b = t.column("blue");
    for (size_t i = 0; i < n; ++i) c.colors[i] = Vec3(r[i], g[i], b[i]) / 255.0;
  }
  if (t.has("nx")) {
    const auto &nx = t.column("nx"), &ny = t.column("ny"), &nz = t.column("nz");
    c.normals.resize(n);
    for (size_t i = 0; i < n; ++i) {
      Vec3 v(nx[i], ny[i], nz[i]);
      // float32 storage loses a few ulps of unit length
      const double len = v.norm();
      c.normals[i] = len > 0.5 ? Vec3(v / len) : Vec3::Zero();
    }
  }
  if (t.has("confidence")) {
    const auto& cf = t.column("confidence");
    std::copy(cf.begin(), cf.end(), c.confidences.begin());
  }
  if (t.has("frame_id")) {
    const auto& f = t.column("frame_id");
    for (size_t i = 0; i < n; ++i) c.frame_ids[i] = static_cast<int32_t>(f[i]);
  }
  if (t.has("u") && t.has("v")) {
    const auto &u = t.column("u"), &v = t.column("v");
    c.pixels.resize(n);
    for (size_t i = 0; i < n; ++i) c.pixels[i] = {static_cast<int32_t>(u[i]), static_cast<int32_t>(v[i])};
  }
  return c;
}

}  // namespace driftalign
