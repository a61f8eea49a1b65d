#pragma once

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "palnet/geometry.hpp"

// PLY (ascii / binary_little_endian) and OBJ input, PLY output.
// Polygonal faces are fan-triangulated; colors and other extras are skipped.

namespace palnet {

namespace detail {

inline std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

struct PlyProperty {
  std::string name;
  std::string type;       // scalar type, or list value type
  std::string count_type;  // non-empty for list properties
  bool is_list = false;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> properties;
};

inline std::size_t ply_type_size(const std::string& t) {
  if (t == "char" || t == "int8" || t == "uchar" || t == "uint8") return 1;
  if (t == "short" || t == "int16" || t == "ushort" || t == "uint16") return 2;
  if (t == "int" || t == "int32" || t == "uint" || t == "uint32" || t == "float" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  throw IoError("ply: unknown property type '" + t + "'");
}

inline double ply_read_binary_scalar(std::istream& in, const std::string& type) {
  unsigned char buf[8];
  const std::size_t sz = ply_type_size(type);
  in.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(sz));
  if (!in) throw IoError("ply: truncated binary payload");
  auto as = [&](auto v) {
    std::memcpy(&v, buf, sizeof(v));
    return static_cast<double>(v);
  };
  if (type == "char" || type == "int8") return as(std::int8_t{});
  if (type == "uchar" || type == "uint8") return as(std::uint8_t{});
  if (type == "short" || type == "int16") return as(std::int16_t{});
  if (type == "ushort" || type == "uint16") return as(std::uint16_t{});
  if (type == "int" || type == "int32") return as(std::int32_t{});
  if (type == "uint" || type == "uint32") return as(std::uint32_t{});
  if (type == "float" || type == "float32") return as(float{});
  return as(double{});
}

inline void append_fan(Mesh& mesh, const std::vector<std::int64_t>& poly) {
  if (poly.size() < 3) throw IoError("mesh: face with fewer than 3 vertices");
  for (std::size_t i = 1; i + 1 < poly.size(); ++i)
    mesh.faces.push_back({static_cast<std::int32_t>(poly[0]), static_cast<std::int32_t>(poly[i]),
                          static_cast<std::int32_t>(poly[i + 1])});
}

inline Mesh load_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw IoError("ply: empty file: " + path);
  if (line.size() && line.back() == '\r') line.pop_back();
  if (line != "ply") throw IoError("ply: missing magic line in " + path);

  std::string format;
  std::vector<PlyElement> elements;
  while (std::getline(in, line)) {
    if (line.size() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "comment" || tok == "obj_info" || tok.empty()) continue;
    if (tok == "format") {
      ls >> format;
      if (format != "ascii" && format != "binary_little_endian")
        throw IoError("ply: unsupported format '" + format + "'");
    } else if (tok == "element") {
      PlyElement e;
      ls >> e.name >> e.count;
      elements.push_back(e);
    } else if (tok == "property") {
      if (elements.empty()) throw IoError("ply: property before element");
      PlyProperty p;
      std::string t;
      ls >> t;
      if (t == "list") {
        p.is_list = true;
        ls >> p.count_type >> p.type >> p.name;
      } else {
        p.type = t;
        ls >> p.name;
      }
      elements.back().properties.push_back(p);
    } else if (tok == "end_header") {
      break;
    } else {
      throw IoError("ply: unrecognized header line '" + line + "'");
    }
  }
  if (format.empty()) throw IoError("ply: header missing format line");

  Mesh mesh;
  const bool binary = format == "binary_little_endian";
  for (const auto& elem : elements) {
    const bool is_vertex = elem.name == "vertex";
    const bool is_face = elem.name == "face";
    int xi = -1, yi = -1, zi = -1;
    if (is_vertex) {
      for (std::size_t p = 0; p < elem.properties.size(); ++p) {
        if (elem.properties[p].name == "x") xi = static_cast<int>(p);
        if (elem.properties[p].name == "y") yi = static_cast<int>(p);
        if (elem.properties[p].name == "z") zi = static_cast<int>(p);
      }
      if (xi < 0 || yi < 0 || zi < 0) throw IoError("ply: vertex element lacks x/y/z");
      mesh.vertices.reserve(elem.count);
    }
    for (std::size_t i = 0; i < elem.count; ++i) {
      std::istringstream ascii_line;
      if (!binary) {
        do {
          if (!std::getline(in, line)) throw IoError("ply: truncated ascii payload");
        } while (line.find_first_not_of(" \t\r") == std::string::npos);
        ascii_line.str(line);
      }
      std::vector<double> scalars;
      std::vector<std::int64_t> list_values;
      for (const auto& prop : elem.properties) {
        if (prop.is_list) {
          double cnt = binary ? ply_read_binary_scalar(in, prop.count_type) : [&] {
            double v;
            if (!(ascii_line >> v)) throw IoError("ply: malformed list count");
            return v;
          }();
          list_values.clear();
          for (std::size_t j = 0; j < static_cast<std::size_t>(cnt); ++j) {
            double v = binary ? ply_read_binary_scalar(in, prop.type) : [&] {
              double w;
              if (!(ascii_line >> w)) throw IoError("ply: malformed list entry");
              return w;
            }();
            list_values.push_back(static_cast<std::int64_t>(v));
          }
        } else {
          double v = binary ? ply_read_binary_scalar(in, prop.type) : [&] {
            double w;
            if (!(ascii_line >> w)) throw IoError("ply: malformed scalar '" + line + "'");
            return w;
          }();
          scalars.push_back(v);
        }
      }
      if (is_vertex) {
        mesh.vertices.push_back(Vec3(scalars[xi], scalars[yi], scalars[zi]));
      } else if (is_face && !list_values.empty()) {
        append_fan(mesh, list_values);
      }
    }
  }
  mesh.validate();
  return mesh;
}

inline Mesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open file: " + path);
  Mesh mesh;
  std::string line;
  while (std::getline(in, line)) {
    if (line.size() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "v") {
      double x, y, z;
      if (!(ls >> x >> y >> z)) throw IoError("obj: malformed vertex line '" + line + "'");
      mesh.vertices.push_back(Vec3(x, y, z));
    } else if (tok == "f") {
      std::vector<std::int64_t> poly;
      std::string ref;
      while (ls >> ref) {
        const std::string head = ref.substr(0, ref.find('/'));
        std::int64_t idx = 0;
        try {
          idx = std::stoll(head);
        } catch (const std::exception&) {
          throw IoError("obj: malformed face reference '" + ref + "'");
        }
        if (idx == 0) throw IoError("obj: face index 0 is invalid");
        // OBJ is 1-based; negative indices count back from the current end.
        poly.push_back(idx > 0 ? idx - 1 : static_cast<std::int64_t>(mesh.vertices.size()) + idx);
      }
      append_fan(mesh, poly);
    }
  }
  mesh.validate();
  return mesh;
}

}  // namespace detail

inline Mesh load_mesh(const std::string& path) {
  const std::string lower = detail::lowercase(path);
  if (detail::ends_with(lower, ".ply")) return detail::load_ply(path);
  if (detail::ends_with(lower, ".obj")) return detail::load_obj(path);
  throw IoError("load_mesh: unsupported extension (want .ply or .obj): " + path);
}

/// Binary little-endian PLY with float32 coordinates (and normals for clouds
/// carrying them). `ascii` switches to the text encoding.
inline void save_ply(const Mesh& mesh, const std::string& path, bool ascii = false) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  out << "ply\nformat " << (ascii ? "ascii" : "binary_little_endian") << " 1.0\n";
  out << "element vertex " << mesh.vertices.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  out << "element face " << mesh.faces.size() << "\n";
  out << "property list uchar int vertex_indices\nend_header\n";
  if (ascii) {
    out.precision(9);
    for (const auto& v : mesh.vertices) out << float(v.x()) << " " << float(v.y()) << " " << float(v.z()) << "\n";
    for (const auto& f : mesh.faces) out << "3 " << f[0] << " " << f[1] << " " << f[2] << "\n";
  } else {
    for (const auto& v : mesh.vertices) {
      const float xyz[3] = {float(v.x()), float(v.y()), float(v.z())};
      out.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    }
    for (const auto& f : mesh.faces) {
      const unsigned char n = 3;
      out.write(reinterpret_cast<const char*>(&n), 1);
      out.write(reinterpret_cast<const char*>(f.data()), 3 * sizeof(std::int32_t));
    }
  }
  if (!out) throw IoError("short write: " + path);
}

inline void save_ply(const PointCloud& cloud, const std::string& path, bool ascii = false) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  const bool with_normals = cloud.has_normals();
  out << "ply\nformat " << (ascii ? "ascii" : "binary_little_endian") << " 1.0\n";
  out << "element vertex " << cloud.points.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\n";
  if (with_normals) out << "property float nx\nproperty float ny\nproperty float nz\n";
  out << "element face 0\nproperty list uchar int vertex_indices\nend_header\n";
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    float row[6] = {float(cloud.points[i].x()), float(cloud.points[i].y()), float(cloud.points[i].z()), 0, 0, 0};
    int n = 3;
    if (with_normals) {
      row[3] = float(cloud.normals[i].x());
      row[4] = float(cloud.normals[i].y());
      row[5] = float(cloud.normals[i].z());
      n = 6;
    }
    if (ascii) {
      out.precision(9);
      for (int c = 0; c < n; ++c) out << row[c] << (c + 1 == n ? '\n' : ' ');
    } else {
      out.write(reinterpret_cast<const char*>(row), n * sizeof(float));
    }
  }
  if (!out) throw IoError("short write: " + path);
}

/// Loads a PLY as a point cloud, picking up nx/ny/nz normals when present.
inline PointCloud load_cloud_ply(const std::string& path) {
  // Reuse the mesh reader for coordinates; normals need a second pass only if
  // the header declares them.
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open file: " + path);
  std::string line;
  bool has_normals = false;
  while (std::getline(probe, line)) {
    if (line.find("property") != std::string::npos && line.find(" nx") != std::string::npos)
      has_normals = true;
    if (line.find("end_header") != std::string::npos) break;
  }
  probe.close();

  if (!has_normals) {
    Mesh m = detail::load_ply(path);
    return PointCloud{std::move(m.vertices), {}, {}};
  }

  // Full property-aware pass for x/y/z + nx/ny/nz.
  std::ifstream in(path, std::ios::binary);
  std::getline(in, line);
  std::string format;
  std::vector<detail::PlyElement> elements;
  while (std::getline(in, line)) {
    if (line.size() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "format") {
      ls >> format;
    } else if (tok == "element") {
      detail::PlyElement e;
      ls >> e.name >> e.count;
      elements.push_back(e);
    } else if (tok == "property") {
      detail::PlyProperty p;
      std::string t;
      ls >> t;
      if (t == "list") {
        p.is_list = true;
        ls >> p.count_type >> p.type >> p.name;
      } else {
        p.type = t;
        ls >> p.name;
      }
      elements.back().properties.push_back(p);
    } else if (tok == "end_header") {
      break;
    }
  }
  const bool binary = format == "binary_little_endian";
  PointCloud cloud;
  for (const auto& elem : elements) {
    int idx[6] = {-1, -1, -1, -1, -1, -1};
    if (elem.name == "vertex") {
      const char* names[6] = {"x", "y", "z", "nx", "ny", "nz"};
      for (std::size_t p = 0; p < elem.properties.size(); ++p)
        for (int c = 0; c < 6; ++c)
          if (elem.properties[p].name == names[c]) idx[c] = static_cast<int>(p);
    }
    for (std::size_t i = 0; i < elem.count; ++i) {
      std::istringstream ascii_line;
      if (!binary) {
        do {
          if (!std::getline(in, line)) throw IoError("ply: truncated ascii payload");
        } while (line.find_first_not_of(" \t\r") == std::string::npos);
        ascii_line.str(line);
      }
      std::vector<double> scalars;
      for (const auto& prop : elem.properties) {
        if (prop.is_list) {
          double cnt = binary ? detail::ply_read_binary_scalar(in, prop.count_type) : [&] {
            double v;
            ascii_line >> v;
            return v;
          }();
          for (std::size_t j = 0; j < static_cast<std::size_t>(cnt); ++j) {
            if (binary)
              detail::ply_read_binary_scalar(in, prop.type);
            else {
              double v;
              ascii_line >> v;
            }
          }
          scalars.push_back(0.0);
        } else if (binary) {
          scalars.push_back(detail::ply_read_binary_scalar(in, prop.type));
        } else {
          double v;
          if (!(ascii_line >> v)) throw IoError("ply: malformed scalar line");
          scalars.push_back(v);
        }
      }
      if (elem.name == "vertex") {
        cloud.points.push_back(Vec3(scalars[idx[0]], scalars[idx[1]], scalars[idx[2]]));
        cloud.normals.push_back(Vec3(scalars[idx[3]], scalars[idx[4]], scalars[idx[5]]));
        cloud.normal_valid.push_back(cloud.normals.back().norm() > 0.5 ? 1 : 0);
      }
    }
  }
  return cloud;
}

}  // namespace palnet
