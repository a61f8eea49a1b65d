#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "palnet/geometry.hpp"
#include "palnet/kdtree.hpp"

// Named anatomical landmark sets: CSV/JSON persistence, the population-mean
// template, and nearest-vertex projection onto a scan.

namespace palnet {

struct LandmarkSet {
  std::vector<std::string> names;
  std::vector<Vec3> coords;

  std::size_t size() const { return names.size(); }
  bool empty() const { return names.empty(); }

  /// Index of a landmark by name; throws if absent.
  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw Error("landmark not found: " + name);
  }

  bool has(const std::string& name) const {
    for (const auto& n : names)
      if (n == name) return true;
    return false;
  }

  const Vec3& at(const std::string& name) const { return coords[index_of(name)]; }

  void validate() const {
    require(names.size() == coords.size(), "LandmarkSet: names/coords size mismatch");
    for (std::size_t i = 0; i < names.size(); ++i) {
      require(!names[i].empty(), "LandmarkSet: empty landmark name");
      require(coords[i].allFinite(), "LandmarkSet: non-finite coordinate at " + names[i]);
      for (std::size_t j = i + 1; j < names.size(); ++j)
        require(names[i] != names[j], "LandmarkSet: duplicate landmark name " + names[i]);
    }
  }
};

inline LandmarkSet apply_transform(const LandmarkSet& lm, const RigidTransform& t) {
  LandmarkSet out = lm;
  for (auto& c : out.coords) c = t.apply(c);
  return out;
}

/// Coordinate-wise arithmetic mean per landmark across sets sharing the same
/// names in the same order. Summation order is fixed (input order), so the
/// result is bit-stable for a given input sequence.
inline LandmarkSet mean_template(const std::vector<LandmarkSet>& sets) {
  require(!sets.empty(), "mean_template: need at least one landmark set");
  const LandmarkSet& first = sets.front();
  for (const auto& s : sets) {
    require(s.names.size() == first.names.size(), "mean_template: landmark count mismatch");
    for (std::size_t i = 0; i < s.names.size(); ++i)
      require(s.names[i] == first.names[i],
              "mean_template: landmark name/order mismatch at index " + std::to_string(i) + " (" +
                  s.names[i] + " vs " + first.names[i] + ")");
  }
  LandmarkSet out;
  out.names = first.names;
  out.coords.assign(first.names.size(), Vec3::Zero());
  for (const auto& s : sets)
    for (std::size_t i = 0; i < s.coords.size(); ++i) out.coords[i] += s.coords[i];
  for (auto& c : out.coords) c /= static_cast<double>(sets.size());
  return out;
}

/// Replaces every landmark with its nearest cloud vertex (Euclidean, ties by
/// lowest index). Idempotent: projecting the result again is a no-op.
inline LandmarkSet project_to_surface(const LandmarkSet& lm, const KdTree& tree) {
  require(tree.size() > 0, "project_to_surface: empty cloud");
  LandmarkSet out = lm;
  for (auto& c : out.coords) c = tree.point(tree.nearest(c).index);
  return out;
}

inline LandmarkSet project_to_surface(const LandmarkSet& lm, const PointCloud& cloud) {
  return project_to_surface(lm, KdTree(cloud.points));
}

// ---------------------------------------------------------------------------
// Persistence: CSV with header `name,x,y,z` and an equivalent JSON form.

inline void save_landmarks_csv(const LandmarkSet& lm, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write file: " + path);
  out << "name,x,y,z\n";
  out.precision(17);
  for (std::size_t i = 0; i < lm.size(); ++i)
    out << lm.names[i] << "," << lm.coords[i].x() << "," << lm.coords[i].y() << ","
        << lm.coords[i].z() << "\n";
  if (!out) throw IoError("short write: " + path);
}

inline LandmarkSet load_landmarks_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("landmark csv: empty file: " + path);
  if (line.size() && line.back() == '\r') line.pop_back();
  if (line != "name,x,y,z") throw IoError("landmark csv: expected header 'name,x,y,z', got '" + line + "'");
  LandmarkSet lm;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.size() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, xs, ys, zs;
    if (!std::getline(ls, name, ',') || !std::getline(ls, xs, ',') || !std::getline(ls, ys, ',') ||
        !std::getline(ls, zs))
      throw IoError("landmark csv: malformed line " + std::to_string(lineno) + " in " + path);
    try {
      lm.names.push_back(name);
      lm.coords.push_back(Vec3(std::stod(xs), std::stod(ys), std::stod(zs)));
    } catch (const std::exception&) {
      throw IoError("landmark csv: bad number on line " + std::to_string(lineno) + " in " + path);
    }
  }
  lm.validate();
  return lm;
}

inline nlohmann::json landmarks_to_json(const LandmarkSet& lm) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = 0; i < lm.size(); ++i)
    arr.push_back({{"name", lm.names[i]},
                   {"x", lm.coords[i].x()},
                   {"y", lm.coords[i].y()},
                   {"z", lm.coords[i].z()}});
  return {{"landmarks", arr}};
}

inline LandmarkSet landmarks_from_json(const nlohmann::json& j) {
  LandmarkSet lm;
  for (const auto& e : j.at("landmarks")) {
    lm.names.push_back(e.at("name").get<std::string>());
    lm.coords.push_back(
        Vec3(e.at("x").get<double>(), e.at("y").get<double>(), e.at("z").get<double>()));
  }
  lm.validate();
  return lm;
}

inline void save_landmarks_json(const LandmarkSet& lm, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write file: " + path);
  out << landmarks_to_json(lm).dump(2) << "\n";
}

inline LandmarkSet load_landmarks_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError("landmark json: parse failure in " + path + ": " + e.what());
  }
  return landmarks_from_json(j);
}

/// Dispatch on extension (.csv / .json).
inline LandmarkSet load_landmarks(const std::string& path) {
  auto lower = path;
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower.size() >= 4 && lower.compare(lower.size() - 4, 4, ".csv") == 0)
    return load_landmarks_csv(path);
  if (lower.size() >= 5 && lower.compare(lower.size() - 5, 5, ".json") == 0)
    return load_landmarks_json(path);
  throw IoError("load_landmarks: unsupported extension (want .csv or .json): " + path);
}

inline void save_landmarks(const LandmarkSet& lm, const std::string& path) {
  auto lower = path;
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower.size() >= 4 && lower.compare(lower.size() - 4, 4, ".csv") == 0)
    return save_landmarks_csv(lm, path);
  if (lower.size() >= 5 && lower.compare(lower.size() - 5, 5, ".json") == 0)
    return save_landmarks_json(lm, path);
  throw IoError("save_landmarks: unsupported extension (want .csv or .json): " + path);
}

}  // namespace palnet
