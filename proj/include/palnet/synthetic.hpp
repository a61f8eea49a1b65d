#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "palnet/common.hpp"
#include "palnet/geometry.hpp"
#include "palnet/landmarks.hpp"
#include "palnet/mesh_io.hpp"
#include "palnet/rng.hpp"
#include "palnet/schema.hpp"

// Parametric face-like surface generator with exactly known landmarks.
//
// The surface is a deformed ellipsoid: a direction on the unit sphere,
// parameterised by a polar angle theta (0 at the top of the head, pi under the
// chin) and an azimuth phi (0 straight ahead, +x toward the subject's left),
// is scaled by the ellipsoid radii and by a radial bump field built from
// anisotropic Gaussians (nose ridge, brow, chin, cheeks, eye sockets, lips,
// ears). Eight per-subject shape coefficients modulate bump amplitudes and the
// global radii. Landmarks are fixed (theta, phi) parameters evaluated through
// the same analytic surface function, so ground truth is exact by
// construction, and the whole head is translated so the canonical nose tip
// sits at the origin (the registration region of interest is centred on the
// nasal area).

namespace palnet {

/// A named landmark pinned to fixed surface parameters (degrees).
struct SyntheticLandmark {
  std::string name;
  double theta_deg = 0.0;
  double phi_deg = 0.0;
};

inline constexpr int kShapeCoefficientCount = 8;
using ShapeCoeffs = std::array<double, kShapeCoefficientCount>;

/// The default 50-landmark placement matching the schema in schema.hpp.
/// Midline landmarks sit at phi = 0; paired landmarks at +/-phi (the subject's
/// right side is -phi because +x points to the subject's left).
inline const std::vector<SyntheticLandmark>& default_synthetic_landmarks() {
  static const std::vector<SyntheticLandmark> table = [] {
    // Midline, top of head downward.
    const std::vector<SyntheticLandmark> midline = {
        {"Tr", 38.0, 0.0},  {"G", 68.0, 0.0},   {"N", 76.0, 0.0},  {"Prn", 95.0, 0.0},
        {"C", 101.0, 0.0},  {"Sn", 106.0, 0.0}, {"Ls", 117.0, 0.0}, {"Sto", 124.0, 0.0},
        {"Li", 131.0, 0.0}, {"Sl", 138.0, 0.0}, {"Pg", 147.0, 0.0}, {"Gn", 157.0, 0.0}};
    // Paired stems with the magnitude of the azimuth; order matches
    // paired_landmark_stems().
    struct Pair {
      const char* stem;
      double theta;
      double phi;
    };
    const std::vector<Pair> pairs = {
        {"T", 92.0, 85.0},  {"Pra", 92.0, 82.0}, {"Sa", 80.0, 86.0},  {"Pa", 90.0, 97.0},
        {"Sba", 103.0, 86.0}, {"Ft", 65.0, 42.0}, {"Zy", 95.0, 58.0},  {"Go", 130.0, 55.0},
        {"Os", 74.0, 18.0}, {"Ex", 81.0, 30.0},  {"Or", 88.0, 21.0},  {"En", 80.0, 10.0},
        {"Chk", 106.0, 35.0}, {"Ac", 104.0, 10.0}, {"Al", 100.0, 12.0}, {"Itn", 104.0, 6.0},
        {"Stn", 99.0, 8.0}, {"Cph", 114.0, 5.0}, {"Ch", 124.0, 18.0}};
    std::vector<SyntheticLandmark> out = midline;
    for (const auto& p : pairs) out.push_back({std::string(p.stem) + "R", p.theta, -p.phi});
    for (const auto& p : pairs) out.push_back({std::string(p.stem) + "L", p.theta, p.phi});
    return out;
  }();
  return table;
}

struct FaceGenParams {
  // Base ellipsoid half-axes: x lateral, y vertical, z depth (mm).
  double radius_x_mm = 70.0;
  double radius_y_mm = 95.0;
  double radius_z_mm = 85.0;

  // Base relative amplitudes of the feature bumps (fraction of local radius).
  double nose_amplitude = 0.16;
  double brow_amplitude = 0.05;
  double chin_amplitude = 0.07;
  double cheek_amplitude = 0.05;

  // Per-subject variation: bump amplitudes scale by (1 + shape_strength * c_k)
  // and radii by (1 + radius_strength * c_k) for standard-normal coefficients.
  double shape_strength = 0.35;
  double radius_strength = 0.04;

  // Rigid pose perturbation: rotation about a random axis and a random
  // translation, both uniform within these ranges.
  double rotation_range_deg = 25.0;
  double translation_range_mm = 30.0;

  // Radial Gaussian jitter applied to mesh vertices (not to landmarks).
  double noise_sigma_mm = 0.0;

  // Triangulation density: theta rows (pole to pole) and phi columns.
  int grid_rows = 96;
  int grid_cols = 192;

  // Optionally delete mesh vertices near the four ear landmarks per side,
  // leaving their ground truth off-surface (exercises centroid re-projection
  // and the landmark-exclusion analysis).
  bool corrupt_ears = false;
  double ear_corruption_radius_mm = 10.0;

  // Reference model emitted for registration.
  std::size_t reference_points = 10000;
  double roi_margin_mm = 12.0;

  std::vector<SyntheticLandmark> landmarks = default_synthetic_landmarks();

  std::uint64_t seed = 0;

  void validate() const {
    require(radius_x_mm > 0.0 && radius_y_mm > 0.0 && radius_z_mm > 0.0,
            "face generator: ellipsoid radii must be positive");
    require(noise_sigma_mm >= 0.0, "face generator: noise sigma must be non-negative");
    require(grid_rows >= 4 && grid_cols >= 8, "face generator: grid too coarse to triangulate");
    require(!landmarks.empty(), "face generator: landmark schema is empty");
    require(reference_points >= 10, "face generator: reference cloud needs at least 10 points");
    require(rotation_range_deg >= 0.0 && translation_range_mm >= 0.0,
            "face generator: perturbation ranges must be non-negative");
    require(ear_corruption_radius_mm > 0.0, "face generator: ear corruption radius must be positive");
    for (const auto& l : landmarks) {
      require(!l.name.empty(), "face generator: landmark with empty name");
      require(l.theta_deg > 0.0 && l.theta_deg < 180.0,
              "face generator: landmark '" + l.name + "' must avoid the poles");
    }
  }
};

namespace detail {

/// One anisotropic Gaussian bump on the sphere. `coeff` selects the shape
/// coefficient that modulates its amplitude (-1 = fixed).
struct SurfaceBump {
  double theta;        // centre, radians
  double phi;          // centre, radians
  double sigma_theta;  // radians
  double sigma_phi;    // radians
  double amplitude;    // relative radial scale
  int coeff;
};

inline std::vector<SurfaceBump> face_bumps(const FaceGenParams& p) {
  const auto rad = [](double d) { return deg_to_rad(d); };
  std::vector<SurfaceBump> bumps;
  bumps.push_back({rad(97.0), 0.0, rad(9.0), rad(7.0), p.nose_amplitude, 0});
  bumps.push_back({rad(70.0), 0.0, rad(6.0), rad(30.0), p.brow_amplitude, 1});
  bumps.push_back({rad(148.0), 0.0, rad(10.0), rad(12.0), p.chin_amplitude, 2});
  for (const double side : {-1.0, 1.0}) {
    bumps.push_back({rad(106.0), side * rad(35.0), rad(12.0), rad(14.0), p.cheek_amplitude, 3});
    bumps.push_back({rad(80.0), side * rad(20.0), rad(6.0), rad(9.0), -0.045, 4});
    bumps.push_back({rad(90.0), side * rad(88.0), rad(10.0), rad(7.0), 0.08, -1});
  }
  bumps.push_back({rad(124.0), 0.0, rad(6.0), rad(14.0), 0.04, -1});
  return bumps;
}

/// Azimuth difference wrapped into [-pi, pi].
inline double wrap_angle(double a) {
  while (a > kPi) a -= 2.0 * kPi;
  while (a < -kPi) a += 2.0 * kPi;
  return a;
}

/// Radial scale factor at (theta, phi): 1 plus the sum of all bumps.
inline double radial_scale(const std::vector<SurfaceBump>& bumps, const ShapeCoeffs& coeffs,
                           double shape_strength, double theta, double phi) {
  double scale = 1.0;
  for (const auto& b : bumps) {
    double amp = b.amplitude;
    if (b.coeff >= 0) amp *= 1.0 + shape_strength * coeffs[static_cast<std::size_t>(b.coeff)];
    const double dt = (theta - b.theta) / b.sigma_theta;
    const double dp = wrap_angle(phi - b.phi) / b.sigma_phi;
    scale += amp * std::exp(-0.5 * (dt * dt + dp * dp));
  }
  return scale;
}

/// Deformed-ellipsoid point before the nose-tip recentring.
inline Vec3 raw_surface_point(const FaceGenParams& p, const std::vector<SurfaceBump>& bumps,
                              const ShapeCoeffs& coeffs, double theta, double phi) {
  const double ax = p.radius_x_mm * (1.0 + p.radius_strength * coeffs[5]);
  const double ay = p.radius_y_mm * (1.0 + p.radius_strength * coeffs[6]);
  const double az = p.radius_z_mm * (1.0 + p.radius_strength * coeffs[7]);
  const Vec3 dir(std::sin(theta) * std::sin(phi), std::cos(theta), std::sin(theta) * std::cos(phi));
  const double scale = radial_scale(bumps, coeffs, p.shape_strength, theta, phi);
  return Vec3(ax * dir.x(), ay * dir.y(), az * dir.z()) * scale;
}

/// Translation that puts the canonical (zero-coefficient) nose tip at the
/// origin; shared by every subject so all faces live in one reference frame.
inline Vec3 canonical_origin_offset(const FaceGenParams& p) {
  const SyntheticLandmark* prn = nullptr;
  for (const auto& l : p.landmarks)
    if (l.name == "Prn") prn = &l;
  // Fall back to the first landmark if the schema was customised without a
  // nose tip; any fixed on-surface anchor keeps the frame well defined.
  const SyntheticLandmark& anchor = prn ? *prn : p.landmarks.front();
  const ShapeCoeffs zeros{};
  return raw_surface_point(p, face_bumps(p), zeros, deg_to_rad(anchor.theta_deg),
                           deg_to_rad(anchor.phi_deg));
}

}  // namespace detail

/// Analytic surface point in the shared reference frame.
inline Vec3 face_surface_point(const FaceGenParams& params, const ShapeCoeffs& coeffs,
                               double theta, double phi) {
  const auto bumps = detail::face_bumps(params);
  return detail::raw_surface_point(params, bumps, coeffs, theta, phi) -
         detail::canonical_origin_offset(params);
}

/// Exact landmark positions for one subject's shape (canonical pose).
inline LandmarkSet analytic_landmarks(const FaceGenParams& params, const ShapeCoeffs& coeffs) {
  params.validate();
  const auto bumps = detail::face_bumps(params);
  const Vec3 offset = detail::canonical_origin_offset(params);
  LandmarkSet out;
  for (const auto& l : params.landmarks) {
    out.names.push_back(l.name);
    out.coords.push_back(detail::raw_surface_point(params, bumps, coeffs, deg_to_rad(l.theta_deg),
                                                   deg_to_rad(l.phi_deg)) -
                         offset);
  }
  out.validate();
  return out;
}

/// Triangulated head surface for one subject's shape (canonical pose).
/// Vertex jitter, when enabled, is applied along the local radial direction.
inline Mesh build_face_mesh(const FaceGenParams& params, const ShapeCoeffs& coeffs,
                            std::uint64_t noise_seed) {
  params.validate();
  const auto bumps = detail::face_bumps(params);
  const Vec3 offset = detail::canonical_origin_offset(params);
  const int rows = params.grid_rows;
  const int cols = params.grid_cols;
  rng::Engine noise = rng::make_engine(noise_seed, {0x0153ull});

  Mesh mesh;
  mesh.vertices.reserve(static_cast<std::size_t>(rows - 1) * static_cast<std::size_t>(cols) + 2);
  const auto emit = [&](double theta, double phi) {
    Vec3 v = detail::raw_surface_point(params, bumps, coeffs, theta, phi);
    if (params.noise_sigma_mm > 0.0) {
      const double r = v.norm();
      if (r > 1e-12) v += v / r * rng::normal(noise, 0.0, params.noise_sigma_mm);
    }
    mesh.vertices.push_back(v - offset);
  };

  emit(0.0, 0.0);  // north pole
  for (int i = 1; i < rows; ++i) {
    const double theta = kPi * static_cast<double>(i) / static_cast<double>(rows);
    for (int j = 0; j < cols; ++j) {
      const double phi = -kPi + 2.0 * kPi * static_cast<double>(j) / static_cast<double>(cols);
      emit(theta, phi);
    }
  }
  emit(kPi, 0.0);  // south pole

  const auto ring = [&](int i, int j) {
    return static_cast<std::int32_t>(1 + (i - 1) * cols + ((j % cols + cols) % cols));
  };
  const std::int32_t north = 0;
  const std::int32_t south = static_cast<std::int32_t>(mesh.vertices.size() - 1);
  for (int j = 0; j < cols; ++j) mesh.faces.push_back({north, ring(1, j), ring(1, j + 1)});
  for (int i = 1; i < rows - 1; ++i) {
    for (int j = 0; j < cols; ++j) {
      const std::int32_t a = ring(i, j), b = ring(i + 1, j), c = ring(i + 1, j + 1),
                         d = ring(i, j + 1);
      mesh.faces.push_back({a, b, c});
      mesh.faces.push_back({a, c, d});
    }
  }
  for (int j = 0; j < cols; ++j) mesh.faces.push_back({south, ring(rows - 1, j + 1), ring(rows - 1, j)});
  mesh.validate();
  return mesh;
}

/// Remove every vertex within `radius` of any centre, dropping the faces that
/// reference them and compacting the vertex list.
inline Mesh remove_vertices_near(const Mesh& mesh, const std::vector<Vec3>& centers,
                                 double radius) {
  require(radius > 0.0, "remove_vertices_near: radius must be positive");
  const double r2 = radius * radius;
  std::vector<std::int32_t> remap(mesh.vertices.size(), -1);
  Mesh out;
  out.vertices.reserve(mesh.vertices.size());
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    bool keep = true;
    for (const auto& c : centers) {
      if ((mesh.vertices[i] - c).squaredNorm() <= r2) {
        keep = false;
        break;
      }
    }
    if (keep) {
      remap[i] = static_cast<std::int32_t>(out.vertices.size());
      out.vertices.push_back(mesh.vertices[i]);
    }
  }
  for (const auto& f : mesh.faces) {
    const std::int32_t a = remap[static_cast<std::size_t>(f[0])];
    const std::int32_t b = remap[static_cast<std::size_t>(f[1])];
    const std::int32_t c = remap[static_cast<std::size_t>(f[2])];
    if (a >= 0 && b >= 0 && c >= 0) out.faces.push_back({a, b, c});
  }
  require(!out.vertices.empty(), "remove_vertices_near: corruption removed every vertex");
  out.validate();
  return out;
}

struct SubjectSample {
  Mesh mesh;               // posed (and optionally corrupted) scan surface
  LandmarkSet landmarks;   // exact ground truth in the posed frame
  RigidTransform pose;     // canonical -> posed
  ShapeCoeffs coefficients{};
};

/// Generate one subject: sample shape coefficients and a rigid pose from the
/// subject seed, build the surface, and pose mesh + ground truth together.
inline SubjectSample generate_subject(const FaceGenParams& params, std::uint64_t subject_seed) {
  params.validate();

  SubjectSample out;
  rng::Engine shape = rng::make_engine(subject_seed, {0xc0effull});
  for (auto& c : out.coefficients) c = rng::normal(shape);

  rng::Engine pose = rng::make_engine(subject_seed, {0x905effull});
  Vec3 axis(rng::normal(pose), rng::normal(pose), rng::normal(pose));
  if (axis.norm() < 1e-9) axis = Vec3(0.0, 1.0, 0.0);
  axis.normalize();
  const double angle = deg_to_rad(rng::uniform(pose, 0.0, params.rotation_range_deg));
  const Vec3 shift(rng::uniform(pose, -params.translation_range_mm, params.translation_range_mm),
                   rng::uniform(pose, -params.translation_range_mm, params.translation_range_mm),
                   rng::uniform(pose, -params.translation_range_mm, params.translation_range_mm));
  out.pose = RigidTransform::from_rotation_translation(
      Eigen::AngleAxisd(angle, axis).toRotationMatrix(), shift);

  Mesh canonical = build_face_mesh(params, out.coefficients, rng::derive_seed(subject_seed, {0x9e01ull}));
  LandmarkSet gt = analytic_landmarks(params, out.coefficients);

  if (params.corrupt_ears) {
    std::vector<Vec3> centers;
    for (const auto& name : peripheral_ear_landmarks())
      if (gt.has(name)) centers.push_back(gt.at(name));
    require(!centers.empty(), "generate_subject: ear corruption requested but schema has no ear landmarks");
    canonical = remove_vertices_near(canonical, centers, params.ear_corruption_radius_mm);
  }

  out.mesh = apply_transform(canonical, out.pose);
  out.landmarks = apply_transform(gt, out.pose);
  return out;
}

struct ReferenceModel {
  PointCloud cloud;        // canonical face sampled for registration
  BoundingBox roi;         // face region used by the fine alignment stage
  LandmarkSet landmarks;   // canonical (zero-coefficient) landmark positions
};

/// The canonical (zero-coefficient, zero-noise, identity-pose) head: a sampled
/// reference cloud plus a region-of-interest box spanning the bounding box of
/// the non-ear landmarks with a margin.
inline ReferenceModel generate_reference(const FaceGenParams& params) {
  params.validate();
  const ShapeCoeffs zeros{};
  FaceGenParams clean = params;
  clean.noise_sigma_mm = 0.0;
  clean.corrupt_ears = false;

  ReferenceModel out;
  const Mesh mesh = build_face_mesh(clean, zeros, rng::derive_seed(params.seed, {0x2ef0ull}));
  out.cloud = sample_surface(mesh, params.reference_points, rng::derive_seed(params.seed, {0x2ef5ull}));
  out.landmarks = analytic_landmarks(clean, zeros);

  const std::vector<std::string> ear_stems = {"T", "Pra", "Sa", "Pa", "Sba"};
  std::vector<Vec3> face_points;
  for (std::size_t i = 0; i < out.landmarks.names.size(); ++i) {
    const std::string& name = out.landmarks.names[i];
    bool is_ear = false;
    for (const auto& stem : ear_stems)
      if (name == stem + "R" || name == stem + "L") is_ear = true;
    if (!is_ear) face_points.push_back(out.landmarks.coords[i]);
  }
  require(!face_points.empty(), "generate_reference: no non-ear landmarks to span the face region");
  out.roi = BoundingBox::around(face_points).expanded(params.roi_margin_mm);
  return out;
}

inline nlohmann::json face_gen_params_to_json(const FaceGenParams& p) {
  nlohmann::json lms = nlohmann::json::array();
  for (const auto& l : p.landmarks)
    lms.push_back({{"name", l.name}, {"theta_deg", l.theta_deg}, {"phi_deg", l.phi_deg}});
  return nlohmann::json{{"radius_x_mm", p.radius_x_mm},
                        {"radius_y_mm", p.radius_y_mm},
                        {"radius_z_mm", p.radius_z_mm},
                        {"nose_amplitude", p.nose_amplitude},
                        {"brow_amplitude", p.brow_amplitude},
                        {"chin_amplitude", p.chin_amplitude},
                        {"cheek_amplitude", p.cheek_amplitude},
                        {"shape_strength", p.shape_strength},
                        {"radius_strength", p.radius_strength},
                        {"rotation_range_deg", p.rotation_range_deg},
                        {"translation_range_mm", p.translation_range_mm},
                        {"noise_sigma_mm", p.noise_sigma_mm},
                        {"grid_rows", p.grid_rows},
                        {"grid_cols", p.grid_cols},
                        {"corrupt_ears", p.corrupt_ears},
                        {"ear_corruption_radius_mm", p.ear_corruption_radius_mm},
                        {"reference_points", p.reference_points},
                        {"roi_margin_mm", p.roi_margin_mm},
                        {"landmarks", lms},
                        {"seed", p.seed}};
}

inline FaceGenParams face_gen_params_from_json(const nlohmann::json& j) {
  FaceGenParams p;
  p.radius_x_mm = j.value("radius_x_mm", p.radius_x_mm);
  p.radius_y_mm = j.value("radius_y_mm", p.radius_y_mm);
  p.radius_z_mm = j.value("radius_z_mm", p.radius_z_mm);
  p.nose_amplitude = j.value("nose_amplitude", p.nose_amplitude);
  p.brow_amplitude = j.value("brow_amplitude", p.brow_amplitude);
  p.chin_amplitude = j.value("chin_amplitude", p.chin_amplitude);
  p.cheek_amplitude = j.value("cheek_amplitude", p.cheek_amplitude);
  p.shape_strength = j.value("shape_strength", p.shape_strength);
  p.radius_strength = j.value("radius_strength", p.radius_strength);
  p.rotation_range_deg = j.value("rotation_range_deg", p.rotation_range_deg);
  p.translation_range_mm = j.value("translation_range_mm", p.translation_range_mm);
  p.noise_sigma_mm = j.value("noise_sigma_mm", p.noise_sigma_mm);
  p.grid_rows = j.value("grid_rows", p.grid_rows);
  p.grid_cols = j.value("grid_cols", p.grid_cols);
  p.corrupt_ears = j.value("corrupt_ears", p.corrupt_ears);
  p.ear_corruption_radius_mm = j.value("ear_corruption_radius_mm", p.ear_corruption_radius_mm);
  p.reference_points = j.value("reference_points", p.reference_points);
  p.roi_margin_mm = j.value("roi_margin_mm", p.roi_margin_mm);
  p.seed = j.value("seed", p.seed);
  if (j.contains("landmarks")) {
    p.landmarks.clear();
    for (const auto& l : j.at("landmarks"))
      p.landmarks.push_back({l.at("name").get<std::string>(), l.at("theta_deg").get<double>(),
                             l.at("phi_deg").get<double>()});
  }
  p.validate();
  return p;
}

inline nlohmann::json bounding_box_to_json(const BoundingBox& b) {
  return nlohmann::json{
      {"min", {b.min_corner.x(), b.min_corner.y(), b.min_corner.z()}},
      {"max", {b.max_corner.x(), b.max_corner.y(), b.max_corner.z()}}};
}

inline BoundingBox bounding_box_from_json(const nlohmann::json& j) {
  const auto& lo = j.at("min");
  const auto& hi = j.at("max");
  BoundingBox b{Vec3(lo.at(0).get<double>(), lo.at(1).get<double>(), lo.at(2).get<double>()),
                Vec3(hi.at(0).get<double>(), hi.at(1).get<double>(), hi.at(2).get<double>())};
  b.validate();
  return b;
}

inline nlohmann::json transform_to_json(const RigidTransform& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < 4; ++c) row.push_back(t.matrix(r, c));
    rows.push_back(row);
  }
  return rows;
}

inline RigidTransform transform_from_json(const nlohmann::json& j) {
  RigidTransform t;
  require(j.is_array() && j.size() == 4, "transform: expected a 4x4 row array");
  for (int r = 0; r < 4; ++r) {
    const auto& row = j.at(static_cast<std::size_t>(r));
    require(row.is_array() && row.size() == 4, "transform: expected a 4x4 row array");
    for (int c = 0; c < 4; ++c) t.matrix(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return t;
}

/// One generated subject's files, paths relative to the manifest directory.
struct DatasetSubject {
  std::size_t id = 0;
  std::string mesh_file;
  std::string landmarks_file;
  std::string mesh_checksum;
  std::string landmarks_checksum;
  RigidTransform pose;
};

struct DatasetManifest {
  std::string root_dir;  // directory holding the manifest; not serialised
  std::vector<DatasetSubject> subjects;
  std::string reference_file;
  std::string reference_checksum;
  BoundingBox roi;
  FaceGenParams params;

  std::string mesh_path(std::size_t i) const { return root_dir + "/" + subjects.at(i).mesh_file; }
  std::string landmarks_path(std::size_t i) const {
    return root_dir + "/" + subjects.at(i).landmarks_file;
  }
  std::string reference_path() const { return root_dir + "/" + reference_file; }
};

inline void save_dataset_manifest(const DatasetManifest& m, const std::string& path) {
  nlohmann::json subjects = nlohmann::json::array();
  for (const auto& s : m.subjects)
    subjects.push_back({{"id", s.id},
                        {"mesh", s.mesh_file},
                        {"landmarks", s.landmarks_file},
                        {"mesh_checksum", s.mesh_checksum},
                        {"landmarks_checksum", s.landmarks_checksum},
                        {"pose", transform_to_json(s.pose)}});
  const nlohmann::json j = {{"dataset", "synthetic-faces"},
                            {"subjects", subjects},
                            {"reference", {{"cloud", m.reference_file}, {"checksum", m.reference_checksum}}},
                            {"roi", bounding_box_to_json(m.roi)},
                            {"params", face_gen_params_to_json(m.params)}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_dataset_manifest: cannot open '" + path + "'");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("save_dataset_manifest: write failed for '" + path + "'");
}

inline DatasetManifest load_dataset_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_dataset_manifest: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_dataset_manifest: '" + path + "' is not valid JSON: " + e.what());
  }
  DatasetManifest m;
  m.root_dir = std::filesystem::path(path).parent_path().string();
  if (m.root_dir.empty()) m.root_dir = ".";
  try {
    m.params = face_gen_params_from_json(j.at("params"));
    m.roi = bounding_box_from_json(j.at("roi"));
    m.reference_file = j.at("reference").at("cloud").get<std::string>();
    m.reference_checksum = j.at("reference").at("checksum").get<std::string>();
    for (const auto& s : j.at("subjects")) {
      DatasetSubject d;
      d.id = s.at("id").get<std::size_t>();
      d.mesh_file = s.at("mesh").get<std::string>();
      d.landmarks_file = s.at("landmarks").get<std::string>();
      d.mesh_checksum = s.at("mesh_checksum").get<std::string>();
      d.landmarks_checksum = s.at("landmarks_checksum").get<std::string>();
      d.pose = transform_from_json(s.at("pose"));
      m.subjects.push_back(std::move(d));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("load_dataset_manifest: '" + path + "' missing fields: " + e.what());
  }
  return m;
}

/// Generate a full dataset under `out_dir`: per-subject posed meshes and
/// ground-truth landmark files, the canonical reference cloud, the face
/// region-of-interest box, and a manifest listing every file with a content
/// checksum. All randomness derives from params.seed.
inline DatasetManifest generate_dataset(const FaceGenParams& params, std::size_t n_subjects,
                                        const std::string& out_dir) {
  params.validate();
  require(n_subjects >= 1, "generate_dataset: need at least one subject");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("generate_dataset: cannot create '" + out_dir + "': " + ec.message());

  DatasetManifest manifest;
  manifest.root_dir = out_dir;
  manifest.params = params;

  const ReferenceModel ref = generate_reference(params);
  manifest.reference_file = "reference.ply";
  save_ply(ref.cloud, manifest.reference_path());
  manifest.reference_checksum = file_checksum(manifest.reference_path());
  manifest.roi = ref.roi;

  for (std::size_t i = 0; i < n_subjects; ++i) {
    const std::uint64_t subject_seed = rng::derive_seed(params.seed, {0xface5ull, i});
    const SubjectSample sample = generate_subject(params, subject_seed);
    char tag[32];
    std::snprintf(tag, sizeof(tag), "%03zu", i);
    DatasetSubject entry;
    entry.id = i;
    entry.mesh_file = std::string("subject_") + tag + ".ply";
    entry.landmarks_file = std::string("subject_") + tag + "_landmarks.csv";
    entry.pose = sample.pose;
    save_ply(sample.mesh, out_dir + "/" + entry.mesh_file);
    save_landmarks_csv(sample.landmarks, out_dir + "/" + entry.landmarks_file);
    entry.mesh_checksum = file_checksum(out_dir + "/" + entry.mesh_file);
    entry.landmarks_checksum = file_checksum(out_dir + "/" + entry.landmarks_file);
    manifest.subjects.push_back(std::move(entry));
  }

  save_dataset_manifest(manifest, out_dir + "/manifest.json");
  return manifest;
}

}  // namespace palnet
