#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "palnet/common.hpp"
#include "palnet/kdtree.hpp"
#include "palnet/rng.hpp"

namespace palnet {

// ---------------------------------------------------------------------------
// Core types
// ---------------------------------------------------------------------------

/// Point cloud in millimeters, optionally with unit normals. Immutable by
/// convention after construction; share freely across threads.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;             // empty or same length as points
  std::vector<std::uint8_t> normal_valid;  // parallel to normals when present

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_normals() const { return normals.size() == points.size() && !points.empty(); }
};

/// Triangle mesh in millimeters. Faces index into vertices.
struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::int32_t, 3>> faces;

  std::size_t vertex_count() const { return vertices.size(); }
  std::size_t face_count() const { return faces.size(); }

  double face_area(std::size_t f) const {
    const auto& t = faces[f];
    const Vec3 e1 = vertices[t[1]] - vertices[t[0]];
    const Vec3 e2 = vertices[t[2]] - vertices[t[0]];
    return 0.5 * e1.cross(e2).norm();
  }

  std::vector<double> face_areas() const {
    std::vector<double> a(faces.size());
    for (std::size_t f = 0; f < faces.size(); ++f) a[f] = face_area(f);
    return a;
  }

  double total_area() const {
    double s = 0.0;
    for (std::size_t f = 0; f < faces.size(); ++f) s += face_area(f);
    return s;
  }

  void validate() const {
    const auto n = static_cast<std::int32_t>(vertices.size());
    for (const auto& v : vertices)
      if (!v.allFinite()) throw Error("mesh: non-finite vertex coordinate");
    for (const auto& f : faces)
      for (int i = 0; i < 3; ++i)
        if (f[i] < 0 || f[i] >= n) throw Error("mesh: face index out of range");
  }

  PointCloud as_cloud() const { return PointCloud{vertices, {}, {}}; }
};

/// Axis-aligned box, closed on all sides.
struct BoundingBox {
  Vec3 min_corner = Vec3::Zero();
  Vec3 max_corner = Vec3::Zero();

  bool contains(const Vec3& p) const {
    return (p.array() >= min_corner.array()).all() && (p.array() <= max_corner.array()).all();
  }

  BoundingBox expanded(double margin) const {
    return BoundingBox{min_corner.array() - margin, max_corner.array() + margin};
  }

  void validate() const {
    if (!(min_corner.array() <= max_corner.array()).all())
      throw Error("bounding box: min corner exceeds max corner");
  }

  static BoundingBox around(const std::vector<Vec3>& pts) {
    if (pts.empty()) throw Error("bounding box: no points");
    BoundingBox b{pts.front(), pts.front()};
    for (const auto& p : pts) {
      b.min_corner = b.min_corner.cwiseMin(p);
      b.max_corner = b.max_corner.cwiseMax(p);
    }
    return b;
  }
};

/// SE(3) element stored as a 4x4 homogeneous matrix.
struct RigidTransform {
  Mat4 matrix = Mat4::Identity();

  static RigidTransform identity() { return RigidTransform{}; }

  static RigidTransform from_rotation_translation(const Mat3& r, const Vec3& t) {
    RigidTransform out;
    out.matrix.topLeftCorner<3, 3>() = r;
    out.matrix.topRightCorner<3, 1>() = t;
    return out;
  }

  Mat3 rotation() const { return matrix.topLeftCorner<3, 3>(); }
  Vec3 translation() const { return matrix.topRightCorner<3, 1>(); }

  Vec3 apply(const Vec3& p) const { return rotation() * p + translation(); }

  RigidTransform inverse() const {
    const Mat3 rt = rotation().transpose();
    return from_rotation_translation(rt, -rt * translation());
  }

  /// Deviation from SE(3): max of |R^T R - I| entries, |det R - 1|, last-row error.
  double rigidity_error() const {
    const Mat3 r = rotation();
    double e = (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
    e = std::max(e, std::abs(r.determinant() - 1.0));
    const Eigen::RowVector4d last = matrix.row(3);
    e = std::max(e, (last - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff());
    return e;
  }

  void validate(double tol = 1e-9) const {
    if (!matrix.allFinite()) throw Error("rigid transform: non-finite entries");
    if (rigidity_error() > tol) throw Error("rigid transform: not in SE(3) within tolerance");
  }

  /// Projects the rotation block back onto SO(3) (polar decomposition).
  RigidTransform orthonormalized() const {
    Eigen::JacobiSVD<Mat3> svd(rotation(), Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0.0) {
      Mat3 flip = Mat3::Identity();
      flip(2, 2) = -1.0;
      r = svd.matrixU() * flip * svd.matrixV().transpose();
    }
    return from_rotation_translation(r, translation());
  }
};

/// Rotation angle (radians) of the relative rotation between two transforms.
/// Computed through the quaternion so small angles keep full precision
/// (the trace/acos form flattens near identity and loses half the digits).
inline double rotation_angle_between(const RigidTransform& a, const RigidTransform& b) {
  const Mat3 rel = a.rotation().transpose() * b.rotation();
  const Eigen::Quaterniond q(rel);
  return 2.0 * std::atan2(q.vec().norm(), std::abs(q.w()));
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& t) {
  PointCloud out;
  out.points.reserve(cloud.points.size());
  const Mat3 r = t.rotation();
  const Vec3 tr = t.translation();
  for (const auto& p : cloud.points) out.points.push_back(r * p + tr);
  if (cloud.has_normals()) {
    out.normals.reserve(cloud.normals.size());
    for (const auto& n : cloud.normals) out.normals.push_back(r * n);
    out.normal_valid = cloud.normal_valid;
  }
  return out;
}

inline Mesh apply_transform(const Mesh& mesh, const RigidTransform& t) {
  Mesh out;
  out.vertices.reserve(mesh.vertices.size());
  const Mat3 r = t.rotation();
  const Vec3 tr = t.translation();
  for (const auto& v : mesh.vertices) out.vertices.push_back(r * v + tr);
  out.faces = mesh.faces;
  return out;
}

inline std::vector<Vec3> apply_transform(const std::vector<Vec3>& pts, const RigidTransform& t) {
  std::vector<Vec3> out;
  out.reserve(pts.size());
  const Mat3 r = t.rotation();
  const Vec3 tr = t.translation();
  for (const auto& p : pts) out.push_back(r * p + tr);
  return out;
}

/// Keeps exactly the points inside the closed box, order preserved.
/// Throws if nothing survives: downstream registration cannot proceed.
inline PointCloud crop_roi(const PointCloud& cloud, const BoundingBox& box) {
  box.validate();
  PointCloud out;
  const bool carry_normals = cloud.has_normals();
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    if (!box.contains(cloud.points[i])) continue;
    out.points.push_back(cloud.points[i]);
    if (carry_normals) {
      out.normals.push_back(cloud.normals[i]);
      out.normal_valid.push_back(cloud.normal_valid.empty() ? 1 : cloud.normal_valid[i]);
    }
  }
  if (out.points.empty()) throw Error("crop_roi: ROI contains no points");
  return out;
}

struct SurfaceSample {
  PointCloud cloud;
  std::vector<std::int32_t> face_index;   // source face per sample
  std::vector<Vec3> barycentric;          // coordinates within that face
};

/// Uniform area-weighted surface sampling, deterministic for a given seed.
inline SurfaceSample sample_surface_detailed(const Mesh& mesh, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw Error("sample_surface: need at least one sample");
  const std::vector<double> areas = mesh.face_areas();
  std::vector<double> cumulative(areas.size());
  double total = 0.0;
  for (std::size_t f = 0; f < areas.size(); ++f) {
    total += areas[f];
    cumulative[f] = total;
  }
  if (!(total > 0.0)) throw Error("sample_surface: mesh has zero surface area");

  rng::Engine g = rng::make_engine(seed, {0x5a3e11ull});
  SurfaceSample out;
  out.cloud.points.reserve(n);
  out.face_index.reserve(n);
  out.barycentric.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double target = rng::uniform01(g) * total;
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), target);
    std::size_t f = static_cast<std::size_t>(it - cumulative.begin());
    if (f >= areas.size()) f = areas.size() - 1;
    // Degenerate faces have zero width in the cumulative table and are never hit.
    const double su = std::sqrt(rng::uniform01(g));
    const double v = rng::uniform01(g);
    const double b0 = 1.0 - su;
    const double b1 = su * (1.0 - v);
    const double b2 = su * v;
    const auto& tri = mesh.faces[f];
    out.cloud.points.push_back(b0 * mesh.vertices[tri[0]] + b1 * mesh.vertices[tri[1]] +
                               b2 * mesh.vertices[tri[2]]);
    out.face_index.push_back(static_cast<std::int32_t>(f));
    out.barycentric.push_back(Vec3(b0, b1, b2));
  }
  return out;
}

inline PointCloud sample_surface(const Mesh& mesh, std::size_t n, std::uint64_t seed) {
  return sample_surface_detailed(mesh, n, seed).cloud;
}

inline std::vector<KdTree::Hit> knn(const KdTree& tree, const Vec3& query, std::size_t k) {
  return tree.knn(query, k);
}

inline std::vector<KdTree::Hit> radius_query(const KdTree& tree, const Vec3& query, double r) {
  if (r <= 0.0) throw Error("radius_query: radius must be positive");
  return tree.radius(query, r);
}

/// PCA normals from k-neighborhoods, oriented toward `viewpoint` (a direction,
/// +z by default since aligned faces look down the z axis). Neighborhoods with
/// rank-deficient covariance get a zero normal flagged invalid.
inline PointCloud estimate_normals(const PointCloud& cloud, int k, const Vec3& viewpoint = Vec3(0, 0, 1)) {
  if (cloud.empty()) throw Error("estimate_normals: empty cloud");
  if (k < 3) throw Error("estimate_normals: need k >= 3");
  if (static_cast<std::size_t>(k) > cloud.size()) throw Error("estimate_normals: k exceeds cloud size");

  KdTree tree(cloud.points);
  PointCloud out;
  out.points = cloud.points;
  out.normals.assign(cloud.size(), Vec3::Zero());
  out.normal_valid.assign(cloud.size(), 0);

  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto hits = tree.knn(cloud.points[i], static_cast<std::size_t>(k));
    Vec3 mean = Vec3::Zero();
    for (const auto& h : hits) mean += cloud.points[h.index];
    mean /= static_cast<double>(hits.size());
    Mat3 cov = Mat3::Zero();
    for (const auto& h : hits) {
      const Vec3 d = cloud.points[h.index] - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Vec3 evals = eig.eigenvalues();  // ascending
    if (evals[1] <= 1e-12 * std::max(evals[2], 1e-300)) continue;  // rank < 2
    Vec3 n = eig.eigenvectors().col(0);
    n.normalize();
    if (n.dot(viewpoint) < 0.0) n = -n;
    out.normals[i] = n;
    out.normal_valid[i] = 1;
  }
  return out;
}

/// Mean distance to the nearest distinct neighbor; the resolution scale of a cloud.
inline double mean_nn_spacing(const KdTree& tree) {
  if (tree.size() < 2) throw Error("mean_nn_spacing: need at least two points");
  double sum = 0.0;
  for (std::size_t i = 0; i < tree.size(); ++i) {
    const auto hits = tree.knn(tree.points()[i], 2);
    sum += hits[1].distance;
  }
  return sum / static_cast<double>(tree.size());
}

}  // namespace palnet
