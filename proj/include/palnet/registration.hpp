#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "palnet/geometry.hpp"
#include "palnet/kdtree.hpp"
#include "palnet/rng.hpp"

// Multi-stage rigid alignment of a subject scan to a reference cloud:
// FPFH descriptors, mutual-nearest-neighbor feature matching, RANSAC coarse
// registration, ICP refinement on a region of interest, and composition of
// the two transforms applied to the original full-resolution mesh.

namespace palnet {

// ---------------------------------------------------------------------------
// Configuration

struct RegistrationConfig {
  int normal_k = 30;                       // neighbors for normal estimation
  double fpfh_radius_mm = 0.0;             // 0 = auto: 5× mean nearest-neighbor spacing
  std::size_t sample_points = 10000;       // surface samples for the coarse stage
  int ransac_max_iterations = 100000;
  double ransac_inlier_threshold_mm = 5.0;
  double ransac_min_inlier_fraction = 0.1;
  double ransac_confidence = 0.999;        // adaptive early-termination target
  double ransac_edge_prefilter = 0.9;      // min src/dst edge-length ratio in a sample
  std::size_t ransac_max_matches = 4000;   // cap on the correspondence pool
  int icp_max_iterations = 50;
  double icp_tolerance_mm = 1e-4;          // stop when RMS change drops below this
  double icp_max_correspondence_mm = 10.0;
  bool icp_point_to_plane = true;          // use destination normals when present
  std::uint64_t seed = 0;

  void validate() const {
    require(normal_k >= 3, "RegistrationConfig: normal_k must be at least 3");
    require(fpfh_radius_mm >= 0.0, "RegistrationConfig: fpfh_radius_mm must be non-negative");
    require(sample_points >= 3, "RegistrationConfig: sample_points must be at least 3");
    require(ransac_max_iterations >= 1 && icp_max_iterations >= 1,
            "RegistrationConfig: iteration counts must be at least 1");
    require(ransac_inlier_threshold_mm > 0.0 && icp_max_correspondence_mm > 0.0 &&
                icp_tolerance_mm > 0.0,
            "RegistrationConfig: thresholds must be positive");
    require(ransac_min_inlier_fraction > 0.0 && ransac_min_inlier_fraction <= 1.0,
            "RegistrationConfig: min inlier fraction must lie in (0,1]");
    require(ransac_confidence > 0.0 && ransac_confidence < 1.0,
            "RegistrationConfig: confidence must lie in (0,1)");
    require(ransac_edge_prefilter > 0.0 && ransac_edge_prefilter <= 1.0,
            "RegistrationConfig: edge prefilter ratio must lie in (0,1]");
    require(ransac_max_matches >= 3, "RegistrationConfig: match cap must be at least 3");
  }
};

inline nlohmann::json registration_config_to_json(const RegistrationConfig& c) {
  return {{"normal_k", c.normal_k},
          {"fpfh_radius_mm", c.fpfh_radius_mm},
          {"sample_points", c.sample_points},
          {"ransac_max_iterations", c.ransac_max_iterations},
          {"ransac_inlier_threshold_mm", c.ransac_inlier_threshold_mm},
          {"ransac_min_inlier_fraction", c.ransac_min_inlier_fraction},
          {"ransac_confidence", c.ransac_confidence},
          {"ransac_edge_prefilter", c.ransac_edge_prefilter},
          {"ransac_max_matches", c.ransac_max_matches},
          {"icp_max_iterations", c.icp_max_iterations},
          {"icp_tolerance_mm", c.icp_tolerance_mm},
          {"icp_max_correspondence_mm", c.icp_max_correspondence_mm},
          {"icp_point_to_plane", c.icp_point_to_plane},
          {"seed", c.seed}};
}

inline RegistrationConfig registration_config_from_json(const nlohmann::json& j) {
  RegistrationConfig c;
  c.normal_k = j.value("normal_k", c.normal_k);
  c.fpfh_radius_mm = j.value("fpfh_radius_mm", c.fpfh_radius_mm);
  c.sample_points = j.value("sample_points", c.sample_points);
  c.ransac_max_iterations = j.value("ransac_max_iterations", c.ransac_max_iterations);
  c.ransac_inlier_threshold_mm = j.value("ransac_inlier_threshold_mm", c.ransac_inlier_threshold_mm);
  c.ransac_min_inlier_fraction = j.value("ransac_min_inlier_fraction", c.ransac_min_inlier_fraction);
  c.ransac_confidence = j.value("ransac_confidence", c.ransac_confidence);
  c.ransac_edge_prefilter = j.value("ransac_edge_prefilter", c.ransac_edge_prefilter);
  c.ransac_max_matches = j.value("ransac_max_matches", c.ransac_max_matches);
  c.icp_max_iterations = j.value("icp_max_iterations", c.icp_max_iterations);
  c.icp_tolerance_mm = j.value("icp_tolerance_mm", c.icp_tolerance_mm);
  c.icp_max_correspondence_mm = j.value("icp_max_correspondence_mm", c.icp_max_correspondence_mm);
  c.icp_point_to_plane = j.value("icp_point_to_plane", c.icp_point_to_plane);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// FPFH descriptors

struct FpfhFeature {
  Eigen::Matrix<double, 33, 1> histogram = Eigen::Matrix<double, 33, 1>::Zero();
  bool valid = false;  // false when the point had no neighbors in radius
};

namespace detail {

/// Darboux-frame pair features between two oriented points. Returns false
/// for degenerate geometry (coincident points or parallel normal/offset).
inline bool pair_features(const Vec3& p1, const Vec3& n1, const Vec3& p2, const Vec3& n2,
                          double& alpha, double& phi, double& theta) {
  Vec3 dp = p2 - p1;
  const double dist = dp.norm();
  if (dist <= 0.0) return false;
  Vec3 ns = n1, nt = n2;
  const double cos1 = ns.dot(dp) / dist;
  const double cos2 = nt.dot(dp) / dist;
  // Make the source the point whose normal is better aligned with the offset.
  if (std::acos(std::min(1.0, std::abs(cos1))) > std::acos(std::min(1.0, std::abs(cos2)))) {
    std::swap(ns, nt);
    dp = -dp;
    phi = -cos2;
  } else {
    phi = cos1;
  }
  Vec3 v = dp.cross(ns);
  const double vn = v.norm();
  if (vn <= 0.0) return false;
  v /= vn;
  const Vec3 w = ns.cross(v);
  theta = v.dot(nt);
  alpha = std::atan2(w.dot(nt), ns.dot(nt));
  return true;
}

inline int histogram_bin(double value, double lo, double hi) {
  const int b = static_cast<int>(11.0 * (value - lo) / (hi - lo));
  return std::clamp(b, 0, 10);
}

}  // namespace detail

/// Fast Point Feature Histograms: per-point simplified histograms (SPFH) over
/// radius neighborhoods, then the weighted neighborhood sum
/// FPFH(p) = SPFH(p) + (1/k)·Σ SPFH(q)/‖p−q‖². Each of the three 11-bin
/// blocks (α, φ, θ) is normalized to sum 100. Points without neighbors get a
/// flagged zero histogram. Rigid-transform invariant by construction.
inline std::vector<FpfhFeature> compute_fpfh(const PointCloud& cloud, double radius) {
  require(radius > 0.0, "compute_fpfh: radius must be positive");
  require(cloud.has_normals(), "compute_fpfh: cloud must carry normals");
  const std::size_t n = cloud.size();
  const KdTree tree(cloud.points);

  auto normalize_blocks = [](Eigen::Matrix<double, 33, 1>& h) {
    for (int blk = 0; blk < 3; ++blk) {
      const double sum = h.segment<11>(11 * blk).sum();
      if (sum > 0.0) h.segment<11>(11 * blk) *= 100.0 / sum;
    }
  };

  // Pass 1: SPFH per point over its radius neighborhood.
  std::vector<Eigen::Matrix<double, 33, 1>> spfh(n, Eigen::Matrix<double, 33, 1>::Zero());
  std::vector<std::vector<KdTree::Hit>> neighborhoods(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!cloud.normal_valid.empty() && !cloud.normal_valid[i]) continue;
    auto hits = tree.radius(cloud.points[i], radius);
    std::vector<KdTree::Hit> filtered;
    for (const auto& h : hits) {
      if (h.index == i) continue;
      if (!cloud.normal_valid.empty() && !cloud.normal_valid[h.index]) continue;
      filtered.push_back(h);
    }
    neighborhoods[i] = std::move(filtered);
    for (const auto& h : neighborhoods[i]) {
      double alpha, phi, theta;
      if (!detail::pair_features(cloud.points[i], cloud.normals[i], cloud.points[h.index],
                                 cloud.normals[h.index], alpha, phi, theta))
        continue;
      spfh[i][detail::histogram_bin(alpha, -kPi, kPi)] += 1.0;
      spfh[i][11 + detail::histogram_bin(phi, -1.0, 1.0)] += 1.0;
      spfh[i][22 + detail::histogram_bin(theta, -1.0, 1.0)] += 1.0;
    }
    normalize_blocks(spfh[i]);
  }

  // Pass 2: weighted neighborhood aggregation.
  std::vector<FpfhFeature> features(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (neighborhoods[i].empty()) continue;  // flagged zero histogram
    Eigen::Matrix<double, 33, 1> acc = Eigen::Matrix<double, 33, 1>::Zero();
    std::size_t used = 0;
    for (const auto& h : neighborhoods[i]) {
      const double d2 = h.distance * h.distance;
      if (d2 <= 0.0) continue;
      acc += spfh[h.index] / d2;
      ++used;
    }
    Eigen::Matrix<double, 33, 1> hist = spfh[i];
    if (used > 0) hist += acc / static_cast<double>(used);
    normalize_blocks(hist);
    features[i].histogram = hist;
    features[i].valid = true;
  }
  return features;
}

// ---------------------------------------------------------------------------
// Feature matching

struct FeatureMatch {
  std::size_t src_index;
  std::size_t dst_index;
};

namespace detail {

/// Nearest neighbor in feature space for every row of `a` against `b`,
/// computed blockwise with dense squared-distance algebra.
inline std::vector<std::size_t> feature_nearest(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::Index chunk = 512;
  std::vector<std::size_t> nn(static_cast<std::size_t>(a.rows()));
  const Eigen::VectorXd b_sq = b.rowwise().squaredNorm();
  for (Eigen::Index start = 0; start < a.rows(); start += chunk) {
    const Eigen::Index rows = std::min(chunk, a.rows() - start);
    const Eigen::MatrixXd block = a.middleRows(start, rows);
    Eigen::MatrixXd d2 = (-2.0 * block * b.transpose());
    d2.rowwise() += b_sq.transpose();
    // The ‖a‖² term is constant per row and does not affect the argmin.
    for (Eigen::Index r = 0; r < rows; ++r) {
      Eigen::Index best = 0;
      d2.row(r).minCoeff(&best);
      nn[static_cast<std::size_t>(start + r)] = static_cast<std::size_t>(best);
    }
  }
  return nn;
}

}  // namespace detail

/// Mutual-nearest-neighbor matches between two FPFH sets, restricted to valid
/// features. When more than `max_matches` survive, a deterministic stride
/// subsample keeps the pool bounded.
inline std::vector<FeatureMatch> match_features(const std::vector<FpfhFeature>& src,
                                                const std::vector<FpfhFeature>& dst,
                                                std::size_t max_matches) {
  std::vector<std::size_t> src_ids, dst_ids;
  for (std::size_t i = 0; i < src.size(); ++i)
    if (src[i].valid) src_ids.push_back(i);
  for (std::size_t j = 0; j < dst.size(); ++j)
    if (dst[j].valid) dst_ids.push_back(j);
  require(src_ids.size() >= 3 && dst_ids.size() >= 3,
          "match_features: need at least 3 valid features per cloud");

  Eigen::MatrixXd a(static_cast<Eigen::Index>(src_ids.size()), 33);
  Eigen::MatrixXd b(static_cast<Eigen::Index>(dst_ids.size()), 33);
  for (std::size_t i = 0; i < src_ids.size(); ++i)
    a.row(static_cast<Eigen::Index>(i)) = src[src_ids[i]].histogram.transpose();
  for (std::size_t j = 0; j < dst_ids.size(); ++j)
    b.row(static_cast<Eigen::Index>(j)) = dst[dst_ids[j]].histogram.transpose();

  const auto fwd = detail::feature_nearest(a, b);
  const auto bwd = detail::feature_nearest(b, a);
  std::vector<FeatureMatch> matches;
  for (std::size_t i = 0; i < src_ids.size(); ++i)
    if (bwd[fwd[i]] == i) matches.push_back({src_ids[i], dst_ids[fwd[i]]});

  if (matches.size() > max_matches) {
    std::vector<FeatureMatch> kept;
    kept.reserve(max_matches);
    for (std::size_t k = 0; k < max_matches; ++k)
      kept.push_back(matches[k * matches.size() / max_matches]);
    matches = std::move(kept);
  }
  return matches;
}

// ---------------------------------------------------------------------------
// Rigid least squares (Kabsch)

/// Least-squares rotation+translation mapping src onto dst (SVD method with
/// reflection guard). Requires equal, non-degenerate point sets.
inline RigidTransform kabsch(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  require(src.size() == dst.size() && src.size() >= 3,
          "kabsch: need at least 3 paired points");
  Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    cs += src[i];
    cd += dst[i];
  }
  cs /= double(src.size());
  cd /= double(dst.size());
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) h += (src[i] - cs) * (dst[i] - cd).transpose();
  const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Mat3 r = svd.matrixV() * d * svd.matrixU().transpose();
  return RigidTransform::from_rotation_translation(r, cd - r * cs);
}

// ---------------------------------------------------------------------------
// RANSAC coarse registration

struct RansacResult {
  RigidTransform transform;
  std::size_t inliers = 0;
  std::size_t pool_size = 0;
  int iterations = 0;
};

/// Correspondence-based RANSAC over mutual FPFH matches: 3-point minimal
/// samples (edge-length prefiltered), inlier counting at the distance
/// threshold, adaptive early termination, and a final least-squares refit on
/// the best inlier set. Fully deterministic given cfg.seed.
inline RansacResult ransac_global(const PointCloud& src, const PointCloud& dst,
                                  const std::vector<FpfhFeature>& src_feats,
                                  const std::vector<FpfhFeature>& dst_feats,
                                  const RegistrationConfig& cfg) {
  cfg.validate();
  require(src.size() == src_feats.size() && dst.size() == dst_feats.size(),
          "ransac_global: feature count must match cloud size");
  const auto matches = match_features(src_feats, dst_feats, cfg.ransac_max_matches);
  if (matches.size() < 3)
    throw Error("ransac_global: fewer than 3 mutual feature matches");

  auto engine = rng::make_engine(cfg.seed, {0x4a5ac1ull});
  RansacResult best;
  best.pool_size = matches.size();
  double needed_iterations = double(cfg.ransac_max_iterations);

  std::vector<Vec3> s3(3), d3(3);
  for (int it = 0; it < cfg.ransac_max_iterations; ++it) {
    best.iterations = it + 1;
    const auto pick = rng::sample_without_replacement(engine, matches.size(), 3);
    for (int k = 0; k < 3; ++k) {
      s3[static_cast<std::size_t>(k)] = src.points[matches[pick[static_cast<std::size_t>(k)]].src_index];
      d3[static_cast<std::size_t>(k)] = dst.points[matches[pick[static_cast<std::size_t>(k)]].dst_index];
    }

    // Cheap congruency prefilter: corresponding triangle edges must have
    // similar lengths or the sample cannot produce a rigid fit.
    bool plausible = true;
    for (int k = 0; k < 3 && plausible; ++k) {
      const double es = (s3[static_cast<std::size_t>(k)] - s3[static_cast<std::size_t>((k + 1) % 3)]).norm();
      const double ed = (d3[static_cast<std::size_t>(k)] - d3[static_cast<std::size_t>((k + 1) % 3)]).norm();
      const double lo = std::min(es, ed), hi = std::max(es, ed);
      if (hi <= 1e-9 || lo / hi < cfg.ransac_edge_prefilter) plausible = false;
    }
    if (!plausible) continue;

    RigidTransform t;
    try {
      t = kabsch(s3, d3);
    } catch (const Error&) {
      continue;
    }
    const Mat3 r = t.rotation();
    const Vec3 tr = t.translation();
    std::size_t inliers = 0;
    const double thr2 = cfg.ransac_inlier_threshold_mm * cfg.ransac_inlier_threshold_mm;
    for (const auto& m : matches) {
      const Vec3 moved = r * src.points[m.src_index] + tr;
      if ((moved - dst.points[m.dst_index]).squaredNorm() <= thr2) ++inliers;
    }
    if (inliers > best.inliers) {
      best.inliers = inliers;
      best.transform = t;
      const double w = double(inliers) / double(matches.size());
      const double denom = std::log(std::max(1e-12, 1.0 - w * w * w));
      needed_iterations = denom < 0.0 ? std::log(1.0 - cfg.ransac_confidence) / denom
                                      : double(cfg.ransac_max_iterations);
    }
    if (double(it + 1) >= needed_iterations) break;
  }

  const double fraction = double(best.inliers) / double(matches.size());
  if (best.inliers < 3 || fraction < cfg.ransac_min_inlier_fraction)
    throw Error("ransac_global: coarse registration failed (best inlier fraction " +
                std::to_string(fraction) + " below " +
                std::to_string(cfg.ransac_min_inlier_fraction) + ")");

  // Refit on the winning inlier set.
  std::vector<Vec3> si, di;
  const Mat3 r = best.transform.rotation();
  const Vec3 tr = best.transform.translation();
  const double thr2 = cfg.ransac_inlier_threshold_mm * cfg.ransac_inlier_threshold_mm;
  for (const auto& m : matches) {
    const Vec3 moved = r * src.points[m.src_index] + tr;
    if ((moved - dst.points[m.dst_index]).squaredNorm() <= thr2) {
      si.push_back(src.points[m.src_index]);
      di.push_back(dst.points[m.dst_index]);
    }
  }
  best.transform = kabsch(si, di).orthonormalized();
  return best;
}

// ---------------------------------------------------------------------------
// ICP refinement

struct IcpResult {
  RigidTransform transform;  // residual: full fine alignment = transform ∘ init
  std::vector<double> rms_history;
  int iterations = 0;
  bool converged = false;
};

namespace detail {

/// Linearized point-to-plane rigid update: minimizes
/// Σ (n_k · (R p_k + t − q_k))² for a small rotation about the source
/// centroid. Returns false when the normal system is unusable (too few
/// constraints or a non-finite solve), in which case the caller should fall
/// back to the point-to-point update.
inline bool point_to_plane_step(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                                const std::vector<Vec3>& normals, RigidTransform& step) {
  using Vec6 = Eigen::Matrix<double, 6, 1>;
  using Mat6 = Eigen::Matrix<double, 6, 6>;
  if (src.size() < 6) return false;
  Vec3 center = Vec3::Zero();
  for (const auto& p : src) center += p;
  center /= double(src.size());

  Mat6 a = Mat6::Zero();
  Vec6 g = Vec6::Zero();
  for (std::size_t k = 0; k < src.size(); ++k) {
    const Vec3& n = normals[k];
    const Vec3 p = src[k] - center;
    const double r = n.dot(src[k] - dst[k]);
    Vec6 j;
    j << p.cross(n), n;
    a.noalias() += j * j.transpose();
    g.noalias() += j * r;
  }
  const Vec6 x = Eigen::LDLT<Mat6>(a).solve(-g);
  if (!x.allFinite()) return false;
  const Vec3 w = x.head<3>();
  const Vec3 t = x.tail<3>();
  const double angle = w.norm();
  const Mat3 rot = angle < 1e-15 ? Mat3::Identity()
                                 : Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
  // The solve rotated about `center`: T(p) = R (p − c) + c + t.
  step = RigidTransform::from_rotation_translation(rot, center + t - rot * center);
  return true;
}

}  // namespace detail

/// Iterative closest point refinement. Each iteration pairs every source
/// point with its nearest destination point within the correspondence radius,
/// then solves a rigid update: point-to-plane (destination normals) when
/// enabled and available — it settles well below the sampling resolution,
/// where nearest-point pairing between two independent samplings of the same
/// surface plateaus — otherwise least-squares point-to-point. The returned
/// transform is residual, applied after `init`. Convergence is judged on the
/// point-distance RMS in both modes.
inline IcpResult icp(const PointCloud& src, const PointCloud& dst, const RigidTransform& init,
                     const RegistrationConfig& cfg) {
  cfg.validate();
  require(!src.empty() && !dst.empty(), "icp: empty cloud");
  init.validate();
  const KdTree tree(dst.points);
  const bool use_normals = cfg.icp_point_to_plane && dst.has_normals();

  std::vector<Vec3> current = apply_transform(src.points, init);
  IcpResult result;
  result.transform = RigidTransform::identity();
  double prev_rms = std::numeric_limits<double>::infinity();

  for (int it = 0; it < cfg.icp_max_iterations; ++it) {
    result.iterations = it + 1;
    std::vector<Vec3> matched_src, matched_dst, matched_normals;
    matched_src.reserve(current.size());
    matched_dst.reserve(current.size());
    double sq_sum = 0.0;
    for (const auto& p : current) {
      const auto hit = tree.nearest(p);
      if (hit.distance > cfg.icp_max_correspondence_mm) continue;
      matched_src.push_back(p);
      matched_dst.push_back(tree.point(hit.index));
      sq_sum += hit.distance * hit.distance;
      if (use_normals &&
          (dst.normal_valid.empty() || dst.normal_valid[hit.index]))
        matched_normals.push_back(dst.normals[hit.index]);
      else if (use_normals)
        matched_normals.push_back(Vec3::Zero());  // invalid: zero contribution
    }
    if (matched_src.empty())
      throw Error("icp: no correspondences within " +
                  std::to_string(cfg.icp_max_correspondence_mm) + " mm");
    const double rms = std::sqrt(sq_sum / double(matched_src.size()));
    result.rms_history.push_back(rms);
    if (std::abs(prev_rms - rms) < cfg.icp_tolerance_mm) {
      result.converged = true;
      break;
    }
    prev_rms = rms;

    RigidTransform step;
    bool solved = false;
    if (use_normals)
      solved = detail::point_to_plane_step(matched_src, matched_dst, matched_normals, step);
    if (!solved) {
      if (matched_src.size() >= 3) {
        step = kabsch(matched_src, matched_dst);
      } else {
        // Too few pairs for a rotation fit; translate onto the matches.
        Vec3 delta = Vec3::Zero();
        for (std::size_t i = 0; i < matched_src.size(); ++i)
          delta += matched_dst[i] - matched_src[i];
        step = RigidTransform::from_rotation_translation(Mat3::Identity(),
                                                         delta / double(matched_src.size()));
      }
    }
    current = apply_transform(current, step);
    result.transform = RigidTransform{step.matrix * result.transform.matrix};
  }
  result.transform = result.transform.orthonormalized();
  return result;
}

// ---------------------------------------------------------------------------
// Composition and the full chain

/// T_final = fine · coarse, re-orthonormalized when floating-point drift
/// pushes the product off SE(3).
inline RigidTransform compose(const RigidTransform& fine, const RigidTransform& coarse) {
  fine.validate();
  coarse.validate();
  RigidTransform out{fine.matrix * coarse.matrix};
  if (out.rigidity_error() > 1e-9) out = out.orthonormalized();
  out.validate();
  return out;
}

struct AlignmentResult {
  Mesh aligned;            // full-resolution mesh moved by transform
  RigidTransform transform;  // T_final = T_icp · T_coarse
  RansacResult coarse;
  IcpResult fine;
};

/// Precomputed registration target: the reference cloud with normals, its
/// FPFH descriptors, and the shared descriptor radius. Building it once and
/// aligning many subjects against it avoids recomputing the (expensive)
/// reference descriptors per subject.
struct ReferenceTarget {
  PointCloud cloud;                   // oriented reference cloud
  BoundingBox roi;                    // face region for the fine stage
  std::vector<FpfhFeature> features;  // validity restricted to the ROI
  double fpfh_radius_mm = 0.0;        // radius the subject side must reuse
  double mean_spacing_mm = 0.0;       // reference sampling resolution
};

/// Prepares a reference cloud for repeated alignment. The descriptor radius
/// defaults to max(5 × nearest-neighbor spacing, 0.15 × bounding-box
/// diagonal): the spacing term suits dense feature-rich scans, while the
/// size term keeps descriptors discriminative on smooth surfaces whose
/// geometry only varies at the object scale. Descriptors outside the ROI are
/// marked invalid so correspondences are pinned to the feature-rich region —
/// on near-symmetric surfaces, matches on the smooth remainder carry no pose
/// information and can vote coherently for a flipped pose.
inline ReferenceTarget prepare_reference(const PointCloud& reference, const BoundingBox& roi,
                                         const RegistrationConfig& cfg) {
  cfg.validate();
  roi.validate();

  ReferenceTarget target;
  target.roi = roi;
  try {
    target.cloud = reference.has_normals() ? reference : estimate_normals(reference, cfg.normal_k);
  } catch (const Error& e) {
    throw Error(std::string("prepare_reference: normal estimation stage: ") + e.what());
  }

  {
    const KdTree tree(target.cloud.points);
    target.mean_spacing_mm = mean_nn_spacing(tree);
  }
  double radius = cfg.fpfh_radius_mm;
  if (radius <= 0.0) {
    const BoundingBox box = BoundingBox::around(target.cloud.points);
    radius = std::max(5.0 * target.mean_spacing_mm,
                      0.15 * (box.max_corner - box.min_corner).norm());
  }
  target.fpfh_radius_mm = radius;

  try {
    target.features = compute_fpfh(target.cloud, radius);
  } catch (const Error& e) {
    throw Error(std::string("prepare_reference: descriptor stage: ") + e.what());
  }
  for (std::size_t j = 0; j < target.cloud.size(); ++j)
    if (!roi.contains(target.cloud.points[j])) target.features[j].valid = false;
  return target;
}

/// Full alignment chain against a prepared target: surface sampling, normal
/// estimation, FPFH + RANSAC coarse alignment, ROI crop (registration only),
/// ICP refinement, and the composed transform applied to the original
/// uncropped mesh.
inline AlignmentResult align_subject(const Mesh& subject, const ReferenceTarget& target,
                                     const RegistrationConfig& cfg) {
  cfg.validate();
  require(target.cloud.size() == target.features.size() && target.fpfh_radius_mm > 0.0,
          "align_subject: reference target is not prepared");

  PointCloud sampled;
  try {
    sampled = sample_surface(subject, cfg.sample_points, rng::derive_seed(cfg.seed, {0x5a3eull}));
  } catch (const Error& e) {
    throw Error(std::string("align_subject: sampling stage: ") + e.what());
  }

  try {
    sampled = estimate_normals(sampled, cfg.normal_k);
  } catch (const Error& e) {
    throw Error(std::string("align_subject: normal estimation stage: ") + e.what());
  }

  RansacResult coarse;
  try {
    // The target's radius keeps histograms comparable across the two clouds.
    const auto src_feats = compute_fpfh(sampled, target.fpfh_radius_mm);
    // Two independent samplings of the same surface cannot coincide more
    // tightly than their resolution, so the inlier threshold gets a floor of
    // 1.25 × the summed mean spacings on sparse clouds.
    RegistrationConfig coarse_cfg = cfg;
    const KdTree src_tree(sampled.points);
    coarse_cfg.ransac_inlier_threshold_mm =
        std::max(cfg.ransac_inlier_threshold_mm,
                 1.25 * (mean_nn_spacing(src_tree) + target.mean_spacing_mm));
    coarse = ransac_global(sampled, target.cloud, src_feats, target.features, coarse_cfg);
  } catch (const Error& e) {
    throw Error(std::string("align_subject: coarse registration stage: ") + e.what());
  }

  IcpResult fine;
  try {
    const PointCloud moved = apply_transform(sampled, coarse.transform);
    const PointCloud src_roi = crop_roi(moved, target.roi);
    const PointCloud dst_roi = crop_roi(target.cloud, target.roi);
    fine = icp(src_roi, dst_roi, RigidTransform::identity(), cfg);
  } catch (const Error& e) {
    throw Error(std::string("align_subject: fine registration stage: ") + e.what());
  }

  AlignmentResult result;
  result.transform = compose(fine.transform, coarse.transform);
  result.aligned = apply_transform(subject, result.transform);
  result.coarse = coarse;
  result.fine = fine;
  return result;
}

/// Single-shot convenience overload: prepares the reference and aligns.
inline AlignmentResult align_subject(const Mesh& subject, const PointCloud& reference,
                                     const BoundingBox& roi, const RegistrationConfig& cfg) {
  return align_subject(subject, prepare_reference(reference, roi, cfg), cfg);
}

}  // namespace palnet
