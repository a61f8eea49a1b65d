#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "palnet/geometry.hpp"
#include "palnet/kdtree.hpp"
#include "palnet/landmarks.hpp"
#include "palnet/schema.hpp"

// Post-processing (surface re-projection of raw predictions) and the full
// evaluation suite: per-landmark localization errors, the pairwise
// distance-error matrix, clinical linear distances and angles with relative
// errors, Bland–Altman agreement statistics, landmark-exclusion re-analysis,
// and cross-fold aggregation.

namespace palnet {

// ---------------------------------------------------------------------------
// Surface re-projection

/// Snaps every predicted landmark to its nearest mesh vertex.
inline LandmarkSet project_nearest(const LandmarkSet& pred, const KdTree& tree) {
  return project_to_surface(pred, tree);
}
inline LandmarkSet project_nearest(const LandmarkSet& pred, const PointCloud& cloud) {
  return project_to_surface(pred, cloud);
}

/// Replaces every predicted landmark with the centroid of its K nearest mesh
/// vertices; robust against locally corrupted or missing geometry.
inline LandmarkSet project_centroid(const LandmarkSet& pred, const KdTree& tree, std::size_t k) {
  require(k >= 1, "project_centroid: K must be at least 1");
  require(k <= tree.size(), "project_centroid: K exceeds cloud size");
  LandmarkSet out = pred;
  for (auto& c : out.coords) {
    Vec3 sum = Vec3::Zero();
    for (const auto& hit : tree.knn(c, k)) sum += tree.point(hit.index);
    c = sum / static_cast<double>(k);
  }
  return out;
}
inline LandmarkSet project_centroid(const LandmarkSet& pred, const PointCloud& cloud,
                                    std::size_t k) {
  return project_centroid(pred, KdTree(cloud.points), k);
}

// ---------------------------------------------------------------------------
// Measurement definitions

struct MeasurementSpec {
  struct DistancePair {
    std::string label;
    std::string group;  // table section, e.g. "frontal", "horizontal"
    std::string a, b;
  };
  struct AngleTriple {
    std::string label;
    std::string a, vertex, b;
  };
  std::vector<DistancePair> distances;
  std::vector<AngleTriple> angles;
  std::map<std::string, std::string> region_of;  // landmark name -> midline/left/right

  /// Drops measurement rows and region entries that reference landmarks
  /// outside `kept`.
  MeasurementSpec restricted_to(const std::vector<std::string>& kept) const {
    const std::set<std::string> keep(kept.begin(), kept.end());
    MeasurementSpec out;
    for (const auto& d : distances)
      if (keep.count(d.a) && keep.count(d.b)) out.distances.push_back(d);
    for (const auto& a : angles)
      if (keep.count(a.a) && keep.count(a.vertex) && keep.count(a.b)) out.angles.push_back(a);
    for (const auto& [name, region] : region_of)
      if (keep.count(name)) out.region_of[name] = region;
    return out;
  }
};

/// The shipped clinical measurement set for the default 50-landmark schema:
/// four frontal and six transverse distances, five sagittal distances per
/// side, and nine anatomical angles, plus midline/left/right region groups.
inline MeasurementSpec default_measurement_spec() {
  MeasurementSpec spec;
  auto pair = [&](const std::string& group, const std::string& a, const std::string& b) {
    spec.distances.push_back({a + "-" + b, group, a, b});
  };
  pair("frontal", "Tr", "N");
  pair("frontal", "N", "Pg");
  pair("frontal", "N", "Sn");
  pair("frontal", "Sn", "Pg");
  pair("horizontal", "ExR", "ExL");
  pair("horizontal", "ZyR", "ZyL");
  pair("horizontal", "TR", "TL");
  pair("horizontal", "ChR", "ChL");
  pair("horizontal", "CphR", "CphL");
  pair("horizontal", "GoR", "GoL");
  pair("sagittal_right", "TR", "N");
  pair("sagittal_right", "TR", "Sn");
  pair("sagittal_right", "TR", "Pg");
  pair("sagittal_right", "Pg", "GoR");
  pair("sagittal_right", "TR", "GoR");
  pair("sagittal_left", "TL", "N");
  pair("sagittal_left", "TL", "Sn");
  pair("sagittal_left", "TL", "Pg");
  pair("sagittal_left", "Pg", "GoL");
  pair("sagittal_left", "TL", "GoL");

  auto angle = [&](const std::string& a, const std::string& v, const std::string& b) {
    spec.angles.push_back({a + "-" + v + "-" + b, a, v, b});
  };
  angle("TR", "N", "TL");
  angle("TR", "Prn", "TL");
  angle("TR", "Pg", "TL");
  angle("GoR", "Pg", "GoL");
  angle("N", "Sn", "Pg");
  angle("N", "Prn", "Pg");
  angle("Sn", "N", "Prn");
  angle("TR", "GoR", "Pg");
  angle("TL", "GoL", "Pg");

  for (const auto& name : default_landmark_names()) spec.region_of[name] = landmark_region(name);
  return spec;
}

// ---------------------------------------------------------------------------
// Report types

struct PointwiseStats {
  std::vector<std::string> names;
  std::vector<double> mean_mm;  // per landmark, over subjects
  std::vector<double> std_mm;
  double overall_mean = 0.0;  // over all (subject, landmark) errors
  double overall_std = 0.0;
};

struct DistanceErrorMatrix {
  std::vector<std::string> names;
  Eigen::MatrixXd matrix;  // symmetric, zero diagonal
  double mean_off_diagonal = 0.0;
};

struct LinearDistanceRow {
  std::string label;
  std::string group;
  double error_mm = 0.0;     // mean |predicted - ground-truth| over subjects
  double gt_mean_mm = 0.0;   // mean ground-truth distance
  double ratio_percent = 0.0;
};

struct AngleRow {
  std::string label;
  double error_deg = 0.0;
  double gt_mean_deg = 0.0;
  double ratio_percent = 0.0;
};

struct BlandAltmanStats {
  std::string group;
  double mean_diff = 0.0;  // pooled over x/y/z coordinate differences
  double std_diff = 0.0;
  double lower_limit = 0.0;  // mean - 1.96·std
  double upper_limit = 0.0;  // mean + 1.96·std
  std::array<double, 3> axis_mean{{0, 0, 0}};
  std::array<double, 3> axis_std{{0, 0, 0}};
  std::vector<std::array<double, 2>> scatter;  // (mean value, difference), pooled
};

struct EvalReport {
  PointwiseStats pointwise;
  DistanceErrorMatrix distance_matrix;
  std::vector<LinearDistanceRow> distances;
  double distance_table_mean_mm = 0.0;
  double distance_table_mean_ratio = 0.0;
  std::vector<AngleRow> angles;
  double angle_table_mean_deg = 0.0;
  double angle_table_mean_ratio = 0.0;
  std::vector<BlandAltmanStats> bland_altman;
  int fold_count = 1;
};

namespace detail {

inline void check_matching_schemas(const std::vector<LandmarkSet>& pred,
                                   const std::vector<LandmarkSet>& gt) {
  require(pred.size() == gt.size() && !pred.empty(),
          "evaluation: need equal, non-zero prediction and ground-truth subject counts");
  for (std::size_t s = 0; s < pred.size(); ++s) {
    require(pred[s].names == pred.front().names,
            "evaluation: prediction schema differs at subject " + std::to_string(s));
    require(gt[s].names == pred.front().names,
            "evaluation: ground-truth schema differs at subject " + std::to_string(s));
  }
}

inline std::pair<double, double> mean_and_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= double(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= double(v.size());
  return {mean, std::sqrt(var)};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Metrics

/// Euclidean localization error per landmark: mean ± std over subjects, plus
/// the pooled overall statistics. Standard deviations are population stds.
inline PointwiseStats pointwise_errors(const std::vector<LandmarkSet>& pred,
                                       const std::vector<LandmarkSet>& gt) {
  detail::check_matching_schemas(pred, gt);
  const std::size_t n = pred.front().size();
  PointwiseStats stats;
  stats.names = pred.front().names;
  stats.mean_mm.resize(n);
  stats.std_mm.resize(n);
  std::vector<double> pooled;
  pooled.reserve(pred.size() * n);
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> errs;
    errs.reserve(pred.size());
    for (std::size_t s = 0; s < pred.size(); ++s)
      errs.push_back((pred[s].coords[k] - gt[s].coords[k]).norm());
    const auto [mean, sd] = detail::mean_and_std(errs);
    stats.mean_mm[k] = mean;
    stats.std_mm[k] = sd;
    pooled.insert(pooled.end(), errs.begin(), errs.end());
  }
  const auto [mean, sd] = detail::mean_and_std(pooled);
  stats.overall_mean = mean;
  stats.overall_std = sd;
  return stats;
}

/// Entry (i,j) = mean over subjects of |‖l̂ᵢ−l̂ⱼ‖ − ‖lᵢ−lⱼ‖|. Symmetric with a
/// zero diagonal; the reported mean covers off-diagonal entries only.
inline DistanceErrorMatrix distance_error_matrix(const std::vector<LandmarkSet>& pred,
                                                 const std::vector<LandmarkSet>& gt) {
  detail::check_matching_schemas(pred, gt);
  const std::size_t n = pred.front().size();
  DistanceErrorMatrix out;
  out.names = pred.front().names;
  out.matrix = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t s = 0; s < pred.size(); ++s) {
        const double dp = (pred[s].coords[i] - pred[s].coords[j]).norm();
        const double dg = (gt[s].coords[i] - gt[s].coords[j]).norm();
        acc += std::abs(dp - dg);
      }
      const double mean = acc / double(pred.size());
      out.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = mean;
      out.matrix(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = mean;
    }
  }
  if (n > 1)
    out.mean_off_diagonal = out.matrix.sum() / double(n * (n - 1));
  return out;
}

/// Mean absolute error of each named anatomical distance, with the error
/// normalized by the mean ground-truth distance (percent).
inline std::vector<LinearDistanceRow> linear_distance_report(const std::vector<LandmarkSet>& pred,
                                                             const std::vector<LandmarkSet>& gt,
                                                             const MeasurementSpec& spec) {
  detail::check_matching_schemas(pred, gt);
  std::vector<LinearDistanceRow> rows;
  for (const auto& d : spec.distances) {
    const std::size_t ia = pred.front().index_of(d.a);
    const std::size_t ib = pred.front().index_of(d.b);
    double err = 0.0, gt_mean = 0.0;
    for (std::size_t s = 0; s < pred.size(); ++s) {
      const double dp = (pred[s].coords[ia] - pred[s].coords[ib]).norm();
      const double dg = (gt[s].coords[ia] - gt[s].coords[ib]).norm();
      err += std::abs(dp - dg);
      gt_mean += dg;
    }
    err /= double(pred.size());
    gt_mean /= double(pred.size());
    require(gt_mean > 0.0, "linear_distance_report: zero mean ground-truth distance for " + d.label);
    rows.push_back({d.label, d.group, err, gt_mean, 100.0 * err / gt_mean});
  }
  return rows;
}

/// Angle (degrees) at `vertex` spanned by rays to `a` and `b`; the dot
/// product is clamped to [-1,1] before arccos. Coincident landmarks in a
/// triple are an error; collinear triples (180°) are fine.
inline double landmark_angle_deg(const Vec3& a, const Vec3& vertex, const Vec3& b) {
  const Vec3 u = a - vertex;
  const Vec3 v = b - vertex;
  const double nu = u.norm(), nv = v.norm();
  if (nu <= 0.0 || nv <= 0.0)
    throw Error("landmark_angle_deg: degenerate angle (coincident landmarks)");
  const double d = std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
  return rad_to_deg(std::acos(d));
}

inline std::vector<AngleRow> angle_report(const std::vector<LandmarkSet>& pred,
                                          const std::vector<LandmarkSet>& gt,
                                          const MeasurementSpec& spec) {
  detail::check_matching_schemas(pred, gt);
  std::vector<AngleRow> rows;
  for (const auto& t : spec.angles) {
    const std::size_t ia = pred.front().index_of(t.a);
    const std::size_t iv = pred.front().index_of(t.vertex);
    const std::size_t ib = pred.front().index_of(t.b);
    double err = 0.0, gt_mean = 0.0;
    for (std::size_t s = 0; s < pred.size(); ++s) {
      const double ap = landmark_angle_deg(pred[s].coords[ia], pred[s].coords[iv], pred[s].coords[ib]);
      const double ag = landmark_angle_deg(gt[s].coords[ia], gt[s].coords[iv], gt[s].coords[ib]);
      err += std::abs(ap - ag);
      gt_mean += ag;
    }
    err /= double(pred.size());
    gt_mean /= double(pred.size());
    require(gt_mean > 0.0, "angle_report: zero mean ground-truth angle for " + t.label);
    rows.push_back({t.label, err, gt_mean, 100.0 * err / gt_mean});
  }
  return rows;
}

/// Coordinate-difference agreement per region group: differences pred−gt are
/// pooled over x/y/z within each group; limits are mean ± 1.96·std. Scatter
/// rows pair each difference with the mean of the two measurements.
inline std::vector<BlandAltmanStats> bland_altman(const std::vector<LandmarkSet>& pred,
                                                  const std::vector<LandmarkSet>& gt,
                                                  const std::map<std::string, std::string>& region_of) {
  detail::check_matching_schemas(pred, gt);
  for (const auto& name : pred.front().names)
    require(region_of.count(name) == 1, "bland_altman: no region group for landmark " + name);

  std::vector<std::string> groups;
  for (const auto& [name, region] : region_of)
    if (std::find(groups.begin(), groups.end(), region) == groups.end()) groups.push_back(region);
  std::sort(groups.begin(), groups.end());

  std::vector<BlandAltmanStats> out;
  for (const auto& group : groups) {
    BlandAltmanStats st;
    st.group = group;
    std::vector<double> diffs;
    std::array<std::vector<double>, 3> axis_diffs;
    for (std::size_t k = 0; k < pred.front().size(); ++k) {
      if (region_of.at(pred.front().names[k]) != group) continue;
      for (std::size_t s = 0; s < pred.size(); ++s) {
        for (int c = 0; c < 3; ++c) {
          const double p = pred[s].coords[k][c];
          const double g = gt[s].coords[k][c];
          diffs.push_back(p - g);
          axis_diffs[static_cast<std::size_t>(c)].push_back(p - g);
          st.scatter.push_back({(p + g) / 2.0, p - g});
        }
      }
    }
    require(!diffs.empty(), "bland_altman: empty region group " + group);
    const auto [mean, sd] = detail::mean_and_std(diffs);
    st.mean_diff = mean;
    st.std_diff = sd;
    st.lower_limit = mean - 1.96 * sd;
    st.upper_limit = mean + 1.96 * sd;
    for (std::size_t c = 0; c < 3; ++c) {
      const auto [am, as] = detail::mean_and_std(axis_diffs[c]);
      st.axis_mean[c] = am;
      st.axis_std[c] = as;
    }
    out.push_back(std::move(st));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full report, exclusion, aggregation

inline EvalReport evaluate(const std::vector<LandmarkSet>& pred, const std::vector<LandmarkSet>& gt,
                           const MeasurementSpec& spec) {
  EvalReport r;
  r.pointwise = pointwise_errors(pred, gt);
  r.distance_matrix = distance_error_matrix(pred, gt);
  r.distances = linear_distance_report(pred, gt, spec);
  r.angles = angle_report(pred, gt, spec);
  r.bland_altman = bland_altman(pred, gt, spec.region_of);
  for (const auto& row : r.distances) {
    r.distance_table_mean_mm += row.error_mm / double(r.distances.size());
    r.distance_table_mean_ratio += row.ratio_percent / double(r.distances.size());
  }
  for (const auto& row : r.angles) {
    r.angle_table_mean_deg += row.error_deg / double(r.angles.size());
    r.angle_table_mean_ratio += row.ratio_percent / double(r.angles.size());
  }
  return r;
}

/// Removes the named landmarks from a set (order of the rest preserved).
inline LandmarkSet drop_landmarks(const LandmarkSet& lm, const std::vector<std::string>& drop) {
  const std::set<std::string> dropped(drop.begin(), drop.end());
  for (const auto& d : dropped)
    require(lm.has(d), "drop_landmarks: landmark not in schema: " + d);
  LandmarkSet out;
  for (std::size_t i = 0; i < lm.size(); ++i) {
    if (dropped.count(lm.names[i])) continue;
    out.names.push_back(lm.names[i]);
    out.coords.push_back(lm.coords[i]);
  }
  require(!out.empty(), "drop_landmarks: cannot drop every landmark");
  return out;
}

/// Recomputes the full report over the remaining schema after dropping the
/// named landmarks (measurement rows touching them are removed too).
inline EvalReport evaluate_excluding(const std::vector<LandmarkSet>& pred,
                                     const std::vector<LandmarkSet>& gt,
                                     const MeasurementSpec& spec,
                                     const std::vector<std::string>& drop) {
  if (drop.empty()) return evaluate(pred, gt, spec);
  std::vector<LandmarkSet> p2, g2;
  p2.reserve(pred.size());
  g2.reserve(gt.size());
  for (const auto& s : pred) p2.push_back(drop_landmarks(s, drop));
  for (const auto& s : gt) g2.push_back(drop_landmarks(s, drop));
  return evaluate(p2, g2, spec.restricted_to(p2.front().names));
}

/// Cross-fold aggregation: per-landmark mean = mean of fold means, reported
/// std = mean of fold stds (not pooled); matrices and tables averaged
/// entrywise; Bland–Altman scatter concatenated for plotting.
inline EvalReport aggregate_folds(const std::vector<EvalReport>& folds) {
  require(!folds.empty(), "aggregate_folds: no reports");
  const EvalReport& first = folds.front();
  for (const auto& f : folds) {
    require(f.pointwise.names == first.pointwise.names, "aggregate_folds: schema mismatch");
    require(f.distances.size() == first.distances.size() && f.angles.size() == first.angles.size(),
            "aggregate_folds: measurement table mismatch");
    require(f.bland_altman.size() == first.bland_altman.size(),
            "aggregate_folds: region group mismatch");
  }
  const double inv = 1.0 / double(folds.size());
  EvalReport agg = first;
  agg.fold_count = static_cast<int>(folds.size());

  auto zero = [](auto& x) { x = 0.0; };
  zero(agg.pointwise.overall_mean);
  zero(agg.pointwise.overall_std);
  std::fill(agg.pointwise.mean_mm.begin(), agg.pointwise.mean_mm.end(), 0.0);
  std::fill(agg.pointwise.std_mm.begin(), agg.pointwise.std_mm.end(), 0.0);
  agg.distance_matrix.matrix.setZero();
  agg.distance_matrix.mean_off_diagonal = 0.0;
  for (auto& row : agg.distances) row = LinearDistanceRow{row.label, row.group, 0.0, 0.0, 0.0};
  for (auto& row : agg.angles) row = AngleRow{row.label, 0.0, 0.0, 0.0};
  for (auto& ba : agg.bland_altman) {
    ba.mean_diff = ba.std_diff = ba.lower_limit = ba.upper_limit = 0.0;
    ba.axis_mean = {{0, 0, 0}};
    ba.axis_std = {{0, 0, 0}};
    ba.scatter.clear();
  }
  agg.distance_table_mean_mm = agg.distance_table_mean_ratio = 0.0;
  agg.angle_table_mean_deg = agg.angle_table_mean_ratio = 0.0;

  for (const auto& f : folds) {
    for (std::size_t k = 0; k < agg.pointwise.names.size(); ++k) {
      agg.pointwise.mean_mm[k] += inv * f.pointwise.mean_mm[k];
      agg.pointwise.std_mm[k] += inv * f.pointwise.std_mm[k];
    }
    agg.pointwise.overall_mean += inv * f.pointwise.overall_mean;
    agg.pointwise.overall_std += inv * f.pointwise.overall_std;
    agg.distance_matrix.matrix += inv * f.distance_matrix.matrix;
    agg.distance_matrix.mean_off_diagonal += inv * f.distance_matrix.mean_off_diagonal;
    for (std::size_t i = 0; i < agg.distances.size(); ++i) {
      require(f.distances[i].label == agg.distances[i].label,
              "aggregate_folds: distance row order mismatch");
      agg.distances[i].error_mm += inv * f.distances[i].error_mm;
      agg.distances[i].gt_mean_mm += inv * f.distances[i].gt_mean_mm;
      agg.distances[i].ratio_percent += inv * f.distances[i].ratio_percent;
    }
    for (std::size_t i = 0; i < agg.angles.size(); ++i) {
      require(f.angles[i].label == agg.angles[i].label,
              "aggregate_folds: angle row order mismatch");
      agg.angles[i].error_deg += inv * f.angles[i].error_deg;
      agg.angles[i].gt_mean_deg += inv * f.angles[i].gt_mean_deg;
      agg.angles[i].ratio_percent += inv * f.angles[i].ratio_percent;
    }
    for (std::size_t g = 0; g < agg.bland_altman.size(); ++g) {
      require(f.bland_altman[g].group == agg.bland_altman[g].group,
              "aggregate_folds: region group order mismatch");
      auto& a = agg.bland_altman[g];
      const auto& b = f.bland_altman[g];
      a.mean_diff += inv * b.mean_diff;
      a.std_diff += inv * b.std_diff;
      a.lower_limit += inv * b.lower_limit;
      a.upper_limit += inv * b.upper_limit;
      for (std::size_t c = 0; c < 3; ++c) {
        a.axis_mean[c] += inv * b.axis_mean[c];
        a.axis_std[c] += inv * b.axis_std[c];
      }
      a.scatter.insert(a.scatter.end(), b.scatter.begin(), b.scatter.end());
    }
    agg.distance_table_mean_mm += inv * f.distance_table_mean_mm;
    agg.distance_table_mean_ratio += inv * f.distance_table_mean_ratio;
    agg.angle_table_mean_deg += inv * f.angle_table_mean_deg;
    agg.angle_table_mean_ratio += inv * f.angle_table_mean_ratio;
  }
  return agg;
}

// ---------------------------------------------------------------------------
// Emission: JSON, CSV tables, SVG plots

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json pointwise = nlohmann::json::array();
  for (std::size_t k = 0; k < r.pointwise.names.size(); ++k)
    pointwise.push_back({{"name", r.pointwise.names[k]},
                         {"mean_mm", r.pointwise.mean_mm[k]},
                         {"std_mm", r.pointwise.std_mm[k]}});
  nlohmann::json matrix = nlohmann::json::array();
  for (Eigen::Index i = 0; i < r.distance_matrix.matrix.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < r.distance_matrix.matrix.cols(); ++j)
      row.push_back(r.distance_matrix.matrix(i, j));
    matrix.push_back(row);
  }
  nlohmann::json distances = nlohmann::json::array();
  for (const auto& d : r.distances)
    distances.push_back({{"label", d.label},
                         {"group", d.group},
                         {"error_mm", d.error_mm},
                         {"gt_mean_mm", d.gt_mean_mm},
                         {"ratio_percent", d.ratio_percent}});
  nlohmann::json angles = nlohmann::json::array();
  for (const auto& a : r.angles)
    angles.push_back({{"label", a.label},
                      {"error_deg", a.error_deg},
                      {"gt_mean_deg", a.gt_mean_deg},
                      {"ratio_percent", a.ratio_percent}});
  nlohmann::json ba = nlohmann::json::array();
  for (const auto& g : r.bland_altman)
    ba.push_back({{"group", g.group},
                  {"mean_diff", g.mean_diff},
                  {"std_diff", g.std_diff},
                  {"lower_limit", g.lower_limit},
                  {"upper_limit", g.upper_limit},
                  {"axis_mean", g.axis_mean},
                  {"axis_std", g.axis_std}});
  return {{"pointwise",
           {{"per_landmark", pointwise},
            {"overall_mean_mm", r.pointwise.overall_mean},
            {"overall_std_mm", r.pointwise.overall_std}}},
          {"distance_matrix",
           {{"names", r.distance_matrix.names},
            {"matrix", matrix},
            {"mean_off_diagonal_mm", r.distance_matrix.mean_off_diagonal}}},
          {"linear_distances",
           {{"rows", distances},
            {"mean_error_mm", r.distance_table_mean_mm},
            {"mean_ratio_percent", r.distance_table_mean_ratio}}},
          {"angles",
           {{"rows", angles},
            {"mean_error_deg", r.angle_table_mean_deg},
            {"mean_ratio_percent", r.angle_table_mean_ratio}}},
          {"bland_altman", ba},
          {"fold_count", r.fold_count}};
}

inline void save_report_json(const EvalReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write file: " + path);
  out << report_to_json(r).dump(2) << "\n";
}

inline void save_pointwise_csv(const EvalReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write file: " + path);
  out << "name,mean_mm,std_mm\n";
  out.precision(17);
  for (std::size_t k = 0; k < r.pointwise.names.size(); ++k)
    out << r.pointwise.names[k] << "," << r.pointwise.mean_mm[k] << "," << r.pointwise.std_mm[k]
        << "\n";
  out << "Overall," << r.pointwise.overall_mean << "," << r.pointwise.overall_std << "\n";
}

inline void save_distance_matrix_csv(const EvalReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write file: " + path);
  out << "name";
  for (const auto& n : r.distance_matrix.names) out << "," << n;
  out << "\n";
  out.precision(17);
  for (Eigen::Index i = 0; i < r.distance_matrix.matrix.rows(); ++i) {
    out << r.distance_matrix.names[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < r.distance_matrix.matrix.cols(); ++j)
      out << "," << r.distance_matrix.matrix(i, j);
    out << "\n";
  }
}

inline void save_measurement_csv(const EvalReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write file: " + path);
  out.precision(17);
  out << "kind,label,group,error,gt_mean,ratio_percent\n";
  for (const auto& d : r.distances)
    out << "distance," << d.label << "," << d.group << "," << d.error_mm << "," << d.gt_mean_mm
        << "," << d.ratio_percent << "\n";
  for (const auto& a : r.angles)
    out << "angle," << a.label << ",," << a.error_deg << "," << a.gt_mean_deg << ","
        << a.ratio_percent << "\n";
}

inline void save_bland_altman_csv(const EvalReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write file: " + path);
  out.precision(17);
  out << "group,mean_value,difference\n";
  for (const auto& g : r.bland_altman)
    for (const auto& [mean, diff] : g.scatter) out << g.group << "," << mean << "," << diff << "\n";
}

/// Distance-error heatmap: white (0) to dark red (matrix maximum).
inline void save_distance_matrix_svg(const EvalReport& r, const std::string& path) {
  const Eigen::Index n = r.distance_matrix.matrix.rows();
  require(n > 0, "save_distance_matrix_svg: empty matrix");
  const double cell = 12.0, margin = 60.0;
  const double size = margin + cell * double(n) + 10.0;
  const double maxv = std::max(r.distance_matrix.matrix.maxCoeff(), 1e-12);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write file: " + path);
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << size << "' height='" << size
      << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double t = r.distance_matrix.matrix(i, j) / maxv;
      const int red = 255;
      const int gb = static_cast<int>(std::lround(255.0 * (1.0 - t)));
      out << "<rect x='" << margin + cell * double(j) << "' y='" << margin + cell * double(i)
          << "' width='" << cell << "' height='" << cell << "' fill='rgb(" << red << "," << gb
          << "," << gb << ")'/>\n";
    }
    out << "<text x='" << margin - 4.0 << "' y='" << margin + cell * double(i) + cell * 0.75
        << "' font-size='7' text-anchor='end'>" << r.distance_matrix.names[static_cast<std::size_t>(i)]
        << "</text>\n";
    out << "<text x='" << margin + cell * double(i) + cell * 0.5 << "' y='" << margin - 4.0
        << "' font-size='7' text-anchor='start' transform='rotate(-60 "
        << margin + cell * double(i) + cell * 0.5 << " " << margin - 4.0 << ")'>"
        << r.distance_matrix.names[static_cast<std::size_t>(i)] << "</text>\n";
  }
  out << "</svg>\n";
}

/// One agreement panel per region group: differences vs means with the mean
/// line and the ±1.96·std limits.
inline void save_bland_altman_svg(const EvalReport& r, const std::string& path) {
  require(!r.bland_altman.empty(), "save_bland_altman_svg: no groups");
  const double w = 360.0, h = 240.0, margin = 40.0;
  const double total_w = w * double(r.bland_altman.size());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write file: " + path);
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << total_w << "' height='" << h
      << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  for (std::size_t g = 0; g < r.bland_altman.size(); ++g) {
    const auto& ba = r.bland_altman[g];
    const double x0 = w * double(g) + margin, x1 = w * double(g + 1) - 10.0;
    const double y0 = margin, y1 = h - margin;
    double mn_x = 0, mx_x = 1, mn_y = -1, mx_y = 1;
    if (!ba.scatter.empty()) {
      mn_x = mx_x = ba.scatter.front()[0];
      mn_y = mx_y = ba.scatter.front()[1];
      for (const auto& p : ba.scatter) {
        mn_x = std::min(mn_x, p[0]);
        mx_x = std::max(mx_x, p[0]);
        mn_y = std::min(mn_y, p[1]);
        mx_y = std::max(mx_y, p[1]);
      }
      mn_y = std::min(mn_y, ba.lower_limit);
      mx_y = std::max(mx_y, ba.upper_limit);
    }
    if (mx_x <= mn_x) mx_x = mn_x + 1.0;
    if (mx_y <= mn_y) mx_y = mn_y + 1.0;
    auto sx = [&](double v) { return x0 + (v - mn_x) / (mx_x - mn_x) * (x1 - x0); };
    auto sy = [&](double v) { return y1 - (v - mn_y) / (mx_y - mn_y) * (y1 - y0); };
    for (const auto& p : ba.scatter)
      out << "<circle cx='" << sx(p[0]) << "' cy='" << sy(p[1])
          << "' r='1.2' fill='steelblue' fill-opacity='0.4'/>\n";
    for (const double level : {ba.mean_diff, ba.lower_limit, ba.upper_limit})
      out << "<line x1='" << x0 << "' y1='" << sy(level) << "' x2='" << x1 << "' y2='"
          << sy(level) << "' stroke='" << (level == ba.mean_diff ? "gray" : "crimson")
          << "' stroke-dasharray='4,3'/>\n";
    out << "<text x='" << (x0 + x1) / 2.0 << "' y='" << margin - 12.0
        << "' font-size='12' text-anchor='middle'>" << ba.group << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace palnet
