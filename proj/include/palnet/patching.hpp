#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "palnet/geometry.hpp"
#include "palnet/kdtree.hpp"
#include "palnet/landmarks.hpp"
#include "palnet/rng.hpp"

// Network input assembly: per-landmark local point patches extracted from an
// aligned cloud and deterministically ordered by distance to a shared origin.

namespace palnet {

enum class PatchStrategy { kNearestCount, kRadius };
enum class PatchOrdering { kDistanceToOrigin, kShuffled };

inline std::string to_string(PatchStrategy s) {
  return s == PatchStrategy::kNearestCount ? "knn" : "radius";
}
inline std::string to_string(PatchOrdering o) {
  return o == PatchOrdering::kDistanceToOrigin ? "distance_to_origin" : "shuffled";
}

inline PatchStrategy patch_strategy_from_string(const std::string& s) {
  if (s == "knn") return PatchStrategy::kNearestCount;
  if (s == "radius") return PatchStrategy::kRadius;
  throw Error("unknown patch strategy: " + s);
}
inline PatchOrdering patch_ordering_from_string(const std::string& s) {
  if (s == "distance_to_origin") return PatchOrdering::kDistanceToOrigin;
  if (s == "shuffled") return PatchOrdering::kShuffled;
  throw Error("unknown patch ordering: " + s);
}

struct PatchConfig {
  PatchStrategy strategy = PatchStrategy::kNearestCount;
  std::size_t points_per_patch = 1000;  // K
  double radius_mm = 15.0;              // D; radius strategy only
  Vec3 origin = Vec3::Zero();
  PatchOrdering ordering = PatchOrdering::kDistanceToOrigin;
  std::uint64_t seed = 0;

  void validate() const {
    require(points_per_patch > 0, "PatchConfig: points_per_patch must be positive");
    if (strategy == PatchStrategy::kRadius)
      require(radius_mm > 0.0, "PatchConfig: radius_mm must be positive");
  }
};

/// Stacked patches: subjects × landmarks × points × 3, row-major with the
/// coordinate axis fastest.
template <typename Real>
struct PatchTensor {
  std::size_t subjects = 0;   // m
  std::size_t landmarks = 0;  // n
  std::size_t points = 0;     // K
  std::vector<Real> data;
  std::vector<std::string> landmark_names;
  PatchConfig config;

  std::size_t offset(std::size_t s, std::size_t l, std::size_t k, std::size_t c) const {
    return ((s * landmarks + l) * points + k) * 3 + c;
  }
  Real& at(std::size_t s, std::size_t l, std::size_t k, std::size_t c) {
    return data[offset(s, l, k, c)];
  }
  Real at(std::size_t s, std::size_t l, std::size_t k, std::size_t c) const {
    return data[offset(s, l, k, c)];
  }

  void validate() const {
    require(data.size() == subjects * landmarks * points * 3, "PatchTensor: data size mismatch");
    require(landmark_names.empty() || landmark_names.size() == landmarks,
            "PatchTensor: landmark name count mismatch");
    for (const Real v : data)
      require(std::isfinite(static_cast<double>(v)), "PatchTensor: non-finite entry");
  }
};

/// The K nearest cloud vertices to `center`, nearest first; exact ties keep
/// the lower vertex index first.
inline std::vector<Vec3> extract_knn_patch(const KdTree& tree, const Vec3& center, std::size_t k) {
  if (k > tree.size())
    throw Error("extract_knn_patch: requested " + std::to_string(k) + " points from a cloud of " +
                std::to_string(tree.size()));
  std::vector<Vec3> out;
  out.reserve(k);
  for (const auto& hit : tree.knn(center, k)) out.push_back(tree.point(hit.index));
  return out;
}

/// All vertices within `radius_mm` of `center`, uniformly resampled to
/// exactly `k` rows. More hits than k: k distinct rows, chosen without
/// replacement. Fewer hits than k: every hit kept once, then upsampled with
/// replacement. Exactly k hits: returned as-is with no randomness consumed.
inline std::vector<Vec3> extract_radius_patch(const KdTree& tree, const Vec3& center,
                                              double radius_mm, std::size_t k,
                                              rng::Engine& engine) {
  require(radius_mm > 0.0, "extract_radius_patch: radius must be positive");
  const auto hits = tree.radius(center, radius_mm);
  if (hits.empty())
    throw Error("extract_radius_patch: no points within " + std::to_string(radius_mm) +
                " mm of patch center");
  std::vector<Vec3> out;
  out.reserve(k);
  if (hits.size() == k) {
    for (const auto& h : hits) out.push_back(tree.point(h.index));
  } else if (hits.size() > k) {
    const auto pick = rng::sample_without_replacement(engine, hits.size(), k);
    for (const std::size_t idx : pick) out.push_back(tree.point(hits[idx].index));
  } else {
    for (const auto& h : hits) out.push_back(tree.point(h.index));
    while (out.size() < k) {
      const std::size_t idx = rng::uniform_below(engine, hits.size());
      out.push_back(tree.point(hits[idx].index));
    }
  }
  return out;
}

/// Stable sort of patch rows by Euclidean distance to `origin`; equal
/// distances keep their input order.
inline std::vector<Vec3> order_patch(const std::vector<Vec3>& patch, const Vec3& origin) {
  std::vector<std::size_t> idx(patch.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<double> dist(patch.size());
  for (std::size_t i = 0; i < patch.size(); ++i) dist[i] = (patch[i] - origin).norm();
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  std::vector<Vec3> out(patch.size());
  for (std::size_t i = 0; i < patch.size(); ++i) out[i] = patch[idx[i]];
  return out;
}

/// Extracts, orders, and stacks one patch per (subject, landmark) pair.
/// Patch centers come from each subject's fitted landmark estimates. Failures
/// are rethrown with the subject index and landmark name attached.
template <typename Real = float>
PatchTensor<Real> build_patch_tensor(const std::vector<PointCloud>& clouds,
                                     const std::vector<LandmarkSet>& centers,
                                     const PatchConfig& config) {
  config.validate();
  require(clouds.size() == centers.size(), "build_patch_tensor: clouds/centers count mismatch");
  require(!clouds.empty(), "build_patch_tensor: no subjects");
  const std::size_t n_landmarks = centers.front().size();
  for (const auto& c : centers)
    require(c.size() == n_landmarks, "build_patch_tensor: landmark count differs across subjects");

  PatchTensor<Real> tensor;
  tensor.subjects = clouds.size();
  tensor.landmarks = n_landmarks;
  tensor.points = config.points_per_patch;
  tensor.landmark_names = centers.front().names;
  tensor.config = config;
  tensor.data.assign(tensor.subjects * tensor.landmarks * tensor.points * 3, Real(0));

  for (std::size_t s = 0; s < clouds.size(); ++s) {
    const KdTree tree(clouds[s].points);
    for (std::size_t l = 0; l < n_landmarks; ++l) {
      std::vector<Vec3> patch;
      try {
        if (config.strategy == PatchStrategy::kNearestCount) {
          patch = extract_knn_patch(tree, centers[s].coords[l], config.points_per_patch);
        } else {
          auto engine = rng::make_engine(config.seed, {0x7e5a41ull, s, l});
          patch = extract_radius_patch(tree, centers[s].coords[l], config.radius_mm,
                                       config.points_per_patch, engine);
        }
      } catch (const Error& e) {
        throw Error("patch extraction failed for subject " + std::to_string(s) + ", landmark '" +
                    centers[s].names[l] + "': " + e.what());
      }
      if (config.ordering == PatchOrdering::kDistanceToOrigin) {
        patch = order_patch(patch, config.origin);
      } else {
        auto engine = rng::make_engine(config.seed, {0x0d9e12ull, s, l});
        rng::shuffle(patch, engine);
      }
      for (std::size_t k = 0; k < patch.size(); ++k)
        for (std::size_t c = 0; c < 3; ++c)
          tensor.at(s, l, k, c) = static_cast<Real>(patch[k][static_cast<int>(c)]);
    }
  }
  return tensor;
}

// ---------------------------------------------------------------------------
// Persistence: float32 little-endian blob + JSON sidecar.

inline nlohmann::json patch_config_to_json(const PatchConfig& c) {
  nlohmann::json j{{"strategy", to_string(c.strategy)},
                   {"points_per_patch", c.points_per_patch},
                   {"origin", {c.origin.x(), c.origin.y(), c.origin.z()}},
                   {"ordering", to_string(c.ordering)},
                   {"seed", c.seed}};
  if (c.strategy == PatchStrategy::kRadius) j["radius_mm"] = c.radius_mm;
  return j;
}

inline PatchConfig patch_config_from_json(const nlohmann::json& j) {
  PatchConfig c;
  c.strategy = patch_strategy_from_string(j.at("strategy").get<std::string>());
  c.points_per_patch = j.at("points_per_patch").get<std::size_t>();
  if (j.contains("radius_mm")) c.radius_mm = j.at("radius_mm").get<double>();
  const auto& o = j.at("origin");
  c.origin = Vec3(o.at(0).get<double>(), o.at(1).get<double>(), o.at(2).get<double>());
  c.ordering = patch_ordering_from_string(j.at("ordering").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

template <typename Real>
void save_patch_tensor(const PatchTensor<Real>& tensor, const std::string& blob_path,
                       const std::string& sidecar_path) {
  std::ofstream blob(blob_path, std::ios::binary);
  if (!blob) throw IoError("cannot write file: " + blob_path);
  std::vector<float> buf(tensor.data.size());
  for (std::size_t i = 0; i < tensor.data.size(); ++i) buf[i] = static_cast<float>(tensor.data[i]);
  blob.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!blob) throw IoError("short write: " + blob_path);

  nlohmann::json side{{"shape", {tensor.subjects, tensor.landmarks, tensor.points, 3}},
                      {"dtype", "float32"},
                      {"landmark_names", tensor.landmark_names},
                      {"config", patch_config_to_json(tensor.config)}};
  std::ofstream meta(sidecar_path);
  if (!meta) throw IoError("cannot write file: " + sidecar_path);
  meta << side.dump(2) << "\n";
}

template <typename Real = float>
PatchTensor<Real> load_patch_tensor(const std::string& blob_path, const std::string& sidecar_path) {
  std::ifstream meta(sidecar_path);
  if (!meta) throw IoError("cannot open file: " + sidecar_path);
  nlohmann::json side;
  try {
    meta >> side;
  } catch (const std::exception& e) {
    throw IoError("patch sidecar: parse failure in " + sidecar_path + ": " + e.what());
  }
  PatchTensor<Real> tensor;
  const auto& shape = side.at("shape");
  tensor.subjects = shape.at(0).get<std::size_t>();
  tensor.landmarks = shape.at(1).get<std::size_t>();
  tensor.points = shape.at(2).get<std::size_t>();
  require(shape.at(3).get<int>() == 3, "patch sidecar: last shape entry must be 3");
  require(side.at("dtype").get<std::string>() == "float32",
          "patch sidecar: unsupported dtype (want float32)");
  tensor.landmark_names = side.at("landmark_names").get<std::vector<std::string>>();
  tensor.config = patch_config_from_json(side.at("config"));

  const std::size_t count = tensor.subjects * tensor.landmarks * tensor.points * 3;
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw IoError("cannot open file: " + blob_path);
  std::vector<float> buf(count);
  blob.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
  if (blob.gcount() != static_cast<std::streamsize>(count * sizeof(float)))
    throw IoError("patch blob: size does not match sidecar shape: " + blob_path);
  tensor.data.assign(buf.begin(), buf.end());
  tensor.validate();
  return tensor;
}

}  // namespace palnet
