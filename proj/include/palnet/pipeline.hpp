#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "palnet/common.hpp"
#include "palnet/evaluation.hpp"
#include "palnet/landmarks.hpp"
#include "palnet/mesh_io.hpp"
#include "palnet/network.hpp"
#include "palnet/patching.hpp"
#include "palnet/registration.hpp"
#include "palnet/rng.hpp"
#include "palnet/synthetic.hpp"
#include "palnet/training.hpp"

// Pipeline orchestration: each subcommand (generate, preprocess = align +
// patch, train, predict, evaluate, ablate) reads the artifacts of the previous
// stage, writes its own artifact directory, and records a stage manifest (a
// config snapshot plus input/output content checksums). A stage whose manifest
// still matches its config and whose files are unchanged is skipped unless
// forced, so subcommands are individually re-runnable. Nothing here depends on
// wall-clock time, so reruns are byte-identical.
//
// Fold hygiene: the atlas template and the patch tensors are recomputed per
// cross-validation fold from that fold's training subjects only, so validation
// subjects never influence their own initial estimates.

namespace palnet {

// ---------------------------------------------------------------------------
// Measurement spec serialization

inline nlohmann::json measurement_spec_to_json(const MeasurementSpec& spec) {
  nlohmann::json distances = nlohmann::json::array();
  for (const auto& d : spec.distances)
    distances.push_back({{"label", d.label}, {"group", d.group}, {"a", d.a}, {"b", d.b}});
  nlohmann::json angles = nlohmann::json::array();
  for (const auto& a : spec.angles)
    angles.push_back({{"label", a.label}, {"a", a.a}, {"vertex", a.vertex}, {"b", a.b}});
  nlohmann::json regions = nlohmann::json::object();
  for (const auto& [name, region] : spec.region_of) regions[name] = region;
  return nlohmann::json{{"distances", distances}, {"angles", angles}, {"regions", regions}};
}

inline MeasurementSpec measurement_spec_from_json(const nlohmann::json& j) {
  MeasurementSpec spec;
  try {
    for (const auto& d : j.at("distances"))
      spec.distances.push_back({d.at("label").get<std::string>(), d.at("group").get<std::string>(),
                                d.at("a").get<std::string>(), d.at("b").get<std::string>()});
    for (const auto& a : j.value("angles", nlohmann::json::array()))
      spec.angles.push_back({a.at("label").get<std::string>(), a.at("a").get<std::string>(),
                             a.at("vertex").get<std::string>(), a.at("b").get<std::string>()});
    for (const auto& [name, region] : j.at("regions").items())
      spec.region_of[name] = region.get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("measurement spec: malformed JSON: ") + e.what());
  }
  return spec;
}

inline MeasurementSpec load_measurement_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("measurement spec: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("measurement spec: '" + path + "' is not valid JSON: " + e.what());
  }
  return measurement_spec_from_json(j);
}

// ---------------------------------------------------------------------------
// Surface re-projection selector ("nearest" or "centroid:K")

struct PostprocessSpec {
  bool centroid = false;
  std::size_t k = 1;
};

inline PostprocessSpec parse_postprocess(const std::string& s) {
  if (s == "nearest") return {};
  const std::string prefix = "centroid:";
  if (s.rfind(prefix, 0) == 0) {
    const std::string arg = s.substr(prefix.size());
    std::size_t pos = 0;
    unsigned long k = 0;
    try {
      k = std::stoul(arg, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != arg.size() || k == 0)
      throw UsageError("postprocess: expected a positive K in 'centroid:K', got '" + s + "'");
    return {true, static_cast<std::size_t>(k)};
  }
  throw UsageError("postprocess: expected 'nearest' or 'centroid:K', got '" + s + "'");
}

inline LandmarkSet apply_postprocess(const LandmarkSet& pred, const KdTree& tree,
                                     const PostprocessSpec& post) {
  return post.centroid ? project_centroid(pred, tree, post.k) : project_nearest(pred, tree);
}

// ---------------------------------------------------------------------------
// Pipeline configuration

struct AblateVariant {
  std::string name;
  nlohmann::json overrides = nlohmann::json::object();  // dotted path -> value
};

struct PipelineConfig {
  std::string output_dir = "out";
  std::string dataset_dir;  // default: <output_dir>/dataset
  std::string aligned_dir;  // default: <output_dir>/aligned; set to share alignments
  std::size_t subject_count = 60;

  FaceGenParams generator;
  RegistrationConfig registration;
  PatchConfig patch;
  ArchConfig arch;
  TrainConfig train;

  std::string measurement_spec_path;  // empty = built-in measurement tables
  std::vector<std::string> exclude_landmarks;
  std::string postprocess = "nearest";
  std::vector<AblateVariant> ablate_variants;

  std::uint64_t seed = 1;  // master seed; every stage derives its own streams

  std::string dataset_root() const {
    return dataset_dir.empty() ? output_dir + "/dataset" : dataset_dir;
  }
  std::string aligned_root() const {
    return aligned_dir.empty() ? output_dir + "/aligned" : aligned_dir;
  }
  std::string patches_root() const { return output_dir + "/patches"; }
  std::string train_root() const { return output_dir + "/train"; }
  std::string predict_root() const { return output_dir + "/predict"; }
  std::string evaluate_root() const { return output_dir + "/evaluate"; }
  std::string ablate_root() const { return output_dir + "/ablate"; }

  void validate() const {
    require(!output_dir.empty(), "config: 'output_dir' must not be empty");
    require(subject_count >= 1, "config: 'subject_count' must be at least 1");
    generator.validate();
    registration.validate();
    patch.validate();
    arch.validate();
    train.validate();
    parse_postprocess(postprocess);
    if (!measurement_spec_path.empty())
      require(std::filesystem::exists(measurement_spec_path),
              "config: 'measurement_spec' path does not exist: " + measurement_spec_path);
    std::set<std::string> names;
    for (const auto& v : ablate_variants) {
      require(!v.name.empty(), "config: ablate variant with empty name");
      require(v.name.find_first_not_of(
                  "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-") ==
                  std::string::npos,
              "config: ablate variant name '" + v.name + "' must be [A-Za-z0-9_-]");
      require(names.insert(v.name).second, "config: duplicate ablate variant '" + v.name + "'");
    }
  }
};

inline nlohmann::json pipeline_config_to_json(const PipelineConfig& c) {
  nlohmann::json variants = nlohmann::json::array();
  for (const auto& v : c.ablate_variants)
    variants.push_back({{"name", v.name}, {"set", v.overrides}});
  return nlohmann::json{{"output_dir", c.output_dir},
                        {"dataset_dir", c.dataset_dir},
                        {"aligned_dir", c.aligned_dir},
                        {"subject_count", c.subject_count},
                        {"generator", face_gen_params_to_json(c.generator)},
                        {"registration", registration_config_to_json(c.registration)},
                        {"patch", patch_config_to_json(c.patch)},
                        {"arch", arch_to_json(c.arch)},
                        {"train", train_config_to_json(c.train)},
                        {"measurement_spec", c.measurement_spec_path},
                        {"exclude_landmarks", c.exclude_landmarks},
                        {"postprocess", c.postprocess},
                        {"ablate", {{"variants", variants}}},
                        {"seed", c.seed}};
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  require(j.is_object(), "config: top level must be a JSON object");
  require(j.contains("seed"), "config: missing required field 'seed'");
  PipelineConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.value("output_dir", c.output_dir);
    c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
    c.aligned_dir = j.value("aligned_dir", c.aligned_dir);
    c.subject_count = j.value("subject_count", c.subject_count);
    c.measurement_spec_path = j.value("measurement_spec", c.measurement_spec_path);
    c.exclude_landmarks = j.value("exclude_landmarks", c.exclude_landmarks);
    c.postprocess = j.value("postprocess", c.postprocess);

    // Partial sub-objects are merged onto the defaults so that, e.g.,
    // {"arch": {"attention": false}} is a complete override.
    const auto merged = [&](const char* key, nlohmann::json defaults) {
      if (j.contains(key)) defaults.update(j.at(key));
      return defaults;
    };
    c.generator = face_gen_params_from_json(merged("generator", face_gen_params_to_json(c.generator)));
    c.registration =
        registration_config_from_json(merged("registration", registration_config_to_json(c.registration)));
    c.patch = patch_config_from_json(merged("patch", patch_config_to_json(c.patch)));
    c.arch = arch_from_json(merged("arch", arch_to_json(c.arch)));
    c.train = train_config_from_json(merged("train", train_config_to_json(c.train)));

    if (j.contains("ablate")) {
      for (const auto& v : j.at("ablate").value("variants", nlohmann::json::array())) {
        AblateVariant av;
        av.name = v.at("name").get<std::string>();
        av.overrides = v.value("set", nlohmann::json::object());
        require(av.overrides.is_object(),
                "config: ablate variant '" + av.name + "': 'set' must be an object");
        c.ablate_variants.push_back(std::move(av));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: malformed field: ") + e.what());
  }
  c.validate();
  return c;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return pipeline_config_from_json(j);
}

/// Apply one `--set KEY=VALUE` override to a raw config JSON tree. KEY is a
/// dotted path; VALUE is parsed as JSON when possible, else taken as a string.
inline void apply_config_override(nlohmann::json& root, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0,
          "override: expected KEY=VALUE, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;  // bare strings need no quotes

  nlohmann::json* node = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    require(!part.empty(), "override: empty path segment in '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = nlohmann::json::object();
    node = &(*node)[part];
    require(node->is_object(), "override: '" + key.substr(0, dot) + "' is not an object");
    start = dot + 1;
  }
}

// ---------------------------------------------------------------------------
// Stage manifests and skip logic

struct StageOptions {
  bool force = false;
  int jobs = 1;
};

namespace detail {

inline std::string subject_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "subject_%03zu", i);
  return buf;
}

inline std::string fold_dir(const std::string& root, int fold) {
  return root + "/fold_" + std::to_string(fold);
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

inline void write_stage_manifest(const std::string& path, const std::string& stage,
                                 const nlohmann::json& config_snapshot,
                                 const std::vector<std::string>& inputs,
                                 const std::vector<std::string>& outputs) {
  nlohmann::json in_list = nlohmann::json::array();
  for (const auto& p : inputs) in_list.push_back({{"path", p}, {"checksum", file_checksum(p)}});
  nlohmann::json out_list = nlohmann::json::array();
  for (const auto& p : outputs) out_list.push_back({{"path", p}, {"checksum", file_checksum(p)}});
  const nlohmann::json j = {
      {"stage", stage}, {"config", config_snapshot}, {"inputs", in_list}, {"outputs", out_list}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write stage manifest '" + path + "'");
  out << j.dump(2) << "\n";
}

/// True when a previous run of `stage` recorded the same config snapshot and
/// every input and output file still exists with an unchanged checksum.
inline bool stage_current(const std::string& manifest_path, const std::string& stage,
                          const nlohmann::json& config_snapshot) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) return false;
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) return false;
  if (j.value("stage", "") != stage) return false;
  if (!j.contains("config") || j.at("config") != config_snapshot) return false;
  for (const char* section : {"inputs", "outputs"}) {
    if (!j.contains(section)) return false;
    for (const auto& f : j.at(section)) {
      const std::string path = f.value("path", "");
      if (path.empty() || !std::filesystem::exists(path)) return false;
      try {
        if (file_checksum(path) != f.value("checksum", "")) return false;
      } catch (const Error&) {
        return false;
      }
    }
  }
  return true;
}

inline void require_artifact(const std::string& path, const std::string& stage,
                             const std::string& prior_command) {
  if (!std::filesystem::exists(path))
    throw UsageError(stage + ": missing required artifact '" + path + "'; run `" + prior_command +
                     "` first");
}

/// Run fn(0..count-1) on up to `jobs` threads. Work items only touch disjoint
/// state (their own files / slots), so outputs are deterministic regardless of
/// scheduling; the first exception is rethrown after all workers finish.
template <typename Fn>
void parallel_for(int jobs, std::size_t count, Fn&& fn) {
  jobs = std::max(1, jobs);
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

struct FoldLayout {
  std::vector<FoldSplit> folds;
  std::size_t subject_count = 0;
};

inline void save_fold_layout(const FoldLayout& layout, const std::string& path) {
  nlohmann::json folds = nlohmann::json::array();
  for (std::size_t f = 0; f < layout.folds.size(); ++f)
    folds.push_back({{"fold", f},
                     {"train_ids", layout.folds[f].train_ids},
                     {"val_ids", layout.folds[f].val_ids}});
  const nlohmann::json j = {{"subject_count", layout.subject_count}, {"folds", folds}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write fold layout '" + path + "'");
  out << j.dump(2) << "\n";
}

inline FoldLayout load_fold_layout(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open fold layout '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
    FoldLayout layout;
    layout.subject_count = j.at("subject_count").get<std::size_t>();
    for (const auto& f : j.at("folds"))
      layout.folds.push_back({f.at("train_ids").get<std::vector<std::size_t>>(),
                              f.at("val_ids").get<std::vector<std::size_t>>()});
    return layout;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("fold layout '" + path + "' is malformed: " + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// generate

/// Write the synthetic dataset. Returns false when it was already up to date.
inline bool run_generate(const PipelineConfig& cfg, const StageOptions& opt = {}) {
  cfg.validate();
  FaceGenParams gen = cfg.generator;
  gen.seed = rng::derive_seed(cfg.seed, {0x9e41ull});

  const std::string root = cfg.dataset_root();
  const std::string manifest_path = root + "/stage_manifest.json";
  const nlohmann::json snapshot = {{"seed", cfg.seed},
                                   {"subject_count", cfg.subject_count},
                                   {"generator", face_gen_params_to_json(gen)}};
  if (!opt.force && detail::stage_current(manifest_path, "generate", snapshot)) return false;

  const DatasetManifest manifest = generate_dataset(gen, cfg.subject_count, root);

  std::vector<std::string> outputs = {root + "/manifest.json", manifest.reference_path()};
  for (std::size_t i = 0; i < manifest.subjects.size(); ++i) {
    outputs.push_back(manifest.mesh_path(i));
    outputs.push_back(manifest.landmarks_path(i));
  }
  detail::write_stage_manifest(manifest_path, "generate", snapshot, {}, outputs);
  return true;
}

// ---------------------------------------------------------------------------
// preprocess part 1: rigid alignment into the reference frame

inline bool run_align(const PipelineConfig& cfg, const StageOptions& opt = {}) {
  cfg.validate();
  const std::string dataset_manifest = cfg.dataset_root() + "/manifest.json";
  detail::require_artifact(dataset_manifest, "preprocess", "generate");
  const DatasetManifest dataset = load_dataset_manifest(dataset_manifest);
  const std::size_t n = dataset.subjects.size();

  const std::string root = cfg.output_dir + "/aligned";
  const std::string manifest_path = root + "/stage_manifest.json";
  const nlohmann::json snapshot = {{"seed", cfg.seed},
                                   {"registration", registration_config_to_json(cfg.registration)}};
  if (!opt.force && detail::stage_current(manifest_path, "align", snapshot)) return false;
  detail::ensure_dir(root);

  const PointCloud reference = load_cloud_ply(dataset.reference_path());
  const ReferenceTarget target = prepare_reference(reference, dataset.roi, cfg.registration);

  std::vector<std::string> outputs;
  outputs.resize(3 * n);
  detail::parallel_for(opt.jobs, n, [&](std::size_t i) {
    const Mesh mesh = load_mesh(dataset.mesh_path(i));
    const LandmarkSet gt = load_landmarks(dataset.landmarks_path(i));
    RegistrationConfig rc = cfg.registration;
    rc.seed = rng::derive_seed(cfg.seed, {0xa119ull, i});
    AlignmentResult res;
    try {
      res = align_subject(mesh, target, rc);
    } catch (const Error& e) {
      throw NumericError("preprocess: subject " + std::to_string(i) + ": " + e.what());
    }

    PointCloud aligned;
    aligned.points = res.aligned.vertices;
    const std::string stem = root + "/" + detail::subject_stem(i);
    save_ply(aligned, stem + ".ply");
    save_landmarks_csv(apply_transform(gt, res.transform), stem + "_gt.csv");

    const nlohmann::json tj = {
        {"transform", transform_to_json(res.transform)},
        {"coarse",
         {{"inliers", res.coarse.inliers},
          {"pool_size", res.coarse.pool_size},
          {"iterations", res.coarse.iterations}}},
        {"fine",
         {{"iterations", res.fine.iterations},
          {"converged", res.fine.converged},
          {"final_rms_mm", res.fine.rms_history.empty() ? 0.0 : res.fine.rms_history.back()}}}};
    std::ofstream tout(stem + "_transform.json", std::ios::binary);
    if (!tout) throw IoError("cannot write '" + stem + "_transform.json'");
    tout << tj.dump(2) << "\n";

    outputs[3 * i] = stem + ".ply";
    outputs[3 * i + 1] = stem + "_gt.csv";
    outputs[3 * i + 2] = stem + "_transform.json";
  });

  detail::write_stage_manifest(manifest_path, "align", snapshot, {dataset_manifest}, outputs);
  return true;
}

// ---------------------------------------------------------------------------
// preprocess part 2: fold split, per-fold atlas, initial estimates, patches

inline bool run_patch(const PipelineConfig& cfg, const StageOptions& opt = {}) {
  cfg.validate();
  const std::string aligned = cfg.aligned_root();
  const std::string aligned_manifest = aligned + "/stage_manifest.json";
  detail::require_artifact(aligned_manifest, "preprocess", "preprocess");
  const std::string dataset_manifest = cfg.dataset_root() + "/manifest.json";
  detail::require_artifact(dataset_manifest, "preprocess", "generate");
  const DatasetManifest dataset = load_dataset_manifest(dataset_manifest);
  const std::size_t n = dataset.subjects.size();

  const std::string root = cfg.patches_root();
  const std::string manifest_path = root + "/stage_manifest.json";
  PatchConfig base_patch = cfg.patch;
  base_patch.seed = 0;  // per-fold seeds are derived below
  const nlohmann::json snapshot = {{"seed", cfg.seed},
                                   {"patch", patch_config_to_json(base_patch)},
                                   {"folds", cfg.train.folds}};
  if (!opt.force && detail::stage_current(manifest_path, "patch", snapshot)) return false;
  detail::ensure_dir(root);

  std::vector<PointCloud> clouds(n);
  std::vector<KdTree> trees;
  std::vector<LandmarkSet> gts(n);
  trees.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string stem = aligned + "/" + detail::subject_stem(i);
    detail::require_artifact(stem + ".ply", "preprocess", "preprocess");
    clouds[i] = load_cloud_ply(stem + ".ply");
    gts[i] = load_landmarks(stem + "_gt.csv");
  }
  for (std::size_t i = 0; i < n; ++i) trees.emplace_back(clouds[i].points);

  detail::FoldLayout layout;
  layout.subject_count = n;
  layout.folds = kfold_split(n, cfg.train.folds, rng::derive_seed(cfg.seed, {0x5917ull}));
  save_fold_layout(layout, root + "/folds.json");

  std::vector<std::string> outputs = {root + "/folds.json"};
  for (std::size_t f = 0; f < layout.folds.size(); ++f) {
    const std::string fdir = detail::fold_dir(root, static_cast<int>(f));
    detail::ensure_dir(fdir + "/baseline");

    std::vector<LandmarkSet> train_gts;
    for (const std::size_t id : layout.folds[f].train_ids) train_gts.push_back(gts[id]);
    const LandmarkSet atlas = mean_template(train_gts);
    save_landmarks_csv(atlas, fdir + "/atlas.csv");
    outputs.push_back(fdir + "/atlas.csv");

    std::vector<LandmarkSet> centers(n);
    for (std::size_t i = 0; i < n; ++i) {
      centers[i] = project_to_surface(atlas, trees[i]);
      const std::string path = fdir + "/baseline/" + detail::subject_stem(i) + ".csv";
      save_landmarks_csv(centers[i], path);
      outputs.push_back(path);
    }

    PatchConfig pc = cfg.patch;
    pc.seed = rng::derive_seed(cfg.seed, {0x9a7cull, f});
    const PatchTensor<float> tensor = build_patch_tensor<float>(clouds, centers, pc);
    save_patch_tensor(tensor, fdir + "/patches.bin", fdir + "/patches.json");
    outputs.push_back(fdir + "/patches.bin");
    outputs.push_back(fdir + "/patches.json");
  }

  detail::write_stage_manifest(manifest_path, "patch", snapshot,
                               {aligned_manifest, dataset_manifest}, outputs);
  return true;
}

/// The `preprocess` subcommand: alignment (unless this run reuses another
/// run's aligned artifacts via `aligned_dir`), then folds, atlases, patches.
inline bool run_preprocess(const PipelineConfig& cfg, const StageOptions& opt = {}) {
  bool ran = false;
  if (cfg.aligned_dir.empty() || cfg.aligned_root() == cfg.output_dir + "/aligned")
    ran = run_align(cfg, opt);
  return run_patch(cfg, opt) || ran;
}

// ---------------------------------------------------------------------------
// train

inline bool run_train(const PipelineConfig& cfg, const StageOptions& opt = {}) {
  cfg.validate();
  const std::string patches_manifest = cfg.patches_root() + "/stage_manifest.json";
  detail::require_artifact(patches_manifest, "train", "preprocess");
  const std::string aligned_manifest = cfg.aligned_root() + "/stage_manifest.json";
  detail::require_artifact(aligned_manifest, "train", "preprocess");

  const std::string root = cfg.train_root();
  const std::string manifest_path = root + "/stage_manifest.json";
  TrainConfig base_train = cfg.train;
  base_train.seed = 0;  // per-fold seeds are derived below
  const nlohmann::json snapshot = {{"seed", cfg.seed},
                                   {"arch", arch_to_json(cfg.arch)},
                                   {"train", train_config_to_json(base_train)}};
  if (!opt.force && detail::stage_current(manifest_path, "train", snapshot)) return false;

  const detail::FoldLayout layout = detail::load_fold_layout(cfg.patches_root() + "/folds.json");
  const std::size_t n_subjects = layout.subject_count;

  std::vector<LandmarkSet> gts(n_subjects);
  for (std::size_t i = 0; i < n_subjects; ++i)
    gts[i] = load_landmarks(cfg.aligned_root() + "/" + detail::subject_stem(i) + "_gt.csv");

  std::vector<std::string> outputs;
  std::size_t best_fold = 0;
  double best_fold_loss = std::numeric_limits<double>::infinity();
  for (std::size_t f = 0; f < layout.folds.size(); ++f) {
    const std::string pdir = detail::fold_dir(cfg.patches_root(), static_cast<int>(f));
    const std::string tdir = detail::fold_dir(root, static_cast<int>(f));
    detail::ensure_dir(tdir);

    const PatchTensor<float> tensor =
        load_patch_tensor<float>(pdir + "/patches.bin", pdir + "/patches.json");
    require(tensor.subjects == n_subjects, "train: patch tensor subject count mismatch");

    MatX<float> targets(static_cast<Eigen::Index>(n_subjects * tensor.landmarks), 3);
    for (std::size_t s = 0; s < n_subjects; ++s) {
      require(gts[s].names == tensor.landmark_names,
              "train: subject " + std::to_string(s) + " landmark schema does not match patches");
      for (std::size_t j = 0; j < tensor.landmarks; ++j)
        targets.row(static_cast<Eigen::Index>(s * tensor.landmarks + j)) =
            gts[s].coords[j].cast<float>().transpose();
    }

    TrainConfig tc = cfg.train;
    tc.seed = rng::derive_seed(cfg.seed, {0x7a19ull, f});
    const TrainResult<float> result =
        train(tensor, targets, layout.folds[f].train_ids, layout.folds[f].val_ids, cfg.arch, tc);

    const nlohmann::json meta = {{"fold", f},
                                 {"best_epoch", result.history.best_epoch},
                                 {"best_val_loss", result.best_val_loss},
                                 {"train", train_config_to_json(tc)},
                                 {"patch", patch_config_to_json(tensor.config)}};
    save_checkpoint(result.best_params, tdir + "/checkpoint.bin", meta);
    save_history_csv(result.history, tdir + "/history.csv");
    save_history_json(result.history, tdir + "/history.json");
    outputs.push_back(tdir + "/checkpoint.bin");
    outputs.push_back(tdir + "/history.csv");
    outputs.push_back(tdir + "/history.json");
    if (result.best_val_loss < best_fold_loss) {
      best_fold_loss = result.best_val_loss;
      best_fold = f;
    }
  }

  const nlohmann::json best = {
      {"fold", best_fold},
      {"checkpoint", detail::fold_dir(root, static_cast<int>(best_fold)) + "/checkpoint.bin"},
      {"best_val_loss", best_fold_loss}};
  std::ofstream bout(root + "/best.json", std::ios::binary);
  if (!bout) throw IoError("cannot write '" + root + "/best.json'");
  bout << best.dump(2) << "\n";
  bout.close();
  outputs.push_back(root + "/best.json");

  detail::write_stage_manifest(manifest_path, "train", snapshot,
                               {patches_manifest, aligned_manifest}, outputs);
  return true;
}

// ---------------------------------------------------------------------------
// predict

inline bool run_predict(const PipelineConfig& cfg, const StageOptions& opt = {}) {
  cfg.validate();
  const std::string train_manifest = cfg.train_root() + "/stage_manifest.json";
  detail::require_artifact(train_manifest, "predict", "train");
  const std::string patches_manifest = cfg.patches_root() + "/stage_manifest.json";
  detail::require_artifact(patches_manifest, "predict", "preprocess");

  const std::string root = cfg.predict_root();
  const std::string manifest_path = root + "/stage_manifest.json";
  const nlohmann::json snapshot = {{"seed", cfg.seed}, {"postprocess", cfg.postprocess}};
  if (!opt.force && detail::stage_current(manifest_path, "predict", snapshot)) return false;

  const PostprocessSpec post = parse_postprocess(cfg.postprocess);
  const detail::FoldLayout layout = detail::load_fold_layout(cfg.patches_root() + "/folds.json");

  std::vector<std::string> outputs;
  for (std::size_t f = 0; f < layout.folds.size(); ++f) {
    const std::string pdir = detail::fold_dir(cfg.patches_root(), static_cast<int>(f));
    const std::string odir = detail::fold_dir(root, static_cast<int>(f));
    detail::ensure_dir(odir);

    const std::string ckpt_path =
        detail::fold_dir(cfg.train_root(), static_cast<int>(f)) + "/checkpoint.bin";
    detail::require_artifact(ckpt_path, "predict", "train");
    const LoadedCheckpoint<float> ckpt = load_checkpoint<float>(ckpt_path);
    const PatchTensor<float> tensor =
        load_patch_tensor<float>(pdir + "/patches.bin", pdir + "/patches.json");

    const std::vector<std::size_t>& val_ids = layout.folds[f].val_ids;
    const ForwardTrace<float> trace =
        forward(patch_matrix(tensor, val_ids), val_ids.size(), tensor.landmarks, tensor.points,
                ckpt.params, RunMode::kEval);

    for (std::size_t vi = 0; vi < val_ids.size(); ++vi) {
      const std::size_t id = val_ids[vi];
      LandmarkSet pred;
      pred.names = tensor.landmark_names;
      for (std::size_t j = 0; j < tensor.landmarks; ++j) {
        const auto row = trace.predictions.row(static_cast<Eigen::Index>(vi * tensor.landmarks + j));
        pred.coords.emplace_back(static_cast<double>(row(0)), static_cast<double>(row(1)),
                                 static_cast<double>(row(2)));
      }
      const PointCloud cloud =
          load_cloud_ply(cfg.aligned_root() + "/" + detail::subject_stem(id) + ".ply");
      const KdTree tree(cloud.points);
      const std::string path = odir + "/" + detail::subject_stem(id) + ".csv";
      save_landmarks_csv(apply_postprocess(pred, tree, post), path);
      outputs.push_back(path);
    }
  }

  detail::write_stage_manifest(manifest_path, "predict", snapshot,
                               {train_manifest, patches_manifest}, outputs);
  return true;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOutcome {
  EvalReport model;     // cross-validated network predictions, folds aggregated
  EvalReport baseline;  // atlas-projection initial estimates on the same subjects
  double pointwise_improvement_percent = 0.0;
  double distance_improvement_percent = 0.0;
  bool has_excluded = false;
  EvalReport model_excluded;
  bool skipped = false;
};

inline EvaluateOutcome run_evaluate(const PipelineConfig& cfg, const StageOptions& opt = {}) {
  cfg.validate();
  const std::string predict_manifest = cfg.predict_root() + "/stage_manifest.json";
  detail::require_artifact(predict_manifest, "evaluate", "predict");
  const std::string patches_manifest = cfg.patches_root() + "/stage_manifest.json";
  detail::require_artifact(patches_manifest, "evaluate", "preprocess");

  const MeasurementSpec spec = cfg.measurement_spec_path.empty()
                                   ? default_measurement_spec()
                                   : load_measurement_spec(cfg.measurement_spec_path);

  const detail::FoldLayout layout = detail::load_fold_layout(cfg.patches_root() + "/folds.json");
  const std::string root = cfg.evaluate_root();
  const std::string manifest_path = root + "/stage_manifest.json";
  const nlohmann::json snapshot = {{"seed", cfg.seed},
                                   {"measurement_spec", cfg.measurement_spec_path},
                                   {"exclude_landmarks", cfg.exclude_landmarks}};

  std::vector<EvalReport> model_folds, baseline_folds, model_excluded_folds;
  for (std::size_t f = 0; f < layout.folds.size(); ++f) {
    std::vector<LandmarkSet> preds, bases, gts;
    for (const std::size_t id : layout.folds[f].val_ids) {
      const std::string stem = detail::subject_stem(id);
      const std::string pred_path =
          detail::fold_dir(cfg.predict_root(), static_cast<int>(f)) + "/" + stem + ".csv";
      detail::require_artifact(pred_path, "evaluate", "predict");
      preds.push_back(load_landmarks(pred_path));
      bases.push_back(load_landmarks(detail::fold_dir(cfg.patches_root(), static_cast<int>(f)) +
                                     "/baseline/" + stem + ".csv"));
      gts.push_back(load_landmarks(cfg.aligned_root() + "/" + stem + "_gt.csv"));
    }
    model_folds.push_back(evaluate(preds, gts, spec));
    baseline_folds.push_back(evaluate(bases, gts, spec));
    if (!cfg.exclude_landmarks.empty())
      model_excluded_folds.push_back(evaluate_excluding(preds, gts, spec, cfg.exclude_landmarks));
  }

  EvaluateOutcome out;
  out.model = aggregate_folds(model_folds);
  out.baseline = aggregate_folds(baseline_folds);
  const auto improvement = [](double base, double model) {
    return base > 0.0 ? 100.0 * (base - model) / base : 0.0;
  };
  out.pointwise_improvement_percent =
      improvement(out.baseline.pointwise.overall_mean, out.model.pointwise.overall_mean);
  out.distance_improvement_percent = improvement(out.baseline.distance_matrix.mean_off_diagonal,
                                                 out.model.distance_matrix.mean_off_diagonal);

  if (!opt.force && detail::stage_current(manifest_path, "evaluate", snapshot)) {
    if (!cfg.exclude_landmarks.empty()) {
      out.has_excluded = true;
      out.model_excluded = aggregate_folds(model_excluded_folds);
    }
    out.skipped = true;
    return out;
  }
  detail::ensure_dir(root);

  save_report_json(out.model, root + "/report.json");
  save_pointwise_csv(out.model, root + "/pointwise.csv");
  save_distance_matrix_csv(out.model, root + "/distance_matrix.csv");
  save_measurement_csv(out.model, root + "/measurements.csv");
  save_bland_altman_csv(out.model, root + "/bland_altman.csv");
  save_distance_matrix_svg(out.model, root + "/distance_matrix.svg");
  save_bland_altman_svg(out.model, root + "/bland_altman.svg");
  save_report_json(out.baseline, root + "/baseline_report.json");
  save_pointwise_csv(out.baseline, root + "/baseline_pointwise.csv");

  nlohmann::json summary = {
      {"model",
       {{"pointwise_mean_mm", out.model.pointwise.overall_mean},
        {"pointwise_std_mm", out.model.pointwise.overall_std},
        {"distance_mean_mm", out.model.distance_matrix.mean_off_diagonal},
        {"distance_table_mean_mm", out.model.distance_table_mean_mm},
        {"angle_table_mean_deg", out.model.angle_table_mean_deg}}},
      {"baseline",
       {{"pointwise_mean_mm", out.baseline.pointwise.overall_mean},
        {"pointwise_std_mm", out.baseline.pointwise.overall_std},
        {"distance_mean_mm", out.baseline.distance_matrix.mean_off_diagonal},
        {"distance_table_mean_mm", out.baseline.distance_table_mean_mm},
        {"angle_table_mean_deg", out.baseline.angle_table_mean_deg}}},
      {"improvement",
       {{"pointwise_percent", out.pointwise_improvement_percent},
        {"distance_percent", out.distance_improvement_percent}}},
      {"folds", layout.folds.size()}};

  std::vector<std::string> outputs = {root + "/report.json",          root + "/pointwise.csv",
                                      root + "/distance_matrix.csv",  root + "/measurements.csv",
                                      root + "/bland_altman.csv",     root + "/distance_matrix.svg",
                                      root + "/bland_altman.svg",     root + "/baseline_report.json",
                                      root + "/baseline_pointwise.csv"};

  if (!cfg.exclude_landmarks.empty()) {
    out.has_excluded = true;
    out.model_excluded = aggregate_folds(model_excluded_folds);
    detail::ensure_dir(root + "/excluded");
    save_report_json(out.model_excluded, root + "/excluded/report.json");
    save_pointwise_csv(out.model_excluded, root + "/excluded/pointwise.csv");
    save_distance_matrix_csv(out.model_excluded, root + "/excluded/distance_matrix.csv");
    save_measurement_csv(out.model_excluded, root + "/excluded/measurements.csv");
    summary["excluded"] = {
        {"dropped", cfg.exclude_landmarks},
        {"remaining_landmarks", out.model_excluded.pointwise.names.size()},
        {"pointwise_mean_mm", out.model_excluded.pointwise.overall_mean},
        {"distance_mean_mm", out.model_excluded.distance_matrix.mean_off_diagonal}};
    outputs.push_back(root + "/excluded/report.json");
    outputs.push_back(root + "/excluded/pointwise.csv");
    outputs.push_back(root + "/excluded/distance_matrix.csv");
    outputs.push_back(root + "/excluded/measurements.csv");
  }

  std::ofstream sout(root + "/summary.json", std::ios::binary);
  if (!sout) throw IoError("cannot write '" + root + "/summary.json'");
  sout << summary.dump(2) << "\n";
  sout.close();
  outputs.push_back(root + "/summary.json");

  detail::write_stage_manifest(manifest_path, "evaluate", snapshot,
                               {predict_manifest, patches_manifest}, outputs);
  return out;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateRow {
  std::string name;
  double val_loss = 0.0;  // mean of per-fold best validation losses
  double pointwise_mm = 0.0;
  double distance_mm = 0.0;
  double atlas_pointwise_mm = 0.0;
  double improvement_percent = 0.0;
};

inline const std::vector<AblateVariant>& default_ablate_variants() {
  static const std::vector<AblateVariant> variants = [] {
    std::vector<AblateVariant> v;
    v.push_back({"baseline", nlohmann::json::object()});
    v.push_back({"no_ordering", {{"patch.ordering", "shuffled"}}});
    v.push_back({"no_attention", {{"arch.attention", false}}});
    return v;
  }();
  return variants;
}

/// Run the variant grid: each variant re-runs patch extraction, training,
/// prediction, and evaluation under <output_dir>/ablate/<name>, reusing the
/// base run's dataset and aligned clouds. Emits a comparison table.
inline std::vector<AblateRow> run_ablate(const PipelineConfig& cfg, const StageOptions& opt = {}) {
  cfg.validate();
  const std::string aligned_manifest = cfg.aligned_root() + "/stage_manifest.json";
  detail::require_artifact(aligned_manifest, "ablate", "preprocess");

  std::vector<AblateVariant> variants =
      cfg.ablate_variants.empty() ? default_ablate_variants() : cfg.ablate_variants;
  const bool has_baseline =
      std::any_of(variants.begin(), variants.end(), [](const auto& v) { return v.name == "baseline"; });
  if (!has_baseline) variants.insert(variants.begin(), {"baseline", nlohmann::json::object()});

  const std::set<std::string> shared_keys = {"generator",  "registration", "seed",
                                             "subject_count", "dataset_dir", "output_dir",
                                             "aligned_dir", "ablate"};
  const nlohmann::json base_json = pipeline_config_to_json(cfg);
  const std::string root = cfg.ablate_root();
  detail::ensure_dir(root);

  std::vector<AblateRow> rows;
  for (const auto& variant : variants) {
    nlohmann::json vj = base_json;
    for (const auto& [key, value] : variant.overrides.items()) {
      const std::string head = key.substr(0, key.find('.'));
      require(!shared_keys.count(head), "ablate: variant '" + variant.name +
                                            "' may not override '" + head +
                                            "' (shared across all variants)");
      apply_config_override(vj, key + "=" + value.dump());
    }
    vj["output_dir"] = root + "/" + variant.name;
    vj["aligned_dir"] = cfg.aligned_root();
    vj["ablate"] = {{"variants", nlohmann::json::array()}};
    const PipelineConfig vcfg = pipeline_config_from_json(vj);

    run_patch(vcfg, opt);
    run_train(vcfg, opt);
    run_predict(vcfg, opt);
    const EvaluateOutcome eval = run_evaluate(vcfg, opt);

    AblateRow row;
    row.name = variant.name;
    const detail::FoldLayout layout = detail::load_fold_layout(vcfg.patches_root() + "/folds.json");
    double loss_sum = 0.0;
    for (std::size_t f = 0; f < layout.folds.size(); ++f) {
      const LoadedCheckpoint<float> ckpt = load_checkpoint<float>(
          detail::fold_dir(vcfg.train_root(), static_cast<int>(f)) + "/checkpoint.bin");
      loss_sum += ckpt.metadata.at("best_val_loss").get<double>();
    }
    row.val_loss = loss_sum / static_cast<double>(layout.folds.size());
    row.pointwise_mm = eval.model.pointwise.overall_mean;
    row.distance_mm = eval.model.distance_matrix.mean_off_diagonal;
    row.atlas_pointwise_mm = eval.baseline.pointwise.overall_mean;
    row.improvement_percent = eval.pointwise_improvement_percent;
    rows.push_back(row);
  }

  nlohmann::json jrows = nlohmann::json::array();
  for (const auto& r : rows)
    jrows.push_back({{"name", r.name},
                     {"val_loss", r.val_loss},
                     {"pointwise_mm", r.pointwise_mm},
                     {"distance_mm", r.distance_mm},
                     {"atlas_pointwise_mm", r.atlas_pointwise_mm},
                     {"improvement_percent", r.improvement_percent}});
  std::ofstream jout(root + "/results.json", std::ios::binary);
  if (!jout) throw IoError("cannot write '" + root + "/results.json'");
  jout << nlohmann::json{{"variants", jrows}}.dump(2) << "\n";
  jout.close();

  std::ofstream cout_(root + "/results.csv", std::ios::binary);
  if (!cout_) throw IoError("cannot write '" + root + "/results.csv'");
  cout_ << "variant,val_loss,pointwise_mm,distance_mm,atlas_pointwise_mm,improvement_percent\n";
  cout_.precision(17);
  for (const auto& r : rows)
    cout_ << r.name << "," << r.val_loss << "," << r.pointwise_mm << "," << r.distance_mm << ","
          << r.atlas_pointwise_mm << "," << r.improvement_percent << "\n";
  cout_.close();

  const nlohmann::json snapshot = {{"seed", cfg.seed}, {"variant_count", variants.size()}};
  detail::write_stage_manifest(root + "/stage_manifest.json", "ablate", snapshot,
                               {aligned_manifest}, {root + "/results.json", root + "/results.csv"});
  return rows;
}

// ---------------------------------------------------------------------------
// Subcommand dispatch (shared by the CLI and the tests)

inline void run_subcommand(const std::string& name, const PipelineConfig& cfg,
                           const StageOptions& opt = {}) {
  if (name == "generate") {
    run_generate(cfg, opt);
  } else if (name == "preprocess") {
    run_preprocess(cfg, opt);
  } else if (name == "train") {
    run_train(cfg, opt);
  } else if (name == "predict") {
    run_predict(cfg, opt);
  } else if (name == "evaluate") {
    run_evaluate(cfg, opt);
  } else if (name == "ablate") {
    run_ablate(cfg, opt);
  } else {
    throw UsageError("unknown subcommand '" + name +
                     "'; expected generate|preprocess|train|predict|evaluate|ablate");
  }
}

}  // namespace palnet
