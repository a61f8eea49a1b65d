#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include "palnet/evaluation.hpp"
#include "palnet/rng.hpp"
#include "palnet/schema.hpp"
#include "palnet/synthetic.hpp"

using namespace palnet;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("palnet_eval_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

LandmarkSet make_set(std::vector<std::string> names, std::vector<Vec3> coords) {
  LandmarkSet s;
  s.names = std::move(names);
  s.coords = std::move(coords);
  return s;
}

/// Two synthetic subjects over the full 50-landmark schema with a controlled
/// per-landmark prediction offset.
struct SchemaFixture {
  std::vector<LandmarkSet> gt, pred;
  explicit SchemaFixture(double offset_mm = 1.0, double ear_offset_mm = 0.0) {
    FaceGenParams params;
    for (int s = 0; s < 2; ++s) {
      ShapeCoeffs coeffs{};
      coeffs[0] = s == 0 ? 0.2 : -0.3;
      const LandmarkSet lm = analytic_landmarks(params, coeffs);
      gt.push_back(lm);
      LandmarkSet p = lm;
      const std::set<std::string> ears(peripheral_ear_landmarks().begin(),
                                       peripheral_ear_landmarks().end());
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = ears.count(p.names[i]) && ear_offset_mm > 0.0 ? ear_offset_mm : offset_mm;
        p.coords[i] += Vec3(d, 0, 0);
      }
      pred.push_back(p);
    }
  }
};

}  // namespace

TEST_CASE("centroid projection with K=1 is exactly nearest-vertex projection") {
  rng::Engine g = rng::make_engine(5);
  PointCloud cloud;
  for (int i = 0; i < 300; ++i)
    cloud.points.emplace_back(rng::uniform(g, -50, 50), rng::uniform(g, -50, 50),
                              rng::uniform(g, -50, 50));
  LandmarkSet lm = make_set({"A", "B", "C"}, {Vec3(1, 2, 3), Vec3(-20, 5, 0), Vec3(0, 0, 60)});
  const KdTree tree(cloud.points);
  const LandmarkSet nearest = project_nearest(lm, tree);
  const LandmarkSet centroid1 = project_centroid(lm, tree, 1);
  for (std::size_t i = 0; i < lm.size(); ++i) {
    CHECK(centroid1.coords[i].x() == nearest.coords[i].x());
    CHECK(centroid1.coords[i].y() == nearest.coords[i].y());
    CHECK(centroid1.coords[i].z() == nearest.coords[i].z());
  }
}

TEST_CASE("centroid projection averages the K nearest vertices") {
  PointCloud cloud;
  cloud.points = {Vec3(1, 0, 0), Vec3(-1, 0, 0), Vec3(50, 50, 50)};
  const LandmarkSet lm = make_set({"A"}, {Vec3(0, 0.1, 0)});
  const LandmarkSet out = project_centroid(lm, cloud, 2);
  CHECK(out.coords[0] == Vec3(0, 0, 0));
  CHECK_THROWS_AS(project_centroid(lm, cloud, 4), Error);
  CHECK_THROWS_AS(project_centroid(lm, cloud, 0), Error);
}

TEST_CASE("pointwise errors report per-landmark and pooled population statistics") {
  const auto gt1 = make_set({"A", "B"}, {Vec3(0, 0, 0), Vec3(10, 0, 0)});
  const auto pr1 = make_set({"A", "B"}, {Vec3(1, 0, 0), Vec3(10, 0, 0)});
  const auto pr2 = make_set({"A", "B"}, {Vec3(0, 3, 0), Vec3(10, 0, 0)});
  const PointwiseStats st = pointwise_errors({pr1, pr2}, {gt1, gt1});

  REQUIRE(st.names == std::vector<std::string>{"A", "B"});
  CHECK(st.mean_mm[0] == Catch::Approx(2.0).margin(1e-15));  // errors 1 and 3
  CHECK(st.std_mm[0] == Catch::Approx(1.0).margin(1e-15));   // population std
  CHECK(st.mean_mm[1] == 0.0);
  CHECK(st.std_mm[1] == 0.0);
  // Pooled: {1, 3, 0, 0} → mean 1, std sqrt(3/2).
  CHECK(st.overall_mean == Catch::Approx(1.0).margin(1e-15));
  CHECK(st.overall_std == Catch::Approx(std::sqrt(1.5)).margin(1e-12));

  const auto mismatched = make_set({"A", "C"}, {Vec3(0, 0, 0), Vec3(1, 1, 1)});
  CHECK_THROWS_AS(pointwise_errors({pr1}, {mismatched}), Error);
}

TEST_CASE("distance error matrix is symmetric with a zero diagonal") {
  SECTION("hand-computed two-landmark case") {
    const auto gt = make_set({"A", "B"}, {Vec3(0, 0, 0), Vec3(1, 0, 0)});
    const auto pred = make_set({"A", "B"}, {Vec3(0, 0, 0), Vec3(2, 0, 0)});
    const DistanceErrorMatrix m = distance_error_matrix({pred}, {gt});
    CHECK(m.matrix(0, 0) == 0.0);
    CHECK(m.matrix(1, 1) == 0.0);
    CHECK(m.matrix(0, 1) == Catch::Approx(1.0).margin(1e-15));
    CHECK(m.matrix(1, 0) == Catch::Approx(1.0).margin(1e-15));
    CHECK(m.mean_off_diagonal == Catch::Approx(1.0).margin(1e-15));
  }

  SECTION("random sets keep the structural identities") {
    rng::Engine g = rng::make_engine(17);
    std::vector<LandmarkSet> gt, pred;
    const std::vector<std::string> names{"A", "B", "C", "D"};
    for (int s = 0; s < 3; ++s) {
      std::vector<Vec3> gc, pc;
      for (int k = 0; k < 4; ++k) {
        gc.emplace_back(rng::uniform(g, -40, 40), rng::uniform(g, -40, 40),
                        rng::uniform(g, -40, 40));
        pc.push_back(gc.back() + Vec3(rng::normal(g), rng::normal(g), rng::normal(g)));
      }
      gt.push_back(make_set(names, gc));
      pred.push_back(make_set(names, pc));
    }
    const DistanceErrorMatrix m = distance_error_matrix(pred, gt);
    CHECK((m.matrix - m.matrix.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(m.matrix.diagonal().cwiseAbs().maxCoeff() == 0.0);
    CHECK(m.matrix.minCoeff() >= 0.0);
    CHECK(m.mean_off_diagonal ==
          Catch::Approx(m.matrix.sum() / double(4 * 3)).margin(1e-15));
  }
}

TEST_CASE("linear distance rows report absolute and relative error") {
  MeasurementSpec spec;
  spec.distances.push_back({"A-B", "frontal", "A", "B"});
  const auto gt = make_set({"A", "B"}, {Vec3(0, 0, 0), Vec3(1, 0, 0)});
  const auto pred = make_set({"A", "B"}, {Vec3(0, 0, 0), Vec3(2, 0, 0)});
  const auto rows = linear_distance_report({pred}, {gt}, spec);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].label == "A-B");
  CHECK(rows[0].error_mm == Catch::Approx(1.0).margin(1e-15));
  CHECK(rows[0].gt_mean_mm == Catch::Approx(1.0).margin(1e-15));
  CHECK(rows[0].ratio_percent == Catch::Approx(100.0).margin(1e-12));

  const auto degenerate = make_set({"A", "B"}, {Vec3(0, 0, 0), Vec3(0, 0, 0)});
  CHECK_THROWS_AS(linear_distance_report({pred}, {degenerate}, spec), Error);
}

TEST_CASE("angles come from clamped arccos with degenerate triples rejected") {
  CHECK(landmark_angle_deg(Vec3(1, 0, 0), Vec3(0, 0, 0), Vec3(0, 1, 0)) ==
        Catch::Approx(90.0).margin(1e-12));
  CHECK(landmark_angle_deg(Vec3(1, 0, 0), Vec3(0, 0, 0), Vec3(-1, 0, 0)) ==
        Catch::Approx(180.0).margin(1e-12));  // collinear is fine
  CHECK_THROWS_AS(landmark_angle_deg(Vec3(0, 0, 0), Vec3(0, 0, 0), Vec3(1, 0, 0)), Error);

  MeasurementSpec spec;
  spec.angles.push_back({"A-V-B", "A", "V", "B"});
  const auto gt = make_set({"A", "V", "B"}, {Vec3(1, 0, 0), Vec3(0, 0, 0), Vec3(0, 1, 0)});
  const auto pred = make_set({"A", "V", "B"}, {Vec3(1, 0, 0), Vec3(0, 0, 0), Vec3(-1, 0, 0)});
  const auto rows = angle_report({pred}, {gt}, spec);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].error_deg == Catch::Approx(90.0).margin(1e-12));
  CHECK(rows[0].gt_mean_deg == Catch::Approx(90.0).margin(1e-12));
  CHECK(rows[0].ratio_percent == Catch::Approx(100.0).margin(1e-9));
}

TEST_CASE("Bland–Altman pools coordinate differences per region group") {
  const auto gt = make_set({"A"}, {Vec3(0, 0, 0)});
  const auto pred = make_set({"A"}, {Vec3(1, 2, 3)});
  std::map<std::string, std::string> region{{"A", "midline"}};
  const auto stats = bland_altman({pred}, {gt}, region);
  REQUIRE(stats.size() == 1);
  CHECK(stats[0].group == "midline");
  const double mean = 2.0;
  const double sd = std::sqrt(2.0 / 3.0);  // population std of {1,2,3}
  CHECK(stats[0].mean_diff == Catch::Approx(mean).margin(1e-15));
  CHECK(stats[0].std_diff == Catch::Approx(sd).margin(1e-12));
  CHECK(stats[0].lower_limit == Catch::Approx(mean - 1.96 * sd).margin(1e-12));
  CHECK(stats[0].upper_limit == Catch::Approx(mean + 1.96 * sd).margin(1e-12));
  REQUIRE(stats[0].scatter.size() == 3);
  CHECK(stats[0].scatter[0][0] == Catch::Approx(0.5).margin(1e-15));
  CHECK(stats[0].scatter[0][1] == Catch::Approx(1.0).margin(1e-15));
  CHECK(stats[0].axis_mean[2] == Catch::Approx(3.0).margin(1e-15));
  CHECK(stats[0].axis_std[1] == 0.0);

  std::map<std::string, std::string> missing;
  CHECK_THROWS_AS(bland_altman({pred}, {gt}, missing), Error);
}

TEST_CASE("exclusion re-analysis shrinks the schema to the surviving landmarks") {
  const SchemaFixture fx(1.0, 25.0);  // ears are 25× worse than the rest
  const MeasurementSpec spec = default_measurement_spec();

  const EvalReport full = evaluate(fx.pred, fx.gt, spec);
  REQUIRE(full.pointwise.names.size() == 50);
  CHECK(full.distance_matrix.matrix.rows() == 50);

  const EvalReport core = evaluate_excluding(fx.pred, fx.gt, spec, peripheral_ear_landmarks());
  CHECK(core.pointwise.names.size() == 42);
  CHECK(core.distance_matrix.matrix.rows() == 42);
  CHECK(core.distance_matrix.matrix.cols() == 42);
  for (const auto& name : core.pointwise.names)
    CHECK(std::find(peripheral_ear_landmarks().begin(), peripheral_ear_landmarks().end(), name) ==
          peripheral_ear_landmarks().end());
  // Dropping the high-error ear landmarks strictly lowers the overall mean.
  CHECK(core.pointwise.overall_mean < full.pointwise.overall_mean);
  // The default measurement tables reference no dropped landmark.
  CHECK(core.distances.size() == full.distances.size());
  CHECK(core.angles.size() == full.angles.size());

  // Dropping a landmark used by measurements removes the affected rows.
  const EvalReport no_tragion = evaluate_excluding(fx.pred, fx.gt, spec, {"TR"});
  CHECK(no_tragion.pointwise.names.size() == 49);
  CHECK(no_tragion.distances.size() < full.distances.size());
  CHECK(no_tragion.angles.size() < full.angles.size());

  CHECK_THROWS_AS(evaluate_excluding(fx.pred, fx.gt, spec, {"NotALandmark"}), Error);
  CHECK_THROWS_AS(drop_landmarks(fx.gt[0], fx.gt[0].names), Error);  // cannot drop all
}

TEST_CASE("fold aggregation averages means and stds and concatenates scatter") {
  EvalReport a, b;
  a.pointwise.names = b.pointwise.names = {"A"};
  a.pointwise.mean_mm = {2.0};
  b.pointwise.mean_mm = {4.0};
  a.pointwise.std_mm = {1.0};
  b.pointwise.std_mm = {3.0};
  a.pointwise.overall_mean = 2.0;
  b.pointwise.overall_mean = 4.0;
  a.pointwise.overall_std = 1.0;
  b.pointwise.overall_std = 3.0;
  a.distance_matrix.names = b.distance_matrix.names = {"A"};
  a.distance_matrix.matrix = Eigen::MatrixXd::Constant(1, 1, 0.0);
  b.distance_matrix.matrix = Eigen::MatrixXd::Constant(1, 1, 0.0);
  a.distance_matrix.mean_off_diagonal = 1.0;
  b.distance_matrix.mean_off_diagonal = 2.0;
  BlandAltmanStats ba1, ba2;
  ba1.group = ba2.group = "midline";
  ba1.scatter = {{1.0, 0.5}};
  ba2.scatter = {{2.0, -0.5}};
  a.bland_altman = {ba1};
  b.bland_altman = {ba2};

  const EvalReport agg = aggregate_folds({a, b});
  CHECK(agg.fold_count == 2);
  CHECK(agg.pointwise.mean_mm[0] == Catch::Approx(3.0).margin(1e-15));
  CHECK(agg.pointwise.std_mm[0] == Catch::Approx(2.0).margin(1e-15));  // mean of stds
  CHECK(agg.pointwise.overall_mean == Catch::Approx(3.0).margin(1e-15));
  CHECK(agg.pointwise.overall_std == Catch::Approx(2.0).margin(1e-15));
  CHECK(agg.distance_matrix.mean_off_diagonal == Catch::Approx(1.5).margin(1e-15));
  REQUIRE(agg.bland_altman.size() == 1);
  CHECK(agg.bland_altman[0].scatter.size() == 2);  // concatenated, not averaged

  EvalReport mismatched = b;
  mismatched.pointwise.names = {"B"};
  CHECK_THROWS_AS(aggregate_folds({a, mismatched}), Error);
}

TEST_CASE("report files are written with the expected structure") {
  const SchemaFixture fx(1.5);
  const MeasurementSpec spec = default_measurement_spec();
  const EvalReport report = evaluate(fx.pred, fx.gt, spec);

  TempDir dir;
  save_report_json(report, dir.file("report.json"));
  save_pointwise_csv(report, dir.file("pointwise.csv"));
  save_distance_matrix_csv(report, dir.file("matrix.csv"));
  save_measurement_csv(report, dir.file("measurements.csv"));
  save_bland_altman_csv(report, dir.file("bland_altman.csv"));
  save_distance_matrix_svg(report, dir.file("matrix.svg"));
  save_bland_altman_svg(report, dir.file("bland_altman.svg"));

  {
    std::ifstream in(dir.file("report.json"));
    nlohmann::json j;
    in >> j;
    CHECK(j.at("pointwise").at("per_landmark").size() == 50);
    CHECK(j.at("pointwise").at("overall_mean_mm").get<double>() ==
          Catch::Approx(1.5).margin(1e-9));
    CHECK(j.at("distance_matrix").at("names").size() == 50);
    CHECK(j.at("fold_count").get<int>() == 1);
  }
  {
    std::ifstream in(dir.file("pointwise.csv"));
    std::string header;
    std::getline(in, header);
    CHECK(header.find("name") != std::string::npos);
    std::size_t rows = 0;
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) ++rows;
    CHECK(rows >= 50);
  }
  for (const char* svg : {"matrix.svg", "bland_altman.svg"}) {
    std::ifstream in(dir.file(svg));
    std::string content((std::istreambuf_iterator<char>(in)), {});
    CHECK(content.rfind("<svg", 0) == 0);
    CHECK(content.find("</svg>") != std::string::npos);
  }
}

TEST_CASE("the default measurement spec matches the shipped landmark schema") {
  const MeasurementSpec spec = default_measurement_spec();
  CHECK(spec.distances.size() == 20);  // 4 frontal + 6 horizontal + 5 per side
  CHECK(spec.angles.size() == 9);
  const auto names = default_landmark_names();
  CHECK(names.size() == 50);
  for (const auto& d : spec.distances) {
    CHECK(std::find(names.begin(), names.end(), d.a) != names.end());
    CHECK(std::find(names.begin(), names.end(), d.b) != names.end());
  }
  for (const auto& name : names) CHECK(spec.region_of.count(name) == 1);

  const auto restricted = spec.restricted_to({"Tr", "N", "Pg", "Sn"});
  CHECK(restricted.distances.size() == 4);  // exactly the frontal block survives
  for (const auto& d : restricted.distances) {
    CHECK(d.a != "TR");
    CHECK(d.group == "frontal");
  }
  REQUIRE(restricted.angles.size() == 1);  // only N-Sn-Pg avoids dropped names
  CHECK(restricted.angles[0].label == "N-Sn-Pg");
  CHECK(restricted.region_of.size() == 4);
}
