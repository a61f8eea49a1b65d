#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "palnet/geometry.hpp"
#include "palnet/registration.hpp"
#include "palnet/rng.hpp"
#include "palnet/synthetic.hpp"

using namespace palnet;

namespace {

RigidTransform random_pose(std::uint64_t seed, double angle_deg, double trans_mm) {
  rng::Engine g = rng::make_engine(seed);
  Vec3 axis(rng::normal(g), rng::normal(g), rng::normal(g));
  axis.normalize();
  const Mat3 r = Eigen::AngleAxisd(deg_to_rad(angle_deg), axis).toRotationMatrix();
  Vec3 t(rng::uniform(g, -trans_mm, trans_mm), rng::uniform(g, -trans_mm, trans_mm),
         rng::uniform(g, -trans_mm, trans_mm));
  return RigidTransform::from_rotation_translation(r, t);
}

PointCloud random_oriented_cloud(std::size_t n, std::uint64_t seed, double extent = 50.0) {
  rng::Engine g = rng::make_engine(seed);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    c.points.emplace_back(rng::uniform(g, -extent, extent), rng::uniform(g, -extent, extent),
                          rng::uniform(g, -extent, extent));
    Vec3 nrm(rng::normal(g), rng::normal(g), rng::normal(g));
    c.normals.push_back(nrm.normalized());
    c.normal_valid.push_back(1);
  }
  return c;
}

}  // namespace

TEST_CASE("Darboux pair features are invariant under rigid motion") {
  rng::Engine g = rng::make_engine(5);
  const RigidTransform t = random_pose(6, 73.0, 40.0);
  const Mat3 r = t.rotation();
  for (int trial = 0; trial < 50; ++trial) {
    const Vec3 p1(rng::uniform(g, -10, 10), rng::uniform(g, -10, 10), rng::uniform(g, -10, 10));
    const Vec3 p2(rng::uniform(g, -10, 10), rng::uniform(g, -10, 10), rng::uniform(g, -10, 10));
    Vec3 n1(rng::normal(g), rng::normal(g), rng::normal(g));
    Vec3 n2(rng::normal(g), rng::normal(g), rng::normal(g));
    n1.normalize();
    n2.normalize();
    double a0, p0, t0, a1, p1f, t1;
    const bool ok0 = detail::pair_features(p1, n1, p2, n2, a0, p0, t0);
    const bool ok1 = detail::pair_features(t.apply(p1), r * n1, t.apply(p2), r * n2, a1, p1f, t1);
    REQUIRE(ok0 == ok1);
    if (!ok0) continue;
    CHECK(a1 == Catch::Approx(a0).margin(1e-9));
    CHECK(p1f == Catch::Approx(p0).margin(1e-9));
    CHECK(t1 == Catch::Approx(t0).margin(1e-9));
  }
}

TEST_CASE("FPFH descriptors are rigid-invariant and block-normalized") {
  const PointCloud cloud = random_oriented_cloud(120, 17, 30.0);
  const double radius = 18.0;
  const auto feats = compute_fpfh(cloud, radius);
  REQUIRE(feats.size() == cloud.size());

  const RigidTransform t = random_pose(18, 35.0, 25.0);
  const auto moved_feats = compute_fpfh(apply_transform(cloud, t), radius);

  for (std::size_t i = 0; i < feats.size(); ++i) {
    REQUIRE(feats[i].valid == moved_feats[i].valid);
    if (!feats[i].valid) continue;
    for (int b = 0; b < 3; ++b)
      CHECK(feats[i].histogram.segment<11>(11 * b).sum() == Catch::Approx(100.0).margin(1e-6));
    CHECK((feats[i].histogram - moved_feats[i].histogram).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("FPFH flags isolated points with a zero histogram") {
  PointCloud cloud = random_oriented_cloud(40, 23, 10.0);
  cloud.points.emplace_back(500.0, 500.0, 500.0);  // far outside every radius ball
  cloud.normals.emplace_back(0.0, 0.0, 1.0);
  cloud.normal_valid.push_back(1);
  const auto feats = compute_fpfh(cloud, 15.0);
  CHECK_FALSE(feats.back().valid);
  CHECK(feats.back().histogram.cwiseAbs().maxCoeff() == 0.0);
  CHECK(feats.front().valid);
}

TEST_CASE("feature matching returns exactly the mutual nearest neighbors") {
  rng::Engine g = rng::make_engine(29);
  const std::size_t na = 60, nb = 70;
  std::vector<FpfhFeature> a(na), b(nb);
  for (auto& f : a) {
    for (int k = 0; k < 33; ++k) f.histogram[k] = rng::uniform(g, 0.0, 100.0);
    f.valid = true;
  }
  for (auto& f : b) {
    for (int k = 0; k < 33; ++k) f.histogram[k] = rng::uniform(g, 0.0, 100.0);
    f.valid = true;
  }
  a[7].valid = false;  // invalid features must never match

  // Brute-force mutual nearest neighbor oracle over the valid subset.
  auto nearest = [](const Eigen::Matrix<double, 33, 1>& q, const std::vector<FpfhFeature>& set) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < set.size(); ++j) {
      if (!set[j].valid) continue;
      const double d = (set[j].histogram - q).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    return best;
  };
  std::vector<FeatureMatch> want;
  for (std::size_t i = 0; i < na; ++i) {
    if (!a[i].valid) continue;
    const std::size_t j = nearest(a[i].histogram, b);
    if (nearest(b[j].histogram, a) == i) want.push_back({i, j});
  }

  const auto got = match_features(a, b, 100000);
  REQUIRE(got.size() == want.size());
  for (std::size_t k = 0; k < got.size(); ++k) {
    CHECK(got[k].src_index == want[k].src_index);
    CHECK(got[k].dst_index == want[k].dst_index);
    CHECK(got[k].src_index != 7);
  }

  // The cap keeps a deterministic subsample of the pool.
  if (want.size() > 5) {
    const auto capped = match_features(a, b, 5);
    CHECK(capped.size() == 5);
    const auto capped2 = match_features(a, b, 5);
    for (std::size_t k = 0; k < 5; ++k) CHECK(capped[k].src_index == capped2[k].src_index);
  }
}

TEST_CASE("rigid least squares recovers an exact transform") {
  rng::Engine g = rng::make_engine(37);
  std::vector<Vec3> src;
  for (int i = 0; i < 25; ++i)
    src.emplace_back(rng::uniform(g, -40, 40), rng::uniform(g, -40, 40), rng::uniform(g, -40, 40));
  const RigidTransform t = random_pose(38, 52.0, 30.0);
  const auto dst = apply_transform(src, t);
  const RigidTransform fit = kabsch(src, dst);
  CHECK(rotation_angle_between(fit, t) < 1e-10);
  CHECK((fit.translation() - t.translation()).norm() < 1e-9);
}

TEST_CASE("rigid least squares never returns a reflection") {
  rng::Engine g = rng::make_engine(41);
  std::vector<Vec3> src, dst;
  for (int i = 0; i < 25; ++i) {
    Vec3 p(rng::uniform(g, -40, 40), rng::uniform(g, -40, 40), rng::uniform(g, -40, 40));
    src.push_back(p);
    dst.emplace_back(-p.x(), p.y(), p.z());  // mirrored: best orthogonal map has det -1
  }
  const RigidTransform fit = kabsch(src, dst);
  CHECK(fit.rotation().determinant() == Catch::Approx(1.0).margin(1e-9));
  fit.validate();
}

TEST_CASE("coarse RANSAC registration recovers a known pose from FPFH matches") {
  // Structured geometry (a synthetic face surface) transformed by a known pose,
  // with normals carried through the motion so descriptors match exactly.
  FaceGenParams params;
  params.reference_points = 1200;
  params.seed = 404;
  const ReferenceModel ref = generate_reference(params);
  PointCloud dst = estimate_normals(ref.cloud, 12);

  const RigidTransform pose = random_pose(47, 18.0, 25.0);
  const PointCloud src = apply_transform(dst, pose.inverse());

  const KdTree tree(dst.points);
  const double radius = 5.0 * mean_nn_spacing(tree);
  const auto src_feats = compute_fpfh(src, radius);
  const auto dst_feats = compute_fpfh(dst, radius);

  RegistrationConfig cfg;
  cfg.seed = 48;
  const RansacResult res = ransac_global(src, dst, src_feats, dst_feats, cfg);
  CHECK(res.inliers >= res.pool_size / 2);
  CHECK(rotation_angle_between(res.transform, pose) < deg_to_rad(3.0));
  CHECK((res.transform.translation() - pose.translation()).norm() < 3.0);
}

TEST_CASE("coarse RANSAC registration reports failure on unrelated clouds") {
  const PointCloud a = random_oriented_cloud(50, 53, 60.0);
  const PointCloud b = random_oriented_cloud(50, 54, 60.0);
  const auto fa = compute_fpfh(a, 40.0);
  const auto fb = compute_fpfh(b, 40.0);
  RegistrationConfig cfg;
  cfg.ransac_min_inlier_fraction = 0.99;
  cfg.ransac_max_iterations = 200;
  cfg.seed = 55;
  CHECK_THROWS_AS(ransac_global(a, b, fa, fb, cfg), Error);
}

TEST_CASE("ICP is a fixed point on identical clouds") {
  const PointCloud cloud = random_oriented_cloud(300, 61, 50.0);
  RegistrationConfig cfg;
  const IcpResult res = icp(cloud, cloud, RigidTransform::identity(), cfg);
  CHECK(res.converged);
  CHECK(rotation_angle_between(res.transform, RigidTransform::identity()) < 1e-9);
  CHECK(res.transform.translation().norm() < 1e-9);
  REQUIRE_FALSE(res.rms_history.empty());
  CHECK(res.rms_history.back() < 1e-12);
}

TEST_CASE("point-to-point ICP recovers a small residual misalignment") {
  const PointCloud src = random_oriented_cloud(500, 67, 50.0);
  const RigidTransform t = random_pose(68, 3.0, 2.5);
  const PointCloud dst = apply_transform(src, t);
  RegistrationConfig cfg;
  cfg.icp_max_iterations = 100;
  cfg.icp_point_to_plane = false;  // the cloud's normals are synthetic noise
  const IcpResult res = icp(src, dst, RigidTransform::identity(), cfg);
  CHECK(res.converged);
  CHECK(rotation_angle_between(res.transform, t) < deg_to_rad(0.05));
  CHECK((res.transform.translation() - t.translation()).norm() < 0.05);
  REQUIRE(res.rms_history.size() >= 2);
  CHECK(res.rms_history.back() < res.rms_history.front());
}

TEST_CASE("point-to-plane ICP settles below the sampling resolution") {
  // Two independent samplings of the same surface: nearest-point pairing
  // plateaus near the sampling spacing, while the plane solver slides along
  // the surface and recovers the pose to a small fraction of it.
  FaceGenParams params;
  params.seed = 813;
  const Mesh mesh = build_face_mesh(params, ShapeCoeffs{}, 0);
  PointCloud a = estimate_normals(sample_surface(mesh, 6000, 814), 30);
  PointCloud b = estimate_normals(sample_surface(mesh, 6000, 815), 30);
  const RigidTransform t = random_pose(816, 2.0, 2.0);
  b = apply_transform(b, t);

  RegistrationConfig cfg;
  cfg.icp_max_iterations = 100;
  const IcpResult res = icp(a, b, RigidTransform::identity(), cfg);
  CHECK(res.converged);
  CHECK(rotation_angle_between(res.transform, t) < deg_to_rad(0.2));
  CHECK((res.transform.translation() - t.translation()).norm() < 0.3);
}

TEST_CASE("transform composition multiplies fine after coarse") {
  const RigidTransform coarse = random_pose(71, 30.0, 20.0);
  const RigidTransform fine = random_pose(72, 10.0, 5.0);
  const RigidTransform total = compose(fine, coarse);
  const Vec3 p(3.0, -4.0, 5.0);
  CHECK((total.apply(p) - fine.apply(coarse.apply(p))).norm() < 1e-12);
  total.validate();
}

TEST_CASE("full alignment chain recovers the pose of an identically shaped subject") {
  // Same anatomy as the reference, unknown rigid pose: the chain must invert
  // the pose nearly exactly.
  FaceGenParams params;
  params.rotation_range_deg = 20.0;
  params.translation_range_mm = 30.0;
  params.noise_sigma_mm = 0.0;
  params.shape_strength = 0.0;
  params.radius_strength = 0.0;
  params.seed = 909;
  const ReferenceModel ref = generate_reference(params);

  const SubjectSample subject = generate_subject(params, rng::derive_seed(909, {1}));
  RegistrationConfig cfg;
  cfg.seed = 910;
  const AlignmentResult res = align_subject(subject.mesh, ref.cloud, ref.roi, cfg);

  const RigidTransform want = subject.pose.inverse();
  CHECK(rotation_angle_between(res.transform, want) < deg_to_rad(1.0));
  CHECK((res.transform.translation() - want.translation()).norm() < 1.0);
  CHECK(res.coarse.inliers >= 3);
  CHECK(res.fine.iterations >= 1);
  REQUIRE(res.aligned.vertices.size() == subject.mesh.vertices.size());
  CHECK((res.aligned.vertices[0] - res.transform.apply(subject.mesh.vertices[0])).norm() < 1e-12);
}

TEST_CASE("full alignment chain stays near the pose of a deformed subject") {
  // A subject with its own shape coefficients: the best rigid fit between two
  // different shapes is biased away from the generating pose, so the bounds
  // are the coarse-stage contract (inside ICP's basin), not exact recovery.
  FaceGenParams params;
  params.rotation_range_deg = 20.0;
  params.translation_range_mm = 30.0;
  params.noise_sigma_mm = 0.0;
  params.seed = 909;
  const ReferenceModel ref = generate_reference(params);
  const ReferenceTarget target = prepare_reference(ref.cloud, ref.roi, RegistrationConfig{});

  const SubjectSample subject = generate_subject(params, rng::derive_seed(909, {1}));
  RegistrationConfig cfg;
  cfg.seed = 910;
  const AlignmentResult res = align_subject(subject.mesh, target, cfg);

  const RigidTransform want = subject.pose.inverse();
  CHECK(rotation_angle_between(res.transform, want) < deg_to_rad(3.0));
  CHECK((res.transform.translation() - want.translation()).norm() < 8.0);
  CHECK(res.coarse.inliers >= 3);
}

TEST_CASE("registration config validation rejects out-of-range settings") {
  RegistrationConfig c;
  c.normal_k = 2;
  CHECK_THROWS_AS(c.validate(), Error);
  c = RegistrationConfig{};
  c.ransac_confidence = 1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = RegistrationConfig{};
  c.icp_tolerance_mm = 0.0;
  CHECK_THROWS_AS(c.validate(), Error);

  const nlohmann::json j = {{"sample_points", 1234}, {"seed", 7}};
  const RegistrationConfig parsed = registration_config_from_json(j);
  CHECK(parsed.sample_points == 1234);
  CHECK(parsed.seed == 7);
  CHECK(parsed.normal_k == RegistrationConfig{}.normal_k);
  const nlohmann::json round = registration_config_to_json(parsed);
  CHECK(registration_config_from_json(round).sample_points == 1234);
}
