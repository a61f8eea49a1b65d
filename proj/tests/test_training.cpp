#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "palnet/geometry.hpp"
#include "palnet/network.hpp"
#include "palnet/patching.hpp"
#include "palnet/rng.hpp"
#include "palnet/training.hpp"

using namespace palnet;

namespace {

MatX<double> random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed,
                           double scale = 1.0) {
  rng::Engine g = rng::make_engine(seed);
  MatX<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng::normal(g);
  return m;
}

/// Random patches with `subjects` slots; slot duplication lets a test present
/// the same data under disjoint train/validation indices.
template <typename Real>
PatchTensor<Real> random_patches(std::size_t subjects, std::size_t landmarks, std::size_t points,
                                 std::uint64_t seed) {
  PatchTensor<Real> t;
  t.subjects = subjects;
  t.landmarks = landmarks;
  t.points = points;
  for (std::size_t l = 0; l < landmarks; ++l) t.landmark_names.push_back("L" + std::to_string(l));
  rng::Engine g = rng::make_engine(seed);
  t.data.resize(subjects * landmarks * points * 3);
  for (auto& v : t.data) v = static_cast<Real>(rng::normal(g, 0.0, 2.0));
  return t;
}

}  // namespace

TEST_CASE("composite loss reproduces the two-landmark hand computation exactly") {
  MatX<double> gt(2, 3), pred(2, 3);
  gt << 0, 0, 0, 1, 0, 0;
  pred << 0, 0, 0, 2, 0, 0;
  const auto loss = composite_loss(pred, gt, 1, 2, 0.6, 0.4);
  // Localization: (0 + 1)/2 = 0.5. Distance (ordered pairs incl. self):
  // (|0−0| + |2−1| + |1−2| + |0−0|)/4 = 0.5. Total 0.6·0.5 + 0.4·0.5 = 0.5.
  CHECK(loss.localization == 0.5);
  CHECK(loss.distance == 0.5);
  CHECK(loss.value == 0.5);
}

TEST_CASE("composite loss gradient matches central finite differences") {
  const std::size_t m = 2, n = 3;
  const MatX<double> gt = random_matrix(m * n, 3, 91, 5.0);
  MatX<double> pred = random_matrix(m * n, 3, 92, 5.0);
  const double alpha = 0.6, beta = 0.4;
  const auto loss = composite_loss(pred, gt, m, n, alpha, beta);

  const double h = 1e-7;
  for (Eigen::Index r = 0; r < pred.rows(); ++r) {
    for (int c = 0; c < 3; ++c) {
      const double orig = pred(r, c);
      pred(r, c) = orig + h;
      const double lp = composite_loss(pred, gt, m, n, alpha, beta).value;
      pred(r, c) = orig - h;
      const double lm = composite_loss(pred, gt, m, n, alpha, beta).value;
      pred(r, c) = orig;
      const double fd = (lp - lm) / (2.0 * h);
      CHECK(loss.grad(r, c) == Catch::Approx(fd).epsilon(1e-5).margin(1e-9));
    }
  }
}

TEST_CASE("the distance term vanishes under rigid motion of the predictions") {
  const std::size_t n = 5;
  const MatX<double> gt = random_matrix(n, 3, 93, 20.0);

  rng::Engine g = rng::make_engine(94);
  Vec3 axis(rng::normal(g), rng::normal(g), rng::normal(g));
  axis.normalize();
  const RigidTransform t = RigidTransform::from_rotation_translation(
      Eigen::AngleAxisd(0.7, axis).toRotationMatrix(), Vec3(12.0, -3.0, 8.0));
  MatX<double> pred(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 p = t.apply(Vec3(gt(static_cast<Eigen::Index>(i), 0),
                                gt(static_cast<Eigen::Index>(i), 1),
                                gt(static_cast<Eigen::Index>(i), 2)));
    pred.row(static_cast<Eigen::Index>(i)) = p.transpose();
  }
  const auto loss = composite_loss(pred, gt, 1, n, 0.6, 0.4);
  CHECK(loss.distance < 1e-9);     // inter-landmark geometry is preserved
  CHECK(loss.localization > 1.0);  // but the points themselves moved
}

TEST_CASE("coincident predictions take a finite subgradient") {
  MatX<double> gt(2, 3), pred(2, 3);
  gt << 0, 0, 0, 3, 0, 0;
  pred << 1, 1, 1, 1, 1, 1;  // identical rows: predicted pairwise distance 0
  const auto loss = composite_loss(pred, gt, 1, 2, 0.5, 0.5);
  CHECK(std::isfinite(loss.value));
  CHECK(loss.grad.allFinite());
  // The distance discrepancy |0 − 3| contributes but produces no direction.
  CHECK(loss.distance == Catch::Approx(6.0 / 4.0).margin(1e-15));
}

TEST_CASE("Adam takes bias-corrected steps of the configured magnitude") {
  ArchConfig arch;
  arch.filters = {2};
  arch.pool_factors = {1};
  arch.mlp_widths = {2, 3};
  auto params = make_params<double>(arch, 1);
  auto state = make_adam_state(params);

  SECTION("two hand-computed steps with unit gradients") {
    ModelParams<double> grads = zeros_like(params);
    grads.for_each_tensor([](const std::string&, auto& t) { t.setOnes(); });
    const double lr = 1e-3;
    adam_step(params, grads, state, lr);
    // Bias correction makes the first step lr·g/(|g|+ε) for any constant g.
    const double want1 = -lr * 1.0 / (1.0 + 1e-8);
    params.for_each_tensor([&](const std::string&, const auto& t) {
      for (Eigen::Index i = 0; i < t.size(); ++i)
        CHECK(t.data()[i] == Catch::Approx(want1).margin(1e-15));
    });
    adam_step(params, grads, state, lr);
    // Second step with the same gradient: m̂ = v̂ = 1 again.
    params.for_each_tensor([&](const std::string&, const auto& t) {
      for (Eigen::Index i = 0; i < t.size(); ++i)
        CHECK(t.data()[i] == Catch::Approx(2.0 * want1).margin(1e-12));
    });
    CHECK(state.step == 2);
  }

  SECTION("first-step magnitude is the learning rate within 1%") {
    ModelParams<double> grads = zeros_like(params);
    rng::Engine g = rng::make_engine(101);
    grads.for_each_tensor([&](const std::string&, auto& t) {
      for (Eigen::Index i = 0; i < t.size(); ++i) {
        const double mag = rng::uniform(g, 0.5, 3.0);
        t.data()[i] = rng::uniform01(g) < 0.5 ? mag : -mag;
      }
    });
    const double lr = 7e-3;
    adam_step(params, grads, state, lr);
    params.for_each_tensor([&](const std::string&, const auto& t) {
      for (Eigen::Index i = 0; i < t.size(); ++i)
        CHECK(std::abs(t.data()[i]) == Catch::Approx(lr).epsilon(0.01));
    });
  }

  SECTION("non-finite gradients abort with the tensor named") {
    ModelParams<double> grads = zeros_like(params);
    grads.mlp[0].weight(0, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
      adam_step(params, grads, state, 1e-3);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("mlp0.weight") != std::string::npos);
    }
  }
}

TEST_CASE("plateau scheduler halves on the configured cadence under constant loss") {
  PlateauScheduler sched(1e-3, 0.5, 8);
  std::vector<int> halvings;
  double lr = 1e-3;
  for (int epoch = 1; epoch <= 30; ++epoch) {
    const double next = sched.observe(1.0);
    if (next < lr) halvings.push_back(epoch);
    lr = next;
  }
  CHECK(halvings == std::vector<int>{9, 17, 25});
  CHECK(lr == Catch::Approx(1.25e-4).margin(1e-18));
}

TEST_CASE("plateau scheduler resets its wait counter on improvement") {
  PlateauScheduler sched(1.0, 0.5, 3);
  sched.observe(5.0);  // best
  sched.observe(5.0);
  sched.observe(5.0);
  CHECK(sched.learning_rate() == 1.0);  // two bad epochs, not yet three
  sched.observe(4.0);                   // new best resets the counter
  sched.observe(4.0);
  sched.observe(4.0);
  CHECK(sched.learning_rate() == 1.0);
  sched.observe(4.0);  // third consecutive bad epoch
  CHECK(sched.learning_rate() == 0.5);
}

TEST_CASE("early stopping fires after the configured patience under constant loss") {
  EarlyStopper stop(30);
  int stopped_at = 0;
  for (int epoch = 1; epoch <= 40; ++epoch) {
    if (stop.observe(1.0)) {
      stopped_at = epoch;
      break;
    }
  }
  CHECK(stopped_at == 31);

  EarlyStopper improving(3);
  for (int epoch = 1; epoch <= 50; ++epoch) CHECK_FALSE(improving.observe(1.0 / epoch));
}

TEST_CASE("k-fold splits partition subjects into near-equal validation chunks") {
  const auto folds = kfold_split(23, 5, 77);
  REQUIRE(folds.size() == 5);

  std::vector<std::size_t> val_sizes;
  std::set<std::size_t> all_val;
  for (const auto& f : folds) {
    val_sizes.push_back(f.val_ids.size());
    CHECK(f.train_ids.size() + f.val_ids.size() == 23);
    std::set<std::size_t> train(f.train_ids.begin(), f.train_ids.end());
    for (const std::size_t v : f.val_ids) {
      CHECK(train.count(v) == 0);
      CHECK(all_val.insert(v).second);  // each subject validates exactly once
    }
  }
  CHECK(all_val.size() == 23);
  CHECK(*all_val.rbegin() == 22);
  std::sort(val_sizes.begin(), val_sizes.end());
  CHECK(val_sizes == std::vector<std::size_t>{4, 4, 5, 5, 5});

  const auto again = kfold_split(23, 5, 77);
  for (std::size_t f = 0; f < 5; ++f) CHECK(again[f].val_ids == folds[f].val_ids);
  const auto other = kfold_split(23, 5, 78);
  bool any_diff = false;
  for (std::size_t f = 0; f < 5; ++f)
    if (other[f].val_ids != folds[f].val_ids) any_diff = true;
  CHECK(any_diff);

  CHECK_THROWS_AS(kfold_split(3, 5, 1), Error);
  CHECK_THROWS_AS(kfold_split(10, 1, 1), Error);
}

TEST_CASE("training returns the best-epoch checkpoint with a consistent history") {
  const std::size_t landmarks = 2, points = 4;
  auto patches = random_patches<double>(8, landmarks, points, 201);
  const MatX<double> targets = random_matrix(8 * landmarks, 3, 202, 3.0);

  ArchConfig arch;
  arch.filters = {4};
  arch.pool_factors = {2};
  arch.mlp_widths = {8, 3};
  arch.dropout_rate = 0.25;

  TrainConfig cfg;
  cfg.max_epochs = 12;
  cfg.batch_size = 2;
  cfg.seed = 11;
  const std::vector<std::size_t> train_ids{0, 1, 2, 3, 4, 5};
  const std::vector<std::size_t> val_ids{6, 7};

  const auto result = train<double>(patches, targets, train_ids, val_ids, arch, cfg);
  REQUIRE_FALSE(result.history.rows.empty());
  CHECK(result.history.rows.size() <= 12);
  for (std::size_t i = 0; i < result.history.rows.size(); ++i) {
    CHECK(result.history.rows[i].epoch == static_cast<int>(i + 1));
    if (i > 0) CHECK(result.history.rows[i].lr <= result.history.rows[i - 1].lr);
  }
  double min_val = std::numeric_limits<double>::infinity();
  for (const auto& r : result.history.rows) min_val = std::min(min_val, r.val_loss);
  CHECK(result.best_val_loss == min_val);
  CHECK(result.history.rows[static_cast<std::size_t>(result.history.best_epoch - 1)].val_loss ==
        min_val);

  // The retained parameters reproduce the recorded best validation loss.
  const MatX<double> val_input = patch_matrix(patches, val_ids);
  MatX<double> val_gt(val_ids.size() * landmarks, 3);
  for (std::size_t i = 0; i < val_ids.size(); ++i)
    for (std::size_t l = 0; l < landmarks; ++l)
      val_gt.row(static_cast<Eigen::Index>(i * landmarks + l)) =
          targets.row(static_cast<Eigen::Index>(val_ids[i] * landmarks + l));
  const auto trace =
      forward(val_input, val_ids.size(), landmarks, points, result.best_params, RunMode::kEval);
  const auto replay = composite_loss(trace.predictions, val_gt, val_ids.size(), landmarks,
                                     cfg.alpha, cfg.beta);
  CHECK(replay.value == Catch::Approx(result.best_val_loss).margin(1e-12));

  // Bit-identical rerun with the same seed (wall-clock seconds excluded).
  const auto rerun = train<double>(patches, targets, train_ids, val_ids, arch, cfg);
  REQUIRE(rerun.history.rows.size() == result.history.rows.size());
  for (std::size_t i = 0; i < rerun.history.rows.size(); ++i) {
    CHECK(rerun.history.rows[i].train_loss == result.history.rows[i].train_loss);
    CHECK(rerun.history.rows[i].val_loss == result.history.rows[i].val_loss);
    CHECK(rerun.history.rows[i].lr == result.history.rows[i].lr);
  }
  CHECK(rerun.history.best_epoch == result.history.best_epoch);

  CHECK_THROWS_AS(train<double>(patches, targets, {0, 1, 2}, {2, 3}, arch, cfg), Error);
}

TEST_CASE("training overfits eight subjects presented as both train and validation") {
  // Subjects 8..15 duplicate 0..7 so the same data appears under disjoint ids.
  const std::size_t landmarks = 2, points = 4;
  auto patches = random_patches<double>(8, landmarks, points, 301);
  patches.subjects = 16;
  patches.data.resize(16 * landmarks * points * 3);
  std::copy(patches.data.begin(), patches.data.begin() + 8 * landmarks * points * 3,
            patches.data.begin() + 8 * landmarks * points * 3);

  MatX<double> targets(16 * landmarks, 3);
  for (std::size_t s = 0; s < 16; ++s)
    for (std::size_t l = 0; l < landmarks; ++l)
      targets.row(static_cast<Eigen::Index>(s * landmarks + l)) =
          Eigen::RowVector3d(2.0, -1.0, 3.0);

  ArchConfig arch;
  arch.filters = {4};
  arch.pool_factors = {2};
  arch.mlp_widths = {8, 3};
  arch.dropout_rate = 0.0;

  TrainConfig cfg;
  cfg.max_epochs = 200;
  cfg.early_stop_patience = 200;  // let the full budget run
  cfg.batch_size = 2;
  cfg.learning_rate = 1e-2;
  cfg.seed = 13;

  std::vector<std::size_t> train_ids, val_ids;
  for (std::size_t s = 0; s < 8; ++s) train_ids.push_back(s);
  for (std::size_t s = 8; s < 16; ++s) val_ids.push_back(s);

  const auto result = train<double>(patches, targets, train_ids, val_ids, arch, cfg);
  const double first = result.history.rows.front().train_loss;
  const double last = result.history.rows.back().train_loss;
  CHECK(last < 0.1 * first);
}

TEST_CASE("train config JSON round-trips and rejects invalid settings") {
  TrainConfig c;
  c.learning_rate = 5e-4;
  c.batch_size = 8;
  c.folds = 4;
  const auto j = train_config_to_json(c);
  const TrainConfig back = train_config_from_json(j);
  CHECK(back.learning_rate == 5e-4);
  CHECK(back.batch_size == 8);
  CHECK(back.folds == 4);

  nlohmann::json bad = j;
  bad["scheduler_factor"] = 1.5;
  CHECK_THROWS_AS(train_config_from_json(bad), Error);
  TrainConfig zero_w;
  zero_w.alpha = 0.0;
  zero_w.beta = 0.0;
  CHECK_THROWS_AS(zero_w.validate(), Error);
}

TEST_CASE("history files round-trip through CSV") {
  TrainHistory h;
  h.rows = {{1, 1.5, 2.0, 1e-3, 0.5}, {2, 1.2, 1.8, 1e-3, 0.4}, {3, 1.0, 1.9, 5e-4, 0.6}};
  h.best_epoch = 2;
  h.validate();

  const std::string path =
      (std::filesystem::temp_directory_path() / "palnet_history_test.csv").string();
  save_history_csv(h, path);
  const TrainHistory back = load_history_csv(path);
  REQUIRE(back.rows.size() == 3);
  CHECK(back.best_epoch == 2);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.rows[i].epoch == h.rows[i].epoch);
    CHECK(back.rows[i].train_loss == h.rows[i].train_loss);
    CHECK(back.rows[i].val_loss == h.rows[i].val_loss);
    CHECK(back.rows[i].lr == h.rows[i].lr);
  }
  std::filesystem::remove(path);

  TrainHistory broken = h;
  broken.best_epoch = 1;  // epoch 1 does not hold the minimum
  CHECK_THROWS_AS(broken.validate(), Error);
}
