#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "palnet/network.hpp"
#include "palnet/rng.hpp"

// Structure-preserving loss, Adam optimization, plateau LR scheduling, early
// stopping, best-checkpoint retention, and k-fold cross-validation splits.

namespace palnet {

struct TrainConfig {
  double alpha = 0.6;  // weight of the mean landmark localization error
  double beta = 0.4;   // weight of the pairwise-distance discrepancy term
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  double scheduler_factor = 0.5;
  int scheduler_patience = 8;
  int early_stop_patience = 30;
  int max_epochs = 250;
  std::uint64_t seed = 0;
  int folds = 5;

  void validate() const {
    require(alpha >= 0.0 && beta >= 0.0, "TrainConfig: loss weights must be non-negative");
    require(alpha + beta > 0.0, "TrainConfig: loss weights must not both be zero");
    require(learning_rate > 0.0, "TrainConfig: learning rate must be positive");
    require(batch_size >= 1, "TrainConfig: batch size must be at least 1");
    require(scheduler_factor > 0.0 && scheduler_factor < 1.0,
            "TrainConfig: scheduler factor must lie in (0,1)");
    require(scheduler_patience >= 1 && early_stop_patience >= 1,
            "TrainConfig: patiences must be at least 1");
    require(max_epochs >= 1, "TrainConfig: max_epochs must be at least 1");
    require(folds >= 2, "TrainConfig: folds must be at least 2");
  }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"alpha", c.alpha},
          {"beta", c.beta},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"scheduler_factor", c.scheduler_factor},
          {"scheduler_patience", c.scheduler_patience},
          {"early_stop_patience", c.early_stop_patience},
          {"max_epochs", c.max_epochs},
          {"seed", c.seed},
          {"folds", c.folds}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.scheduler_factor = j.value("scheduler_factor", c.scheduler_factor);
  c.scheduler_patience = j.value("scheduler_patience", c.scheduler_patience);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.seed = j.value("seed", c.seed);
  c.folds = j.value("folds", c.folds);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Composite loss

template <typename Real>
struct LossValue {
  double value = 0.0;
  double localization = 0.0;  // mean Euclidean landmark error component
  double distance = 0.0;      // mean pairwise-distance discrepancy component
  MatX<Real> grad;            // dLoss/dPred, same shape as pred
};

/// L = α · (1/n)Σₖ‖p̂ₖ−pₖ‖ + β · (1/n²)ΣᵢΣⱼ|‖p̂ᵢ−p̂ⱼ‖−‖pᵢ−pⱼ‖|, averaged over
/// subjects. The double sum runs over all n² ordered pairs including i=j
/// (which contribute zero). Coincident points take subgradient 0.
template <typename Real>
LossValue<Real> composite_loss(const MatX<Real>& pred, const MatX<Real>& gt, std::size_t m,
                               std::size_t n, double alpha, double beta) {
  require(pred.rows() == gt.rows() && pred.cols() == 3 && gt.cols() == 3,
          "composite_loss: shape mismatch");
  require(pred.rows() == static_cast<Eigen::Index>(m * n), "composite_loss: m·n row mismatch");

  LossValue<Real> out;
  out.grad = MatX<Real>::Zero(pred.rows(), 3);
  double loc_total = 0.0, dist_total = 0.0;
  const double loc_scale = alpha / (double(m) * double(n));
  const double dist_scale = beta / (double(m) * double(n) * double(n));

  for (std::size_t i = 0; i < m; ++i) {
    const Eigen::Index base = static_cast<Eigen::Index>(i * n);
    double loc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const Eigen::Index r = base + static_cast<Eigen::Index>(k);
      Eigen::Matrix<double, 3, 1> diff =
          (pred.row(r) - gt.row(r)).transpose().template cast<double>();
      const double dist = diff.norm();
      loc += dist;
      if (dist > 0.0)
        out.grad.row(r) += (loc_scale / dist * diff).transpose().template cast<Real>();
    }
    loc_total += loc / double(n);

    double discrepancy = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      const Eigen::Index ra = base + static_cast<Eigen::Index>(a);
      for (std::size_t b = 0; b < n; ++b) {
        const Eigen::Index rb = base + static_cast<Eigen::Index>(b);
        Eigen::Matrix<double, 3, 1> dp =
            (pred.row(ra) - pred.row(rb)).transpose().template cast<double>();
        Eigen::Matrix<double, 3, 1> dg =
            (gt.row(ra) - gt.row(rb)).transpose().template cast<double>();
        const double dhat = dp.norm();
        const double d = dg.norm();
        discrepancy += std::abs(dhat - d);
        if (dhat > 0.0) {
          const double sign = (dhat > d) ? 1.0 : (dhat < d ? -1.0 : 0.0);
          const Eigen::Matrix<double, 3, 1> u = (sign * dist_scale / dhat) * dp;
          out.grad.row(ra) += u.transpose().template cast<Real>();
          out.grad.row(rb) -= u.transpose().template cast<Real>();
        }
      }
    }
    dist_total += discrepancy / (double(n) * double(n));
  }

  out.localization = loc_total / double(m);
  out.distance = dist_total / double(m);
  out.value = alpha * out.localization + beta * out.distance;
  // The per-row gradients above were scaled by α/(m·n) and β/(m·n²) already.
  return out;
}

// ---------------------------------------------------------------------------
// Adam

template <typename Real>
struct AdamState {
  ModelParams<Real> first_moment;
  ModelParams<Real> second_moment;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Real>
AdamState<Real> make_adam_state(const ModelParams<Real>& params) {
  return AdamState<Real>{zeros_like(params), zeros_like(params), 0};
}

/// One bias-corrected Adam update of every parameter tensor in place.
/// Non-finite gradients abort with the offending tensor named.
template <typename Real>
void adam_step(ModelParams<Real>& params, const ModelParams<Real>& grads, AdamState<Real>& state,
               double lr) {
  struct Span {
    Real* data;
    std::size_t size;
  };
  auto spans = [](auto& model) {
    std::vector<Span> s;
    model.for_each_tensor([&](const std::string&, auto& t) {
      s.push_back(Span{const_cast<Real*>(t.data()), static_cast<std::size_t>(t.size())});
    });
    return s;
  };
  std::vector<std::string> names;
  grads.for_each_tensor([&](const std::string& name, const auto& t) {
    if (!t.allFinite()) throw NumericError("adam_step: non-finite gradient in " + name);
    names.push_back(name);
  });

  auto p = spans(params);
  auto g = spans(const_cast<ModelParams<Real>&>(grads));
  auto m1 = spans(state.first_moment);
  auto m2 = spans(state.second_moment);
  require(p.size() == g.size() && p.size() == m1.size() && p.size() == m2.size(),
          "adam_step: parameter/gradient structure mismatch");

  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (std::size_t t = 0; t < p.size(); ++t) {
    require(p[t].size == g[t].size, "adam_step: tensor size mismatch in " + names[t]);
    for (std::size_t i = 0; i < p[t].size; ++i) {
      const double grad = double(g[t].data[i]);
      const double m = state.beta1 * double(m1[t].data[i]) + (1.0 - state.beta1) * grad;
      const double v = state.beta2 * double(m2[t].data[i]) + (1.0 - state.beta2) * grad * grad;
      m1[t].data[i] = Real(m);
      m2[t].data[i] = Real(v);
      const double update = lr * (m / c1) / (std::sqrt(v / c2) + state.epsilon);
      p[t].data[i] = Real(double(p[t].data[i]) - update);
    }
  }
}

// ---------------------------------------------------------------------------
// Schedulers

/// Halves the learning rate when the best validation loss has not improved
/// (strictly) for `patience` consecutive epochs; the wait counter resets on a
/// new best and after every reduction.
class PlateauScheduler {
 public:
  PlateauScheduler(double initial_lr, double factor, int patience)
      : lr_(initial_lr), factor_(factor), patience_(patience) {}

  double observe(double val_loss) {
    if (val_loss < best_loss_) {
      best_loss_ = val_loss;
      bad_epochs_ = 0;
    } else {
      ++bad_epochs_;
      if (bad_epochs_ >= patience_) {
        lr_ *= factor_;
        bad_epochs_ = 0;
      }
    }
    return lr_;
  }

  double learning_rate() const { return lr_; }
  double best_loss() const { return best_loss_; }

 private:
  double lr_;
  double factor_;
  int patience_;
  double best_loss_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
};

/// Signals a stop after `patience` consecutive epochs without a new (strict)
/// best validation loss.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  bool observe(double val_loss) {
    if (val_loss < best_loss_) {
      best_loss_ = val_loss;
      bad_epochs_ = 0;
      return false;
    }
    ++bad_epochs_;
    return bad_epochs_ >= patience_;
  }

  double best_loss() const { return best_loss_; }

 private:
  int patience_;
  double best_loss_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
};

// ---------------------------------------------------------------------------
// History

struct TrainHistoryRow {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // learning rate in effect during the epoch
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<TrainHistoryRow> rows;
  int best_epoch = -1;

  void validate() const {
    require(best_epoch >= 1 && best_epoch <= static_cast<int>(rows.size()),
            "TrainHistory: best epoch out of range");
    double best = std::numeric_limits<double>::infinity();
    for (const auto& r : rows) best = std::min(best, r.val_loss);
    require(rows[static_cast<std::size_t>(best_epoch - 1)].val_loss == best,
            "TrainHistory: best epoch does not hold the minimal validation loss");
    for (std::size_t i = 1; i < rows.size(); ++i)
      require(rows[i].lr <= rows[i - 1].lr, "TrainHistory: learning rate increased");
  }
};

inline void save_history_csv(const TrainHistory& h, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write file: " + path);
  out << "epoch,train_loss,val_loss,lr,seconds\n";
  out.precision(17);
  for (const auto& r : h.rows)
    out << r.epoch << "," << r.train_loss << "," << r.val_loss << "," << r.lr << "," << r.seconds
        << "\n";
}

inline TrainHistory load_history_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("history csv: empty file: " + path);
  if (line.size() && line.back() == '\r') line.pop_back();
  if (line != "epoch,train_loss,val_loss,lr,seconds")
    throw IoError("history csv: unexpected header in " + path);
  TrainHistory h;
  double best = std::numeric_limits<double>::infinity();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    TrainHistoryRow r;
    char comma;
    if (!(ls >> r.epoch >> comma >> r.train_loss >> comma >> r.val_loss >> comma >> r.lr >>
          comma >> r.seconds))
      throw IoError("history csv: malformed row in " + path);
    h.rows.push_back(r);
    if (r.val_loss < best) {
      best = r.val_loss;
      h.best_epoch = r.epoch;
    }
  }
  return h;
}

inline nlohmann::json history_to_json(const TrainHistory& h) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : h.rows)
    rows.push_back({{"epoch", r.epoch},
                    {"train_loss", r.train_loss},
                    {"val_loss", r.val_loss},
                    {"lr", r.lr},
                    {"seconds", r.seconds}});
  return {{"rows", rows}, {"best_epoch", h.best_epoch}};
}

inline void save_history_json(const TrainHistory& h, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write file: " + path);
  out << history_to_json(h).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Training loop

template <typename Real>
struct TrainResult {
  ModelParams<Real> best_params;
  TrainHistory history;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

/// Mini-batch training with per-epoch reshuffling, Adam updates, plateau LR
/// scheduling, early stopping, and best-epoch checkpoint retention. `targets`
/// holds ground-truth coordinates for all subjects in `patches`, row
/// (subject·n + landmark). Train/validation subject indices must be disjoint.
template <typename Real = float>
TrainResult<Real> train(const PatchTensor<Real>& patches, const MatX<Real>& targets,
                        const std::vector<std::size_t>& train_ids,
                        const std::vector<std::size_t>& val_ids, const ArchConfig& arch,
                        const TrainConfig& cfg) {
  cfg.validate();
  arch.validate_for_patch(patches.points);
  require(!train_ids.empty() && !val_ids.empty(), "train: empty train or validation split");
  require(targets.rows() == static_cast<Eigen::Index>(patches.subjects * patches.landmarks) &&
              targets.cols() == 3,
          "train: target shape mismatch");
  for (const std::size_t t : train_ids)
    for (const std::size_t v : val_ids)
      require(t != v, "train: train/validation subject overlap at " + std::to_string(t));

  const std::size_t n = patches.landmarks;
  auto gather_targets = [&](const std::vector<std::size_t>& ids) {
    MatX<Real> out(static_cast<Eigen::Index>(ids.size() * n), 3);
    Eigen::Index r = 0;
    for (const std::size_t s : ids)
      for (std::size_t j = 0; j < n; ++j, ++r)
        out.row(r) = targets.row(static_cast<Eigen::Index>(s * n + j));
    return out;
  };
  const MatX<Real> val_input = patch_matrix(patches, val_ids);
  const MatX<Real> val_gt = gather_targets(val_ids);

  TrainResult<Real> result;
  result.best_params = init_params<Real>(arch, patches.points, rng::derive_seed(cfg.seed, {0x1417u}));
  ModelParams<Real> params = result.best_params;
  AdamState<Real> adam = make_adam_state(params);
  PlateauScheduler scheduler(cfg.learning_rate, cfg.scheduler_factor, cfg.scheduler_patience);
  EarlyStopper stopper(cfg.early_stop_patience);

  std::vector<std::size_t> order = train_ids;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = scheduler.learning_rate();

    auto shuffle_engine = rng::make_engine(cfg.seed, {0x5bffu, static_cast<std::uint64_t>(epoch)});
    rng::shuffle(order, shuffle_engine);

    double epoch_loss = 0.0;
    std::size_t seen = 0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(begin + cfg.batch_size, order.size());
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
      const MatX<Real> input = patch_matrix(patches, batch);
      const MatX<Real> gt = gather_targets(batch);
      const std::uint64_t dropout_seed = rng::derive_seed(
          cfg.seed, {0xd409u, static_cast<std::uint64_t>(epoch), batch_index});
      ForwardTrace<Real> trace =
          forward(input, batch.size(), n, patches.points, params, RunMode::kTrain, dropout_seed);
      LossValue<Real> loss =
          composite_loss(trace.predictions, gt, batch.size(), n, cfg.alpha, cfg.beta);
      if (!std::isfinite(loss.value))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch_index));
      ModelParams<Real> grads = backward(trace, params, loss.grad);
      adam_step(params, grads, adam, lr);
      epoch_loss += loss.value * double(batch.size());
      seen += batch.size();
    }
    epoch_loss /= double(seen);

    ForwardTrace<Real> val_trace =
        forward(val_input, val_ids.size(), n, patches.points, params, RunMode::kEval);
    const double val_loss =
        composite_loss(val_trace.predictions, val_gt, val_ids.size(), n, cfg.alpha, cfg.beta)
            .value;
    if (!std::isfinite(val_loss))
      throw NumericError("train: non-finite validation loss at epoch " + std::to_string(epoch));

    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_params = params;
      result.history.best_epoch = epoch;
    }

    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.rows.push_back(TrainHistoryRow{epoch, epoch_loss, val_loss, lr, seconds});

    scheduler.observe(val_loss);
    if (stopper.observe(val_loss)) break;
  }
  result.history.validate();
  return result;
}

// ---------------------------------------------------------------------------
// Cross-validation folds

struct FoldSplit {
  std::vector<std::size_t> train_ids;
  std::vector<std::size_t> val_ids;
};

/// Deterministic shuffle, then k near-equal contiguous validation chunks;
/// every subject lands in exactly one validation fold.
inline std::vector<FoldSplit> kfold_split(std::size_t subject_count, int k, std::uint64_t seed) {
  require(k >= 2, "kfold_split: need at least 2 folds");
  require(static_cast<std::size_t>(k) <= subject_count,
          "kfold_split: more folds than subjects");
  std::vector<std::size_t> ids(subject_count);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  auto engine = rng::make_engine(seed, {0xf01d5ull});
  rng::shuffle(ids, engine);

  std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
  const std::size_t base = subject_count / static_cast<std::size_t>(k);
  const std::size_t extra = subject_count % static_cast<std::size_t>(k);
  std::size_t cursor = 0;
  for (std::size_t f = 0; f < static_cast<std::size_t>(k); ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    for (std::size_t i = 0; i < subject_count; ++i) {
      const bool in_val = i >= cursor && i < cursor + len;
      (in_val ? folds[f].val_ids : folds[f].train_ids).push_back(ids[i]);
    }
    cursor += len;
  }
  return folds;
}

}  // namespace palnet
