#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "palnet/common.hpp"
#include "palnet/patching.hpp"
#include "palnet/rng.hpp"

// Landmark regression network: stacked point-wise conv blocks with max
// pooling along the patch axis, per-block attention aggregation into global
// descriptors, hybrid local+global features, and an MLP head. Forward keeps a
// trace of intermediates; backward computes exact reverse-mode gradients.

namespace palnet {

template <typename Real>
using MatX = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Real>
using VecX = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
using MatXi = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic>;

enum class RunMode { kTrain, kEval };

// ---------------------------------------------------------------------------
// Architecture description

struct ArchConfig {
  std::vector<int> filters{32, 64, 128};
  std::vector<int> pool_factors{5, 5, 4};
  bool attention = true;
  bool final_block_attention_only = false;
  int top_k = 0;  // 0 = dense attention; >0 restricts softmax to the k best rows
  std::vector<int> mlp_widths{1024, 1024, 3};
  double dropout_rate = 0.3;

  int depth() const { return static_cast<int>(filters.size()); }

  std::size_t pool_product() const {
    std::size_t p = 1;
    for (int f : pool_factors) p *= static_cast<std::size_t>(f);
    return p;
  }

  /// Points surviving the pool chain for a patch of K points.
  std::size_t pooled_points(std::size_t K) const { return K / pool_product(); }

  /// Blocks whose pre-pool features feed an attention head.
  std::vector<int> attention_blocks() const {
    if (!attention) return {};
    if (final_block_attention_only) return {depth() - 1};
    std::vector<int> all(static_cast<std::size_t>(depth()));
    std::iota(all.begin(), all.end(), 0);
    return all;
  }

  /// Width of the hybrid per-landmark feature vector.
  std::size_t hybrid_width(std::size_t K) const {
    std::size_t w = pooled_points(K) * static_cast<std::size_t>(filters.back());
    for (int b : attention_blocks()) w += static_cast<std::size_t>(filters[static_cast<std::size_t>(b)]);
    return w;
  }

  void validate() const {
    require(!filters.empty(), "ArchConfig: need at least one conv block");
    require(filters.size() == pool_factors.size(),
            "ArchConfig: filters and pool_factors must have equal length");
    for (int f : filters) require(f > 0, "ArchConfig: filter counts must be positive");
    for (int p : pool_factors) require(p > 0, "ArchConfig: pool factors must be positive");
    require(mlp_widths.size() >= 2, "ArchConfig: MLP needs at least two layers");
    require(mlp_widths.back() == 3, "ArchConfig: final MLP width must be 3");
    for (int w : mlp_widths) require(w > 0, "ArchConfig: MLP widths must be positive");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, "ArchConfig: dropout_rate must be in [0,1)");
    require(top_k >= 0, "ArchConfig: top_k must be non-negative");
  }

  /// Checks the pool chain against a concrete patch size.
  void validate_for_patch(std::size_t K) const {
    validate();
    std::size_t remaining = K;
    for (std::size_t b = 0; b < pool_factors.size(); ++b) {
      require(remaining % static_cast<std::size_t>(pool_factors[b]) == 0,
              "ArchConfig: pool factor " + std::to_string(pool_factors[b]) +
                  " does not divide the " + std::to_string(remaining) +
                  " points entering block " + std::to_string(b));
      remaining /= static_cast<std::size_t>(pool_factors[b]);
    }
    require(remaining > 0, "ArchConfig: pool chain consumes all points");
  }
};

inline nlohmann::json arch_to_json(const ArchConfig& a) {
  return {{"filters", a.filters},
          {"pool_factors", a.pool_factors},
          {"attention", a.attention},
          {"final_block_attention_only", a.final_block_attention_only},
          {"top_k", a.top_k},
          {"mlp_widths", a.mlp_widths},
          {"dropout_rate", a.dropout_rate}};
}

inline ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig a;
  a.filters = j.at("filters").get<std::vector<int>>();
  a.pool_factors = j.at("pool_factors").get<std::vector<int>>();
  a.attention = j.at("attention").get<bool>();
  a.final_block_attention_only = j.value("final_block_attention_only", false);
  a.top_k = j.value("top_k", 0);
  a.mlp_widths = j.at("mlp_widths").get<std::vector<int>>();
  a.dropout_rate = j.value("dropout_rate", 0.3);
  a.validate();
  return a;
}

// ---------------------------------------------------------------------------
// Parameters

template <typename Real>
struct DenseLayer {
  MatX<Real> weight;  // in × out
  VecX<Real> bias;    // out
};

template <typename Real>
struct AttentionHead {
  VecX<Real> weight;  // f
  VecX<Real> bias;    // 1
};

template <typename Real>
struct ModelParams {
  ArchConfig arch;
  std::vector<DenseLayer<Real>> conv;        // 2 per block, block-major
  std::vector<AttentionHead<Real>> heads;    // one per attention block
  std::vector<DenseLayer<Real>> mlp;

  /// Visits every parameter tensor in declaration order as (name, matrix&).
  /// Vectors are visited as column matrices via Eigen's common base.
  template <typename F>
  void for_each_tensor(F&& f) {
    for (std::size_t i = 0; i < conv.size(); ++i) {
      f("conv" + std::to_string(i) + ".weight", conv[i].weight);
      f("conv" + std::to_string(i) + ".bias", conv[i].bias);
    }
    for (std::size_t i = 0; i < heads.size(); ++i) {
      f("att" + std::to_string(i) + ".weight", heads[i].weight);
      f("att" + std::to_string(i) + ".bias", heads[i].bias);
    }
    for (std::size_t i = 0; i < mlp.size(); ++i) {
      f("mlp" + std::to_string(i) + ".weight", mlp[i].weight);
      f("mlp" + std::to_string(i) + ".bias", mlp[i].bias);
    }
  }

  template <typename F>
  void for_each_tensor(F&& f) const {
    const_cast<ModelParams*>(this)->for_each_tensor([&](const std::string& name, auto& t) {
      f(name, static_cast<const std::remove_reference_t<decltype(t)>&>(t));
    });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  void validate() const {
    arch.validate();
    require(conv.size() == static_cast<std::size_t>(2 * arch.depth()),
            "ModelParams: conv layer count mismatch");
    require(heads.size() == arch.attention_blocks().size(),
            "ModelParams: attention head count mismatch");
    require(mlp.size() == arch.mlp_widths.size(), "ModelParams: MLP layer count mismatch");
    bool finite = true;
    for_each_tensor([&](const std::string&, const auto& t) { finite = finite && t.allFinite(); });
    require(finite, "ModelParams: non-finite parameter");
  }
};

/// Allocates all tensors for `arch` given the hybrid width implied by K.
template <typename Real>
ModelParams<Real> make_params(const ArchConfig& arch, std::size_t K) {
  arch.validate_for_patch(K);
  ModelParams<Real> p;
  p.arch = arch;
  int in_ch = 3;
  for (int b = 0; b < arch.depth(); ++b) {
    const int f = arch.filters[static_cast<std::size_t>(b)];
    p.conv.push_back({MatX<Real>::Zero(in_ch, f), VecX<Real>::Zero(f)});
    p.conv.push_back({MatX<Real>::Zero(f, f), VecX<Real>::Zero(f)});
    in_ch = f;
  }
  for (int b : arch.attention_blocks()) {
    const int f = arch.filters[static_cast<std::size_t>(b)];
    p.heads.push_back({VecX<Real>::Zero(f), VecX<Real>::Zero(1)});
  }
  int in_w = static_cast<int>(arch.hybrid_width(K));
  for (int w : arch.mlp_widths) {
    p.mlp.push_back({MatX<Real>::Zero(in_w, w), VecX<Real>::Zero(w)});
    in_w = w;
  }
  return p;
}

/// Same structure as `like` with every tensor zeroed; gradient accumulator.
template <typename Real>
ModelParams<Real> zeros_like(const ModelParams<Real>& like) {
  ModelParams<Real> z = like;
  z.for_each_tensor([](const std::string&, auto& t) { t.setZero(); });
  return z;
}

/// Glorot-normal weights (std = sqrt(2/(fan_in+fan_out))), zero biases.
/// Tensors are filled in declaration order from a single seeded stream.
template <typename Real>
ModelParams<Real> init_params(const ArchConfig& arch, std::size_t K, std::uint64_t seed) {
  ModelParams<Real> p = make_params<Real>(arch, K);
  auto engine = rng::make_engine(seed, {0x91a7c3ull});
  auto fill_glorot = [&](auto& w, double fan_in, double fan_out) {
    const double stdev = std::sqrt(2.0 / (fan_in + fan_out));
    for (Eigen::Index i = 0; i < w.size(); ++i)
      w.data()[i] = static_cast<Real>(rng::normal(engine, 0.0, stdev));
  };
  for (auto& layer : p.conv)
    fill_glorot(layer.weight, double(layer.weight.rows()), double(layer.weight.cols()));
  for (auto& head : p.heads) fill_glorot(head.weight, double(head.weight.size()), 1.0);
  for (auto& layer : p.mlp)
    fill_glorot(layer.weight, double(layer.weight.rows()), double(layer.weight.cols()));
  return p;
}

// ---------------------------------------------------------------------------
// Primitive ops

enum class Activation { kRelu, kLinear };

/// Per-point affine map: out = act(x·W + b). No mixing across rows.
template <typename Real>
MatX<Real> pointwise_conv(const MatX<Real>& x, const MatX<Real>& w, const VecX<Real>& b,
                          Activation act) {
  require(x.cols() == w.rows(), "pointwise_conv: channel mismatch");
  require(w.cols() == b.size(), "pointwise_conv: bias size mismatch");
  MatX<Real> out = x * w;
  out.rowwise() += b.transpose();
  if (act == Activation::kRelu) out = out.cwiseMax(Real(0));
  return out;
}

/// Channel-wise max over non-overlapping windows of `factor` consecutive
/// rows. `argmax` records the winning input row per output element (first
/// occurrence on ties).
template <typename Real>
MatX<Real> max_pool(const MatX<Real>& x, int factor, MatXi* argmax = nullptr) {
  require(factor > 0, "max_pool: factor must be positive");
  require(x.rows() % factor == 0, "max_pool: factor does not divide row count");
  const Eigen::Index out_rows = x.rows() / factor;
  MatX<Real> out(out_rows, x.cols());
  if (argmax) argmax->resize(out_rows, x.cols());
  for (Eigen::Index r = 0; r < out_rows; ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      Eigen::Index best = r * factor;
      Real best_v = x(best, c);
      for (Eigen::Index k = 1; k < factor; ++k) {
        const Real v = x(r * factor + k, c);
        if (v > best_v) {
          best_v = v;
          best = r * factor + k;
        }
      }
      out(r, c) = best_v;
      if (argmax) (*argmax)(r, c) = static_cast<std::int32_t>(best);
    }
  }
  return out;
}

template <typename Real>
struct AttentionResult {
  VecX<Real> tanh_scores;  // N; tanh(S·w + b)
  VecX<Real> weights;      // N; softmax rows (0 outside the top-k selection)
  MatX<Real> global;       // m × f; per-subject weighted feature sum
};

/// Attention over the row axis: scores tanh(S·w+b), softmax per subject over
/// that subject's contiguous rows_per_subject rows (restricted to the top_k
/// best-scoring rows when top_k > 0), then a weighted sum of feature rows.
template <typename Real>
AttentionResult<Real> attention(const MatX<Real>& s, std::size_t subjects,
                                const VecX<Real>& w, Real b, int top_k = 0) {
  require(s.cols() == w.size(), "attention: feature width mismatch");
  require(subjects > 0 && s.rows() % static_cast<Eigen::Index>(subjects) == 0,
          "attention: rows not divisible by subject count");
  const Eigen::Index rows_per_subject = s.rows() / static_cast<Eigen::Index>(subjects);
  if (top_k > 0)
    require(top_k <= rows_per_subject, "attention: top_k exceeds rows per subject");

  AttentionResult<Real> r;
  r.tanh_scores = ((s * w).array() + b).tanh().matrix();
  r.weights = VecX<Real>::Zero(s.rows());
  r.global = MatX<Real>::Zero(static_cast<Eigen::Index>(subjects), s.cols());

  for (std::size_t i = 0; i < subjects; ++i) {
    const Eigen::Index lo = static_cast<Eigen::Index>(i) * rows_per_subject;
    std::vector<Eigen::Index> sel;
    if (top_k > 0 && top_k < rows_per_subject) {
      sel.resize(static_cast<std::size_t>(rows_per_subject));
      std::iota(sel.begin(), sel.end(), lo);
      std::stable_sort(sel.begin(), sel.end(), [&](Eigen::Index a, Eigen::Index b2) {
        return r.tanh_scores[a] > r.tanh_scores[b2];
      });
      sel.resize(static_cast<std::size_t>(top_k));
      std::sort(sel.begin(), sel.end());
    } else {
      sel.resize(static_cast<std::size_t>(rows_per_subject));
      std::iota(sel.begin(), sel.end(), lo);
    }
    Real max_score = r.tanh_scores[sel.front()];
    for (Eigen::Index j : sel) max_score = std::max(max_score, r.tanh_scores[j]);
    Real denom = Real(0);
    for (Eigen::Index j : sel) denom += std::exp(r.tanh_scores[j] - max_score);
    for (Eigen::Index j : sel) {
      r.weights[j] = std::exp(r.tanh_scores[j] - max_score) / denom;
      r.global.row(static_cast<Eigen::Index>(i)) += r.weights[j] * s.row(j);
    }
  }
  return r;
}

template <typename Real>
AttentionResult<Real> topk_attention(const MatX<Real>& s, std::size_t subjects,
                                     const VecX<Real>& w, Real b, int k) {
  require(k > 0, "topk_attention: k must be positive");
  return attention(s, subjects, w, b, k);
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename Real>
struct ForwardTrace {
  std::size_t m = 0, n = 0, K = 0;
  RunMode mode = RunMode::kEval;

  MatX<Real> input;                            // (m·n·K) × 3
  std::vector<MatX<Real>> conv_out;            // output of every conv layer (2 per block)
  std::vector<MatX<Real>> pooled;              // post-pool activations per block
  std::vector<MatXi> pool_argmax;              // winning input row per pooled element
  std::vector<AttentionResult<Real>> att;      // one per attention block
  MatX<Real> hybrid;                           // (m·n) × h
  MatX<Real> mlp_relu;                         // first MLP layer after relu
  MatX<Real> mlp_dropped;                      // after dropout (train) / alias (eval)
  MatX<Real> dropout_mask;                     // 0 or 1/(1-rate)
  std::vector<MatX<Real>> mlp_out;             // outputs of MLP layers 1..end
  MatX<Real> predictions;                      // (m·n) × 3

  Vec3 prediction(std::size_t subject, std::size_t landmark) const {
    const Eigen::Index r = static_cast<Eigen::Index>(subject * n + landmark);
    return Vec3(static_cast<double>(predictions(r, 0)), static_cast<double>(predictions(r, 1)),
                static_cast<double>(predictions(r, 2)));
  }
};

/// Rows (subject, landmark, point) for the chosen subjects, coordinate
/// columns x/y/z — the network's input layout.
template <typename Real>
MatX<Real> patch_matrix(const PatchTensor<Real>& t, const std::vector<std::size_t>& subjects) {
  MatX<Real> x(static_cast<Eigen::Index>(subjects.size() * t.landmarks * t.points), 3);
  Eigen::Index r = 0;
  for (const std::size_t s : subjects) {
    require(s < t.subjects, "patch_matrix: subject index out of range");
    for (std::size_t l = 0; l < t.landmarks; ++l)
      for (std::size_t k = 0; k < t.points; ++k, ++r)
        for (int c = 0; c < 3; ++c)
          x(r, c) = t.at(s, l, k, static_cast<std::size_t>(c));
  }
  return x;
}

template <typename Real>
MatX<Real> patch_matrix(const PatchTensor<Real>& t) {
  std::vector<std::size_t> all(t.subjects);
  std::iota(all.begin(), all.end(), std::size_t{0});
  return patch_matrix(t, all);
}

/// End-to-end forward pass. Dropout fires only in train mode and is fully
/// determined by `seed`; eval mode ignores the seed.
template <typename Real>
ForwardTrace<Real> forward(const MatX<Real>& input, std::size_t m, std::size_t n, std::size_t K,
                           const ModelParams<Real>& params, RunMode mode, std::uint64_t seed = 0) {
  const ArchConfig& arch = params.arch;
  arch.validate_for_patch(K);
  require(input.rows() == static_cast<Eigen::Index>(m * n * K) && input.cols() == 3,
          "forward: input shape mismatch");

  ForwardTrace<Real> trace;
  trace.m = m;
  trace.n = n;
  trace.K = K;
  trace.mode = mode;
  trace.input = input;

  const auto att_blocks = arch.attention_blocks();
  MatX<Real> x = input;
  for (int b = 0; b < arch.depth(); ++b) {
    const auto& l1 = params.conv[static_cast<std::size_t>(2 * b)];
    const auto& l2 = params.conv[static_cast<std::size_t>(2 * b + 1)];
    MatX<Real> h1 = pointwise_conv(x, l1.weight, l1.bias, Activation::kRelu);
    MatX<Real> s = pointwise_conv(h1, l2.weight, l2.bias, Activation::kRelu);
    trace.conv_out.push_back(std::move(h1));

    const auto it = std::find(att_blocks.begin(), att_blocks.end(), b);
    if (it != att_blocks.end()) {
      const auto& head = params.heads[static_cast<std::size_t>(it - att_blocks.begin())];
      trace.att.push_back(attention(s, m, head.weight, head.bias[0], arch.top_k));
    }

    MatXi argmax;
    MatX<Real> pooled = max_pool(s, arch.pool_factors[static_cast<std::size_t>(b)], &argmax);
    trace.conv_out.push_back(std::move(s));
    trace.pool_argmax.push_back(std::move(argmax));
    trace.pooled.push_back(pooled);
    x = std::move(pooled);
  }

  // Hybrid features: per-landmark flattened local features (point-major, then
  // channel) followed by every block's global attention descriptor.
  const std::size_t kf = arch.pooled_points(K);
  const int ff = arch.filters.back();
  const std::size_t h_width = arch.hybrid_width(K);
  trace.hybrid.resize(static_cast<Eigen::Index>(m * n), static_cast<Eigen::Index>(h_width));
  const MatX<Real>& final_local = trace.pooled.back();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const Eigen::Index row = static_cast<Eigen::Index>(i * n + j);
      const Eigen::Index base = static_cast<Eigen::Index>((i * n + j) * kf);
      Eigen::Index col = 0;
      for (std::size_t p = 0; p < kf; ++p)
        for (int c = 0; c < ff; ++c)
          trace.hybrid(row, col++) = final_local(base + static_cast<Eigen::Index>(p), c);
      for (const auto& att : trace.att)
        for (Eigen::Index c = 0; c < att.global.cols(); ++c)
          trace.hybrid(row, col++) = att.global(static_cast<Eigen::Index>(i), c);
    }
  }

  // MLP head: first layer relu + dropout, remaining layers linear.
  require(params.mlp.front().weight.rows() == static_cast<Eigen::Index>(h_width),
          "forward: hybrid width does not match MLP input width");
  MatX<Real> z = trace.hybrid * params.mlp.front().weight;
  z.rowwise() += params.mlp.front().bias.transpose();
  trace.mlp_relu = z.cwiseMax(Real(0));

  if (mode == RunMode::kTrain && arch.dropout_rate > 0.0) {
    auto engine = rng::make_engine(seed, {0xd40u});
    const Real keep_scale = Real(1.0 / (1.0 - arch.dropout_rate));
    trace.dropout_mask.resize(trace.mlp_relu.rows(), trace.mlp_relu.cols());
    for (Eigen::Index i = 0; i < trace.dropout_mask.size(); ++i)
      trace.dropout_mask.data()[i] =
          rng::uniform01(engine) < arch.dropout_rate ? Real(0) : keep_scale;
    trace.mlp_dropped = trace.mlp_relu.cwiseProduct(trace.dropout_mask);
  } else {
    trace.dropout_mask = MatX<Real>::Ones(trace.mlp_relu.rows(), trace.mlp_relu.cols());
    trace.mlp_dropped = trace.mlp_relu;
  }

  MatX<Real> cur = trace.mlp_dropped;
  for (std::size_t li = 1; li < params.mlp.size(); ++li) {
    MatX<Real> out = cur * params.mlp[li].weight;
    out.rowwise() += params.mlp[li].bias.transpose();
    trace.mlp_out.push_back(out);
    cur = std::move(out);
  }
  trace.predictions = cur;
  require(trace.predictions.cols() == 3, "forward: prediction width must be 3");
  return trace;
}

template <typename Real>
ForwardTrace<Real> forward(const PatchTensor<Real>& patches, const ModelParams<Real>& params,
                           RunMode mode, std::uint64_t seed = 0) {
  return forward(patch_matrix(patches), patches.subjects, patches.landmarks, patches.points,
                 params, mode, seed);
}

namespace detail {

/// Gradient of the attention output `global` w.r.t. the pre-pool features and
/// the head parameters. d_global is m×f. Adds into d_s.
template <typename Real>
void attention_backward(const MatX<Real>& s, std::size_t subjects, const VecX<Real>& w,
                        const AttentionResult<Real>& fwd, const MatX<Real>& d_global,
                        MatX<Real>& d_s, VecX<Real>& d_w, Real& d_b) {
  const Eigen::Index rows_per_subject = s.rows() / static_cast<Eigen::Index>(subjects);
  for (std::size_t i = 0; i < subjects; ++i) {
    const Eigen::Index lo = static_cast<Eigen::Index>(i) * rows_per_subject;
    const auto dg = d_global.row(static_cast<Eigen::Index>(i));

    // Direct path G = Σ a_j s_j plus the softmax/tanh/score chain.
    Real weighted_sum = Real(0);  // Σ_k a_k · dA_k, for the softmax Jacobian
    std::vector<std::pair<Eigen::Index, Real>> d_a;  // selected rows only
    for (Eigen::Index j = lo; j < lo + rows_per_subject; ++j) {
      if (fwd.weights[j] == Real(0)) continue;
      const Real da = dg.dot(s.row(j));
      d_a.emplace_back(j, da);
      weighted_sum += fwd.weights[j] * da;
      d_s.row(j) += fwd.weights[j] * dg;
    }
    for (const auto& [j, da] : d_a) {
      const Real dt = fwd.weights[j] * (da - weighted_sum);
      const Real du = dt * (Real(1) - fwd.tanh_scores[j] * fwd.tanh_scores[j]);
      d_w += du * s.row(j).transpose();
      d_b += du;
      d_s.row(j) += du * w.transpose();
    }
  }
}

}  // namespace detail

/// Exact reverse-mode gradients for every parameter given dLoss/dPredictions
/// ((m·n)×3). The trace must come from a train-mode forward pass.
template <typename Real>
ModelParams<Real> backward(const ForwardTrace<Real>& trace, const ModelParams<Real>& params,
                           const MatX<Real>& d_pred) {
  require(trace.predictions.rows() == d_pred.rows() && d_pred.cols() == 3,
          "backward: upstream gradient shape mismatch");
  require(trace.input.size() > 0, "backward: trace has no cached activations");
  const ArchConfig& arch = params.arch;
  ModelParams<Real> grads = zeros_like(params);

  // --- MLP head (last layer back to the dropout) ---
  MatX<Real> d_cur = d_pred;
  for (std::size_t li = params.mlp.size(); li-- > 1;) {
    const MatX<Real>& layer_in = (li == 1) ? trace.mlp_dropped : trace.mlp_out[li - 2];
    grads.mlp[li].weight.noalias() = layer_in.transpose() * d_cur;
    grads.mlp[li].bias = d_cur.colwise().sum().transpose();
    d_cur = (d_cur * params.mlp[li].weight.transpose()).eval();
  }
  // First MLP layer: dropout, then relu, then the affine map.
  MatX<Real> d_relu = d_cur.cwiseProduct(trace.dropout_mask);
  MatX<Real> d_z1 =
      d_relu.cwiseProduct((trace.mlp_relu.array() > Real(0)).template cast<Real>().matrix());
  grads.mlp[0].weight.noalias() = trace.hybrid.transpose() * d_z1;
  grads.mlp[0].bias = d_z1.colwise().sum().transpose();
  MatX<Real> d_hybrid = d_z1 * params.mlp[0].weight.transpose();

  // --- Split hybrid gradient into local-feature and global-descriptor parts ---
  const std::size_t m = trace.m, n = trace.n;
  const std::size_t kf = arch.pooled_points(trace.K);
  const int ff = arch.filters.back();
  const auto att_blocks = arch.attention_blocks();

  MatX<Real> d_final_local = MatX<Real>::Zero(trace.pooled.back().rows(), ff);
  std::vector<MatX<Real>> d_global;
  for (const auto& att : trace.att)
    d_global.push_back(MatX<Real>::Zero(att.global.rows(), att.global.cols()));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const Eigen::Index row = static_cast<Eigen::Index>(i * n + j);
      const Eigen::Index base = static_cast<Eigen::Index>((i * n + j) * kf);
      Eigen::Index col = 0;
      for (std::size_t p = 0; p < kf; ++p)
        for (int c = 0; c < ff; ++c)
          d_final_local(base + static_cast<Eigen::Index>(p), c) += d_hybrid(row, col++);
      for (std::size_t a = 0; a < trace.att.size(); ++a)
        for (Eigen::Index c = 0; c < d_global[a].cols(); ++c)
          d_global[a](static_cast<Eigen::Index>(i), c) += d_hybrid(row, col++);
    }
  }

  // --- Conv blocks in reverse ---
  MatX<Real> d_pooled = std::move(d_final_local);
  for (int b = arch.depth(); b-- > 0;) {
    const MatX<Real>& s = trace.conv_out[static_cast<std::size_t>(2 * b + 1)];
    // Pool backward: gradient flows to the winning rows only.
    MatX<Real> d_s = MatX<Real>::Zero(s.rows(), s.cols());
    const MatXi& argmax = trace.pool_argmax[static_cast<std::size_t>(b)];
    for (Eigen::Index r = 0; r < d_pooled.rows(); ++r)
      for (Eigen::Index c = 0; c < d_pooled.cols(); ++c)
        d_s(argmax(r, c), c) += d_pooled(r, c);

    const auto it = std::find(att_blocks.begin(), att_blocks.end(), b);
    if (it != att_blocks.end()) {
      const std::size_t a = static_cast<std::size_t>(it - att_blocks.begin());
      Real d_bias = Real(0);
      detail::attention_backward(s, m, params.heads[a].weight, trace.att[a], d_global[a], d_s,
                                 grads.heads[a].weight, d_bias);
      grads.heads[a].bias[0] = d_bias;
    }

    // Second conv layer of the block.
    const MatX<Real>& h1 = trace.conv_out[static_cast<std::size_t>(2 * b)];
    MatX<Real> d_pre2 =
        d_s.cwiseProduct((s.array() > Real(0)).template cast<Real>().matrix());
    grads.conv[static_cast<std::size_t>(2 * b + 1)].weight.noalias() = h1.transpose() * d_pre2;
    grads.conv[static_cast<std::size_t>(2 * b + 1)].bias = d_pre2.colwise().sum().transpose();
    MatX<Real> d_h1 = d_pre2 * params.conv[static_cast<std::size_t>(2 * b + 1)].weight.transpose();

    // First conv layer of the block.
    const MatX<Real>& block_in = (b == 0) ? trace.input : trace.pooled[static_cast<std::size_t>(b - 1)];
    MatX<Real> d_pre1 =
        d_h1.cwiseProduct((h1.array() > Real(0)).template cast<Real>().matrix());
    grads.conv[static_cast<std::size_t>(2 * b)].weight.noalias() = block_in.transpose() * d_pre1;
    grads.conv[static_cast<std::size_t>(2 * b)].bias = d_pre1.colwise().sum().transpose();
    if (b > 0) d_pooled = d_pre1 * params.conv[static_cast<std::size_t>(2 * b)].weight.transpose();
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, JSON header, float32 little-endian tensor payload.

inline constexpr char kCheckpointMagic[8] = {'P', 'A', 'L', 'N', 'E', 'T', 'C', 'K'};

template <typename Real>
void save_checkpoint(const ModelParams<Real>& params, const std::string& path,
                     const nlohmann::json& metadata = nlohmann::json::object()) {
  params.validate();
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t total = 0;
  params.for_each_tensor([&](const std::string& name, const auto& t) {
    tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
    total += static_cast<std::size_t>(t.size());
  });
  const nlohmann::json header{
      {"arch", arch_to_json(params.arch)}, {"tensors", tensors}, {"metadata", metadata}};
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t len = header_str.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  std::vector<float> buf;
  buf.reserve(total);
  params.for_each_tensor([&](const std::string&, const auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) buf.push_back(static_cast<float>(t.data()[i]));
  });
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw IoError("short write: " + path);
}

template <typename Real>
struct LoadedCheckpoint {
  ModelParams<Real> params;
  nlohmann::json metadata;
};

template <typename Real = float>
LoadedCheckpoint<Real> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw IoError("checkpoint: truncated header length in " + path);
  std::string header_str(len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("checkpoint: truncated header in " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const std::exception& e) {
    throw IoError("checkpoint: header parse failure in " + path + ": " + e.what());
  }

  LoadedCheckpoint<Real> loaded;
  const ArchConfig arch = arch_from_json(header.at("arch"));
  loaded.metadata = header.value("metadata", nlohmann::json::object());

  // Rebuild the parameter skeleton from the recorded tensor shapes; the arch
  // alone does not pin K, so shapes are authoritative.
  loaded.params.arch = arch;
  const auto& tensors = header.at("tensors");
  std::size_t ti = 0;
  auto next_shape = [&](const std::string& expect_prefix) {
    require(ti < tensors.size(), "checkpoint: missing tensor entry");
    const auto& e = tensors.at(ti++);
    const std::string name = e.at("name").get<std::string>();
    require(name.rfind(expect_prefix, 0) == 0,
            "checkpoint: unexpected tensor order at " + name + " (wanted " + expect_prefix + ")");
    return std::pair<Eigen::Index, Eigen::Index>(e.at("rows").get<Eigen::Index>(),
                                                 e.at("cols").get<Eigen::Index>());
  };
  for (int b = 0; b < arch.depth(); ++b) {
    for (int l = 0; l < 2; ++l) {
      auto [wr, wc] = next_shape("conv");
      auto [br, bc] = next_shape("conv");
      (void)bc;
      loaded.params.conv.push_back({MatX<Real>::Zero(wr, wc), VecX<Real>::Zero(br)});
    }
  }
  for (std::size_t a = 0; a < arch.attention_blocks().size(); ++a) {
    auto [wr, wc] = next_shape("att");
    (void)wc;
    auto [br, bc] = next_shape("att");
    (void)br;
    (void)bc;
    loaded.params.heads.push_back({VecX<Real>::Zero(wr), VecX<Real>::Zero(1)});
  }
  for (std::size_t l = 0; l < arch.mlp_widths.size(); ++l) {
    auto [wr, wc] = next_shape("mlp");
    auto [br, bc] = next_shape("mlp");
    (void)bc;
    loaded.params.mlp.push_back({MatX<Real>::Zero(wr, wc), VecX<Real>::Zero(br)});
  }

  std::size_t total = 0;
  loaded.params.for_each_tensor(
      [&](const std::string&, const auto& t) { total += static_cast<std::size_t>(t.size()); });
  std::vector<float> buf(total);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(total * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(total * sizeof(float)))
    throw IoError("checkpoint: truncated tensor payload in " + path);
  std::size_t off = 0;
  loaded.params.for_each_tensor([&](const std::string&, auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Real>(buf[off++]);
  });
  loaded.params.validate();
  return loaded;
}

}  // namespace palnet
