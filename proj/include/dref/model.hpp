// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

// Embedding table -> additive attention pooling -> linear two-class head.
//
//   z_i = W e_i + b,  u_i = tanh(z_i),  s_i = q . u_i
//   alpha = softmax(s),  h = sum_i alpha_i e_i,  logits = C h + c0
//
// PAD positions are skipped entirely; attention runs over the remaining
// tokens only.

#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dref/autodiff.hpp"
#include "dref/common.hpp"
#include "dref/corpus.hpp"

namespace dref {

inline constexpr std::size_t kDefaultDim = 16;

/// Dense (non-embedding) parameters, generic over the scalar type.
template <class T>
struct Weights {
  std::size_t d = 0;
  std::vector<T> proj;       // d x d, row-major
  std::vector<T> proj_bias;  // d
  std::vector<T> query;      // d
  std::vector<T> head;       // 2 x d, row per class
  std::vector<T> head_bias;  // 2

  static Weights zeros(std::size_t d) {
    return Weights{d, std::vector<T>(d * d), std::vector<T>(d), std::vector<T>(d), std::vector<T>(kNumClasses * d),
                   std::vector<T>(kNumClasses)};
  }

  std::span<const T> proj_row(std::size_t r) const { return {proj.data() + r * d, d}; }
  std::span<const T> head_row(Label c) const { return {head.data() + index_of(c) * d, d}; }

  friend bool operator==(const Weights&, const Weights&) = default;
};

/// Visits corresponding members of two weight sets in a fixed order.
template <class A, class B, class F>
void zip_weights(A& a, B& b, F&& f) {
  f(a.proj, b.proj);
  f(a.proj_bias, b.proj_bias);
  f(a.query, b.query);
  f(a.head, b.head);
  f(a.head_bias, b.head_bias);
}

struct ModelParams {
  std::size_t d = 0;
  Matrix<double> embedding;  // |V| x d, row 0 (PAD) fixed at zero
  Weights<double> weights;

  std::size_t vocab_size() const { return embedding.rows; }
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Uniform(-0.1, 0.1) initialisation; the PAD row is zero.
inline ModelParams init_params(std::size_t vocab_size, std::size_t d, std::uint64_t seed) {
  if (d < 1) throw Error("embedding dimension must be >= 1");
  if (vocab_size <= static_cast<std::size_t>(kPadId)) throw Error("vocabulary too small");
  Rng rng(derive_seed(seed, 0x1417));
  auto u = [&] { return rng.uniform(-0.1, 0.1); };
  ModelParams p{d, Matrix<double>(vocab_size, d), Weights<double>::zeros(d)};
  for (std::size_t r = 0; r < vocab_size; ++r) {
    for (std::size_t k = 0; k < d; ++k) p.embedding(r, k) = r == static_cast<std::size_t>(kPadId) ? 0.0 : u();
  }
  zip_weights(p.weights, p.weights, [&](auto& a, auto&) {
    for (auto& x : a) x = u();
  });
  return p;
}

// ---------------------------------------------------------------------------
// Scalar-generic forward and input-gradient formulas

template <class T>
struct Activations {
  Matrix<T> hidden;  // u, n x d
  std::vector<T> scores;
  std::vector<T> alpha;
  std::vector<T> pooled;
  std::array<T, kNumClasses> logits;
};

namespace detail {

template <class T>
std::vector<T> softmax(std::span<const T> s) {
  using std::exp;
  double shift = value(s[0]);
  for (const auto& x : s) shift = std::max(shift, value(x));
  std::vector<T> e;
  e.reserve(s.size());
  for (const auto& x : s) e.push_back(exp(x - T(shift)));
  const T z = sum(std::span<const T>(e));
  for (auto& x : e) x = x / z;
  return e;
}

template <class T>
std::vector<T> column(const Matrix<T>& m, std::size_t k) {
  std::vector<T> c(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) c[r] = m(r, k);
  return c;
}

}  // namespace detail

/// logits = C h + c0 with h = sum_i alpha_i e_i.
template <class T>
std::array<T, kNumClasses> head_logits(const Weights<T>& w, const Matrix<T>& emb, std::span<const T> alpha,
                                       std::vector<T>* pooled_out = nullptr) {
  std::vector<T> pooled(w.d);
  for (std::size_t k = 0; k < w.d; ++k) {
    const auto col = detail::column(emb, k);
    pooled[k] = dot(alpha, std::span<const T>(col));
  }
  std::array<T, kNumClasses> logits;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    logits[c] = dot(w.head_row(label_at(c)), std::span<const T>(pooled)) + w.head_bias[c];
  }
  if (pooled_out) *pooled_out = std::move(pooled);
  return logits;
}

template <class T>
Activations<T> run_forward(const Weights<T>& w, const Matrix<T>& emb) {
  using std::tanh;
  const std::size_t n = emb.rows, d = w.d;
  Activations<T> a;
  a.hidden = Matrix<T>(n, d);
  a.scores.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) a.hidden(i, k) = tanh(dot(w.proj_row(k), emb.row(i)) + w.proj_bias[k]);
    a.scores[i] = dot(std::span<const T>(w.query), a.hidden.row(i));
  }
  a.alpha = detail::softmax(std::span<const T>(a.scores));
  a.logits = head_logits(w, emb, std::span<const T>(a.alpha), &a.pooled);
  return a;
}

/// d logit_c / d alpha_i with the attention weights taken as free variables.
template <class T>
std::vector<T> logit_attention_gradient(const Weights<T>& w, const Matrix<T>& emb, Label c) {
  std::vector<T> g(emb.rows);
  for (std::size_t i = 0; i < emb.rows; ++i) g[i] = dot(w.head_row(c), emb.row(i));
  return g;
}

/// d logit_c / d e_i for every token, through both the pooling and the
/// attention scores.
template <class T>
Matrix<T> logit_input_gradient(const Weights<T>& w, const Matrix<T>& emb, const Activations<T>& a, Label c) {
  const std::size_t n = emb.rows, d = w.d;
  const auto ga = logit_attention_gradient(w, emb, c);
  const T mean_ga = dot(std::span<const T>(a.alpha), std::span<const T>(ga));
  Matrix<T> proj_t(d, d);
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t k = 0; k < d; ++k) proj_t(k, r) = w.proj[r * d + k];
  }
  const auto head = w.head_row(c);
  Matrix<T> ge(n, d);
  std::vector<T> gz(d);
  for (std::size_t i = 0; i < n; ++i) {
    const T gs = a.alpha[i] * (ga[i] - mean_ga);
    for (std::size_t m = 0; m < d; ++m) {
      const T u = a.hidden(i, m);
      gz[m] = gs * w.query[m] * (T(1.0) - u * u);
    }
    for (std::size_t k = 0; k < d; ++k) {
      ge(i, k) = a.alpha[i] * head[k] + dot(proj_t.row(k), std::span<const T>(gz));
    }
  }
  return ge;
}

template <class T>
std::array<T, kNumClasses> class_probabilities(const std::array<T, kNumClasses>& logits) {
  auto p = detail::softmax(std::span<const T>(logits));
  return {p[0], p[1]};
}

/// Two-class cross-entropy -log softmax(logits)[gold].
template <class T>
T cross_entropy(const std::array<T, kNumClasses>& logits, Label gold) {
  using std::exp;
  using std::log;
  const double shift = std::max(value(logits[0]), value(logits[1]));
  const T lse = T(shift) + log(exp(logits[0] - T(shift)) + exp(logits[1] - T(shift)));
  return lse - logits[index_of(gold)];
}

/// Argmax; an exact tie goes to non-hate.
inline Label argmax_label(double p_hate, double p_non_hate) {
  return p_hate > p_non_hate ? Label::hate : Label::non_hate;
}

template <class T>
Label predicted_label(const std::array<T, kNumClasses>& logits) {
  return argmax_label(value(logits[index_of(Label::hate)]), value(logits[index_of(Label::non_hate)]));
}

// ---------------------------------------------------------------------------
// Double-precision API

/// Ids of the non-PAD positions and their positions in the original list.
inline std::vector<std::size_t> active_positions(std::span<const std::int32_t> ids) {
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != kPadId) pos.push_back(i);
  }
  return pos;
}

inline Matrix<double> gather_embeddings(const ModelParams& p, std::span<const std::int32_t> ids) {
  const auto pos = active_positions(ids);
  Matrix<double> e(pos.size(), p.d);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const auto id = ids[pos[i]];
    if (id < 0 || static_cast<std::size_t>(id) >= p.vocab_size()) {
      throw Error("token id " + std::to_string(id) + " outside the embedding table");
    }
    std::copy_n(p.embedding.row(static_cast<std::size_t>(id)).begin(), p.d, e.row(i).begin());
  }
  return e;
}

struct ForwardTrace {
  std::vector<std::int32_t> token_ids;  // as given, PAD included
  std::vector<std::size_t> positions;   // non-PAD positions
  Matrix<double> token_embeddings;      // one row per non-PAD token
  std::vector<double> attention_weights;
  std::array<double, kNumClasses> logits{};
  std::array<double, kNumClasses> class_probabilities{};
  Label predicted_class = Label::non_hate;
  std::size_t d = 0;
};

inline ForwardTrace forward(const ModelParams& p, std::span<const std::int32_t> ids) {
  ForwardTrace t;
  t.token_ids.assign(ids.begin(), ids.end());
  t.positions = active_positions(ids);
  if (t.positions.empty()) throw Error("forward: instance has no tokens");
  t.token_embeddings = gather_embeddings(p, ids);
  const auto a = run_forward(p.weights, t.token_embeddings);
  t.attention_weights = a.alpha;
  t.logits = a.logits;
  t.class_probabilities = class_probabilities(a.logits);
  t.predicted_class = argmax_label(t.class_probabilities[0], t.class_probabilities[1]);
  t.d = p.d;
  return t;
}

inline ForwardTrace forward(const ModelParams& p, const EncodedInstance& inst) { return forward(p, inst.ids); }

/// Parameter gradients: dense weights plus the touched embedding rows.
struct Gradients {
  Weights<double> weights;
  std::map<std::int32_t, std::vector<double>> embedding_rows;

  static Gradients zeros(std::size_t d) { return Gradients{Weights<double>::zeros(d), {}}; }

  void add(const Gradients& o, double scale = 1.0) {
    zip_weights(weights, o.weights, [&](auto& a, const auto& b) {
      for (std::size_t k = 0; k < a.size(); ++k) a[k] += scale * b[k];
    });
    for (const auto& [id, row] : o.embedding_rows) {
      auto& dst = embedding_rows[id];
      if (dst.empty()) dst.assign(row.size(), 0.0);
      for (std::size_t k = 0; k < row.size(); ++k) dst[k] += scale * row[k];
    }
  }
};

/// Parameters lifted onto a tape: every dense weight and every embedding row
/// referenced so far is a leaf.
class TapeParams {
 public:
  TapeParams(ad::Tape& tape, const ModelParams& p) : tape_(tape), params_(p) {
    weights_ = Weights<ad::Var>::zeros(p.d);
    zip_weights(p.weights, weights_, [&](const auto& src, auto& dst) {
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] = tape.leaf(src[k]);
    });
  }

  const Weights<ad::Var>& weights() const { return weights_; }

  /// Embedding stack for the non-PAD tokens of `ids`.
  Matrix<ad::Var> embeddings(std::span<const std::int32_t> ids) {
    const auto pos = active_positions(ids);
    Matrix<ad::Var> e(pos.size(), params_.d);
    for (std::size_t i = 0; i < pos.size(); ++i) {
      const auto& row = row_leaves(ids[pos[i]]);
      std::copy(row.begin(), row.end(), e.row(i).begin());
    }
    return e;
  }

  Gradients gradients(const std::vector<double>& adj) const {
    Gradients g = Gradients::zeros(params_.d);
    zip_weights(weights_, g.weights, [&](const auto& src, auto& dst) {
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] = ad::Tape::adjoint(adj, src[k]);
    });
    for (const auto& [id, row] : rows_) {
      if (id == kPadId) continue;
      auto& dst = g.embedding_rows[id];
      dst.resize(row.size());
      for (std::size_t k = 0; k < row.size(); ++k) dst[k] = ad::Tape::adjoint(adj, row[k]);
    }
    return g;
  }

 private:
  const std::vector<ad::Var>& row_leaves(std::int32_t id) {
    if (id < 0 || static_cast<std::size_t>(id) >= params_.vocab_size()) {
      throw Error("token id " + std::to_string(id) + " outside the embedding table");
    }
    auto it = rows_.find(id);
    if (it != rows_.end()) return it->second;
    std::vector<ad::Var> row(params_.d);
    for (std::size_t k = 0; k < params_.d; ++k) row[k] = tape_.leaf(params_.embedding(static_cast<std::size_t>(id), k));
    return rows_.emplace(id, std::move(row)).first->second;
  }

  ad::Tape& tape_;
  const ModelParams& params_;
  Weights<ad::Var> weights_;
  std::map<std::int32_t, std::vector<ad::Var>> rows_;
};

enum class ScalarTarget { logit, probability, loss, constant };
enum class GradientWrt { embeddings, attention_weights, parameters };

struct GradientRequest {
  ScalarTarget target = ScalarTarget::logit;
  std::optional<Label> cls;  ///< class of the logit/probability, or gold label for the loss
  GradientWrt wrt = GradientWrt::embeddings;
};

struct GradientValues {
  Matrix<double> embeddings;       ///< one row per position in trace.token_ids (PAD rows zero)
  std::vector<double> attention;   ///< one entry per non-PAD token
  Gradients parameters;
};

/// Exact reverse-mode derivative of the requested scalar of `trace`.
inline GradientValues gradient(const ModelParams& p, const ForwardTrace& trace, const GradientRequest& req) {
  if (trace.d != p.d || trace.positions.empty()) throw Error("gradient: trace was not produced with these parameters");
  if (req.target != ScalarTarget::constant && !req.cls) {
    throw Error("gradient: requested scalar is not in the trace (no class given)");
  }
  GradientValues out;
  const std::size_t n = trace.positions.size();
  out.embeddings = Matrix<double>(trace.token_ids.size(), p.d);
  out.attention.assign(n, 0.0);
  out.parameters = Gradients::zeros(p.d);
  if (req.target == ScalarTarget::constant) return out;

  ad::Tape tape;
  Weights<ad::Var> w = Weights<ad::Var>::zeros(p.d);
  zip_weights(p.weights, w, [&](const auto& src, auto& dst) {
    for (std::size_t k = 0; k < src.size(); ++k) {
      dst[k] = ad::Var(src[k]);
    }
  });
  std::optional<TapeParams> lifted;
  Matrix<ad::Var> emb(n, p.d);
  if (req.wrt == GradientWrt::parameters) {
    lifted.emplace(tape, p);
    w = lifted->weights();
    emb = lifted->embeddings(trace.token_ids);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < p.d; ++k) {
        const double x = trace.token_embeddings(i, k);
        emb(i, k) = req.wrt == GradientWrt::embeddings ? tape.leaf(x) : ad::Var(x);
      }
    }
  }

  std::array<ad::Var, kNumClasses> logits;
  std::vector<ad::Var> alpha;
  if (req.wrt == GradientWrt::attention_weights) {
    for (double a : trace.attention_weights) alpha.push_back(tape.leaf(a));
    logits = head_logits(w, emb, std::span<const ad::Var>(alpha));
  } else {
    logits = run_forward(w, emb).logits;
  }

  ad::Var scalar;
  switch (req.target) {
    case ScalarTarget::logit: scalar = logits[index_of(*req.cls)]; break;
    case ScalarTarget::probability: scalar = class_probabilities(logits)[index_of(*req.cls)]; break;
    case ScalarTarget::loss: scalar = cross_entropy(logits, *req.cls); break;
    case ScalarTarget::constant: break;
  }
  const auto adj = tape.backward(scalar);

  switch (req.wrt) {
    case GradientWrt::embeddings:
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < p.d; ++k) out.embeddings(trace.positions[i], k) = ad::Tape::adjoint(adj, emb(i, k));
      }
      break;
    case GradientWrt::attention_weights:
      for (std::size_t i = 0; i < n; ++i) out.attention[i] = ad::Tape::adjoint(adj, alpha[i]);
      break;
    case GradientWrt::parameters: out.parameters = lifted->gradients(adj); break;
  }
  return out;
}

struct Prediction {
  std::string id;
  Label predicted = Label::non_hate;
  std::array<double, kNumClasses> probabilities{};
};

inline std::vector<Prediction> predict(const ModelParams& p, const std::vector<EncodedInstance>& data,
                                       std::size_t jobs = 1) {
  std::vector<Prediction> out(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t i) {
    const auto t = forward(p, data[i]);
    out[i] = Prediction{data[i].id, t.predicted_class, t.class_probabilities};
  });
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  std::size_t batch_size = 8;
};

/// Adam moments with decoupled weight decay.
struct OptimizerState {
  Matrix<double> m_embedding, v_embedding;
  Weights<double> m_weights, v_weights;
  std::size_t step = 0;

  static OptimizerState for_params(const ModelParams& p) {
    return OptimizerState{Matrix<double>(p.vocab_size(), p.d), Matrix<double>(p.vocab_size(), p.d),
                          Weights<double>::zeros(p.d), Weights<double>::zeros(p.d), 0};
  }
};

inline void adamw_step(ModelParams& p, OptimizerState& s, const Gradients& g, const TrainConfig& cfg) {
  ++s.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.step));
  auto update = [&](double& x, double& m, double& v, double grad) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad;
    x -= cfg.learning_rate * ((m / bc1) / (std::sqrt(v / bc2) + cfg.epsilon) + cfg.weight_decay * x);
  };
  for (std::size_t k = 0; k < p.weights.proj.size(); ++k)
    update(p.weights.proj[k], s.m_weights.proj[k], s.v_weights.proj[k], g.weights.proj[k]);
  for (std::size_t k = 0; k < p.d; ++k) {
    update(p.weights.proj_bias[k], s.m_weights.proj_bias[k], s.v_weights.proj_bias[k], g.weights.proj_bias[k]);
    update(p.weights.query[k], s.m_weights.query[k], s.v_weights.query[k], g.weights.query[k]);
  }
  for (std::size_t k = 0; k < p.weights.head.size(); ++k)
    update(p.weights.head[k], s.m_weights.head[k], s.v_weights.head[k], g.weights.head[k]);
  for (std::size_t k = 0; k < kNumClasses; ++k)
    update(p.weights.head_bias[k], s.m_weights.head_bias[k], s.v_weights.head_bias[k], g.weights.head_bias[k]);

  for (std::size_t r = 0; r < p.vocab_size(); ++r) {
    if (r == static_cast<std::size_t>(kPadId)) continue;
    auto it = g.embedding_rows.find(static_cast<std::int32_t>(r));
    for (std::size_t k = 0; k < p.d; ++k) {
      const double grad = it == g.embedding_rows.end() ? 0.0 : it->second[k];
      update(p.embedding(r, k), s.m_embedding(r, k), s.v_embedding(r, k), grad);
    }
  }
}

/// One instance as recorded on the tape, handed to attribution-loss callbacks.
struct TapeInstance {
  std::string_view id;
  const Weights<ad::Var>& weights;
  const Matrix<ad::Var>& embeddings;  // non-PAD tokens only
  std::span<const std::int32_t> ids;  // non-PAD ids, aligned with embeddings
  const Activations<ad::Var>& activations;
  Label predicted;
};

using AttributionLossFn = std::function<ad::Var(const TapeInstance&)>;

/// L = mean cross-entropy + lambda * (sum of callback values over the batch).
struct LossSpec {
  double lambda = 0.0;
  AttributionLossFn attribution_loss;

  bool has_attribution_term() const { return lambda != 0.0 && static_cast<bool>(attribution_loss); }
};

struct EpochStats {
  double mean_classification_loss = 0.0;
  double mean_attribution_loss = 0.0;
  double train_accuracy = 0.0;
  std::size_t batches = 0;

  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

inline std::vector<std::int32_t> non_pad_ids(std::span<const std::int32_t> ids) {
  std::vector<std::int32_t> out;
  for (auto id : ids) {
    if (id != kPadId) out.push_back(id);
  }
  return out;
}

/// One shuffled pass of mini-batch AdamW over `data`.
inline EpochStats train_epoch(ModelParams& p, const std::vector<EncodedInstance>& data, const LossSpec& loss,
                              OptimizerState& opt, const TrainConfig& cfg, std::uint64_t seed) {
  if (data.empty()) throw Error("train_epoch: empty training data");
  if (cfg.batch_size == 0) throw Error("train_epoch: batch size must be >= 1");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());

  EpochStats stats;
  std::size_t correct = 0;
  ad::Tape tape;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    tape.clear();
    TapeParams lifted(tape, p);
    std::vector<ad::Var> ce_terms, atr_terms;
    for (std::size_t b = start; b < end; ++b) {
      const auto& inst = data[order[b]];
      const auto ids = non_pad_ids(inst.ids);
      if (ids.empty()) throw Error("train_epoch: instance '" + inst.id + "' has no tokens");
      const auto emb = lifted.embeddings(ids);
      const auto act = run_forward(lifted.weights(), emb);
      const Label pred = predicted_label(act.logits);
      if (pred == inst.label) ++correct;
      ce_terms.push_back(cross_entropy(act.logits, inst.label));
      if (loss.has_attribution_term()) {
        atr_terms.push_back(loss.attribution_loss(TapeInstance{inst.id, lifted.weights(), emb, ids, act, pred}));
      }
    }
    const double inv = 1.0 / static_cast<double>(end - start);
    const ad::Var ce = ad::sum(ce_terms) * ad::Var(inv);
    ad::Var total = ce;
    double atr_value = 0.0;
    if (loss.has_attribution_term()) {
      const ad::Var atr = ad::sum(atr_terms);
      atr_value = atr.v;
      total = ce + atr * ad::Var(loss.lambda);
    }
    const std::size_t batch_index = start / cfg.batch_size;
    if (!std::isfinite(total.v)) {
      throw Error("train_epoch: non-finite loss in batch " + std::to_string(batch_index) +
                  " (classification " + std::to_string(ce.v) + ", attribution " + std::to_string(atr_value) + ")");
    }
    adamw_step(p, opt, lifted.gradients(tape.backward(total)), cfg);
    stats.mean_classification_loss += ce.v;
    stats.mean_attribution_loss += atr_value;
    ++stats.batches;
  }
  stats.mean_classification_loss /= static_cast<double>(stats.batches);
  stats.mean_attribution_loss /= static_cast<double>(stats.batches);
  stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return stats;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void save_checkpoint(const std::string& path, const ModelParams& p, const Vocabulary& vocab) {
  if (vocab.size() != p.vocab_size()) throw Error("save_checkpoint: vocabulary size does not match embedding table");
  nlohmann::ordered_json j;
  j["format"] = "dref-checkpoint-v1";
  j["d"] = p.d;
  j["vocab_size"] = p.vocab_size();
  j["vocab_hash"] = hex64(vocab.hash());
  j["embedding"] = p.embedding.data;
  j["proj"] = p.weights.proj;
  j["proj_bias"] = p.weights.proj_bias;
  j["query"] = p.weights.query;
  j["head"] = p.weights.head;
  j["head_bias"] = p.weights.head_bias;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << j.dump() << '\n';
}

inline ModelParams load_checkpoint(const std::string& path, const Vocabulary& vocab) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed checkpoint " + path + ": " + e.what());
  }
  if (j.value("format", "") != "dref-checkpoint-v1") throw Error("unsupported checkpoint format in " + path);
  if (j.at("vocab_hash").get<std::string>() != hex64(vocab.hash())) {
    throw Error("checkpoint " + path + " was trained with a different vocabulary");
  }
  ModelParams p;
  p.d = j.at("d").get<std::size_t>();
  const auto v = j.at("vocab_size").get<std::size_t>();
  p.embedding = Matrix<double>(v, p.d);
  p.embedding.data = j.at("embedding").get<std::vector<double>>();
  p.weights.d = p.d;
  p.weights.proj = j.at("proj").get<std::vector<double>>();
  p.weights.proj_bias = j.at("proj_bias").get<std::vector<double>>();
  p.weights.query = j.at("query").get<std::vector<double>>();
  p.weights.head = j.at("head").get<std::vector<double>>();
  p.weights.head_bias = j.at("head_bias").get<std::vector<double>>();
  if (p.embedding.data.size() != v * p.d || p.weights.proj.size() != p.d * p.d || p.weights.proj_bias.size() != p.d ||
      p.weights.query.size() != p.d || p.weights.head.size() != kNumClasses * p.d ||
      p.weights.head_bias.size() != kNumClasses) {
    throw Error("checkpoint " + path + " has inconsistent tensor shapes");
  }
  return p;
}

}  // namespace dref
