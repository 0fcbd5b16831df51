// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

// Per-token attribution scores toward a class logit.
//
// All three methods are templates over the scalar type so the same code
// produces inference-time scores (double) and differentiable scores for the
// attribution penalty (ad::Var).

#pragma once

#include <array>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "dref/common.hpp"
#include "dref/corpus.hpp"
#include "dref/model.hpp"

namespace dref {

enum class AttributionMethod : std::uint8_t { scaled_attention, integrated_gradients, deeplift };

inline std::string_view to_string(AttributionMethod m) {
  switch (m) {
    case AttributionMethod::scaled_attention: return "scaled_attention";
    case AttributionMethod::integrated_gradients: return "integrated_gradients";
    case AttributionMethod::deeplift: return "deeplift";
  }
  return "?";
}

inline AttributionMethod parse_method(std::string_view s) {
  if (s == "scaled_attention" || s == "attention") return AttributionMethod::scaled_attention;
  if (s == "ig" || s == "integrated_gradients") return AttributionMethod::integrated_gradients;
  if (s == "deeplift" || s == "dl") return AttributionMethod::deeplift;
  throw Error("unknown attribution method '" + std::string(s) + "'");
}

inline constexpr std::size_t kDefaultIgSteps = 50;

struct AttributionRecord {
  std::string instance_id;
  AttributionMethod method = AttributionMethod::scaled_attention;
  Label target_class = Label::hate;
  std::vector<double> raw_scores;
  std::vector<double> normalized_scores;

  friend bool operator==(const AttributionRecord&, const AttributionRecord&) = default;
};

/// Reference embeddings for IG and DeepLIFT; empty means all-zero.
struct BaselineInput {
  Matrix<double> embeddings;

  static BaselineInput zeros(std::size_t n, std::size_t d) { return {Matrix<double>(n, d)}; }
};

namespace detail {

inline const Matrix<double>& resolve_baseline(const BaselineInput& b, std::size_t n, std::size_t d,
                                              Matrix<double>& storage) {
  if (b.embeddings.rows == 0 && b.embeddings.cols == 0) {
    storage = Matrix<double>(n, d);
    return storage;
  }
  if (b.embeddings.rows != n || b.embeddings.cols != d) {
    throw Error("baseline shape " + std::to_string(b.embeddings.rows) + "x" + std::to_string(b.embeddings.cols) +
                " does not match instance " + std::to_string(n) + "x" + std::to_string(d));
  }
  return b.embeddings;
}

template <class T>
std::vector<T> row_sums(const Matrix<T>& m) {
  std::vector<T> out(m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) out[i] = sum(m.row(i));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scalar-generic kernels

/// alpha_i * d logit_c / d alpha_i, attention weights held at their forward values.
template <class T>
std::vector<T> scaled_attention_scores(const Weights<T>& w, const Matrix<T>& emb, const Activations<T>& act, Label c) {
  auto g = logit_attention_gradient(w, emb, c);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = act.alpha[i] * g[i];
  return g;
}

/// Integrated gradients per (token, dimension) with a midpoint Riemann sum.
/// Interpolation points are built from values only, so on a tape the path
/// points are constants and only the outer (x - x0) factor and the gradient
/// function depend on the parameters. `path_input`, when given, replaces the
/// values of `emb` as the path end point.
template <class T>
Matrix<T> integrated_gradients_kernel(const Weights<T>& w, const Matrix<T>& emb, const Matrix<double>& baseline,
                                      Label c, std::size_t steps, const Matrix<double>* path_input = nullptr) {
  if (steps < 1) throw Error("integrated gradients: steps must be >= 1");
  const std::size_t n = emb.rows, d = emb.cols;
  Matrix<T> avg(n, d, T(0.0));
  Matrix<T> point(n, d);
  const double inv = 1.0 / static_cast<double>(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const double frac = (static_cast<double>(s) + 0.5) * inv;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < d; ++k) {
        const double end = path_input ? (*path_input)(i, k) : value(emb(i, k));
        point(i, k) = T(baseline(i, k) + frac * (end - baseline(i, k)));
      }
    }
    const auto g = logit_input_gradient(w, point, run_forward(w, point), c);
    for (std::size_t k = 0; k < avg.data.size(); ++k) avg.data[k] = avg.data[k] + g.data[k];
  }
  Matrix<T> out(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      out(i, k) = (emb(i, k) - T(baseline(i, k))) * avg(i, k) * T(inv);
    }
  }
  return out;
}

/// Layers of the shipped classifier, in forward order, as DeepLIFT sees them.
inline const std::vector<std::string>& classifier_layers() {
  static const std::vector<std::string> layers = {"linear", "tanh", "linear", "softmax", "weighted_sum", "linear"};
  return layers;
}

/// Throws if any layer lacks a DeepLIFT rule.
inline void check_deeplift_layers(const std::vector<std::string>& layers) {
  static const std::vector<std::string> supported = {"linear", "tanh", "exp", "reciprocal",
                                                     "softmax", "product", "weighted_sum"};
  for (const auto& l : layers) {
    if (std::find(supported.begin(), supported.end(), l) == supported.end()) {
      throw Error("deeplift: unsupported layer type '" + l + "'");
    }
  }
}

namespace detail {

inline constexpr double kRescaleEps = 1e-9;

/// Rescale multiplier (y - y0) / (x - x0), falling back to the derivative at
/// the reference when the input barely moved.
template <class T, class DF>
T rescale(const T& x, const T& x0, const T& y, const T& y0, DF&& deriv) {
  if (std::abs(value(x) - value(x0)) < kRescaleEps) return deriv(x0);
  return (y - y0) / (x - x0);
}

}  // namespace detail

/// DeepLIFT contributions per (token, dimension) toward logit_c relative to
/// the baseline embeddings.
///
/// Element-wise nonlinearities (tanh, exp, 1/x) use the Rescale rule; the
/// softmax is decomposed into exp, a sum, a reciprocal and a product, and
/// two-input products y = a*b split the delta symmetrically:
///   dy = da * (b0 + db/2) + db * (a0 + da/2).
/// Every rule conserves its delta exactly, so the contributions sum to
/// logit_c(x) - logit_c(x0).
template <class T>
Matrix<T> deeplift_kernel(const Weights<T>& w, const Matrix<T>& emb, const Matrix<double>& baseline, Label c) {
  using std::exp;
  using std::tanh;
  check_deeplift_layers(classifier_layers());
  const std::size_t n = emb.rows, d = emb.cols;
  const T half(0.5);

  Matrix<T> ref(n, d);
  for (std::size_t k = 0; k < ref.data.size(); ++k) ref.data[k] = T(baseline.data[k]);

  // Reference and actual activations.
  Matrix<T> z0(n, d), u0(n, d), z(n, d), u(n, d);
  std::vector<T> s0(n), s(n), a0(n), a(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < d; ++m) {
      z0(i, m) = dot(w.proj_row(m), ref.row(i)) + w.proj_bias[m];
      u0(i, m) = tanh(z0(i, m));
      z(i, m) = dot(w.proj_row(m), emb.row(i)) + w.proj_bias[m];
      u(i, m) = tanh(z(i, m));
    }
    s0[i] = dot(std::span<const T>(w.query), u0.row(i));
    s[i] = dot(std::span<const T>(w.query), u.row(i));
  }
  // A common shift cancels in alpha and in every multiplier below.
  double shift_value = value(s0[0]);
  for (std::size_t i = 0; i < n; ++i) shift_value = std::max({shift_value, value(s0[i]), value(s[i])});
  const T shift(shift_value);
  for (std::size_t i = 0; i < n; ++i) {
    a0[i] = exp(s0[i] - shift);
    a[i] = exp(s[i] - shift);
  }
  const T big_z0 = sum(std::span<const T>(a0));
  const T big_z = sum(std::span<const T>(a));
  const T r0 = T(1.0) / big_z0;
  const T r = T(1.0) / big_z;
  const T d_r = r - r0;
  std::vector<T> d_a(n), alpha0(n), d_alpha(n);
  for (std::size_t i = 0; i < n; ++i) {
    d_a[i] = a[i] - a0[i];
    alpha0[i] = a0[i] * r0;
    d_alpha[i] = d_a[i] * (r0 + d_r * half) + d_r * (a0[i] + d_a[i] * half);
  }

  // Multipliers, output to input.
  const auto m_h = w.head_row(c);
  Matrix<T> m_e(n, d);
  std::vector<T> m_alpha(n), ref_plus_half(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      ref_plus_half[k] = ref(i, k) + (emb(i, k) - ref(i, k)) * half;
      m_e(i, k) = m_h[k] * (alpha0[i] + d_alpha[i] * half);
    }
    m_alpha[i] = dot(m_h, std::span<const T>(ref_plus_half));
  }
  std::vector<T> m_a(n), r_terms(n);
  for (std::size_t i = 0; i < n; ++i) {
    m_a[i] = m_alpha[i] * (r0 + d_r * half);
    r_terms[i] = m_alpha[i] * (a0[i] + d_a[i] * half);
  }
  const T m_r = sum(std::span<const T>(r_terms));
  const T m_sum = m_r * detail::rescale(big_z, big_z0, r, r0, [](const T& x) { return T(-1.0) / (x * x); });
  Matrix<T> proj_t(d, d);
  for (std::size_t row = 0; row < d; ++row) {
    for (std::size_t k = 0; k < d; ++k) proj_t(k, row) = w.proj[row * d + k];
  }
  std::vector<T> m_z(d);
  for (std::size_t i = 0; i < n; ++i) {
    const T m_s = (m_a[i] + m_sum) * detail::rescale(s[i], s0[i], a[i], a0[i], [&](const T& x) { return exp(x - shift); });
    for (std::size_t m = 0; m < d; ++m) {
      m_z[m] = m_s * w.query[m] * detail::rescale(z(i, m), z0(i, m), u(i, m), u0(i, m), [](const T& x) {
                 const T t = tanh(x);
                 return T(1.0) - t * t;
               });
    }
    for (std::size_t k = 0; k < d; ++k) m_e(i, k) = m_e(i, k) + dot(proj_t.row(k), std::span<const T>(m_z));
  }

  Matrix<T> contrib(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) contrib(i, k) = m_e(i, k) * (emb(i, k) - T(baseline(i, k)));
  }
  return contrib;
}

/// Per-token raw attribution, generic over the scalar type. Used both for
/// inference and inside the attribution penalty.
template <class T>
std::vector<T> token_attributions(AttributionMethod method, const Weights<T>& w, const Matrix<T>& emb,
                                  const Activations<T>& act, Label c, std::size_t ig_steps = kDefaultIgSteps) {
  switch (method) {
    case AttributionMethod::scaled_attention: return scaled_attention_scores(w, emb, act, c);
    case AttributionMethod::integrated_gradients:
      return detail::row_sums(integrated_gradients_kernel(w, emb, Matrix<double>(emb.rows, emb.cols), c, ig_steps));
    case AttributionMethod::deeplift:
      return detail::row_sums(deeplift_kernel(w, emb, Matrix<double>(emb.rows, emb.cols), c));
  }
  throw Error("unknown attribution method");
}

// ---------------------------------------------------------------------------
// Double-precision API

inline AttributionRecord normalize_local(AttributionRecord record) {
  record.normalized_scores.resize(record.raw_scores.size());
  for (std::size_t i = 0; i < record.raw_scores.size(); ++i) {
    const double x = record.raw_scores[i];
    if (!std::isfinite(x)) {
      throw Error("normalize_local: non-finite raw score at position " + std::to_string(i) + " of '" +
                  record.instance_id + "'");
    }
    record.normalized_scores[i] = sigmoid(x);
  }
  return record;
}

inline AttributionRecord make_record(const EncodedInstance& inst, AttributionMethod m, Label c,
                                     std::vector<double> raw) {
  return normalize_local(AttributionRecord{inst.id, m, c, std::move(raw), {}});
}

inline AttributionRecord scaled_attention(const ModelParams& p, const EncodedInstance& inst, Label target) {
  const auto emb = gather_embeddings(p, inst.ids);
  if (emb.rows == 0) throw Error("forward: instance has no tokens");
  const auto act = run_forward(p.weights, emb);
  return make_record(inst, AttributionMethod::scaled_attention, target,
                     scaled_attention_scores(p.weights, emb, act, target));
}

/// Per-(token, dimension) integrated gradients.
inline Matrix<double> integrated_gradients_dims(const ModelParams& p, const EncodedInstance& inst, Label target,
                                                const BaselineInput& baseline = {},
                                                std::size_t steps = kDefaultIgSteps) {
  if (steps < 1) throw Error("integrated gradients: steps must be >= 1");
  const auto emb = gather_embeddings(p, inst.ids);
  if (emb.rows == 0) throw Error("forward: instance has no tokens");
  Matrix<double> storage;
  const auto& base = detail::resolve_baseline(baseline, emb.rows, p.d, storage);
  return integrated_gradients_kernel(p.weights, emb, base, target, steps);
}

inline AttributionRecord integrated_gradients(const ModelParams& p, const EncodedInstance& inst, Label target,
                                              const BaselineInput& baseline = {},
                                              std::size_t steps = kDefaultIgSteps) {
  return make_record(inst, AttributionMethod::integrated_gradients, target,
                     detail::row_sums(integrated_gradients_dims(p, inst, target, baseline, steps)));
}

/// Per-(token, dimension) DeepLIFT contributions.
inline Matrix<double> deeplift_dims(const ModelParams& p, const EncodedInstance& inst, Label target,
                                    const BaselineInput& baseline = {}) {
  const auto emb = gather_embeddings(p, inst.ids);
  if (emb.rows == 0) throw Error("forward: instance has no tokens");
  Matrix<double> storage;
  const auto& base = detail::resolve_baseline(baseline, emb.rows, p.d, storage);
  return deeplift_kernel(p.weights, emb, base, target);
}

inline AttributionRecord deeplift(const ModelParams& p, const EncodedInstance& inst, Label target,
                                  const BaselineInput& baseline = {}) {
  return make_record(inst, AttributionMethod::deeplift, target, detail::row_sums(deeplift_dims(p, inst, target, baseline)));
}

/// Logit of `c` for an explicit embedding stack (used by completeness checks).
inline double logit_for(const ModelParams& p, const Matrix<double>& emb, Label c) {
  return run_forward(p.weights, emb).logits[index_of(c)];
}

inline AttributionRecord attribute(const ModelParams& p, const EncodedInstance& inst, AttributionMethod method,
                                   Label target, std::size_t ig_steps = kDefaultIgSteps) {
  switch (method) {
    case AttributionMethod::scaled_attention: return scaled_attention(p, inst, target);
    case AttributionMethod::integrated_gradients: return integrated_gradients(p, inst, target, {}, ig_steps);
    case AttributionMethod::deeplift: return deeplift(p, inst, target);
  }
  throw Error("unknown attribution method");
}

/// Attribution toward the instance's own predicted class.
inline AttributionRecord attribute_predicted(const ModelParams& p, const EncodedInstance& inst,
                                             AttributionMethod method, std::size_t ig_steps = kDefaultIgSteps) {
  return attribute(p, inst, method, forward(p, inst).predicted_class, ig_steps);
}

/// Tokens aligned with a record's scores (PAD positions removed).
inline std::vector<std::string> scored_tokens(const EncodedInstance& inst) {
  std::vector<std::string> out;
  for (auto pos : active_positions(inst.ids)) out.push_back(inst.tokens[pos]);
  return out;
}

/// One JSON-lines attribution dump record.
inline nlohmann::ordered_json to_json(const AttributionRecord& r, const std::vector<std::string>& tokens) {
  nlohmann::ordered_json j;
  j["instance_id"] = r.instance_id;
  j["method"] = std::string(to_string(r.method));
  j["target_class"] = std::string(to_string(r.target_class));
  j["tokens"] = tokens;
  j["raw_scores"] = r.raw_scores;
  j["normalized_scores"] = r.normalized_scores;
  return j;
}

}  // namespace dref
