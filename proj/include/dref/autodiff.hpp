// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

// Scalar reverse-mode differentiation on an explicit tape.
//
// Model code is written once as templates over the scalar type. Instantiated
// with double it is the fast inference path; instantiated with ad::Var every
// arithmetic operation is recorded and Tape::backward yields exact adjoints.
// Hand-written gradient formulas (used inside attribution scores) are
// themselves recorded, so losses built on attributions can be differentiated
// with respect to the parameters.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dref/common.hpp"

namespace dref::ad {

class Tape;

/// A recorded scalar. Constants carry index -1 and no tape.
struct Var {
  double v = 0.0;
  std::int32_t i = -1;
  Tape* t = nullptr;

  Var() = default;
  Var(double value) : v(value) {}  // NOLINT: implicit constants keep model code generic
  Var(double value, std::int32_t index, Tape* tape) : v(value), i(index), t(tape) {}

  bool constant() const { return i < 0; }
};

class Tape {
 public:
  Var leaf(double v) { return push(v, {}, {}); }

  /// Records a node with the given parents and local partial derivatives.
  /// Constant parents are skipped; if none remain the result is constant.
  Var push(double v, std::span<const Var> parents, std::span<const double> partials) {
    const auto first = static_cast<std::uint32_t>(parent_.size());
    for (std::size_t k = 0; k < parents.size(); ++k) {
      if (parents[k].constant()) continue;
      parent_.push_back(static_cast<std::uint32_t>(parents[k].i));
      partial_.push_back(partials[k]);
    }
    const auto count = static_cast<std::uint32_t>(parent_.size()) - first;
    if (count == 0 && !parents.empty()) return Var(v);
    nodes_.push_back({first, count});
    return Var(v, static_cast<std::int32_t>(nodes_.size() - 1), this);
  }

  Var unary(double v, const Var& a, double da) {
    if (a.constant()) return Var(v);
    const Var p[1] = {a};
    const double d[1] = {da};
    return push(v, p, d);
  }

  Var binary(double v, const Var& a, double da, const Var& b, double db) {
    if (a.constant() && b.constant()) return Var(v);
    const Var p[2] = {a, b};
    const double d[2] = {da, db};
    return push(v, p, d);
  }

  /// Adjoints of every node with respect to `root`.
  std::vector<double> backward(const Var& root) const {
    std::vector<double> adj(nodes_.size(), 0.0);
    if (root.constant()) return adj;
    adj[static_cast<std::size_t>(root.i)] = 1.0;
    for (std::size_t n = static_cast<std::size_t>(root.i) + 1; n-- > 0;) {
      const double a = adj[n];
      if (a == 0.0) continue;
      const Node& node = nodes_[n];
      for (std::uint32_t k = node.first; k < node.first + node.count; ++k) {
        adj[parent_[k]] += partial_[k] * a;
      }
    }
    return adj;
  }

  static double adjoint(const std::vector<double>& adj, const Var& x) {
    return x.constant() ? 0.0 : adj[static_cast<std::size_t>(x.i)];
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    parent_.clear();
    partial_.clear();
  }

 private:
  struct Node {
    std::uint32_t first;
    std::uint32_t count;
  };
  std::vector<Node> nodes_;
  std::vector<std::uint32_t> parent_;
  std::vector<double> partial_;
};

namespace detail {
inline Tape* tape_of(const Var& a, const Var& b) { return a.t ? a.t : b.t; }
}  // namespace detail

inline double value(const Var& x) { return x.v; }

inline Var operator+(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  return t ? t->binary(a.v + b.v, a, 1.0, b, 1.0) : Var(a.v + b.v);
}
inline Var operator-(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  return t ? t->binary(a.v - b.v, a, 1.0, b, -1.0) : Var(a.v - b.v);
}
inline Var operator*(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  return t ? t->binary(a.v * b.v, a, b.v, b, a.v) : Var(a.v * b.v);
}
inline Var operator/(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  const double q = a.v / b.v;
  return t ? t->binary(q, a, 1.0 / b.v, b, -q / b.v) : Var(q);
}
inline Var operator-(const Var& a) { return a.t ? a.t->unary(-a.v, a, -1.0) : Var(-a.v); }

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }

inline bool operator<(const Var& a, const Var& b) { return a.v < b.v; }
inline bool operator>(const Var& a, const Var& b) { return a.v > b.v; }

inline Var tanh(const Var& a) {
  const double y = std::tanh(a.v);
  return a.t ? a.t->unary(y, a, 1.0 - y * y) : Var(y);
}
inline Var exp(const Var& a) {
  const double y = std::exp(a.v);
  return a.t ? a.t->unary(y, a, y) : Var(y);
}
inline Var log(const Var& a) {
  const double y = std::log(a.v);
  return a.t ? a.t->unary(y, a, 1.0 / a.v) : Var(y);
}

/// Single node for an inner product: sum_k a_k * b_k.
inline Var dot(std::span<const Var> a, std::span<const Var> b) {
  double v = 0.0;
  Tape* t = nullptr;
  for (std::size_t k = 0; k < a.size(); ++k) {
    v += a[k].v * b[k].v;
    if (!t) t = detail::tape_of(a[k], b[k]);
  }
  if (!t) return Var(v);
  std::vector<Var> parents;
  std::vector<double> partials;
  parents.reserve(2 * a.size());
  partials.reserve(2 * a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    parents.push_back(a[k]);
    partials.push_back(b[k].v);
    parents.push_back(b[k]);
    partials.push_back(a[k].v);
  }
  return t->push(v, parents, partials);
}

/// Single node for a sum.
inline Var sum(std::span<const Var> a) {
  double v = 0.0;
  Tape* t = nullptr;
  for (const auto& x : a) {
    v += x.v;
    if (!t) t = x.t;
  }
  if (!t) return Var(v);
  std::vector<double> ones(a.size(), 1.0);
  return t->push(v, a, ones);
}

}  // namespace dref::ad

namespace dref {

// Scalar-generic helpers so templated model code reads the same for both types.

inline double value(double x) { return x; }
using ad::value;

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}
using ad::dot;

inline double sum(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x;
  return s;
}
using ad::sum;

}  // namespace dref
