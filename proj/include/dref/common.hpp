// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace dref {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary task label. Hate is the positive class.
enum class Label : std::uint8_t { hate = 0, non_hate = 1 };

inline constexpr std::size_t kNumClasses = 2;

inline constexpr std::size_t index_of(Label c) { return static_cast<std::size_t>(c); }
inline constexpr Label label_at(std::size_t i) { return i == 0 ? Label::hate : Label::non_hate; }
inline constexpr Label other(Label c) { return c == Label::hate ? Label::non_hate : Label::hate; }

inline std::string_view to_string(Label c) { return c == Label::hate ? "hate" : "non-hate"; }

inline Label parse_label(std::string_view s) {
  if (s == "hate") return Label::hate;
  if (s == "non-hate") return Label::non_hate;
  throw Error("unknown label '" + std::string(s) + "'");
}

/// Row-major dense matrix over an arbitrary scalar type.
template <class T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// Deterministic 64-bit generator (SplitMix64). Output does not depend on
/// the standard library implementation, so runs replay across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw Error("Rng::below: empty range");
    return static_cast<std::size_t>(next() % n);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[below(i)]);
    }
  }

 private:
  std::uint64_t state_;
};

/// Derives an independent stream seed from a base seed and a tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  Rng r(seed ^ (tag * 0xD1B54A32D192ED03ULL));
  r.next();
  return r.next();
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Each index is visited
/// exactly once; callers write results into pre-sized slots so reductions
/// stay in index order.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(jobs);
  {
    std::vector<std::jthread> workers;
    workers.reserve(jobs);
    for (std::size_t w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += jobs) fn(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace dref
