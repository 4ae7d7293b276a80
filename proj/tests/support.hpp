#ifndef F2C_TESTS_SUPPORT_HPP
#define F2C_TESTS_SUPPORT_HPP

#include <random>
#include <vector>

#include "f2c/scorer.hpp"

namespace f2c::testing {

inline std::vector<double> uniform_vec(std::mt19937_64& rng, std::size_t n, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline std::vector<double> random_distribution(std::mt19937_64& rng, std::size_t n) {
  auto v = uniform_vec(rng, n, 0.05, 1.0);
  double s = 0.0;
  for (double x : v) s += x;
  for (auto& x : v) x /= s;
  return v;
}

inline ScorerParams random_params(std::mt19937_64& rng, std::size_t vocab, std::size_t dim, double scale = 1.0) {
  ScorerParams p = ScorerParams::zeros(vocab, dim);
  p.weight = uniform_vec(rng, vocab * dim, -scale, scale);
  p.bias = uniform_vec(rng, vocab, -scale, scale);
  return p;
}

inline std::vector<std::vector<double>> random_renderings(std::mt19937_64& rng, std::size_t V, std::size_t dim) {
  std::vector<std::vector<double>> r;
  for (std::size_t v = 0; v < V; ++v) r.push_back(uniform_vec(rng, dim));
  return r;
}

/// LL matrix whose row v prefers label `pref[v]` with the given margin.
inline LLMatrix ll_with_preferences(const std::vector<std::size_t>& pref, std::size_t L,
                                    const std::vector<double>& margin) {
  std::vector<double> ll(pref.size() * L, -2.0);
  for (std::size_t v = 0; v < pref.size(); ++v) ll[v * L + pref[v]] = -2.0 + margin[v];
  return LLMatrix(0, pref.size(), L, std::move(ll));
}

}  // namespace f2c::testing

#endif  // F2C_TESTS_SUPPORT_HPP
