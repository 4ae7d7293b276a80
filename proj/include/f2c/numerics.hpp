#ifndef F2C_NUMERICS_HPP
#define F2C_NUMERICS_HPP

// Dense 64-bit tensors with a per-step reverse-mode tape.
//
// A Tape owns every node created during one forward pass. Nodes are appended
// in creation order, so node ids are already a topological order and the
// backward pass is a single reverse sweep over ids.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace f2c {

namespace detail {

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

}  // namespace detail

class Tensor {
 public:
  Tensor() : shape_{0} {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> values, bool requires_grad = false)
      : shape_(std::move(shape)), values_(std::move(values)), requires_grad_(requires_grad) {
    if (detail::shape_product(shape_) != values_.size()) {
      throw std::invalid_argument("tensor shape " + detail::shape_str(shape_) + " does not match " +
                                  std::to_string(values_.size()) + " values");
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i])) {
        throw std::invalid_argument("tensor value at flat index " + std::to_string(i) + " is not finite");
      }
    }
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }

  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(v), requires_grad);
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  const std::vector<double>& values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  bool requires_grad() const noexcept { return requires_grad_; }
  bool is_scalar() const noexcept { return values_.size() == 1 && shape_.empty(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double item() const {
    if (values_.size() != 1) {
      throw std::invalid_argument("item() on tensor of shape " + detail::shape_str(shape_));
    }
    return values_[0];
  }

 private:
  friend class Tape;
  // Internal constructor for tape outputs that were already checked or are
  // allowed to carry -inf (none currently); skips the finiteness scan.
  struct Unchecked {};
  Tensor(Unchecked, std::vector<std::size_t> shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {}

  std::vector<std::size_t> shape_;
  std::vector<double> values_;
  bool requires_grad_ = false;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  double item() const { return value().item(); }
  const std::vector<std::size_t>& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

/// Gradients produced by one backward sweep, indexed by node id.
class GradientMap {
 public:
  GradientMap() = default;
  GradientMap(std::vector<std::vector<double>> grads, std::vector<std::size_t> sizes)
      : grads_(std::move(grads)), sizes_(std::move(sizes)) {}

  /// Gradient of the root w.r.t. `v`; zeros when `v` is unreachable.
  std::vector<double> operator[](Var v) const {
    if (v.id >= sizes_.size()) throw std::out_of_range("gradient requested for unknown node");
    if (grads_[v.id].empty()) return std::vector<double>(sizes_[v.id], 0.0);
    return grads_[v.id];
  }

  bool reached(Var v) const { return v.id < grads_.size() && !grads_[v.id].empty(); }

 private:
  std::vector<std::vector<double>> grads_;
  std::vector<std::size_t> sizes_;
};

class Tape {
 public:
  // Accumulates the incoming gradient `upstream` of node `self` into the
  // gradient buffers of its parents.
  using BackwardFn = std::function<void(const Tape&, std::size_t self, const std::vector<double>& upstream,
                                        std::vector<std::vector<double>>& grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// Adds a leaf. Gradients are tracked iff the tensor requires them.
  Var leaf(Tensor t) {
    const bool rg = t.requires_grad();
    return push(std::move(t), {}, nullptr, rg);
  }

  Var constant(Tensor t) {
    t.requires_grad_ = false;
    return push(std::move(t), {}, nullptr, false);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Records an op result. The node tracks gradients iff some parent does.
  Var record(std::vector<std::size_t> shape, std::vector<double> values, std::vector<std::size_t> parents,
             BackwardFn fn) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) {
        throw std::domain_error("non-finite value produced on tape (node " + std::to_string(nodes_.size()) +
                                ", flat index " + std::to_string(i) + ")");
      }
    }
    bool rg = false;
    for (auto p : parents) rg = rg || nodes_[p].requires_grad;
    return push(Tensor(Tensor::Unchecked{}, std::move(shape), std::move(values)), std::move(parents),
                rg ? std::move(fn) : nullptr, rg);
  }

  /// Reverse sweep from a scalar root. Nodes are visited once each, in
  /// descending id order.
  GradientMap backward(Var root) const {
    if (root.tape != this) throw std::invalid_argument("backward root belongs to a different tape");
    const Tensor& rv = value(root.id);
    if (rv.size() != 1) {
      throw std::invalid_argument("backward root must be scalar, got shape " + detail::shape_str(rv.shape()));
    }
    std::vector<std::vector<double>> grads(nodes_.size());
    std::vector<std::size_t> sizes(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) sizes[i] = nodes_[i].value.size();
    if (!nodes_[root.id].requires_grad) return GradientMap(std::move(grads), std::move(sizes));
    grads[root.id] = {1.0};
    for (std::size_t i = root.id + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (grads[i].empty() || !n.backward) continue;
      n.backward(*this, i, grads[i], grads);
    }
    // Only leaves that asked for gradients keep them; intermediates are
    // cleared so the map reports leaf gradients only.
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].parents.empty() || !nodes_[i].requires_grad) grads[i].clear();
    }
    return GradientMap(std::move(grads), std::move(sizes));
  }

  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }

  static void accumulate(std::vector<std::vector<double>>& grads, std::size_t id, std::size_t n, std::size_t index,
                         double g) {
    auto& buf = grads[id];
    if (buf.empty()) buf.assign(n, 0.0);
    buf[index] += g;
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Tensor t, std::vector<std::size_t> parents, BackwardFn fn, bool rg) {
    nodes_.push_back(Node{std::move(t), std::move(parents), std::move(fn), rg});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw std::invalid_argument("operands live on different tapes");
  return *a.tape;
}

inline void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

inline std::vector<double>& grad_buf(std::vector<std::vector<double>>& grads, const Tape& t, std::size_t id) {
  auto& buf = grads[id];
  if (buf.empty()) buf.assign(t.value(id).size(), 0.0);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape("add", a, b);
  const auto& x = a.value().values();
  const auto& y = b.value().values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return t.record(a.shape(), std::move(out), {a.id, b.id},
                  [](const Tape& tp, std::size_t self, const std::vector<double>& up, auto& grads) {
                    for (auto p : tp.parents(self)) {
                      if (!tp.requires_grad(p)) continue;
                      auto& g = detail::grad_buf(grads, tp, p);
                      for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                    }
                  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape("sub", a, b);
  const auto& x = a.value().values();
  const auto& y = b.value().values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return t.record(a.shape(), std::move(out), {a.id, b.id},
                  [](const Tape& tp, std::size_t self, const std::vector<double>& up, auto& grads) {
                    const auto& ps = tp.parents(self);
                    if (tp.requires_grad(ps[0])) {
                      auto& g = detail::grad_buf(grads, tp, ps[0]);
                      for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                    }
                    if (tp.requires_grad(ps[1])) {
                      auto& g = detail::grad_buf(grads, tp, ps[1]);
                      for (std::size_t i = 0; i < up.size(); ++i) g[i] -= up[i];
                    }
                  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape("mul", a, b);
  const auto& x = a.value().values();
  const auto& y = b.value().values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return t.record(a.shape(), std::move(out), {a.id, b.id},
                  [](const Tape& tp, std::size_t self, const std::vector<double>& up, auto& grads) {
                    const auto& ps = tp.parents(self);
                    const auto& x = tp.value(ps[0]).values();
                    const auto& y = tp.value(ps[1]).values();
                    if (tp.requires_grad(ps[0])) {
                      auto& g = detail::grad_buf(grads, tp, ps[0]);
                      for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * y[i];
                    }
                    if (tp.requires_grad(ps[1])) {
                      auto& g = detail::grad_buf(grads, tp, ps[1]);
                      for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * x[i];
                    }
                  });
}

inline Var scale(Var a, double k) {
  const auto& x = a.value().values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = k * x[i];
  return a.tape->record(a.shape(), std::move(out), {a.id},
                        [k](const Tape& tp, std::size_t self, const std::vector<double>& up, auto& grads) {
                          auto& g = detail::grad_buf(grads, tp, tp.parents(self)[0]);
                          for (std::size_t i = 0; i < up.size(); ++i) g[i] += k * up[i];
                        });
}

inline Var neg(Var a) { return scale(a, -1.0); }

/// Matrix [m,n] times vector [n] -> vector [m].
inline Var matvec(Var m, Var v) {
  Tape& t = detail::same_tape(m, v);
  const auto& ms = m.shape();
  const auto& vs = v.shape();
  if (ms.size() != 2 || vs.size() != 1 || ms[1] != vs[0]) {
    throw std::invalid_argument("matvec: shape mismatch " + detail::shape_str(ms) + " x " + detail::shape_str(vs));
  }
  const std::size_t rows = ms[0], cols = ms[1];
  const auto& a = m.value().values();
  const auto& x = v.value().values();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += a[r * cols + c] * x[c];
    out[r] = acc;
  }
  return t.record({rows}, std::move(out), {m.id, v.id},
                  [rows, cols](const Tape& tp, std::size_t self, const std::vector<double>& up, auto& grads) {
                    const auto& ps = tp.parents(self);
                    const auto& a = tp.value(ps[0]).values();
                    const auto& x = tp.value(ps[1]).values();
                    if (tp.requires_grad(ps[0])) {
                      auto& g = detail::grad_buf(grads, tp, ps[0]);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += up[r] * x[c];
                    }
                    if (tp.requires_grad(ps[1])) {
                      auto& g = detail::grad_buf(grads, tp, ps[1]);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) g[c] += up[r] * a[r * cols + c];
                    }
                  });
}

inline Var log(Var a) {
  const auto& x = a.value().values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) throw std::domain_error("log of non-positive value at index " + std::to_string(i));
    out[i] = std::log(x[i]);
  }
  return a.tape->record(a.shape(), std::move(out), {a.id},
                        [](const Tape& tp, std::size_t self, const std::vector<double>& up, auto& grads) {
                          const auto p = tp.parents(self)[0];
                          const auto& x = tp.value(p).values();
                          auto& g = detail::grad_buf(grads, tp, p);
                          for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] / x[i];
                        });
}

/// max(x, floor) elementwise; clamped entries pass no gradient.
inline Var clamp_min(Var a, double floor) {
  const auto& x = a.value().values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::max(x[i], floor);
  return a.tape->record(a.shape(), std::move(out), {a.id},
                        [floor](const Tape& tp, std::size_t self, const std::vector<double>& up, auto& grads) {
                          const auto p = tp.parents(self)[0];
                          const auto& x = tp.value(p).values();
                          auto& g = detail::grad_buf(grads, tp, p);
                          for (std::size_t i = 0; i < up.size(); ++i)
                            if (x[i] > floor) g[i] += up[i];
                        });
}

inline Var exp(Var a) {
  const auto& x = a.value().values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
  return a.tape->record(a.shape(), std::move(out), {a.id},
                        [](const Tape& tp, std::size_t self, const std::vector<double>& up, auto& grads) {
                          const auto& y = tp.value(self).values();
                          auto& g = detail::grad_buf(grads, tp, tp.parents(self)[0]);
                          for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * y[i];
                        });
}

inline Var sum(Var a) {
  const auto& x = a.value().values();
  double acc = 0.0;
  for (double xi : x) acc += xi;
  return a.tape->record({}, {acc}, {a.id},
                        [](const Tape& tp, std::size_t self, const std::vector<double>& up, auto& grads) {
                          auto& g = detail::grad_buf(grads, tp, tp.parents(self)[0]);
                          for (auto& gi : g) gi += up[0];
                        });
}

inline Var mean(Var a) {
  if (a.size() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Selects one flat entry as a scalar.
inline Var gather(Var a, std::size_t index) {
  if (index >= a.size()) {
    throw std::invalid_argument("gather: index " + std::to_string(index) + " out of range for shape " +
                                detail::shape_str(a.shape()));
  }
  return a.tape->record({}, {a.value()[index]}, {a.id},
                        [index](const Tape& tp, std::size_t self, const std::vector<double>& up, auto& grads) {
                          auto& g = detail::grad_buf(grads, tp, tp.parents(self)[0]);
                          g[index] += up[0];
                        });
}

/// Sum of a list of same-shaped vars (left fold).
inline Var add_all(std::span<const Var> xs) {
  if (xs.empty()) throw std::invalid_argument("add_all of empty list");
  Var acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

/// A copy of `a` that is a constant leaf: no gradient flows back through it.
inline Var detach(Var a) { return a.tape->constant(a.value()); }

inline Var constant_like(Var a, double v) {
  return a.tape->constant(Tensor(a.shape(), std::vector<double>(a.size(), v)));
}

inline Var scalar_constant(Tape& t, double v) { return t.constant(Tensor::scalar(v)); }

// ---------------------------------------------------------------------------
// log-softmax
// ---------------------------------------------------------------------------

/// Stable log-softmax of a plain vector.
inline std::vector<double> log_softmax_values(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("log_softmax over empty axis");
  const double mx = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double xi : x) s += std::exp(xi - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

/// log-softmax along `axis` of a rank-1 or rank-2 tensor.
inline Var log_softmax(Var a, std::size_t axis = 0) {
  const auto shape = a.shape();
  if (shape.empty() || shape.size() > 2 || axis >= shape.size()) {
    throw std::invalid_argument("log_softmax: axis " + std::to_string(axis) + " invalid for shape " +
                                detail::shape_str(shape));
  }
  if (shape[axis] == 0) throw std::invalid_argument("log_softmax over empty axis");
  // Slices are described by (count, length, stride, start step).
  std::size_t len = shape[axis], count = 1, stride = 1, outer_step = len;
  if (shape.size() == 2) {
    if (axis == 1) {
      count = shape[0];
      stride = 1;
      outer_step = shape[1];
    } else {
      count = shape[1];
      stride = shape[1];
      outer_step = 1;
    }
  }
  const auto& x = a.value().values();
  std::vector<double> out(x.size());
  std::vector<double> slice(len);
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t base = s * outer_step;
    for (std::size_t i = 0; i < len; ++i) slice[i] = x[base + i * stride];
    auto ls = log_softmax_values(slice);
    for (std::size_t i = 0; i < len; ++i) out[base + i * stride] = ls[i];
  }
  return a.tape->record(shape, std::move(out), {a.id},
                        [len, count, stride, outer_step](const Tape& tp, std::size_t self,
                                                         const std::vector<double>& up, auto& grads) {
                          // d/dx_j sum_i up_i (x_i - lse) = up_j - softmax_j * sum_i up_i
                          const auto& y = tp.value(self).values();
                          auto& g = detail::grad_buf(grads, tp, tp.parents(self)[0]);
                          for (std::size_t s = 0; s < count; ++s) {
                            const std::size_t base = s * outer_step;
                            double total = 0.0;
                            for (std::size_t i = 0; i < len; ++i) total += up[base + i * stride];
                            for (std::size_t i = 0; i < len; ++i) {
                              const std::size_t k = base + i * stride;
                              g[k] += up[k] - std::exp(y[k]) * total;
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradientCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<std::size_t> non_finite;  // coordinates where f failed at a probe point
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = false;
};

/// Relative error with an absolute floor on the denominator, so coordinates
/// whose true gradient is zero are judged on absolute error.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares tape gradients of a scalar function against central differences.
/// `f` receives a fresh tape and a leaf holding the (perturbed) input.
template <typename Fn>
GradientCheckReport check_gradients(Fn&& f, const Tensor& x, double step = 1e-5, double tol = 1e-4,
                                    double floor = 1e-6) {
  GradientCheckReport rep;
  {
    Tape tape;
    Var leaf = tape.leaf(Tensor(x.shape(), x.values(), true));
    Var y = f(tape, leaf);
    rep.analytic = tape.backward(y)[leaf];
  }
  auto eval = [&](const std::vector<double>& vals, double& out) {
    try {
      Tape tape;
      Var leaf = tape.leaf(Tensor(x.shape(), vals, false));
      out = f(tape, leaf).item();
      return std::isfinite(out);
    } catch (const std::exception&) {
      return false;
    }
  };
  rep.numeric.assign(x.size(), 0.0);
  std::vector<double> probe = x.values();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    double fp = 0.0, fm = 0.0;
    probe[i] = orig + step;
    const bool okp = eval(probe, fp);
    probe[i] = orig - step;
    const bool okm = eval(probe, fm);
    probe[i] = orig;
    if (!okp || !okm) {
      rep.non_finite.push_back(i);
      continue;
    }
    rep.numeric[i] = (fp - fm) / (2.0 * step);
    const double err = relative_error(rep.analytic[i], rep.numeric[i], floor);
    if (err > rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst_index = i;
    }
  }
  rep.passed = rep.non_finite.empty() && rep.max_rel_error < tol;
  return rep;
}

}  // namespace f2c

#endif  // F2C_NUMERICS_HPP
