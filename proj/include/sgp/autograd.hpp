#pragma once

// Tape-based reverse mode over a closed set of tensor primitives. Each op
// records its forward value and a backward closure that reads parent values
// back from the tape by index, so no intermediate is copied twice.

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "sgp/tensor.hpp"

namespace sgp::ag {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor velocity;  // momentum buffer for sgd_step
  bool frozen = false;
};

/// Named learnable tensors with stable addresses. Reads during forward may run
/// concurrently; sgd_step takes the lock exclusively.
class ParamStore {
 public:
  ParamStore() = default;
  // moving transfers the parameters; the lock is never shared
  ParamStore(ParamStore&& o) noexcept : params_(std::move(o.params_)), index_(std::move(o.index_)) {}
  ParamStore& operator=(ParamStore&& o) noexcept {
    params_ = std::move(o.params_);
    index_ = std::move(o.index_);
    return *this;
  }

  Param& add(const std::string& name, Tensor value, bool frozen = false) {
    if (index_.count(name)) throw Error("duplicate parameter " + name);
    Param p;
    p.name = name;
    p.grad = Tensor(value.shape());
    p.velocity = Tensor(value.shape());
    p.value = std::move(value);
    p.frozen = frozen;
    params_.push_back(std::move(p));
    index_[name] = params_.size() - 1;
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Param& get(const std::string& name) { return params_.at(lookup(name)); }
  const Param& get(const std::string& name) const { return params_.at(lookup(name)); }

  std::deque<Param>& all() { return params_; }
  const std::deque<Param>& all() const { return params_; }

  void zero_grads() {
    for (auto& p : params_) p.grad.fill(0.0);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  std::shared_lock<std::shared_mutex> read_lock() const { return std::shared_lock(mu_); }
  std::unique_lock<std::shared_mutex> write_lock() const { return std::unique_lock(mu_); }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter " + name);
    return it->second;
  }

  std::deque<Param> params_;
  std::map<std::string, std::size_t> index_;
  mutable std::shared_mutex mu_;
};

/// Values produced by stop-gradient nodes (quantile thresholds, binarised
/// masks). In Replay mode the recorded values are substituted so that finite
/// differences see the same piecewise-constant branch as the analytic pass.
class StopGradPins {
 public:
  enum class Mode { Off, Record, Replay };

  void set_mode(Mode m) {
    mode_ = m;
    cursor_ = 0;
    if (m == Mode::Record) values_.clear();
  }
  Mode mode() const { return mode_; }
  void rewind() { cursor_ = 0; }
  std::size_t size() const { return values_.size(); }

  Tensor apply(Tensor computed) {
    switch (mode_) {
      case Mode::Off:
        return computed;
      case Mode::Record:
        values_.push_back(computed);
        return computed;
      case Mode::Replay:
        if (cursor_ >= values_.size()) throw Error("stop-gradient replay ran past the recorded values");
        if (values_[cursor_].shape() != computed.shape()) throw ShapeError("stop-gradient replay shape mismatch");
        return values_[cursor_++];
    }
    return computed;
  }

 private:
  Mode mode_ = Mode::Off;
  std::vector<Tensor> values_;
  std::size_t cursor_ = 0;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

class Tape {
 public:
  explicit Tape(StopGradPins* pins = nullptr) : pins_(pins) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v) { return push(std::move(v), false, nullptr, {}); }

  Var param(Param& p) {
    auto it = leaf_of_.find(&p);
    if (it != leaf_of_.end()) return Var{this, it->second};
    Var v = push(p.value, !p.frozen, &p, {});
    leaf_of_[&p] = v.id;
    return v;
  }

  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
  }

  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn) {
    bool rg = false;
    for (const Var& p : parents) {
      if (p.tape != this) throw Error("mixing variables from different tapes");
      rg = rg || nodes_[p.id].requires_grad;
    }
    return push(std::move(value), rg, nullptr, rg ? std::move(fn) : BackwardFn{});
  }

  /// Forward value of a stop-gradient node; routes through the pin store when present.
  Tensor stop_gradient(Tensor v) { return pins_ ? pins_->apply(std::move(v)) : v; }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  void accumulate(const Var& v, const Tensor& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (g.size() != n.value.size())
      throw ShapeError("gradient shape " + to_string(g.shape()) + " does not match value " + to_string(n.value.shape()));
    if (n.grad.empty()) {
      n.grad = g.shape() == n.value.shape() ? g : g.reshaped(n.value.shape());
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }
  }

  void backward(const Var& loss) {
    if (loss.tape != this) throw Error("backward: loss belongs to another tape");
    if (consumed_) throw Error("backward called twice on the same tape; re-run the forward pass");
    if (nodes_[loss.id].value.size() != 1) throw ShapeError("backward: loss must be a scalar");
    consumed_ = true;
    nodes_[loss.id].grad = Tensor(nodes_[loss.id].value.shape(), 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.param) {
        n.param->grad += n.grad;
      } else if (n.backward) {
        const Tensor g = std::move(n.grad);
        n.grad = Tensor();
        n.backward(*this, g);
      }
    }
  }

  bool consumed() const { return consumed_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Param* param = nullptr;
    BackwardFn backward;
  };

  Var push(Tensor v, bool rg, Param* p, BackwardFn fn) {
    if (consumed_) throw Error("tape already consumed by backward");
    nodes_.push_back(Node{std::move(v), Tensor(), rg, p, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // stable references across push_back
  std::map<const Param*, std::size_t> leaf_of_;
  StopGradPins* pins_;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

// ---------------------------------------------------------------------------
// Generic primitives.

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

inline Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  return a.tape->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  return a.tape->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g * -1.0);
  });
}

inline Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    Tensor ga = g, gb = g;
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] *= b.value()[i];
      gb[i] *= a.value()[i];
    }
    t.accumulate(a, ga);
    t.accumulate(b, gb);
  });
}

inline Var scale(Var a, double s) {
  return a.tape->record(a.value() * s, {a}, [a, s](Tape& t, const Tensor& g) { t.accumulate(a, g * s); });
}

/// Adds a list of scalar (single-element) variables.
inline Var add_scalars(const std::vector<Var>& terms) {
  if (terms.empty()) throw Error("add_scalars: no terms");
  double total = 0.0;
  for (const Var& v : terms) total += v.value().item();
  return terms[0].tape->record(Tensor::scalar(total), terms, [terms](Tape& t, const Tensor& g) {
    for (const Var& v : terms) t.accumulate(v, Tensor(v.shape(), g[0]));
  });
}

template <class F, class DF>
Var unary(Var a, F f, DF df) {
  Tensor y = a.value();
  for (double& v : y.vec()) v = f(v);
  return a.tape->record(std::move(y), {a}, [a, df](Tape& t, const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] *= df(a.value()[i]);
    t.accumulate(a, ga);
  });
}

inline Var sin(Var a) {
  return unary(a, [](double x) { return std::sin(x); }, [](double x) { return std::cos(x); });
}

inline Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double x) {
                 const double th = std::tanh(x);
                 return 1.0 - th * th;
               });
}

inline Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

inline Var sum(Var a) {
  return a.tape->record(Tensor::scalar(a.value().sum()), {a},
                        [a](Tape& t, const Tensor& g) { t.accumulate(a, Tensor(a.shape(), g[0])); });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return a.tape->record(Tensor::scalar(a.value().sum() / n), {a},
                        [a, n](Tape& t, const Tensor& g) { t.accumulate(a, Tensor(a.shape(), g[0] / n)); });
}

inline Var reshape(Var a, Shape s) {
  return a.tape->record(a.value().reshaped(std::move(s)), {a},
                        [a](Tape& t, const Tensor& g) { t.accumulate(a, g.reshaped(a.shape())); });
}

/// Concatenates rank-4 tensors along the channel axis.
inline Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw Error("concat_channels: no inputs");
  const Shape& s0 = xs[0].shape();
  if (s0.size() != 4) throw ShapeError("concat_channels: rank-4 inputs required");
  std::size_t C = 0;
  for (const Var& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ShapeError("concat_channels: incompatible shape " + to_string(s));
    C += s[1];
  }
  const std::size_t B = s0[0], hw = s0[2] * s0[3];
  Tensor y(Shape{B, C, s0[2], s0[3]});
  std::size_t off = 0;
  for (const Var& x : xs) {
    const std::size_t cx = x.shape()[1];
    for (std::size_t n = 0; n < B; ++n)
      std::copy_n(x.value().data().data() + n * cx * hw, cx * hw, y.data().data() + (n * C + off) * hw);
    off += cx;
  }
  return xs[0].tape->record(std::move(y), xs, [xs, B, C, hw](Tape& t, const Tensor& g) {
    std::size_t o = 0;
    for (const Var& x : xs) {
      const std::size_t cx = x.shape()[1];
      if (x.requires_grad()) {
        Tensor gx(x.shape());
        for (std::size_t n = 0; n < B; ++n)
          std::copy_n(g.data().data() + (n * C + o) * hw, cx * hw, gx.data().data() + n * cx * hw);
        t.accumulate(x, gx);
      }
      o += cx;
    }
  });
}

/// Channels [c0, c1) of a rank-4 tensor.
inline Var slice_channels(Var x, std::size_t c0, std::size_t c1) {
  const Shape& s = x.shape();
  if (s.size() != 4 || c0 >= c1 || c1 > s[1]) throw ShapeError("slice_channels: bad range");
  const std::size_t B = s[0], C = s[1], hw = s[2] * s[3], cn = c1 - c0;
  Tensor y(Shape{B, cn, s[2], s[3]});
  for (std::size_t n = 0; n < B; ++n)
    std::copy_n(x.value().data().data() + (n * C + c0) * hw, cn * hw, y.data().data() + n * cn * hw);
  return x.tape->record(std::move(y), {x}, [x, B, C, hw, c0, cn](Tape& t, const Tensor& g) {
    Tensor gx(x.shape());
    for (std::size_t n = 0; n < B; ++n)
      std::copy_n(g.data().data() + n * cn * hw, cn * hw, gx.data().data() + (n * C + c0) * hw);
    t.accumulate(x, gx);
  });
}

// ---------------------------------------------------------------------------
// Optimiser and gradient checking.

/// Momentum SGD with L2 weight decay (velocity = momentum * velocity + g + wd * p).
inline void sgd_step(ParamStore& params, double lr, double momentum = 0.0, double weight_decay = 0.0) {
  auto lock = params.write_lock();
  for (Param& p : params.all()) {
    if (p.frozen) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i] + weight_decay * p.value[i];
      p.velocity[i] = momentum * p.velocity[i] + g;
      p.value[i] -= lr * p.velocity[i];
    }
  }
}

struct GradcheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
  bool frozen = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;

  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }
  bool passed(double tol) const { return worst() <= tol; }
};

struct GradcheckOptions {
  double eps = 1e-5;
  bool freeze_tau = true;
  // 0 = every entry; otherwise a deterministic stride-sample per parameter
  std::size_t max_entries_per_param = 0;
};

using LossFn = std::function<Var(Tape&)>;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Central-difference check of every non-frozen parameter reachable from `f`.
inline GradcheckReport gradcheck(const LossFn& f, ParamStore& params, const GradcheckOptions& opt = {}) {
  if (!(opt.eps > 0)) throw Error("gradcheck: eps must be positive");
  StopGradPins pins;
  auto eval = [&](StopGradPins::Mode mode) {
    pins.set_mode(mode);
    Tape tape(&pins);
    return f(tape).value().item();
  };

  params.zero_grads();
  pins.set_mode(StopGradPins::Mode::Record);
  double base = 0.0;
  {
    Tape tape(&pins);
    Var loss = f(tape);
    base = loss.value().item();
    tape.backward(loss);
  }
  const auto probe_mode = opt.freeze_tau ? StopGradPins::Mode::Replay : StopGradPins::Mode::Off;
  const double again = eval(probe_mode);
  if (again != base) throw Error("gradcheck: loss function is not deterministic");

  GradcheckReport report;
  for (Param& p : params.all()) {
    GradcheckEntry e;
    e.name = p.name;
    e.frozen = p.frozen;
    if (p.frozen) {
      report.entries.push_back(e);
      continue;
    }
    const std::size_t n = p.value.size();
    std::size_t stride = 1;
    if (opt.max_entries_per_param && n > opt.max_entries_per_param)
      stride = (n + opt.max_entries_per_param - 1) / opt.max_entries_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p.value[i];
      p.value[i] = orig + opt.eps;
      const double fp = eval(probe_mode);
      p.value[i] = orig - opt.eps;
      const double fm = eval(probe_mode);
      p.value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      e.max_rel_error = std::max(e.max_rel_error, relative_error(p.grad[i], numeric));
      e.max_abs_grad = std::max(e.max_abs_grad, std::abs(p.grad[i]));
      ++e.checked;
    }
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace sgp::ag
