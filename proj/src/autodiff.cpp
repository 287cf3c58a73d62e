// SPDX-License-Identifier: Apache-2.0
#include "evacap/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "evacap/errors.hpp"

namespace evacap::ad {

const Tensor& Var::value() const {
  if (!tape) throw StateError("value() on an unbound Var");
  return tape->value(*this);
}

// ---- ParamStore ------------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Tensor init) {
  if (params_.count(name)) throw InvalidInput("duplicate parameter name: " + name);
  return params_.emplace(name, std::move(init)).first->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw InvalidInput("unknown parameter: " + name);
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw InvalidInput("unknown parameter: " + name);
  return it->second;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

Gradient zero_gradient(const ParamStore& store) {
  Gradient g;
  for (const auto& [name, t] : store.items()) g.emplace(name, Tensor(t.shape()));
  return g;
}

void accumulate(Gradient& dst, const Gradient& src, double weight) {
  for (const auto& [name, t] : src) {
    auto it = dst.find(name);
    if (it == dst.end()) {
      dst.emplace(name, scale(t, weight));
      continue;
    }
    if (!it->second.same_shape(t)) throw InvalidInput("gradient shape mismatch for " + name);
    for (std::size_t i = 0; i < t.size(); ++i) it->second[i] += weight * t[i];
  }
}

// ---- Tape ------------------------------------------------------------------

void Tape::check_owned(Var v, const char* what) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    throw StateError(std::string(what) + ": Var was not recorded on this tape");
  }
}

Var Tape::record(Tensor value, bool requires_grad, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) { return record(std::move(value), false, nullptr); }

Var Tape::input(Tensor value) { return record(std::move(value), true, nullptr); }

Var Tape::param(const ParamStore& store, const std::string& name) {
  if (bound_store_ && bound_store_ != &store) throw StateError("tape already bound to another ParamStore");
  bound_store_ = &store;
  if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var{this, it->second};
  Node n;
  n.external = &store.get(name);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  param_ids_.emplace(name, nodes_.size() - 1);
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
  check_owned(v, "value");
  return node_value(nodes_[v.id]);
}

bool Tape::requires_grad(Var v) const {
  check_owned(v, "requires_grad");
  return nodes_[v.id].requires_grad;
}

bool Tape::any_requires_grad(std::initializer_list<Var> vars) const {
  for (auto v : vars) {
    check_owned(v, "op input");
    if (nodes_[v.id].requires_grad) return true;
  }
  return false;
}

Tensor* Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor(node_value(n).shape());
  return &n.grad;
}

void Tape::backward(Var out, const Tensor& seed) {
  check_owned(out, "backward");
  if (consumed_) throw StateError("backward already ran on this tape");
  consumed_ = true;
  if (!seed.same_shape(value(out))) {
    throw InvalidInput("backward seed shape " + shape_str(seed.shape()) + " does not match output " +
                       shape_str(value(out).shape()));
  }
  if (!nodes_[out.id].requires_grad) return;
  nodes_[out.id].grad = seed;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

void Tape::backward(Var scalar_out) {
  const Tensor& v = value(scalar_out);
  if (v.size() != 1) throw InvalidInput("backward() without a seed needs a [1x1] output");
  backward(scalar_out, Tensor(v.shape(), 1.0));
}

Tensor Tape::grad(Var v) const {
  check_owned(v, "grad");
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Tensor(node_value(n).shape());
  return n.grad;
}

Gradient Tape::param_gradient(const ParamStore& store) const {
  Gradient g;
  for (const auto& [name, t] : store.items()) {
    auto it = param_ids_.find(name);
    if (it != param_ids_.end() && bound_store_ == &store && !nodes_[it->second].grad.empty()) {
      g.emplace(name, nodes_[it->second].grad);
    } else {
      g.emplace(name, Tensor(t.shape()));
    }
  }
  return g;
}

// ---- ops -------------------------------------------------------------------

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw StateError("op on an unbound Var");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (!a.valid() || a.tape != b.tape) throw StateError("op inputs live on different tapes");
  return *a.tape;
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void require_shape(bool ok, const char* op, const Tensor& a, const Tensor& b) {
  if (!ok) throw InvalidInput(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + ", " +
                              shape_str(b.shape()));
}

Tensor softmax_backward(const Tensor& y, const Tensor& g) {
  Tensor dx(y.shape());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
    for (std::size_t j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (g(i, j) - dot);
  }
  return dx;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor v = evacap::matmul(av, bv);
  t.add_flops(2ULL * av.rows() * av.cols() * bv.cols());
  return t.record(std::move(v), t.any_requires_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* ga = t.grad_buffer(a)) add_into(*ga, evacap::matmul_nt(g, b.value()));
    if (Tensor* gb = t.grad_buffer(b)) add_into(*gb, evacap::matmul_tn(a.value(), g));
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor v = evacap::matmul_nt(av, bv);
  t.add_flops(2ULL * av.rows() * av.cols() * bv.rows());
  return t.record(std::move(v), t.any_requires_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* ga = t.grad_buffer(a)) add_into(*ga, evacap::matmul(g, b.value()));
    if (Tensor* gb = t.grad_buffer(b)) add_into(*gb, evacap::matmul_tn(g, a.value()));
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  Tensor v = evacap::add(a.value(), b.value());
  return t.record(std::move(v), t.any_requires_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* ga = t.grad_buffer(a)) add_into(*ga, g);
    if (Tensor* gb = t.grad_buffer(b)) add_into(*gb, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  Tensor v = evacap::sub(a.value(), b.value());
  return t.record(std::move(v), t.any_requires_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* ga = t.grad_buffer(a)) add_into(*ga, g);
    if (Tensor* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  Tensor v = evacap::hadamard(a.value(), b.value());
  return t.record(std::move(v), t.any_requires_grad({a, b}), [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* ga = t.grad_buffer(a)) add_into(*ga, evacap::hadamard(g, b.value()));
    if (Tensor* gb = t.grad_buffer(b)) add_into(*gb, evacap::hadamard(g, a.value()));
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  return t.record(evacap::scale(a.value(), s), t.any_requires_grad({a}), [a, s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
  });
}

Var add_row(Var a, Var bias) {
  Tape& t = tape_of(a, bias);
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  require_shape(bv.rank() == 2 && bv.rows() == 1 && bv.cols() == av.cols(), "add_row", av, bv);
  Tensor v = av;
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = 0; j < v.cols(); ++j) v(i, j) += bv[j];
  return t.record(std::move(v), t.any_requires_grad({a, bias}), [a, bias](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* ga = t.grad_buffer(a)) add_into(*ga, g);
    if (Tensor* gb = t.grad_buffer(bias))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gb)[j] += g(i, j);
  });
}

Var scale_by(Var a, Var s) {
  Tape& t = tape_of(a, s);
  const Tensor& sv = s.value();
  require_shape(sv.size() == 1, "scale_by", a.value(), sv);
  return t.record(evacap::scale(a.value(), sv[0]), t.any_requires_grad({a, s}), [a, s](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* ga = t.grad_buffer(a)) {
      const double k = s.value()[0];
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += k * g[i];
    }
    if (Tensor* gs = t.grad_buffer(s)) {
      const Tensor& av = a.value();
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      (*gs)[0] += acc;
    }
  });
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  return t.record(evacap::softmax_rows(a.value()), t.any_requires_grad({a}), [a](Tape& t, std::size_t self) {
    if (Tensor* ga = t.grad_buffer(a)) add_into(*ga, softmax_backward(t.value(Var{&t, self}), t.grad_of(self)));
  });
}

Var softmax_rows_causal(Var a) {
  Tape& t = tape_of(a);
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const std::size_t n = std::min(i + 1, x.cols());
    double mx = x(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y(i, j) = std::exp(x(i, j) - mx);
      z += y(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) y(i, j) /= z;
  }
  // Masked entries are exactly 0, so the unmasked backward formula gives them
  // zero gradient.
  return t.record(std::move(y), t.any_requires_grad({a}), [a](Tape& t, std::size_t self) {
    if (Tensor* ga = t.grad_buffer(a)) add_into(*ga, softmax_backward(t.value(Var{&t, self}), t.grad_of(self)));
  });
}

Var layer_norm(Var a, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(a, gamma);
  tape_of(a, beta);
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  require_shape(gamma.value().size() == n && beta.value().size() == n, "layer_norm", x, gamma.value());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) xhat(i, j) = (x(i, j) - mu) * inv_std[i];
  }
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y(i, j) = gv[j] * xhat(i, j) + bv[j];
  return t.record(std::move(y), t.any_requires_grad({a, gamma, beta}),
                  [a, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                    const Tensor& g = t.grad_of(self);
                    const std::size_t m = g.rows(), n = g.cols();
                    if (Tensor* gg = t.grad_buffer(gamma))
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) (*gg)[j] += g(i, j) * xhat(i, j);
                    if (Tensor* gb = t.grad_buffer(beta))
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g(i, j);
                    if (Tensor* ga = t.grad_buffer(a)) {
                      const Tensor& gv = gamma.value();
                      std::vector<double> dxhat(n);
                      for (std::size_t i = 0; i < m; ++i) {
                        double mean_d = 0.0, mean_dx = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                          dxhat[j] = g(i, j) * gv[j];
                          mean_d += dxhat[j];
                          mean_dx += dxhat[j] * xhat(i, j);
                        }
                        mean_d /= static_cast<double>(n);
                        mean_dx /= static_cast<double>(n);
                        for (std::size_t j = 0; j < n; ++j)
                          (*ga)(i, j) += inv_std[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
                      }
                    }
                  });
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  Tensor y = a.value();
  for (auto& v : y.data()) {
    const double u = c * (v + k * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  return t.record(std::move(y), t.any_requires_grad({a}), [a](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    const Tensor& g = t.grad_of(self);
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x[i];
      const double th = std::tanh(c * (v + k * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * c * (1.0 + 3.0 * k * v * v);
      (*ga)[i] += g[i] * d;
    }
  });
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  Tensor y = a.value();
  for (auto& v : y.data()) v = stable_sigmoid(v);
  return t.record(std::move(y), t.any_requires_grad({a}), [a](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_buffer(a);
    if (!ga) return;
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value(Var{&t, self});
    for (std::size_t i = 0; i < y.size(); ++i) (*ga)[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var normalized_row_entropy(Var p) {
  Tape& t = tape_of(p);
  const Tensor& pv = p.value();
  if (pv.rank() != 2) throw InvalidInput("normalized_row_entropy: expected a matrix");
  const std::size_t m = pv.rows(), n = pv.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!(pv(i, j) >= 0.0)) throw InvalidInput("normalized_row_entropy: negative or NaN probability");
      s += pv(i, j);
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw InvalidInput("normalized_row_entropy: row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
  if (n == 1) return t.constant(Tensor::scalar(0.0));

  const double denom = static_cast<double>(m) * std::log(static_cast<double>(n));
  double h = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double hi = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double q = pv(i, j);
      if (q > 0.0) hi -= q * std::log(q);
    }
    h += hi;
  }
  const double raw = h / denom;
  const bool clamped = raw < 0.0 || raw > 1.0;
  const double e = std::clamp(raw, 0.0, 1.0);
  return t.record(Tensor::scalar(e), t.any_requires_grad({p}) && !clamped, [p, denom](Tape& t, std::size_t self) {
    Tensor* gp = t.grad_buffer(p);
    if (!gp) return;
    const double g = t.grad_of(self)[0];
    const Tensor& pv = p.value();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      if (pv[i] > 0.0) (*gp)[i] -= g * (std::log(pv[i]) + 1.0) / denom;
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidInput("concat_rows: no inputs");
  Tape& t = tape_of(parts.front());
  std::vector<Tensor> vals;
  bool rg = false;
  for (auto v : parts) {
    tape_of(parts.front(), v);
    vals.push_back(v.value());
    rg = rg || t.requires_grad(v);
  }
  return t.record(evacap::concat_rows(vals), rg, [parts](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    std::size_t offset = 0;
    for (auto v : parts) {
      const std::size_t len = v.value().size();
      if (Tensor* gv = t.grad_buffer(v))
        for (std::size_t i = 0; i < len; ++i) (*gv)[i] += g[offset + i];
      offset += len;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidInput("concat_cols: no inputs");
  Tape& t = tape_of(parts.front());
  const std::size_t m = parts.front().value().rows();
  std::size_t n = 0;
  bool rg = false;
  for (auto v : parts) {
    tape_of(parts.front(), v);
    if (v.value().rows() != m) throw InvalidInput("concat_cols: row count mismatch");
    n += v.value().cols();
    rg = rg || t.requires_grad(v);
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (auto v : parts) {
    const Tensor& pv = v.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
    off += pv.cols();
  }
  return t.record(std::move(out), rg, [parts](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    std::size_t off = 0;
    for (auto v : parts) {
      const std::size_t c = v.value().cols();
      if (Tensor* gv = t.grad_buffer(v))
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < c; ++j) (*gv)(i, j) += g(i, off + j);
      off += c;
    }
  });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  if (count == 0 || start + count > av.rows()) throw InvalidInput("slice_rows: range out of bounds");
  const std::size_t n = av.cols();
  std::vector<double> d(av.data().begin() + start * n, av.data().begin() + (start + count) * n);
  return t.record(Tensor({count, n}, std::move(d)), t.any_requires_grad({a}), [a, start](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* ga = t.grad_buffer(a)) {
      const std::size_t off = start * g.cols();
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[off + i] += g[i];
    }
  });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  if (count == 0 || start + count > av.cols()) throw InvalidInput("slice_cols: range out of bounds");
  Tensor out({av.rows(), count});
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = av(i, start + j);
  return t.record(std::move(out), t.any_requires_grad({a}), [a, start](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*ga)(i, start + j) += g(i, j);
  });
}

Var embedding(Var table, const std::vector<int>& ids) {
  Tape& t = tape_of(table);
  const Tensor& tv = table.value();
  if (ids.empty()) throw InvalidInput("embedding: empty id list");
  const std::size_t n = tv.cols();
  Tensor out({ids.size(), n});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw InvalidInput("embedding: id " + std::to_string(ids[i]) + " out of range");
    }
    auto src = tv.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return t.record(std::move(out), t.any_requires_grad({table}), [table, ids](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    if (Tensor* gt = t.grad_buffer(table))
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) (*gt)(static_cast<std::size_t>(ids[i]), j) += g(i, j);
  });
}

Var detach(Var a) { return tape_of(a).constant(a.value()); }

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.record(Tensor::scalar(s), t.any_requires_grad({a}), [a](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    if (Tensor* ga = t.grad_buffer(a))
      for (auto& v : ga->data()) v += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var weighted_sum(Var a, const Tensor& w) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  require_shape(av.same_shape(w), "weighted_sum", av, w);
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += w[i] * av[i];
  return t.record(Tensor::scalar(s), t.any_requires_grad({a}), [a, w](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < w.size(); ++i) (*ga)[i] += g * w[i];
  });
}

Var cross_entropy(Var logits, const std::vector<int>& targets, int ignore_id) {
  Tape& t = tape_of(logits);
  const Tensor& x = logits.value();
  if (x.rank() != 2 || x.rows() != targets.size()) {
    throw InvalidInput("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                       shape_str(x.shape()));
  }
  const std::size_t vocab = x.cols();
  Tensor probs(x.shape());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const int tgt = targets[i];
    if (tgt == ignore_id) continue;
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= vocab) {
      throw InvalidInput("cross_entropy: target " + std::to_string(tgt) + " outside vocabulary of " +
                         std::to_string(vocab));
    }
    auto xi = x.row(i);
    const double mx = *std::max_element(xi.begin(), xi.end());
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(xi[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - xi[static_cast<std::size_t>(tgt)];
    for (std::size_t j = 0; j < vocab; ++j) probs(i, j) = std::exp(xi[j] - lse);
    ++count;
  }
  const double denom = count ? static_cast<double>(count) : 1.0;
  return t.record(Tensor::scalar(total / denom), t.any_requires_grad({logits}),
                  [logits, targets, ignore_id, denom, probs = std::move(probs)](Tape& t, std::size_t self) {
                    Tensor* gl = t.grad_buffer(logits);
                    if (!gl) return;
                    const double g = t.grad_of(self)[0] / denom;
                    for (std::size_t i = 0; i < probs.rows(); ++i) {
                      if (targets[i] == ignore_id) continue;
                      for (std::size_t j = 0; j < probs.cols(); ++j) (*gl)(i, j) += g * probs(i, j);
                      (*gl)(i, static_cast<std::size_t>(targets[i])) -= g;
                    }
                  });
}

}  // namespace evacap::ad
