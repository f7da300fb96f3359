#include "winmamba/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace winmamba {

uint64_t mix_seed(uint64_t seed, std::string_view name) {
  // FNV-1a over the name folded into a splitmix64 round.
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  uint64_t z = seed + 0x9e3779b97f4a7c15ull + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::string triple_str(const Triple& t) {
  std::ostringstream os;
  os << "(" << t[0] << "," << t[1] << "," << t[2] << ")";
  return os.str();
}

std::string Shape::str() const {
  std::ostringstream os;
  os << "[";
  for (int i = 0; i < rank_; ++i) os << (i ? "x" : "") << d_[i];
  os << "]";
  return os.str();
}

namespace {

void ensure_finite(const std::vector<double>& v, const char* where) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by ") + where);
    }
  }
}

std::shared_ptr<std::vector<double>> alloc(size_t n, double fill = 0.0) {
  return std::make_shared<std::vector<double>>(n, fill);
}

Graph* common_graph(std::initializer_list<const DiffArray*> xs) {
  Graph* g = nullptr;
  for (const DiffArray* x : xs) {
    if (!x->attached()) continue;
    if (g == nullptr) {
      g = x->graph();
    } else if (g != x->graph()) {
      throw ContractError("operands belong to different operation graphs");
    }
  }
  return g;
}

int node_of(const DiffArray& x) { return x.attached() ? x.node() : -1; }

// Every op computes its values once with a plain kernel, then attaches a
// backward closure only when some input is recorded. Detached and recorded
// passes therefore produce bitwise-identical values.
DiffArray finish(const Shape& s, std::vector<double> values, Graph* g, Graph::BackwardFn fn) {
  ensure_finite(values, "op");
  if (g == nullptr) return DiffArray::from(s, std::move(values));
  auto stored = std::make_shared<std::vector<double>>(std::move(values));
  int id = g->add_node(s, std::move(stored), std::move(fn));
  return g->as_array(id);
}

}  // namespace

// ---- DiffArray ----------------------------------------------------------------

DiffArray DiffArray::zeros(const Shape& s) {
  DiffArray a;
  a.shape_ = s;
  a.values_ = alloc(static_cast<size_t>(s.numel()));
  return a;
}

DiffArray DiffArray::full(const Shape& s, double v) {
  DiffArray a;
  a.shape_ = s;
  a.values_ = alloc(static_cast<size_t>(s.numel()), v);
  return a;
}

DiffArray DiffArray::from(const Shape& s, std::vector<double> v) {
  if (static_cast<int64_t>(v.size()) != s.numel()) {
    throw DimensionError("value count " + std::to_string(v.size()) + " does not match shape " +
                         s.str());
  }
  DiffArray a;
  a.shape_ = s;
  a.values_ = std::make_shared<std::vector<double>>(std::move(v));
  return a;
}

DiffArray DiffArray::detach() const {
  DiffArray a;
  a.shape_ = shape_;
  a.values_ = values_;
  return a;
}

double DiffArray::scalar() const {
  if (numel() != 1) throw ContractError("scalar() on array of shape " + shape_.str());
  return (*values_)[0];
}

// ---- Graph ----------------------------------------------------------------------

DiffArray Graph::leaf(const std::string& name, const DiffArray& value) {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) {
    Node& n = nodes_[static_cast<size_t>(it->second)];
    if (n.shape != value.shape()) {
      throw ContractError("leaf '" + name + "' re-attached with a different shape");
    }
    return as_array(it->second);
  }
  Node n;
  n.shape = value.shape();
  n.values = value.values_;
  n.leaf_name = name;
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  leaves_[name] = id;
  return as_array(id);
}

int Graph::add_node(const Shape& s, std::shared_ptr<std::vector<double>> values, BackwardFn fn) {
  Node n;
  n.shape = s;
  n.values = std::move(values);
  n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

DiffArray Graph::as_array(int node) {
  Node& n = nodes_[static_cast<size_t>(node)];
  DiffArray a;
  a.shape_ = n.shape;
  a.values_ = n.values;
  a.graph_ = this;
  a.node_ = node;
  return a;
}

std::span<const double> Graph::node_values(int id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  return {n.values->data(), n.values->size()};
}

std::vector<double>& Graph::grad_buffer(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_alloc) {
    n.grad.assign(static_cast<size_t>(n.shape.numel()), 0.0);
    n.grad_alloc = true;
  }
  return n.grad;
}

bool Graph::grad_present(int id) const { return nodes_[static_cast<size_t>(id)].grad_alloc; }

void Graph::grad_into(int id, std::span<const double> contribution) {
  if (id < 0) return;
  std::vector<double>& g = grad_buffer(id);
  for (size_t i = 0; i < contribution.size(); ++i) g[i] += contribution[i];
}

GradMap Graph::backward(const DiffArray& root) {
  if (!root.attached() || root.graph() != this) {
    throw ContractError("backward root is not attached to this graph");
  }
  if (root.numel() != 1) {
    throw ContractError("backward root must be scalar, got shape " + root.shape().str());
  }
  grad_buffer(root.node())[0] = 1.0;
  for (int i = root.node(); i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad_alloc && n.backward) n.backward(*this, i);
  }
  GradMap out;
  for (const auto& [name, id] : leaves_) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad_alloc) {
      out[name] = DiffArray::from(n.shape, n.grad);
    } else {
      out[name] = DiffArray::zeros(n.shape);
    }
  }
  return out;
}

GradMap backward(const DiffArray& root) {
  if (!root.attached()) throw ContractError("backward on a detached array");
  return root.graph()->backward(root);
}

// ---- Params ------------------------------------------------------------------------

ParamInit init_uniform_fan_in(int64_t fan_in) {
  double bound = 1.0 / std::sqrt(static_cast<double>(std::max<int64_t>(fan_in, 1)));
  return [bound](std::mt19937_64& rng, const Shape&, std::vector<double>& out) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& x : out) x = dist(rng);
  };
}

ParamInit init_constant(double v) {
  return [v](std::mt19937_64&, const Shape&, std::vector<double>& out) {
    std::fill(out.begin(), out.end(), v);
  };
}

ParamInit init_softplus_inv_uniform(double lo, double hi) {
  return [lo, hi](std::mt19937_64& rng, const Shape&, std::vector<double>& out) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& x : out) {
      double t = dist(rng);
      x = std::log(std::expm1(t));  // softplus(x) == t
    }
  };
}

ParamInit init_log_iota() {
  return [](std::mt19937_64&, const Shape& s, std::vector<double>& out) {
    int64_t cols = s.cols();
    for (size_t i = 0; i < out.size(); ++i) {
      out[i] = std::log(static_cast<double>(static_cast<int64_t>(i) % cols + 1));
    }
  };
}

const DiffArray& Params::at(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

DiffArray& Params::get_or_create(const std::string& name, const Shape& s, const ParamInit& init,
                                 bool trainable) {
  auto it = values_.find(name);
  if (it != values_.end()) {
    if (it->second.shape() != s) {
      throw ContractError("parameter '" + name + "' requested with shape " + s.str() +
                          " but stored with " + it->second.shape().str());
    }
    return it->second;
  }
  std::vector<double> v(static_cast<size_t>(s.numel()));
  std::mt19937_64 rng(mix_seed(seed_, name));
  init(rng, s, v);
  auto [pos, ok] = values_.emplace(name, DiffArray::from(s, std::move(v)));
  (void)ok;
  if (!trainable) buffers_.insert(name);
  return pos->second;
}

void Params::set(const std::string& name, DiffArray value, bool trainable) {
  values_[name] = value.detach();
  if (!trainable) {
    buffers_.insert(name);
  } else {
    buffers_.erase(name);
  }
}

std::vector<std::string> Params::names() const {
  std::vector<std::string> out;
  out.reserve(values_.size());
  for (const auto& [k, v] : values_) out.push_back(k);
  return out;
}

std::vector<std::string> Params::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_) {
    if (buffers_.count(k) == 0) out.push_back(k);
  }
  return out;
}

std::vector<double>& Params::mutable_values(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw ContractError("unknown parameter '" + name + "'");
  DiffArray& a = it->second;
  if (a.values_.use_count() > 1) {
    a.values_ = std::make_shared<std::vector<double>>(*a.values_);
  }
  return *a.values_;
}

DiffArray PassContext::param(const std::string& name) {
  if (params == nullptr) throw ContractError("pass context has no parameter store");
  const DiffArray& master = params->at(name);
  if (graph != nullptr && params->trainable(name)) return graph->leaf(name, master);
  return master;
}

DiffArray PassContext::param(const std::string& name, const Shape& s, const ParamInit& init,
                             bool trainable) {
  if (params == nullptr) throw ContractError("pass context has no parameter store");
  const DiffArray& master = params->get_or_create(name, s, init, trainable);
  if (graph != nullptr && trainable) return graph->leaf(name, master);
  return master;
}

void apply_bn_updates(Params& params, const std::vector<BnUpdate>& updates, double momentum) {
  for (const BnUpdate& u : updates) {
    if (u.rows == 0) continue;
    std::vector<double>& rm = params.mutable_values(u.prefix + ".running_mean");
    std::vector<double>& rv = params.mutable_values(u.prefix + ".running_var");
    for (size_t c = 0; c < rm.size(); ++c) {
      rm[c] = (1.0 - momentum) * rm[c] + momentum * u.mean[c];
      rv[c] = (1.0 - momentum) * rv[c] + momentum * u.var[c];
    }
  }
}

// ---- elementwise kernels -------------------------------------------------------

namespace {

double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double act_forward(double x, Act kind) {
  switch (kind) {
    case Act::Relu:
      return x > 0.0 ? x : 0.0;
    case Act::Silu:
      return x * stable_sigmoid(x);
    case Act::Softplus:
      return stable_softplus(x);
    case Act::Sigmoid:
      return stable_sigmoid(x);
    case Act::Exp:
      return std::exp(x);
  }
  return 0.0;
}

double act_backward(double x, Act kind) {
  switch (kind) {
    case Act::Relu:
      return x > 0.0 ? 1.0 : 0.0;
    case Act::Silu: {
      double s = stable_sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    }
    case Act::Softplus:
      return stable_sigmoid(x);
    case Act::Sigmoid: {
      double s = stable_sigmoid(x);
      return s * (1.0 - s);
    }
    case Act::Exp:
      return std::exp(x);
  }
  return 0.0;
}

}  // namespace

// ---- ops -------------------------------------------------------------------------

DiffArray matmul(const DiffArray& x, const DiffArray& w) {
  if (x.shape().rank() != 2 || w.shape().rank() != 2 || x.cols() != w.rows()) {
    throw DimensionError("matmul shapes " + x.shape().str() + " and " + w.shape().str());
  }
  const int64_t n = x.rows(), k = x.cols(), m = w.cols();
  std::vector<double> out(static_cast<size_t>(n * m), 0.0);
  const double* xp = x.values().data();
  const double* wp = w.values().data();
  for (int64_t i = 0; i < n; ++i) {
    double* orow = out.data() + i * m;
    const double* xrow = xp + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double xv = xrow[kk];
      const double* wrow = wp + kk * m;
      for (int64_t j = 0; j < m; ++j) orow[j] += xv * wrow[j];
    }
  }
  Graph* g = common_graph({&x, &w});
  const int xid = node_of(x), wid = node_of(w);
  return finish(Shape(n, m), std::move(out), g,
                [xid, wid, n, k, m, xv = x.detach(), wv = w.detach()](Graph& gg, int self) {
                  const std::vector<double>& go = gg.grad_buffer(self);
                  if (xid >= 0) {
                    std::vector<double>& gx = gg.grad_buffer(xid);
                    const double* wp2 = wv.values().data();
                    for (int64_t i = 0; i < n; ++i) {
                      const double* grow = go.data() + i * m;
                      double* gxrow = gx.data() + i * k;
                      for (int64_t kk = 0; kk < k; ++kk) {
                        const double* wrow = wp2 + kk * m;
                        double acc = 0.0;
                        for (int64_t j = 0; j < m; ++j) acc += grow[j] * wrow[j];
                        gxrow[kk] += acc;
                      }
                    }
                  }
                  if (wid >= 0) {
                    std::vector<double>& gw = gg.grad_buffer(wid);
                    const double* xp2 = xv.values().data();
                    for (int64_t i = 0; i < n; ++i) {
                      const double* grow = go.data() + i * m;
                      const double* xrow = xp2 + i * k;
                      for (int64_t kk = 0; kk < k; ++kk) {
                        double* gwrow = gw.data() + kk * m;
                        const double xvv = xrow[kk];
                        for (int64_t j = 0; j < m; ++j) gwrow[j] += xvv * grow[j];
                      }
                    }
                  }
                });
}

DiffArray linear(const DiffArray& x, const DiffArray& w, const DiffArray& b) {
  if (b.shape().rank() != 1 || b.rows() != w.cols()) {
    throw DimensionError("linear bias shape " + b.shape().str() + " for weight " +
                         w.shape().str());
  }
  DiffArray mm = matmul(x, w);
  // Row-broadcast bias add as its own node keeps the matmul kernel reusable.
  const int64_t n = mm.rows(), m = mm.cols();
  std::vector<double> out(mm.values());
  const double* bp = b.values().data();
  for (int64_t i = 0; i < n; ++i) {
    double* orow = out.data() + i * m;
    for (int64_t j = 0; j < m; ++j) orow[j] += bp[j];
  }
  Graph* g = common_graph({&mm, &b});
  const int mid = node_of(mm), bid = node_of(b);
  return finish(Shape(n, m), std::move(out), g, [mid, bid, n, m](Graph& gg, int self) {
    const std::vector<double>& go = gg.grad_buffer(self);
    gg.grad_into(mid, go);
    if (bid >= 0) {
      std::vector<double>& gb = gg.grad_buffer(bid);
      for (int64_t i = 0; i < n; ++i) {
        const double* grow = go.data() + i * m;
        for (int64_t j = 0; j < m; ++j) gb[static_cast<size_t>(j)] += grow[j];
      }
    }
  });
}

DiffArray activation(const DiffArray& x, Act kind) {
  std::vector<double> out(x.values().size());
  const double* xp = x.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = act_forward(xp[i], kind);
  Graph* g = x.graph();
  const int xid = node_of(x);
  return finish(x.shape(), std::move(out), g, [xid, xv = x.detach(), kind](Graph& gg, int self) {
    const std::vector<double>& go = gg.grad_buffer(self);
    std::vector<double>& gx = gg.grad_buffer(xid);
    const double* xp2 = xv.values().data();
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * act_backward(xp2[i], kind);
  });
}

DiffArray add(const DiffArray& a, const DiffArray& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add shapes " + a.shape().str() + " and " + b.shape().str());
  }
  std::vector<double> out(a.values());
  const double* bp = b.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
  Graph* g = common_graph({&a, &b});
  const int aid = node_of(a), bid = node_of(b);
  return finish(a.shape(), std::move(out), g, [aid, bid](Graph& gg, int self) {
    const std::vector<double>& go = gg.grad_buffer(self);
    gg.grad_into(aid, go);
    gg.grad_into(bid, go);
  });
}

DiffArray sub(const DiffArray& a, const DiffArray& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("sub shapes " + a.shape().str() + " and " + b.shape().str());
  }
  std::vector<double> out(a.values());
  const double* bp = b.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bp[i];
  Graph* g = common_graph({&a, &b});
  const int aid = node_of(a), bid = node_of(b);
  return finish(a.shape(), std::move(out), g, [aid, bid](Graph& gg, int self) {
    const std::vector<double>& go = gg.grad_buffer(self);
    gg.grad_into(aid, go);
    if (bid >= 0) {
      std::vector<double>& gb = gg.grad_buffer(bid);
      for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
}

DiffArray mul(const DiffArray& a, const DiffArray& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shapes " + a.shape().str() + " and " + b.shape().str());
  }
  std::vector<double> out(a.values());
  const double* bp = b.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
  Graph* g = common_graph({&a, &b});
  const int aid = node_of(a), bid = node_of(b);
  return finish(a.shape(), std::move(out), g,
                [aid, bid, av = a.detach(), bv = b.detach()](Graph& gg, int self) {
                  const std::vector<double>& go = gg.grad_buffer(self);
                  if (aid >= 0) {
                    std::vector<double>& ga = gg.grad_buffer(aid);
                    const double* bp2 = bv.values().data();
                    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bp2[i];
                  }
                  if (bid >= 0) {
                    std::vector<double>& gb = gg.grad_buffer(bid);
                    const double* ap2 = av.values().data();
                    for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ap2[i];
                  }
                });
}

DiffArray scale(const DiffArray& x, double c) {
  std::vector<double> out(x.values());
  for (double& v : out) v *= c;
  Graph* g = x.graph();
  const int xid = node_of(x);
  return finish(x.shape(), std::move(out), g, [xid, c](Graph& gg, int self) {
    const std::vector<double>& go = gg.grad_buffer(self);
    std::vector<double>& gx = gg.grad_buffer(xid);
    for (size_t i = 0; i < go.size(); ++i) gx[i] += c * go[i];
  });
}

DiffArray sum(const DiffArray& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Graph* g = x.graph();
  const int xid = node_of(x);
  return finish(Shape(1), {acc}, g, [xid](Graph& gg, int self) {
    const double go = gg.grad_buffer(self)[0];
    std::vector<double>& gx = gg.grad_buffer(xid);
    for (double& v : gx) v += go;
  });
}

DiffArray mean(const DiffArray& x) {
  if (x.numel() == 0) throw ContractError("mean of empty array");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

DiffArray concat_rows(const DiffArray& a, const DiffArray& b) {
  if (a.cols() != b.cols() || a.shape().rank() != 2 || b.shape().rank() != 2) {
    throw DimensionError("concat_rows shapes " + a.shape().str() + " and " + b.shape().str());
  }
  const int64_t na = a.rows(), nb = b.rows(), m = a.cols();
  std::vector<double> out;
  out.reserve(static_cast<size_t>((na + nb) * m));
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  Graph* g = common_graph({&a, &b});
  const int aid = node_of(a), bid = node_of(b);
  return finish(Shape(na + nb, m), std::move(out), g, [aid, bid, na, nb, m](Graph& gg, int self) {
    const std::vector<double>& go = gg.grad_buffer(self);
    if (aid >= 0) {
      gg.grad_into(aid, {go.data(), static_cast<size_t>(na * m)});
    }
    if (bid >= 0) {
      gg.grad_into(bid, {go.data() + na * m, static_cast<size_t>(nb * m)});
    }
  });
}

DiffArray slice_rows(const DiffArray& x, int64_t begin, int64_t end) {
  if (begin < 0 || end < begin || end > x.rows()) {
    throw ContractError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) +
                        ") out of range for " + x.shape().str());
  }
  const int64_t m = x.cols();
  std::vector<double> out(x.values().begin() + begin * m, x.values().begin() + end * m);
  Graph* g = x.graph();
  const int xid = node_of(x);
  return finish(Shape(end - begin, m), std::move(out), g, [xid, begin, m](Graph& gg, int self) {
    const std::vector<double>& go = gg.grad_buffer(self);
    std::vector<double>& gx = gg.grad_buffer(xid);
    for (size_t i = 0; i < go.size(); ++i) gx[static_cast<size_t>(begin * m) + i] += go[i];
  });
}

DiffArray slice_cols(const DiffArray& x, int64_t begin, int64_t end) {
  if (begin < 0 || end < begin || end > x.cols()) {
    throw ContractError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) +
                        ") out of range for " + x.shape().str());
  }
  const int64_t n = x.rows(), m = x.cols(), w = end - begin;
  std::vector<double> out(static_cast<size_t>(n * w));
  const double* xp = x.values().data();
  for (int64_t i = 0; i < n; ++i) {
    std::memcpy(out.data() + i * w, xp + i * m + begin, static_cast<size_t>(w) * sizeof(double));
  }
  Graph* g = x.graph();
  const int xid = node_of(x);
  return finish(Shape(n, w), std::move(out), g, [xid, begin, n, m, w](Graph& gg, int self) {
    const std::vector<double>& go = gg.grad_buffer(self);
    std::vector<double>& gx = gg.grad_buffer(xid);
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < w; ++j) {
        gx[static_cast<size_t>(i * m + begin + j)] += go[static_cast<size_t>(i * w + j)];
      }
    }
  });
}

DiffArray gather_rows(const DiffArray& x, std::span<const int64_t> idx) {
  const int64_t n = x.rows(), m = x.cols();
  std::vector<double> out(idx.size() * static_cast<size_t>(m));
  const double* xp = x.values().data();
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) throw ContractError("gather_rows index out of range");
    std::memcpy(out.data() + i * static_cast<size_t>(m), xp + idx[i] * m,
                static_cast<size_t>(m) * sizeof(double));
  }
  Graph* g = x.graph();
  const int xid = node_of(x);
  std::vector<int64_t> idx_copy(idx.begin(), idx.end());
  return finish(Shape(static_cast<int64_t>(idx.size()), m), std::move(out), g,
                [xid, m, idx_copy](Graph& gg, int self) {
                  const std::vector<double>& go = gg.grad_buffer(self);
                  std::vector<double>& gx = gg.grad_buffer(xid);
                  for (size_t i = 0; i < idx_copy.size(); ++i) {
                    const double* grow = go.data() + i * static_cast<size_t>(m);
                    double* gxrow = gx.data() + idx_copy[i] * m;
                    for (int64_t j = 0; j < m; ++j) gxrow[j] += grow[j];
                  }
                });
}

DiffArray scatter_rows(const DiffArray& x, std::span<const int64_t> idx, int64_t out_rows) {
  if (static_cast<int64_t>(idx.size()) != x.rows()) {
    throw ContractError("scatter_rows index count " + std::to_string(idx.size()) +
                        " does not match row count " + std::to_string(x.rows()));
  }
  const int64_t m = x.cols();
  std::vector<double> out(static_cast<size_t>(out_rows * m), 0.0);
  const double* xp = x.values().data();
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= out_rows) throw ContractError("scatter_rows index out of range");
    double* orow = out.data() + idx[i] * m;
    const double* xrow = xp + i * static_cast<size_t>(m);
    for (int64_t j = 0; j < m; ++j) orow[j] += xrow[j];
  }
  Graph* g = x.graph();
  const int xid = node_of(x);
  std::vector<int64_t> idx_copy(idx.begin(), idx.end());
  return finish(Shape(out_rows, m), std::move(out), g, [xid, m, idx_copy](Graph& gg, int self) {
    const std::vector<double>& go = gg.grad_buffer(self);
    std::vector<double>& gx = gg.grad_buffer(xid);
    for (size_t i = 0; i < idx_copy.size(); ++i) {
      const double* grow = go.data() + idx_copy[i] * m;
      double* gxrow = gx.data() + i * static_cast<size_t>(m);
      for (int64_t j = 0; j < m; ++j) gxrow[j] += grow[j];
    }
  });
}

DiffArray segment_mean(const DiffArray& x, const std::vector<std::vector<int64_t>>& groups) {
  const int64_t n = x.rows(), m = x.cols();
  std::vector<double> out(groups.size() * static_cast<size_t>(m), 0.0);
  const double* xp = x.values().data();
  for (size_t s = 0; s < groups.size(); ++s) {
    const auto& g = groups[s];
    if (g.empty()) throw ContractError("segment_mean: empty group");
    double* orow = out.data() + s * static_cast<size_t>(m);
    for (int64_t r : g) {
      if (r < 0 || r >= n) throw ContractError("segment_mean index out of range");
      const double* xrow = xp + r * m;
      for (int64_t j = 0; j < m; ++j) orow[j] += xrow[j];
    }
    const double inv = 1.0 / static_cast<double>(g.size());
    for (int64_t j = 0; j < m; ++j) orow[j] *= inv;
  }
  Graph* g = x.graph();
  const int xid = node_of(x);
  return finish(Shape(static_cast<int64_t>(groups.size()), m), std::move(out), g,
                [xid, m, groups](Graph& gg, int self) {
                  const std::vector<double>& go = gg.grad_buffer(self);
                  std::vector<double>& gx = gg.grad_buffer(xid);
                  for (size_t s = 0; s < groups.size(); ++s) {
                    const double inv = 1.0 / static_cast<double>(groups[s].size());
                    const double* grow = go.data() + s * static_cast<size_t>(m);
                    for (int64_t r : groups[s]) {
                      double* gxrow = gx.data() + r * m;
                      for (int64_t j = 0; j < m; ++j) gxrow[j] += grow[j] * inv;
                    }
                  }
                });
}

DiffArray batchnorm(PassContext& ctx, const DiffArray& x, const std::string& prefix) {
  if (x.shape().rank() != 2) throw DimensionError("batchnorm expects a matrix");
  const int64_t n = x.rows(), c = x.cols();
  constexpr double kEps = 1e-5;
  DiffArray gamma = ctx.param(prefix + ".gamma", Shape(c), init_constant(1.0));
  DiffArray beta = ctx.param(prefix + ".beta", Shape(c), init_constant(0.0));
  ctx.param(prefix + ".running_mean", Shape(c), init_constant(0.0), /*trainable=*/false);
  ctx.param(prefix + ".running_var", Shape(c), init_constant(1.0), /*trainable=*/false);
  if (n == 0) return DiffArray::zeros(Shape(0, c));

  std::vector<double> mu(static_cast<size_t>(c), 0.0);
  std::vector<double> var(static_cast<size_t>(c), 0.0);
  const double* xp = x.values().data();
  if (ctx.mode == BnMode::Train) {
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < c; ++j) mu[static_cast<size_t>(j)] += xp[i * c + j];
    }
    for (int64_t j = 0; j < c; ++j) mu[static_cast<size_t>(j)] /= static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < c; ++j) {
        const double d = xp[i * c + j] - mu[static_cast<size_t>(j)];
        var[static_cast<size_t>(j)] += d * d;
      }
    }
    for (int64_t j = 0; j < c; ++j) var[static_cast<size_t>(j)] /= static_cast<double>(n);
    // Running update uses the unbiased estimate where defined.
    BnUpdate upd;
    upd.prefix = prefix;
    upd.mean = mu;
    upd.var = var;
    if (n > 1) {
      const double f = static_cast<double>(n) / static_cast<double>(n - 1);
      for (double& v : upd.var) v *= f;
    }
    upd.rows = n;
    ctx.bn_updates.push_back(std::move(upd));
  } else {
    const auto& rm = ctx.params->at(prefix + ".running_mean").values();
    const auto& rv = ctx.params->at(prefix + ".running_var").values();
    mu.assign(rm.begin(), rm.end());
    var.assign(rv.begin(), rv.end());
  }

  std::vector<double> inv_sd(static_cast<size_t>(c));
  for (int64_t j = 0; j < c; ++j) {
    inv_sd[static_cast<size_t>(j) ] = 1.0 / std::sqrt(var[static_cast<size_t>(j)] + kEps);
  }
  std::vector<double> xhat(static_cast<size_t>(n * c));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < c; ++j) {
      xhat[static_cast<size_t>(i * c + j)] =
          (xp[i * c + j] - mu[static_cast<size_t>(j)]) * inv_sd[static_cast<size_t>(j)];
    }
  }
  std::vector<double> out(static_cast<size_t>(n * c));
  const double* gp = gamma.values().data();
  const double* bp = beta.values().data();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < c; ++j) {
      out[static_cast<size_t>(i * c + j)] =
          gp[j] * xhat[static_cast<size_t>(i * c + j)] + bp[j];
    }
  }

  Graph* g = common_graph({&x, &gamma, &beta});
  const int xid = node_of(x), gid = node_of(gamma), bid = node_of(beta);
  const bool train = ctx.mode == BnMode::Train;
  return finish(
      Shape(n, c), std::move(out), g,
      [xid, gid, bid, n, c, train, xhat = std::move(xhat), inv_sd = std::move(inv_sd),
       gv = gamma.detach()](Graph& gg, int self) {
        const std::vector<double>& go = gg.grad_buffer(self);
        if (gid >= 0) {
          std::vector<double>& ggamma = gg.grad_buffer(gid);
          for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < c; ++j) {
              ggamma[static_cast<size_t>(j)] +=
                  go[static_cast<size_t>(i * c + j)] * xhat[static_cast<size_t>(i * c + j)];
            }
          }
        }
        if (bid >= 0) {
          std::vector<double>& gbeta = gg.grad_buffer(bid);
          for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < c; ++j) {
              gbeta[static_cast<size_t>(j)] += go[static_cast<size_t>(i * c + j)];
            }
          }
        }
        if (xid >= 0) {
          std::vector<double>& gx = gg.grad_buffer(xid);
          const double* gp2 = gv.values().data();
          if (!train) {
            for (int64_t i = 0; i < n; ++i) {
              for (int64_t j = 0; j < c; ++j) {
                gx[static_cast<size_t>(i * c + j)] += go[static_cast<size_t>(i * c + j)] *
                                                      gp2[j] * inv_sd[static_cast<size_t>(j)];
              }
            }
          } else {
            // dL/dx = gamma * inv_sd * (dy - mean(dy) - xhat * mean(dy*xhat))
            std::vector<double> mean_dy(static_cast<size_t>(c), 0.0);
            std::vector<double> mean_dyx(static_cast<size_t>(c), 0.0);
            for (int64_t i = 0; i < n; ++i) {
              for (int64_t j = 0; j < c; ++j) {
                const double dy = go[static_cast<size_t>(i * c + j)] * gp2[j];
                mean_dy[static_cast<size_t>(j)] += dy;
                mean_dyx[static_cast<size_t>(j)] += dy * xhat[static_cast<size_t>(i * c + j)];
              }
            }
            for (int64_t j = 0; j < c; ++j) {
              mean_dy[static_cast<size_t>(j)] /= static_cast<double>(n);
              mean_dyx[static_cast<size_t>(j)] /= static_cast<double>(n);
            }
            for (int64_t i = 0; i < n; ++i) {
              for (int64_t j = 0; j < c; ++j) {
                const double dy = go[static_cast<size_t>(i * c + j)] * gp2[j];
                gx[static_cast<size_t>(i * c + j)] +=
                    inv_sd[static_cast<size_t>(j)] *
                    (dy - mean_dy[static_cast<size_t>(j)] -
                     xhat[static_cast<size_t>(i * c + j)] * mean_dyx[static_cast<size_t>(j)]);
              }
            }
          }
        }
      });
}

DiffArray causal_conv1d(const DiffArray& x, const DiffArray& kernel, const DiffArray& bias) {
  if (x.shape().rank() != 2 || kernel.shape().rank() != 2 || x.cols() != kernel.cols()) {
    throw DimensionError("causal_conv1d shapes " + x.shape().str() + " and " +
                         kernel.shape().str());
  }
  if (bias.rows() != x.cols()) throw DimensionError("causal_conv1d bias shape");
  const int64_t L = x.rows(), d = x.cols(), K = kernel.rows();
  std::vector<double> out(static_cast<size_t>(L * d));
  const double* xp = x.values().data();
  const double* kp = kernel.values().data();
  const double* bp = bias.values().data();
  for (int64_t t = 0; t < L; ++t) {
    double* orow = out.data() + t * d;
    std::memcpy(orow, bp, static_cast<size_t>(d) * sizeof(double));
    for (int64_t j = 0; j < K; ++j) {
      const int64_t s = t - (K - 1) + j;
      if (s < 0) continue;
      const double* xrow = xp + s * d;
      const double* krow = kp + j * d;
      for (int64_t ch = 0; ch < d; ++ch) orow[ch] += krow[ch] * xrow[ch];
    }
  }
  Graph* g = common_graph({&x, &kernel, &bias});
  const int xid = node_of(x), kid = node_of(kernel), bid = node_of(bias);
  return finish(Shape(L, d), std::move(out), g,
                [xid, kid, bid, L, d, K, xv = x.detach(), kv = kernel.detach()](Graph& gg,
                                                                                int self) {
                  const std::vector<double>& go = gg.grad_buffer(self);
                  if (xid >= 0) {
                    std::vector<double>& gx = gg.grad_buffer(xid);
                    const double* kp2 = kv.values().data();
                    for (int64_t t = 0; t < L; ++t) {
                      const double* grow = go.data() + t * d;
                      for (int64_t j = 0; j < K; ++j) {
                        const int64_t s = t - (K - 1) + j;
                        if (s < 0) continue;
                        double* gxrow = gx.data() + s * d;
                        const double* krow = kp2 + j * d;
                        for (int64_t ch = 0; ch < d; ++ch) gxrow[ch] += grow[ch] * krow[ch];
                      }
                    }
                  }
                  if (kid >= 0) {
                    std::vector<double>& gk = gg.grad_buffer(kid);
                    const double* xp2 = xv.values().data();
                    for (int64_t t = 0; t < L; ++t) {
                      const double* grow = go.data() + t * d;
                      for (int64_t j = 0; j < K; ++j) {
                        const int64_t s = t - (K - 1) + j;
                        if (s < 0) continue;
                        double* gkrow = gk.data() + j * d;
                        const double* xrow = xp2 + s * d;
                        for (int64_t ch = 0; ch < d; ++ch) gkrow[ch] += grow[ch] * xrow[ch];
                      }
                    }
                  }
                  if (bid >= 0) {
                    std::vector<double>& gb = gg.grad_buffer(bid);
                    for (int64_t t = 0; t < L; ++t) {
                      const double* grow = go.data() + t * d;
                      for (int64_t ch = 0; ch < d; ++ch) gb[static_cast<size_t>(ch)] += grow[ch];
                    }
                  }
                });
}

// ---- optimizer -----------------------------------------------------------------

void adam_step(Params& params, const GradMap& grads, const AdamConfig& cfg, int64_t t,
               AdamState& state) {
  if (t < 1) throw ContractError("adam step index must be >= 1");
  for (const std::string& name : params.trainable_names()) {
    auto git = grads.find(name);
    if (git == grads.end()) throw ContractError("missing gradient for parameter '" + name + "'");
    const std::vector<double>& g = git->second.values();
    std::vector<double>& v = params.mutable_values(name);
    if (g.size() != v.size()) throw DimensionError("gradient shape mismatch for '" + name + "'");
    std::vector<double>& m1 = state.m[name];
    std::vector<double>& m2 = state.v[name];
    if (m1.empty()) m1.assign(v.size(), 0.0);
    if (m2.empty()) m2.assign(v.size(), 0.0);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (size_t i = 0; i < v.size(); ++i) {
      m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g[i];
      m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m1[i] / bc1;
      const double vhat = m2[i] / bc2;
      v[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// ---- gradient checking ------------------------------------------------------------

double rel_err(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

GradCheckResult grad_check(const ForwardFn& f, Params& params, double h, double tol, BnMode mode,
                           int64_t max_elements_per_param, uint64_t sample_seed) {
  auto eval_detached = [&]() {
    PassContext ctx{nullptr, &params, mode, {}};
    DiffArray out = f(ctx);
    return out.scalar();
  };

  // Determinism gate: two value-only evaluations must agree bitwise.
  const double v1 = eval_detached();
  const double v2 = eval_detached();
  if (std::memcmp(&v1, &v2, sizeof(double)) != 0) {
    throw ContractError("grad_check closure is not deterministic");
  }

  Graph graph;
  PassContext ctx{&graph, &params, mode, {}};
  DiffArray root = f(ctx);
  if (root.numel() != 1) throw ContractError("grad_check closure must return a scalar");
  const double attached_value = root.values()[0];
  if (std::memcmp(&v1, &attached_value, sizeof(double)) != 0) {
    throw ContractError("attached forward differs from detached forward");
  }
  // A closure that touches no parameter yields a detached root; every
  // parameter then gets an all-zero analytic gradient below.
  GradMap grads;
  if (root.attached()) grads = graph.backward(root);

  GradCheckResult result;
  result.tol = tol;
  for (const std::string& name : params.trainable_names()) {
    auto git = grads.find(name);
    std::vector<double> analytic;
    if (git != grads.end()) {
      analytic = git->second.values();
    } else {
      analytic.assign(params.at(name).values().size(), 0.0);
    }
    const int64_t count = static_cast<int64_t>(analytic.size());
    std::vector<int64_t> indices;
    if (max_elements_per_param > 0 && count > max_elements_per_param) {
      std::mt19937_64 rng(mix_seed(sample_seed, name));
      std::uniform_int_distribution<int64_t> dist(0, count - 1);
      std::set<int64_t> chosen;
      while (static_cast<int64_t>(chosen.size()) < max_elements_per_param) {
        chosen.insert(dist(rng));
      }
      indices.assign(chosen.begin(), chosen.end());
    } else {
      indices.resize(static_cast<size_t>(count));
      for (int64_t i = 0; i < count; ++i) indices[static_cast<size_t>(i)] = i;
    }

    GradCheckEntry entry;
    entry.name = name;
    entry.elements_checked = static_cast<int64_t>(indices.size());
    for (int64_t i : indices) {
      std::vector<double>& vals = params.mutable_values(name);
      const double saved = vals[static_cast<size_t>(i)];
      vals[static_cast<size_t>(i)] = saved + h;
      const double fp = eval_detached();
      params.mutable_values(name)[static_cast<size_t>(i)] = saved - h;
      const double fm = eval_detached();
      params.mutable_values(name)[static_cast<size_t>(i)] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      entry.max_rel_err =
          std::max(entry.max_rel_err, rel_err(analytic[static_cast<size_t>(i)], numeric));
    }
    result.max_rel_err = std::max(result.max_rel_err, entry.max_rel_err);
    result.entries.push_back(std::move(entry));
  }
  result.pass = result.max_rel_err < tol;
  return result;
}

}  // namespace winmamba
