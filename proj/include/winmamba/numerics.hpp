#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "winmamba/common.hpp"

namespace winmamba {

class Graph;

// Extents of a dense array, rank 1..3. Nearly everything in the pipeline is a
// rank-2 matrix (rows = voxels or sequence positions, cols = channels).
class Shape {
 public:
  Shape() = default;
  explicit Shape(int64_t n) : d_{n, 0, 0}, rank_(1) {}
  Shape(int64_t r, int64_t c) : d_{r, c, 0}, rank_(2) {}
  Shape(int64_t a, int64_t b, int64_t c) : d_{a, b, c}, rank_(3) {}

  int rank() const { return rank_; }
  int64_t dim(int i) const { return d_[i]; }
  int64_t rows() const { return d_[0]; }
  int64_t cols() const { return rank_ >= 2 ? d_[1] : 1; }
  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < rank_; ++i) n *= d_[i];
    return rank_ == 0 ? 0 : n;
  }
  bool operator==(const Shape& o) const { return rank_ == o.rank_ && d_ == o.d_; }
  bool operator!=(const Shape& o) const { return !(*this == o); }
  std::string str() const;

 private:
  std::array<int64_t, 3> d_{0, 0, 0};
  int rank_ = 0;
};

// Dense 64-bit real array, optionally attached to an operation graph so that
// reverse-mode gradients can flow through whatever produced it. Value
// semantics; the payload is shared, never mutated after construction.
class DiffArray {
 public:
  DiffArray() = default;

  static DiffArray zeros(const Shape& s);
  static DiffArray full(const Shape& s, double v);
  static DiffArray from(const Shape& s, std::vector<double> v);

  const Shape& shape() const { return shape_; }
  int64_t rows() const { return shape_.rows(); }
  int64_t cols() const { return shape_.cols(); }
  int64_t numel() const { return shape_.numel(); }
  const std::vector<double>& values() const { return *values_; }
  std::span<const double> span() const { return {values_->data(), values_->size()}; }

  bool attached() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  int node() const { return node_; }
  DiffArray detach() const;

  double scalar() const;
  double at(int64_t i) const { return (*values_)[static_cast<size_t>(i)]; }
  double at(int64_t r, int64_t c) const {
    return (*values_)[static_cast<size_t>(r * shape_.cols() + c)];
  }

 private:
  friend class Graph;
  friend class Params;
  Shape shape_;
  std::shared_ptr<std::vector<double>> values_;
  Graph* graph_ = nullptr;
  int node_ = -1;
};

using GradMap = std::map<std::string, DiffArray>;

// Define-by-run operation graph. Rebuilt for every forward pass; append order
// is the topological order, so the backward sweep is a single reverse walk.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Attaches a named leaf (parameter or checked input). Repeated requests for
  // the same name return the same node so gradients accumulate in one slot.
  DiffArray leaf(const std::string& name, const DiffArray& value);

  // root must be a scalar attached to this graph. Returns gradients for every
  // named leaf; leaves unreachable from root get zeros.
  GradMap backward(const DiffArray& root);

  // -- op-construction API ---------------------------------------------------
  // Invoked during the backward sweep with this graph and the node's own id.
  using BackwardFn = std::function<void(Graph&, int)>;
  int add_node(const Shape& s, std::shared_ptr<std::vector<double>> values, BackwardFn fn);
  DiffArray as_array(int node);

  std::span<const double> node_values(int id) const;
  // Gradient of a node during the backward sweep; allocated (zeroed) on first
  // access. id < 0 is ignored via grad_into.
  std::vector<double>& grad_buffer(int id);
  bool grad_present(int id) const;
  void grad_into(int id, std::span<const double> contribution);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::shared_ptr<std::vector<double>> values;
    std::vector<double> grad;
    bool grad_alloc = false;
    BackwardFn backward;
    std::string leaf_name;
  };
  std::vector<Node> nodes_;
  std::map<std::string, int> leaves_;
};

// Parameter initializer: fills `out` (already sized) using `rng`.
using ParamInit = std::function<void(std::mt19937_64&, const Shape&, std::vector<double>&)>;

ParamInit init_uniform_fan_in(int64_t fan_in);
ParamInit init_constant(double v);
// Bias b such that softplus(b) is uniform in [lo, hi].
ParamInit init_softplus_inv_uniform(double lo, double hi);
// Row-constant log(1), log(2), ... log(cols) pattern used for decay rates.
ParamInit init_log_iota();

// Named parameter store. Values are detached DiffArrays; "buffers" (running
// statistics) are tracked separately so optimizers and gradient checks skip
// them. Initialization depends only on (seed, name, shape), not on the order
// in which parameters are first requested.
class Params {
 public:
  explicit Params(uint64_t seed = 0) : seed_(seed) {}

  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  const DiffArray& at(const std::string& name) const;
  DiffArray& get_or_create(const std::string& name, const Shape& s, const ParamInit& init,
                           bool trainable = true);
  void set(const std::string& name, DiffArray value, bool trainable = true);
  bool trainable(const std::string& name) const { return buffers_.count(name) == 0; }

  std::vector<std::string> names() const;
  std::vector<std::string> trainable_names() const;
  size_t size() const { return values_.size(); }
  uint64_t seed() const { return seed_; }

  // In-place elementwise mutation. Clones the payload first if it is shared
  // with a live graph.
  std::vector<double>& mutable_values(const std::string& name);

 private:
  std::map<std::string, DiffArray> values_;
  std::set<std::string> buffers_;
  uint64_t seed_ = 0;
};

enum class Act { Relu, Silu, Softplus, Sigmoid, Exp };
enum class BnMode { Train, Eval };

// Batch statistics recorded during a train-mode pass. The parameter store is
// immutable while a pass runs; updates are applied afterwards, in pass order,
// via apply_bn_updates.
struct BnUpdate {
  std::string prefix;
  std::vector<double> mean;
  std::vector<double> var;  // unbiased when rows > 1
  int64_t rows = 0;
};

// Everything a forward pass needs: the recording graph (null for a detached,
// value-only pass), the parameter store, and the normalization mode.
struct PassContext {
  Graph* graph = nullptr;
  Params* params = nullptr;
  BnMode mode = BnMode::Eval;
  std::vector<BnUpdate> bn_updates;

  bool recording() const { return graph != nullptr; }
  // Fetch an existing parameter, attaching it to the graph when recording.
  DiffArray param(const std::string& name);
  // Create-if-missing variant.
  DiffArray param(const std::string& name, const Shape& s, const ParamInit& init,
                  bool trainable = true);
};

void apply_bn_updates(Params& params, const std::vector<BnUpdate>& updates,
                      double momentum = 0.1);

// ---- differentiable operations ---------------------------------------------

DiffArray matmul(const DiffArray& x, const DiffArray& w);
DiffArray linear(const DiffArray& x, const DiffArray& w, const DiffArray& b);
DiffArray activation(const DiffArray& x, Act kind);
DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray sub(const DiffArray& a, const DiffArray& b);
DiffArray mul(const DiffArray& a, const DiffArray& b);
DiffArray scale(const DiffArray& x, double c);
DiffArray sum(const DiffArray& x);
DiffArray mean(const DiffArray& x);
DiffArray concat_rows(const DiffArray& a, const DiffArray& b);
DiffArray slice_rows(const DiffArray& x, int64_t begin, int64_t end);
DiffArray slice_cols(const DiffArray& x, int64_t begin, int64_t end);
DiffArray gather_rows(const DiffArray& x, std::span<const int64_t> idx);
// out[idx[i]] += x[i]; idx entries must lie in [0, out_rows).
DiffArray scatter_rows(const DiffArray& x, std::span<const int64_t> idx, int64_t out_rows);
DiffArray segment_mean(const DiffArray& x, const std::vector<std::vector<int64_t>>& groups);

// Per-column normalization over the rows of x. Train mode uses batch
// statistics (epsilon 1e-5) and records a BnUpdate in the context; eval mode
// normalizes with the stored running statistics. Parameters live under
// `prefix` + {.gamma,.beta,.running_mean,.running_var}.
DiffArray batchnorm(PassContext& ctx, const DiffArray& x, const std::string& prefix);

// Depthwise causal convolution along rows: out[t,d] depends on x[t-k+1..t, d].
DiffArray causal_conv1d(const DiffArray& x, const DiffArray& kernel, const DiffArray& bias);

GradMap backward(const DiffArray& root);

// ---- optimizer ---------------------------------------------------------------

struct AdamConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// One Adam update at step t (1-based). Every trainable parameter must have a
// gradient entry; buffers are left untouched.
void adam_step(Params& params, const GradMap& grads, const AdamConfig& cfg, int64_t t,
               AdamState& state);

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  void step(Params& params, const GradMap& grads) { adam_step(params, grads, cfg_, ++t_, state_); }
  int64_t t() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  AdamState state_;
  int64_t t_ = 0;
};

// ---- finite-difference verification ------------------------------------------

using ForwardFn = std::function<DiffArray(PassContext&)>;

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  int64_t elements_checked = 0;
};

struct GradCheckResult {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = true;
};

// Central finite differences against analytic gradients for every trainable
// parameter. The closure must be deterministic; two detached evaluations are
// compared bitwise and any disagreement is a contract error. When
// max_elements_per_param > 0, a deterministic subsample of that many elements
// is checked per parameter instead of every element.
GradCheckResult grad_check(const ForwardFn& f, Params& params, double h, double tol,
                           BnMode mode = BnMode::Train, int64_t max_elements_per_param = 0,
                           uint64_t sample_seed = 0);

double rel_err(double a, double b, double floor = 1e-5);

}  // namespace winmamba
