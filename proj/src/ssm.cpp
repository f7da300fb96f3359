#include "winmamba/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace winmamba {

namespace {

struct ScanDims {
  int64_t len;
  int64_t channels;  // inner width
  int64_t state;
};

ScanDims check_scan_shapes(const DiffArray& u, const DiffArray& delta, const DiffArray& a,
                           const DiffArray& b, const DiffArray& c, const DiffArray& skip) {
  const int64_t len = u.rows(), d = u.cols();
  const int64_t n = a.cols();
  if (delta.rows() != len || delta.cols() != d) {
    throw DimensionError("selective_scan: delta shape " + delta.shape().str());
  }
  if (a.rows() != d) throw DimensionError("selective_scan: a shape " + a.shape().str());
  if (b.rows() != len || b.cols() != n) {
    throw DimensionError("selective_scan: b shape " + b.shape().str());
  }
  if (c.rows() != len || c.cols() != n) {
    throw DimensionError("selective_scan: c shape " + c.shape().str());
  }
  if (skip.rows() != d) throw DimensionError("selective_scan: skip shape " + skip.shape().str());
  for (double v : delta.values()) {
    if (v <= 0.0) throw ContractError("selective_scan requires strictly positive delta");
  }
  return {len, d, n};
}

}  // namespace

DiffArray selective_scan(const DiffArray& u, const DiffArray& delta, const DiffArray& a,
                         const DiffArray& b, const DiffArray& c, const DiffArray& skip) {
  const ScanDims dims = check_scan_shapes(u, delta, a, b, c, skip);
  const int64_t L = dims.len, D = dims.channels, N = dims.state;

  const double* up = u.values().data();
  const double* dp = delta.values().data();
  const double* ap = a.values().data();
  const double* bp = b.values().data();
  const double* cp = c.values().data();
  const double* kp = skip.values().data();

  std::vector<double> out(static_cast<size_t>(L * D), 0.0);
  std::vector<double> h(static_cast<size_t>(N));
  for (int64_t d = 0; d < D; ++d) {
    std::fill(h.begin(), h.end(), 0.0);
    const double* arow = ap + d * N;
    for (int64_t t = 0; t < L; ++t) {
      const double dt = dp[t * D + d];
      const double ut = up[t * D + d];
      const double du = dt * ut;
      const double* brow = bp + t * N;
      const double* crow = cp + t * N;
      double y = kp[d] * ut;
      for (int64_t n = 0; n < N; ++n) {
        h[static_cast<size_t>(n)] =
            std::exp(dt * arow[n]) * h[static_cast<size_t>(n)] + du * brow[n];
        y += crow[n] * h[static_cast<size_t>(n)];
      }
      out[static_cast<size_t>(t * D + d)] = y;
    }
  }
  for (double v : out) {
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by selective_scan");
  }

  Graph* g = nullptr;
  {
    const DiffArray* inputs[] = {&u, &delta, &a, &b, &c, &skip};
    for (const DiffArray* x : inputs) {
      if (!x->attached()) continue;
      if (g == nullptr) {
        g = x->graph();
      } else if (g != x->graph()) {
        throw ContractError("selective_scan operands belong to different graphs");
      }
    }
  }
  if (g == nullptr) return DiffArray::from(Shape(L, D), std::move(out));

  const int uid = u.attached() ? u.node() : -1;
  const int did = delta.attached() ? delta.node() : -1;
  const int aid = a.attached() ? a.node() : -1;
  const int bid = b.attached() ? b.node() : -1;
  const int cid = c.attached() ? c.node() : -1;
  const int kid = skip.attached() ? skip.node() : -1;

  // The backward pass re-runs the forward recurrence per channel to rebuild
  // the state trajectory, then walks it in reverse. Memory stays O(L*N) per
  // channel instead of O(L*D*N) for the whole op.
  auto stored = std::make_shared<std::vector<double>>(std::move(out));
  auto backward_fn = [uid, did, aid, bid, cid, kid, L, D, N, uv = u.detach(), dv = delta.detach(),
                      av = a.detach(), bv = b.detach(), cv = c.detach(),
                      kv = skip.detach()](Graph& gg, int self) {
    const std::vector<double>& go = gg.grad_buffer(self);
    const double* up = uv.values().data();
    const double* dp = dv.values().data();
    const double* ap = av.values().data();
    const double* bp = bv.values().data();
    const double* cp = cv.values().data();
    const double* kp = kv.values().data();

    std::vector<double>* gu = uid >= 0 ? &gg.grad_buffer(uid) : nullptr;
    std::vector<double>* gd = did >= 0 ? &gg.grad_buffer(did) : nullptr;
    std::vector<double>* ga = aid >= 0 ? &gg.grad_buffer(aid) : nullptr;
    std::vector<double>* gb = bid >= 0 ? &gg.grad_buffer(bid) : nullptr;
    std::vector<double>* gc = cid >= 0 ? &gg.grad_buffer(cid) : nullptr;
    std::vector<double>* gk = kid >= 0 ? &gg.grad_buffer(kid) : nullptr;

    std::vector<double> hist(static_cast<size_t>((L + 1) * N));  // h_{-1}..h_{L-1}
    std::vector<double> decay(static_cast<size_t>(L * N));
    std::vector<double> gh(static_cast<size_t>(N));
    for (int64_t d = 0; d < D; ++d) {
      const double* arow = ap + d * N;
      std::fill(hist.begin(), hist.begin() + N, 0.0);
      for (int64_t t = 0; t < L; ++t) {
        const double dt = dp[t * D + d];
        const double du = dt * up[t * D + d];
        const double* brow = bp + t * N;
        const double* hprev = hist.data() + t * N;
        double* hcur = hist.data() + (t + 1) * N;
        double* dec = decay.data() + t * N;
        for (int64_t n = 0; n < N; ++n) {
          dec[n] = std::exp(dt * arow[n]);
          hcur[n] = dec[n] * hprev[n] + du * brow[n];
        }
      }
      std::fill(gh.begin(), gh.end(), 0.0);
      for (int64_t t = L - 1; t >= 0; --t) {
        const double gy = go[static_cast<size_t>(t * D + d)];
        const double dt = dp[t * D + d];
        const double ut = up[t * D + d];
        const double* brow = bp + t * N;
        const double* crow = cp + t * N;
        const double* hcur = hist.data() + (t + 1) * N;
        const double* hprev = hist.data() + t * N;
        const double* dec = decay.data() + t * N;

        if (gk) (*gk)[static_cast<size_t>(d)] += gy * ut;
        double gu_acc = gy * kp[d];
        double gd_acc = 0.0;
        for (int64_t n = 0; n < N; ++n) {
          double ghn = gh[static_cast<size_t>(n)] + gy * crow[n];
          if (gc) (*gc)[static_cast<size_t>(t * N + n)] += gy * hcur[n];
          gd_acc += ghn * (arow[n] * dec[n] * hprev[n] + brow[n] * ut);
          if (ga) (*ga)[static_cast<size_t>(d * N + n)] += ghn * dt * dec[n] * hprev[n];
          if (gb) (*gb)[static_cast<size_t>(t * N + n)] += ghn * dt * ut;
          gu_acc += ghn * dt * brow[n];
          gh[static_cast<size_t>(n)] = ghn * dec[n];
        }
        if (gu) (*gu)[static_cast<size_t>(t * D + d)] += gu_acc;
        if (gd) (*gd)[static_cast<size_t>(t * D + d)] += gd_acc;
      }
    }
  };
  int id = g->add_node(Shape(L, D), std::move(stored), std::move(backward_fn));
  return g->as_array(id);
}

namespace {

// Compose affine state maps (scale, offset) pairwise until one map remains:
// applying (s1,o1) then (s2,o2) is (s1*s2, o1*s2 + o2).
void tree_combine(std::vector<double>& sc, std::vector<double>& of) {
  size_t count = sc.size();
  while (count > 1) {
    const size_t half = count / 2;
    for (size_t i = 0; i < half; ++i) {
      const double s1 = sc[2 * i], o1 = of[2 * i];
      const double s2 = sc[2 * i + 1], o2 = of[2 * i + 1];
      sc[i] = s1 * s2;
      of[i] = o1 * s2 + o2;
    }
    if (count % 2 == 1) {
      sc[half] = sc[count - 1];
      of[half] = of[count - 1];
      count = half + 1;
    } else {
      count = half;
    }
  }
}

}  // namespace

std::vector<double> selective_scan_blocked(const std::vector<double>& u,
                                           const std::vector<double>& delta,
                                           const std::vector<double>& a,
                                           const std::vector<double>& b,
                                           const std::vector<double>& c,
                                           const std::vector<double>& skip, int64_t len,
                                           int64_t channels, int64_t state, int64_t chunk) {
  const int64_t L = len, D = channels, N = state;
  if (chunk < 1) throw ContractError("selective_scan_blocked chunk must be >= 1");
  std::vector<double> out(static_cast<size_t>(L * D), 0.0);
  std::vector<double> sc, of;
  for (int64_t d = 0; d < D; ++d) {
    const double* arow = a.data() + d * N;
    for (int64_t n = 0; n < N; ++n) {
      double carry = 0.0;
      for (int64_t t0 = 0; t0 < L; t0 += chunk) {
        const int64_t t1 = std::min(L, t0 + chunk);
        // Summarize the chunk as one affine map via tree combination, advance
        // the carried state with it, and emit outputs by local replay.
        sc.clear();
        of.clear();
        for (int64_t t = t0; t < t1; ++t) {
          const double dt = delta[static_cast<size_t>(t * D + d)];
          sc.push_back(std::exp(dt * arow[n]));
          of.push_back(dt * b[static_cast<size_t>(t * N + n)] *
                       u[static_cast<size_t>(t * D + d)]);
        }
        std::vector<double> sc2 = sc, of2 = of;
        tree_combine(sc2, of2);
        const double next_carry = sc2[0] * carry + of2[0];
        double h = carry;
        for (int64_t t = t0; t < t1; ++t) {
          h = sc[static_cast<size_t>(t - t0)] * h + of[static_cast<size_t>(t - t0)];
          out[static_cast<size_t>(t * D + d)] += c[static_cast<size_t>(t * N + n)] * h;
        }
        carry = next_carry;
      }
    }
    for (int64_t t = 0; t < L; ++t) {
      out[static_cast<size_t>(t * D + d)] +=
          skip[static_cast<size_t>(d)] * u[static_cast<size_t>(t * D + d)];
    }
  }
  return out;
}

TokenSequence mamba_block(PassContext& ctx, const TokenSequence& seq, const std::string& prefix,
                          int channels, const SsmConfig& cfg) {
  const int64_t C = channels;
  const int64_t D = static_cast<int64_t>(cfg.expand) * C;
  const int64_t N = cfg.state_size;
  const int64_t K = cfg.conv_width;

  DiffArray w_in = ctx.param(prefix + ".in_proj.w", Shape(C, 2 * D), init_uniform_fan_in(C));
  DiffArray conv_w = ctx.param(prefix + ".conv.w", Shape(K, D), init_uniform_fan_in(K));
  DiffArray conv_b = ctx.param(prefix + ".conv.b", Shape(D), init_uniform_fan_in(K));
  DiffArray dt_w = ctx.param(prefix + ".dt.w", Shape(D, D), init_uniform_fan_in(D));
  DiffArray dt_b = ctx.param(prefix + ".dt.b", Shape(D), init_softplus_inv_uniform(1e-2, 1e-1));
  DiffArray b_w = ctx.param(prefix + ".b_proj.w", Shape(D, N), init_uniform_fan_in(D));
  DiffArray c_w = ctx.param(prefix + ".c_proj.w", Shape(D, N), init_uniform_fan_in(D));
  DiffArray a_log = ctx.param(prefix + ".a_log", Shape(D, N), init_log_iota());
  DiffArray skip = ctx.param(prefix + ".skip", Shape(D), init_constant(1.0));
  DiffArray w_out = ctx.param(prefix + ".out_proj.w", Shape(D, C), init_uniform_fan_in(D));

  if (seq.length() == 0) {
    return {DiffArray::zeros(Shape(0, C))};
  }
  if (seq.features.cols() != C) {
    throw DimensionError("mamba_block expects " + std::to_string(C) + " channels, got " +
                         std::to_string(seq.features.cols()));
  }

  DiffArray both = matmul(seq.features, w_in);
  DiffArray x = slice_cols(both, 0, D);
  DiffArray gate = slice_cols(both, D, 2 * D);
  x = activation(causal_conv1d(x, conv_w, conv_b), Act::Silu);
  DiffArray delta = activation(linear(x, dt_w, dt_b), Act::Softplus);
  DiffArray b_t = matmul(x, b_w);
  DiffArray c_t = matmul(x, c_w);
  // negative decay rates via the log parameterization
  DiffArray a = scale(activation(a_log, Act::Exp), -1.0);

  DiffArray y = selective_scan(x, delta, a, b_t, c_t, skip);
  if (cfg.bidirectional) {
    const int64_t L = seq.length();
    std::vector<int64_t> rev(static_cast<size_t>(L));
    for (int64_t i = 0; i < L; ++i) rev[static_cast<size_t>(i)] = L - 1 - i;
    DiffArray yr = selective_scan(gather_rows(x, rev), gather_rows(delta, rev), a,
                                  gather_rows(b_t, rev), gather_rows(c_t, rev), skip);
    y = add(y, gather_rows(yr, rev));
  }
  DiffArray gated = mul(y, activation(gate, Act::Silu));
  DiffArray out = matmul(gated, w_out);
  return {add(seq.features, out)};
}

}  // namespace winmamba
