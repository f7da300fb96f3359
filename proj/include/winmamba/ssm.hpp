#pragma once

#include <string>
#include <vector>

#include "winmamba/numerics.hpp"

namespace winmamba {

// Gated selective-state-space block settings. Channels come from the caller;
// the inner width is expand * channels.
struct SsmConfig {
  int expand = 2;
  int state_size = 16;
  int conv_width = 4;
  bool bidirectional = false;
};

// Sequence of feature rows consumed by the scan; length may be zero.
struct TokenSequence {
  DiffArray features;  // L x C
  int64_t length() const { return features.rows(); }
};

// Exact sequential recurrence, per inner channel d with state vector h:
//   h_t = exp(delta[t,d] * a[d,:]) * h_{t-1} + (delta[t,d] * b[t,:]) * u[t,d]
//   y[t,d] = <c[t,:], h_t> + skip[d] * u[t,d]
// a entries must be negative for stability (callers parameterize a as
// -exp(log_a)); delta must be strictly positive.
DiffArray selective_scan(const DiffArray& u, const DiffArray& delta, const DiffArray& a,
                         const DiffArray& b, const DiffArray& c, const DiffArray& skip);

// Chunked/associative formulation of the same recurrence (values only). The
// per-chunk state maps are combined as a balanced tree, so the floating-point
// summation order differs from the plain loop; results agree to ~1e-12.
std::vector<double> selective_scan_blocked(const std::vector<double>& u,
                                           const std::vector<double>& delta,
                                           const std::vector<double>& a,
                                           const std::vector<double>& b,
                                           const std::vector<double>& c,
                                           const std::vector<double>& skip, int64_t len,
                                           int64_t channels, int64_t state, int64_t chunk = 16);

// Full gated block: input projection split into (x, gate), causal depthwise
// conv + silu on x, input-dependent (delta, b, c), selective scan, gating,
// output projection, residual add of the block input.
TokenSequence mamba_block(PassContext& ctx, const TokenSequence& seq, const std::string& prefix,
                          int channels, const SsmConfig& cfg);

}  // namespace winmamba
