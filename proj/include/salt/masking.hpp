#pragma once

// Spatio-temporal token mask samplers. A mask partitions the token grid into
// visible context (x) and hidden targets (y); the masked positions are the
// prediction slots. Four strategies: multi-block (default), random tube,
// multi random tube, and causal.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "salt/common.hpp"
#include "salt/rng.hpp"
#include "salt/tensor.hpp"
#include "salt/video.hpp"

namespace salt {

struct GridDims {
  int t = 0, h = 0, w = 0;
  int64_t spatial() const { return static_cast<int64_t>(h) * w; }
  int64_t count() const { return static_cast<int64_t>(t) * spatial(); }
};

inline GridDims grid_of(const TokenGrid& g) { return {g.grid_t, g.grid_h, g.grid_w}; }

struct MaskSpec {
  GridDims grid;
  std::vector<uint8_t> masked;  // size grid.count(), scan order (t, h, w)
  std::string strategy;
  double achieved_ratio = 0.0;

  int64_t masked_count() const;
  // Enforces the type invariants: ratio consistent, at least one visible and
  // one masked token.
  void validate() const;
};

struct MultiBlockParams {
  double short_scale = 0.15;  // spatial area fraction per short block
  double long_scale = 0.70;
  double temporal_scale = 1.0;  // fraction of temporal slots covered
  double aspect_lo = 0.75;      // block aspect ratio (height / width) range
  double aspect_hi = 1.50;
  int short_block_count = 8;
  int long_block_count = 2;

  void validate() const;
};

// Two independent masks per clip: a union of many small blocks and a union of
// few large ones, each extruded over the temporal slots. Blocks are clipped
// to the grid; a union covering every token is reported as degenerate.
std::pair<MaskSpec, MaskSpec> sample_multiblock(GridDims grid, const MultiBlockParams& params,
                                                Rng& rng);

// Exactly round(ratio * spatial) columns masked across all temporal slots,
// clamped so at least one column stays visible.
MaskSpec sample_random_tube(GridDims grid, double ratio, Rng& rng);

// Two independent random-tube masks from separate substreams of `rng`.
std::pair<MaskSpec, MaskSpec> sample_multi_random_tube(GridDims grid, double ratio1, double ratio2,
                                                       Rng& rng);

// The final round(ratio * t) temporal slots fully masked; earlier slots fully
// visible (clamped to keep slot 0 visible).
MaskSpec sample_causal(GridDims grid, double ratio, Rng& rng);

// Fraction of tokens covered by the union of two masks over the same grid.
double union_ratio(const MaskSpec& a, const MaskSpec& b);

// The (x, y, position) split a mask induces on a token grid. Index vectors
// point into the grid's token rows; interleaving x and y back by index
// restores the original order.
struct MaskedView {
  std::vector<int64_t> visible_idx;
  std::vector<int64_t> masked_idx;
  std::vector<Pos3> visible_positions;
  std::vector<Pos3> masked_positions;
};

MaskedView split_view(const TokenGrid& tokens, const MaskSpec& mask);

// Aggregate sampling statistics for the mask-stats command: achieved-ratio
// mean/stddev and per-token masking frequency over `samples` draws.
struct MaskStats {
  double ratio_mean = 0.0;
  double ratio_stddev = 0.0;
  std::vector<double> frequency;  // per token, scan order
  int64_t samples = 0;
};

template <typename Sampler>
MaskStats collect_mask_stats(GridDims grid, int64_t samples, Rng& rng, Sampler&& sample_one) {
  check(samples >= 1, ErrorKind::Contract, "need at least one sample");
  MaskStats stats;
  stats.samples = samples;
  stats.frequency.assign(static_cast<size_t>(grid.count()), 0.0);
  double sum = 0.0, sum_sq = 0.0;
  for (int64_t i = 0; i < samples; ++i) {
    Rng child = rng.fork("mask-stats", i);
    MaskSpec mask = sample_one(child);
    sum += mask.achieved_ratio;
    sum_sq += mask.achieved_ratio * mask.achieved_ratio;
    for (size_t k = 0; k < mask.masked.size(); ++k)
      if (mask.masked[k]) stats.frequency[k] += 1.0;
  }
  for (double& f : stats.frequency) f /= static_cast<double>(samples);
  stats.ratio_mean = sum / static_cast<double>(samples);
  const double var = std::max(0.0, sum_sq / samples - stats.ratio_mean * stats.ratio_mean);
  stats.ratio_stddev = std::sqrt(var);
  return stats;
}

}  // namespace salt
