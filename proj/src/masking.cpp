#include "salt/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "salt/common.hpp"

namespace salt {

namespace {

void check_grid(GridDims grid) {
  check(grid.t >= 1 && grid.h >= 1 && grid.w >= 1, ErrorKind::Config,
        "mask grid dims must be positive, got ", grid.t, "x", grid.h, "x", grid.w);
}

// Paints `count` rectangular blocks of ~`scale` spatial area into `columns`
// (size h*w), then returns the extruded token mask.
void paint_blocks(std::vector<uint8_t>& columns, GridDims grid, double scale, double aspect_lo,
                  double aspect_hi, int count, Rng& rng) {
  const double area = scale * static_cast<double>(grid.spatial());
  for (int b = 0; b < count; ++b) {
    const double aspect = rng.uniform(aspect_lo, aspect_hi);  // height / width
    int64_t bh = round_half_up(std::sqrt(area * aspect));
    int64_t bw = round_half_up(std::sqrt(area / aspect));
    bh = std::clamp<int64_t>(bh, 1, grid.h);
    bw = std::clamp<int64_t>(bw, 1, grid.w);
    const int64_t top = rng.uniform_int(grid.h - bh + 1);
    const int64_t left = rng.uniform_int(grid.w - bw + 1);
    for (int64_t y = top; y < top + bh; ++y)
      for (int64_t x = left; x < left + bw; ++x)
        columns[static_cast<size_t>(y * grid.w + x)] = 1;
  }
}

// Extrudes a spatial column mask over the first round(temporal_scale * t)
// temporal slots and finalizes the MaskSpec. Randomly degenerate draws are
// repaired deterministically: a mask that covers everything gets its first
// column cleared, an empty one gets its first column set. Working on whole
// columns (rather than single tokens) keeps the temporal-extrusion structure
// intact.
MaskSpec extrude(GridDims grid, const std::vector<uint8_t>& columns, double temporal_scale,
                 const char* strategy) {
  int64_t slots = round_half_up(temporal_scale * grid.t);
  slots = std::clamp<int64_t>(slots, 1, grid.t);
  MaskSpec mask;
  mask.grid = grid;
  mask.strategy = strategy;
  mask.masked.assign(static_cast<size_t>(grid.count()), 0);
  for (int64_t t = 0; t < slots; ++t)
    for (int64_t c = 0; c < grid.spatial(); ++c)
      if (columns[static_cast<size_t>(c)])
        mask.masked[static_cast<size_t>(t * grid.spatial() + c)] = 1;
  int64_t count = mask.masked_count();
  if (count == grid.count()) {
    for (int64_t t = 0; t < grid.t; ++t) mask.masked[static_cast<size_t>(t * grid.spatial())] = 0;
    count -= grid.t;
  } else if (count == 0) {
    for (int64_t t = 0; t < slots; ++t) mask.masked[static_cast<size_t>(t * grid.spatial())] = 1;
    count = slots;
  }
  mask.achieved_ratio = static_cast<double>(count) / static_cast<double>(grid.count());
  return mask;
}

}  // namespace

int64_t MaskSpec::masked_count() const {
  return std::accumulate(masked.begin(), masked.end(), int64_t{0},
                         [](int64_t acc, uint8_t m) { return acc + (m ? 1 : 0); });
}

void MaskSpec::validate() const {
  check(static_cast<int64_t>(masked.size()) == grid.count(), ErrorKind::Dimension,
        "mask length ", masked.size(), " != grid token count ", grid.count());
  const int64_t count = masked_count();
  check(count > 0, ErrorKind::Degenerate, "mask has no masked tokens");
  check(count < grid.count(), ErrorKind::Degenerate, "mask has no visible tokens");
  const double ratio = static_cast<double>(count) / static_cast<double>(grid.count());
  check(std::abs(ratio - achieved_ratio) < 1e-12, ErrorKind::Contract,
        "achieved_ratio ", achieved_ratio, " inconsistent with count ", count);
}

void MultiBlockParams::validate() const {
  check(short_scale > 0.0 && short_scale <= 1.0, ErrorKind::Config,
        "short_scale must lie in (0,1], got ", short_scale);
  check(long_scale > 0.0 && long_scale <= 1.0, ErrorKind::Config,
        "long_scale must lie in (0,1], got ", long_scale);
  check(temporal_scale > 0.0 && temporal_scale <= 1.0, ErrorKind::Config,
        "temporal_scale must lie in (0,1], got ", temporal_scale);
  check(aspect_lo > 0.0 && aspect_lo <= aspect_hi, ErrorKind::Config,
        "aspect range must be positive and ordered, got [", aspect_lo, ", ", aspect_hi, "]");
  check(short_block_count >= 1 && long_block_count >= 1, ErrorKind::Config,
        "block counts must be >= 1");
}

std::pair<MaskSpec, MaskSpec> sample_multiblock(GridDims grid, const MultiBlockParams& params,
                                                Rng& rng) {
  check_grid(grid);
  params.validate();
  // A full-scale block extruded over every slot nominally masks the whole
  // clip; that is a configuration mistake, not a random fluke, so reject it
  // up front instead of silently repairing it.
  check(!(params.short_scale >= 1.0 && params.temporal_scale >= 1.0) &&
            !(params.long_scale >= 1.0 && params.temporal_scale >= 1.0),
        ErrorKind::Degenerate,
        "spatial scale 1 with full temporal extrusion leaves no visible context");
  std::vector<uint8_t> short_cols(static_cast<size_t>(grid.spatial()), 0);
  paint_blocks(short_cols, grid, params.short_scale, params.aspect_lo, params.aspect_hi,
               params.short_block_count, rng);
  std::vector<uint8_t> long_cols(static_cast<size_t>(grid.spatial()), 0);
  paint_blocks(long_cols, grid, params.long_scale, params.aspect_lo, params.aspect_hi,
               params.long_block_count, rng);
  return {extrude(grid, short_cols, params.temporal_scale, "multiblock-short"),
          extrude(grid, long_cols, params.temporal_scale, "multiblock-long")};
}

MaskSpec sample_random_tube(GridDims grid, double ratio, Rng& rng) {
  check_grid(grid);
  check(ratio > 0.0 && ratio < 1.0, ErrorKind::Degenerate,
        "tube ratio must lie strictly in (0,1), got ", ratio);
  const int64_t spatial = grid.spatial();
  int64_t k = std::max<int64_t>(round_half_up(ratio * static_cast<double>(spatial)), 1);
  check(k < spatial, ErrorKind::Degenerate, "tube ratio ", ratio, " rounds to all ", spatial,
        " spatial columns masked (no visible context)");

  // Partial Fisher-Yates: the first k entries are a uniform k-subset.
  std::vector<int64_t> columns(static_cast<size_t>(spatial));
  std::iota(columns.begin(), columns.end(), 0);
  for (int64_t i = 0; i < k; ++i) {
    const int64_t j = i + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(spatial - i)));
    std::swap(columns[static_cast<size_t>(i)], columns[static_cast<size_t>(j)]);
  }

  MaskSpec mask;
  mask.grid = grid;
  mask.strategy = "random-tube";
  mask.masked.assign(static_cast<size_t>(grid.count()), 0);
  for (int64_t i = 0; i < k; ++i)
    for (int64_t t = 0; t < grid.t; ++t)
      mask.masked[static_cast<size_t>(t * spatial + columns[static_cast<size_t>(i)])] = 1;
  mask.achieved_ratio = static_cast<double>(mask.masked_count()) / grid.count();
  return mask;
}

std::pair<MaskSpec, MaskSpec> sample_multi_random_tube(GridDims grid, double ratio1, double ratio2,
                                                       Rng& rng) {
  Rng first = rng.fork("tube", 0);
  Rng second = rng.fork("tube", 1);
  return {sample_random_tube(grid, ratio1, first), sample_random_tube(grid, ratio2, second)};
}

MaskSpec sample_causal(GridDims grid, double ratio, Rng& rng) {
  (void)rng;  // the causal mask is deterministic; parameter kept for symmetry
  check_grid(grid);
  check(ratio < 1.0, ErrorKind::Degenerate, "causal ratio must be < 1, got ", ratio);
  int64_t slots = round_half_up(ratio * static_cast<double>(grid.t));
  check(slots > 0, ErrorKind::Degenerate, "causal ratio ", ratio, " masks no temporal slot of ",
        grid.t, " (no targets)");
  slots = std::min<int64_t>(slots, grid.t - 1);
  check(slots >= 1 && grid.t >= 2, ErrorKind::Degenerate,
        "causal mask needs >= 2 temporal slots");

  MaskSpec mask;
  mask.grid = grid;
  mask.strategy = "causal";
  mask.masked.assign(static_cast<size_t>(grid.count()), 0);
  for (int64_t t = grid.t - slots; t < grid.t; ++t)
    for (int64_t c = 0; c < grid.spatial(); ++c)
      mask.masked[static_cast<size_t>(t * grid.spatial() + c)] = 1;
  mask.achieved_ratio = static_cast<double>(mask.masked_count()) / grid.count();
  return mask;
}

double union_ratio(const MaskSpec& a, const MaskSpec& b) {
  check(a.grid.t == b.grid.t && a.grid.h == b.grid.h && a.grid.w == b.grid.w,
        ErrorKind::Dimension, "union_ratio: mask grids differ");
  int64_t covered = 0;
  for (size_t i = 0; i < a.masked.size(); ++i)
    if (a.masked[i] || b.masked[i]) ++covered;
  return static_cast<double>(covered) / static_cast<double>(a.grid.count());
}

MaskedView split_view(const TokenGrid& tokens, const MaskSpec& mask) {
  check(tokens.grid_t == mask.grid.t && tokens.grid_h == mask.grid.h &&
            tokens.grid_w == mask.grid.w,
        ErrorKind::Dimension, "split_view: mask grid ", mask.grid.t, "x", mask.grid.h, "x",
        mask.grid.w, " does not match token grid ", tokens.grid_t, "x", tokens.grid_h, "x",
        tokens.grid_w);
  mask.validate();

  MaskedView view;
  const int64_t n = tokens.token_count();
  for (int64_t i = 0; i < n; ++i) {
    if (mask.masked[static_cast<size_t>(i)]) {
      view.masked_idx.push_back(i);
      view.masked_positions.push_back(tokens.positions[static_cast<size_t>(i)]);
    } else {
      view.visible_idx.push_back(i);
      view.visible_positions.push_back(tokens.positions[static_cast<size_t>(i)]);
    }
  }
  return view;
}

}  // namespace salt
