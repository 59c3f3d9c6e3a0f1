#pragma once

// Synthetic video corpus: moving geometric shapes over a noisy background,
// persisted as one binary blob plus a JSON manifest. Also the patchification
// utilities that turn clips into flat tubelet tokens and back.

#include <cstdint>
#include <string>
#include <vector>

#include "salt/rng.hpp"
#include "salt/tensor.hpp"

namespace salt {

// What a clip's label names: the motion direction or the drawn shape. The
// other attribute (plus speed, size, brightness, start position) becomes a
// nuisance factor, so motion labels need temporal cues and shape labels
// spatial ones.
enum class LabelKind { kMotion, kShape };

constexpr int kNumClasses = 4;
constexpr const char* kMotionNames[kNumClasses] = {"right", "left", "down", "up"};
constexpr const char* kShapeNames[kNumClasses] = {"square", "plus", "disc", "hollow"};

struct DatasetSpec {
  int64_t clip_count = 512;
  int frames = 16;
  int height = 32;
  int width = 32;
  int channels = 1;
  int tubelet_t = 2;
  int tubelet_h = 4;
  int tubelet_w = 4;
  LabelKind label_kind = LabelKind::kMotion;
  double train_fraction = 0.875;
  uint64_t seed = 7;

  // Rendering knobs. Shape side length is drawn as a fraction of min(H, W);
  // speed in pixels/frame is capped so the shape never leaves the frame.
  double background = 0.5;
  double noise_sigma = 0.08;
  double min_intensity = 0.80;
  double max_intensity = 0.95;
  double min_size_frac = 0.30;
  double max_size_frac = 0.45;
  double min_speed = 0.45;
  double max_speed = 1.20;

  void validate() const;
  std::string to_json() const;
  static DatasetSpec from_json(const std::string& text);
};

struct VideoClip {
  Tensor frames;  // [T, C, H, W], values in [0, 1]
  int label = 0;
  int64_t id = 0;
};

struct TokenGrid {
  Tensor tokens;  // [N, voxels_per_tubelet], scan order (t', h', w')
  int grid_t = 0, grid_h = 0, grid_w = 0;
  int tubelet_t = 0, tubelet_h = 0, tubelet_w = 0;
  int channels = 0;
  std::vector<Pos3> positions;  // grid coordinates per token row

  int64_t token_count() const { return static_cast<int64_t>(grid_t) * grid_h * grid_w; }
};

struct ClipEntry {
  int64_t id = 0;
  int label = 0;
  uint64_t offset = 0;  // byte offset into clips.bin
  uint64_t length = 0;  // payload bytes
  uint64_t checksum = 0;
};

// Handle to a persisted dataset directory (manifest.json + clips.bin).
struct Dataset {
  DatasetSpec spec;
  std::string dir;
  std::vector<ClipEntry> clips;
  std::vector<int64_t> train_ids;
  std::vector<int64_t> eval_ids;
  bool pairs = false;  // clips come as (plausible, implausible) pairs
};

// Pure in-memory generation: clip `id` of `spec`. The persisted corpus is
// exactly these clips written in order.
VideoClip render_clip(const DatasetSpec& spec, int64_t id);

// Paired plausible/implausible clips sharing every nuisance draw (including
// pixel noise); the implausible one deviates mid-clip.
enum class Violation { kTeleport, kReversal, kSwap };
struct ClipPair {
  VideoClip plausible;
  VideoClip implausible;
};
ClipPair render_pair(const DatasetSpec& spec, int64_t id, Violation violation);

// Writes manifest.json + clips.bin under out_dir. Refuses to overwrite an
// existing manifest unless force. Returns the open handle.
Dataset generate_dataset(const DatasetSpec& spec, const std::string& out_dir, bool force = false);

// Persists `pair_count` violation pairs in the same format, interleaved as
// (plausible 2i, implausible 2i+1); spec.clip_count is ignored.
Dataset generate_pairs(const DatasetSpec& spec, int64_t pair_count, Violation violation,
                       const std::string& out_dir, bool force = false);

Dataset open_dataset(const std::string& dir);

// Loads clip `index` (= position in manifest order), verifying its checksum.
VideoClip load_clip(const Dataset& dataset, int64_t index);

TokenGrid patchify(const VideoClip& clip, int tubelet_t, int tubelet_h, int tubelet_w);
TokenGrid patchify(const VideoClip& clip, const DatasetSpec& spec);

// Inverse of patchify; label/id are copied onto the result.
VideoClip unpatchify(const TokenGrid& grid, int label = 0, int64_t id = 0);

// Per-row standardization to mean 0 / variance 1 (+eps); the reconstruction
// target convention for masked pixel regression. Pure data transform.
Tensor standardize_tubelets(const Tensor& tokens, double eps = 1e-6);

// Replicates one [C, H, W] image into a 16-frame clip.
VideoClip image_to_clip(const Tensor& image);

}  // namespace salt
