#include "salt/video.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "salt/common.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace salt {

namespace {

constexpr char kBlobMagic[8] = {'S', 'A', 'L', 'T', 'V', 'I', 'D', '1'};
constexpr char kManifestFormat[] = "salt-dataset-v1";

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

uint64_t parse_hex64(const std::string& s) {
  check(s.size() == 16, ErrorKind::Corruption, "manifest checksum must be 16 hex chars, got '", s,
        "'");
  return std::stoull(s, nullptr, 16);
}

// Length of the overlap of [lo1, hi1] and [lo2, hi2].
double overlap(double lo1, double hi1, double lo2, double hi2) {
  return std::max(0.0, std::min(hi1, hi2) - std::max(lo1, lo2));
}

// Exact covered fraction of the unit pixel [px, px+1] x [py, py+1] by an
// axis-aligned rectangle centered at (cx, cy) with half extents (hw, hh).
double rect_coverage(double cx, double cy, double hw, double hh, int px, int py) {
  return overlap(cx - hw, cx + hw, px, px + 1) * overlap(cy - hh, cy + hh, py, py + 1);
}

// Covered fraction of one pixel by shape `kind` of side `size` at (cx, cy).
// Rectilinear shapes are exact (inclusion-exclusion of rectangles); the disc
// is 4x4 supersampled.
double shape_coverage(int kind, double cx, double cy, double size, int px, int py) {
  const double h = size / 2.0;
  switch (kind) {
    case 0:  // square
      return rect_coverage(cx, cy, h, h, px, py);
    case 1: {  // plus: horizontal bar + vertical bar - their central overlap
      const double arm = size / 6.0;
      return rect_coverage(cx, cy, h, arm, px, py) + rect_coverage(cx, cy, arm, h, px, py) -
             rect_coverage(cx, cy, arm, arm, px, py);
    }
    case 2: {  // disc
      const double r2 = h * h;
      int inside = 0;
      for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
          const double x = px + (i + 0.5) / 4.0 - cx;
          const double y = py + (j + 0.5) / 4.0 - cy;
          if (x * x + y * y <= r2) ++inside;
        }
      }
      return inside / 16.0;
    }
    case 3: {  // hollow square: outer rect minus inner rect (wall = size/4)
      const double inner = h / 2.0;
      return rect_coverage(cx, cy, h, h, px, py) - rect_coverage(cx, cy, inner, inner, px, py);
    }
    default:
      fail(ErrorKind::Contract, "unknown shape kind ", kind);
  }
}

struct ClipParams {
  int label = 0;
  int shape = 0;
  double size = 0;
  double intensity = 0;
  double speed = 0;
  double vx = 0, vy = 0;
  double cx0 = 0, cy0 = 0;
};

// Draws every per-clip nuisance from its own substream. Draw order is part
// of the on-disk format: changing it changes every generated corpus.
ClipParams draw_params(const DatasetSpec& spec, int64_t id, Rng& r) {
  ClipParams p;
  p.label = static_cast<int>(id % kNumClasses);
  const int direction =
      spec.label_kind == LabelKind::kMotion ? p.label : static_cast<int>(r.uniform_int(4));
  p.shape = spec.label_kind == LabelKind::kShape ? p.label : static_cast<int>(r.uniform_int(4));
  const double base = std::min(spec.height, spec.width);
  p.size = r.uniform(spec.min_size_frac, spec.max_size_frac) * base;
  p.intensity = r.uniform(spec.min_intensity, spec.max_intensity);

  const double margin = 1.0;
  const double extent = direction < 2 ? spec.width : spec.height;
  const double cap = (extent - p.size - 2 * margin) / std::max(1, spec.frames - 1);
  check(cap > spec.min_speed, ErrorKind::Config, "frame ", spec.height, "x", spec.width,
        " too small for shapes of size ", p.size, " moving >= ", spec.min_speed, " px/frame over ",
        spec.frames, " frames");
  p.speed = r.uniform(spec.min_speed, std::min(spec.max_speed, cap));
  p.vx = direction == 0 ? p.speed : direction == 1 ? -p.speed : 0.0;
  p.vy = direction == 2 ? p.speed : direction == 3 ? -p.speed : 0.0;

  const double travel = p.speed * (spec.frames - 1);
  const double xlo = p.size / 2 + margin + (p.vx < 0 ? travel : 0.0);
  const double xhi = spec.width - p.size / 2 - margin - (p.vx > 0 ? travel : 0.0);
  const double ylo = p.size / 2 + margin + (p.vy < 0 ? travel : 0.0);
  const double yhi = spec.height - p.size / 2 - margin - (p.vy > 0 ? travel : 0.0);
  check(xlo <= xhi && ylo <= yhi, ErrorKind::Config, "no feasible start position for clip ", id);
  p.cx0 = r.uniform(xlo, xhi);
  p.cy0 = r.uniform(ylo, yhi);
  return p;
}

// Renders a clip from explicit per-frame centers/intensities plus a noise
// stream: pixel = bg + coverage * (intensity - bg) + sigma * N(0,1), clamped.
Tensor render_frames(const DatasetSpec& spec, const ClipParams& p, const std::vector<double>& cxs,
                     const std::vector<double>& cys, const std::vector<double>& intens,
                     Rng& noise) {
  const int T = spec.frames, C = spec.channels, H = spec.height, W = spec.width;
  Tensor frames = Tensor::zeros({T, C, H, W});
  float* out = frames.data();
  std::vector<double> cov(static_cast<size_t>(H) * W);
  for (int t = 0; t < T; ++t) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        cov[static_cast<size_t>(y) * W + x] =
            shape_coverage(p.shape, cxs[t], cys[t], p.size, x, y);
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const double v = spec.background +
                           cov[static_cast<size_t>(y) * W + x] * (intens[t] - spec.background) +
                           spec.noise_sigma * noise.normal();
          *out++ = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return frames;
}

std::vector<char> clip_bytes(const VideoClip& clip) {
  const auto& v = clip.frames.values();
  std::vector<char> bytes(v.size() * sizeof(float));
  std::memcpy(bytes.data(), v.data(), bytes.size());
  return bytes;
}

ordered_json spec_to_json(const DatasetSpec& s) {
  ordered_json j;
  j["clip_count"] = s.clip_count;
  j["frames"] = s.frames;
  j["height"] = s.height;
  j["width"] = s.width;
  j["channels"] = s.channels;
  j["tubelet_t"] = s.tubelet_t;
  j["tubelet_h"] = s.tubelet_h;
  j["tubelet_w"] = s.tubelet_w;
  j["label_kind"] = s.label_kind == LabelKind::kMotion ? "motion" : "shape";
  j["train_fraction"] = s.train_fraction;
  j["seed"] = s.seed;
  j["background"] = s.background;
  j["noise_sigma"] = s.noise_sigma;
  j["min_intensity"] = s.min_intensity;
  j["max_intensity"] = s.max_intensity;
  j["min_size_frac"] = s.min_size_frac;
  j["max_size_frac"] = s.max_size_frac;
  j["min_speed"] = s.min_speed;
  j["max_speed"] = s.max_speed;
  return j;
}

DatasetSpec spec_from_json_obj(const ordered_json& j) {
  DatasetSpec s;
  check(j.is_object(), ErrorKind::Config, "dataset spec must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "clip_count") s.clip_count = value.get<int64_t>();
    else if (key == "frames") s.frames = value.get<int>();
    else if (key == "height") s.height = value.get<int>();
    else if (key == "width") s.width = value.get<int>();
    else if (key == "channels") s.channels = value.get<int>();
    else if (key == "tubelet_t") s.tubelet_t = value.get<int>();
    else if (key == "tubelet_h") s.tubelet_h = value.get<int>();
    else if (key == "tubelet_w") s.tubelet_w = value.get<int>();
    else if (key == "label_kind") {
      const std::string kind = value.get<std::string>();
      if (kind == "motion") s.label_kind = LabelKind::kMotion;
      else if (kind == "shape") s.label_kind = LabelKind::kShape;
      else fail(ErrorKind::Config, "label_kind must be 'motion' or 'shape', got '", kind, "'");
    } else if (key == "train_fraction") s.train_fraction = value.get<double>();
    else if (key == "seed") s.seed = value.get<uint64_t>();
    else if (key == "background") s.background = value.get<double>();
    else if (key == "noise_sigma") s.noise_sigma = value.get<double>();
    else if (key == "min_intensity") s.min_intensity = value.get<double>();
    else if (key == "max_intensity") s.max_intensity = value.get<double>();
    else if (key == "min_size_frac") s.min_size_frac = value.get<double>();
    else if (key == "max_size_frac") s.max_size_frac = value.get<double>();
    else if (key == "min_speed") s.min_speed = value.get<double>();
    else if (key == "max_speed") s.max_speed = value.get<double>();
    else fail(ErrorKind::Config, "unknown dataset spec key '", key, "'");
  }
  s.validate();
  return s;
}

void write_dataset(const DatasetSpec& spec, const std::string& out_dir, bool force,
                   const std::vector<VideoClip>& clips, const char* kind, Dataset& out) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  const fs::path manifest_path = fs::path(out_dir) / "manifest.json";
  const fs::path blob_path = fs::path(out_dir) / "clips.bin";
  check(force || !fs::exists(manifest_path), ErrorKind::Io, "refusing to overwrite ",
        manifest_path.string(), " (pass force)");

  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  check(blob.good(), ErrorKind::Io, "cannot open ", blob_path.string(), " for writing");
  blob.write(kBlobMagic, sizeof(kBlobMagic));
  uint64_t offset = sizeof(kBlobMagic);

  out.spec = spec;
  out.dir = out_dir;
  out.clips.clear();
  for (const VideoClip& clip : clips) {
    const std::vector<char> bytes = clip_bytes(clip);
    blob.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.clips.push_back({clip.id, clip.label, offset, bytes.size(),
                         fnv1a64(bytes.data(), bytes.size())});
    offset += bytes.size();
  }
  blob.flush();
  check(blob.good(), ErrorKind::Io, "short write to ", blob_path.string());
  blob.close();

  ordered_json j;
  j["format"] = kManifestFormat;
  j["kind"] = kind;
  j["spec"] = spec_to_json(spec);
  ordered_json clip_list = ordered_json::array();
  for (const ClipEntry& e : out.clips) {
    ordered_json c;
    c["id"] = e.id;
    c["label"] = e.label;
    c["offset"] = e.offset;
    c["length"] = e.length;
    c["checksum"] = hex64(e.checksum);
    clip_list.push_back(std::move(c));
  }
  j["clips"] = std::move(clip_list);
  j["train_ids"] = out.train_ids;
  j["eval_ids"] = out.eval_ids;

  std::ofstream mf(manifest_path, std::ios::trunc);
  check(mf.good(), ErrorKind::Io, "cannot open ", manifest_path.string(), " for writing");
  mf << j.dump(2) << "\n";
  mf.flush();
  check(mf.good(), ErrorKind::Io, "short write to ", manifest_path.string());
}

}  // namespace

void DatasetSpec::validate() const {
  check(clip_count >= 1, ErrorKind::Config, "clip_count must be >= 1, got ", clip_count);
  check(frames >= 1 && height >= 1 && width >= 1 && channels >= 1, ErrorKind::Config,
        "clip extents must be positive, got ", frames, "x", channels, "x", height, "x", width);
  check(tubelet_t >= 1 && tubelet_h >= 1 && tubelet_w >= 1, ErrorKind::Config,
        "tubelet dims must be positive");
  check(frames % tubelet_t == 0, ErrorKind::Config, "frames ", frames,
        " not divisible by tubelet_t ", tubelet_t);
  check(height % tubelet_h == 0, ErrorKind::Config, "height ", height,
        " not divisible by tubelet_h ", tubelet_h);
  check(width % tubelet_w == 0, ErrorKind::Config, "width ", width, " not divisible by tubelet_w ",
        tubelet_w);
  check(train_fraction > 0.0 && train_fraction < 1.0, ErrorKind::Config,
        "train_fraction must lie in (0,1), got ", train_fraction);
  check(noise_sigma >= 0.0, ErrorKind::Config, "noise_sigma must be >= 0");
  check(background >= 0.0 && background < min_intensity && min_intensity <= max_intensity &&
            max_intensity <= 1.0,
        ErrorKind::Config, "need 0 <= background < min_intensity <= max_intensity <= 1");
  check(min_size_frac > 0.0 && min_size_frac <= max_size_frac && max_size_frac < 1.0,
        ErrorKind::Config, "size fractions must satisfy 0 < min <= max < 1");
  check(min_speed > 0.0 && min_speed <= max_speed, ErrorKind::Config,
        "speeds must satisfy 0 < min <= max");
}

std::string DatasetSpec::to_json() const { return spec_to_json(*this).dump(2); }

DatasetSpec DatasetSpec::from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrorKind::Config, "dataset spec is not valid JSON: ", e.what());
  }
  return spec_from_json_obj(j);
}

VideoClip render_clip(const DatasetSpec& spec, int64_t id) {
  spec.validate();
  check(id >= 0, ErrorKind::Contract, "clip id must be >= 0, got ", id);
  Rng root(spec.seed);
  Rng r = root.fork("clip", id);
  const ClipParams p = draw_params(spec, id, r);
  std::vector<double> cxs(spec.frames), cys(spec.frames), intens(spec.frames, p.intensity);
  for (int t = 0; t < spec.frames; ++t) {
    cxs[t] = p.cx0 + p.vx * t;
    cys[t] = p.cy0 + p.vy * t;
  }
  Rng noise = root.fork("noise", id);
  VideoClip clip;
  clip.frames = render_frames(spec, p, cxs, cys, intens, noise);
  clip.label = p.label;
  clip.id = id;
  return clip;
}

ClipPair render_pair(const DatasetSpec& spec, int64_t id, Violation violation) {
  spec.validate();
  check(id >= 0, ErrorKind::Contract, "pair id must be >= 0, got ", id);
  Rng root(spec.seed);
  Rng r = root.fork("pair", id);
  const ClipParams p = draw_params(spec, id, r);
  const int T = spec.frames;
  const int tv = T / 2;  // first deviating frame

  std::vector<double> cxs(T), cys(T), intens(T, p.intensity);
  for (int t = 0; t < T; ++t) {
    cxs[t] = p.cx0 + p.vx * t;
    cys[t] = p.cy0 + p.vy * t;
  }
  std::vector<double> vcx = cxs, vcy = cys, vint = intens;

  const double margin = 1.0;
  const double xlo = p.size / 2 + margin, xhi = spec.width - p.size / 2 - margin;
  const double ylo = p.size / 2 + margin, yhi = spec.height - p.size / 2 - margin;
  switch (violation) {
    case Violation::kTeleport: {
      // Jump to a distant feasible point, then continue with the same
      // velocity, sticking at the walls if the remainder would exit.
      const double min_jump = 0.35 * std::min(spec.width, spec.height);
      double jx = vcx[tv], jy = vcy[tv];
      for (int attempt = 0; attempt < 128; ++attempt) {
        const double cand_x = r.uniform(xlo, xhi);
        const double cand_y = r.uniform(ylo, yhi);
        const double d = std::hypot(cand_x - cxs[tv], cand_y - cys[tv]);
        jx = cand_x;
        jy = cand_y;
        if (d >= min_jump) break;
      }
      for (int t = tv; t < T; ++t) {
        vcx[t] = std::clamp(jx + p.vx * (t - tv), xlo, xhi);
        vcy[t] = std::clamp(jy + p.vy * (t - tv), ylo, yhi);
      }
      break;
    }
    case Violation::kReversal:
      for (int t = tv; t < T; ++t) {
        vcx[t] = cxs[tv - 1] - p.vx * (t - (tv - 1));
        vcy[t] = cys[tv - 1] - p.vy * (t - (tv - 1));
      }
      break;
    case Violation::kSwap: {
      // Brightness flips to the opposite extreme of the intensity band.
      const double mid = 0.5 * (spec.min_intensity + spec.max_intensity);
      const double other = p.intensity >= mid ? spec.min_intensity : spec.max_intensity;
      for (int t = tv; t < T; ++t) vint[t] = other;
      break;
    }
  }

  // Both clips consume the identical noise field, so only the violation
  // distinguishes them.
  ClipPair pair;
  Rng noise_a = root.fork("pairnoise", id);
  pair.plausible.frames = render_frames(spec, p, cxs, cys, intens, noise_a);
  pair.plausible.label = p.label;
  pair.plausible.id = 2 * id;
  Rng noise_b = root.fork("pairnoise", id);
  pair.implausible.frames = render_frames(spec, p, vcx, vcy, vint, noise_b);
  pair.implausible.label = p.label;
  pair.implausible.id = 2 * id + 1;
  return pair;
}

Dataset generate_dataset(const DatasetSpec& spec, const std::string& out_dir, bool force) {
  spec.validate();
  std::vector<VideoClip> clips;
  clips.reserve(static_cast<size_t>(spec.clip_count));
  for (int64_t id = 0; id < spec.clip_count; ++id) clips.push_back(render_clip(spec, id));

  Dataset ds;
  int64_t train_count = round_half_up(spec.train_fraction * static_cast<double>(spec.clip_count));
  train_count = std::clamp<int64_t>(train_count, 1, std::max<int64_t>(1, spec.clip_count - 1));
  for (int64_t id = 0; id < spec.clip_count; ++id)
    (id < train_count ? ds.train_ids : ds.eval_ids).push_back(id);
  write_dataset(spec, out_dir, force, clips, "clips", ds);
  return ds;
}

Dataset generate_pairs(const DatasetSpec& spec, int64_t pair_count, Violation violation,
                       const std::string& out_dir, bool force) {
  spec.validate();
  check(pair_count >= 1, ErrorKind::Config, "pair_count must be >= 1, got ", pair_count);
  std::vector<VideoClip> clips;
  clips.reserve(static_cast<size_t>(2 * pair_count));
  for (int64_t id = 0; id < pair_count; ++id) {
    ClipPair pair = render_pair(spec, id, violation);
    clips.push_back(std::move(pair.plausible));
    clips.push_back(std::move(pair.implausible));
  }
  Dataset ds;
  DatasetSpec stored = spec;
  stored.clip_count = 2 * pair_count;
  write_dataset(stored, out_dir, force, clips, "pairs", ds);
  ds.pairs = true;
  return ds;
}

Dataset open_dataset(const std::string& dir) {
  const fs::path manifest_path = fs::path(dir) / "manifest.json";
  std::ifstream mf(manifest_path);
  check(mf.good(), ErrorKind::Io, "cannot read ", manifest_path.string());
  ordered_json j;
  try {
    j = ordered_json::parse(mf);
  } catch (const std::exception& e) {
    fail(ErrorKind::Corruption, manifest_path.string(), " is not valid JSON: ", e.what());
  }
  check(j.value("format", "") == kManifestFormat, ErrorKind::Corruption, manifest_path.string(),
        ": unknown manifest format");

  Dataset ds;
  ds.dir = dir;
  ds.pairs = j.value("kind", "clips") == "pairs";
  ds.spec = spec_from_json_obj(j.at("spec"));
  for (const auto& c : j.at("clips")) {
    ClipEntry e;
    e.id = c.at("id").get<int64_t>();
    e.label = c.at("label").get<int>();
    e.offset = c.at("offset").get<uint64_t>();
    e.length = c.at("length").get<uint64_t>();
    e.checksum = parse_hex64(c.at("checksum").get<std::string>());
    ds.clips.push_back(e);
  }
  if (j.contains("train_ids")) ds.train_ids = j.at("train_ids").get<std::vector<int64_t>>();
  if (j.contains("eval_ids")) ds.eval_ids = j.at("eval_ids").get<std::vector<int64_t>>();

  const fs::path blob_path = fs::path(dir) / "clips.bin";
  std::ifstream blob(blob_path, std::ios::binary);
  check(blob.good(), ErrorKind::Io, "cannot read ", blob_path.string());
  char magic[sizeof(kBlobMagic)];
  blob.read(magic, sizeof(magic));
  check(blob.gcount() == sizeof(magic) && std::memcmp(magic, kBlobMagic, sizeof(magic)) == 0,
        ErrorKind::Corruption, blob_path.string(), ": bad magic header");
  return ds;
}

VideoClip load_clip(const Dataset& dataset, int64_t index) {
  check(index >= 0 && index < static_cast<int64_t>(dataset.clips.size()), ErrorKind::Dimension,
        "clip index ", index, " out of range [0, ", dataset.clips.size(), ")");
  const ClipEntry& e = dataset.clips[static_cast<size_t>(index)];
  const DatasetSpec& s = dataset.spec;
  const uint64_t want =
      static_cast<uint64_t>(s.frames) * s.channels * s.height * s.width * sizeof(float);
  check(e.length == want, ErrorKind::Corruption, "clip ", index, " length ", e.length,
        " does not match spec extents (", want, ")");

  const fs::path blob_path = fs::path(dataset.dir) / "clips.bin";
  std::ifstream blob(blob_path, std::ios::binary);
  check(blob.good(), ErrorKind::Io, "cannot read ", blob_path.string());
  blob.seekg(static_cast<std::streamoff>(e.offset));
  std::vector<char> bytes(e.length);
  blob.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  check(blob.gcount() == static_cast<std::streamsize>(bytes.size()), ErrorKind::Corruption,
        blob_path.string(), ": truncated payload for clip ", index);
  check(fnv1a64(bytes.data(), bytes.size()) == e.checksum, ErrorKind::Corruption,
        "checksum mismatch for clip ", index, " in ", blob_path.string());

  VideoClip clip;
  clip.frames = Tensor::zeros({s.frames, s.channels, s.height, s.width});
  std::memcpy(clip.frames.data(), bytes.data(), bytes.size());
  clip.label = e.label;
  clip.id = e.id;
  return clip;
}

TokenGrid patchify(const VideoClip& clip, int tubelet_t, int tubelet_h, int tubelet_w) {
  check(clip.frames.ndim() == 4, ErrorKind::Dimension, "clip frames must be [T, C, H, W], got ",
        shape_str(clip.frames.shape()));
  const int64_t T = clip.frames.dim(0), C = clip.frames.dim(1), H = clip.frames.dim(2),
                W = clip.frames.dim(3);
  check(tubelet_t >= 1 && tubelet_h >= 1 && tubelet_w >= 1, ErrorKind::Dimension,
        "tubelet dims must be positive");
  check(T % tubelet_t == 0 && H % tubelet_h == 0 && W % tubelet_w == 0, ErrorKind::Dimension,
        "clip ", shape_str(clip.frames.shape()), " not divisible by tubelet ", tubelet_t, "x",
        tubelet_h, "x", tubelet_w);

  TokenGrid grid;
  grid.grid_t = static_cast<int>(T / tubelet_t);
  grid.grid_h = static_cast<int>(H / tubelet_h);
  grid.grid_w = static_cast<int>(W / tubelet_w);
  grid.tubelet_t = tubelet_t;
  grid.tubelet_h = tubelet_h;
  grid.tubelet_w = tubelet_w;
  grid.channels = static_cast<int>(C);
  const int64_t n = grid.token_count();
  const int64_t p = static_cast<int64_t>(tubelet_t) * C * tubelet_h * tubelet_w;
  grid.tokens = Tensor::zeros({n, p});
  grid.positions.reserve(static_cast<size_t>(n));

  const float* src = clip.frames.data();
  float* dst = grid.tokens.data();
  for (int tt = 0; tt < grid.grid_t; ++tt) {
    for (int hh = 0; hh < grid.grid_h; ++hh) {
      for (int ww = 0; ww < grid.grid_w; ++ww) {
        grid.positions.push_back({tt, hh, ww});
        // Voxels in clip scan order (t, c, y, x) within the tubelet.
        for (int dt = 0; dt < tubelet_t; ++dt) {
          const int64_t t = static_cast<int64_t>(tt) * tubelet_t + dt;
          for (int64_t c = 0; c < C; ++c) {
            for (int dy = 0; dy < tubelet_h; ++dy) {
              const int64_t y = static_cast<int64_t>(hh) * tubelet_h + dy;
              const float* row = src + ((t * C + c) * H + y) * W +
                                 static_cast<int64_t>(ww) * tubelet_w;
              for (int dx = 0; dx < tubelet_w; ++dx) *dst++ = row[dx];
            }
          }
        }
      }
    }
  }
  return grid;
}

TokenGrid patchify(const VideoClip& clip, const DatasetSpec& spec) {
  return patchify(clip, spec.tubelet_t, spec.tubelet_h, spec.tubelet_w);
}

VideoClip unpatchify(const TokenGrid& grid, int label, int64_t id) {
  const int64_t T = static_cast<int64_t>(grid.grid_t) * grid.tubelet_t;
  const int64_t C = grid.channels;
  const int64_t H = static_cast<int64_t>(grid.grid_h) * grid.tubelet_h;
  const int64_t W = static_cast<int64_t>(grid.grid_w) * grid.tubelet_w;
  const int64_t p = static_cast<int64_t>(grid.tubelet_t) * C * grid.tubelet_h * grid.tubelet_w;
  check(grid.tokens.ndim() == 2 && grid.tokens.dim(0) == grid.token_count() &&
            grid.tokens.dim(1) == p,
        ErrorKind::Dimension, "token grid shape ", shape_str(grid.tokens.shape()),
        " inconsistent with grid dims");

  VideoClip clip;
  clip.frames = Tensor::zeros({T, C, H, W});
  clip.label = label;
  clip.id = id;
  float* dst = clip.frames.data();
  const float* src = grid.tokens.data();
  for (int tt = 0; tt < grid.grid_t; ++tt) {
    for (int hh = 0; hh < grid.grid_h; ++hh) {
      for (int ww = 0; ww < grid.grid_w; ++ww) {
        for (int dt = 0; dt < grid.tubelet_t; ++dt) {
          const int64_t t = static_cast<int64_t>(tt) * grid.tubelet_t + dt;
          for (int64_t c = 0; c < C; ++c) {
            for (int dy = 0; dy < grid.tubelet_h; ++dy) {
              const int64_t y = static_cast<int64_t>(hh) * grid.tubelet_h + dy;
              float* row = dst + ((t * C + c) * H + y) * W +
                           static_cast<int64_t>(ww) * grid.tubelet_w;
              for (int dx = 0; dx < grid.tubelet_w; ++dx) row[dx] = *src++;
            }
          }
        }
      }
    }
  }
  return clip;
}

Tensor standardize_tubelets(const Tensor& tokens, double eps) {
  check(tokens.ndim() == 2, ErrorKind::Dimension, "standardize_tubelets wants [N, p], got ",
        shape_str(tokens.shape()));
  const int64_t n = tokens.dim(0), p = tokens.dim(1);
  check(p >= 1, ErrorKind::Dimension, "empty tubelet payload");
  Tensor out = Tensor::zeros(tokens.shape());
  const float* src = tokens.data();
  float* dst = out.data();
  for (int64_t i = 0; i < n; ++i) {
    const float* row = src + i * p;
    double mean = 0;
    for (int64_t k = 0; k < p; ++k) mean += row[k];
    mean /= static_cast<double>(p);
    double var = 0;
    for (int64_t k = 0; k < p; ++k) var += (row[k] - mean) * (row[k] - mean);
    var /= static_cast<double>(p);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t k = 0; k < p; ++k)
      dst[i * p + k] = static_cast<float>((row[k] - mean) * inv);
  }
  return out;
}

VideoClip image_to_clip(const Tensor& image) {
  check(image.ndim() == 3, ErrorKind::Dimension, "image must be [C, H, W], got ",
        shape_str(image.shape()));
  const int64_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const int64_t T = 16;
  VideoClip clip;
  clip.frames = Tensor::zeros({T, C, H, W});
  const int64_t frame = C * H * W;
  for (int64_t t = 0; t < T; ++t)
    std::memcpy(clip.frames.data() + t * frame, image.data(), sizeof(float) * frame);
  return clip;
}

}  // namespace salt
