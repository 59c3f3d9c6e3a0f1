#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "salt/common.hpp"
#include "salt/rng.hpp"
#include "salt/video.hpp"

using namespace salt;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("salt_video_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

DatasetSpec small_spec() {
  DatasetSpec spec;
  spec.clip_count = 100;
  spec.frames = 16;
  spec.height = 32;
  spec.width = 32;
  spec.channels = 1;
  spec.seed = 7;
  return spec;
}

// Independent motion oracle: intensity-weighted centroid of pixels clearly
// above the noisy background, per frame.
struct Centroid {
  double x = 0, y = 0;
  bool ok = false;
};

Centroid frame_centroid(const VideoClip& clip, const DatasetSpec& spec, int t) {
  const int H = spec.height, W = spec.width;
  const float* frame = clip.frames.data() + static_cast<int64_t>(t) * spec.channels * H * W;

  // 3x3 box blur knocks the noise down ~3x before thresholding halfway
  // between background and the dimmest allowed shape.
  std::vector<double> blurred(static_cast<size_t>(H) * W);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double acc = 0;
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          acc += frame[yy * W + xx];
          ++n;
        }
      blurred[static_cast<size_t>(y) * W + x] = acc / n;
    }
  }

  const double threshold = 0.5 * (spec.background + spec.min_intensity);
  Centroid c;
  double mass = 0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const double w = blurred[static_cast<size_t>(y) * W + x] - threshold;
      if (w <= 0) continue;
      mass += w;
      c.x += w * (x + 0.5);
      c.y += w * (y + 0.5);
    }
  }
  if (mass > 1e-9) {
    c.x /= mass;
    c.y /= mass;
    c.ok = true;
  }
  return c;
}

// Reconstructs the motion label (0 right, 1 left, 2 down, 3 up) from frame
// centroids alone.
int motion_label_from_frames(const VideoClip& clip, const DatasetSpec& spec) {
  Centroid first = frame_centroid(clip, spec, 0);
  Centroid last = frame_centroid(clip, spec, spec.frames - 1);
  REQUIRE(first.ok);
  REQUIRE(last.ok);
  const double dx = last.x - first.x;
  const double dy = last.y - first.y;
  if (std::abs(dx) >= std::abs(dy)) return dx >= 0 ? 0 : 1;
  return dy >= 0 ? 2 : 3;
}

}  // namespace

TEST_CASE("generation is byte-identical across runs") {
  DatasetSpec spec = small_spec();
  fs::path a = fresh_dir("det_a");
  fs::path b = fresh_dir("det_b");
  generate_dataset(spec, a.string());
  generate_dataset(spec, b.string());
  CHECK(read_file(a / "manifest.json") == read_file(b / "manifest.json"));
  CHECK(read_file(a / "clips.bin") == read_file(b / "clips.bin"));
}

TEST_CASE("classes are balanced within one clip") {
  DatasetSpec spec = small_spec();
  spec.clip_count = 102;  // not divisible by 4
  fs::path dir = fresh_dir("balance");
  Dataset ds = generate_dataset(spec, dir.string());
  int counts[kNumClasses] = {0, 0, 0, 0};
  for (const ClipEntry& e : ds.clips) ++counts[e.label];
  const double expected = 102.0 / kNumClasses;
  for (int c = 0; c < kNumClasses; ++c) CHECK(std::abs(counts[c] - expected) <= 1.0);
}

TEST_CASE("right-moving clips drift right, centroid strictly increasing") {
  DatasetSpec spec = small_spec();
  // label 0 = rightward motion; ids 0, 4, 8 carry it under round-robin labels
  for (int64_t id : {0, 4, 8, 12}) {
    VideoClip clip = render_clip(spec, id);
    REQUIRE(clip.label == 0);
    double prev = -1e9;
    for (int t = 0; t < spec.frames; ++t) {
      Centroid c = frame_centroid(clip, spec, t);
      REQUIRE(c.ok);
      CHECK(c.x > prev);
      prev = c.x;
    }
  }
}

TEST_CASE("manifest labels match the centroid-reconstructed motion") {
  DatasetSpec spec = small_spec();
  spec.clip_count = 40;
  fs::path dir = fresh_dir("labels");
  Dataset ds = generate_dataset(spec, dir.string());
  for (int64_t i = 0; i < spec.clip_count; ++i) {
    VideoClip clip = load_clip(ds, i);
    CHECK(motion_label_from_frames(clip, spec) == clip.label);
    CHECK(clip.label == ds.clips[static_cast<size_t>(i)].label);
  }
}

TEST_CASE("load round-trips in-memory generation bitwise") {
  DatasetSpec spec = small_spec();
  spec.clip_count = 12;
  fs::path dir = fresh_dir("roundtrip");
  Dataset ds = generate_dataset(spec, dir.string());
  for (int64_t i = 0; i < spec.clip_count; ++i) {
    VideoClip mem = render_clip(spec, i);
    VideoClip disk = load_clip(ds, i);
    REQUIRE(mem.frames.numel() == disk.frames.numel());
    CHECK(std::memcmp(mem.frames.data(), disk.frames.data(),
                      sizeof(float) * static_cast<size_t>(mem.frames.numel())) == 0);
    CHECK(mem.label == disk.label);
  }
}

TEST_CASE("out-of-range clip index is rejected") {
  DatasetSpec spec = small_spec();
  spec.clip_count = 4;
  fs::path dir = fresh_dir("range");
  Dataset ds = generate_dataset(spec, dir.string());
  CHECK_THROWS_AS(load_clip(ds, 4), Error);
  CHECK_THROWS_AS(load_clip(ds, -1), Error);
}

TEST_CASE("overwrite requires force") {
  DatasetSpec spec = small_spec();
  spec.clip_count = 2;
  fs::path dir = fresh_dir("force");
  generate_dataset(spec, dir.string());
  CHECK_THROWS_AS(generate_dataset(spec, dir.string()), Error);
  CHECK_NOTHROW(generate_dataset(spec, dir.string(), true));
}

TEST_CASE("corrupted payload and manifest are detected") {
  DatasetSpec spec = small_spec();
  spec.clip_count = 3;
  fs::path dir = fresh_dir("corrupt");
  Dataset ds = generate_dataset(spec, dir.string());

  // Flip one payload byte of clip 1.
  {
    std::fstream blob(dir / "clips.bin", std::ios::in | std::ios::out | std::ios::binary);
    blob.seekp(static_cast<std::streamoff>(ds.clips[1].offset + 100));
    char byte;
    blob.seekg(static_cast<std::streamoff>(ds.clips[1].offset + 100));
    blob.read(&byte, 1);
    byte = static_cast<char>(byte ^ 0x40);
    blob.seekp(static_cast<std::streamoff>(ds.clips[1].offset + 100));
    blob.write(&byte, 1);
  }
  CHECK_NOTHROW(load_clip(ds, 0));
  try {
    load_clip(ds, 1);
    FAIL("corruption not detected");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Corruption);
  }

  // Garbage manifest fails to open as corruption, missing dir as I/O.
  {
    std::ofstream mf(dir / "manifest.json", std::ios::trunc);
    mf << "{not json";
  }
  try {
    open_dataset(dir.string());
    FAIL("manifest corruption not detected");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Corruption);
  }
  try {
    open_dataset((dir / "nope").string());
    FAIL("missing dataset not detected");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Io);
  }
}

TEST_CASE("open_dataset reproduces the generated handle") {
  DatasetSpec spec = small_spec();
  spec.clip_count = 8;
  fs::path dir = fresh_dir("reopen");
  Dataset ds = generate_dataset(spec, dir.string());
  Dataset re = open_dataset(dir.string());
  REQUIRE(re.clips.size() == ds.clips.size());
  for (size_t i = 0; i < ds.clips.size(); ++i) {
    CHECK(re.clips[i].id == ds.clips[i].id);
    CHECK(re.clips[i].label == ds.clips[i].label);
    CHECK(re.clips[i].offset == ds.clips[i].offset);
    CHECK(re.clips[i].checksum == ds.clips[i].checksum);
  }
  CHECK(re.train_ids == ds.train_ids);
  CHECK(re.eval_ids == ds.eval_ids);
  CHECK(re.spec.seed == spec.seed);
  CHECK_FALSE(re.pairs);
}

TEST_CASE("splits are disjoint and exhaustive") {
  DatasetSpec spec = small_spec();
  spec.clip_count = 37;
  spec.train_fraction = 0.8;
  fs::path dir = fresh_dir("splits");
  Dataset ds = generate_dataset(spec, dir.string());
  std::set<int64_t> seen;
  for (int64_t id : ds.train_ids) CHECK(seen.insert(id).second);
  for (int64_t id : ds.eval_ids) CHECK(seen.insert(id).second);
  CHECK(seen.size() == 37);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 36);
  CHECK(ds.train_ids.size() == 30);  // round(0.8 * 37) = round(29.6)
}

TEST_CASE("token counts match the grid arithmetic") {
  VideoClip big;
  big.frames = Tensor::zeros({16, 1, 224, 224});
  TokenGrid grid = patchify(big, 2, 16, 16);
  CHECK(grid.token_count() == 1568);  // 8 * 14 * 14
  CHECK(grid.tokens.dim(0) == 1568);
  CHECK(grid.tokens.dim(1) == 2 * 16 * 16);

  VideoClip desk;
  desk.frames = Tensor::zeros({16, 1, 32, 32});
  TokenGrid g2 = patchify(desk, 2, 4, 4);
  CHECK(g2.token_count() == 512);  // 8 * 8 * 8
}

TEST_CASE("patchify lays out voxels in scan order with bijective positions") {
  // frames[t,c,y,x] = linear index makes the expected payload computable
  // independently of the implementation.
  const int T = 4, C = 2, H = 6, W = 8;
  VideoClip clip;
  clip.frames = Tensor::zeros({T, C, H, W});
  float* f = clip.frames.data();
  for (int64_t i = 0; i < clip.frames.numel(); ++i) f[i] = static_cast<float>(i);

  TokenGrid grid = patchify(clip, 2, 3, 4);
  REQUIRE(grid.grid_t == 2);
  REQUIRE(grid.grid_h == 2);
  REQUIRE(grid.grid_w == 2);
  REQUIRE(grid.tokens.dim(1) == 2 * C * 3 * 4);

  std::set<std::tuple<int, int, int>> unique_positions;
  for (int64_t n = 0; n < grid.token_count(); ++n) {
    const Pos3 pos = grid.positions[static_cast<size_t>(n)];
    CHECK(n == (static_cast<int64_t>(pos.t) * grid.grid_h + pos.y) * grid.grid_w + pos.x);
    unique_positions.insert({pos.t, pos.y, pos.x});
    const float* row = grid.tokens.data() + n * grid.tokens.dim(1);
    int64_t k = 0;
    for (int dt = 0; dt < 2; ++dt)
      for (int c = 0; c < C; ++c)
        for (int dy = 0; dy < 3; ++dy)
          for (int dx = 0; dx < 4; ++dx) {
            const int64_t t = pos.t * 2 + dt, y = pos.y * 3 + dy, x = pos.x * 4 + dx;
            const float expected = static_cast<float>(((t * C + c) * H + y) * W + x);
            CHECK(row[k++] == expected);
          }
  }
  CHECK(unique_positions.size() == static_cast<size_t>(grid.token_count()));
}

TEST_CASE("unpatchify inverts patchify bitwise on random clips") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int T = 4, C = trial % 2 ? 1 : 2, H = 8, W = 12;
    VideoClip clip;
    clip.frames = Tensor::zeros({T, C, H, W});
    float* f = clip.frames.data();
    for (int64_t i = 0; i < clip.frames.numel(); ++i)
      f[i] = static_cast<float>(rng.uniform());
    clip.label = trial % 4;
    clip.id = trial;

    TokenGrid grid = patchify(clip, 2, 4, 4);
    VideoClip back = unpatchify(grid, clip.label, clip.id);
    REQUIRE(back.frames.shape() == clip.frames.shape());
    CHECK(std::memcmp(back.frames.data(), clip.frames.data(),
                      sizeof(float) * static_cast<size_t>(clip.frames.numel())) == 0);
  }
}

TEST_CASE("patchify rejects indivisible extents") {
  VideoClip clip;
  clip.frames = Tensor::zeros({16, 1, 30, 32});
  CHECK_THROWS_AS(patchify(clip, 2, 4, 4), Error);
  clip.frames = Tensor::zeros({15, 1, 32, 32});
  CHECK_THROWS_AS(patchify(clip, 2, 4, 4), Error);
}

TEST_CASE("image_to_clip replicates 16 identical frames") {
  Rng rng(3);
  Tensor image = Tensor::zeros({1, 12, 12});
  float* p = image.data();
  for (int64_t i = 0; i < image.numel(); ++i) p[i] = static_cast<float>(rng.uniform());

  VideoClip clip = image_to_clip(image);
  CHECK(clip.frames.dim(0) == 16);
  const int64_t frame = image.numel();
  for (int t = 1; t < 16; ++t)
    CHECK(std::memcmp(clip.frames.data(), clip.frames.data() + t * frame,
                      sizeof(float) * static_cast<size_t>(frame)) == 0);

  // Temporally constant tokens: same (h', w') row at every t'.
  TokenGrid grid = patchify(clip, 2, 4, 4);
  const int64_t per_slot = static_cast<int64_t>(grid.grid_h) * grid.grid_w;
  const int64_t width = grid.tokens.dim(1);
  for (int64_t s = 0; s < per_slot; ++s)
    for (int t = 1; t < grid.grid_t; ++t)
      CHECK(std::memcmp(grid.tokens.data() + s * width,
                        grid.tokens.data() + (t * per_slot + s) * width,
                        sizeof(float) * static_cast<size_t>(width)) == 0);
}

TEST_CASE("standardize_tubelets yields zero mean, unit variance rows") {
  Rng rng(5);
  Tensor tokens = Tensor::zeros({6, 32});
  float* p = tokens.data();
  for (int64_t i = 0; i < tokens.numel(); ++i)
    p[i] = static_cast<float>(rng.uniform(0.0, 1.0) * 3.0 - 1.0);
  // one constant row: standardization must return zeros, not NaN
  for (int64_t k = 0; k < 32; ++k) p[5 * 32 + k] = 0.25f;

  Tensor out = standardize_tubelets(tokens);
  for (int64_t i = 0; i < 6; ++i) {
    double mean = 0, var = 0;
    const float* row = out.data() + i * 32;
    for (int64_t k = 0; k < 32; ++k) mean += row[k];
    mean /= 32;
    for (int64_t k = 0; k < 32; ++k) var += (row[k] - mean) * (row[k] - mean);
    var /= 32;
    CHECK(std::abs(mean) < 1e-5);
    if (i < 5) CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    else CHECK(var == doctest::Approx(0.0).epsilon(1e-6));
  }
}

TEST_CASE("spec JSON round-trips and rejects bad input") {
  DatasetSpec spec = small_spec();
  spec.label_kind = LabelKind::kShape;
  spec.train_fraction = 0.75;
  DatasetSpec back = DatasetSpec::from_json(spec.to_json());
  CHECK(back.clip_count == spec.clip_count);
  CHECK(back.label_kind == LabelKind::kShape);
  CHECK(back.train_fraction == spec.train_fraction);
  CHECK(back.seed == spec.seed);

  CHECK_THROWS_AS(DatasetSpec::from_json("{\"bogus_key\": 1}"), Error);
  CHECK_THROWS_AS(DatasetSpec::from_json("{\"label_kind\": \"speed\"}"), Error);
  CHECK_THROWS_AS(DatasetSpec::from_json("not json"), Error);

  DatasetSpec bad = small_spec();
  bad.height = 30;  // not divisible by tubelet_h = 4
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("violation pairs share every frame before the deviation point") {
  DatasetSpec spec = small_spec();
  const int64_t frame = static_cast<int64_t>(spec.channels) * spec.height * spec.width;
  const int tv = spec.frames / 2;
  for (Violation v : {Violation::kTeleport, Violation::kReversal, Violation::kSwap}) {
    ClipPair pair = render_pair(spec, 17, v);
    CHECK(std::memcmp(pair.plausible.frames.data(), pair.implausible.frames.data(),
                      sizeof(float) * static_cast<size_t>(tv * frame)) == 0);
    bool diverged = false;
    for (int64_t i = tv * frame; i < pair.plausible.frames.numel(); ++i)
      if (pair.plausible.frames.data()[i] != pair.implausible.frames.data()[i]) {
        diverged = true;
        break;
      }
    CHECK(diverged);
    CHECK(pair.plausible.label == pair.implausible.label);
  }
}

TEST_CASE("teleport pairs jump while plausible clips stay smooth") {
  DatasetSpec spec = small_spec();
  for (int64_t id = 0; id < 8; ++id) {
    ClipPair pair = render_pair(spec, id, Violation::kTeleport);
    const int tv = spec.frames / 2;
    Centroid before = frame_centroid(pair.implausible, spec, tv - 1);
    Centroid after = frame_centroid(pair.implausible, spec, tv);
    REQUIRE(before.ok);
    REQUIRE(after.ok);
    const double jump = std::hypot(after.x - before.x, after.y - before.y);

    Centroid pb = frame_centroid(pair.plausible, spec, tv - 1);
    Centroid pa = frame_centroid(pair.plausible, spec, tv);
    const double smooth = std::hypot(pa.x - pb.x, pa.y - pb.y);
    CHECK(jump > 4.0 * smooth);
    CHECK(jump > 3.0);
  }
}

TEST_CASE("pairs dataset persists and reloads") {
  DatasetSpec spec = small_spec();
  fs::path dir = fresh_dir("pairs");
  Dataset ds = generate_pairs(spec, 6, Violation::kTeleport, dir.string());
  CHECK(ds.pairs);
  CHECK(ds.clips.size() == 12);
  Dataset re = open_dataset(dir.string());
  CHECK(re.pairs);
  for (int64_t i = 0; i < 12; ++i) CHECK_NOTHROW(load_clip(re, i));

  ClipPair mem = render_pair(spec, 2, Violation::kTeleport);
  VideoClip disk = load_clip(re, 4);  // plausible clip of pair 2
  CHECK(std::memcmp(mem.plausible.frames.data(), disk.frames.data(),
                    sizeof(float) * static_cast<size_t>(disk.frames.numel())) == 0);
}
