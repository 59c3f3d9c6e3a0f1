#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "salt/checkpoint.hpp"
#include "salt/common.hpp"
#include "salt/evaluation.hpp"
#include "salt/models.hpp"
#include "salt/rng.hpp"
#include "salt/tensor.hpp"
#include "salt/video.hpp"
#include "testutil.hpp"

using namespace salt;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Usage;
}

ModelConfig micro_config() {
  ModelConfig c;
  c.name = "micro";
  c.width = 12;
  c.depth = 1;
  c.heads = 2;
  c.grid_t = 4;
  c.grid_h = 4;
  c.grid_w = 4;
  c.predictor_width = 12;
  c.predictor_depth = 1;
  c.predictor_heads = 2;
  c.predictor_out_dim = 12;
  c.decoder_width = 12;
  c.decoder_depth = 1;
  c.decoder_heads = 2;
  return c;
}

DatasetSpec micro_spec() {
  DatasetSpec s;
  s.clip_count = 16;
  s.frames = 8;
  s.height = 16;
  s.width = 16;
  s.seed = 11;
  return s;
}

// Balanced synthetic latents: every token row of a class-c clip is the same
// scaled one-hot vector (fully separable), or pure noise (chance only).
LatentSet synthetic_latents(int width, int classes, int64_t train_per_class,
                            int64_t eval_per_class, bool separable, uint64_t seed) {
  LatentSet set;
  set.width = width;
  Rng rng(seed);
  const int64_t per_class = train_per_class + eval_per_class;
  for (int c = 0; c < classes; ++c) {
    for (int64_t i = 0; i < per_class; ++i) {
      Tensor rows = Tensor::zeros({4, width});
      for (int64_t r = 0; r < 4; ++r)
        for (int64_t d = 0; d < width; ++d)
          rows.data()[r * width + d] =
              separable ? (d == c ? 3.0f : 0.0f) : static_cast<float>(rng.normal());
      const int64_t index = static_cast<int64_t>(set.latents.size());
      set.latents.push_back(rows);
      set.labels.push_back(c);
      (i < train_per_class ? set.train_index : set.eval_index).push_back(index);
    }
  }
  return set;
}

}  // namespace

// ---- surprise windows and aggregation ----------------------------------------

TEST_CASE("surprise window starts enumerate the strided index set exactly") {
  SurpriseConfig cfg;  // C=4, M=4, s=2
  CHECK(surprise_window_starts(16, cfg) == std::vector<int>{1, 3, 5, 7});
  CHECK(surprise_window_starts(12, cfg) == std::vector<int>{1, 3});
  CHECK(surprise_window_starts(9, cfg) == std::vector<int>{1});

  SurpriseConfig s3 = cfg;
  s3.stride = 3;
  CHECK(surprise_window_starts(16, s3) == std::vector<int>{1, 4, 7});

  SurpriseConfig wide = cfg;
  wide.context = 8;
  wide.future = 8;
  CHECK(kind_of([&] { surprise_window_starts(15, wide); }) == ErrorKind::Contract);
  // C+M == T admits no window start under the paper's upper bound T-(C+M)
  CHECK(kind_of([&] { surprise_window_starts(16, wide); }) == ErrorKind::Contract);

  SurpriseConfig bad = cfg;
  bad.stride = 0;
  CHECK(kind_of([&] { surprise_window_starts(16, bad); }) == ErrorKind::Config);
  bad = cfg;
  bad.aggregation = "median";
  CHECK(kind_of([&] { bad.validate(); }) == ErrorKind::Config);
}

TEST_CASE("global surprise aggregates by window count or maximum") {
  CHECK(global_surprise({1.0, 2.0, 3.0}, "average") == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(global_surprise({1.0, 2.0, 3.0}, "maximum") == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(global_surprise({0.7, 0.7, 0.7}, "maximum") == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(global_surprise({0.42}, "average") == doctest::Approx(0.42).epsilon(1e-12));
  CHECK(kind_of([] { global_surprise({}, "average"); }) == ErrorKind::Contract);
  CHECK(kind_of([] { global_surprise({1.0}, "median"); }) == ErrorKind::Config);
}

// ---- effective rank -----------------------------------------------------------

TEST_CASE("effective rank matches hand-computed spectra") {
  SUBCASE("sigma (2,1,1) gives exp-entropy near 2.828") {
    const Tensor a = Tensor::from_values({3, 3}, {2, 0, 0, 0, 1, 0, 0, 0, 1});
    // independent recomputation of the epsilon-adjusted entropy
    const double sigma[3] = {2, 1, 1};
    double p[3], psum = 0;
    for (int k = 0; k < 3; ++k) {
      p[k] = sigma[k] / 4.0 + 1e-7;
      psum += p[k];
    }
    double entropy = 0;
    for (int k = 0; k < 3; ++k) entropy -= (p[k] / psum) * std::log(p[k] / psum);
    CHECK(rankme(a) == doctest::Approx(std::exp(entropy)).epsilon(1e-9));
    CHECK(rankme(a) == doctest::Approx(2.8284).epsilon(1e-3));
  }

  SUBCASE("k equal singular values give rank k") {
    const Tensor eye = Tensor::from_values({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0,  //
                                                    0, 0, 1, 0, 0, 0, 0, 1});
    CHECK(rankme(eye) == doctest::Approx(4.0).epsilon(1e-3));
  }

  SUBCASE("a rank-1 matrix has effective rank 1") {
    Tensor outer = Tensor::zeros({5, 3});
    const float u[5] = {1, 2, -1, 0.5f, 3};
    const float w[3] = {0.2f, -1, 0.7f};
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 3; ++j) outer.data()[i * 3 + j] = u[i] * w[j];
    CHECK(rankme(outer) == doctest::Approx(1.0).epsilon(1e-3));
  }

  SUBCASE("all-zero input is degenerate") {
    CHECK(kind_of([] { rankme(Tensor::zeros({4, 4})); }) == ErrorKind::Degenerate);
    CHECK(kind_of([] { rankme(Tensor::zeros({4})); }) == ErrorKind::Dimension);
  }
}

TEST_CASE("effective rank is bounded and orthogonally invariant") {
  Rng rng(31);
  const Tensor a = testutil::random_tensor<float>({20, 6}, rng);
  const double base = rankme(a);
  CHECK(base >= 1.0);
  CHECK(base <= 6.0 + 1e-9);

  // random orthogonal 6x6 via Gram-Schmidt in double precision
  double q[6][6];
  for (auto& row : q)
    for (double& x : row) x = rng.normal();
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < i; ++j) {
      double dot = 0;
      for (int k = 0; k < 6; ++k) dot += q[i][k] * q[j][k];
      for (int k = 0; k < 6; ++k) q[i][k] -= dot * q[j][k];
    }
    double norm = 0;
    for (int k = 0; k < 6; ++k) norm += q[i][k] * q[i][k];
    norm = std::sqrt(norm);
    for (int k = 0; k < 6; ++k) q[i][k] /= norm;
  }
  Tensor rotated = Tensor::zeros({20, 6});
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 6; ++j) {
      double acc = 0;
      for (int k = 0; k < 6; ++k) acc += a.values()[i * 6 + k] * q[k][j];
      rotated.data()[i * 6 + j] = static_cast<float>(acc);
    }
  CHECK(rankme(rotated) == doctest::Approx(base).epsilon(1e-4));

  // a tall-thin and its transpose share the spectrum
  Tensor transposed = Tensor::zeros({6, 20});
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 6; ++j) transposed.data()[j * 20 + i] = a.values()[i * 6 + j];
  CHECK(rankme(transposed) == doctest::Approx(base).epsilon(1e-4));
}

// ---- ordinary least squares -----------------------------------------------------

TEST_CASE("least squares fit recovers exact lines and guards degeneracy") {
  SUBCASE("collinear points give r2 = 1") {
    const std::vector<double> xs{0, 1, 2, 3, 4};
    std::vector<double> ys;
    for (double x : xs) ys.push_back(2.0 * x + 1.0);
    const LinearFit fit = r2_fit(xs, ys);
    CHECK(fit.slope == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(fit.intercept == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(fit.r2 == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("constant ys give a flat line with r2 = 0 by convention") {
    const LinearFit fit = r2_fit({1, 2, 3, 4}, {5, 5, 5, 5});
    CHECK(fit.slope == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(fit.intercept == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(fit.r2 == 0.0);
  }

  SUBCASE("matches the correlation-coefficient closed form on random data") {
    Rng rng(77);
    std::vector<double> xs, ys;
    for (int i = 0; i < 40; ++i) {
      xs.push_back(rng.normal() * 2.0 + 1.0);
      ys.push_back(-0.7 * xs.back() + 0.5 * rng.normal());
    }
    const LinearFit fit = r2_fit(xs, ys);
    CHECK(fit.slope < 0);
    double xbar = 0, ybar = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
      xbar += xs[i];
      ybar += ys[i];
    }
    xbar /= static_cast<double>(xs.size());
    ybar /= static_cast<double>(xs.size());
    double sxx = 0, syy = 0, sxy = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
      sxx += (xs[i] - xbar) * (xs[i] - xbar);
      syy += (ys[i] - ybar) * (ys[i] - ybar);
      sxy += (xs[i] - xbar) * (ys[i] - ybar);
    }
    CHECK(fit.r2 == doctest::Approx(sxy * sxy / (sxx * syy)).epsilon(1e-10));
  }

  SUBCASE("preconditions") {
    CHECK(kind_of([] { r2_fit({1, 2}, {1, 2}); }) == ErrorKind::Contract);
    CHECK(kind_of([] { r2_fit({3, 3, 3}, {1, 2, 3}); }) == ErrorKind::Degenerate);
    CHECK(kind_of([] { r2_fit({1, 2, 3}, {1, 2}); }) == ErrorKind::Dimension);
  }
}

// ---- probing -------------------------------------------------------------------

TEST_CASE("probe separates one-hot latents perfectly and noise at chance") {
  const ModelConfig cfg = micro_config();
  ProbeConfig pcfg;
  pcfg.seed = 5;
  pcfg.batch_size = 8;

  SUBCASE("separable oracle reaches 100%") {
    const LatentSet set = synthetic_latents(cfg.width, cfg.probe_classes, 10, 5, true, 3);
    const ProbeResult result = probe_latents(set, cfg, pcfg);
    CHECK(result.accuracy == 1.0);
    CHECK(result.correct == result.total);
    CHECK(result.total == 20);
    // perfect confusion matrix is diagonal
    for (int c = 0; c < cfg.probe_classes; ++c)
      CHECK(result.confusion[static_cast<size_t>(c)][static_cast<size_t>(c)] == 5);
  }

  SUBCASE("noise latents sit near chance on balanced classes") {
    const LatentSet set = synthetic_latents(cfg.width, cfg.probe_classes, 10, 20, false, 3);
    const ProbeResult result = probe_latents(set, cfg, pcfg);
    CHECK(result.accuracy > 0.05);
    CHECK(result.accuracy < 0.50);
  }

  SUBCASE("labels outside the class range are a config error") {
    LatentSet set = synthetic_latents(cfg.width, cfg.probe_classes, 2, 1, true, 3);
    set.labels[0] = 7;
    CHECK(kind_of([&] { probe_latents(set, cfg, pcfg); }) == ErrorKind::Config);
  }

  SUBCASE("latent width must match the model") {
    const LatentSet set = synthetic_latents(cfg.width + 2, cfg.probe_classes, 2, 1, true, 3);
    CHECK(kind_of([&] { probe_latents(set, cfg, pcfg); }) == ErrorKind::Config);
  }
}

TEST_CASE("probe result bookkeeping is exact and the backbone stays frozen") {
  testutil::TempDir tmp("probe");
  const DatasetSpec spec = micro_spec();
  const Dataset dataset = generate_dataset(spec, tmp.path("data"));
  const ModelConfig cfg = micro_config();
  Rng rng(17);
  EncoderParams backbone = make_encoder<float>(cfg, rng);
  const uint64_t digest = named_checksum(backbone.named());

  ProbeConfig pcfg;
  pcfg.learning_rates = {1e-3};
  pcfg.epochs = 2;
  pcfg.batch_size = 8;
  pcfg.seed = 5;
  const ProbeResult result = train_probe(backbone, cfg, dataset, pcfg);

  CHECK(named_checksum(backbone.named()) == digest);
  CHECK(result.total == static_cast<int64_t>(dataset.eval_ids.size()));
  CHECK(result.accuracy ==
        static_cast<double>(result.correct) / static_cast<double>(result.total));
  CHECK(result.lr == 1e-3);
  CHECK(result.wd == 0.01);
  CHECK(result.epochs == 2);

  // confusion rows sum to the per-class eval totals
  std::vector<int64_t> per_class(static_cast<size_t>(cfg.probe_classes), 0);
  for (int64_t id : dataset.eval_ids)
    per_class[static_cast<size_t>(dataset.clips[static_cast<size_t>(id)].label)] += 1;
  int64_t diag = 0;
  for (int c = 0; c < cfg.probe_classes; ++c) {
    int64_t row = 0;
    for (int d = 0; d < cfg.probe_classes; ++d) row += result.confusion[c][d];
    CHECK(row == per_class[static_cast<size_t>(c)]);
    diag += result.confusion[c][c];
  }
  CHECK(diag == result.correct);

  // the probe result is reproducible and serializes with its hyperparameters
  const ProbeResult again = train_probe(backbone, cfg, dataset, pcfg);
  CHECK(again.accuracy == result.accuracy);
  CHECK(again.to_json() == result.to_json());

  // deterministic subsampling caps the train split
  ProbeConfig capped = pcfg;
  capped.max_train_clips = 4;
  const ProbeResult small = train_probe(backbone, cfg, dataset, capped);
  CHECK(small.total == result.total);
}

// ---- surprise over real clips ------------------------------------------------

TEST_CASE("surprise series recomputes window scores exactly") {
  const ModelConfig cfg = micro_config();
  Rng r1(41), r2(42), r3(43);
  EncoderParams student = make_encoder<float>(cfg, r1);
  PredictorParams predictor = make_predictor<float>(cfg, r2);
  EncoderParams teacher = make_encoder<float>(cfg, r3);

  DatasetSpec spec = micro_spec();
  const VideoClip clip = render_clip(spec, 0);

  SurpriseConfig scfg;
  scfg.context = 2;
  scfg.future = 2;
  scfg.stride = 2;
  const SurpriseSeries series = surprise_series(student, predictor, teacher, clip, cfg, scfg);

  // the window set for T=8, C=2, M=2, s=2
  CHECK(series.window_starts == std::vector<int>{1, 3});
  REQUIRE(series.scores.size() == 2);
  for (double s : series.scores) CHECK(s > 0);
  CHECK(series.aggregate == doctest::Approx(global_surprise(series.scores, "average")).epsilon(1e-12));

  // independent recomputation of the first window from the models API
  {
    const TokenGrid grid = patchify(clip, cfg.tubelet_t, cfg.tubelet_h, cfg.tubelet_w);
    const int64_t hw = static_cast<int64_t>(cfg.grid_h) * cfg.grid_w;
    const int64_t payload = grid.tokens.cols();
    auto rows_of = [&](int64_t row0, int64_t rows) {
      Tensor out = Tensor::zeros({rows, payload});
      std::copy_n(grid.tokens.values().data() + row0 * payload, rows * payload, out.data());
      return out;
    };
    const std::vector<Pos3> ctx_pos(grid.positions.begin(), grid.positions.begin() + hw);
    const std::vector<Pos3> fut_pos(grid.positions.begin() + hw, grid.positions.begin() + 2 * hw);
    const std::vector<Pos3> win_pos(grid.positions.begin(), grid.positions.begin() + 2 * hw);
    const Tensor ctx_latents = encoder_forward<float>(
        nullptr, student, tubelet_embed<float>(nullptr, student, rows_of(0, hw)), ctx_pos,
        {{0, hw}});
    const Tensor predicted = predictor_forward<float>(nullptr, predictor, ctx_latents, ctx_pos,
                                                      {{0, hw}}, fut_pos, {{0, hw}});
    const Tensor window_latents = encoder_forward<float>(
        nullptr, teacher, tubelet_embed<float>(nullptr, teacher, rows_of(0, 2 * hw)), win_pos,
        {{0, 2 * hw}});
    double acc = 0;
    for (int64_t r = 0; r < hw; ++r)
      for (int64_t d = 0; d < cfg.width; ++d)
        acc += std::abs(predicted.values()[r * cfg.width + d] -
                        window_latents.values()[(hw + r) * cfg.width + d]);
    acc /= static_cast<double>(hw * cfg.width);
    // the library's mean reduces in float; allow its rounding
    CHECK(series.scores[0] == doctest::Approx(acc).epsilon(1e-5));
  }

  // recomputation is bit-stable
  const SurpriseSeries again = surprise_series(student, predictor, teacher, clip, cfg, scfg);
  for (size_t i = 0; i < series.scores.size(); ++i) CHECK(series.scores[i] == again.scores[i]);

  SUBCASE("windows must align with the temporal tubelet size") {
    SurpriseConfig bad = scfg;
    bad.stride = 1;
    CHECK(kind_of([&] { surprise_series(student, predictor, teacher, clip, cfg, bad); }) ==
          ErrorKind::Contract);
    bad = scfg;
    bad.context = 3;
    CHECK(kind_of([&] { surprise_series(student, predictor, teacher, clip, cfg, bad); }) ==
          ErrorKind::Contract);
  }

  SUBCASE("target encoder width must match the predictor output") {
    ModelConfig wide = cfg;
    wide.width = 18;
    wide.heads = 3;
    Rng rw(44);
    EncoderParams wide_teacher = make_encoder<float>(wide, rw);
    CHECK(kind_of([&] { surprise_series(student, predictor, wide_teacher, clip, cfg, scfg); }) ==
          ErrorKind::Config);
  }
}

TEST_CASE("pair accuracy counts strict inequalities and ties as stated") {
  testutil::TempDir tmp("pairs");
  DatasetSpec spec = micro_spec();
  const Dataset pairs = generate_pairs(spec, 3, Violation::kTeleport, tmp.path("pairs"));
  REQUIRE(pairs.pairs);
  REQUIRE(pairs.clips.size() == 6);

  const ModelConfig cfg = micro_config();
  Rng r1(41), r2(42), r3(43);
  EncoderParams student = make_encoder<float>(cfg, r1);
  PredictorParams predictor = make_predictor<float>(cfg, r2);
  EncoderParams teacher = make_encoder<float>(cfg, r3);

  SurpriseConfig scfg;
  scfg.context = 2;
  scfg.future = 2;

  const PairAccuracyResult result =
      pair_relative_accuracy(student, predictor, teacher, pairs, cfg, scfg);
  CHECK(result.total == 3);
  CHECK(result.scores.size() == 3);
  CHECK(result.accuracy ==
        static_cast<double>(result.correct) / static_cast<double>(result.total));
  for (const PairScore& s : result.scores) {
    CHECK(s.plausible > 0);
    CHECK(s.implausible > 0);
  }

  SUBCASE("identical scores are ties and count incorrect") {
    // zero out the teacher's final gain and the predictor's output projection:
    // every target and every prediction becomes exactly zero, so all scores
    // tie at zero and nothing is counted correct.
    EncoderParams flat_teacher = make_encoder<float>(cfg, r3);
    for (auto& [name, tensor] : flat_teacher.named())
      if (name == "lnf.g" || name == "lnf.b")
        std::fill_n(tensor.data(), tensor.numel(), 0.0f);
    PredictorParams flat_pred = make_predictor<float>(cfg, r2);
    for (auto& [name, tensor] : flat_pred.named())
      if (name == "out.w" || name == "out.b")
        std::fill_n(tensor.data(), tensor.numel(), 0.0f);
    const PairAccuracyResult tied =
        pair_relative_accuracy(student, flat_pred, flat_teacher, pairs, cfg, scfg);
    CHECK(tied.correct == 0);
    CHECK(tied.accuracy == 0.0);
  }

  SUBCASE("a non-pair dataset is rejected") {
    const Dataset plain = generate_dataset(spec, tmp.path("plain"));
    CHECK(kind_of([&] {
            pair_relative_accuracy(student, predictor, teacher, plain, cfg, scfg);
          }) == ErrorKind::Config);
  }
}

TEST_CASE("pooled embeddings average token latents per clip") {
  testutil::TempDir tmp("pool");
  const DatasetSpec spec = micro_spec();
  const Dataset dataset = generate_dataset(spec, tmp.path("data"));
  const ModelConfig cfg = micro_config();
  Rng rng(17);
  EncoderParams backbone = make_encoder<float>(cfg, rng);

  const std::vector<int64_t> picks{0, 3, 5};
  const Tensor pooled = pooled_embeddings(backbone, cfg, dataset, picks);
  REQUIRE(pooled.rows() == 3);
  REQUIRE(pooled.cols() == cfg.width);

  const TokenGrid grid = patchify(load_clip(dataset, 3), spec);
  const Tensor latents = encoder_forward<float>(
      nullptr, backbone, tubelet_embed<float>(nullptr, backbone, grid.tokens), grid.positions,
      {{0, grid.token_count()}});
  for (int64_t d = 0; d < cfg.width; ++d) {
    double acc = 0;
    for (int64_t r = 0; r < latents.rows(); ++r) acc += latents.values()[r * cfg.width + d];
    acc /= static_cast<double>(latents.rows());
    CHECK(pooled.values()[1 * cfg.width + d] == doctest::Approx(acc).epsilon(1e-5));
  }

  CHECK(kind_of([&] { pooled_embeddings(backbone, cfg, dataset, {}); }) == ErrorKind::Contract);
  CHECK(rankme(pooled) >= 1.0);
}
