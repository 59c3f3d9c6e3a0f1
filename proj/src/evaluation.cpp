#include "salt/evaluation.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "salt/checkpoint.hpp"
#include "salt/rng.hpp"
#include "salt/trainers.hpp"

namespace salt {

using ordered_json = nlohmann::ordered_json;

// ---- attentive probing -----------------------------------------------------

void ProbeConfig::validate() const {
  check(!learning_rates.empty() && !weight_decays.empty(), ErrorKind::Config,
        "probe grid must contain at least one learning rate and weight decay");
  for (double lr : learning_rates)
    check(lr > 0, ErrorKind::Config, "probe learning rates must be positive");
  for (double wd : weight_decays)
    check(wd >= 0, ErrorKind::Config, "probe weight decays must be nonnegative");
  check(epochs >= 1, ErrorKind::Config, "probe epochs must be >= 1");
  check(batch_size >= 1, ErrorKind::Config, "probe batch size must be >= 1");
  check(max_train_clips >= 0, ErrorKind::Config, "max_train_clips must be nonnegative");
}

std::string ProbeResult::to_json() const {
  ordered_json j;
  j["accuracy"] = accuracy;
  j["correct"] = correct;
  j["total"] = total;
  j["lr"] = lr;
  j["wd"] = wd;
  j["epochs"] = epochs;
  j["confusion"] = confusion;
  return j.dump(2);
}

LatentSet extract_latents(const EncoderParamsT<float>& backbone, const ModelConfig& cfg,
                          const Dataset& dataset) {
  const DatasetSpec& s = dataset.spec;
  check(s.frames == cfg.grid_t * cfg.tubelet_t && s.height == cfg.grid_h * cfg.tubelet_h &&
            s.width == cfg.grid_w * cfg.tubelet_w && s.channels == cfg.channels,
        ErrorKind::Config, "dataset geometry does not match the model token grid");
  LatentSet set;
  set.width = backbone.width;
  set.latents.reserve(dataset.clips.size());
  set.labels.reserve(dataset.clips.size());
  for (size_t i = 0; i < dataset.clips.size(); ++i) {
    const TokenGrid grid = patchify(load_clip(dataset, static_cast<int64_t>(i)), s);
    const Tensor embedded = tubelet_embed<float>(nullptr, backbone, grid.tokens);
    const RowSpan span{0, grid.token_count()};
    set.latents.push_back(
        encoder_forward<float>(nullptr, backbone, embedded, grid.positions, {span}));
    set.labels.push_back(dataset.clips[i].label);
  }
  set.train_index = dataset.train_ids;
  set.eval_index = dataset.eval_ids;
  return set;
}

namespace {

struct StackedClips {
  Tensor latents;
  std::vector<RowSpan> spans;
  std::vector<int> labels;
};

StackedClips stack_clips(const LatentSet& set, const std::vector<int64_t>& order, size_t lo,
                         size_t hi) {
  StackedClips out;
  int64_t rows = 0;
  for (size_t i = lo; i < hi; ++i) rows += set.latents[static_cast<size_t>(order[i])].rows();
  out.latents = Tensor::zeros({rows, set.width});
  int64_t at = 0;
  for (size_t i = lo; i < hi; ++i) {
    const Tensor& l = set.latents[static_cast<size_t>(order[i])];
    std::copy_n(l.values().data(), l.numel(), out.latents.data() + at * set.width);
    out.spans.push_back({at, l.rows()});
    at += l.rows();
    out.labels.push_back(set.labels[static_cast<size_t>(order[i])]);
  }
  return out;
}

void shuffle_indices(std::vector<int64_t>& idx, Rng& rng) {
  for (size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);
}

int argmax_row(const float* row, int n) {
  int best = 0;
  for (int j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

}  // namespace

ProbeResult probe_latents(const LatentSet& set, const ModelConfig& cfg, const ProbeConfig& pcfg) {
  pcfg.validate();
  const int classes = cfg.probe_classes;
  check(set.width == cfg.width, ErrorKind::Config, "latent width ", set.width,
        " does not match the model width ", cfg.width);
  check(!set.train_index.empty() && !set.eval_index.empty(), ErrorKind::Config,
        "probing needs both a train and an eval split");
  for (int label : set.labels)
    check(label >= 0 && label < classes, ErrorKind::Config, "label ", label,
          " outside the configured ", classes, " classes");

  Rng root(pcfg.seed);
  std::vector<int64_t> train = set.train_index;
  if (pcfg.max_train_clips > 0 &&
      static_cast<int64_t>(train.size()) > pcfg.max_train_clips) {
    Rng sub = root.fork("probe-subsample");
    shuffle_indices(train, sub);
    train.resize(static_cast<size_t>(pcfg.max_train_clips));
  }

  ProbeResult best;
  best.accuracy = -1.0;
  size_t grid_index = 0;
  for (double lr : pcfg.learning_rates) {
    for (double wd : pcfg.weight_decays) {
      Rng init = root.fork("probe-init", grid_index);
      ProbeParams probe = make_probe<float>(cfg, init);
      probe.mark_trainable();
      std::vector<Tensor> params = probe.tensors();
      AdamWState state = AdamWState::init(params);
      const OptimConfig opt;  // betas/eps only; lr and wd are passed per step

      for (int epoch = 0; epoch < pcfg.epochs; ++epoch) {
        Rng order_rng = root.fork("probe-order", grid_index * 65537 + static_cast<uint64_t>(epoch));
        shuffle_indices(train, order_rng);
        for (size_t lo = 0; lo < train.size(); lo += static_cast<size_t>(pcfg.batch_size)) {
          const size_t hi = std::min(train.size(), lo + static_cast<size_t>(pcfg.batch_size));
          const StackedClips batch = stack_clips(set, train, lo, hi);
          Tape tape;
          Tensor logits = attentive_probe_forward<float>(&tape, probe, batch.latents, batch.spans);
          Tensor loss = cross_entropy_logits(&tape, logits, batch.labels);
          tape.backward(loss);
          adamw_step(params, state, lr, wd, opt);
          for (Tensor& p : params) p.zero_grad();
        }
      }

      ProbeResult result;
      result.lr = lr;
      result.wd = wd;
      result.epochs = pcfg.epochs;
      result.confusion.assign(static_cast<size_t>(classes),
                              std::vector<int64_t>(static_cast<size_t>(classes), 0));
      for (size_t lo = 0; lo < set.eval_index.size();
           lo += static_cast<size_t>(pcfg.batch_size)) {
        const size_t hi =
            std::min(set.eval_index.size(), lo + static_cast<size_t>(pcfg.batch_size));
        const StackedClips batch = stack_clips(set, set.eval_index, lo, hi);
        const Tensor logits =
            attentive_probe_forward<float>(nullptr, probe, batch.latents, batch.spans);
        for (size_t b = 0; b < batch.labels.size(); ++b) {
          const int predicted =
              argmax_row(logits.values().data() + static_cast<int64_t>(b) * classes, classes);
          const int truth = batch.labels[b];
          result.confusion[static_cast<size_t>(truth)][static_cast<size_t>(predicted)] += 1;
          if (predicted == truth) result.correct += 1;
          result.total += 1;
        }
      }
      result.accuracy = static_cast<double>(result.correct) / static_cast<double>(result.total);
      if (result.accuracy > best.accuracy) best = result;
      ++grid_index;
    }
  }
  return best;
}

ProbeResult train_probe(const EncoderParamsT<float>& backbone, const ModelConfig& cfg,
                        const Dataset& dataset, const ProbeConfig& pcfg) {
  const uint64_t digest = named_checksum(backbone.named());
  const LatentSet set = extract_latents(backbone, cfg, dataset);
  ProbeResult result = probe_latents(set, cfg, pcfg);
  check(named_checksum(backbone.named()) == digest, ErrorKind::Contract,
        "probing mutated the backbone");
  return result;
}

// ---- surprise scoring -------------------------------------------------------

void SurpriseConfig::validate() const {
  check(context >= 1 && future >= 1, ErrorKind::Config,
        "context and future frame counts must be >= 1");
  check(stride >= 1, ErrorKind::Config, "stride must be >= 1");
  check(aggregation == "average" || aggregation == "maximum", ErrorKind::Config,
        "unknown aggregation '", aggregation, "'");
}

std::vector<int> surprise_window_starts(int frames, const SurpriseConfig& cfg) {
  cfg.validate();
  check(cfg.context + cfg.future <= frames, ErrorKind::Contract, "clip of ", frames,
        " frames is too short for a ", cfg.context, "+", cfg.future, " window");
  std::vector<int> starts;
  for (int t = 1; t <= frames - (cfg.context + cfg.future); t += cfg.stride) starts.push_back(t);
  check(!starts.empty(), ErrorKind::Contract, "no admissible surprise windows for ", frames,
        " frames");
  return starts;
}

double global_surprise(const std::vector<double>& scores, const std::string& aggregation) {
  check(!scores.empty(), ErrorKind::Contract, "empty surprise series");
  if (aggregation == "average") {
    double sum = 0;
    for (double s : scores) sum += s;
    return sum / static_cast<double>(scores.size());
  }
  check(aggregation == "maximum", ErrorKind::Config, "unknown aggregation '", aggregation, "'");
  return *std::max_element(scores.begin(), scores.end());
}

SurpriseSeries surprise_series(const EncoderParamsT<float>& student,
                               const PredictorParamsT<float>& predictor,
                               const EncoderParamsT<float>& target_encoder, const VideoClip& clip,
                               const ModelConfig& cfg, const SurpriseConfig& scfg) {
  const int frames = static_cast<int>(clip.frames.dim(0));
  const int tt = cfg.tubelet_t;
  check(scfg.context % tt == 0 && scfg.future % tt == 0 && scfg.stride % tt == 0,
        ErrorKind::Contract,
        "surprise context/future/stride must be multiples of the temporal tubelet size ", tt);
  check(predictor.out_dim == target_encoder.width, ErrorKind::Config,
        "predictor output width ", predictor.out_dim, " does not match the target encoder width ",
        target_encoder.width);

  const TokenGrid grid = patchify(clip, cfg.tubelet_t, cfg.tubelet_h, cfg.tubelet_w);
  check(grid.grid_t == cfg.grid_t && grid.grid_h == cfg.grid_h && grid.grid_w == cfg.grid_w,
        ErrorKind::Config, "clip token grid does not match the model config");
  const int64_t hw = static_cast<int64_t>(grid.grid_h) * grid.grid_w;
  const int64_t payload = grid.tokens.cols();
  const int64_t ctx_slots = scfg.context / tt;
  const int64_t fut_slots = scfg.future / tt;

  auto slice_rows = [&](int64_t row0, int64_t rows) {
    Tensor out = Tensor::zeros({rows, payload});
    std::copy_n(grid.tokens.values().data() + row0 * payload, rows * payload, out.data());
    return out;
  };
  auto slice_positions = [&](int64_t row0, int64_t rows) {
    return std::vector<Pos3>(grid.positions.begin() + row0, grid.positions.begin() + row0 + rows);
  };

  SurpriseSeries series;
  series.window_starts = surprise_window_starts(frames, scfg);
  for (const int start : series.window_starts) {
    const int64_t slot0 = static_cast<int64_t>(start - 1) / tt;
    const int64_t ctx_row0 = slot0 * hw;
    const int64_t ctx_rows = ctx_slots * hw;
    const int64_t fut_rows = fut_slots * hw;

    // student context encoding and future-token prediction
    const Tensor ctx_tokens = slice_rows(ctx_row0, ctx_rows);
    const std::vector<Pos3> ctx_pos = slice_positions(ctx_row0, ctx_rows);
    const std::vector<Pos3> fut_pos = slice_positions(ctx_row0 + ctx_rows, fut_rows);
    const Tensor ctx_latents = encoder_forward<float>(
        nullptr, student, tubelet_embed<float>(nullptr, student, ctx_tokens), ctx_pos,
        {{0, ctx_rows}});
    const Tensor predicted =
        predictor_forward<float>(nullptr, predictor, ctx_latents, ctx_pos, {{0, ctx_rows}},
                                 fut_pos, {{0, fut_rows}});

    // target encoding of the full window, restricted to the future tokens
    const Tensor window_tokens = slice_rows(ctx_row0, ctx_rows + fut_rows);
    const std::vector<Pos3> window_pos = slice_positions(ctx_row0, ctx_rows + fut_rows);
    const Tensor window_latents = encoder_forward<float>(
        nullptr, target_encoder, tubelet_embed<float>(nullptr, target_encoder, window_tokens),
        window_pos, {{0, ctx_rows + fut_rows}});
    Tensor target = Tensor::zeros({fut_rows, static_cast<int64_t>(target_encoder.width)});
    std::copy_n(window_latents.values().data() + ctx_rows * target_encoder.width,
                fut_rows * target_encoder.width, target.data());

    series.scores.push_back(static_cast<double>(l1_loss<float>(nullptr, predicted, target).item()));
  }
  series.aggregate = global_surprise(series.scores, scfg.aggregation);
  return series;
}

PairAccuracyResult pair_relative_accuracy(const EncoderParamsT<float>& student,
                                          const PredictorParamsT<float>& predictor,
                                          const EncoderParamsT<float>& target_encoder,
                                          const Dataset& pairs, const ModelConfig& cfg,
                                          const SurpriseConfig& scfg) {
  check(pairs.pairs, ErrorKind::Config, "dataset was not generated as violation pairs");
  const int64_t total = static_cast<int64_t>(pairs.clips.size()) / 2;
  check(total >= 1, ErrorKind::Contract, "need at least one clip pair");
  PairAccuracyResult result;
  result.total = total;
  for (int64_t i = 0; i < total; ++i) {
    const VideoClip plausible = load_clip(pairs, 2 * i);
    const VideoClip implausible = load_clip(pairs, 2 * i + 1);
    PairScore score;
    score.plausible =
        surprise_series(student, predictor, target_encoder, plausible, cfg, scfg).aggregate;
    score.implausible =
        surprise_series(student, predictor, target_encoder, implausible, cfg, scfg).aggregate;
    if (score.implausible > score.plausible) result.correct += 1;
    result.scores.push_back(score);
  }
  result.accuracy = static_cast<double>(result.correct) / static_cast<double>(result.total);
  return result;
}

// ---- effective rank ----------------------------------------------------------

namespace {

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, in place.
std::vector<double> jacobi_eigenvalues(std::vector<double>& a, int64_t m) {
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0, diag = 0;
    for (int64_t p = 0; p < m; ++p) {
      diag += std::abs(a[static_cast<size_t>(p * m + p)]);
      for (int64_t q = p + 1; q < m; ++q) off += std::abs(a[static_cast<size_t>(p * m + q)]);
    }
    if (off <= 1e-15 * std::max(diag, 1e-300)) break;
    for (int64_t p = 0; p < m; ++p) {
      for (int64_t q = p + 1; q < m; ++q) {
        const double apq = a[static_cast<size_t>(p * m + q)];
        if (apq == 0) continue;
        const double app = a[static_cast<size_t>(p * m + p)];
        const double aqq = a[static_cast<size_t>(q * m + q)];
        const double theta = (aqq - app) / (2 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1.0 / std::sqrt(t * t + 1);
        const double s = t * c;
        for (int64_t k = 0; k < m; ++k) {
          const double akp = a[static_cast<size_t>(k * m + p)];
          const double akq = a[static_cast<size_t>(k * m + q)];
          a[static_cast<size_t>(k * m + p)] = c * akp - s * akq;
          a[static_cast<size_t>(k * m + q)] = s * akp + c * akq;
        }
        for (int64_t k = 0; k < m; ++k) {
          const double apk = a[static_cast<size_t>(p * m + k)];
          const double aqk = a[static_cast<size_t>(q * m + k)];
          a[static_cast<size_t>(p * m + k)] = c * apk - s * aqk;
          a[static_cast<size_t>(q * m + k)] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(static_cast<size_t>(m));
  for (int64_t p = 0; p < m; ++p) eig[static_cast<size_t>(p)] = a[static_cast<size_t>(p * m + p)];
  return eig;
}

}  // namespace

double rankme(const Tensor& embeddings) {
  check(embeddings.ndim() == 2, ErrorKind::Dimension, "rank expects a 2-d embedding matrix, got ",
        shape_str(embeddings.shape()));
  const int64_t n = embeddings.rows(), d = embeddings.cols();
  const int64_t m = std::min(n, d);
  const std::vector<float>& v = embeddings.values();

  double magnitude = 0;
  for (float x : v) magnitude = std::max(magnitude, static_cast<double>(std::abs(x)));
  check(magnitude > 0, ErrorKind::Degenerate, "all-zero embedding matrix has no spectrum");

  // Gram matrix over the smaller side in double precision.
  std::vector<double> gram(static_cast<size_t>(m * m), 0.0);
  if (d <= n) {
    for (int64_t i = 0; i < n; ++i)
      for (int64_t p = 0; p < d; ++p) {
        const double vip = v[static_cast<size_t>(i * d + p)];
        for (int64_t q = p; q < d; ++q)
          gram[static_cast<size_t>(p * d + q)] += vip * v[static_cast<size_t>(i * d + q)];
      }
  } else {
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = i; j < n; ++j) {
        double acc = 0;
        for (int64_t p = 0; p < d; ++p)
          acc += static_cast<double>(v[static_cast<size_t>(i * d + p)]) *
                 v[static_cast<size_t>(j * d + p)];
        gram[static_cast<size_t>(i * n + j)] = acc;
      }
  }
  for (int64_t p = 0; p < m; ++p)
    for (int64_t q = 0; q < p; ++q)
      gram[static_cast<size_t>(p * m + q)] = gram[static_cast<size_t>(q * m + p)];

  std::vector<double> eig = jacobi_eigenvalues(gram, m);
  std::vector<double> sigma;
  sigma.reserve(eig.size());
  double sum = 0;
  for (double e : eig) {
    const double s = std::sqrt(std::max(e, 0.0));
    sigma.push_back(s);
    sum += s;
  }
  check(sum > 0, ErrorKind::Degenerate, "embedding spectrum vanished");

  double psum = 0;
  for (double& s : sigma) {
    s = s / sum + 1e-7;
    psum += s;
  }
  double entropy = 0;
  for (double s : sigma) {
    const double p = s / psum;
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

Tensor pooled_embeddings(const EncoderParamsT<float>& backbone, const ModelConfig& cfg,
                         const Dataset& dataset, const std::vector<int64_t>& indices) {
  check(!indices.empty(), ErrorKind::Contract, "no clips selected for embedding");
  Tensor out = Tensor::zeros({static_cast<int64_t>(indices.size()),
                              static_cast<int64_t>(backbone.width)});
  for (size_t i = 0; i < indices.size(); ++i) {
    const TokenGrid grid = patchify(load_clip(dataset, indices[i]), dataset.spec);
    const Tensor latents = encoder_forward<float>(
        nullptr, backbone, tubelet_embed<float>(nullptr, backbone, grid.tokens), grid.positions,
        {{0, grid.token_count()}});
    const int64_t rows = latents.rows(), width = latents.cols();
    float* dst = out.data() + static_cast<int64_t>(i) * width;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < width; ++c)
        dst[c] += latents.values()[static_cast<size_t>(r * width + c)];
    for (int64_t c = 0; c < width; ++c) dst[c] /= static_cast<float>(rows);
  }
  return out;
}

// ---- loss/accuracy correlation ------------------------------------------------

LinearFit r2_fit(const std::vector<double>& xs, const std::vector<double>& ys) {
  check(xs.size() == ys.size(), ErrorKind::Dimension, "xs and ys differ in length");
  const size_t n = xs.size();
  check(n >= 3, ErrorKind::Contract, "need at least 3 points, got ", n);
  double xbar = 0, ybar = 0;
  for (size_t i = 0; i < n; ++i) {
    xbar += xs[i];
    ybar += ys[i];
  }
  xbar /= static_cast<double>(n);
  ybar /= static_cast<double>(n);
  double sxx = 0, sxy = 0, syy = 0;
  for (size_t i = 0; i < n; ++i) {
    sxx += (xs[i] - xbar) * (xs[i] - xbar);
    sxy += (xs[i] - xbar) * (ys[i] - ybar);
    syy += (ys[i] - ybar) * (ys[i] - ybar);
  }
  check(sxx > 0, ErrorKind::Degenerate, "xs have zero variance");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = ybar - fit.slope * xbar;
  if (syy == 0) {
    fit.r2 = 0.0;  // constant ys: a flat line explains nothing by convention
    return fit;
  }
  double ss_res = 0;
  for (size_t i = 0; i < n; ++i) {
    const double e = ys[i] - (fit.intercept + fit.slope * xs[i]);
    ss_res += e * e;
  }
  fit.r2 = 1.0 - ss_res / syy;
  return fit;
}

}  // namespace salt
