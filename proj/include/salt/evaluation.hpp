#pragma once

// Frozen-backbone attentive probing, window-based surprise scoring over
// plausible/implausible clip pairs, effective rank of an embedding matrix,
// and the ordinary-least-squares loss/accuracy correlation.

#include <cstdint>
#include <string>
#include <vector>

#include "salt/models.hpp"
#include "salt/tensor.hpp"
#include "salt/video.hpp"

namespace salt {

// ---- attentive probing -----------------------------------------------------

struct ProbeConfig {
  std::vector<double> learning_rates = {1e-3, 3e-4};
  std::vector<double> weight_decays = {0.01};
  int epochs = 20;
  int64_t batch_size = 32;
  int64_t max_train_clips = 0;  // 0 = all; otherwise a deterministic subsample
  uint64_t seed = 0;

  void validate() const;
};

struct ProbeResult {
  double accuracy = 0;  // correct / total on the held-out split, exactly
  int64_t correct = 0;
  int64_t total = 0;
  std::vector<std::vector<int64_t>> confusion;  // [true class][predicted class]
  double lr = 0, wd = 0;  // winning grid point
  int epochs = 0;

  std::string to_json() const;
};

// Per-clip backbone latents with the dataset's split carried along. The probe
// only ever sees these fixed activations, so probing cannot touch the
// backbone.
struct LatentSet {
  std::vector<Tensor> latents;  // one [tokens x width] matrix per clip
  std::vector<int> labels;
  std::vector<int64_t> train_index;
  std::vector<int64_t> eval_index;
  int width = 0;
};

// Tape-less full-clip forwards over every dataset clip.
LatentSet extract_latents(const EncoderParamsT<float>& backbone, const ModelConfig& cfg,
                          const Dataset& dataset);

// Train one probe per (lr, wd) grid point on the train split and report the
// grid point with the best held-out accuracy.
ProbeResult probe_latents(const LatentSet& set, const ModelConfig& cfg, const ProbeConfig& pcfg);

ProbeResult train_probe(const EncoderParamsT<float>& backbone, const ModelConfig& cfg,
                        const Dataset& dataset, const ProbeConfig& pcfg);

// ---- surprise scoring -------------------------------------------------------

struct SurpriseConfig {
  int context = 4;  // C, frames
  int future = 4;   // M, frames
  int stride = 2;   // s, frames
  std::string aggregation = "average";  // average | maximum

  void validate() const;
};

// The 1-based window starts {1, 1+s, ..., T-(C+M)}.
std::vector<int> surprise_window_starts(int frames, const SurpriseConfig& cfg);

struct SurpriseSeries {
  std::vector<int> window_starts;  // first context frame per window, 1-based
  std::vector<double> scores;
  double aggregate = 0;
};

// Per window: encode the C context frames with the student, predict the next
// M frames' token latents with the predictor, and take the mean absolute
// difference against the target encoder's latents of the full C+M window
// restricted to the future tokens.
SurpriseSeries surprise_series(const EncoderParamsT<float>& student,
                               const PredictorParamsT<float>& predictor,
                               const EncoderParamsT<float>& target_encoder, const VideoClip& clip,
                               const ModelConfig& cfg, const SurpriseConfig& scfg);

// average = sum / window count, maximum = largest score.
double global_surprise(const std::vector<double>& scores, const std::string& aggregation);

struct PairScore {
  double plausible = 0;
  double implausible = 0;
};

struct PairAccuracyResult {
  int64_t correct = 0;
  int64_t total = 0;
  double accuracy = 0;
  std::vector<PairScore> scores;
};

// A pair counts correct iff the implausible clip is strictly more surprising;
// ties count as incorrect.
PairAccuracyResult pair_relative_accuracy(const EncoderParamsT<float>& student,
                                          const PredictorParamsT<float>& predictor,
                                          const EncoderParamsT<float>& target_encoder,
                                          const Dataset& pairs, const ModelConfig& cfg,
                                          const SurpriseConfig& scfg);

// ---- effective rank ----------------------------------------------------------

// exp of the entropy of the normalized singular-value spectrum
// (p_k = sigma_k / sum(sigma) + 1e-7, renormalized). Always lies in
// [1, min(n, d)]; an all-zero matrix is degenerate.
double rankme(const Tensor& embeddings);

// One pooled row per selected clip: the token-mean of the backbone's latents.
Tensor pooled_embeddings(const EncoderParamsT<float>& backbone, const ModelConfig& cfg,
                         const Dataset& dataset, const std::vector<int64_t>& indices);

// ---- loss/accuracy correlation ------------------------------------------------

struct LinearFit {
  double slope = 0;
  double intercept = 0;
  double r2 = 0;
};

// Ordinary least squares of ys on xs. Needs >= 3 points and varying xs;
// constant ys fit a flat line with r2 = 0 by convention.
LinearFit r2_fit(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace salt
