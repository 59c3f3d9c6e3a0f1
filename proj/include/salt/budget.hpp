#pragma once

// Compute accounting. Training compute follows the parameter-based 6·N·D
// rule (backward costs twice the forward); a gradient-free teacher forward
// costs 2·N·D. Token counts derive from grid size, masking ratio, and the
// component's role. Shipped presets carry the published N/D inputs of the
// reference models so their totals can be reproduced and compared.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "salt/common.hpp"
#include "salt/evaluation.hpp"
#include "salt/models.hpp"
#include "salt/trainers.hpp"

namespace salt {

double train_flops(double n_params, double d_tokens);            // 6·N·D
double teacher_forward_flops(double n_params, double d_tokens);  // 2·N·D

// Which slice of the token stream a component touches per training step.
enum class TokenRole {
  kEncoder,         // visible tokens only, once per mask
  kPredictor,       // full union (context + mask slots), once per mask
  kDecoder,         // same union rule as the predictor
  kTeacherForward,  // full clip, once per clip (shared across masks)
};

// Total tokens a component processes over a run.
double token_count(int64_t grid_tokens, double mask_ratio, TokenRole role, int64_t batch,
                   int64_t steps, int num_masks = 2);

struct FlopsSpec {
  double n_encoder = 0;    // trainable encoder params
  double n_teacher = 0;    // gradient-free teacher params (0 if none)
  double n_predictor = 0;  // latent predictor params (0 if none)
  double n_decoder = 0;    // pixel decoder params (0 if none)
  double d_encoder = 0;    // token totals over the run
  double d_teacher = 0;
  double d_predictor = 0;
  double d_decoder = 0;
};

struct FlopsBreakdown {
  double encoder = 0;
  double predictor = 0;
  double decoder = 0;
  double teacher = 0;
  double total() const { return encoder + predictor + decoder + teacher; }
};

FlopsBreakdown flops_breakdown(const FlopsSpec& spec);

struct FlopsPreset {
  std::string name;
  FlopsSpec spec;
  double reference_total = 0;  // published total; derivation deltas are reported, never hidden
};

const std::vector<FlopsPreset>& flops_presets();
FlopsPreset flops_preset(const std::string& name);

// Teacher/student compute-allocation sweep over one total step budget.
struct AllocationPlan {
  std::string dataset_dir;
  ModelConfig model;
  int64_t total_steps = 0;
  std::vector<std::pair<int64_t, int64_t>> splits;  // (teacher_steps, student_steps)
  int64_t batch_size = 32;
  int64_t warmup_fraction_den = 10;  // warmup = steps / this, per run
  OptimConfig optim;  // template; total/warmup overwritten per run
  ProbeConfig probe;
  uint64_t seed = 0;
  std::string out_dir;
  bool force = false;
  bool include_ema_baseline = true;

  void validate() const;
};

// Standard teacher fractions of the total budget for desk sweeps.
std::vector<std::pair<int64_t, int64_t>> default_splits(int64_t total_steps);

struct SweepRow {
  std::string tag;  // e.g. "t400+s3600" or "ema-baseline"
  int64_t teacher_steps = 0;
  int64_t student_steps = 0;
  double teacher_flops = 0;
  double student_flops = 0;
  double total_flops = 0;
  double final_loss = 0;
  double probe_accuracy = 0;        // student (or baseline) backbone
  double teacher_probe_accuracy = 0;  // stage-1 teacher backbone, 0 for baseline
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::string to_json() const;
};

// Runs the full desk experiment per split: Stage-1 teacher, Stage-2 student,
// probes for both, plus an EMA baseline at the total budget.
SweepReport allocation_sweep(const AllocationPlan& plan);

}  // namespace salt
