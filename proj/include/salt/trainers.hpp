#pragma once

// Optimizer, schedules, and the three training loops: pixel-reconstruction
// teacher pretraining (stage 1), frozen-teacher latent prediction (stage 2),
// and the EMA/stop-gradient baseline. Every loop is bit-deterministic given
// (plan, seed) and streams one structured record per step.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "salt/common.hpp"
#include "salt/masking.hpp"
#include "salt/models.hpp"
#include "salt/rng.hpp"
#include "salt/tensor.hpp"
#include "salt/video.hpp"

namespace salt {

struct OptimConfig {
  double start_lr = 2e-4;
  double peak_lr = 6.25e-4;
  double final_lr = 1e-6;
  int64_t warmup_steps = 10000;
  int64_t total_steps = 240000;
  double start_wd = 0.04;
  double end_wd = 0.4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double grad_clip = 0.02;

  void validate() const;
  std::string to_json() const;
  static OptimConfig from_json(const std::string& text);
};

// Linear start->peak over the warmup, then cosine peak->final to total_steps.
double lr_at(int64_t step, const OptimConfig& cfg);
// Cosine ramp start_wd -> end_wd over total_steps (monotone nondecreasing).
double wd_at(int64_t step, const OptimConfig& cfg);

struct AdamWState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  int64_t step = 0;  // completed updates

  static AdamWState init(const std::vector<Tensor>& params);
};

// One decoupled-weight-decay update in place. Every param must carry a
// gradient; non-finite gradients abort with diagnostics.
void adamw_step(std::vector<Tensor>& params, AdamWState& state, double lr, double wd,
                const OptimConfig& cfg);

// Global-norm gradient clipping; returns the pre-clip norm.
double clip_gradients(std::vector<Tensor>& params, double max_norm);

// teacher <- momentum * teacher + (1 - momentum) * student, elementwise.
void ema_update(std::vector<Tensor>& teacher, const std::vector<Tensor>& student, double momentum);

struct EmaSchedule {
  double start_momentum = 0.996;
  double end_momentum = 1.0;
  int64_t total_steps = 0;

  void validate() const;
  // Linear ramp reaching end_momentum at the final step.
  double momentum_at(int64_t step) const;
};

struct RunRecord {
  int64_t step = 0;  // 1-based, strictly increasing
  double loss = 0;
  double lr = 0;
  double wd = 0;
  double grad_norm = 0;  // pre-clip global norm
  double flops_cum = 0;

  std::string to_line() const;  // one JSON object, no trailing newline
  static RunRecord from_line(const std::string& line);
};

std::vector<RunRecord> read_run_records(const std::string& path);

struct TrainPlan {
  std::string stage;  // stage1 | stage2 | ema_baseline
  std::string dataset_dir;
  ModelConfig model;
  OptimConfig optim;
  std::string teacher_checkpoint;  // stage2 only
  int64_t teacher_steps = 0;       // stage-1 run length
  int64_t student_steps = 0;       // stage-2 / baseline run length
  int64_t total_budget = 0;        // 0 -> teacher_steps + student_steps
  int64_t batch_size = 32;
  std::string masking = "multiblock";  // multiblock | random_tube | multi_random_tube | causal
  MultiBlockParams multiblock;
  double tube_ratio = 0.9;
  double tube_ratio2 = 0.9;
  double causal_ratio = 0.5;
  EmaSchedule ema;  // baseline only; total_steps 0 -> run length
  uint64_t seed = 0;
  std::string out_dir;
  bool force = false;
  std::function<void(const RunRecord&)> on_record;  // optional live hook, not serialized

  int64_t steps_for_stage() const;
  void validate() const;
};

struct TrainResult {
  std::string final_checkpoint;
  std::vector<std::string> checkpoints;  // cadence saves + final, in order
  std::vector<RunRecord> records;
  std::string records_path;
};

// Checkpoint every max(total/10, 100) steps, plus the final step.
int64_t checkpoint_interval(int64_t total_steps);

TrainResult train_stage1(const TrainPlan& plan);
TrainResult train_stage2(const TrainPlan& plan);
TrainResult train_ema_baseline(const TrainPlan& plan, const EmaSchedule& ema);

}  // namespace salt
