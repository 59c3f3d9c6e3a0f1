#pragma once

// One JSON document describing a whole run: dataset, model, optimizer,
// train plan, and eval plans. Parsing is strict (unknown keys rejected);
// every command echoes its fully resolved config into the run directory so
// that echo + seed reproduce the artifacts bit for bit.

#include <cstdint>
#include <string>

#include "salt/common.hpp"
#include "salt/evaluation.hpp"
#include "salt/masking.hpp"
#include "salt/models.hpp"
#include "salt/trainers.hpp"
#include "salt/video.hpp"

namespace salt {

// The stage-specific knobs of a TrainPlan; model/optim/seed/out_dir live at
// the top level of the run config and are merged in by plan().
struct TrainSection {
  std::string stage = "stage1";  // stage1 | stage2 | ema_baseline
  std::string teacher_checkpoint;
  int64_t teacher_steps = 0;
  int64_t student_steps = 0;
  int64_t total_budget = 0;
  int64_t batch_size = 32;
  std::string masking = "multiblock";
  MultiBlockParams multiblock;
  double tube_ratio = 0.9;
  double tube_ratio2 = 0.9;
  double causal_ratio = 0.5;
  EmaSchedule ema;
};

struct RunConfig {
  uint64_t seed = 0;
  std::string out_dir;
  std::string dataset_dir;
  bool force = false;

  DatasetSpec dataset;
  ModelConfig model;
  OptimConfig optim;
  TrainSection train;
  ProbeConfig probe;  // seed 0 inherits the run seed at use
  SurpriseConfig surprise;

  // Which sections the parsed document actually carried; to_json always
  // emits every section fully resolved, so an echo re-parses with all set.
  bool has_dataset = false;
  bool has_model = false;
  bool has_optim = false;
  bool has_train = false;

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::string& path);

  // Assembles the TrainPlan for train.stage (not yet validated).
  TrainPlan plan() const;
};

// Writes the resolved echo as <dir>/config.json, creating the directory.
void write_config_echo(const std::string& dir, const RunConfig& config);

}  // namespace salt
