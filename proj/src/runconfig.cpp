#include "salt/runconfig.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace salt {

using nlohmann::ordered_json;

namespace {

ordered_json multiblock_json(const MultiBlockParams& p) {
  ordered_json j;
  j["short_scale"] = p.short_scale;
  j["long_scale"] = p.long_scale;
  j["temporal_scale"] = p.temporal_scale;
  j["aspect_lo"] = p.aspect_lo;
  j["aspect_hi"] = p.aspect_hi;
  j["short_block_count"] = p.short_block_count;
  j["long_block_count"] = p.long_block_count;
  return j;
}

MultiBlockParams multiblock_from(const ordered_json& j) {
  MultiBlockParams p;
  for (const auto& [key, value] : j.items()) {
    if (key == "short_scale") p.short_scale = value.get<double>();
    else if (key == "long_scale") p.long_scale = value.get<double>();
    else if (key == "temporal_scale") p.temporal_scale = value.get<double>();
    else if (key == "aspect_lo") p.aspect_lo = value.get<double>();
    else if (key == "aspect_hi") p.aspect_hi = value.get<double>();
    else if (key == "short_block_count") p.short_block_count = value.get<int>();
    else if (key == "long_block_count") p.long_block_count = value.get<int>();
    else fail(ErrorKind::Config, "unknown multiblock key '", key, "'");
  }
  return p;
}

ordered_json ema_json(const EmaSchedule& e) {
  ordered_json j;
  j["start_momentum"] = e.start_momentum;
  j["end_momentum"] = e.end_momentum;
  j["total_steps"] = e.total_steps;
  return j;
}

EmaSchedule ema_from(const ordered_json& j) {
  EmaSchedule e;
  for (const auto& [key, value] : j.items()) {
    if (key == "start_momentum") e.start_momentum = value.get<double>();
    else if (key == "end_momentum") e.end_momentum = value.get<double>();
    else if (key == "total_steps") e.total_steps = value.get<int64_t>();
    else fail(ErrorKind::Config, "unknown ema key '", key, "'");
  }
  return e;
}

ordered_json train_json(const TrainSection& t) {
  ordered_json j;
  j["stage"] = t.stage;
  j["teacher_checkpoint"] = t.teacher_checkpoint;
  j["teacher_steps"] = t.teacher_steps;
  j["student_steps"] = t.student_steps;
  j["total_budget"] = t.total_budget;
  j["batch_size"] = t.batch_size;
  j["masking"] = t.masking;
  j["multiblock"] = multiblock_json(t.multiblock);
  j["tube_ratio"] = t.tube_ratio;
  j["tube_ratio2"] = t.tube_ratio2;
  j["causal_ratio"] = t.causal_ratio;
  j["ema"] = ema_json(t.ema);
  return j;
}

TrainSection train_from(const ordered_json& j) {
  TrainSection t;
  for (const auto& [key, value] : j.items()) {
    if (key == "stage") t.stage = value.get<std::string>();
    else if (key == "teacher_checkpoint") t.teacher_checkpoint = value.get<std::string>();
    else if (key == "teacher_steps") t.teacher_steps = value.get<int64_t>();
    else if (key == "student_steps") t.student_steps = value.get<int64_t>();
    else if (key == "total_budget") t.total_budget = value.get<int64_t>();
    else if (key == "batch_size") t.batch_size = value.get<int64_t>();
    else if (key == "masking") t.masking = value.get<std::string>();
    else if (key == "multiblock") t.multiblock = multiblock_from(value);
    else if (key == "tube_ratio") t.tube_ratio = value.get<double>();
    else if (key == "tube_ratio2") t.tube_ratio2 = value.get<double>();
    else if (key == "causal_ratio") t.causal_ratio = value.get<double>();
    else if (key == "ema") t.ema = ema_from(value);
    else fail(ErrorKind::Config, "unknown train key '", key, "'");
  }
  return t;
}

ordered_json probe_json(const ProbeConfig& p) {
  ordered_json j;
  j["learning_rates"] = p.learning_rates;
  j["weight_decays"] = p.weight_decays;
  j["epochs"] = p.epochs;
  j["batch_size"] = p.batch_size;
  j["max_train_clips"] = p.max_train_clips;
  j["seed"] = p.seed;
  return j;
}

ProbeConfig probe_from(const ordered_json& j) {
  ProbeConfig p;
  for (const auto& [key, value] : j.items()) {
    if (key == "learning_rates") p.learning_rates = value.get<std::vector<double>>();
    else if (key == "weight_decays") p.weight_decays = value.get<std::vector<double>>();
    else if (key == "epochs") p.epochs = value.get<int>();
    else if (key == "batch_size") p.batch_size = value.get<int64_t>();
    else if (key == "max_train_clips") p.max_train_clips = value.get<int64_t>();
    else if (key == "seed") p.seed = value.get<uint64_t>();
    else fail(ErrorKind::Config, "unknown probe key '", key, "'");
  }
  return p;
}

ordered_json surprise_json(const SurpriseConfig& s) {
  ordered_json j;
  j["context"] = s.context;
  j["future"] = s.future;
  j["stride"] = s.stride;
  j["aggregation"] = s.aggregation;
  return j;
}

SurpriseConfig surprise_from(const ordered_json& j) {
  SurpriseConfig s;
  for (const auto& [key, value] : j.items()) {
    if (key == "context") s.context = value.get<int>();
    else if (key == "future") s.future = value.get<int>();
    else if (key == "stride") s.stride = value.get<int>();
    else if (key == "aggregation") s.aggregation = value.get<std::string>();
    else fail(ErrorKind::Config, "unknown surprise key '", key, "'");
  }
  return s;
}

}  // namespace

std::string RunConfig::to_json() const {
  ordered_json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["dataset_dir"] = dataset_dir;
  j["force"] = force;
  j["dataset"] = ordered_json::parse(dataset.to_json());
  j["model"] = ordered_json::parse(model.to_json());
  j["optim"] = ordered_json::parse(optim.to_json());
  j["train"] = train_json(train);
  j["probe"] = probe_json(probe);
  j["surprise"] = surprise_json(surprise);
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, "run config is not valid JSON: ", e.what());
  }
  check(j.is_object(), ErrorKind::Config, "run config must be a JSON object");

  RunConfig rc;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") rc.seed = value.get<uint64_t>();
      else if (key == "out_dir") rc.out_dir = value.get<std::string>();
      else if (key == "dataset_dir") rc.dataset_dir = value.get<std::string>();
      else if (key == "force") rc.force = value.get<bool>();
      else if (key == "dataset") {
        rc.dataset = DatasetSpec::from_json(value.dump());
        rc.has_dataset = true;
      } else if (key == "model") {
        rc.model = value.is_string() ? registry_config(value.get<std::string>())
                                     : ModelConfig::from_json(value.dump());
        rc.has_model = true;
      } else if (key == "optim") {
        rc.optim = OptimConfig::from_json(value.dump());
        rc.has_optim = true;
      } else if (key == "train") {
        rc.train = train_from(value);
        rc.has_train = true;
      } else if (key == "probe") {
        rc.probe = probe_from(value);
      } else if (key == "surprise") {
        rc.surprise = surprise_from(value);
      } else {
        fail(ErrorKind::Config, "unknown run config key '", key, "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, "run config field has the wrong type: ", e.what());
  }
  return rc;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), ErrorKind::Io, "cannot open run config '", path, "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

TrainPlan RunConfig::plan() const {
  TrainPlan p;
  p.stage = train.stage;
  p.dataset_dir = dataset_dir;
  p.model = model;
  p.optim = optim;
  p.teacher_checkpoint = train.teacher_checkpoint;
  p.teacher_steps = train.teacher_steps;
  p.student_steps = train.student_steps;
  p.total_budget = train.total_budget;
  p.batch_size = train.batch_size;
  p.masking = train.masking;
  p.multiblock = train.multiblock;
  p.tube_ratio = train.tube_ratio;
  p.tube_ratio2 = train.tube_ratio2;
  p.causal_ratio = train.causal_ratio;
  p.ema = train.ema;
  p.seed = seed;
  p.out_dir = out_dir;
  p.force = force;
  return p;
}

void write_config_echo(const std::string& dir, const RunConfig& config) {
  std::filesystem::create_directories(dir);
  const std::string path = dir + "/config.json";
  std::ofstream out(path, std::ios::trunc);
  out << config.to_json() << "\n";
  check(out.good(), ErrorKind::Io, "failed to write ", path);
}

}  // namespace salt

