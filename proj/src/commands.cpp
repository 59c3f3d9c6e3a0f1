#include "salt/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "salt/budget.hpp"
#include "salt/checkpoint.hpp"
#include "salt/common.hpp"
#include "salt/evaluation.hpp"
#include "salt/masking.hpp"
#include "salt/models.hpp"
#include "salt/rng.hpp"
#include "salt/runconfig.hpp"
#include "salt/trainers.hpp"
#include "salt/video.hpp"

namespace salt {
namespace {

using nlohmann::ordered_json;

const char* kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Config: return "config";
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Contract: return "contract";
    case ErrorKind::Degenerate: return "degenerate";
    case ErrorKind::Io: return "io";
    case ErrorKind::Corruption: return "corruption";
    case ErrorKind::Numeric: return "numeric";
  }
  return "unknown";
}

int exit_code(ErrorKind k) {
  return (k == ErrorKind::Usage || k == ErrorKind::Config) ? 2 : 1;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), ErrorKind::Io, "cannot open '", path, "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text << "\n";
  check(out.good(), ErrorKind::Io, "failed to write ", path);
}

void refuse_collision(const std::string& path, bool force) {
  check(force || !std::filesystem::exists(path), ErrorKind::Io, path,
        " already exists; pass --force to overwrite");
}

// A model is either a registry name or a path to a ModelConfig JSON file.
ModelConfig resolve_model(const std::string& name) {
  for (const std::string& known : registry_names())
    if (known == name) return registry_config(name);
  if (std::filesystem::exists(name)) return ModelConfig::from_json(read_text(name));
  std::string known;
  for (const std::string& n : registry_names()) known += " " + n;
  fail(ErrorKind::Config, "'", name, "' is neither a registry model (", known,
       ") nor a config file");
}

bool has_prefix(const Checkpoint& ckpt, const std::string& prefix) {
  for (const auto& [name, t] : ckpt.tensors)
    if (name.rfind(prefix, 0) == 0) return true;
  return false;
}

EncoderParams encoder_from(const Checkpoint& ckpt, const ModelConfig& cfg,
                           const std::string& prefix) {
  Rng scratch(0);
  EncoderParams enc = make_encoder<float>(cfg, scratch);
  load_into(select_prefix(ckpt, prefix), enc);
  return enc;
}

PredictorParams predictor_from(const Checkpoint& ckpt, const ModelConfig& cfg) {
  Rng scratch(0);
  PredictorParams pred = make_predictor<float>(cfg, scratch);
  load_into(select_prefix(ckpt, "predictor."), pred);
  return pred;
}

uint64_t probe_seed(const RunConfig& rc) { return rc.probe.seed ? rc.probe.seed : rc.seed; }

// ---- gen-data ----------------------------------------------------------------

struct GenDataOpts {
  std::string config, out, label = "motion", violation = "teleport";
  int64_t clips = 0, pairs = 0;
  int frames = 0, height = 0, width = 0, channels = 0;
  int tubelet_t = 0, tubelet_h = 0, tubelet_w = 0;
  double train_fraction = 0, noise = 0;
  uint64_t seed = 0;
  bool force = false;
  CLI::Option *k_clips = nullptr, *k_frames = nullptr, *k_height = nullptr, *k_width = nullptr,
              *k_channels = nullptr, *k_tt = nullptr, *k_th = nullptr, *k_tw = nullptr,
              *k_label = nullptr, *k_frac = nullptr, *k_noise = nullptr, *k_seed = nullptr;
};

Violation violation_of(const std::string& name) {
  if (name == "teleport") return Violation::kTeleport;
  if (name == "reversal") return Violation::kReversal;
  if (name == "swap") return Violation::kSwap;
  fail(ErrorKind::Config, "unknown violation '", name, "' (teleport | reversal | swap)");
}

void run_gen_data(const GenDataOpts& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  DatasetSpec spec = rc.dataset;
  if (o.k_clips->count()) spec.clip_count = o.clips;
  if (o.k_frames->count()) spec.frames = o.frames;
  if (o.k_height->count()) spec.height = o.height;
  if (o.k_width->count()) spec.width = o.width;
  if (o.k_channels->count()) spec.channels = o.channels;
  if (o.k_tt->count()) spec.tubelet_t = o.tubelet_t;
  if (o.k_th->count()) spec.tubelet_h = o.tubelet_h;
  if (o.k_tw->count()) spec.tubelet_w = o.tubelet_w;
  if (o.k_frac->count()) spec.train_fraction = o.train_fraction;
  if (o.k_noise->count()) spec.noise_sigma = o.noise;
  if (o.k_seed->count()) spec.seed = o.seed;
  if (o.k_label->count()) {
    check(o.label == "motion" || o.label == "shape", ErrorKind::Config, "unknown label kind '",
          o.label, "' (motion | shape)");
    spec.label_kind = o.label == "motion" ? LabelKind::kMotion : LabelKind::kShape;
  }

  const bool force = o.force || rc.force;
  const Dataset ds = o.pairs > 0
                         ? generate_pairs(spec, o.pairs, violation_of(o.violation), o.out, force)
                         : generate_dataset(spec, o.out, force);
  std::printf("dataset=%s clips=%zu train=%zu eval=%zu pairs=%s\n", o.out.c_str(),
              ds.clips.size(), ds.train_ids.size(), ds.eval_ids.size(),
              ds.pairs ? "yes" : "no");
}

// ---- train-teacher / train-student / train-ema ---------------------------------

struct TrainOpts {
  std::string config, data, out, model, masking, teacher;
  int64_t steps = 0, batch = 0;
  uint64_t seed = 0;
  double peak_lr = 0, momentum_start = 0, momentum_end = 0;
  bool force = false;
  CLI::Option *k_data = nullptr, *k_out = nullptr, *k_model = nullptr, *k_steps = nullptr,
              *k_batch = nullptr, *k_seed = nullptr, *k_masking = nullptr, *k_peak = nullptr,
              *k_mstart = nullptr, *k_mend = nullptr, *k_teacher = nullptr;
};

void add_train_options(CLI::App* cmd, const std::shared_ptr<TrainOpts>& o) {
  cmd->add_option("--config", o->config, "run config JSON file");
  o->k_data = cmd->add_option("--data", o->data, "dataset directory");
  o->k_out = cmd->add_option("--out", o->out, "run output directory");
  o->k_model = cmd->add_option("--model", o->model, "registry name or model config file");
  o->k_steps = cmd->add_option("--steps", o->steps, "optimization steps for this run");
  o->k_batch = cmd->add_option("--batch", o->batch, "clips per step");
  o->k_seed = cmd->add_option("--seed", o->seed, "root seed");
  o->k_masking = cmd->add_option("--masking", o->masking,
                                 "multiblock | random_tube | multi_random_tube | causal");
  o->k_peak = cmd->add_option("--peak-lr", o->peak_lr, "peak learning rate");
  cmd->add_flag("--force", o->force, "overwrite an existing run directory");
}

void run_train(const std::string& stage, const TrainOpts& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  rc.train.stage = stage;
  if (o.k_data->count()) rc.dataset_dir = o.data;
  if (o.k_out->count()) rc.out_dir = o.out;
  if (o.k_model->count()) {
    rc.model = resolve_model(o.model);
    rc.has_model = true;
  }
  if (o.k_seed->count()) rc.seed = o.seed;
  if (o.k_batch->count()) rc.train.batch_size = o.batch;
  if (o.k_masking->count()) rc.train.masking = o.masking;
  if (o.force) rc.force = true;
  if (o.k_teacher && o.k_teacher->count()) rc.train.teacher_checkpoint = o.teacher;
  if (o.k_steps->count()) {
    if (stage == "stage1") rc.train.teacher_steps = o.steps;
    else rc.train.student_steps = o.steps;
  }
  if (o.k_mstart && o.k_mstart->count()) rc.train.ema.start_momentum = o.momentum_start;
  if (o.k_mend && o.k_mend->count()) rc.train.ema.end_momentum = o.momentum_end;

  if (stage == "stage2")
    check(!rc.train.teacher_checkpoint.empty(), ErrorKind::Config,
          "train-student requires --teacher (path to the stage-1 teacher checkpoint)");

  // without an explicit optimizer section, fit the schedule to this run
  const int64_t run_steps =
      stage == "stage1" ? rc.train.teacher_steps : rc.train.student_steps;
  if (!rc.has_optim) {
    rc.optim.total_steps = run_steps;
    rc.optim.warmup_steps = std::max<int64_t>(run_steps / 10, 0);
  }
  if (o.k_peak->count()) rc.optim.peak_lr = o.peak_lr;

  TrainPlan plan = rc.plan();
  const int64_t every = std::max<int64_t>(run_steps / 10, 1);
  plan.on_record = [every, run_steps](const RunRecord& r) {
    if (r.step == 1 || r.step == run_steps || r.step % every == 0) {
      std::printf("step=%lld loss=%.6f lr=%.4g wd=%.4g grad_norm=%.4g flops=%.4e\n",
                  static_cast<long long>(r.step), r.loss, r.lr, r.wd, r.grad_norm, r.flops_cum);
      std::fflush(stdout);
    }
  };

  TrainResult result;
  if (stage == "stage1") result = train_stage1(plan);
  else if (stage == "stage2") result = train_stage2(plan);
  else result = train_ema_baseline(plan, plan.ema);

  write_config_echo(plan.out_dir, rc);
  std::printf("final_checkpoint=%s\n", result.final_checkpoint.c_str());
  std::printf("final_loss=%.6f\n", result.records.back().loss);
  std::printf("records=%s\n", result.records_path.c_str());
}

// ---- probe ---------------------------------------------------------------------

struct ProbeOpts {
  std::string config, checkpoint, data, out;
  int64_t step = -1, batch = 0, max_train = 0;
  int epochs = 0;
  std::vector<double> lrs, wds;
  uint64_t seed = 0;
  bool force = false;
  CLI::Option *k_epochs = nullptr, *k_batch = nullptr, *k_max = nullptr, *k_lrs = nullptr,
              *k_wds = nullptr, *k_seed = nullptr;
};

void run_probe(const ProbeOpts& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (o.k_seed->count()) rc.seed = o.seed;
  if (o.k_epochs->count()) rc.probe.epochs = o.epochs;
  if (o.k_batch->count()) rc.probe.batch_size = o.batch;
  if (o.k_max->count()) rc.probe.max_train_clips = o.max_train;
  if (o.k_lrs->count()) rc.probe.learning_rates = o.lrs;
  if (o.k_wds->count()) rc.probe.weight_decays = o.wds;
  if (o.force) rc.force = true;

  ProbeConfig pcfg = rc.probe;
  pcfg.seed = probe_seed(rc);

  const Checkpoint ckpt = read_checkpoint(o.checkpoint);
  const EncoderParams backbone = encoder_from(ckpt, ckpt.config, "encoder.");
  const Dataset dataset = open_dataset(o.data);
  const ProbeResult result = train_probe(backbone, ckpt.config, dataset, pcfg);

  std::printf("accuracy=%.6f correct=%lld total=%lld lr=%g wd=%g\n", result.accuracy,
              static_cast<long long>(result.correct), static_cast<long long>(result.total),
              result.lr, result.wd);

  if (!o.out.empty()) {
    char name[64];
    if (o.step >= 0)
      std::snprintf(name, sizeof(name), "probe-step-%06lld.json",
                    static_cast<long long>(o.step));
    else
      std::snprintf(name, sizeof(name), "probe.json");
    std::filesystem::create_directories(o.out);
    const std::string path = o.out + "/" + name;
    refuse_collision(path, rc.force);
    ordered_json j = ordered_json::parse(result.to_json());
    if (o.step >= 0) j["step"] = o.step;
    write_text(path, j.dump(2));

    rc.out_dir = o.out;
    rc.dataset_dir = o.data;
    rc.model = ckpt.config;
    rc.probe = pcfg;
    write_config_echo(o.out, rc);
    std::printf("report=%s\n", path.c_str());
  }
}

// ---- surprise -------------------------------------------------------------------

struct SurpriseOpts {
  std::string config, checkpoint, teacher, data, out, agg;
  int64_t clip = -1;
  int context = 0, future = 0, stride = 0;
  bool force = false;
  CLI::Option *k_ctx = nullptr, *k_fut = nullptr, *k_stride = nullptr, *k_agg = nullptr;
};

void run_surprise(const SurpriseOpts& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (o.k_ctx->count()) rc.surprise.context = o.context;
  if (o.k_fut->count()) rc.surprise.future = o.future;
  if (o.k_stride->count()) rc.surprise.stride = o.stride;
  if (o.k_agg->count()) rc.surprise.aggregation = o.agg;
  if (o.force) rc.force = true;

  const Checkpoint ckpt = read_checkpoint(o.checkpoint);
  const ModelConfig cfg = ckpt.config;
  const EncoderParams student = encoder_from(ckpt, cfg, "encoder.");
  const PredictorParams predictor = predictor_from(ckpt, cfg);

  EncoderParams teacher;
  if (!o.teacher.empty()) {
    const Checkpoint tc = read_checkpoint(o.teacher);
    const ModelConfig& t = tc.config;
    check(t.grid_t == cfg.grid_t && t.grid_h == cfg.grid_h && t.grid_w == cfg.grid_w &&
              t.tubelet_t == cfg.tubelet_t && t.tubelet_h == cfg.tubelet_h &&
              t.tubelet_w == cfg.tubelet_w && t.channels == cfg.channels,
          ErrorKind::Config, "teacher checkpoint geometry differs from the student's");
    teacher = encoder_from(tc, t, "encoder.");
  } else if (has_prefix(ckpt, "teacher.")) {
    teacher = encoder_from(ckpt, cfg, "teacher.");
  } else {
    fail(ErrorKind::Config,
         "no --teacher given and the checkpoint has no embedded teacher collection");
  }

  const Dataset dataset = open_dataset(o.data);

  if (o.clip >= 0) {
    const SurpriseSeries series =
        surprise_series(student, predictor, teacher, load_clip(dataset, o.clip), cfg, rc.surprise);
    for (size_t i = 0; i < series.scores.size(); ++i)
      std::printf("window=%d score=%.6f\n", series.window_starts[i], series.scores[i]);
    std::printf("aggregate=%.6f windows=%zu\n", series.aggregate, series.scores.size());
    if (!o.out.empty()) {
      std::filesystem::create_directories(o.out);
      const std::string path = o.out + "/surprise.json";
      refuse_collision(path, rc.force);
      ordered_json j;
      j["clip"] = o.clip;
      j["window_starts"] = series.window_starts;
      j["scores"] = series.scores;
      j["aggregate"] = series.aggregate;
      write_text(path, j.dump(2));
      rc.out_dir = o.out;
      rc.dataset_dir = o.data;
      rc.model = cfg;
      write_config_echo(o.out, rc);
      std::printf("report=%s\n", path.c_str());
    }
    return;
  }

  const PairAccuracyResult result =
      pair_relative_accuracy(student, predictor, teacher, dataset, cfg, rc.surprise);
  std::printf("pairs=%lld correct=%lld accuracy=%.6f\n", static_cast<long long>(result.total),
              static_cast<long long>(result.correct), result.accuracy);
  if (!o.out.empty()) {
    std::filesystem::create_directories(o.out);
    const std::string path = o.out + "/pair-surprise.json";
    refuse_collision(path, rc.force);
    ordered_json rows = ordered_json::array();
    for (const PairScore& s : result.scores) {
      ordered_json r;
      r["plausible"] = s.plausible;
      r["implausible"] = s.implausible;
      r["correct"] = s.implausible > s.plausible;
      rows.push_back(std::move(r));
    }
    ordered_json j;
    j["pairs"] = result.total;
    j["correct"] = result.correct;
    j["accuracy"] = result.accuracy;
    j["scores"] = std::move(rows);
    write_text(path, j.dump(2));
    rc.out_dir = o.out;
    rc.dataset_dir = o.data;
    rc.model = cfg;
    write_config_echo(o.out, rc);
    std::printf("report=%s\n", path.c_str());
  }
}

// ---- rankme ---------------------------------------------------------------------

struct RankmeOpts {
  std::string checkpoint, data, split = "eval", out;
  bool force = false;
};

void run_rankme(const RankmeOpts& o) {
  const Checkpoint ckpt = read_checkpoint(o.checkpoint);
  const EncoderParams backbone = encoder_from(ckpt, ckpt.config, "encoder.");
  const Dataset dataset = open_dataset(o.data);

  std::vector<int64_t> indices;
  if (o.split == "train") indices = dataset.train_ids;
  else if (o.split == "eval") indices = dataset.eval_ids;
  else if (o.split == "all")
    for (size_t i = 0; i < dataset.clips.size(); ++i) indices.push_back(static_cast<int64_t>(i));
  else fail(ErrorKind::Config, "unknown split '", o.split, "' (train | eval | all)");

  const Tensor pooled = pooled_embeddings(backbone, ckpt.config, dataset, indices);
  const double value = rankme(pooled);
  std::printf("rankme=%.6f clips=%lld width=%lld\n", value,
              static_cast<long long>(pooled.rows()), static_cast<long long>(pooled.cols()));

  if (!o.out.empty()) {
    std::filesystem::create_directories(o.out);
    const std::string path = o.out + "/rankme.json";
    refuse_collision(path, o.force);
    ordered_json j;
    j["rankme"] = value;
    j["clips"] = pooled.rows();
    j["width"] = pooled.cols();
    j["split"] = o.split;
    write_text(path, j.dump(2));
    std::printf("report=%s\n", path.c_str());
  }
}

// ---- flops ----------------------------------------------------------------------

struct FlopsOpts {
  std::string preset, model, stage = "stage2";
  int64_t steps = 0, batch = 32;
  int masks = 2;
  double mask_ratio = 0.9;
};

void print_breakdown(const FlopsSpec& spec) {
  const FlopsBreakdown b = flops_breakdown(spec);
  if (spec.n_encoder > 0)
    std::printf("encoder params=%.6e tokens=%.6e flops=%.6e\n", spec.n_encoder, spec.d_encoder,
                b.encoder);
  if (spec.n_predictor > 0)
    std::printf("predictor params=%.6e tokens=%.6e flops=%.6e\n", spec.n_predictor,
                spec.d_predictor, b.predictor);
  if (spec.n_decoder > 0)
    std::printf("decoder params=%.6e tokens=%.6e flops=%.6e\n", spec.n_decoder, spec.d_decoder,
                b.decoder);
  if (spec.n_teacher > 0)
    std::printf("teacher params=%.6e tokens=%.6e flops=%.6e\n", spec.n_teacher, spec.d_teacher,
                b.teacher);
  std::printf("total=%.6e\n", b.total());
}

void run_flops(const FlopsOpts& o) {
  if (!o.preset.empty()) {
    const FlopsPreset p = flops_preset(o.preset);
    std::printf("preset=%s\n", p.name.c_str());
    print_breakdown(p.spec);
    const double derived = flops_breakdown(p.spec).total();
    std::printf("reference=%.6e delta=%+.2f%%\n", p.reference_total,
                100.0 * (derived - p.reference_total) / p.reference_total);
    return;
  }
  check(!o.model.empty(), ErrorKind::Config, "flops needs --preset or --model");
  check(o.steps >= 1, ErrorKind::Config, "--steps must be at least 1");
  const ModelConfig cfg = resolve_model(o.model);
  const int64_t grid = cfg.tokens();

  FlopsSpec spec;
  spec.n_encoder = static_cast<double>(encoder_parameter_count(cfg));
  spec.d_encoder =
      token_count(grid, o.mask_ratio, TokenRole::kEncoder, o.batch, o.steps, o.masks);
  if (o.stage == "stage1") {
    spec.n_decoder = static_cast<double>(decoder_parameter_count(cfg));
    spec.d_decoder =
        token_count(grid, o.mask_ratio, TokenRole::kDecoder, o.batch, o.steps, o.masks);
  } else if (o.stage == "stage2" || o.stage == "ema_baseline") {
    spec.n_predictor = static_cast<double>(predictor_parameter_count(cfg));
    spec.d_predictor =
        token_count(grid, o.mask_ratio, TokenRole::kPredictor, o.batch, o.steps, o.masks);
    spec.n_teacher = spec.n_encoder;  // one shared architecture at desk scale
    spec.d_teacher =
        token_count(grid, o.mask_ratio, TokenRole::kTeacherForward, o.batch, o.steps, o.masks);
  } else {
    fail(ErrorKind::Config, "unknown stage '", o.stage, "' (stage1 | stage2 | ema_baseline)");
  }
  std::printf("model=%s stage=%s steps=%lld batch=%lld\n", cfg.name.c_str(), o.stage.c_str(),
              static_cast<long long>(o.steps), static_cast<long long>(o.batch));
  print_breakdown(spec);
}

// ---- sweep ----------------------------------------------------------------------

struct SweepOpts {
  std::string config, data, out, model, splits;
  int64_t total_steps = 0, batch = 0, max_train = 0;
  int probe_epochs = 0;
  std::vector<double> probe_lrs;
  double peak_lr = 0;
  uint64_t seed = 0;
  bool no_ema = false, force = false;
  CLI::Option *k_total = nullptr, *k_batch = nullptr, *k_model = nullptr, *k_peak = nullptr,
              *k_epochs = nullptr, *k_lrs = nullptr, *k_max = nullptr, *k_seed = nullptr;
};

std::vector<std::pair<int64_t, int64_t>> parse_splits(const std::string& text) {
  std::vector<std::pair<int64_t, int64_t>> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const size_t colon = part.find(':');
    check(colon != std::string::npos, ErrorKind::Config, "split '", part,
          "' must look like teacher:student");
    try {
      out.emplace_back(std::stoll(part.substr(0, colon)), std::stoll(part.substr(colon + 1)));
    } catch (const std::exception&) {
      fail(ErrorKind::Config, "split '", part, "' is not a pair of integers");
    }
  }
  check(!out.empty(), ErrorKind::Config, "--splits given but empty");
  return out;
}

void run_sweep(const SweepOpts& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (o.k_seed->count()) rc.seed = o.seed;
  if (o.k_model->count()) {
    rc.model = resolve_model(o.model);
    rc.has_model = true;
  }
  if (o.k_peak->count()) rc.optim.peak_lr = o.peak_lr;
  if (o.k_epochs->count()) rc.probe.epochs = o.probe_epochs;
  if (o.k_lrs->count()) rc.probe.learning_rates = o.probe_lrs;
  if (o.k_max->count()) rc.probe.max_train_clips = o.max_train;

  AllocationPlan plan;
  plan.dataset_dir = o.data.empty() ? rc.dataset_dir : o.data;
  plan.model = rc.model;
  plan.total_steps = o.k_total->count() ? o.total_steps : rc.train.total_budget;
  plan.splits = o.splits.empty() ? default_splits(plan.total_steps) : parse_splits(o.splits);
  if (o.k_batch->count()) plan.batch_size = o.batch;
  else if (rc.has_train) plan.batch_size = rc.train.batch_size;
  plan.optim = rc.optim;
  plan.probe = rc.probe;
  plan.probe.seed = probe_seed(rc);
  plan.seed = rc.seed;
  plan.out_dir = o.out.empty() ? rc.out_dir : o.out;
  plan.force = o.force || rc.force;
  plan.include_ema_baseline = !o.no_ema;

  const SweepReport report = allocation_sweep(plan);
  for (const SweepRow& r : report.rows)
    std::printf(
        "tag=%s teacher_steps=%lld student_steps=%lld total_flops=%.6e final_loss=%.6f "
        "probe=%.6f teacher_probe=%.6f\n",
        r.tag.c_str(), static_cast<long long>(r.teacher_steps),
        static_cast<long long>(r.student_steps), r.total_flops, r.final_loss, r.probe_accuracy,
        r.teacher_probe_accuracy);
  rc.out_dir = plan.out_dir;
  rc.dataset_dir = plan.dataset_dir;
  rc.train.total_budget = plan.total_steps;
  write_config_echo(plan.out_dir, rc);
  std::printf("report=%s/sweep.json\n", plan.out_dir.c_str());
}

// ---- correlate ------------------------------------------------------------------

struct CorrelateOpts {
  std::string points, run, out;
  bool force = false;
};

void run_correlate(const CorrelateOpts& o) {
  check(o.points.empty() != o.run.empty(), ErrorKind::Config,
        "correlate needs exactly one of --points or --run");

  std::vector<double> losses, accuracies;
  std::vector<int64_t> steps;

  if (!o.points.empty()) {
    std::ifstream in(o.points);
    check(in.good(), ErrorKind::Io, "cannot open '", o.points, "'");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      ordered_json j;
      try {
        j = ordered_json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Corruption, "bad points line: ", e.what());
      }
      double loss = 0, acc = 0;
      bool has_loss = false, has_acc = false;
      for (const auto& [key, value] : j.items()) {
        if (key == "loss") {
          loss = value.get<double>();
          has_loss = true;
        } else if (key == "accuracy") {
          acc = value.get<double>();
          has_acc = true;
        } else if (key == "step") {
          // annotation only
        } else {
          fail(ErrorKind::Corruption, "unknown points key '", key, "'");
        }
      }
      check(has_loss && has_acc, ErrorKind::Corruption,
            "points line needs both loss and accuracy");
      losses.push_back(loss);
      accuracies.push_back(acc);
    }
  } else {
    const std::vector<RunRecord> records = read_run_records(o.run + "/records.jsonl");
    std::map<int64_t, double> loss_at;
    for (const RunRecord& r : records) loss_at[r.step] = r.loss;

    std::vector<std::string> files;
    for (const auto& entry : std::filesystem::directory_iterator(o.run)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("probe-step-", 0) == 0 && name.size() > 5 &&
          name.substr(name.size() - 5) == ".json")
        files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    check(!files.empty(), ErrorKind::Config, "no probe-step-*.json files under ", o.run);
    for (const std::string& path : files) {
      ordered_json j;
      try {
        j = ordered_json::parse(read_text(path));
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Corruption, path, ": ", e.what());
      }
      check(j.contains("step") && j.contains("accuracy"), ErrorKind::Corruption, path,
            " lacks step/accuracy");
      const int64_t step = j["step"].get<int64_t>();
      const auto it = loss_at.find(step);
      check(it != loss_at.end(), ErrorKind::Corruption, "no training record at step ", step);
      steps.push_back(step);
      losses.push_back(it->second);
      accuracies.push_back(j["accuracy"].get<double>());
    }
  }

  check(losses.size() >= 3, ErrorKind::Config, "correlation needs at least 3 points, got ",
        losses.size());
  const LinearFit fit = r2_fit(losses, accuracies);
  std::printf("n=%zu slope=%.6g intercept=%.6g r2=%.6f\n", losses.size(), fit.slope,
              fit.intercept, fit.r2);

  if (!o.out.empty()) {
    refuse_collision(o.out, o.force);
    ordered_json pts = ordered_json::array();
    for (size_t i = 0; i < losses.size(); ++i) {
      ordered_json p;
      if (!steps.empty()) p["step"] = steps[i];
      p["loss"] = losses[i];
      p["accuracy"] = accuracies[i];
      pts.push_back(std::move(p));
    }
    ordered_json j;
    j["n"] = losses.size();
    j["slope"] = fit.slope;
    j["intercept"] = fit.intercept;
    j["r2"] = fit.r2;
    j["points"] = std::move(pts);
    write_text(o.out, j.dump(2));
    std::printf("report=%s\n", o.out.c_str());
  }
}

// ---- mask-stats -----------------------------------------------------------------

struct MaskStatsOpts {
  std::string strategy = "multiblock";
  int grid_t = 8, grid_h = 8, grid_w = 8;
  int64_t samples = 10000;
  uint64_t seed = 0;
  double tube_ratio = 0.9, tube_ratio2 = 0.9, causal_ratio = 0.5;
};

MaskSpec union_of(const MaskSpec& a, const MaskSpec& b) {
  MaskSpec u = a;
  u.strategy = a.strategy + "-union";
  int64_t count = 0;
  for (size_t i = 0; i < u.masked.size(); ++i) {
    u.masked[i] = a.masked[i] || b.masked[i];
    count += u.masked[i];
  }
  u.achieved_ratio = static_cast<double>(count) / static_cast<double>(u.masked.size());
  return u;
}

void run_mask_stats(const MaskStatsOpts& o) {
  const GridDims grid{o.grid_t, o.grid_h, o.grid_w};
  MultiBlockParams mb;
  Rng rng(o.seed);

  auto sampler = [&](Rng& child) -> MaskSpec {
    if (o.strategy == "multiblock") {
      const auto [a, b] = sample_multiblock(grid, mb, child);
      return union_of(a, b);
    }
    if (o.strategy == "random_tube") return sample_random_tube(grid, o.tube_ratio, child);
    if (o.strategy == "multi_random_tube") {
      const auto [a, b] = sample_multi_random_tube(grid, o.tube_ratio, o.tube_ratio2, child);
      return union_of(a, b);
    }
    if (o.strategy == "causal") return sample_causal(grid, o.causal_ratio, child);
    fail(ErrorKind::Config, "unknown strategy '", o.strategy,
         "' (multiblock | random_tube | multi_random_tube | causal)");
  };

  const MaskStats stats =
      collect_mask_stats(grid, o.samples, rng, [&](Rng& child) { return sampler(child); });
  double freq_min = 1.0, freq_max = 0.0;
  for (double f : stats.frequency) {
    freq_min = std::min(freq_min, f);
    freq_max = std::max(freq_max, f);
  }
  std::printf(
      "strategy=%s grid=%dx%dx%d samples=%lld ratio_mean=%.6f ratio_stddev=%.6f "
      "freq_min=%.6f freq_max=%.6f\n",
      o.strategy.c_str(), o.grid_t, o.grid_h, o.grid_w, static_cast<long long>(stats.samples),
      stats.ratio_mean, stats.ratio_stddev, freq_min, freq_max);
}

}  // namespace

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"synthetic-video masked-prediction training and evaluation toolkit"};
  app.require_subcommand(1);

  auto gen = std::make_shared<GenDataOpts>();
  {
    CLI::App* cmd = app.add_subcommand("gen-data", "render a synthetic clip corpus");
    cmd->add_option("--out", gen->out, "dataset directory")->required();
    cmd->add_option("--config", gen->config, "run config JSON with a dataset section");
    gen->k_clips = cmd->add_option("--clips", gen->clips, "clip count");
    gen->k_frames = cmd->add_option("--frames", gen->frames, "frames per clip");
    gen->k_height = cmd->add_option("--height", gen->height, "frame height");
    gen->k_width = cmd->add_option("--width", gen->width, "frame width");
    gen->k_channels = cmd->add_option("--channels", gen->channels, "channels");
    gen->k_tt = cmd->add_option("--tubelet-t", gen->tubelet_t, "tubelet frames");
    gen->k_th = cmd->add_option("--tubelet-h", gen->tubelet_h, "tubelet height");
    gen->k_tw = cmd->add_option("--tubelet-w", gen->tubelet_w, "tubelet width");
    gen->k_label = cmd->add_option("--label", gen->label, "label kind: motion | shape");
    gen->k_frac = cmd->add_option("--train-fraction", gen->train_fraction, "train split");
    gen->k_noise = cmd->add_option("--noise", gen->noise, "pixel noise sigma");
    gen->k_seed = cmd->add_option("--seed", gen->seed, "dataset seed");
    cmd->add_option("--pairs", gen->pairs, "emit N plausible/implausible pairs instead");
    cmd->add_option("--violation", gen->violation, "teleport | reversal | swap");
    cmd->add_flag("--force", gen->force, "overwrite an existing dataset");
    cmd->callback([gen] { run_gen_data(*gen); });
  }

  auto teacher = std::make_shared<TrainOpts>();
  {
    CLI::App* cmd =
        app.add_subcommand("train-teacher", "stage 1: masked pixel-reconstruction pretraining");
    add_train_options(cmd, teacher);
    cmd->callback([teacher] { run_train("stage1", *teacher); });
  }

  auto student = std::make_shared<TrainOpts>();
  {
    CLI::App* cmd = app.add_subcommand(
        "train-student", "stage 2: latent prediction against a frozen teacher");
    add_train_options(cmd, student);
    student->k_teacher =
        cmd->add_option("--teacher", student->teacher, "stage-1 teacher checkpoint");
    cmd->callback([student] { run_train("stage2", *student); });
  }

  auto ema = std::make_shared<TrainOpts>();
  {
    CLI::App* cmd =
        app.add_subcommand("train-ema", "baseline: latent prediction against an EMA teacher");
    add_train_options(cmd, ema);
    ema->k_mstart = cmd->add_option("--momentum-start", ema->momentum_start, "EMA momentum at 0");
    ema->k_mend = cmd->add_option("--momentum-end", ema->momentum_end, "EMA momentum at the end");
    cmd->callback([ema] { run_train("ema_baseline", *ema); });
  }

  auto probe = std::make_shared<ProbeOpts>();
  {
    CLI::App* cmd =
        app.add_subcommand("probe", "attentive-probe classification on a frozen backbone");
    cmd->add_option("--checkpoint", probe->checkpoint, "backbone checkpoint")->required();
    cmd->add_option("--data", probe->data, "labeled dataset directory")->required();
    cmd->add_option("--out", probe->out, "directory for probe report");
    cmd->add_option("--config", probe->config, "run config JSON file");
    cmd->add_option("--step", probe->step, "training step this checkpoint belongs to");
    probe->k_epochs = cmd->add_option("--epochs", probe->epochs, "probe training epochs");
    probe->k_batch = cmd->add_option("--batch", probe->batch, "probe batch size");
    probe->k_max =
        cmd->add_option("--max-train-clips", probe->max_train, "subsample the probe train split");
    probe->k_lrs = cmd->add_option("--lr", probe->lrs, "learning-rate grid");
    probe->k_wds = cmd->add_option("--wd", probe->wds, "weight-decay grid");
    probe->k_seed = cmd->add_option("--seed", probe->seed, "probe seed");
    cmd->add_flag("--force", probe->force, "overwrite existing reports");
    cmd->callback([probe] { run_probe(*probe); });
  }

  auto surprise = std::make_shared<SurpriseOpts>();
  {
    CLI::App* cmd = app.add_subcommand(
        "surprise", "prediction-error surprise scores and pair accuracy");
    cmd->add_option("--checkpoint", surprise->checkpoint, "student checkpoint")->required();
    cmd->add_option("--teacher", surprise->teacher,
                    "teacher checkpoint (defaults to an embedded teacher collection)");
    cmd->add_option("--data", surprise->data, "dataset directory (pairs for pair mode)")
        ->required();
    cmd->add_option("--clip", surprise->clip, "score one clip instead of pair accuracy");
    cmd->add_option("--out", surprise->out, "directory for the report");
    cmd->add_option("--config", surprise->config, "run config JSON file");
    surprise->k_ctx = cmd->add_option("--context", surprise->context, "context frames");
    surprise->k_fut = cmd->add_option("--future", surprise->future, "predicted frames");
    surprise->k_stride = cmd->add_option("--stride", surprise->stride, "window stride");
    surprise->k_agg = cmd->add_option("--agg", surprise->agg, "average | maximum");
    cmd->add_flag("--force", surprise->force, "overwrite existing reports");
    cmd->callback([surprise] { run_surprise(*surprise); });
  }

  auto rank = std::make_shared<RankmeOpts>();
  {
    CLI::App* cmd =
        app.add_subcommand("rankme", "effective rank of pooled backbone embeddings");
    cmd->add_option("--checkpoint", rank->checkpoint, "backbone checkpoint")->required();
    cmd->add_option("--data", rank->data, "dataset directory")->required();
    cmd->add_option("--split", rank->split, "train | eval | all");
    cmd->add_option("--out", rank->out, "directory for the report");
    cmd->add_flag("--force", rank->force, "overwrite existing reports");
    cmd->callback([rank] { run_rankme(*rank); });
  }

  auto flops = std::make_shared<FlopsOpts>();
  {
    CLI::App* cmd = app.add_subcommand("flops", "parameter-based training compute estimate");
    cmd->add_option("--preset", flops->preset, "published preset name");
    cmd->add_option("--model", flops->model, "registry name or model config file");
    cmd->add_option("--steps", flops->steps, "optimization steps");
    cmd->add_option("--batch", flops->batch, "clips per step");
    cmd->add_option("--mask-ratio", flops->mask_ratio, "encoder masking ratio");
    cmd->add_option("--stage", flops->stage, "stage1 | stage2 | ema_baseline");
    cmd->add_option("--masks", flops->masks, "masks per clip");
    cmd->callback([flops] { run_flops(*flops); });
  }

  auto sweep = std::make_shared<SweepOpts>();
  {
    CLI::App* cmd = app.add_subcommand(
        "sweep", "teacher/student compute-allocation sweep over one step budget");
    cmd->add_option("--data", sweep->data, "dataset directory");
    cmd->add_option("--out", sweep->out, "sweep output directory");
    cmd->add_option("--config", sweep->config, "run config JSON file");
    sweep->k_total = cmd->add_option("--total-steps", sweep->total_steps, "total step budget");
    cmd->add_option("--splits", sweep->splits,
                    "comma-separated teacher:student pairs (default: standard fractions)");
    sweep->k_batch = cmd->add_option("--batch", sweep->batch, "clips per step");
    sweep->k_model = cmd->add_option("--model", sweep->model, "registry name or config file");
    sweep->k_peak = cmd->add_option("--peak-lr", sweep->peak_lr, "peak learning rate");
    sweep->k_epochs = cmd->add_option("--probe-epochs", sweep->probe_epochs, "probe epochs");
    sweep->k_lrs = cmd->add_option("--probe-lr", sweep->probe_lrs, "probe learning-rate grid");
    sweep->k_max = cmd->add_option("--max-train-clips", sweep->max_train,
                                   "subsample the probe train split");
    sweep->k_seed = cmd->add_option("--seed", sweep->seed, "sweep seed");
    cmd->add_flag("--no-ema", sweep->no_ema, "skip the EMA baseline run");
    cmd->add_flag("--force", sweep->force, "overwrite existing run directories");
    cmd->callback([sweep] { run_sweep(*sweep); });
  }

  auto corr = std::make_shared<CorrelateOpts>();
  {
    CLI::App* cmd = app.add_subcommand(
        "correlate", "least-squares fit of probe accuracy against training loss");
    cmd->add_option("--points", corr->points, "JSONL file of {loss, accuracy} points");
    cmd->add_option("--run", corr->run, "run directory with records.jsonl + probe-step-*.json");
    cmd->add_option("--out", corr->out, "JSON report path");
    cmd->add_flag("--force", corr->force, "overwrite an existing report");
    cmd->callback([corr] { run_correlate(*corr); });
  }

  auto mask = std::make_shared<MaskStatsOpts>();
  {
    CLI::App* cmd = app.add_subcommand("mask-stats", "achieved-ratio statistics of a sampler");
    cmd->add_option("--strategy", mask->strategy,
                    "multiblock | random_tube | multi_random_tube | causal");
    cmd->add_option("--grid-t", mask->grid_t, "temporal slots");
    cmd->add_option("--grid-h", mask->grid_h, "spatial rows");
    cmd->add_option("--grid-w", mask->grid_w, "spatial cols");
    cmd->add_option("--samples", mask->samples, "number of draws");
    cmd->add_option("--seed", mask->seed, "sampler seed");
    cmd->add_option("--tube-ratio", mask->tube_ratio, "random-tube ratio");
    cmd->add_option("--tube-ratio2", mask->tube_ratio2, "second random-tube ratio");
    cmd->add_option("--causal-ratio", mask->causal_ratio, "causal masked fraction");
    cmd->callback([mask] { run_mask_stats(*mask); });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::RequiredError&) {
    std::cerr << app.help();
    return 2;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << kind_name(e.kind()) << ": " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace salt
