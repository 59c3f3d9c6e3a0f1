#include "salt/budget.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "salt/checkpoint.hpp"
#include "salt/video.hpp"

namespace salt {

using nlohmann::ordered_json;

double train_flops(double n_params, double d_tokens) {
  check(n_params >= 0 && d_tokens >= 0, ErrorKind::Config, "flops inputs must be nonnegative");
  return 6.0 * n_params * d_tokens;
}

double teacher_forward_flops(double n_params, double d_tokens) {
  check(n_params >= 0 && d_tokens >= 0, ErrorKind::Config, "flops inputs must be nonnegative");
  return 2.0 * n_params * d_tokens;
}

double token_count(int64_t grid_tokens, double mask_ratio, TokenRole role, int64_t batch,
                   int64_t steps, int num_masks) {
  check(grid_tokens >= 0 && batch >= 0 && steps >= 0 && num_masks >= 1, ErrorKind::Config,
        "token counts must be nonnegative");
  check(mask_ratio >= 0.0 && mask_ratio < 1.0, ErrorKind::Config, "mask ratio ", mask_ratio,
        " outside [0, 1)");
  const double clips = static_cast<double>(batch) * static_cast<double>(steps);
  const double grid = static_cast<double>(grid_tokens);
  switch (role) {
    case TokenRole::kEncoder:
      return (1.0 - mask_ratio) * grid * clips * num_masks;
    case TokenRole::kPredictor:
    case TokenRole::kDecoder:
      return grid * clips * num_masks;  // context rows + mask slots tile the grid
    case TokenRole::kTeacherForward:
      return grid * clips;  // one full-clip pass shared by all masks
  }
  fail(ErrorKind::Config, "unknown token role");
}

FlopsBreakdown flops_breakdown(const FlopsSpec& spec) {
  FlopsBreakdown out;
  out.encoder = train_flops(spec.n_encoder, spec.d_encoder);
  out.predictor = train_flops(spec.n_predictor, spec.d_predictor);
  out.decoder = train_flops(spec.n_decoder, spec.d_decoder);
  out.teacher = teacher_forward_flops(spec.n_teacher, spec.d_teacher);
  return out;
}

const std::vector<FlopsPreset>& flops_presets() {
  // Published N (params) and D (tokens) inputs, with the published totals as
  // reference values. The masked-autoencoder row has a pixel decoder and no
  // teacher; the EMA rows add a gradient-free teacher forward; the two-stage
  // rows additionally leave their teacher's own training outside these
  // inputs, so their derived total undershoots the reference — the gap is
  // reported as a residual.
  static const std::vector<FlopsPreset> presets = {
      {"videomaev2-g14",
       {1.1e9, 0.0, 0.0, 0.012e9, 331.8e9, 0.0, 0.0, 165.9e9},
       2.2e21},
      {"vjepa2-l16",
       {0.303e9, 0.303e9, 0.022e9, 0.0, 302.0e9, 1510.2e9, 3019.9e9, 0.0},
       1.9e21},
      {"vjepa2-h16",
       {0.632e9, 0.632e9, 0.022e9, 0.0, 302.0e9, 1509.9e9, 3019.9e9, 0.0},
       3.5e21},
      {"vjepa2-g16",
       {1.012e9, 1.012e9, 0.022e9, 0.0, 302.0e9, 1509.9e9, 3019.9e9, 0.0},
       5.3e21},
      {"salt-l16",
       {0.3e9, 0.303e9, 0.022e9, 0.0, 154.1e9, 770.7e9, 1541.4e9, 0.0},
       1.2e21},
      {"salt-h16",
       {0.6e9, 0.303e9, 0.022e9, 0.0, 154.1e9, 770.7e9, 1541.4e9, 0.0},
       1.5e21},
      {"salt-g16",
       {1.0e9, 0.303e9, 0.022e9, 0.0, 154.1e9, 770.7e9, 1541.4e9, 0.0},
       1.8e21},
      {"salt-gg16",
       {1.8e9, 0.303e9, 0.022e9, 0.0, 154.1e9, 770.7e9, 1541.4e9, 0.0},
       2.6e21},
  };
  return presets;
}

FlopsPreset flops_preset(const std::string& name) {
  for (const FlopsPreset& p : flops_presets())
    if (p.name == name) return p;
  std::string known;
  for (const FlopsPreset& p : flops_presets()) known += " " + p.name;
  fail(ErrorKind::Config, "unknown flops preset '", name, "'; known presets:", known);
}

void AllocationPlan::validate() const {
  model.validate();
  check(model.predictor_out_dim == model.width, ErrorKind::Config,
        "sweep shares one config across teacher and student, so the predictor must emit ",
        model.width, "-wide latents (got ", model.predictor_out_dim, ")");
  check(total_steps >= 1, ErrorKind::Config, "sweep needs a positive step budget");
  check(!splits.empty(), ErrorKind::Config, "sweep needs at least one split");
  check(batch_size >= 1, ErrorKind::Config, "batch size must be positive");
  for (const auto& [t, s] : splits) {
    check(t >= 1, ErrorKind::Config,
          "degenerate split: stage 2 requires a trained teacher checkpoint (teacher_steps >= 1)");
    check(s >= 1, ErrorKind::Config, "degenerate split: student_steps must be positive");
    check(t + s == total_steps, ErrorKind::Config, "split ", t, "+", s,
          " does not sum to the declared budget ", total_steps);
  }
}

std::vector<std::pair<int64_t, int64_t>> default_splits(int64_t total_steps) {
  check(total_steps >= 12, ErrorKind::Config, "budget too small to split");
  std::vector<std::pair<int64_t, int64_t>> out;
  for (const int den : {12, 8, 4, 3, 2}) {
    const int64_t t = std::max<int64_t>(total_steps / den, 1);
    out.emplace_back(t, total_steps - t);
  }
  return out;
}

std::string SweepReport::to_json() const {
  ordered_json arr = ordered_json::array();
  for (const SweepRow& r : rows) {
    ordered_json j;
    j["tag"] = r.tag;
    j["teacher_steps"] = r.teacher_steps;
    j["student_steps"] = r.student_steps;
    j["teacher_flops"] = r.teacher_flops;
    j["student_flops"] = r.student_flops;
    j["total_flops"] = r.total_flops;
    j["final_loss"] = r.final_loss;
    j["probe_accuracy"] = r.probe_accuracy;
    j["teacher_probe_accuracy"] = r.teacher_probe_accuracy;
    arr.push_back(std::move(j));
  }
  ordered_json top;
  top["rows"] = std::move(arr);
  return top.dump(2);
}

namespace {

OptimConfig optim_for_run(const AllocationPlan& plan, int64_t steps) {
  OptimConfig optim = plan.optim;
  optim.total_steps = steps;
  optim.warmup_steps = std::min(steps, steps / plan.warmup_fraction_den);
  return optim;
}

TrainPlan base_plan(const AllocationPlan& plan, const std::string& stage, int64_t steps,
                    const std::string& out_dir, uint64_t salt) {
  TrainPlan tp;
  tp.stage = stage;
  tp.dataset_dir = plan.dataset_dir;
  tp.model = plan.model;
  tp.optim = optim_for_run(plan, steps);
  tp.batch_size = plan.batch_size;
  tp.seed = plan.seed ^ (0x9e3779b97f4a7c15ULL * salt);  // distinct stream per run
  tp.out_dir = out_dir;
  tp.force = plan.force;
  return tp;
}

EncoderParams encoder_from_checkpoint(const std::string& path, const ModelConfig& cfg) {
  const Checkpoint ckpt = read_checkpoint(path);
  Rng scratch(0);
  EncoderParams enc = make_encoder<float>(cfg, scratch);
  load_into(select_prefix(ckpt, "encoder."), enc);
  return enc;
}

}  // namespace

SweepReport allocation_sweep(const AllocationPlan& plan) {
  plan.validate();
  const Dataset dataset = open_dataset(plan.dataset_dir);
  ProbeConfig pcfg = plan.probe;
  pcfg.validate();

  SweepReport report;
  uint64_t run_salt = 1;
  for (size_t i = 0; i < plan.splits.size(); ++i) {
    const auto [t_steps, s_steps] = plan.splits[i];
    char tag[64];
    std::snprintf(tag, sizeof(tag), "t%lld+s%lld", static_cast<long long>(t_steps),
                  static_cast<long long>(s_steps));
    const std::string run_dir = plan.out_dir + "/" + tag;

    TrainPlan teacher = base_plan(plan, "stage1", t_steps, run_dir + "/teacher", run_salt++);
    teacher.teacher_steps = t_steps;
    const TrainResult rt = train_stage1(teacher);

    TrainPlan student = base_plan(plan, "stage2", s_steps, run_dir + "/student", run_salt++);
    student.student_steps = s_steps;
    student.teacher_checkpoint = rt.final_checkpoint;
    const TrainResult rs = train_stage2(student);

    SweepRow row;
    row.tag = tag;
    row.teacher_steps = t_steps;
    row.student_steps = s_steps;
    row.teacher_flops = rt.records.back().flops_cum;
    row.student_flops = rs.records.back().flops_cum;
    row.total_flops = row.teacher_flops + row.student_flops;
    row.final_loss = rs.records.back().loss;
    row.probe_accuracy =
        train_probe(encoder_from_checkpoint(rs.final_checkpoint, plan.model), plan.model,
                    dataset, pcfg)
            .accuracy;
    row.teacher_probe_accuracy =
        train_probe(encoder_from_checkpoint(rt.final_checkpoint, plan.model), plan.model,
                    dataset, pcfg)
            .accuracy;
    report.rows.push_back(std::move(row));
  }

  if (plan.include_ema_baseline) {
    TrainPlan ema = base_plan(plan, "ema_baseline", plan.total_steps,
                              plan.out_dir + "/ema-baseline", run_salt++);
    ema.student_steps = plan.total_steps;
    const TrainResult re = train_ema_baseline(ema, ema.ema);

    SweepRow row;
    row.tag = "ema-baseline";
    row.teacher_steps = 0;
    row.student_steps = plan.total_steps;
    // the EMA run's ledger already folds the teacher forwards into one stream
    row.student_flops = re.records.back().flops_cum;
    row.total_flops = row.student_flops;
    row.final_loss = re.records.back().loss;
    row.probe_accuracy =
        train_probe(encoder_from_checkpoint(re.final_checkpoint, plan.model), plan.model,
                    dataset, pcfg)
            .accuracy;
    report.rows.push_back(std::move(row));
  }

  std::filesystem::create_directories(plan.out_dir);
  std::ofstream out(plan.out_dir + "/sweep.json", std::ios::trunc);
  out << report.to_json() << "\n";
  check(out.good(), ErrorKind::Io, "failed to write sweep report under ", plan.out_dir);
  return report;
}

}  // namespace salt
