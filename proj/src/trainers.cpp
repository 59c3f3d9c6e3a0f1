#include "salt/trainers.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "salt/budget.hpp"
#include "salt/checkpoint.hpp"

namespace salt {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---- schedules -------------------------------------------------------------

void OptimConfig::validate() const {
  check(total_steps >= 1, ErrorKind::Config, "total_steps must be >= 1");
  check(warmup_steps >= 0 && warmup_steps <= total_steps, ErrorKind::Config,
        "warmup_steps must lie in [0, total_steps]");
  check(peak_lr > 0 && start_lr >= 0 && final_lr >= 0, ErrorKind::Config,
        "learning rates must be nonnegative with a positive peak");
  check(start_wd >= 0 && end_wd >= start_wd, ErrorKind::Config,
        "weight decay must ramp upward (start <= end)");
  check(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, ErrorKind::Config,
        "betas must lie in [0, 1)");
  check(eps > 0, ErrorKind::Config, "eps must be positive");
  check(grad_clip > 0, ErrorKind::Config, "grad_clip must be positive");
}

std::string OptimConfig::to_json() const {
  ordered_json j;
  j["start_lr"] = start_lr;
  j["peak_lr"] = peak_lr;
  j["final_lr"] = final_lr;
  j["warmup_steps"] = warmup_steps;
  j["total_steps"] = total_steps;
  j["start_wd"] = start_wd;
  j["end_wd"] = end_wd;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["eps"] = eps;
  j["grad_clip"] = grad_clip;
  return j.dump(2);
}

OptimConfig OptimConfig::from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const std::exception& e) {
    fail(ErrorKind::Config, "optim config is not valid JSON: ", e.what());
  }
  OptimConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "start_lr") c.start_lr = value.get<double>();
    else if (key == "peak_lr") c.peak_lr = value.get<double>();
    else if (key == "final_lr") c.final_lr = value.get<double>();
    else if (key == "warmup_steps") c.warmup_steps = value.get<int64_t>();
    else if (key == "total_steps") c.total_steps = value.get<int64_t>();
    else if (key == "start_wd") c.start_wd = value.get<double>();
    else if (key == "end_wd") c.end_wd = value.get<double>();
    else if (key == "beta1") c.beta1 = value.get<double>();
    else if (key == "beta2") c.beta2 = value.get<double>();
    else if (key == "eps") c.eps = value.get<double>();
    else if (key == "grad_clip") c.grad_clip = value.get<double>();
    else fail(ErrorKind::Config, "unknown optim config key '", key, "'");
  }
  c.validate();
  return c;
}

double lr_at(int64_t step, const OptimConfig& cfg) {
  check(step >= 0 && step <= cfg.total_steps, ErrorKind::Contract, "schedule step ", step,
        " outside [0, ", cfg.total_steps, "]");
  if (step < cfg.warmup_steps) {
    const double u = static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    return cfg.start_lr + (cfg.peak_lr - cfg.start_lr) * u;
  }
  const int64_t span = cfg.total_steps - cfg.warmup_steps;
  const double u = span == 0 ? 1.0
                             : static_cast<double>(step - cfg.warmup_steps) /
                                   static_cast<double>(span);
  return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + std::cos(std::numbers::pi * u));
}

double wd_at(int64_t step, const OptimConfig& cfg) {
  check(step >= 0 && step <= cfg.total_steps, ErrorKind::Contract, "schedule step ", step,
        " outside [0, ", cfg.total_steps, "]");
  const double u = static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  return cfg.end_wd + 0.5 * (cfg.start_wd - cfg.end_wd) * (1.0 + std::cos(std::numbers::pi * u));
}

// ---- optimizer -------------------------------------------------------------

AdamWState AdamWState::init(const std::vector<Tensor>& params) {
  AdamWState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const Tensor& p : params) {
    s.m.push_back(Tensor::zeros(p.shape()));
    s.v.push_back(Tensor::zeros(p.shape()));
  }
  return s;
}

void adamw_step(std::vector<Tensor>& params, AdamWState& state, double lr, double wd,
                const OptimConfig& cfg) {
  check(state.m.size() == params.size() && state.v.size() == params.size(), ErrorKind::Contract,
        "optimizer state does not match the parameter list");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    check(p.has_grad(), ErrorKind::Contract, "parameter ", i, " has no gradient");
    const std::vector<float>& g = p.grad();
    float* pd = p.data();
    float* md = state.m[i].data();
    float* vd = state.v[i].data();
    for (int64_t j = 0; j < p.numel(); ++j) {
      const double gj = g[static_cast<size_t>(j)];
      check(std::isfinite(gj), ErrorKind::Numeric, "non-finite gradient in parameter ", i,
            " at element ", j);
      const double mj = cfg.beta1 * md[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * vd[j] + (1.0 - cfg.beta2) * gj * gj;
      md[j] = static_cast<float>(mj);
      vd[j] = static_cast<float>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps) + wd * pd[j];
      pd[j] = static_cast<float>(pd[j] - lr * update);
    }
  }
}

double clip_gradients(std::vector<Tensor>& params, double max_norm) {
  return clip_gradient_norm(params, max_norm);
}

void ema_update(std::vector<Tensor>& teacher, const std::vector<Tensor>& student, double momentum) {
  check(teacher.size() == student.size(), ErrorKind::Dimension,
        "teacher/student tensor lists differ in length");
  check(momentum >= 0.0 && momentum <= 1.0, ErrorKind::Contract, "momentum outside [0, 1]");
  for (size_t i = 0; i < teacher.size(); ++i) {
    Tensor& t = teacher[i];
    const Tensor& s = student[i];
    check(t.shape() == s.shape(), ErrorKind::Dimension, "tensor ", i, " shape mismatch: ",
          shape_str(t.shape()), " vs ", shape_str(s.shape()));
    float* td = t.data();
    const float* sd = s.data();
    for (int64_t j = 0; j < t.numel(); ++j)
      td[j] = static_cast<float>(momentum * td[j] + (1.0 - momentum) * sd[j]);
  }
}

void EmaSchedule::validate() const {
  check(start_momentum >= 0 && start_momentum <= end_momentum && end_momentum <= 1.0,
        ErrorKind::Config, "momentum schedule must satisfy 0 <= start <= end <= 1");
  check(total_steps >= 1, ErrorKind::Config, "momentum schedule needs total_steps >= 1");
}

double EmaSchedule::momentum_at(int64_t step) const {
  check(step >= 0 && step < total_steps, ErrorKind::Contract, "momentum step ", step,
        " outside [0, ", total_steps, ")");
  if (total_steps == 1) return end_momentum;
  const double u = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return start_momentum + (end_momentum - start_momentum) * u;
}

// ---- run records -----------------------------------------------------------

std::string RunRecord::to_line() const {
  ordered_json j;
  j["step"] = step;
  j["loss"] = loss;
  j["lr"] = lr;
  j["wd"] = wd;
  j["grad_norm"] = grad_norm;
  j["flops_cum"] = flops_cum;
  return j.dump();
}

RunRecord RunRecord::from_line(const std::string& line) {
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const std::exception& e) {
    fail(ErrorKind::Corruption, "bad run record line: ", e.what());
  }
  RunRecord r;
  bool have_step = false, have_loss = false;
  for (const auto& [key, value] : j.items()) {
    if (key == "step") { r.step = value.get<int64_t>(); have_step = true; }
    else if (key == "loss") { r.loss = value.get<double>(); have_loss = true; }
    else if (key == "lr") r.lr = value.get<double>();
    else if (key == "wd") r.wd = value.get<double>();
    else if (key == "grad_norm") r.grad_norm = value.get<double>();
    else if (key == "flops_cum") r.flops_cum = value.get<double>();
    else fail(ErrorKind::Corruption, "unknown run record key '", key, "'");
  }
  check(have_step && have_loss, ErrorKind::Corruption, "run record lacks step/loss");
  return r;
}

std::vector<RunRecord> read_run_records(const std::string& path) {
  std::ifstream f(path);
  check(f.good(), ErrorKind::Io, "cannot open run records '", path, "'");
  std::vector<RunRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(RunRecord::from_line(line));
    if (out.size() >= 2)
      check(out[out.size() - 1].step > out[out.size() - 2].step, ErrorKind::Corruption,
            "run record steps not strictly increasing at line ", out.size());
  }
  return out;
}

// ---- plans -----------------------------------------------------------------

int64_t checkpoint_interval(int64_t total_steps) {
  check(total_steps >= 1, ErrorKind::Contract, "no steps to checkpoint");
  return std::max<int64_t>(total_steps / 10, 100);
}

int64_t TrainPlan::steps_for_stage() const {
  return stage == "stage1" ? teacher_steps : student_steps;
}

void TrainPlan::validate() const {
  check(stage == "stage1" || stage == "stage2" || stage == "ema_baseline", ErrorKind::Config,
        "unknown stage '", stage, "'");
  check(!dataset_dir.empty(), ErrorKind::Config, "dataset_dir is required");
  check(!out_dir.empty(), ErrorKind::Config, "out_dir is required");
  check(batch_size >= 1, ErrorKind::Config, "batch_size must be >= 1");
  check(steps_for_stage() >= 1, ErrorKind::Config, "stage '", stage,
        "' has no steps configured");
  check(steps_for_stage() <= optim.total_steps, ErrorKind::Config,
        "run length exceeds the optimizer schedule span");
  if (total_budget > 0)
    check(teacher_steps + student_steps == total_budget, ErrorKind::Config, "teacher_steps (",
          teacher_steps, ") + student_steps (", student_steps,
          ") must equal the declared budget (", total_budget, ")");
  if (stage == "stage2")
    check(!teacher_checkpoint.empty(), ErrorKind::Config,
          "stage2 requires a teacher checkpoint (--teacher)");
  check(masking == "multiblock" || masking == "random_tube" || masking == "multi_random_tube" ||
            masking == "causal",
        ErrorKind::Config, "unknown masking strategy '", masking, "'");
  if (masking == "multiblock") multiblock.validate();
  model.validate();
  optim.validate();
}

// ---- shared loop machinery ---------------------------------------------------

namespace {

struct ClipTokens {
  TokenGrid grid;
  Tensor standardized;
};

struct TrainData {
  std::vector<ClipTokens> clips;
  GridDims grid;
  int64_t payload = 0;
};

TrainData load_train_data(const TrainPlan& plan) {
  const Dataset ds = open_dataset(plan.dataset_dir);
  const DatasetSpec& s = ds.spec;
  const ModelConfig& m = plan.model;
  check(s.tubelet_t == m.tubelet_t && s.tubelet_h == m.tubelet_h && s.tubelet_w == m.tubelet_w &&
            s.channels == m.channels,
        ErrorKind::Config, "dataset tubelets/channels do not match the model config");
  check(s.frames == m.grid_t * m.tubelet_t && s.height == m.grid_h * m.tubelet_h &&
            s.width == m.grid_w * m.tubelet_w,
        ErrorKind::Config, "dataset geometry (", s.frames, "x", s.height, "x", s.width,
        ") does not match the model token grid");
  check(!ds.train_ids.empty(), ErrorKind::Degenerate, "dataset has no training clips");

  TrainData d;
  d.grid = GridDims{m.grid_t, m.grid_h, m.grid_w};
  d.payload = m.payload();
  d.clips.reserve(ds.train_ids.size());
  for (const int64_t idx : ds.train_ids) {
    ClipTokens ct;
    ct.grid = patchify(load_clip(ds, idx), s);
    ct.standardized = standardize_tubelets(ct.grid.tokens);
    d.clips.push_back(std::move(ct));
  }
  return d;
}

std::vector<std::vector<MaskSpec>> sample_step_masks(const TrainPlan& plan, GridDims grid,
                                                     Rng& mask_rng, int64_t batch) {
  std::vector<std::vector<MaskSpec>> out(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) {
    Rng c = mask_rng.fork("clip", static_cast<uint64_t>(b));
    auto& masks = out[static_cast<size_t>(b)];
    if (plan.masking == "multiblock") {
      auto [short_mask, long_mask] = sample_multiblock(grid, plan.multiblock, c);
      masks.push_back(std::move(short_mask));
      masks.push_back(std::move(long_mask));
    } else if (plan.masking == "random_tube") {
      masks.push_back(sample_random_tube(grid, plan.tube_ratio, c));
    } else if (plan.masking == "multi_random_tube") {
      auto [m1, m2] = sample_multi_random_tube(grid, plan.tube_ratio, plan.tube_ratio2, c);
      masks.push_back(std::move(m1));
      masks.push_back(std::move(m2));
    } else {
      masks.push_back(sample_causal(grid, plan.causal_ratio, c));
    }
  }
  return out;
}

// Rows of several clips stacked into one matrix, with spans per clip.
struct MaskBatch {
  Tensor visible;        // [sum_visible x payload]
  Tensor target_pixels;  // [sum_masked x payload], standardized
  std::vector<Pos3> vis_pos, tgt_pos;
  std::vector<RowSpan> vis_spans, tgt_spans;
  std::vector<int64_t> masked_flat;  // row index into the batch-stacked full grid
  int64_t visible_count = 0;
  int64_t masked_count = 0;
};

MaskBatch build_mask_batch(const TrainData& data, const std::vector<int64_t>& picks,
                           const std::vector<std::vector<MaskSpec>>& masks, size_t mask_index) {
  MaskBatch out;
  const int64_t n = data.grid.count();
  std::vector<MaskedView> views;
  views.reserve(picks.size());
  for (size_t b = 0; b < picks.size(); ++b) {
    const ClipTokens& ct = data.clips[static_cast<size_t>(picks[b])];
    views.push_back(split_view(ct.grid, masks[b][mask_index]));
    out.visible_count += static_cast<int64_t>(views.back().visible_idx.size());
    out.masked_count += static_cast<int64_t>(views.back().masked_idx.size());
  }
  out.visible = Tensor::zeros({out.visible_count, data.payload});
  out.target_pixels = Tensor::zeros({out.masked_count, data.payload});
  int64_t vrow = 0, trow = 0;
  for (size_t b = 0; b < picks.size(); ++b) {
    const ClipTokens& ct = data.clips[static_cast<size_t>(picks[b])];
    const MaskedView& view = views[b];
    out.vis_spans.push_back({vrow, static_cast<int64_t>(view.visible_idx.size())});
    out.tgt_spans.push_back({trow, static_cast<int64_t>(view.masked_idx.size())});
    for (size_t i = 0; i < view.visible_idx.size(); ++i, ++vrow) {
      std::copy_n(ct.grid.tokens.data() + view.visible_idx[i] * data.payload, data.payload,
                  out.visible.data() + vrow * data.payload);
      out.vis_pos.push_back(view.visible_positions[i]);
    }
    for (size_t i = 0; i < view.masked_idx.size(); ++i, ++trow) {
      std::copy_n(ct.standardized.data() + view.masked_idx[i] * data.payload, data.payload,
                  out.target_pixels.data() + trow * data.payload);
      out.tgt_pos.push_back(view.masked_positions[i]);
      out.masked_flat.push_back(static_cast<int64_t>(b) * n + view.masked_idx[i]);
    }
  }
  return out;
}

// All tokens of the picked clips stacked in batch order.
struct FullBatch {
  Tensor tokens;  // [batch*n x payload]
  std::vector<Pos3> positions;
  std::vector<RowSpan> spans;
};

FullBatch build_full_batch(const TrainData& data, const std::vector<int64_t>& picks) {
  FullBatch out;
  const int64_t n = data.grid.count();
  out.tokens = Tensor::zeros({static_cast<int64_t>(picks.size()) * n, data.payload});
  out.positions.reserve(static_cast<size_t>(static_cast<int64_t>(picks.size()) * n));
  for (size_t b = 0; b < picks.size(); ++b) {
    const ClipTokens& ct = data.clips[static_cast<size_t>(picks[b])];
    std::copy_n(ct.grid.tokens.data(), n * data.payload,
                out.tokens.data() + static_cast<int64_t>(b) * n * data.payload);
    out.positions.insert(out.positions.end(), ct.grid.positions.begin(), ct.grid.positions.end());
    out.spans.push_back({static_cast<int64_t>(b) * n, n});
  }
  return out;
}

std::vector<int64_t> pick_batch(Rng& data_rng, int64_t train_count, int64_t batch) {
  std::vector<int64_t> picks(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) picks[static_cast<size_t>(b)] = data_rng.uniform_int(train_count);
  return picks;
}

void prepare_out_dir(const TrainPlan& plan) {
  fs::create_directories(plan.out_dir);
  const fs::path records = fs::path(plan.out_dir) / "records.jsonl";
  check(plan.force || !fs::exists(records), ErrorKind::Io, "output '", records.string(),
        "' already exists; enable force to overwrite");
}

std::string step_checkpoint_name(int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step-%06lld.ckpt", static_cast<long long>(step));
  return buf;
}

// Everything a concrete stage plugs into the shared optimization loop.
struct LoopSpec {
  std::vector<Tensor> params;  // trainable tensors, fixed order
  // Builds the step's graph, runs backward, returns the loss value and adds
  // this step's flops into `step_flops`.
  std::function<double(int64_t step, double& step_flops)> forward_backward;
  // Writes the full parameter snapshot at `path`.
  std::function<void(const std::string& path)> save;
  // Invariant hooks / teacher maintenance after the parameter update.
  std::function<void(int64_t step)> post_update;
  double min_loss = 0.0;  // collapse guard (latent stages)
};

TrainResult run_loop(const TrainPlan& plan, LoopSpec spec) {
  const int64_t steps = plan.steps_for_stage();
  const int64_t interval = checkpoint_interval(steps);
  prepare_out_dir(plan);

  const std::string records_path = (fs::path(plan.out_dir) / "records.jsonl").string();
  std::ofstream records_file(records_path, std::ios::trunc);
  check(records_file.good(), ErrorKind::Io, "cannot write '", records_path, "'");

  TrainResult result;
  result.records_path = records_path;
  AdamWState state = AdamWState::init(spec.params);
  double flops_cum = 0.0;

  for (int64_t k = 0; k < steps; ++k) {
    double step_flops = 0.0;
    const double loss = spec.forward_backward(k, step_flops);
    check(std::isfinite(loss), ErrorKind::Numeric, "loss diverged at step ", k + 1);
    if (spec.min_loss > 0)
      check(loss > spec.min_loss, ErrorKind::Contract, "loss ", loss, " collapsed below ",
            spec.min_loss, " at step ", k + 1, " (constant-target objective cannot reach zero)");

    const double lr = lr_at(k, plan.optim);
    const double wd = wd_at(k, plan.optim);
    const double grad_norm = clip_gradients(spec.params, plan.optim.grad_clip);
    adamw_step(spec.params, state, lr, wd, plan.optim);
    for (Tensor& p : spec.params) p.zero_grad();
    if (spec.post_update) spec.post_update(k);

    flops_cum += step_flops;
    RunRecord rec{k + 1, loss, lr, wd, grad_norm, flops_cum};
    records_file << rec.to_line() << '\n';
    result.records.push_back(rec);
    if (plan.on_record) plan.on_record(rec);

    if ((k + 1) % interval == 0 && k + 1 != steps) {
      const std::string path = (fs::path(plan.out_dir) / step_checkpoint_name(k + 1)).string();
      spec.save(path);
      result.checkpoints.push_back(path);
    }
  }

  records_file.flush();
  check(records_file.good(), ErrorKind::Io, "failed writing '", records_path, "'");
  const std::string final_path = (fs::path(plan.out_dir) / "final.ckpt").string();
  spec.save(final_path);
  result.checkpoints.push_back(final_path);
  result.final_checkpoint = final_path;
  return result;
}

double encoder_flops(int64_t params, int64_t tokens) {
  return train_flops(static_cast<double>(params), static_cast<double>(tokens));
}

}  // namespace

// ---- stage 1: pixel-reconstruction teacher ----------------------------------

TrainResult train_stage1(const TrainPlan& plan) {
  check(plan.stage == "stage1", ErrorKind::Contract, "plan stage is '", plan.stage, "'");
  plan.validate();
  const TrainData data = load_train_data(plan);
  const ModelConfig& cfg = plan.model;

  Rng root(plan.seed);
  Rng init_enc = root.fork("init-encoder");
  Rng init_dec = root.fork("init-decoder");
  EncoderParams enc = make_encoder<float>(cfg, init_enc);
  DecoderParams dec = make_decoder<float>(cfg, init_dec);
  enc.mark_trainable();
  dec.mark_trainable();

  const int64_t n_enc = encoder_parameter_count(cfg);
  const int64_t n_dec = decoder_parameter_count(cfg);
  const int64_t n = data.grid.count();
  const int64_t train_count = static_cast<int64_t>(data.clips.size());

  LoopSpec spec;
  spec.params = enc.tensors();
  for (Tensor& t : dec.tensors()) spec.params.push_back(t);
  spec.save = [&](const std::string& path) {
    auto named = prefixed("encoder.", enc.named());
    for (auto& nt : prefixed("decoder.", dec.named())) named.push_back(nt);
    save_checkpoint(path, cfg, named);
  };
  spec.forward_backward = [&, n, n_enc, n_dec, train_count](int64_t k, double& step_flops) {
    Rng data_rng = root.fork("data", static_cast<uint64_t>(k));
    Rng mask_rng = root.fork("masks", static_cast<uint64_t>(k));
    const std::vector<int64_t> picks = pick_batch(data_rng, train_count, plan.batch_size);
    const auto masks = sample_step_masks(plan, data.grid, mask_rng, plan.batch_size);
    const size_t num_masks = masks.front().size();

    Tape tape;
    Tensor total;
    for (size_t mi = 0; mi < num_masks; ++mi) {
      MaskBatch batch = build_mask_batch(data, picks, masks, mi);
      Tensor embedded = tubelet_embed<float>(&tape, enc, batch.visible);
      Tensor latents = encoder_forward<float>(&tape, enc, embedded, batch.vis_pos, batch.vis_spans);
      Tensor pixels = decoder_forward<float>(&tape, dec, latents, batch.vis_pos, batch.vis_spans,
                                             batch.tgt_pos, batch.tgt_spans);
      Tensor loss = l1_loss(&tape, pixels, batch.target_pixels);
      total = mi == 0 ? loss : add(&tape, total, loss);
      step_flops += encoder_flops(n_enc, batch.visible_count) +
                    encoder_flops(n_dec, batch.visible_count + batch.masked_count);
    }
    if (num_masks > 1) total = scale(&tape, total, 1.0f / static_cast<float>(num_masks));
    tape.backward(total);
    return static_cast<double>(total.item());
  };
  return run_loop(plan, std::move(spec));
}

// ---- stage 2: frozen-teacher latent prediction -------------------------------

TrainResult train_stage2(const TrainPlan& plan) {
  check(plan.stage == "stage2", ErrorKind::Contract, "plan stage is '", plan.stage, "'");
  plan.validate();
  const TrainData data = load_train_data(plan);
  const ModelConfig& cfg = plan.model;

  // The teacher keeps its own architecture from the checkpoint; only the
  // token geometry and the predictor's output width must line up.
  const Checkpoint teacher_ckpt = read_checkpoint(plan.teacher_checkpoint);
  const ModelConfig tcfg = teacher_ckpt.config;
  check(tcfg.grid_t == cfg.grid_t && tcfg.grid_h == cfg.grid_h && tcfg.grid_w == cfg.grid_w &&
            tcfg.tubelet_t == cfg.tubelet_t && tcfg.tubelet_h == cfg.tubelet_h &&
            tcfg.tubelet_w == cfg.tubelet_w && tcfg.channels == cfg.channels,
        ErrorKind::Config, "teacher token grid does not match the student config");
  check(cfg.predictor_out_dim == tcfg.width, ErrorKind::Config, "predictor output width ",
        cfg.predictor_out_dim, " must equal the teacher width ", tcfg.width);

  Rng root(plan.seed);
  Rng init_teacher = root.fork("init-teacher");
  Rng init_student = root.fork("init-student");
  Rng init_pred = root.fork("init-predictor");
  TeacherParams teacher = make_teacher<float>(tcfg, init_teacher);
  load_into(select_prefix(teacher_ckpt, "encoder."), teacher);
  EncoderParams student = make_encoder<float>(cfg, init_student);
  PredictorParams pred = make_predictor<float>(cfg, init_pred);
  student.mark_trainable();
  pred.mark_trainable();

  const uint64_t teacher_digest = named_checksum(teacher.named());
  const int64_t n_student = encoder_parameter_count(cfg);
  const int64_t n_teacher = encoder_parameter_count(tcfg);
  const int64_t n_pred = predictor_parameter_count(cfg);
  const int64_t n = data.grid.count();
  const int64_t train_count = static_cast<int64_t>(data.clips.size());

  LoopSpec spec;
  spec.min_loss = 1e-4;
  spec.params = student.tensors();
  for (Tensor& t : pred.tensors()) spec.params.push_back(t);
  spec.save = [&](const std::string& path) {
    auto named = prefixed("encoder.", student.named());
    for (auto& nt : prefixed("predictor.", pred.named())) named.push_back(nt);
    save_checkpoint(path, cfg, named);
  };
  spec.post_update = [&, teacher_digest](int64_t k) {
    check(named_checksum(teacher.named()) == teacher_digest, ErrorKind::Contract,
          "frozen teacher changed at step ", k + 1);
  };
  spec.forward_backward = [&, n, train_count](int64_t k, double& step_flops) {
    Rng data_rng = root.fork("data", static_cast<uint64_t>(k));
    Rng mask_rng = root.fork("masks", static_cast<uint64_t>(k));
    const std::vector<int64_t> picks = pick_batch(data_rng, train_count, plan.batch_size);
    const auto masks = sample_step_masks(plan, data.grid, mask_rng, plan.batch_size);
    const size_t num_masks = masks.front().size();

    // One tape-free full-clip teacher pass serves every mask's targets.
    const FullBatch full = build_full_batch(data, picks);
    Tensor t_embedded = tubelet_embed<float>(nullptr, teacher, full.tokens);
    Tensor t_latents =
        encoder_forward<float>(nullptr, teacher, t_embedded, full.positions, full.spans);
    step_flops += teacher_forward_flops(static_cast<double>(n_teacher),
                                        static_cast<double>(plan.batch_size * n));

    Tape tape;
    Tensor total;
    for (size_t mi = 0; mi < num_masks; ++mi) {
      MaskBatch batch = build_mask_batch(data, picks, masks, mi);
      Tensor targets = gather_rows<float>(nullptr, t_latents, batch.masked_flat);
      Tensor embedded = tubelet_embed<float>(&tape, student, batch.visible);
      Tensor latents =
          encoder_forward<float>(&tape, student, embedded, batch.vis_pos, batch.vis_spans);
      Tensor predicted = predictor_forward<float>(&tape, pred, latents, batch.vis_pos,
                                                  batch.vis_spans, batch.tgt_pos, batch.tgt_spans);
      Tensor loss = l1_loss(&tape, predicted, targets);
      total = mi == 0 ? loss : add(&tape, total, loss);
      step_flops += encoder_flops(n_student, batch.visible_count) +
                    encoder_flops(n_pred, batch.visible_count + batch.masked_count);
    }
    if (num_masks > 1) total = scale(&tape, total, 1.0f / static_cast<float>(num_masks));
    tape.backward(total);
    return static_cast<double>(total.item());
  };
  return run_loop(plan, std::move(spec));
}

// ---- EMA / stop-gradient baseline --------------------------------------------

TrainResult train_ema_baseline(const TrainPlan& plan, const EmaSchedule& ema) {
  check(plan.stage == "ema_baseline", ErrorKind::Contract, "plan stage is '", plan.stage, "'");
  plan.validate();
  EmaSchedule schedule = ema;
  if (schedule.total_steps == 0) schedule.total_steps = plan.steps_for_stage();
  schedule.validate();
  check(schedule.total_steps == plan.steps_for_stage(), ErrorKind::Config,
        "momentum schedule span must equal the run length");

  const TrainData data = load_train_data(plan);
  const ModelConfig& cfg = plan.model;
  check(cfg.predictor_out_dim == cfg.width, ErrorKind::Config,
        "baseline predictor must emit the encoder width");

  Rng root(plan.seed);
  Rng init_student = root.fork("init-student");
  Rng init_pred = root.fork("init-predictor");
  Rng init_teacher = root.fork("init-teacher");
  EncoderParams student = make_encoder<float>(cfg, init_student);
  PredictorParams pred = make_predictor<float>(cfg, init_pred);
  TeacherParams teacher = make_teacher<float>(cfg, init_teacher);
  // the teacher starts as an exact copy of the student
  {
    auto t = teacher.tensors();
    const auto s = student.tensors();
    for (size_t i = 0; i < t.size(); ++i)
      std::copy_n(s[i].data(), s[i].numel(), t[i].data());
  }
  student.mark_trainable();
  pred.mark_trainable();

  const int64_t n_params = encoder_parameter_count(cfg);
  const int64_t n_pred = predictor_parameter_count(cfg);
  const int64_t n = data.grid.count();
  const int64_t train_count = static_cast<int64_t>(data.clips.size());

  LoopSpec spec;
  spec.min_loss = 1e-4;
  spec.params = student.tensors();
  for (Tensor& t : pred.tensors()) spec.params.push_back(t);
  spec.save = [&](const std::string& path) {
    auto named = prefixed("encoder.", student.named());
    for (auto& nt : prefixed("predictor.", pred.named())) named.push_back(nt);
    for (auto& nt : prefixed("teacher.", teacher.named())) named.push_back(nt);
    save_checkpoint(path, cfg, named);
  };
  spec.post_update = [&, schedule](int64_t k) {
    // stop-gradient invariant: the teacher never accumulates gradients
    for (const Tensor& t : teacher.tensors())
      check(!t.has_grad(), ErrorKind::Contract, "teacher accumulated a gradient at step ", k + 1);
    auto t = teacher.tensors();
    ema_update(t, student.tensors(), schedule.momentum_at(k));
  };
  spec.forward_backward = [&, n, train_count](int64_t k, double& step_flops) {
    Rng data_rng = root.fork("data", static_cast<uint64_t>(k));
    Rng mask_rng = root.fork("masks", static_cast<uint64_t>(k));
    const std::vector<int64_t> picks = pick_batch(data_rng, train_count, plan.batch_size);
    const auto masks = sample_step_masks(plan, data.grid, mask_rng, plan.batch_size);
    const size_t num_masks = masks.front().size();

    const FullBatch full = build_full_batch(data, picks);
    Tensor t_embedded = tubelet_embed<float>(nullptr, teacher, full.tokens);
    Tensor t_latents = detach(
        encoder_forward<float>(nullptr, teacher, t_embedded, full.positions, full.spans));
    step_flops += teacher_forward_flops(static_cast<double>(n_params),
                                        static_cast<double>(plan.batch_size * n));

    Tape tape;
    Tensor total;
    for (size_t mi = 0; mi < num_masks; ++mi) {
      MaskBatch batch = build_mask_batch(data, picks, masks, mi);
      Tensor targets = gather_rows<float>(nullptr, t_latents, batch.masked_flat);
      Tensor embedded = tubelet_embed<float>(&tape, student, batch.visible);
      Tensor latents =
          encoder_forward<float>(&tape, student, embedded, batch.vis_pos, batch.vis_spans);
      Tensor predicted = predictor_forward<float>(&tape, pred, latents, batch.vis_pos,
                                                  batch.vis_spans, batch.tgt_pos, batch.tgt_spans);
      Tensor loss = l1_loss(&tape, predicted, targets);
      total = mi == 0 ? loss : add(&tape, total, loss);
      step_flops += encoder_flops(n_params, batch.visible_count) +
                    encoder_flops(n_pred, batch.visible_count + batch.masked_count);
    }
    if (num_masks > 1) total = scale(&tape, total, 1.0f / static_cast<float>(num_masks));
    tape.backward(total);
    return static_cast<double>(total.item());
  };
  return run_loop(plan, std::move(spec));
}

}  // namespace salt
