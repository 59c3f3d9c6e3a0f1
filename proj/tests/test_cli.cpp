#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>

#include "salt/runconfig.hpp"
#include "salt/trainers.hpp"
#include "salt/video.hpp"
#include "testutil.hpp"

using namespace salt;

namespace {

struct CliResult {
  int exit = -1;
  std::string out;  // stdout + stderr interleaved
};

CliResult run_cli(const std::string& args) {
  const char* bin = std::getenv("SALT_BIN");
  REQUIRE_MESSAGE(bin != nullptr, "SALT_BIN must point at the salt binary");
  const std::string cmd = std::string(bin) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CliResult r;
  char buf[4096];
  size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.exit = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

// First "key=value" occurrence in the output; value ends at whitespace.
std::string kv(const std::string& out, const std::string& key) {
  const std::string tag = key + "=";
  size_t at = 0;
  while ((at = out.find(tag, at)) != std::string::npos) {
    if (at == 0 || out[at - 1] == ' ' || out[at - 1] == '\n') {
      const size_t start = at + tag.size();
      size_t end = start;
      while (end < out.size() && out[end] != ' ' && out[end] != '\n') ++end;
      return out.substr(start, end - start);
    }
    at += tag.size();
  }
  FAIL("output lacks key '", key, "': ", out);
  return "";
}

double kv_num(const std::string& out, const std::string& key) { return std::stod(kv(out, key)); }

void spit(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  f << text;
  REQUIRE(f.good());
}

const char* kMicroModel = R"({
  "name": "micro", "width": 12, "depth": 1, "heads": 2,
  "grid_t": 4, "grid_h": 4, "grid_w": 4,
  "predictor_width": 12, "predictor_depth": 1, "predictor_heads": 2,
  "predictor_out_dim": 12,
  "decoder_width": 12, "decoder_depth": 1, "decoder_heads": 2
})";

// 24 clips of 8x16x16 so the micro model's 4x4x4 grid fits.
std::string gen_micro_data(testutil::TempDir& tmp, const std::string& name, uint64_t seed) {
  const std::string dir = tmp.path(name);
  const CliResult r = run_cli("gen-data --out " + dir +
                              " --clips 24 --frames 8 --height 16 --width 16 --seed " +
                              std::to_string(seed));
  REQUIRE(r.exit == 0);
  return dir;
}

std::string micro_model_file(testutil::TempDir& tmp) {
  const std::string path = tmp.path("micro.json");
  spit(path, kMicroModel);
  return path;
}

}  // namespace

TEST_CASE("no arguments prints usage and exits 2") {
  const CliResult r = run_cli("");
  CHECK(r.exit == 2);
  CHECK(contains(r.out, "Usage"));
  CHECK(contains(r.out, "gen-data"));
  CHECK(contains(r.out, "train-student"));
}

TEST_CASE("unknown subcommands and flags are usage errors") {
  CHECK(run_cli("frobnicate").exit == 2);
  CHECK(run_cli("flops --bogus 1").exit == 2);
  CHECK(run_cli("--help").exit == 0);
}

TEST_CASE("flops presets reproduce the published totals") {
  const CliResult r = run_cli("flops --preset vjepa2-l16");
  CHECK(r.exit == 0);
  const double total = kv_num(r.out, "total");
  CHECK(std::abs(total - 1.9e21) / 1.9e21 < 0.03);
  CHECK(contains(r.out, "teacher "));

  const CliResult g = run_cli("flops --preset videomaev2-g14");
  CHECK(g.exit == 0);
  CHECK(std::abs(kv_num(g.out, "total") - 2.2e21) / 2.2e21 < 0.03);
  CHECK(contains(g.out, "decoder "));

  CHECK(run_cli("flops --preset nonsense").exit == 2);
  CHECK(run_cli("flops").exit == 2);
}

TEST_CASE("flops model mode derives the table from geometry") {
  // the published D columns assume 16 frames of 256x256 (8*16*16 = 2048
  // tokens); the registry's L model carries the 224px grid, so spell out the
  // 256px geometry in a config file
  testutil::TempDir tmp("cli-flops");
  const std::string model = tmp.path("l256.json");
  spit(model, R"({
    "name": "l256", "width": 1024, "depth": 24, "heads": 16,
    "tubelet_t": 2, "tubelet_h": 16, "tubelet_w": 16, "channels": 3,
    "grid_t": 8, "grid_h": 16, "grid_w": 16,
    "predictor_width": 384, "predictor_depth": 12, "predictor_heads": 16,
    "predictor_out_dim": 1024
  })");
  const CliResult s2 =
      run_cli("flops --model " + model + " --steps 240000 --batch 3072 --mask-ratio 0.9");
  CHECK(s2.exit == 0);
  CHECK(contains(s2.out, "encoder "));
  CHECK(contains(s2.out, "predictor "));
  CHECK(contains(s2.out, "teacher "));
  // the derived stage-2 total for the L-size model lands on the published 1.9e21
  CHECK(std::abs(kv_num(s2.out, "total") - 1.9e21) / 1.9e21 < 0.03);

  const CliResult s1 = run_cli("flops --model vit-l --steps 1000 --batch 8 --stage stage1");
  CHECK(s1.exit == 0);
  CHECK(contains(s1.out, "decoder "));
  CHECK(!contains(s1.out, "teacher "));

  CHECK(run_cli("flops --model vit-l --steps 10 --stage stage9").exit == 2);
}

TEST_CASE("gen-data writes an openable dataset and respects collisions") {
  testutil::TempDir tmp("cli-gen");
  const std::string dir = tmp.path("data");
  const CliResult r = run_cli("gen-data --out " + dir + " --clips 16 --seed 3");
  CHECK(r.exit == 0);
  CHECK(kv(r.out, "clips") == "16");
  CHECK(kv(r.out, "pairs") == "no");

  const Dataset ds = open_dataset(dir);
  CHECK(ds.clips.size() == 16);
  CHECK(ds.train_ids.size() == 14);

  // same --out again: refused without --force, clean with it
  CHECK(run_cli("gen-data --out " + dir + " --clips 16 --seed 3").exit == 1);
  CHECK(run_cli("gen-data --out " + dir + " --clips 16 --seed 3 --force").exit == 0);

  const CliResult p =
      run_cli("gen-data --out " + tmp.path("pairs") + " --pairs 3 --violation swap --seed 4");
  CHECK(p.exit == 0);
  CHECK(kv(p.out, "clips") == "6");
  CHECK(kv(p.out, "pairs") == "yes");
  CHECK(run_cli("gen-data --out " + tmp.path("p2") + " --pairs 2 --violation sideways").exit == 2);
}

TEST_CASE("train-student without --teacher names the missing field") {
  const CliResult r = run_cli("train-student --data x --out y --steps 5");
  CHECK(r.exit == 2);
  CHECK(contains(r.out, "--teacher"));
  CHECK(contains(r.out, "error: config:"));
}

TEST_CASE("teacher training round trips through the CLI with a config echo") {
  testutil::TempDir tmp("cli-teach");
  const std::string data = gen_micro_data(tmp, "data", 11);
  const std::string model = micro_model_file(tmp);
  const std::string out = tmp.path("run");

  const std::string cmd = "train-teacher --data " + data + " --out " + out +
                          " --steps 4 --batch 2 --seed 5 --model " + model;
  const CliResult r = run_cli(cmd);
  CHECK(r.exit == 0);
  CHECK(kv(r.out, "final_checkpoint") == out + "/final.ckpt");
  CHECK(kv_num(r.out, "final_loss") > 0);

  // records stream parses and the echoed config reproduces the run inputs
  const auto records = read_run_records(out + "/records.jsonl");
  CHECK(records.size() == 4);
  const RunConfig echo = RunConfig::load(out + "/config.json");
  CHECK(echo.seed == 5);
  CHECK(echo.train.stage == "stage1");
  CHECK(echo.train.teacher_steps == 4);
  CHECK(echo.model.width == 12);
  CHECK(echo.optim.total_steps == 4);

  // collisions refused unless forced
  CHECK(run_cli(cmd).exit == 1);
  CHECK(run_cli(cmd + " --force").exit == 0);

  // the echo itself is a valid --config input (flags may still override)
  const CliResult again = run_cli("train-teacher --config " + out + "/config.json --out " +
                                  tmp.path("run2"));
  CHECK(again.exit == 0);
  CHECK(kv_num(again.out, "final_loss") == doctest::Approx(kv_num(r.out, "final_loss")));
}

TEST_CASE("a split CLI run matches a monolithic in-process run to 1e-6") {
  testutil::TempDir tmp("cli-split");
  const std::string data = gen_micro_data(tmp, "data", 11);
  const std::string model = micro_model_file(tmp);

  // CLI: teacher in one process, student in another
  const CliResult t = run_cli("train-teacher --data " + data + " --out " + tmp.path("t") +
                              " --steps 2 --batch 2 --seed 5 --model " + model);
  REQUIRE(t.exit == 0);
  const CliResult s = run_cli("train-student --data " + data + " --out " + tmp.path("s") +
                              " --steps 1 --batch 2 --seed 6 --model " + model + " --teacher " +
                              tmp.path("t") + "/final.ckpt");
  REQUIRE(s.exit == 0);
  const double split_loss = read_run_records(tmp.path("s") + "/records.jsonl")[0].loss;

  // library: both stages in this process, same seeds and schedule rule
  const ModelConfig cfg = ModelConfig::from_json(kMicroModel);
  auto plan_for = [&](const std::string& stage, int64_t steps, uint64_t seed,
                      const std::string& out) {
    TrainPlan p;
    p.stage = stage;
    p.dataset_dir = data;
    p.model = cfg;
    p.optim.total_steps = steps;
    p.optim.warmup_steps = steps / 10;
    p.batch_size = 2;
    p.seed = seed;
    p.out_dir = tmp.path(out);
    return p;
  };
  TrainPlan tp = plan_for("stage1", 2, 5, "mt");
  tp.teacher_steps = 2;
  const TrainResult rt = train_stage1(tp);
  TrainPlan sp = plan_for("stage2", 1, 6, "ms");
  sp.student_steps = 1;
  sp.teacher_checkpoint = rt.final_checkpoint;
  const TrainResult rs = train_stage2(sp);

  CHECK(split_loss == doctest::Approx(rs.records[0].loss).epsilon(1e-6));
}

TEST_CASE("probe reports feed the run-directory correlation reader") {
  testutil::TempDir tmp("cli-corr");
  const std::string data = gen_micro_data(tmp, "data", 11);
  const std::string model = micro_model_file(tmp);
  const std::string run = tmp.path("run");

  REQUIRE(run_cli("train-teacher --data " + data + " --out " + run +
                  " --steps 6 --batch 2 --seed 5 --model " + model)
              .exit == 0);

  // label the final checkpoint with three different steps; the accuracies tie,
  // which must exercise the constant-y convention (r2 = 0), not crash
  for (const char* step : {"2", "4", "6"}) {
    const CliResult p = run_cli("probe --checkpoint " + run + "/final.ckpt --data " + data +
                                " --out " + run + " --step " + step +
                                " --epochs 1 --lr 1e-3 --seed 4");
    REQUIRE(p.exit == 0);
  }
  const CliResult c = run_cli("correlate --run " + run);
  CHECK(c.exit == 0);
  CHECK(kv(c.out, "n") == "3");
  CHECK(kv_num(c.out, "r2") == 0.0);

  // points mode agrees with the in-process least-squares fit
  const std::string pts = tmp.path("pts.jsonl");
  spit(pts,
       "{\"loss\":1.0,\"accuracy\":0.3}\n{\"loss\":0.8,\"accuracy\":0.5}\n"
       "{\"loss\":0.6,\"accuracy\":0.6}\n{\"loss\":0.4,\"accuracy\":0.9}\n");
  const CliResult m = run_cli("correlate --points " + pts + " --out " + tmp.path("fit.json"));
  CHECK(m.exit == 0);
  const LinearFit want = r2_fit({1.0, 0.8, 0.6, 0.4}, {0.3, 0.5, 0.6, 0.9});
  CHECK(kv_num(m.out, "slope") == doctest::Approx(want.slope).epsilon(1e-6));
  CHECK(kv_num(m.out, "r2") == doctest::Approx(want.r2).epsilon(1e-6));

  // corrupt points are corruption, too few are config
  spit(pts, "{\"loss\":1.0,\"accuracy\":0.3,\"bogus\":1}\n");
  CHECK(run_cli("correlate --points " + pts).exit == 1);
  spit(pts, "{\"loss\":1.0,\"accuracy\":0.3}\n{\"loss\":0.9,\"accuracy\":0.4}\n");
  CHECK(run_cli("correlate --points " + pts).exit == 2);
  CHECK(run_cli("correlate").exit == 2);
}

TEST_CASE("surprise scores pairs from split or embedded teachers") {
  testutil::TempDir tmp("cli-surp");
  const std::string data = gen_micro_data(tmp, "data", 11);
  const std::string model = micro_model_file(tmp);
  const std::string pairs = tmp.path("pairs");
  REQUIRE(run_cli("gen-data --out " + pairs +
                  " --pairs 2 --violation teleport --frames 8 --height 16 --width 16 --seed 12")
              .exit == 0);
  REQUIRE(run_cli("train-teacher --data " + data + " --out " + tmp.path("t") +
                  " --steps 2 --batch 2 --seed 5 --model " + model)
              .exit == 0);
  REQUIRE(run_cli("train-student --data " + data + " --out " + tmp.path("s") +
                  " --steps 2 --batch 2 --seed 6 --model " + model + " --teacher " +
                  tmp.path("t") + "/final.ckpt")
              .exit == 0);

  const std::string base = "surprise --checkpoint " + tmp.path("s") + "/final.ckpt --data " +
                           pairs + " --context 2 --future 2 --stride 2";
  const CliResult r = run_cli(base + " --teacher " + tmp.path("t") + "/final.ckpt --out " +
                              tmp.path("rep"));
  CHECK(r.exit == 0);
  CHECK(kv(r.out, "pairs") == "2");
  CHECK(kv_num(r.out, "accuracy") >= 0.0);
  CHECK(std::ifstream(tmp.path("rep") + "/pair-surprise.json").good());

  // a stage-2 checkpoint has no embedded teacher collection
  CHECK(run_cli(base).exit == 2);

  // the EMA baseline checkpoint does
  REQUIRE(run_cli("train-ema --data " + data + " --out " + tmp.path("e") +
                  " --steps 2 --batch 2 --seed 7 --model " + model)
              .exit == 0);
  const CliResult e = run_cli("surprise --checkpoint " + tmp.path("e") +
                              "/final.ckpt --data " + pairs + " --context 2 --future 2");
  CHECK(e.exit == 0);
  CHECK(kv(e.out, "pairs") == "2");

  // single-clip mode prints the window series
  const CliResult w = run_cli("surprise --checkpoint " + tmp.path("e") + "/final.ckpt --data " +
                              data + " --clip 0 --context 2 --future 2 --stride 2");
  CHECK(w.exit == 0);
  CHECK(kv(w.out, "windows") == "2");

  // pair accuracy over a non-pair dataset is a config error
  CHECK(run_cli("surprise --checkpoint " + tmp.path("e") + "/final.ckpt --data " + data +
                " --context 2 --future 2")
            .exit == 2);
}

TEST_CASE("rankme prints a bounded effective rank") {
  testutil::TempDir tmp("cli-rank");
  const std::string data = gen_micro_data(tmp, "data", 11);
  const std::string model = micro_model_file(tmp);
  REQUIRE(run_cli("train-teacher --data " + data + " --out " + tmp.path("t") +
                  " --steps 2 --batch 2 --seed 5 --model " + model)
              .exit == 0);
  const CliResult r =
      run_cli("rankme --checkpoint " + tmp.path("t") + "/final.ckpt --data " + data +
              " --split all");
  CHECK(r.exit == 0);
  const double value = kv_num(r.out, "rankme");
  CHECK(value >= 1.0);
  CHECK(value <= 12.0);
  CHECK(kv(r.out, "clips") == "24");
  CHECK(run_cli("rankme --checkpoint " + tmp.path("t") + "/final.ckpt --data " + data +
                " --split sideways")
            .exit == 2);
}

TEST_CASE("sweep emits one row per split plus the baseline") {
  testutil::TempDir tmp("cli-sweep");
  const std::string data = gen_micro_data(tmp, "data", 11);
  const std::string model = micro_model_file(tmp);
  const CliResult r = run_cli("sweep --data " + data + " --out " + tmp.path("sw") +
                              " --total-steps 4 --splits 2:2 --batch 2 --model " + model +
                              " --probe-epochs 1 --probe-lr 1e-3 --seed 8");
  CHECK(r.exit == 0);
  CHECK(contains(r.out, "tag=t2+s2"));
  CHECK(contains(r.out, "tag=ema-baseline"));
  CHECK(std::ifstream(tmp.path("sw") + "/sweep.json").good());

  const CliResult no_ema = run_cli("sweep --data " + data + " --out " + tmp.path("sw2") +
                                   " --total-steps 4 --splits 2:2 --batch 2 --model " + model +
                                   " --probe-epochs 1 --probe-lr 1e-3 --seed 8 --no-ema");
  CHECK(no_ema.exit == 0);
  CHECK(!contains(no_ema.out, "ema-baseline"));

  // splits must sum to the budget
  CHECK(run_cli("sweep --data " + data + " --out " + tmp.path("sw3") +
                " --total-steps 4 --splits 2:3 --batch 2 --model " + model)
            .exit == 2);
}

TEST_CASE("mask-stats reports the published combined ratio band") {
  const CliResult mb = run_cli("mask-stats --strategy multiblock --samples 2000 --seed 3");
  CHECK(mb.exit == 0);
  const double mean = kv_num(mb.out, "ratio_mean");
  CHECK(mean > 0.85);
  CHECK(mean < 0.95);

  // random tube is exact to rounding: every draw masks round(r * HW) columns
  const CliResult rt = run_cli(
      "mask-stats --strategy random_tube --grid-t 4 --grid-h 4 --grid-w 4 --tube-ratio 0.5 "
      "--samples 200 --seed 3");
  CHECK(rt.exit == 0);
  CHECK(kv_num(rt.out, "ratio_mean") == 0.5);
  CHECK(kv_num(rt.out, "ratio_stddev") == 0.0);

  CHECK(run_cli("mask-stats --strategy sideways").exit == 2);
}

TEST_CASE("run config documents parse strictly and round trip") {
  RunConfig rc;
  rc.seed = 17;
  rc.out_dir = "somewhere";
  rc.dataset_dir = "data";
  rc.train.stage = "stage2";
  rc.train.student_steps = 9;
  rc.train.teacher_checkpoint = "t/final.ckpt";
  rc.probe.epochs = 3;
  rc.surprise.stride = 4;

  const std::string text = rc.to_json();
  const RunConfig back = RunConfig::from_json(text);
  CHECK(back.to_json() == text);
  CHECK(back.seed == 17);
  CHECK(back.train.student_steps == 9);
  CHECK(back.probe.epochs == 3);
  CHECK(back.surprise.stride == 4);
  CHECK(back.has_model);
  CHECK(back.has_train);

  // the assembled plan mirrors the document
  const TrainPlan plan = back.plan();
  CHECK(plan.stage == "stage2");
  CHECK(plan.teacher_checkpoint == "t/final.ckpt");
  CHECK(plan.seed == 17);
  CHECK(plan.out_dir == "somewhere");

  // registry names resolve in the model slot
  const RunConfig named = RunConfig::from_json(R"({"model": "tiny-l"})");
  CHECK(named.model.name == "tiny-l");
  CHECK(named.has_model);

  auto kind_of = [](const std::string& text_in) {
    try {
      RunConfig::from_json(text_in);
    } catch (const Error& e) {
      return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::Usage;
  };
  CHECK(kind_of(R"({"sede": 1})") == ErrorKind::Config);
  CHECK(kind_of(R"({"train": {"stagey": "x"}})") == ErrorKind::Config);
  CHECK(kind_of(R"({"probe": {"epoch": 1}})") == ErrorKind::Config);
  CHECK(kind_of(R"({"surprise": {"ctx": 1}})") == ErrorKind::Config);
  CHECK(kind_of(R"({"train": {"multiblock": {"short_scales": 0.2}}})") == ErrorKind::Config);
  CHECK(kind_of(R"({"seed": "seven"})") == ErrorKind::Config);
  CHECK(kind_of(R"(not json)") == ErrorKind::Config);
  CHECK(kind_of(R"([1, 2])") == ErrorKind::Config);
}
