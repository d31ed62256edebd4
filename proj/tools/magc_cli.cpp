// SPDX-License-Identifier: Apache-2.0
//
// magc: planning, benchmark sweeps, gradient checks, calibration and training.
// Exit codes: 0 success, 1 check failure, 2 usage error.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "magc/magc.hpp"

namespace {

using namespace magc;
using nlohmann::json;

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 0;
  std::string precision = "f64";
  std::string out;
  std::optional<std::uint64_t> budget_units;
  std::size_t granularity = 1;
  bool paper_faithful = false;

  bool f32() const { return precision == "f32"; }
};

struct Geometry {
  std::size_t layers = 2;
  std::size_t dim = 8;
  std::size_t heads = 2;
  std::size_t state = 4;

  ModelConfig config() const { return ModelConfig::make(layers, dim, heads, state); }
};

void add_geometry(CLI::App* app, Geometry& g) {
  app->add_option("--layers", g.layers, "number of SSD layers (L)")->capture_default_str();
  app->add_option("--dim", g.dim, "model width d")->capture_default_str();
  app->add_option("--heads", g.heads, "heads H")->capture_default_str();
  app->add_option("--state", g.state, "state size N per head")->capture_default_str();
}

// Writes to --out when given, otherwise to stdout.
void emit(const Globals& gl, const std::string& text) {
  if (gl.out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(gl.out);
  if (!f) throw UsageError("cannot open '" + gl.out + "' for writing");
  f << text;
}

std::size_t plan_granularity(const Globals& gl, std::size_t seq) {
  if (gl.paper_faithful && seq >= kPaperGranularity) return kPaperGranularity;
  return gl.granularity;
}

CostConstants load_constants(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read constants file '" + path + "'");
  try {
    const json j = json::parse(f);
    // Accepts a bare constants object or a calibration report.
    return (j.contains("constants") ? j.at("constants") : j).get<CostConstants>();
  } catch (const json::exception& e) {
    throw UsageError("bad constants file '" + path + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------

struct PlanArgs {
  std::size_t layers = 0;
  std::size_t seq = 0;
  std::string constants;
  std::string preset;
};

int cmd_plan(const Globals& gl, const PlanArgs& a) {
  if (a.layers < 1 || a.seq < 1) throw UsageError("plan: --layers and --seq must be >= 1");
  if (!a.constants.empty() && !a.preset.empty()) {
    throw UsageError("plan: --constants and --preset are mutually exclusive");
  }
  CostConstants k = CostConstants::unit();
  if (!a.constants.empty()) k = load_constants(a.constants);
  if (!a.preset.empty()) k = mamba2_constants(a.preset);
  const auto report = optimal_plan(a.layers, a.seq, k, plan_granularity(gl, a.seq));
  emit(gl, to_json(report).dump(2) + "\n");
  return kOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  Geometry geom{8, 16, 2, 4};
  std::vector<std::size_t> layers{8};
  unsigned seq_min_pow = 8;
  unsigned seq_max_pow = 10;
  std::vector<std::string> strategies{"gc_off", "gc_on", "sqrt_gc", "magc"};
  std::size_t repeats = 1;
  std::string plot;
};

int cmd_bench(const Globals& gl, const BenchArgs& a) {
  BenchOptions o;
  o.layers = a.layers;
  o.dim = a.geom.dim;
  o.heads = a.geom.heads;
  o.state = a.geom.state;
  o.seq_min_pow = a.seq_min_pow;
  o.seq_max_pow = a.seq_max_pow;
  o.strategies.clear();
  for (const auto& s : a.strategies) o.strategies.push_back(parse_strategy_kind(s));
  o.seed = gl.seed;
  o.budget_units = gl.budget_units;
  o.granularity = gl.granularity;
  o.paper_faithful = gl.paper_faithful;
  o.repeats = a.repeats;
  for (std::size_t L : o.layers) ModelConfig::make(L, o.dim, o.heads, o.state);

  const auto recs = gl.f32() ? run_bench<float>(o) : run_bench<double>(o);
  std::ostringstream csv;
  write_bench_csv(csv, recs);
  emit(gl, csv.str());

  std::string plot = a.plot;
  if (plot.empty() && !gl.out.empty()) plot = gl.out + ".plot.dat";
  if (!plot.empty()) {
    std::ofstream f(plot);
    if (!f) throw UsageError("cannot open '" + plot + "' for writing");
    write_plot_data(f, recs);
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  Geometry geom{2, 4, 2, 2};
  std::size_t seq = 12;
  double eps = 1e-5;
  std::string task = "delayed_copy";
  bool corrupt = false;
};

int cmd_gradcheck(const Globals& gl, const GradcheckArgs& a) {
  if (gl.f32()) throw UsageError("gradcheck: finite differences require --precision f64");
  const auto cfg = a.geom.config();
  GradcheckOptions opt;
  opt.seed = gl.seed;
  opt.corrupt = a.corrupt;
  const auto res = gradcheck_fd(cfg, {parse_task_kind(a.task), a.seq, cfg.dim, 1, gl.seed}, a.eps, opt);
  emit(gl, to_json(res).dump(2) + "\n");
  return res.pass ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------------------

struct CalibrateArgs {
  Geometry geom{8, 16, 2, 4};
  std::string probes;
};

// "l:s:S,l:s:S,..."
std::vector<CheckpointPlan> parse_probes(const std::string& text, std::vector<std::size_t>& seqs) {
  std::vector<CheckpointPlan> plans;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t l = 0, s = 0, S = 0;
    char c1 = 0, c2 = 0;
    std::istringstream is(item);
    if (!(is >> l >> c1 >> s >> c2 >> S) || c1 != ':' || c2 != ':' || !is.eof()) {
      throw UsageError("calibrate: bad probe '" + item + "' (expected l:s:S)");
    }
    plans.push_back({l, s, 1});
    seqs.push_back(S);
  }
  return plans;
}

template <typename T>
double probe_overhead(const ModelConfig& cfg, const CheckpointPlan& p, std::size_t S,
                      std::uint64_t seed) {
  const auto model = Model<T>::create(cfg, seed);
  const auto data = gen_task<T>({TaskKind::delayed_copy, S, cfg.dim, 1, seed});
  ActivationLedger ledger;
  const auto r = run_strategy(model, data.x, data.target, Strategy::magc(p), ledger);
  return static_cast<double>(r.metrics.overhead_units);
}

int cmd_calibrate(const Globals& gl, const CalibrateArgs& a) {
  std::vector<std::size_t> seqs;
  const auto plans = parse_probes(a.probes, seqs);
  if (plans.size() < 4) {
    throw UsageError("calibrate: need at least 4 probes, got " + std::to_string(plans.size()));
  }
  const auto cfg = a.geom.config();
  std::vector<Probe> probes;
  json runs = json::array();
  for (std::size_t k = 0; k < plans.size(); ++k) {
    plans[k].validate(cfg.layers, seqs[k]);
    const double m = gl.f32() ? probe_overhead<float>(cfg, plans[k], seqs[k], gl.seed)
                              : probe_overhead<double>(cfg, plans[k], seqs[k], gl.seed);
    probes.push_back({cfg.layers, seqs[k], plans[k].l, plans[k].s, m});
    runs.push_back({{"l", plans[k].l}, {"s", plans[k].s}, {"S", seqs[k]}, {"measured", m}});
  }
  CalibrationResult res;
  try {
    res = calibrate(probes);
  } catch (const CalibrationError& e) {
    throw UsageError(e.what());
  }
  json j = to_json(res);
  j["probes"] = runs;
  emit(gl, j.dump(2) + "\n");
  if (!res.ok) {
    std::cerr << "magc: calibration failed: " << res.message << "\n";
    return kCheckFailed;
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  Geometry geom{2, 8, 2, 4};
  std::string task = "decay_sum";
  std::size_t seq = 128;
  std::size_t steps = 300;
  std::string strategy = "magc";
  double lr = 1e-2;
  std::string optimizer = "adam";
  std::size_t delay = 1;
};

template <typename T>
TrainResult run_train(const Globals& gl, const TrainArgs& a) {
  const auto cfg = a.geom.config();
  TrainOptions opt;
  opt.lr = a.lr;
  opt.optimizer = a.optimizer == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
  const auto kind = parse_strategy_kind(a.strategy);
  if (kind == StrategyKind::magc) opt.plan = default_plan<T>(cfg, a.seq, plan_granularity(gl, a.seq));
  return train<T>(cfg, {parse_task_kind(a.task), a.seq, cfg.dim, a.delay, gl.seed}, a.steps, kind,
                  gl.seed, opt);
}

int cmd_train(const Globals& gl, const TrainArgs& a) {
  const auto res = gl.f32() ? run_train<float>(gl, a) : run_train<double>(gl, a);
  std::ostringstream csv;
  write_loss_csv(csv, res.losses);
  emit(gl, csv.str());
  if (res.diverged) {
    std::cerr << "magc: " << res.message << "\n";
    return kCheckFailed;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-axis gradient checkpointing for stacked SSD layers"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  app.set_config("--config", "", "key = value configuration file; flags take precedence");

  Globals gl;
  app.add_option("--seed", gl.seed, "RNG seed")->capture_default_str();
  app.add_option("--precision", gl.precision, "element precision")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  app.add_option("--out", gl.out, "output path (stdout when omitted)");
  app.add_option("--budget-units", gl.budget_units, "activation byte budget per run");
  app.add_option("--granularity", gl.granularity, "sequence interval granularity")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_flag("--paper-faithful", gl.paper_faithful, "use 256-step granularity for S >= 256");

  PlanArgs plan;
  auto* plan_cmd = app.add_subcommand("plan", "optimal checkpoint intervals for (L, S)");
  plan_cmd->add_option("--layers", plan.layers)->required();
  plan_cmd->add_option("--seq", plan.seq)->required();
  plan_cmd->add_option("--constants", plan.constants, "JSON cost constants");
  plan_cmd->add_option("--preset", plan.preset, "mamba2-370m | mamba2-1.3b | mamba2-2.7b");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "strategy sweep to CSV");
  bench_cmd->add_option("--layers", bench.layers, "layer counts")->delimiter(',');
  bench_cmd->add_option("--dim", bench.geom.dim)->capture_default_str();
  bench_cmd->add_option("--heads", bench.geom.heads)->capture_default_str();
  bench_cmd->add_option("--state", bench.geom.state)->capture_default_str();
  bench_cmd->add_option("--seq-min-pow", bench.seq_min_pow)->capture_default_str();
  bench_cmd->add_option("--seq-max-pow", bench.seq_max_pow)->capture_default_str();
  bench_cmd->add_option("--strategies", bench.strategies)->delimiter(',');
  bench_cmd->add_option("--repeats", bench.repeats, "timing repeats (median)")
      ->check(CLI::PositiveNumber);
  bench_cmd->add_option("--plot", bench.plot, "plot-data path (default <out>.plot.dat)");

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_geometry(gc_cmd, gc.geom);
  gc_cmd->add_option("--seq", gc.seq)->capture_default_str();
  gc_cmd->add_option("--eps", gc.eps)->capture_default_str();
  gc_cmd->add_option("--task", gc.task)->capture_default_str();
  gc_cmd->add_flag("--corrupt", gc.corrupt, "perturb one analytic gradient (negative control)");

  CalibrateArgs cal;
  auto* cal_cmd = app.add_subcommand("calibrate", "fit cost constants from measured probes");
  add_geometry(cal_cmd, cal.geom);
  cal_cmd->add_option("--probes", cal.probes, "comma-separated l:s:S plans")->required();

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "train on a synthetic task, loss curve to CSV");
  add_geometry(tr_cmd, tr.geom);
  tr_cmd->add_option("--task", tr.task)->check(CLI::IsMember({"decay_sum", "delayed_copy"}));
  tr_cmd->add_option("--seq", tr.seq)->capture_default_str();
  tr_cmd->add_option("--steps", tr.steps)->capture_default_str();
  tr_cmd->add_option("--strategy", tr.strategy)
      ->check(CLI::IsMember({"gc_off", "gc_on", "sqrt_gc", "magc"}));
  tr_cmd->add_option("--lr", tr.lr)->capture_default_str();
  tr_cmd->add_option("--optimizer", tr.optimizer)->check(CLI::IsMember({"adam", "sgd"}));
  tr_cmd->add_option("--delay", tr.delay)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*plan_cmd) return cmd_plan(gl, plan);
    if (*bench_cmd) return cmd_bench(gl, bench);
    if (*gc_cmd) return cmd_gradcheck(gl, gc);
    if (*cal_cmd) return cmd_calibrate(gl, cal);
    if (*tr_cmd) return cmd_train(gl, tr);
  } catch (const UsageError& e) {
    std::cerr << "magc: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    std::cerr << "magc: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "magc: error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}
