#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "magc/magc.hpp"

using namespace magc;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(MAGC_CLI_PATH) + " " + args + " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

std::set<std::string> keys(const json& j) {
  std::set<std::string> k;
  for (auto it = j.begin(); it != j.end(); ++it) k.insert(it.key());
  return k;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("magc_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, PlanReport) {
  const auto r = run("plan --layers 16 --seq 256");
  ASSERT_EQ(r.code, 0);
  const auto j = json::parse(r.out);
  EXPECT_EQ(keys(j), (std::set<std::string>{"l", "s", "predicted_units", "predicted_raw", "regime",
                                            "savings_ratio", "constants"}));
  EXPECT_EQ(keys(j["constants"]), (std::set<std::string>{"c_l", "c_s", "c_grid", "c_state"}));
  EXPECT_EQ(j["l"], 16);
  EXPECT_EQ(j["s"], 16);
  EXPECT_EQ(j["predicted_raw"], 768.0);
  EXPECT_EQ(run("plan --layers 16 --seq 256").out, r.out);
}

TEST_F(Cli, PlanRegimeAndGranularity) {
  EXPECT_EQ(json::parse(run("plan --layers 64 --seq 16384").out)["regime"], "LinearInS");
  const auto j = json::parse(run("plan --layers 64 --seq 16384 --paper-faithful").out);
  EXPECT_EQ(j["s"].get<int>() % 256, 0);
  const auto g = json::parse(run("plan --layers 8 --seq 1000 --granularity 100").out);
  EXPECT_EQ(g["s"].get<int>() % 100, 0);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("plan --layers 0 --seq 8").code, 2);
  EXPECT_EQ(run("plan --layers 4").code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("plan --layers 4 --seq 8 --precision f16").code, 2);
  EXPECT_EQ(run("plan --layers 4 --seq 8 --preset mamba2-7b").code, 2);
  EXPECT_EQ(run("plan --layers 4 --seq 8 --granularity 16").code, 2);
  EXPECT_EQ(run("plan --layers 4 --seq 8 --constants " + path("missing.json")).code, 2);
  EXPECT_EQ(run("bench --strategies gc_off,nope").code, 2);
  EXPECT_EQ(run("gradcheck --dim 5 --heads 2").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, PlanPreset) {
  const auto r = run("plan --layers 64 --seq 524288 --preset mamba2-2.7b --granularity 256");
  ASSERT_EQ(r.code, 0);
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["constants"]["c_grid"], 15696.0);
}

TEST_F(Cli, BenchCsvAndPlot) {
  const auto out = path("b.csv");
  const auto r = run("bench --layers 2,3 --dim 8 --seq-min-pow 4 --seq-max-pow 5 --out " + out);
  ASSERT_EQ(r.code, 0);
  const auto rows = lines(slurp(out));
  ASSERT_EQ(rows.size(), 17u);
  EXPECT_EQ(rows[0],
            "strategy,L,S,l,s,peak_units,predicted_units,overhead_units,step_evals,wall_ms,seed");
  EXPECT_EQ(rows[1].rfind("gc_off,2,16,", 0), 0u);
  EXPECT_EQ(rows[16].rfind("magc,3,32,", 0), 0u);
  const auto plot = lines(slurp(out + ".plot.dat"));
  ASSERT_FALSE(plot.empty());
  EXPECT_EQ(plot[0], "# gc_off L=2");
}

TEST_F(Cli, BenchBudgetDash) {
  const auto r = run("bench --layers 4 --dim 8 --seq-min-pow 8 --seq-max-pow 8 "
                     "--strategies gc_off,magc --budget-units 100000");
  ASSERT_EQ(r.code, 0);
  const auto rows = lines(r.out);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1], "gc_off,4,256,null,null,-,null,-,-,-,0");
  EXPECT_EQ(rows[2].find(",-,"), std::string::npos) << rows[2];
}

TEST_F(Cli, Gradcheck) {
  const auto r = run("gradcheck");
  ASSERT_EQ(r.code, 0);
  const auto j = json::parse(r.out);
  EXPECT_EQ(keys(j), (std::set<std::string>{"max_rel_err", "pass"}));
  EXPECT_TRUE(j["pass"].get<bool>());
  EXPECT_LE(j["max_rel_err"].get<double>(), 1e-6);
  EXPECT_EQ(run("gradcheck").out, r.out);
  EXPECT_EQ(run("gradcheck --corrupt").code, 1);
  EXPECT_EQ(run("gradcheck --precision f32").code, 2);
}

TEST_F(Cli, CalibrateNeedsFourProbes) {
  EXPECT_EQ(run("calibrate --probes 2:16:256,4:32:256,8:64:256").code, 2);
  EXPECT_EQ(run("calibrate --probes 2:16:256,4:32,8:64:256,1:1:1").code, 2);
}

TEST_F(Cli, CalibrationRoundTrip) {
  const auto cal = path("cal.json");
  const auto r = run("calibrate --probes 2:16:256,8:16:256,2:128:256,8:128:1024,4:32:1024,2:64:1024 "
                     "--out " + cal);
  ASSERT_EQ(r.code, 0);
  const auto j = json::parse(slurp(cal));
  EXPECT_EQ(keys(j), (std::set<std::string>{"constants", "residuals", "max_abs_residual", "ok",
                                            "probes"}));
  ASSERT_EQ(j["residuals"].size(), 6u);
  for (double e : j["residuals"]) EXPECT_LE(std::abs(e), 0.15);

  // Plan with the fitted constants, then measure that plan on a fresh run.
  const std::size_t S = 512;
  const auto plan = json::parse(run("plan --layers 8 --seq 512 --constants " + cal).out);
  const CheckpointPlan p{plan["l"].get<std::size_t>(), plan["s"].get<std::size_t>(), 1};
  const auto cfg = ModelConfig::make(8, 16, 2, 4);
  const auto model = Model<double>::create(cfg, 3);
  const auto data = gen_task<double>({TaskKind::delayed_copy, S, 16, 1, 3});
  ActivationLedger led;
  const auto measured = static_cast<double>(
      run_strategy(model, data.x, data.target, Strategy::magc(p), led).metrics.overhead_units);
  const double predicted = plan["predicted_units"].get<double>();
  EXPECT_LE(std::abs(predicted - measured) / measured, 0.15)
      << "l=" << p.l << " s=" << p.s << " predicted " << predicted << " measured " << measured;
}

TEST_F(Cli, TrainZeroSteps) {
  const auto r = run("train --steps 0");
  ASSERT_EQ(r.code, 0);
  const auto rows = lines(r.out);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], "step,loss");
  EXPECT_EQ(rows[1].rfind("0,", 0), 0u);
}

TEST_F(Cli, TrainHalvesLossAndStrategiesAgree) {
  const auto magc_rows = lines(run("train --strategy magc").out);
  const auto off_rows = lines(run("train --strategy gc_off").out);
  ASSERT_EQ(magc_rows.size(), 302u);
  ASSERT_EQ(off_rows.size(), magc_rows.size());
  auto loss = [](const std::string& row) { return std::stod(row.substr(row.find(',') + 1)); };
  EXPECT_LE(loss(magc_rows.back()), 0.5 * loss(magc_rows[1]));
  for (std::size_t k = 1; k < magc_rows.size(); ++k) {
    EXPECT_NEAR(loss(magc_rows[k]), loss(off_rows[k]), 1e-10) << k;
  }
}

TEST_F(Cli, TrainDivergenceExitsOne) {
  EXPECT_EQ(run("train --steps 20 --optimizer sgd --lr 1e100").code, 1);
}

TEST_F(Cli, ConfigFileAndPrecedence) {
  const auto cfg = path("run.toml");
  std::ofstream(cfg) << "seed = 5\n";
  const auto with_file = run("train --steps 0 --config " + cfg).out;
  EXPECT_EQ(with_file, run("train --steps 0 --seed 5").out);
  EXPECT_NE(with_file, run("train --steps 0").out);
  EXPECT_EQ(run("train --steps 0 --config " + cfg + " --seed 7").out,
            run("train --steps 0 --seed 7").out);
}

TEST_F(Cli, FloatPrecisionBench) {
  const auto r = run("bench --layers 2 --dim 8 --seq-min-pow 4 --seq-max-pow 4 --precision f32");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(lines(r.out).size(), 5u);
}
