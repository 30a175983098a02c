// Command-line front end: train / trace-lambda / ablate / compare / selftest.
// Exit codes: 0 success, 2 configuration error, 3 numerical failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "detlab/checkpoint.hpp"
#include "detlab/harness.hpp"

#include "brute_match.hpp"  // exhaustive assignment oracle
#include "mc_oracle.hpp"    // Monte-Carlo area oracle
#include "op_suite.hpp"     // finite-difference gradient suite

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

int run_train(const std::string& config_path, std::uint64_t seed,
              const std::string& out_dir) {
  detlab::ExperimentConfig cfg = detlab::load_experiment_config(config_path);
  detlab::RunRecord rec = detlab::train(cfg, seed, out_dir);
  const auto& last = rec.epochs.back();
  std::cout << "trained " << rec.epochs.size() << " epochs; final train loss "
            << detlab::format_double(last.train_loss);
  if (last.val_defined)
    std::cout << ", val AP@0.5 " << detlab::format_double(last.val_ap50) << ", val mean AP "
              << detlab::format_double(last.val_ap_mean);
  std::cout << "\nartifacts in " << out_dir << "\n";
  return kExitOk;
}

int run_trace_lambda(const std::string& checkpoint_path, const std::string& out_csv) {
  detlab::DecoderParams params = detlab::load_checkpoint(checkpoint_path);
  auto rows = detlab::lambda_rows(params);
  detlab::write_lambda_csv(out_csv, rows);
  std::cout << "wrote " << rows.size() << " mixing rows to " << out_csv << "\n";
  for (std::size_t l = 0; l < rows.size(); ++l)
    std::cout << "layer " << (l + 1) << ": local " << rows[l][0] << "  medium "
              << rows[l][1] << "  global " << rows[l][2] << "\n";
  return kExitOk;
}

int run_ablate(const std::string& config_path, const std::string& axis, int seeds,
               std::uint64_t base_seed, const std::string& out_dir) {
  detlab::ExperimentConfig cfg = detlab::load_experiment_config(config_path);
  detlab::AblationResult res = detlab::ablate(cfg, axis, seeds, out_dir, base_seed);
  std::cout << "ablation axis " << axis << ": " << res.runs.size() << " runs over "
            << seeds << " seed(s); tables in " << out_dir << "\n";
  return kExitOk;
}

int run_compare(const std::vector<std::string>& config_paths, std::uint64_t seed,
                const std::string& out_csv) {
  std::vector<std::pair<std::string, detlab::ExperimentConfig>> named;
  for (const auto& path : config_paths) {
    std::string name = std::filesystem::path(path).stem().string();
    for (const auto& [existing, cfg] : named)
      if (existing == name) name += "_b";
    named.emplace_back(name, detlab::load_experiment_config(path));
  }
  detlab::compare_convergence(named, seed, out_csv);
  std::cout << "wrote convergence columns for " << named.size() << " configs to "
            << out_csv << "\n";
  return kExitOk;
}

bool report(const std::string& name, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << "  " << name << " (" << detail << ")\n";
  return ok;
}

int run_selftest() {
  bool all_ok = true;

  {
    auto suite = opsuite::run_op_gradient_suite(25, 0xde7ab, 1e-5);
    all_ok &= report("op gradient suite", suite.max_err < 1e-4,
                     std::to_string(suite.ops) + " ops x " + std::to_string(suite.instances) +
                         " instances, max err " + detlab::format_double(suite.max_err));
  }

  {
    detlab::Rng rng(0x5e1f);
    bool ok = true;
    for (int n = 2; n <= 5 && ok; ++n) {
      for (int trial = 0; trial < 20 && ok; ++trial) {
        detlab::CostMatrix cost(n, n);
        for (auto& v : cost.c) v = rng.uniform(-2.0, 2.0);
        auto fast = detlab::hungarian(cost);
        auto exhaustive = brute::solve(cost);
        ok = fast.total_cost == exhaustive.best;
      }
    }
    all_ok &= report("assignment vs exhaustive search", ok, "sizes 2..5, 20 trials each");
  }

  {
    detlab::Rng rng(0x910f);
    double worst = 0.0;
    for (int k = 0; k < 10; ++k) {
      auto a = mcoracle::random_box(rng);
      auto b = mcoracle::random_box(rng);
      const double mc = mcoracle::giou_mc(a, b, 200000, rng);
      worst = std::max(worst, std::fabs(mc - detlab::giou(a, b)));
    }
    all_ok &= report("overlap score vs Monte-Carlo", worst < 1e-2,
                     "10 pairs, worst gap " + detlab::format_double(worst));
  }

  return all_ok ? kExitOk : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"relation-aware detection decoder lab"};
  app.require_subcommand(1);

  std::string config_path, out_path, checkpoint_path, axis;
  std::vector<std::string> config_paths;
  std::uint64_t seed = 1, base_seed = 1;
  int seeds = 1;

  auto* train_cmd = app.add_subcommand("train", "train a model on synthetic scenes");
  train_cmd->add_option("--config", config_path, "experiment config JSON")->required();
  train_cmd->add_option("--seed", seed, "master seed (default 1)");
  train_cmd->add_option("--out", out_path, "output directory")->required();

  auto* trace_cmd =
      app.add_subcommand("trace-lambda", "emit per-layer mixing weights as CSV");
  trace_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint path")->required();
  trace_cmd->add_option("--out", out_path, "output CSV path")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "paired-seed ablation over one axis");
  ablate_cmd->add_option("--config", config_path, "experiment config JSON")->required();
  ablate_cmd->add_option("--axis", axis, "heads or components")->required();
  ablate_cmd->add_option("--seeds", seeds, "number of paired seeds (default 1)");
  ablate_cmd->add_option("--base-seed", base_seed, "seed-list generator (default 1)");
  ablate_cmd->add_option("--out", out_path, "output directory")->required();

  auto* compare_cmd =
      app.add_subcommand("compare", "aligned per-epoch val AP for several configs");
  compare_cmd->add_option("--configs", config_paths, "two or more config paths")
      ->required()
      ->expected(-2);
  compare_cmd->add_option("--seed", seed, "master seed (default 1)");
  compare_cmd->add_option("--out", out_path, "output CSV path")->required();

  app.add_subcommand("selftest", "run the oracle and gradient suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train_cmd->parsed()) return run_train(config_path, seed, out_path);
    if (trace_cmd->parsed()) return run_trace_lambda(checkpoint_path, out_path);
    if (ablate_cmd->parsed())
      return run_ablate(config_path, axis, seeds, base_seed, out_path);
    if (compare_cmd->parsed()) return run_compare(config_paths, seed, out_path);
    return run_selftest();
  } catch (const detlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const detlab::NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << "\n"
              << e.diagnostic.dump(2) << "\n";
    if (!out_path.empty()) {
      std::filesystem::create_directories(out_path);
      std::ofstream dump(out_path + "/abort_dump.json");
      dump << e.diagnostic.dump(2) << "\n";
    }
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}
