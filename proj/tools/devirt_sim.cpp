// Copyright 2026 The devirt-sim Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

/// devirt_sim: scenario runner and CSV comparator.
///
///   devirt_sim --config run.conf --mode nonblocking --out run.csv
///   devirt_sim compare a.csv b.csv --assert "a:slowdown > b:slowdown"

#include <CLI11.hpp>

#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "devirt/harness.hpp"

namespace h = devirt::harness;

namespace
{

  constexpr int kExitPass = 0;
  constexpr int kExitFail = 1;
  constexpr int kExitInvalid = 2;

  std::vector<h::Metric> load_csv(const std::string& path)
  {
    std::ifstream in(path);
    if (!in)
      devirt::raise(devirt::Errc::invalid_config, "cannot open " + path);
    return h::read_csv(in);
  }

  /// Kills the process if the scenario outlives its budget.
  class Watchdog
  {
  public:
    explicit Watchdog(std::chrono::milliseconds budget)
      : thread_([this, budget] {
          std::unique_lock lock(mu_);
          if (!cv_.wait_for(lock, budget, [this] { return done_; }))
            {
              std::fprintf(stderr, "devirt_sim: watchdog expired after %lld ms\n",
                           static_cast<long long>(budget.count()));
              std::fflush(stderr);
              std::_Exit(kExitFail);
            }
        })
    {
    }

    ~Watchdog()
    {
      {
        std::lock_guard lock(mu_);
        done_ = true;
      }
      cv_.notify_all();
      thread_.join();
    }

  private:
    std::mutex mu_;
    std::condition_variable cv_;
    bool done_ = false;
    std::thread thread_;
  };

  int run(const h::ScenarioConfig& config)
  {
    // Scenarios without a set duration get a generous default budget.
    const auto budget = std::chrono::milliseconds(
      (config.duration.count() > 0 ? config.duration.count() / 1000 : 120'000) + 10'000);
    h::ScenarioReport report;
    {
      Watchdog dog(budget);
      report = h::run_scenario(config);
    }
    const std::string out = config.out.empty() ? config.scenario + ".csv" : config.out;
    std::ofstream csv(out);
    h::write_csv(csv, report.metrics);
    std::ofstream summary(out + ".summary");
    h::write_summary(summary, report.assertions);
    h::write_summary(std::cout, report.assertions);
    std::cout << (report.passed() ? "PASS " : "FAIL ") << config.scenario << " (" << report.metrics.size()
              << " metrics -> " << out << ")\n";
    return report.passed() ? kExitPass : kExitFail;
  }

} // namespace

int main(int argc, char** argv)
{
  CLI::App app{"Device-file boundary I/O virtualization simulator"};
  app.require_subcommand(0, 1);

  std::string config_path;
  std::string scenario;
  std::string mode;
  std::string has;
  std::string memvirt;
  std::string out;
  unsigned guests = 0;
  unsigned vcpus = 0;
  uint64_t seed = 0;
  unsigned repeats = 0;
  std::vector<std::string> sets;
  bool list = false;

  app.add_option("--config", config_path, "Config file")->check(CLI::ExistingFile);
  app.add_option("--scenario", scenario, "Scenario name");
  app.add_option("--mode", mode, "Device mode: blocking or nonblocking");
  app.add_option("--has", has, "Hybrid address space: software or hardware");
  app.add_option("--memvirt", memvirt, "Guest memory virtualization: shadow or tdp");
  app.add_option("--guests", guests, "Guest count");
  app.add_option("--vcpus", vcpus, "vCPUs per guest");
  app.add_option("--seed", seed, "Seed");
  app.add_option("--repeats", repeats, "Repeat count");
  app.add_option("--out", out, "CSV output path; the summary goes to <out>.summary");
  app.add_option("--set", sets, "Extra key=value (dotted key, e.g. params.period_ms=40)");
  app.add_flag("--list", list, "List scenarios and exit");

  auto* compare = app.add_subcommand("compare", "Ordering assertions over two CSV runs");
  std::string csv_a;
  std::string csv_b;
  std::vector<std::string> asserts;
  bool diff = false;
  compare->add_option("a", csv_a, "First run (a)")->required()->check(CLI::ExistingFile);
  compare->add_option("b", csv_b, "Second run (b)")->required()->check(CLI::ExistingFile);
  compare->add_option("--assert", asserts, "e.g. \"a:slowdown > b:slowdown\"");
  compare->add_flag("--diff-counting", diff, "Fail if any counting metric differs");

  try
    {
      app.parse(argc, argv);
    }
  catch (const CLI::ParseError& e)
    {
      const int rc = app.exit(e);
      return rc == 0 ? kExitPass : kExitInvalid;
    }

  try
    {
      if (list)
        {
          for (const auto& name : h::scenario_names())
            std::cout << name << '\n';
          return kExitPass;
        }

      if (compare->parsed())
        {
          const auto a = load_csv(csv_a);
          const auto b = load_csv(csv_b);
          auto results = h::compare_runs(a, b, asserts);
          if (diff)
            {
              const auto rows = h::diff_counting(a, b);
              std::string detail = rows.empty() ? "no counting rows differ" : std::to_string(rows.size()) + " rows differ";
              for (const auto& r : rows)
                detail += "; " + r;
              results.push_back({"counting_metrics_identical", rows.empty(), detail});
            }
          h::write_summary(std::cout, results);
          bool pass = true;
          for (const auto& r : results)
            pass = pass && r.pass;
          return pass ? kExitPass : kExitFail;
        }

      h::ScenarioConfig config;
      if (!config_path.empty())
        {
          std::ifstream in(config_path);
          config = h::parse_config(in);
        }
      if (!scenario.empty())
        config.scenario = scenario;
      if (guests)
        h::apply_setting(config, "guests.count", std::to_string(guests));
      if (vcpus)
        h::apply_setting(config, "guests.vcpus", std::to_string(vcpus));
      if (!memvirt.empty())
        h::apply_setting(config, "guests.memvirt", memvirt);
      if (!mode.empty())
        h::apply_setting(config, "io.mode", mode);
      if (!has.empty())
        h::apply_setting(config, "io.has", has);
      if (app.count("--seed"))
        config.seed = seed;
      if (repeats)
        config.repeats = repeats;
      if (!out.empty())
        config.out = out;
      for (const auto& kv : sets)
        {
          const auto eq = kv.find('=');
          if (eq == std::string::npos)
            devirt::raise(devirt::Errc::invalid_config, "--set " + kv + ": expected key=value");
          h::apply_setting(config, kv.substr(0, eq), kv.substr(eq + 1));
        }
      h::validate(config);
      return run(config);
    }
  catch (const devirt::Error& e)
    {
      std::cerr << "devirt_sim: " << e.what() << '\n';
      return e.code() == devirt::Errc::invalid_config ? kExitInvalid : kExitFail;
    }
  catch (const std::exception& e)
    {
      std::cerr << "devirt_sim: " << e.what() << '\n';
      return kExitFail;
    }
}
