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

#pragma once

#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "devirt/simulator.hpp"

namespace devirt::harness
{

  struct ScenarioConfig
  {
    std::string scenario = "op_latency";
    SimConfig sim;
    /// Per-device override of the default mode, keyed by device name.
    std::map<std::string, bool> device_nonblocking;
    bool polling = false;
    uint64_t seed = 1;
    unsigned repeats = 1;
    /// Scenario length; 0 keeps the scenario default.
    uint32_t iterations = 0;
    Micros duration{0};
    std::string out;
    /// Scenario-specific knobs from the [params] section.
    std::map<std::string, std::string> params;

    double param(const std::string& key, double fallback) const;
  };

  /// Names every scenario run_scenario accepts.
  const std::vector<std::string>& scenario_names();

  /// Plain-text config: [section] headers and key = value lines, '#'
  /// comments. Raises InvalidConfig with the line number.
  ScenarioConfig parse_config(std::istream& in);

  /// Sets one dotted key ("io.mode", "guest.1.vcpus", ...). Raises
  /// InvalidConfig for unknown keys or bad values.
  void apply_setting(ScenarioConfig& config, const std::string& key, const std::string& value);

  /// Checks cross-field constraints; raises InvalidConfig.
  void validate(const ScenarioConfig& config);

  struct Metric
  {
    std::string scenario;
    unsigned run_id = 0;
    std::string metric;
    double value = 0;
    std::string unit;

    /// Counting metrics are reproducible for a fixed seed and config.
    bool counting() const { return unit == "count"; }
  };

  struct Assertion
  {
    std::string name;
    bool pass = false;
    std::string detail;
  };

  struct ScenarioReport
  {
    std::vector<Metric> metrics;
    std::vector<Assertion> assertions;

    bool passed() const;
    /// Median over run ids of one metric; raises MissingMetric.
    double value(const std::string& metric) const;
  };

  ScenarioReport run_scenario(const ScenarioConfig& config);

  void write_csv(std::ostream& out, const std::vector<Metric>& metrics);
  /// Raises InvalidConfig on a malformed file.
  std::vector<Metric> read_csv(std::istream& in);
  void write_summary(std::ostream& out, const std::vector<Assertion>& assertions);

  /// Evaluates "a:metric OP b:metric" or "a:metric OP number", OP one of
  /// > >= < <= ==, optionally followed by "tol=<relative>" for ==. Runs
  /// are named a and b. Raises MissingMetric or InvalidConfig.
  std::vector<Assertion> compare_runs(const std::vector<Metric>& a, const std::vector<Metric>& b,
                                      const std::vector<std::string>& specs);

  /// Rows of counting metrics that differ between two runs.
  std::vector<std::string> diff_counting(const std::vector<Metric>& a, const std::vector<Metric>& b);

} // namespace devirt::harness
