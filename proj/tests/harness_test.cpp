#include "doctest.h"

#include <sstream>

#include "devirt/harness.hpp"

using namespace devirt;
using namespace devirt::harness;

namespace
{

  template <typename F>
  Errc code_of(F&& f)
  {
    try
      {
        f();
      }
    catch (const Error& e)
      {
        return e.code();
      }
    return Errc(0);
  }

  std::string message_of(const std::function<void()>& f)
  {
    try
      {
        f();
      }
    catch (const Error& e)
      {
        return e.what();
      }
    return {};
  }

  ScenarioConfig parse(const std::string& text)
  {
    std::istringstream in(text);
    return parse_config(in);
  }

} // namespace

TEST_CASE("config file sections map onto the scenario config")
{
  const auto c = parse(R"(# comment
[run]
scenario = concurrency_compile
seed = 77
repeats = 3
iterations = 12

[guests]
count = 2
vcpus = 2
memvirt = tdp

[guest.1]
vcpus = 1   # trailing comment
memory_mb = 32

[io]
mode = nonblocking
polling = yes

[devices]
fb0 = blocking

[params]
period_ms = 25
)");
  CHECK(c.scenario == "concurrency_compile");
  CHECK(c.seed == 77);
  CHECK(c.repeats == 3);
  CHECK(c.iterations == 12);
  REQUIRE(c.sim.guests.size() == 2);
  CHECK(c.sim.guests[0].vcpus == 2);
  CHECK(c.sim.guests[1].vcpus == 1);
  CHECK(c.sim.guests[1].memory_size == 32u << 20);
  CHECK(c.sim.guests[0].mem_mode == memvirt::MemMode::tdp);
  CHECK(c.sim.nonblocking);
  CHECK(c.polling);
  CHECK(c.device_nonblocking.at("fb0") == false);
  CHECK(c.param("period_ms", 40) == 25);
  CHECK(c.param("absent", 9) == 9);
}

TEST_CASE("later settings override file values")
{
  auto c = parse("[io]\nmode = blocking\nhas = software\n");
  apply_setting(c, "io.mode", "nonblocking");
  apply_setting(c, "guests.vcpus", "1");
  CHECK(c.sim.nonblocking);
  CHECK(c.sim.guests[0].vcpus == 1);
}

TEST_CASE("malformed config is rejected with the line named")
{
  CHECK(code_of([] { parse("[io]\nmode = sideways\n"); }) == Errc::invalid_config);
  CHECK(message_of([] { parse("[io]\nmode = sideways\n"); }).find("line 2") != std::string::npos);
  CHECK(code_of([] { parse("[io\n"); }) == Errc::invalid_config);
  CHECK(code_of([] { parse("novalue\n"); }) == Errc::invalid_config);
  CHECK(code_of([] { parse("[run]\ncolour = blue\n"); }) == Errc::invalid_config);
  CHECK(code_of([] { parse("[guest.3]\nvcpus = 1\n"); }) == Errc::invalid_config);
  CHECK(code_of([] { parse("[devices]\nmodem0 = blocking\n"); }) == Errc::invalid_config);
  CHECK(code_of([] { parse("[run]\nseed = -4\n"); }) == Errc::invalid_config);
}

TEST_CASE("hardware hybrid address space with a TDP guest fails validation")
{
  auto c = parse("[guests]\ncount = 2\n[guest.1]\nmemvirt = tdp\n[io]\nhas = hardware\n");
  const auto msg = message_of([&] { validate(c); });
  CHECK(msg.find("guest 1") != std::string::npos);
  CHECK(msg.find("TDP") != std::string::npos);
  CHECK(code_of([&] { run_scenario(c); }) == Errc::invalid_config);
  apply_setting(c, "guest.1.memvirt", "shadow");
  CHECK_NOTHROW(validate(c));
}

TEST_CASE("scenario-specific constraints")
{
  ScenarioConfig c;
  c.scenario = "missing";
  CHECK(code_of([&] { validate(c); }) == Errc::invalid_config);
  c.scenario = "foreground_switch";
  CHECK(code_of([&] { validate(c); }) == Errc::invalid_config);
  c.scenario = "cache_hit";
  c.sim.has_mode = HasMode::hardware;
  CHECK(code_of([&] { validate(c); }) == Errc::invalid_config);
  c.sim.has_mode = HasMode::software;
  c.device_nonblocking["fb0"] = true;
  CHECK(code_of([&] { validate(c); }) == Errc::invalid_config);
  c.device_nonblocking["fb0"] = false;
  CHECK_NOTHROW(validate(c));
  c.repeats = 0;
  CHECK(code_of([&] { validate(c); }) == Errc::invalid_config);
  for (const auto& name : scenario_names())
    {
      ScenarioConfig ok;
      ok.scenario = name;
      ok.sim.guests.resize(2);
      CHECK_NOTHROW(validate(ok));
    }
}

TEST_CASE("csv round trip keeps the fixed columns")
{
  std::vector<Metric> rows{{"op_latency", 0, "device_us", 1.25, "us"},
                           {"op_latency", 1, "ops", 400, "count"},
                           {"cache_hit", 0, "hit_rate", 0.9000000000000001, "ratio"}};
  std::stringstream buf;
  write_csv(buf, rows);
  CHECK(buf.str().rfind("scenario,run_id,metric,value,unit\n", 0) == 0);
  const auto back = read_csv(buf);
  REQUIRE(back.size() == rows.size());
  for (size_t i = 0; i < rows.size(); ++i)
    {
      CHECK(back[i].scenario == rows[i].scenario);
      CHECK(back[i].run_id == rows[i].run_id);
      CHECK(back[i].metric == rows[i].metric);
      CHECK(back[i].value == rows[i].value);
      CHECK(back[i].unit == rows[i].unit);
    }
  std::istringstream bad("scenario,run_id,metric,value,unit\nx,0,m\n");
  CHECK(code_of([&] { read_csv(bad); }) == Errc::invalid_config);
}

TEST_CASE("summary has one line per assertion")
{
  std::ostringstream out;
  write_summary(out, {{"a", true, "fine"}, {"b", false, "broken"}});
  CHECK(out.str() == "PASS a: fine\nFAIL b: broken\n");
}

TEST_CASE("compare_runs evaluates orderings across two runs")
{
  const std::vector<Metric> blocking{{"concurrency_compile", 0, "slowdown", 3.0, "ratio"},
                                     {"concurrency_compile", 1, "slowdown", 2.6, "ratio"},
                                     {"concurrency_compile", 2, "slowdown", 2.8, "ratio"}};
  const std::vector<Metric> nonblocking{{"concurrency_compile", 0, "slowdown", 1.02, "ratio"}};
  const auto r = compare_runs(blocking, nonblocking,
                              {"a:slowdown > b:slowdown", "b:slowdown <= 1.2", "a:slowdown >= 2.8",
                               "a:slowdown < b:slowdown", "a:slowdown == 2.85 tol=0.05"});
  REQUIRE(r.size() == 5);
  CHECK(r[0].pass);
  CHECK(r[1].pass);
  CHECK(r[2].pass); // median of the repeats
  CHECK_FALSE(r[3].pass);
  CHECK(r[4].pass);

  SUBCASE("identical runs are equal within tolerance")
  {
    const auto same = compare_runs(blocking, blocking, {"a:slowdown == b:slowdown tol=0"});
    CHECK(same[0].pass);
  }
  SUBCASE("absent metric")
  {
    CHECK(code_of([&] { compare_runs(blocking, nonblocking, {"a:nosuch > b:slowdown"}); }) ==
          Errc::missing_metric);
    CHECK(code_of([&] { compare_runs(blocking, nonblocking, {"b:slowdown > a:nosuch"}); }) ==
          Errc::missing_metric);
  }
  SUBCASE("malformed assertions")
  {
    CHECK(code_of([&] { compare_runs(blocking, nonblocking, {"a:slowdown ~ b:slowdown"}); }) ==
          Errc::invalid_config);
    CHECK(code_of([&] { compare_runs(blocking, nonblocking, {"c:slowdown > 1"}); }) == Errc::invalid_config);
    CHECK(code_of([&] { compare_runs(blocking, nonblocking, {"a:slowdown"}); }) == Errc::invalid_config);
    CHECK(code_of([&] { compare_runs(blocking, nonblocking, {"a:slowdown > 1 tol=0.1"}); }) ==
          Errc::invalid_config);
  }
}

TEST_CASE("diff_counting ignores timing rows")
{
  const std::vector<Metric> a{{"s", 0, "ops", 10, "count"}, {"s", 0, "t", 1.5, "us"}, {"s", 0, "x", 1, "count"}};
  const std::vector<Metric> b{{"s", 0, "ops", 10, "count"}, {"s", 0, "t", 9.5, "us"}, {"s", 0, "y", 1, "count"}};
  const auto rows = diff_counting(a, b);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == "s,0,x: only in first run");
  CHECK(rows[1] == "s,0,y: only in second run");
  CHECK(diff_counting(a, a).empty());
}

TEST_CASE("report median and missing metric")
{
  ScenarioReport r;
  r.metrics = {{"s", 0, "m", 1, "us"}, {"s", 1, "m", 5, "us"}, {"s", 2, "m", 3, "us"}};
  CHECK(r.value("m") == 3);
  CHECK(code_of([&] { r.value("n"); }) == Errc::missing_metric);
  CHECK(r.passed());
  r.assertions.push_back({"x", false, ""});
  CHECK_FALSE(r.passed());
}

TEST_CASE("mode_equivalence counting metrics reproduce for a seed")
{
  ScenarioConfig c;
  c.scenario = "mode_equivalence";
  c.iterations = 60;
  c.seed = 5;
  const auto first = run_scenario(c);
  const auto second = run_scenario(c);
  CHECK(first.passed());
  CHECK(diff_counting(first.metrics, second.metrics).empty());
  c.seed = 6;
  const auto other = run_scenario(c);
  CHECK(other.value("digest_shadow_software_blocking") != first.value("digest_shadow_software_blocking"));
}

TEST_CASE("cache_hit scenario reports its hit rate")
{
  ScenarioConfig c;
  c.scenario = "cache_hit";
  c.iterations = 100;
  const auto r = run_scenario(c);
  CHECK(r.passed());
  CHECK(r.value("hit_rate") >= 0.85);
  CHECK(r.value("cache_hits") + r.value("cache_misses") > 0);
}

TEST_CASE("repeats tag metrics with run ids")
{
  ScenarioConfig c;
  c.scenario = "cache_hit";
  c.iterations = 40;
  c.repeats = 2;
  const auto r = run_scenario(c);
  size_t run1 = 0;
  for (const auto& m : r.metrics)
    run1 += m.run_id == 1;
  CHECK(run1 == r.metrics.size() / 2);
  CHECK(r.assertions.front().name.find("#0") != std::string::npos);
}
