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

// One PASS/FAIL line per acceptance criterion. Exit status is the number
// of failing criteria.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "devirt/backend.hpp"
#include "devirt/harness.hpp"
#include "devirt/hypercall.hpp"
#include "devirt/memvirt.hpp"
#include "test_support.hpp"

using namespace devirt;
using namespace devirt::memvirt;
using devirt::testing::TableScanOracle;
using devirt::testing::TestGuestOs;

namespace
{

  struct Outcome
  {
    bool pass = false;
    std::string detail;
  };

  struct Criterion
  {
    int id;
    std::string name;
    double limit_s; ///< 0 = no runtime bound
    std::function<Outcome()> run;
  };

  std::string fmt(const char* f, auto... args)
  {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
  }

  /// A 16 MiB shadow guest with a guest OS frame allocator.
  struct MemRig
  {
    explicit MemRig(MemMode mode = MemMode::shadow)
      : vm(hv.create_vm(GuestId(0), VmConfig{16u << 20, mode, 256})), os(vm)
    {
      root = os.new_process();
      vm.pool().donate_pt_pages(std::vector<uint32_t>{os.alloc_frame(), os.alloc_frame(), os.alloc_frame(),
                                                      os.alloc_frame()});
      space = std::make_unique<GuestProcessMemory>(vm, root);
    }

    Hypervisor hv;
    VmMemory& vm;
    TestGuestOs os;
    PageTableRoot root;
    std::unique_ptr<GuestProcessMemory> space;
  };

  // ------------------------------------------------------------ reports

  /// Scenario reports, kept for the cross-cutting pairing and
  /// determinism criteria.
  struct Runs
  {
    struct Entry
    {
      std::string label;
      harness::ScenarioConfig config;
      harness::ScenarioReport report;
    };
    std::vector<Entry> entries;

    const harness::ScenarioReport& run(const std::string& label, const harness::ScenarioConfig& config)
    {
      for (const auto& e : entries)
        if (e.label == label)
          return e.report;
      entries.push_back({label, config, harness::run_scenario(config)});
      return entries.back().report;
    }
  };

  Runs runs;

  harness::ScenarioConfig scenario(const std::string& name, bool nonblocking, unsigned vcpus = 2,
                                   unsigned guests = 1)
  {
    harness::ScenarioConfig c;
    c.scenario = name;
    c.sim.nonblocking = nonblocking;
    c.seed = 42;
    c.sim.guests.assign(guests, GuestConfig{});
    for (auto& g : c.sim.guests)
      g.vcpus = vcpus;
    return c;
  }

  const harness::Assertion* find_assertion(const harness::ScenarioReport& r, const std::string& name)
  {
    for (const auto& a : r.assertions)
      if (a.name == name)
        return &a;
    return nullptr;
  }

  /// Appends "name: PASS/FAIL detail" for each named assertion; false if
  /// any is missing or failing.
  bool require_assertions(const harness::ScenarioReport& r, const std::vector<std::string>& names,
                          std::string& detail, const std::string& prefix = "")
  {
    bool ok = true;
    for (const auto& n : names)
      {
        const auto* a = find_assertion(r, n);
        if (!detail.empty())
          detail += "; ";
        detail += prefix + n + (a ? (a->pass ? " ok (" : " FAILED (") + a->detail + ")" : " missing");
        ok = ok && a && a->pass;
      }
    return ok;
  }

  // --------------------------------------------------------- criteria

  Outcome translation_oracle()
  {
    std::mt19937_64 rng(2026);
    MemRig rig;
    auto& guest_mem = rig.vm.guest_memory();
    constexpr int kSamples = 10'000;
    int ok = 0;
    int agree = 0;
    int faults[4] = {0, 0, 0, 0};
    // Two address spaces, each with its own random table population.
    std::vector<PageTableRoot> roots{rig.root, rig.os.new_process()};
    std::vector<std::vector<uint32_t>> pages;
    for (const auto& root : roots)
      {
        pages.push_back(testing::random_user_pages(rng, 900, 0x8'0000));
        for (auto p : pages.back())
          rig.os.map_fresh(root, p * kPageSize);
      }
    std::uniform_int_distribution<uint32_t> any;
    for (size_t r = 0; r < roots.size(); ++r)
      {
        TableScanOracle oracle(guest_mem, roots[r].root_pfn);
        std::uniform_int_distribution<size_t> pick(0, pages[r].size() - 1);
        for (int i = 0; i < kSamples / 2; ++i)
          {
            uint32_t va = any(rng);
            if (i % 2 == 0)
              va = pages[r][pick(rng)] * kPageSize + (va & 0xfff);
            else if (i % 4 == 1)
              va = (pages[r][pick(rng)] + 1 + va % 3) * kPageSize + (va & 0xfff); // near misses
            const auto want = oracle.lookup(va);
            bool match = false;
            try
              {
                const Gpa got = walk_guest(Gva(va), roots[r], guest_mem);
                match = want.ok && got.value == want.address;
                ++ok;
              }
            catch (const PageFault& f)
              {
                match = !want.ok && f.level() == want.level;
                ++faults[std::min(f.level(), 3u)];
              }
            agree += match;
          }
      }
    const bool all_levels = faults[1] > 0 && faults[2] > 0 && faults[3] > 0;
    return {agree == kSamples && all_levels,
            fmt("%d/%d agree; %d translated, faults at L1=%d L2=%d L3=%d", agree, kSamples, ok, faults[1],
                faults[2], faults[3])};
  }

  Outcome fifo_cache_law()
  {
    std::mt19937_64 rng(11);
    int violations = 0;
    uint64_t accesses = 0;
    for (int trace = 0; trace < 1000; ++trace)
      {
        TranslationCache cache;
        std::vector<uint32_t> model;
        std::uniform_int_distribution<uint32_t> page(0, 4 + trace % 28);
        const int length = 50 + trace % 200;
        for (int i = 0; i < length; ++i, ++accesses)
          {
            const uint32_t p = page(rng);
            const bool model_hit = std::find(model.begin(), model.end(), p) != model.end();
            const auto hit = cache.lookup(p);
            if (hit.has_value() != model_hit || (hit && *hit != p * 3 + 1))
              ++violations;
            if (!hit)
              {
                cache.insert(p, p * 3 + 1);
                if (model.size() == TranslationCache::kCapacity)
                  model.erase(model.begin());
                model.push_back(p);
              }
            const auto& entries = cache.entries();
            if (entries.size() != model.size())
              ++violations;
            else
              for (size_t k = 0; k < model.size(); ++k)
                violations += entries[k].gva_page != model[k];
          }
      }

    // Looped 8-page workload through copy_user_buffer.
    MemRig rig;
    constexpr uint32_t kBase = 0x20'0000;
    for (uint32_t p = 0; p < 8; ++p)
      rig.os.map_fresh(rig.root, kBase + p * kPageSize);
    std::vector<uint8_t> buf(1024);
    for (int it = 0; it < 200; ++it)
      for (uint32_t off = 0; off < 8 * kPageSize; off += 1024)
        rig.space->copy_user_buffer(CopyDirection::from_guest, Gva(kBase + off), buf);
    const double copy_rate = rig.space->cache().hit_rate();

    // The same workload as a full scenario through the device file path.
    auto c = scenario("cache_hit", false);
    const auto& report = runs.run("cache_hit", c);
    const double scenario_rate = report.value("hit_rate");
    return {violations == 0 && copy_rate >= 0.85 && scenario_rate >= 0.85,
            fmt("%d violations over 1000 traces (%llu accesses); hit rate %.3f (copies), %.3f (cache_hit scenario)",
                violations, (unsigned long long)accesses, copy_rate, scenario_rate)};
  }

  Outcome hybrid_merge()
  {
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<uint32_t> any;
    uint64_t checked = 0;
    uint64_t mismatches = 0;
    uint64_t traps = 0;
    uint64_t kernel_hits = 0;
    uint64_t user_hits = 0;
    for (int pair = 0; pair < 50; ++pair)
      {
        MemRig rig;
        const auto pages = testing::random_user_pages(rng, 120 + pair * 3, kKernelBase / kPageSize);
        for (auto p : pages)
          rig.os.map_fresh(rig.root, p * kPageSize);
        for (auto p : pages)
          if (any(rng) % 2)
            rig.vm.fixup_trap(rig.root.owner, p * kPageSize);
        std::vector<uint32_t> kpages;
        for (int k = 0; k < 40; ++k)
          {
            const uint32_t kva = kKernelBase + (any(rng) % (0x4000'0000 / kPageSize)) * kPageSize;
            rig.hv.kernel_map(Hva(kva), Hpa::from_page(rig.hv.allocate_frame()));
            kpages.push_back(kva);
          }
        const auto& hybrid = rig.space->build_hybrid_top_level();
        const auto shadow = rig.vm.shadow_root(rig.root.owner);
        const auto& host = rig.hv.host_memory();
        for (int i = 0; i < 1000; ++i)
          {
            uint32_t va = any(rng);
            switch (i % 4)
              {
              case 0: va = pages[any(rng) % pages.size()] * kPageSize + (va & 0xfff); break;
              case 1: va = kpages[any(rng) % kpages.size()] + (va & 0xfff); break;
              default: break;
              }
            const bool user = va < kKernelBase;
            const auto want = walk(host, user ? shadow.root_pfn : rig.hv.host_root().root_pfn, va);
            bool match = false;
            try
              {
                const Hpa got = resolve_hybrid(va, hybrid, host);
                match = want.status == WalkStatus::ok && got.value == want.address;
                (user ? user_hits : kernel_hits) += match;
              }
            catch (const TrapExit& t)
              {
                match = want.status == WalkStatus::trap && user && t.level() == want.level;
                traps += match;
              }
            catch (const PageFault& f)
              {
                match = want.status == WalkStatus::fault && f.level() == want.level;
              }
            ++checked;
            mismatches += !match;
          }
      }
    return {mismatches == 0 && traps > 0 && kernel_hits > 0 && user_hits > 0,
            fmt("%llu addresses x 50 table pairs, %llu mismatches; %llu traps, %llu user and %llu kernel hits",
                (unsigned long long)checked / 50, (unsigned long long)mismatches, (unsigned long long)traps,
                (unsigned long long)user_hits, (unsigned long long)kernel_hits)};
  }

  Outcome tdp_incompatibility()
  {
    std::string detail;

    // Config path.
    auto c = scenario("op_latency", false);
    c.sim.guests[0].mem_mode = MemMode::tdp;
    c.sim.has_mode = HasMode::hardware;
    bool config_rejected = false;
    try
      {
        harness::validate(c);
      }
    catch (const Error& e)
      {
        config_rejected = e.code() == Errc::invalid_config && std::string(e.what()).find("TDP") != std::string::npos;
        detail = std::string("config: ") + e.what();
      }

    // Runtime path: the table builder and a hardware-mode device op.
    bool builder_rejected = false;
    {
      MemRig rig(MemMode::tdp);
      try
        {
          rig.space->build_hybrid_top_level();
        }
      catch (const Error& e)
        {
          builder_rejected = e.code() == Errc::tdp_unsupported;
        }
    }
    int32_t op_status = 0;
    {
      Hypervisor hv;
      ScaledClock clock;
      InterruptFabric fabric;
      EventLog log(clock);
      Backend backend(hv, clock, fabric, log);
      GuestConfig cfg;
      cfg.mem_mode = MemMode::tdp;
      Guest guest(GuestId(0), cfg, hv, clock, 0);
      fabric.attach_guest(guest.id(), guest.vcpus(), [](uint32_t, std::optional<uint32_t>) {});
      backend.attach_guest(guest.id(), HasMode::hardware);
      EventDevice mouse(DeviceId(1), clock);
      backend.add_device(mouse);
      auto& p = guest.create_process();
      Call call;
      call.guest = guest.id();
      call.process = p.id();
      call.header = {1, 0, false};
      call.op.kind = OpKind::open;
      call.op.device = 1;
      const uint32_t h = uint32_t(backend.dispatch(call).status);
      call.op = FileOp{};
      call.op.kind = OpKind::read;
      call.op.handle = h;
      call.op.user_gva = p.alloc_user_buffer(kPageSize).value;
      call.op.length = 12;
      op_status = backend.dispatch(call).status;
      backend.shutdown();
      fabric.shutdown();
    }
    const bool op_rejected = op_status == status_of(Errc::tdp_unsupported);
    detail += fmt("; build_hybrid_top_level %s; hardware-mode read status %s", builder_rejected ? "raised TdpUnsupported" : "did not raise",
                  status_name(op_status).c_str());
    return {config_rejected && builder_rejected && op_rejected, detail};
  }

  Outcome mode_equivalence()
  {
    auto c = scenario("mode_equivalence", false);
    c.iterations = 200;
    const auto& r = runs.run("mode_equivalence", c);
    std::string detail;
    const bool ok = require_assertions(r, {"byte_identical_results"}, detail);
    return {ok && r.passed() && r.value("combinations") >= 3, detail + fmt("; %g ops per combination", r.value("ops_shadow_software_blocking"))};
  }

  Outcome concurrency_ordering()
  {
    std::string detail;
    const auto& blocking = runs.run("compile_up_blocking", scenario("concurrency_compile", false, 1));
    const auto& nonblocking = runs.run("compile_up_nonblocking", scenario("concurrency_compile", true, 1));
    const auto& render = runs.run("render_blocking", scenario("concurrency_render", false, 1));
    bool ok = require_assertions(blocking, {"blocking_slowdown_at_least_2.0"}, detail, "blocking ");
    ok = require_assertions(nonblocking, {"nonblocking_slowdown_at_most_1.2"}, detail, "nonblocking ") && ok;
    ok = require_assertions(render, {"smp_drop_exceeds_up_drop"}, detail, "render ") && ok;
    ok = ok && blocking.passed() && nonblocking.passed() && render.passed();
    return {ok, detail};
  }

  Outcome poll_semantics()
  {
    std::string detail;
    const auto& nb = runs.run("poll_up_nonblocking", scenario("poll_sibling", true, 1));
    const auto& blk = runs.run("poll_up_blocking", scenario("poll_sibling", false, 1));
    bool ok = require_assertions(nb, {"nonblocking_sibling_at_least_0.9", "poll_timed_out"}, detail, "nonblocking ");
    ok = require_assertions(blk, {"blocking_sibling_at_most_0.1", "poll_timed_out"}, detail, "blocking ") && ok;
    return {ok, detail};
  }

  Outcome hypercall_framing()
  {
    std::mt19937 rng(8);
    int bad_roundtrip = 0;
    int bad_frames = 0;
    int bad_slots = 0;
    int two_frame = 0;
    for (int i = 0; i < 10'000; ++i)
      {
        FileOp op;
        op.kind = OpKind(1 + rng() % kOpKindCount);
        for (auto field : arg_layout(op.kind))
          op.*field = rng();
        const CallHeader header{uint16_t(rng()), uint8_t(rng()), bool(rng() & 1)};
        const auto frames = pack(op, header, rng() % 8, rng());
        two_frame += frames.size() == 2;
        if ((frames.size() == 2) != (op.kind == OpKind::page_fault) || frames.empty() || frames.size() > 2)
          ++bad_frames;
        // Every field the op carries must fit the frames it packs into.
        bad_slots += arg_layout(op.kind).size() > frames.size() * kFrameArgs;
        for (const auto& f : frames)
          bad_slots += f.args.size() > 6;
        const auto back = unpack(frames);
        bad_roundtrip += !(back.op == op && back.header == header);
      }
    return {bad_roundtrip == 0 && bad_frames == 0 && bad_slots == 0 && two_frame > 0,
            fmt("10000 ops: %d round-trip errors, %d frame-count errors, %d slot overflows; %d two-frame page faults",
                bad_roundtrip, bad_frames, bad_slots, two_frame)};
  }

  Outcome notification_routing()
  {
    std::string detail;
    const auto& r = runs.run("foreground_switch", scenario("foreground_switch", false, 2, 2));
    const bool ok = require_assertions(r, {"input_to_foreground_only", "input_follows_switch", "lines_separate_devices"},
                                       detail);
    return {ok, detail + fmt("; %g events per phase", r.value("a_irqs_a_foreground") + r.value("b_irqs_a_foreground"))};
  }

  Outcome driver_map()
  {
    auto c = scenario("mode_equivalence", false);
    c.iterations = 200;
    const auto& r = runs.run("mode_equivalence", c);
    std::string detail;
    bool ok = true;
    unsigned combos = 0;
    for (const auto& a : r.assertions)
      if (a.name.starts_with("map_once_"))
        {
          ++combos;
          ok = ok && a.pass;
          if (!a.pass)
            detail += a.name + ": " + a.detail + "; ";
        }
    const auto* first = find_assertion(r, "map_once_shadow_software_blocking");
    detail += fmt("%u combinations", combos) + (first ? std::string(", e.g. ") + first->detail : "");
    return {ok && combos >= 3, detail};
  }

  Outcome completion_pairing()
  {
    // Non-blocking runs of the scenarios that have not run that way yet.
    runs.run("op_latency_nonblocking", scenario("op_latency", true));
    runs.run("input_latency_nonblocking", scenario("input_latency", true));
    runs.run("foreground_switch_nonblocking", scenario("foreground_switch", true, 2, 2));
    runs.run("render_nonblocking", scenario("concurrency_render", true, 1));
    unsigned checked = 0;
    unsigned failed = 0;
    double accepted = 0;
    std::string detail;
    for (const auto& e : runs.entries)
      for (const auto& m : e.report.metrics)
        if (m.metric.ends_with("accepted_dispatches"))
          accepted += m.value;
    for (const auto& e : runs.entries)
      for (const auto& a : e.report.assertions)
        if (a.name.find("completion_pairing") != std::string::npos)
          {
            ++checked;
            if (!a.pass)
              {
                ++failed;
                detail += e.label + " " + a.detail + "; ";
              }
          }
    detail += fmt("%u pairing checks over %zu scenario runs, %u failed, %g ACCEPTED dispatches in total", checked,
                  runs.entries.size(), failed, accepted);
    return {failed == 0 && checked > 0 && accepted > 0, detail};
  }

  Outcome determinism()
  {
    unsigned differing = 0;
    unsigned compared = 0;
    std::string detail;
    std::vector<std::string> seen;
    const auto snapshot = runs.entries;
    for (const auto& e : snapshot)
      {
        if (std::find(seen.begin(), seen.end(), e.config.scenario) == seen.end())
          seen.push_back(e.config.scenario);
        const auto again = harness::run_scenario(e.config);
        const auto rows = harness::diff_counting(e.report.metrics, again.metrics);
        ++compared;
        if (!rows.empty())
          {
            ++differing;
            detail += e.label + ": " + rows.front() + "; ";
          }
      }
    detail += fmt("%u of %u configurations reproduce counting metrics; %zu distinct scenarios", compared - differing,
                  compared, seen.size());
    return {differing == 0 && seen.size() == harness::scenario_names().size(), detail};
  }

} // namespace

int main()
{
  const std::vector<Criterion> criteria{
    {1, "translation oracle", 5, translation_oracle},
    {2, "FIFO cache law", 5, fifo_cache_law},
    {3, "hybrid merge correctness", 10, hybrid_merge},
    {4, "TDP incompatibility", 0, tdp_incompatibility},
    {5, "mode equivalence", 20, mode_equivalence},
    {6, "concurrency ordering", 60, concurrency_ordering},
    {7, "poll non-blocking semantics", 10, poll_semantics},
    {8, "hypercall framing", 0, hypercall_framing},
    {9, "notification routing", 0, notification_routing},
    {10, "driver-initiated map transparency", 0, driver_map},
    {11, "completion pairing", 0, completion_pairing},
    {12, "determinism", 0, determinism},
  };
  int failures = 0;
  for (const auto& c : criteria)
    {
      const auto t0 = std::chrono::steady_clock::now();
      Outcome out;
      try
        {
          out = c.run();
        }
      catch (const std::exception& e)
        {
          out = {false, std::string("exception: ") + e.what()};
        }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (c.limit_s > 0 && secs >= c.limit_s)
        {
          out.pass = false;
          out.detail += fmt("; runtime %.2f s over the %.0f s limit", secs, c.limit_s);
        }
      failures += !out.pass;
      std::printf("%s criterion %d (%s) [%.2f s]: %s\n", out.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), secs,
                  out.detail.c_str());
      std::fflush(stdout);
    }
  std::printf("%d of %zu criteria passed\n", int(criteria.size()) - failures, criteria.size());
  return failures;
}
