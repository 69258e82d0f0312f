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

#include "devirt/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <thread>

#include "devirt/workloads.hpp"

namespace devirt::harness
{

  namespace
  {

    constexpr DeviceId kMouse{1};
    constexpr DeviceId kCamera{2};
    constexpr DeviceId kKeyboard{3};
    constexpr DeviceId kGpu{4};

    const std::vector<std::string> kDeviceNames{"input0", "video0", "input1", "fb0"};

    std::string trim(std::string_view s)
    {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string_view::npos)
        return {};
      const auto e = s.find_last_not_of(" \t\r");
      return std::string(s.substr(b, e - b + 1));
    }

    [[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected)
    {
      raise(Errc::invalid_config, key + ": '" + value + "' is not " + expected);
    }

    uint64_t to_uint(const std::string& key, const std::string& value)
    {
      uint64_t out = 0;
      auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
      if (ec != std::errc() || ptr != value.data() + value.size())
        bad_value(key, value, "an unsigned integer");
      return out;
    }

    double to_double(const std::string& key, const std::string& value)
    {
      try
        {
          size_t used = 0;
          const double d = std::stod(value, &used);
          if (used == value.size())
            return d;
        }
      catch (const std::exception&)
        {
        }
      bad_value(key, value, "a number");
    }

    bool to_bool(const std::string& key, const std::string& value)
    {
      if (value == "true" || value == "1" || value == "yes" || value == "on")
        return true;
      if (value == "false" || value == "0" || value == "no" || value == "off")
        return false;
      bad_value(key, value, "a boolean");
    }

    bool to_mode(const std::string& key, const std::string& value)
    {
      if (value == "blocking")
        return false;
      if (value == "nonblocking" || value == "non-blocking")
        return true;
      bad_value(key, value, "blocking or nonblocking");
    }

    memvirt::MemMode to_memvirt(const std::string& key, const std::string& value)
    {
      if (value == "shadow")
        return memvirt::MemMode::shadow;
      if (value == "tdp")
        return memvirt::MemMode::tdp;
      bad_value(key, value, "shadow or tdp");
    }

    HasMode to_has(const std::string& key, const std::string& value)
    {
      if (value == "software")
        return HasMode::software;
      if (value == "hardware")
        return HasMode::hardware;
      bad_value(key, value, "software or hardware");
    }

    double median(std::vector<double> v)
    {
      std::sort(v.begin(), v.end());
      const size_t n = v.size();
      return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
    }

    double mean(const std::vector<double>& v)
    {
      double s = 0;
      for (double x : v)
        s += x;
      return v.empty() ? 0 : s / double(v.size());
    }

    uint32_t fnv1a(std::span<const uint8_t> bytes, uint32_t h = 2166136261u)
    {
      for (uint8_t b : bytes)
        h = (h ^ b) * 16777619u;
      return h;
    }

    // ------------------------------------------------------ run plumbing

    struct Recorder
    {
      ScenarioReport& report;
      std::string scenario;
      unsigned run_id;
      unsigned repeats;

      void metric(const std::string& name, double value, const std::string& unit)
      {
        report.metrics.push_back({scenario, run_id, name, value, unit});
      }

      void check(const std::string& name, bool pass, const std::string& detail)
      {
        const std::string full = repeats > 1 ? name + "#" + std::to_string(run_id) : name;
        report.assertions.push_back({full, pass, detail});
      }
    };

    std::string num(double v)
    {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.6g", v);
      return buf;
    }

    bool mode_of(const ScenarioConfig& c, const std::string& device)
    {
      auto it = c.device_nonblocking.find(device);
      return it == c.device_nonblocking.end() ? c.sim.nonblocking : it->second;
    }

    void apply_modes(Simulator& sim, const ScenarioConfig& c)
    {
      for (size_t g = 0; g < sim.guest_count(); ++g)
        {
          auto& fe = sim.frontend(g);
          fe.set_polling(c.polling);
          for (size_t i = 0; i < kDeviceNames.size(); ++i)
            fe.set_nonblocking(DeviceId(uint32_t(i + 1)), mode_of(c, kDeviceNames[i]));
        }
    }

    SimConfig sim_with(const ScenarioConfig& c, size_t guests)
    {
      SimConfig s = c.sim;
      s.guests.resize(std::max(guests, size_t(1)), c.sim.guests.front());
      if (guests < s.guests.size())
        s.guests.resize(guests);
      return s;
    }

    bool up_guest(const ScenarioConfig& c) { return c.sim.guests.front().vcpus == 1; }

    /// Runs fn on a thread of a new process; returns the thread.
    GuestThread& spawn(Guest& guest, std::function<void(GuestThread&)> fn)
    {
      auto& t = guest.create_thread(guest.create_process());
      guest.run(t, std::move(fn));
      return t;
    }

    /// Waits for a guest-side setup step. A guest thread that died on the
    /// way surfaces its own error through shutdown.
    void await_setup(Simulator& sim, const std::function<bool()>& done, std::atomic<bool>* stop,
                     const std::string& what)
    {
      const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(10);
      while (!done())
        {
          if (std::chrono::steady_clock::now() > deadline)
            {
              if (stop)
                *stop = true;
              sim.shutdown();
              raise(Errc::timeout, what + " did not finish");
            }
          std::this_thread::sleep_for(std::chrono::microseconds(200));
        }
    }

    /// Renderers run until stopped, so their op totals are throughput:
    /// time_bounded reports them as "ops" rather than "count".
    void pairing_checks(Recorder& rec, const EventLog& log, const std::string& prefix = "",
                        bool time_bounded = false)
    {
      const double accepted = double(log.count({{"ev", "dispatch"}, {"status", "ACCEPTED"}}));
      const double completions = double(log.count({{"ev", "interrupt"}, {"kind", "completion"}}));
      const double wakes = double(log.count({{"ev", "wake"}, {"cause", "completion"}}));
      const std::string unit = time_bounded ? "ops" : "count";
      rec.metric(prefix + "accepted_dispatches", accepted, unit);
      rec.metric(prefix + "completion_interrupts", completions, unit);
      rec.metric(prefix + "completion_wakes", wakes, unit);
      rec.metric(prefix + "pairing_mismatches", std::fabs(accepted - completions) + std::fabs(completions - wakes),
                 "count");
      rec.check(prefix + "completion_pairing", accepted == completions && completions == wakes,
                "accepted=" + num(accepted) + " completions=" + num(completions) + " wakes=" + num(wakes));
    }

    // -------------------------------------------------------- op_latency

    void op_latency(const ScenarioConfig& c, Recorder& rec)
    {
      const unsigned n = c.iterations ? c.iterations : 200;
      Simulator sim(sim_with(c, 1));
      auto& gpu = sim.add_fb_device(kGpu);
      apply_modes(sim, c);
      auto& fe = sim.frontend(0);
      auto& log = sim.log();
      std::vector<double> blocking;
      std::vector<double> nonblocking;
      double blocking_mean = 0;
      double nonblocking_mean = 0;

      spawn(sim.guest(0), [&](GuestThread& t) {
        auto& clock = sim.clock();
        const auto& f = fe.file("/dev/fb0");
        t.acquire_vcpu();
        const uint32_t h = uint32_t(fe.open(t, f).status);
        const Gva buf = t.process().alloc_user_buffer(kPageSize);
        for (bool nb : {false, true})
          {
            fe.set_nonblocking(kGpu, nb);
            // The first non-blocking op also announces the result page.
            fe.ioctl(t, f, h, fb::kGetInfo, buf, fb::kInfoBytes);
            if (nb)
              log.clear();
            const Micros batch = clock.now();
            for (unsigned i = 0; i < n; ++i)
              {
                const Micros t0 = clock.now();
                const auto r = fe.ioctl(t, f, h, fb::kGetInfo, buf, fb::kInfoBytes);
                const Micros t1 = clock.now();
                if (r.status != kStatusOk)
                  raise(errc_of(r.status), "get-info ioctl failed");
                (nb ? nonblocking : blocking).push_back(double((t1 - t0).count()));
              }
            (nb ? nonblocking_mean : blocking_mean) = double((clock.now() - batch).count()) / n;
          }
        t.release_vcpu();
      });
      sim.guest(0).join_all();

      // The same driver op called natively, for the device share.
      std::vector<double> native;
      double native_mean = 0;
      {
        kernel::HostTask task(sim.hypervisor(), ProcessId(0xC0DE));
        kernel::ContextScope scope(task);
        FileOp open;
        open.kind = OpKind::open;
        const auto opened = gpu.handle(open);
        FileOp op;
        op.kind = OpKind::ioctl;
        op.handle = uint32_t(opened.status);
        op.cmd = fb::kGetInfo;
        op.user_gva = task.alloc_buffer(kPageSize);
        op.length = fb::kInfoBytes;
        const Micros batch = sim.clock().now();
        for (unsigned i = 0; i < n; ++i)
          {
            const Micros t0 = sim.clock().now();
            gpu.handle(op);
            native.push_back(double((sim.clock().now() - t0).count()));
          }
        native_mean = double((sim.clock().now() - batch).count()) / n;
      }

      // Handoff and interrupt legs from the log of the non-blocking batch.
      std::vector<double> accepted_at;
      std::vector<double> complete_at;
      std::vector<double> wake_at;
      for (const auto& line : log.lines())
        {
          const auto f = parse_log_line(line);
          const double t = std::stod(f.at("t"));
          if (f.at("ev") == "dispatch" && f.at("status") == "ACCEPTED")
            accepted_at.push_back(t);
          else if (f.at("ev") == "complete")
            complete_at.push_back(t);
          else if (f.at("ev") == "wake")
            wake_at.push_back(t);
        }
      std::vector<double> handoff;
      std::vector<double> interrupt;
      const size_t legs = std::min({accepted_at.size(), complete_at.size(), wake_at.size()});
      for (size_t i = 0; i < legs; ++i)
        {
          handoff.push_back(complete_at[i] - accepted_at[i]);
          interrupt.push_back(wake_at[i] - complete_at[i]);
        }

      const double handoff_us = median(handoff);
      const double interrupt_us = median(interrupt);
      rec.metric("device_us", native_mean, "us");
      rec.metric("blocking_total_us", blocking_mean, "us");
      rec.metric("nonblocking_total_us", nonblocking_mean, "us");
      rec.metric("channel_us", blocking_mean - native_mean, "us");
      rec.metric("handoff_us", handoff_us, "us");
      rec.metric("interrupt_us", interrupt_us, "us");
      rec.metric("device_median_us", median(native), "us");
      rec.metric("blocking_median_us", median(blocking), "us");
      rec.metric("nonblocking_median_us", median(nonblocking), "us");
      rec.metric("ops", double(blocking.size() + nonblocking.size()), "count");
      rec.metric("frames_delivered", double(sim.channel().frames_delivered()), "count");
      rec.check("forwarding_adds_overhead", blocking_mean > native_mean,
                "blocking " + num(blocking_mean) + " us vs native " + num(native_mean) + " us per op");
      rec.check("nonblocking_costs_more", nonblocking_mean > blocking_mean,
                "nonblocking " + num(nonblocking_mean) + " us vs blocking " + num(blocking_mean) + " us per op");
      rec.check("legs_logged", legs == n, "matched " + std::to_string(legs) + " of " + std::to_string(n));
      pairing_checks(rec, log);
    }

    // --------------------------------------------------------- cache_hit

    void cache_hit(const ScenarioConfig& c, Recorder& rec)
    {
      const unsigned n = c.iterations ? c.iterations : 400;
      const uint32_t pages = uint32_t(c.param("buffer_pages", 8));
      const uint32_t chunk = uint32_t(c.param("read_bytes", 1024));
      Simulator sim(sim_with(c, 1));
      sim.add_fb_device(kGpu);
      apply_modes(sim, c);
      auto& fe = sim.frontend(0);
      ProcessId pid;
      spawn(sim.guest(0), [&](GuestThread& t) {
        pid = t.process().id();
        const auto& f = fe.file("/dev/fb0");
        t.acquire_vcpu();
        const uint32_t h = uint32_t(fe.open(t, f).status);
        const Gva buf = t.process().alloc_user_buffer(pages * kPageSize);
        for (unsigned i = 0; i < n; ++i)
          {
            const uint32_t off = (i * chunk) % (pages * kPageSize);
            FileOp op;
            op.kind = OpKind::read;
            op.handle = h;
            op.user_gva = (buf + off).value;
            op.length = std::min(chunk, pages * kPageSize - off);
            op.offset = (i * 64) % kPageSize;
            fe.vfs_dispatch(t, f, op);
          }
        t.release_vcpu();
      });
      sim.guest(0).join_all();
      auto* record = sim.backend().find_record(GuestId(0), pid);
      const auto& cache = record->memory.cache();
      const double hits = double(cache.hits());
      const double misses = double(cache.misses());
      const double rate = hits + misses > 0 ? hits / (hits + misses) : 0;
      rec.metric("cache_hits", hits, "count");
      rec.metric("cache_misses", misses, "count");
      rec.metric("hit_rate", rate, "ratio");
      rec.check("hit_rate_at_least_0.85", rate >= 0.85, "hit rate " + num(rate));
      pairing_checks(rec, sim.log());
    }

    // ----------------------------------------------------- input_latency

    std::vector<ScheduledEvent> input_schedule(const ScenarioConfig& c, unsigned count)
    {
      if (auto it = c.params.find("schedule"); it != c.params.end())
        {
          std::ifstream in(it->second);
          if (!in)
            raise(Errc::invalid_config, "params.schedule: cannot open " + it->second);
          return parse_schedule(in);
        }
      std::mt19937_64 rng(c.seed);
      const double interval = c.param("interval_ms", 20);
      std::uniform_real_distribution<double> gap(interval / 2, interval * 1.5);
      std::uniform_int_distribution<uint32_t> code(1, 255);
      std::vector<ScheduledEvent> out;
      double t = interval;
      for (unsigned i = 0; i < count; ++i)
        {
          out.push_back({uint32_t(t), code(rng), int32_t(i)});
          t += gap(rng);
        }
      return out;
    }

    void input_latency(const ScenarioConfig& c, Recorder& rec)
    {
      const unsigned count = c.iterations ? c.iterations : 50;
      const auto schedule = input_schedule(c, count);
      Simulator sim(sim_with(c, 1));
      auto& mouse = sim.add_event_device(kMouse);
      apply_modes(sim, c);
      auto& fe = sim.frontend(0);
      auto& clock = sim.clock();
      sim.backend().set_foreground(GuestId(0));

      std::mutex mu;
      std::vector<Micros> arrivals;
      mouse.set_op_observer([&](const FileOp& op) {
        if (op.kind != OpKind::read)
          return;
        std::lock_guard lock(mu);
        arrivals.push_back(clock.now());
      });

      std::atomic<bool> ready{false};
      std::atomic<uint64_t> delivered{0};
      spawn(sim.guest(0), [&](GuestThread& t) {
        const auto& f = fe.file("/dev/input0");
        auto& proc = t.process();
        t.acquire_vcpu();
        const uint32_t h = uint32_t(fe.open(t, f).status);
        fe.subscribe_notifications(t, f, h);
        const Gva buf = proc.alloc_user_buffer(kPageSize);
        ready = true;
        const Micros deadline = clock.now() + Micros(10'000'000);
        while (delivered < schedule.size() && clock.now() < deadline)
          {
            t.release_vcpu();
            const auto sig = proc.wait_signal(Micros(100'000));
            t.acquire_vcpu();
            if (!sig)
              continue;
            // Pushes run in lockstep, so each signal has one event behind it.
            const auto r = fe.read(t, f, h, buf, 64 * kInputEventBytes);
            if (r.status > 0)
              delivered += uint32_t(r.status) / kInputEventBytes;
          }
        t.release_vcpu();
      });
      await_setup(sim, [&] { return ready.load(); }, nullptr, "listener setup");

      std::vector<Micros> pushes;
      const Micros start = clock.now();
      for (const auto& ev : schedule)
        {
          clock.sleep_until(start + Micros(uint64_t(ev.time_ms) * 1000));
          pushes.push_back(clock.now());
          mouse.push(ev.code, ev.value);
          const uint64_t want = pushes.size();
          const auto limit = std::chrono::steady_clock::now() + std::chrono::seconds(2);
          while (delivered < want && std::chrono::steady_clock::now() < limit)
            std::this_thread::sleep_for(std::chrono::microseconds(50));
        }
      sim.guest(0).join_all();
      sim.fabric().drain(GuestId(0));

      std::vector<double> latency;
      {
        std::lock_guard lock(mu);
        for (Micros p : pushes)
          {
            auto it = std::lower_bound(arrivals.begin(), arrivals.end(), p);
            if (it != arrivals.end())
              latency.push_back(double((*it - p).count()));
          }
      }
      rec.metric("events", double(schedule.size()), "count");
      rec.metric("events_delivered", double(delivered.load()), "count");
      rec.metric("notifications_injected",
                 double(sim.fabric().injected_total(LineKind::notification)), "count");
      if (!latency.empty())
        {
          rec.metric("latency_median_us", median(latency), "us");
          rec.metric("latency_mean_us", mean(latency), "us");
          rec.metric("latency_min_us", *std::min_element(latency.begin(), latency.end()), "us");
          rec.metric("latency_max_us", *std::max_element(latency.begin(), latency.end()), "us");
        }
      rec.check("all_events_delivered", delivered == schedule.size(),
                std::to_string(delivered.load()) + " of " + std::to_string(schedule.size()));
      rec.check("every_event_reached_driver", latency.size() == pushes.size(),
                std::to_string(latency.size()) + " of " + std::to_string(pushes.size()));
      pairing_checks(rec, sim.log());
    }

    // ----------------------------------------------- concurrency_compile

    workloads::PollReaderConfig camera_config(const ScenarioConfig& c, const VirtualDeviceFile& f, unsigned frames,
                                              unsigned quanta_default)
    {
      workloads::PollReaderConfig pc;
      pc.file = &f;
      pc.frames = frames;
      pc.frame_bytes = uint32_t(c.param("frame_bytes", 4096));
      pc.process_quanta = uint32_t(c.param("process_quanta", quanta_default));
      pc.quantum = Micros(uint64_t(c.param("quantum_us", 1000)));
      pc.poll_timeout_ms = 1000;
      return pc;
    }

    void concurrency_compile(const ScenarioConfig& c, Recorder& rec)
    {
      const unsigned frames = c.iterations ? c.iterations : 25;
      const Micros period(uint64_t(c.param("period_ms", 40) * 1000));
      const Micros quantum(uint64_t(c.param("quantum_us", 1000)));

      // Baseline: the compile alone for the camera's run length.
      double solo_rate = 0;
      {
        Simulator sim(sim_with(c, 1));
        std::atomic<bool> stop{false};
        workloads::CpuLoopResult r;
        spawn(sim.guest(0), [&](GuestThread& t) { r = workloads::cpu_loop(t, quantum, stop); });
        sim.clock().sleep_for(period * frames);
        stop = true;
        sim.shutdown();
        solo_rate = r.rate();
      }

      Simulator sim(sim_with(c, 1));
      sim.add_stream_device(kCamera, {period, 4096, true});
      apply_modes(sim, c);
      auto& fe = sim.frontend(0);
      std::atomic<bool> stop{false};
      workloads::PollReaderResult camera;
      workloads::CpuLoopResult compile;
      const auto pc = camera_config(c, fe.file("/dev/video0"), frames, 2);
      spawn(sim.guest(0), [&](GuestThread& t) {
        try
          {
            camera = workloads::poll_reader(t, fe, pc);
          }
        catch (...)
          {
            stop = true;
            throw;
          }
        stop = true;
      });
      spawn(sim.guest(0), [&](GuestThread& t) { compile = workloads::cpu_loop(t, quantum, stop); });
      sim.shutdown();
      sim.fabric().drain(GuestId(0));

      const double slowdown = compile.rate() > 0 ? solo_rate / compile.rate() : INFINITY;
      const bool nb = mode_of(c, "video0");
      rec.metric("solo_rate", solo_rate, "quanta_per_s");
      rec.metric("loaded_rate", compile.rate(), "quanta_per_s");
      rec.metric("slowdown", slowdown, "ratio");
      rec.metric("frames_read", camera.frames_read, "count");
      rec.check("camera_read_all_frames", camera.frames_read == frames,
                std::to_string(camera.frames_read) + " of " + std::to_string(frames));
      if (up_guest(c))
        {
          if (nb)
            rec.check("nonblocking_slowdown_at_most_1.2", slowdown <= 1.2, "slowdown " + num(slowdown));
          else
            rec.check("blocking_slowdown_at_least_2.0", slowdown >= 2.0, "slowdown " + num(slowdown));
        }
      pairing_checks(rec, sim.log());
    }

    // ------------------------------------------------ concurrency_render

    struct RenderRun
    {
      double fps = 0;
      unsigned frames_read = 0;
    };

    RenderRun render_once(const ScenarioConfig& c, unsigned vcpus, bool with_camera, unsigned frames,
                          Recorder* rec, const std::string& tag)
    {
      const Micros period(uint64_t(c.param("period_ms", 80) * 1000));
      SimConfig sc = sim_with(c, 1);
      sc.guests[0].vcpus = vcpus;
      Simulator sim(sc);
      FbConfig fc;
      fc.submit_cost = Micros(uint64_t(c.param("submit_us", 3000)));
      sim.add_fb_device(kGpu, fc);
      sim.add_stream_device(kCamera, {period, 4096, true});
      apply_modes(sim, c);
      auto& guest = sim.guest(0);
      auto& fe = sim.frontend(0);
      std::atomic<bool> stop{false};
      workloads::RenderConfig rc;
      rc.file = &fe.file("/dev/fb0");
      rc.render_quantum = Micros(uint64_t(c.param("render_us", 1000)));
      workloads::RenderResult render;
      workloads::PollReaderResult camera;
      spawn(guest, [&](GuestThread& t) { render = workloads::render_loop(t, fe, rc, stop); });
      if (with_camera)
        {
          const auto pc = camera_config(c, fe.file("/dev/video0"), frames, 12);
          spawn(guest, [&](GuestThread& t) {
            try
              {
                camera = workloads::poll_reader(t, fe, pc);
              }
            catch (...)
              {
                stop = true;
                throw;
              }
            stop = true;
          });
        }
      else
        {
          sim.clock().sleep_for(period * frames);
          stop = true;
        }
      sim.shutdown();
      sim.fabric().drain(GuestId(0));
      if (rec)
        pairing_checks(*rec, sim.log(), tag + "_", true);
      return {render.fps(), camera.frames_read};
    }

    void concurrency_render(const ScenarioConfig& c, Recorder& rec)
    {
      const unsigned frames = c.iterations ? c.iterations : 20;
      double drop[2] = {0, 0};
      for (unsigned vcpus : {1u, 2u})
        {
          const std::string tag = vcpus == 1 ? "up" : "smp";
          const auto solo = render_once(c, vcpus, false, frames, nullptr, tag);
          const auto loaded = render_once(c, vcpus, true, frames, &rec, tag);
          drop[vcpus - 1] = loaded.fps > 0 ? solo.fps / loaded.fps : INFINITY;
          rec.metric(tag + "_solo_fps", solo.fps, "fps");
          rec.metric(tag + "_loaded_fps", loaded.fps, "fps");
          rec.metric(tag + "_drop", drop[vcpus - 1], "ratio");
          rec.metric(tag + "_frames_read", loaded.frames_read, "count");
          rec.check(tag + "_camera_read_all_frames", loaded.frames_read == frames,
                    std::to_string(loaded.frames_read) + " of " + std::to_string(frames));
        }
      if (!mode_of(c, "video0") && !mode_of(c, "fb0"))
        rec.check("smp_drop_exceeds_up_drop", drop[1] > drop[0],
                  "smp " + num(drop[1]) + " vs up " + num(drop[0]));
    }

    // ------------------------------------------------- foreground_switch

    void foreground_switch(const ScenarioConfig& c, Recorder& rec)
    {
      const unsigned events = c.iterations ? c.iterations : 100;
      Simulator sim(sim_with(c, std::max<size_t>(c.sim.guests.size(), 2)));
      auto& mouse = sim.add_event_device(kMouse, "input0");
      auto& kbd = sim.add_event_device(kKeyboard, "input1");
      sim.add_fb_device(kGpu);
      apply_modes(sim, c);
      auto& backend = sim.backend();
      auto& fabric = sim.fabric();
      auto& clock = sim.clock();
      std::atomic<bool> stop{false};
      std::atomic<uint64_t> frames[2];
      std::atomic<int> subscribed{0};
      for (size_t g = 0; g < 2; ++g)
        {
          frames[g] = 0;
          auto& guest = sim.guest(g);
          auto& fe = sim.frontend(g);
          auto& renderer = guest.create_process();
          fe.register_renderer(renderer.id());
          workloads::RenderConfig rc;
          rc.file = &fe.file("/dev/fb0");
          rc.start_paused = true;
          rc.render_quantum = Micros(500);
          guest.run(guest.create_thread(renderer),
                    [&, g, rc](GuestThread& t) { workloads::render_loop(t, fe, rc, stop, &frames[g]); });
          spawn(guest, [&](GuestThread& t) {
            t.acquire_vcpu();
            for (const char* path : {"/dev/input0", "/dev/input1"})
              {
                const auto& f = fe.file(path);
                fe.subscribe_notifications(t, f, uint32_t(fe.open(t, f).status));
              }
            t.release_vcpu();
            ++subscribed;
          });
        }
      await_setup(sim, [&] { return subscribed == 2; }, &stop, "listener subscription");

      auto line = [&](size_t g, DeviceId d) { return fabric.reserve_line(GuestId(uint32_t(g)), LinePurpose::notification(d)); };
      auto irqs = [&](size_t g, DeviceId d) { return double(fabric.injected(GuestId(uint32_t(g)), line(g, d))); };
      auto burst = [&](EventDevice& dev, unsigned n) {
        for (unsigned i = 0; i < n; ++i)
          dev.push(i, int32_t(i));
        fabric.drain(GuestId(0));
        fabric.drain(GuestId(1));
      };
      const Micros grace(30'000);

      backend.set_foreground(GuestId(0));
      burst(mouse, events);
      const double a1 = irqs(0, kMouse);
      const double b1 = irqs(1, kMouse);
      clock.sleep_for(grace);
      const uint64_t b_bg0 = frames[1];
      clock.sleep_for(grace);
      const uint64_t b_bg = frames[1] - b_bg0;
      const uint64_t a_fg = frames[0];

      backend.set_foreground(GuestId(1));
      burst(mouse, events);
      const double a2 = irqs(0, kMouse) - a1;
      const double b2 = irqs(1, kMouse) - b1;
      clock.sleep_for(grace);
      const uint64_t a_bg0 = frames[0];
      const uint64_t b_fg0 = frames[1];
      clock.sleep_for(grace);
      const uint64_t a_bg = frames[0] - a_bg0;
      const uint64_t b_fg = frames[1] - b_fg0;

      const double mouse_b_before = irqs(1, kMouse);
      burst(kbd, events / 2);
      const double kbd_b = irqs(1, kKeyboard);
      const double kbd_a = irqs(0, kKeyboard);
      const double mouse_b_during = irqs(1, kMouse) - mouse_b_before;

      stop = true;
      sim.shutdown();

      rec.metric("a_irqs_a_foreground", a1, "count");
      rec.metric("b_irqs_a_foreground", b1, "count");
      rec.metric("a_irqs_b_foreground", a2, "count");
      rec.metric("b_irqs_b_foreground", b2, "count");
      rec.metric("kbd_irqs_b", kbd_b, "count");
      rec.metric("kbd_irqs_a", kbd_a, "count");
      rec.metric("mouse_irqs_during_kbd", mouse_b_during, "count");
      rec.metric("pause_resume_irqs", double(fabric.injected_total(LineKind::pause_resume)), "count");
      rec.metric("dropped_events", double(backend.dropped_events()), "count");
      rec.metric("a_frames_foreground", double(a_fg), "frames");
      rec.metric("a_frames_background", double(a_bg), "frames");
      rec.metric("b_frames_background", double(b_bg), "frames");
      rec.metric("b_frames_foreground", double(b_fg), "frames");
      rec.check("input_to_foreground_only", a1 >= 1 && b1 == 0, "a=" + num(a1) + " b=" + num(b1));
      rec.check("input_follows_switch", a2 == 0 && b2 >= 1, "a=" + num(a2) + " b=" + num(b2));
      rec.check("lines_separate_devices", kbd_b >= 1 && kbd_a == 0 && mouse_b_during == 0,
                "kbd b=" + num(kbd_b) + " a=" + num(kbd_a) + " mouse during kbd=" + num(mouse_b_during));
      rec.check("background_renderer_stalls", a_bg == 0 && b_bg == 0,
                "a=" + std::to_string(a_bg) + " b=" + std::to_string(b_bg));
      rec.check("foreground_renderer_runs", a_fg > 0 && b_fg > 0,
                "a=" + std::to_string(a_fg) + " b=" + std::to_string(b_fg));
      pairing_checks(rec, sim.log(), "", true);
    }

    // -------------------------------------------------- mode_equivalence

    enum class Step : uint8_t { event_read, fb_write, fb_read, get_info, submit, mmap_read, driver_map, fault_map };

    struct ScriptOp
    {
      Step step;
      uint32_t a = 0;
      uint32_t b = 0;
      uint32_t seed = 0;
    };

    std::vector<ScriptOp> make_script(uint64_t seed, unsigned ops)
    {
      std::mt19937_64 rng(seed);
      std::uniform_int_distribution<int> pick(0, 9);
      std::uniform_int_distribution<uint32_t> word;
      std::vector<ScriptOp> out;
      const unsigned map_at = ops / 4;
      const unsigned fault_at = ops / 2;
      for (unsigned i = 0; i < ops; ++i)
        {
          ScriptOp op{Step::event_read, 0, 0, uint32_t(word(rng))};
          if (i == map_at)
            op.step = Step::driver_map;
          else if (i == fault_at)
            op.step = Step::fault_map;
          else
            switch (pick(rng))
              {
              case 0:
              case 1: op = {Step::event_read, 1 + word(rng) % 6, 1 + word(rng) % 8, op.seed}; break;
              case 2:
              case 3: op = {Step::fb_write, word(rng) % 8192, 1 + word(rng) % 6000, op.seed}; break;
              case 4:
              case 5: op = {Step::fb_read, word(rng) % 8192, 1 + word(rng) % 6000, op.seed}; break;
              case 6: op = {Step::get_info, 0, 0, op.seed}; break;
              case 7:
              case 8: op = {Step::submit, 1 + word(rng) % 2048, 0, op.seed}; break;
              default: op = {Step::mmap_read, 1 + word(rng) % 2, 0, op.seed}; break;
              }
          out.push_back(op);
        }
      return out;
    }

    struct ScriptOutcome
    {
      std::vector<uint8_t> transcript;
      unsigned ops = 0;
      size_t map_fail = 0;
      size_t reexec = 0;
      size_t ledger = 0;
      uint64_t faults = 0;
      unsigned map_successes = 0;
    };

    ScriptOutcome run_script(const ScenarioConfig& c, memvirt::MemMode mem, HasMode has, bool nb,
                             const std::vector<ScriptOp>& script)
    {
      SimConfig sc = sim_with(c, 1);
      sc.guests[0].mem_mode = mem;
      sc.has_mode = has;
      sc.nonblocking = nb;
      sc.manual_clock = true;
      Simulator sim(sc);
      auto& mouse = sim.add_event_device(kMouse);
      sim.add_fb_device(kGpu);
      auto& fe = sim.frontend(0);
      fe.set_default_nonblocking(nb);
      ScriptOutcome out;
      auto emit = [&](const void* p, size_t n) {
        auto* b = static_cast<const uint8_t*>(p);
        out.transcript.insert(out.transcript.end(), b, b + n);
      };
      auto emit_result = [&](const OpResult& r) {
        emit(&r.status, 4);
        emit(r.values.data(), 16);
      };

      spawn(sim.guest(0), [&](GuestThread& t) {
        auto& proc = t.process();
        const auto& input = fe.file("/dev/input0");
        const auto& fb = fe.file("/dev/fb0");
        t.acquire_vcpu();
        const uint32_t hi = uint32_t(fe.open(t, input).status);
        const uint32_t hf = uint32_t(fe.open(t, fb).status);
        const Gva buf = proc.alloc_user_buffer(8 * kPageSize);
        std::vector<uint8_t> bytes;
        auto user = [&](Gva at, size_t n) {
          bytes.resize(n);
          proc.read_user(at, bytes);
          emit(bytes.data(), n);
        };
        for (const auto& op : script)
          {
            const uint8_t step = uint8_t(op.step);
            emit(&step, 1);
            std::mt19937 fill(op.seed);
            switch (op.step)
              {
              case Step::event_read:
                {
                  for (uint32_t i = 0; i < op.a; ++i)
                    mouse.push(op.seed % 97 + i, int32_t(op.seed >> 8) - int32_t(i));
                  const auto r = fe.read(t, input, hi, buf, op.b * kInputEventBytes);
                  emit_result(r);
                  if (r.status > 0)
                    user(buf, uint32_t(r.status));
                  break;
                }
              case Step::fb_write:
                {
                  bytes.resize(op.b);
                  for (auto& b : bytes)
                    b = uint8_t(fill());
                  proc.write_user(buf + 100, bytes);
                  FileOp w;
                  w.kind = OpKind::write;
                  w.handle = hf;
                  w.user_gva = (buf + 100).value;
                  w.length = op.b;
                  w.offset = op.a;
                  emit_result(fe.vfs_dispatch(t, fb, w));
                  break;
                }
              case Step::fb_read:
                {
                  FileOp rd;
                  rd.kind = OpKind::read;
                  rd.handle = hf;
                  rd.user_gva = (buf + 7).value;
                  rd.length = op.b;
                  rd.offset = op.a;
                  const auto r = fe.vfs_dispatch(t, fb, rd);
                  emit_result(r);
                  if (r.status > 0)
                    user(buf + 7, uint32_t(r.status));
                  break;
                }
              case Step::get_info:
                emit_result(fe.ioctl(t, fb, hf, fb::kGetInfo, buf + 3 * kPageSize, fb::kInfoBytes));
                user(buf + 3 * kPageSize, fb::kInfoBytes);
                break;
              case Step::submit:
                {
                  bytes.resize(op.a);
                  for (auto& b : bytes)
                    b = uint8_t(fill());
                  proc.write_user(buf + kPageSize, bytes);
                  emit_result(fe.ioctl(t, fb, hf, fb::kSubmit, buf + kPageSize, op.a));
                  break;
                }
              case Step::mmap_read:
                {
                  const auto r = fe.mmap(t, fb, hf, op.a * kPageSize, 0, fb::kMapPopulate);
                  emit_result(r);
                  if (r.status == kStatusOk)
                    user(Gva(r.values[0]), op.a * kPageSize);
                  break;
                }
              case Step::driver_map:
                {
                  const auto r = fe.ioctl(t, fb, hf, fb::kMapCmd, buf + 2 * kPageSize, 64 * 1024);
                  emit_result(r);
                  out.map_successes += r.status == kStatusOk;
                  user(buf + 2 * kPageSize, 4);
                  if (r.status == kStatusOk)
                    {
                      bytes.assign(64, uint8_t(op.seed));
                      proc.write_user(Gva(r.values[0]) + 5 * kPageSize, bytes);
                      user(Gva(r.values[0]) + 5 * kPageSize, 64);
                    }
                  break;
                }
              case Step::fault_map:
                {
                  const auto r = fe.mmap(t, fb, hf, 2 * kPageSize);
                  emit_result(r);
                  if (r.status == kStatusOk)
                    {
                      const Gva at = Gva(r.values[0]) + kPageSize + 12;
                      emit_result(fe.touch(t, at));
                      user(at, 256);
                    }
                  break;
                }
              }
            ++out.ops;
          }
        t.release_vcpu();
      });
      sim.shutdown();
      auto& log = sim.log();
      out.map_fail = log.count({{"ev", "map_fail"}, {"status", "NeedGuestVaRange"}});
      out.reexec = log.count({{"ev", "map_reexec"}});
      out.ledger = sim.backend().ledger_size();
      out.faults = log.count({{"ev", "dispatch"}, {"op", "page_fault"}});
      return out;
    }

    void mode_equivalence(const ScenarioConfig& c, Recorder& rec)
    {
      const unsigned ops = c.iterations ? c.iterations : 200;
      const auto script = make_script(c.seed, ops);
      struct Combo
      {
        std::string name;
        memvirt::MemMode mem;
        HasMode has;
        bool nb;
      };
      std::vector<Combo> combos;
      for (auto mem : {memvirt::MemMode::shadow, memvirt::MemMode::tdp})
        for (auto has : {HasMode::software, HasMode::hardware})
          for (bool nb : {false, true})
            {
              if (has == HasMode::hardware && mem == memvirt::MemMode::tdp)
                continue;
              combos.push_back({std::string(memvirt::mem_mode_name(mem)) + "_" + std::string(has_mode_name(has)) +
                                  (nb ? "_nonblocking" : "_blocking"),
                                mem, has, nb});
            }

      std::vector<std::pair<std::string, std::vector<uint8_t>>> transcripts;
      for (const auto& combo : combos)
        {
          const auto out = run_script(c, combo.mem, combo.has, combo.nb, script);
          rec.metric("digest_" + combo.name, fnv1a(out.transcript), "digest");
          rec.metric("ops_" + combo.name, out.ops, "count");
          rec.metric("transcript_bytes_" + combo.name, double(out.transcript.size()), "count");
          rec.metric("map_successes_" + combo.name, out.map_successes, "count");
          rec.metric("map_fail_" + combo.name, double(out.map_fail), "count");
          rec.metric("map_reexec_" + combo.name, double(out.reexec), "count");
          rec.metric("ledger_" + combo.name, double(out.ledger), "count");
          rec.check("map_once_" + combo.name,
                    out.map_successes == 1 && out.map_fail == 1 && out.reexec == 1 && out.ledger == 0,
                    "ok returns=" + std::to_string(out.map_successes) + " fail=" + std::to_string(out.map_fail) +
                      " reexec=" + std::to_string(out.reexec) + " ledger=" + std::to_string(out.ledger));
          rec.check("one_page_fault_" + combo.name, out.faults == 1, "page faults " + std::to_string(out.faults));
          transcripts.emplace_back(combo.name, out.transcript);
        }
      unsigned mismatches = 0;
      std::string first;
      for (size_t i = 0; i < transcripts.size(); ++i)
        for (size_t j = i + 1; j < transcripts.size(); ++j)
          if (transcripts[i].second != transcripts[j].second)
            {
              ++mismatches;
              if (first.empty())
                first = transcripts[i].first + " vs " + transcripts[j].first;
            }
      rec.metric("combinations", double(combos.size()), "count");
      rec.metric("mismatched_pairs", mismatches, "count");
      rec.check("byte_identical_results", mismatches == 0,
                mismatches ? std::to_string(mismatches) + " pairs differ, first " + first
                           : std::to_string(combos.size()) + " combinations agree");
    }

    // ------------------------------------------------------ poll_sibling

    void poll_sibling(const ScenarioConfig& c, Recorder& rec)
    {
      const uint32_t timeout_ms = uint32_t(c.param("timeout_ms", 500));
      const Micros quantum(uint64_t(c.param("quantum_us", 1000)));

      uint64_t unloaded = 0;
      {
        Simulator sim(sim_with(c, 1));
        std::atomic<bool> stop{false};
        spawn(sim.guest(0), [&](GuestThread& t) { unloaded = workloads::cpu_loop(t, quantum, stop).quanta; });
        sim.clock().sleep_for(Micros(uint64_t(timeout_ms) * 1000));
        stop = true;
        sim.shutdown();
      }

      Simulator sim(sim_with(c, 1));
      sim.add_event_device(kMouse);
      apply_modes(sim, c);
      auto& fe = sim.frontend(0);
      std::atomic<bool> polling{false};
      std::atomic<bool> done{false};
      int32_t poll_status = 0;
      uint64_t during = 0;
      spawn(sim.guest(0), [&](GuestThread& t) {
        const auto& f = fe.file("/dev/input0");
        t.acquire_vcpu();
        const uint32_t h = uint32_t(fe.open(t, f).status);
        // Announce the result page up front so the poll is the only op.
        fe.poll(t, f, h, 0);
        polling = true;
        poll_status = fe.poll(t, f, h, timeout_ms).status;
        done = true;
        t.release_vcpu();
      });
      spawn(sim.guest(0), [&](GuestThread& t) {
        while (!polling)
          std::this_thread::yield();
        during = workloads::cpu_loop(t, quantum, done).quanta;
      });
      sim.shutdown();
      sim.fabric().drain(GuestId(0));

      const double ratio = unloaded ? double(during) / double(unloaded) : 0;
      rec.metric("unloaded_quanta", double(unloaded), "quanta");
      rec.metric("quanta_during_poll", double(during), "quanta");
      rec.metric("sibling_ratio", ratio, "ratio");
      rec.check("poll_timed_out", poll_status == kPollTimeout, "poll returned " + std::to_string(poll_status));
      if (up_guest(c))
        {
          if (mode_of(c, "input0"))
            rec.check("nonblocking_sibling_at_least_0.9", ratio >= 0.9, "ratio " + num(ratio));
          else
            rec.check("blocking_sibling_at_most_0.1", ratio <= 0.1, "ratio " + num(ratio));
        }
      pairing_checks(rec, sim.log());
    }

    using ScenarioFn = void (*)(const ScenarioConfig&, Recorder&);

    const std::map<std::string, ScenarioFn>& scenarios()
    {
      static const std::map<std::string, ScenarioFn> table{
        {"op_latency", op_latency},
        {"cache_hit", cache_hit},
        {"input_latency", input_latency},
        {"concurrency_compile", concurrency_compile},
        {"concurrency_render", concurrency_render},
        {"foreground_switch", foreground_switch},
        {"mode_equivalence", mode_equivalence},
        {"poll_sibling", poll_sibling},
      };
      return table;
    }

  } // namespace

  // ------------------------------------------------------------- config

  double ScenarioConfig::param(const std::string& key, double fallback) const
  {
    auto it = params.find(key);
    return it == params.end() ? fallback : to_double("params." + key, it->second);
  }

  const std::vector<std::string>& scenario_names()
  {
    static const std::vector<std::string> names = [] {
      std::vector<std::string> out;
      for (const auto& [name, fn] : scenarios())
        out.push_back(name);
      return out;
    }();
    return names;
  }

  void apply_setting(ScenarioConfig& c, const std::string& key, const std::string& value)
  {
    auto& guests = c.sim.guests;
    if (key == "run.scenario")
      c.scenario = value;
    else if (key == "run.seed")
      c.seed = to_uint(key, value);
    else if (key == "run.repeats")
      c.repeats = unsigned(to_uint(key, value));
    else if (key == "run.iterations")
      c.iterations = uint32_t(to_uint(key, value));
    else if (key == "run.duration_ms")
      c.duration = Micros(to_uint(key, value) * 1000);
    else if (key == "run.out")
      c.out = value;
    else if (key == "run.clock_scale")
      c.sim.clock_scale = to_double(key, value);
    else if (key == "guests.count")
      {
        const uint64_t n = to_uint(key, value);
        if (n == 0 || n > 8)
          bad_value(key, value, "a guest count in 1..8");
        guests.resize(n, guests.front());
      }
    else if (key == "guests.vcpus")
      for (auto& g : guests)
        g.vcpus = unsigned(to_uint(key, value));
    else if (key == "guests.memvirt")
      for (auto& g : guests)
        g.mem_mode = to_memvirt(key, value);
    else if (key == "guests.memory_mb")
      for (auto& g : guests)
        g.memory_size = uint32_t(to_uint(key, value) << 20);
    else if (key.starts_with("guest."))
      {
        const auto dot = key.find('.', 6);
        if (dot == std::string::npos)
          raise(Errc::invalid_config, "unknown key " + key);
        const uint64_t i = to_uint(key, key.substr(6, dot - 6));
        if (i >= guests.size())
          raise(Errc::invalid_config, key + ": guest " + std::to_string(i) + " beyond guests.count");
        const std::string field = key.substr(dot + 1);
        if (field == "vcpus")
          guests[i].vcpus = unsigned(to_uint(key, value));
        else if (field == "memvirt")
          guests[i].mem_mode = to_memvirt(key, value);
        else if (field == "memory_mb")
          guests[i].memory_size = uint32_t(to_uint(key, value) << 20);
        else
          raise(Errc::invalid_config, "unknown key " + key);
      }
    else if (key == "io.mode")
      c.sim.nonblocking = to_mode(key, value);
    else if (key == "io.has")
      c.sim.has_mode = to_has(key, value);
    else if (key == "io.polling")
      c.polling = to_bool(key, value);
    else if (key.starts_with("devices."))
      {
        const std::string name = key.substr(8);
        if (std::find(kDeviceNames.begin(), kDeviceNames.end(), name) == kDeviceNames.end())
          raise(Errc::invalid_config, key + ": unknown device (input0, input1, video0, fb0)");
        c.device_nonblocking[name] = to_mode(key, value);
      }
    else if (key.starts_with("params."))
      c.params[key.substr(7)] = value;
    else
      raise(Errc::invalid_config, "unknown key " + key);
  }

  ScenarioConfig parse_config(std::istream& in)
  {
    ScenarioConfig c;
    std::string section;
    std::string line;
    unsigned lineno = 0;
    while (std::getline(in, line))
      {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos)
          line.erase(hash);
        const std::string text = trim(line);
        if (text.empty())
          continue;
        const std::string where = "line " + std::to_string(lineno) + ": ";
        if (text.front() == '[')
          {
            if (text.back() != ']')
              raise(Errc::invalid_config, where + "unterminated section header");
            section = trim(std::string_view(text).substr(1, text.size() - 2));
            continue;
          }
        const auto eq = text.find('=');
        if (eq == std::string::npos)
          raise(Errc::invalid_config, where + "expected key = value");
        const std::string key = trim(std::string_view(text).substr(0, eq));
        const std::string value = trim(std::string_view(text).substr(eq + 1));
        if (key.empty())
          raise(Errc::invalid_config, where + "empty key");
        try
          {
            apply_setting(c, section.empty() ? key : section + "." + key, value);
          }
        catch (const Error& e)
          {
            raise(e.code(), where + e.what());
          }
      }
    return c;
  }

  void validate(const ScenarioConfig& c)
  {
    if (!scenarios().contains(c.scenario))
      {
        std::string known;
        for (const auto& n : scenario_names())
          known += (known.empty() ? "" : ", ") + n;
        raise(Errc::invalid_config, "unknown scenario '" + c.scenario + "' (known: " + known + ")");
      }
    if (c.repeats == 0)
      raise(Errc::invalid_config, "run.repeats must be at least 1");
    devirt::validate(c.sim);
    if (c.scenario == "cache_hit" && c.sim.has_mode != HasMode::software)
      raise(Errc::invalid_config, "cache_hit measures the software hybrid address space translation cache; "
                                  "set io.has = software");
    if (c.scenario == "cache_hit" && mode_of(c, "fb0"))
      raise(Errc::invalid_config, "cache_hit needs fb0 in blocking mode; non-blocking reads up to one page "
                                  "are staged through the result page and bypass the translation cache");
    if (c.scenario == "foreground_switch" && c.sim.guests.size() < 2)
      raise(Errc::invalid_config, "foreground_switch needs guests.count >= 2");
    if (c.scenario == "mode_equivalence" && (c.iterations != 0 && c.iterations < 8))
      raise(Errc::invalid_config, "mode_equivalence needs at least 8 operations");
  }

  // ------------------------------------------------------------- running

  bool ScenarioReport::passed() const
  {
    return std::all_of(assertions.begin(), assertions.end(), [](const Assertion& a) { return a.pass; });
  }

  double ScenarioReport::value(const std::string& metric) const
  {
    std::vector<double> v;
    for (const auto& m : metrics)
      if (m.metric == metric)
        v.push_back(m.value);
    if (v.empty())
      raise(Errc::missing_metric, metric);
    return median(v);
  }

  ScenarioReport run_scenario(const ScenarioConfig& config)
  {
    validate(config);
    ScenarioReport report;
    const auto fn = scenarios().at(config.scenario);
    for (unsigned r = 0; r < config.repeats; ++r)
      {
        Recorder rec{report, config.scenario, r, config.repeats};
        fn(config, rec);
      }
    return report;
  }

  // ---------------------------------------------------------------- CSV

  void write_csv(std::ostream& out, const std::vector<Metric>& metrics)
  {
    out << "scenario,run_id,metric,value,unit\n";
    char buf[64];
    for (const auto& m : metrics)
      {
        std::snprintf(buf, sizeof buf, "%.17g", m.value);
        out << m.scenario << ',' << m.run_id << ',' << m.metric << ',' << buf << ',' << m.unit << '\n';
      }
  }

  std::vector<Metric> read_csv(std::istream& in)
  {
    std::vector<Metric> out;
    std::string line;
    unsigned lineno = 0;
    while (std::getline(in, line))
      {
        ++lineno;
        if (!line.empty() && line.back() == '\r')
          line.pop_back();
        if (line.empty())
          continue;
        if (lineno == 1 && line == "scenario,run_id,metric,value,unit")
          continue;
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ','))
          cells.push_back(cell);
        if (cells.size() != 5)
          raise(Errc::invalid_config, "csv line " + std::to_string(lineno) + ": expected 5 columns");
        Metric m;
        m.scenario = cells[0];
        m.run_id = unsigned(to_uint("run_id", cells[1]));
        m.metric = cells[2];
        m.value = cells[3] == "inf" ? INFINITY : to_double("value", cells[3]);
        m.unit = cells[4];
        out.push_back(m);
      }
    return out;
  }

  void write_summary(std::ostream& out, const std::vector<Assertion>& assertions)
  {
    for (const auto& a : assertions)
      out << (a.pass ? "PASS " : "FAIL ") << a.name << ": " << a.detail << '\n';
  }

  // ------------------------------------------------------------ compare

  namespace
  {

    double lookup(const std::vector<Metric>& a, const std::vector<Metric>& b, const std::string& ref)
    {
      const auto colon = ref.find(':');
      if (colon == std::string::npos)
        return to_double("operand", ref);
      const std::string run = ref.substr(0, colon);
      const std::string name = ref.substr(colon + 1);
      const std::vector<Metric>* rows = run == "a" ? &a : run == "b" ? &b : nullptr;
      if (!rows)
        raise(Errc::invalid_config, "operand " + ref + ": run must be a or b");
      std::vector<double> v;
      for (const auto& m : *rows)
        if (m.metric == name)
          v.push_back(m.value);
      if (v.empty())
        raise(Errc::missing_metric, ref);
      return median(v);
    }

  } // namespace

  std::vector<Assertion> compare_runs(const std::vector<Metric>& a, const std::vector<Metric>& b,
                                      const std::vector<std::string>& specs)
  {
    std::vector<Assertion> out;
    for (const auto& spec : specs)
      {
        std::istringstream in(spec);
        std::string lhs;
        std::string op;
        std::string rhs;
        std::string extra;
        if (!(in >> lhs >> op >> rhs))
          raise(Errc::invalid_config, "assertion '" + spec + "': expected 'lhs OP rhs'");
        double tol = 0;
        if (in >> extra)
          {
            if (!extra.starts_with("tol=") || op != "==")
              raise(Errc::invalid_config, "assertion '" + spec + "': only == takes tol=<relative>");
            tol = to_double("tol", extra.substr(4));
          }
        const double l = lookup(a, b, lhs);
        const double r = lookup(a, b, rhs);
        bool pass;
        if (op == ">")
          pass = l > r;
        else if (op == ">=")
          pass = l >= r;
        else if (op == "<")
          pass = l < r;
        else if (op == "<=")
          pass = l <= r;
        else if (op == "==")
          pass = l == r || std::fabs(l - r) <= tol * std::max(std::fabs(l), std::fabs(r));
        else
          raise(Errc::invalid_config, "assertion '" + spec + "': unknown operator " + op);
        out.push_back({spec, pass, num(l) + " " + op + " " + num(r)});
      }
    return out;
  }

  std::vector<std::string> diff_counting(const std::vector<Metric>& a, const std::vector<Metric>& b)
  {
    using Key = std::tuple<std::string, unsigned, std::string>;
    std::map<Key, double> left;
    std::map<Key, double> right;
    for (const auto& m : a)
      if (m.counting())
        left[{m.scenario, m.run_id, m.metric}] = m.value;
    for (const auto& m : b)
      if (m.counting())
        right[{m.scenario, m.run_id, m.metric}] = m.value;
    std::vector<std::string> out;
    auto name = [](const Key& k) {
      return std::get<0>(k) + "," + std::to_string(std::get<1>(k)) + "," + std::get<2>(k);
    };
    for (const auto& [k, v] : left)
      {
        auto it = right.find(k);
        if (it == right.end())
          out.push_back(name(k) + ": only in first run");
        else if (it->second != v)
          out.push_back(name(k) + ": " + num(v) + " vs " + num(it->second));
      }
    for (const auto& [k, v] : right)
      if (!left.contains(k))
        out.push_back(name(k) + ": only in second run");
    return out;
  }

} // namespace devirt::harness
