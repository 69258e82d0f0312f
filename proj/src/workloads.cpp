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

#include "devirt/workloads.hpp"

#include <cstring>

namespace devirt::workloads
{

  void yield(GuestThread& thread)
  {
    thread.release_vcpu();
    thread.acquire_vcpu();
  }

  double CpuLoopResult::rate() const
  {
    return elapsed.count() > 0 ? double(quanta) * 1e6 / double(elapsed.count()) : 0.0;
  }

  double RenderResult::fps() const
  {
    return elapsed.count() > 0 ? double(frames) * 1e6 / double(elapsed.count()) : 0.0;
  }

  CpuLoopResult cpu_loop(GuestThread& thread, Micros quantum, const std::atomic<bool>& stop, uint64_t max_quanta)
  {
    auto& clock = thread.guest().clock();
    CpuLoopResult out;
    const Micros start = clock.now();
    thread.acquire_vcpu();
    while (!stop.load() && out.quanta < max_quanta)
      {
        thread.run_quantum(quantum);
        ++out.quanta;
        yield(thread);
      }
    thread.release_vcpu();
    out.elapsed = clock.now() - start;
    return out;
  }

  PollReaderResult poll_reader(GuestThread& thread, Frontend& frontend, const PollReaderConfig& config)
  {
    auto& clock = thread.guest().clock();
    auto& proc = thread.process();
    const auto& file = *config.file;
    PollReaderResult out;
    const Gva buf = proc.alloc_user_buffer(config.frame_bytes);

    thread.acquire_vcpu();
    const auto opened = frontend.open(thread, file);
    if (opened.status <= 0)
      {
        thread.release_vcpu();
        raise(is_error_status(opened.status) ? errc_of(opened.status) : Errc::internal, "open " + file.path);
      }
    const uint32_t handle = uint32_t(opened.status);
    const Micros start = clock.now();
    while (out.frames_read < config.frames)
      {
        const auto ready = frontend.poll(thread, file, handle, config.poll_timeout_ms);
        if (ready.status == kPollTimeout)
          {
            ++out.timeouts;
            continue;
          }
        if (ready.status < 0)
          {
            thread.release_vcpu();
            raise(errc_of(ready.status), "poll " + file.path);
          }
        const auto got = frontend.read(thread, file, handle, buf, config.frame_bytes);
        if (got.status < 0)
          {
            thread.release_vcpu();
            raise(errc_of(got.status), "read " + file.path);
          }
        ++out.frames_read;
        out.seqs.push_back(got.values[0]);
        yield(thread);
        for (uint32_t i = 0; i < config.process_quanta; ++i)
          {
            thread.run_quantum(config.quantum);
            yield(thread);
          }
      }
    out.elapsed = clock.now() - start;
    FileOp release;
    release.kind = OpKind::release;
    release.handle = handle;
    frontend.vfs_dispatch(thread, file, release);
    thread.release_vcpu();
    return out;
  }

  RenderResult render_loop(GuestThread& thread, Frontend& frontend, const RenderConfig& config,
                           const std::atomic<bool>& stop, std::atomic<uint64_t>* frame_counter)
  {
    auto& clock = thread.guest().clock();
    auto& proc = thread.process();
    const auto& file = *config.file;
    RenderResult out;
    const Gva cmd = proc.alloc_user_buffer(config.command_bytes);
    std::vector<uint8_t> commands(config.command_bytes);

    thread.acquire_vcpu();
    const auto opened = frontend.open(thread, file);
    if (opened.status <= 0)
      {
        thread.release_vcpu();
        raise(is_error_status(opened.status) ? errc_of(opened.status) : Errc::internal, "open " + file.path);
      }
    const uint32_t handle = uint32_t(opened.status);
    const Micros start = clock.now();
    bool paused = config.start_paused;
    Micros paused_at = start;
    while (!stop.load() && out.frames < config.max_frames)
      {
        while (auto sig = proc.poll_signal())
          {
            if (sig->kind == SignalKind::pause && !paused)
              {
                paused = true;
                paused_at = clock.now();
                ++out.pauses;
              }
            else if (sig->kind == SignalKind::resume && paused)
              {
                paused = false;
                out.paused += clock.now() - paused_at;
              }
          }
        if (paused)
          {
            thread.release_vcpu();
            if (auto sig = proc.wait_signal(Micros(5000)))
              proc.deliver(*sig);
            thread.acquire_vcpu();
            continue;
          }

        thread.run_quantum(config.render_quantum);
        for (size_t i = 0; i < commands.size(); ++i)
          commands[i] = uint8_t(out.frames * 7 + i);
        proc.write_user(cmd, commands);
        yield(thread);
        const auto r = frontend.ioctl(thread, file, handle, fb::kSubmit, cmd, config.command_bytes);
        if (r.status < 0)
          {
            thread.release_vcpu();
            raise(errc_of(r.status), "submit " + file.path);
          }
        out.last_checksum = r.values[0];
        ++out.frames;
        if (frame_counter)
          frame_counter->fetch_add(1);
        yield(thread);
      }
    if (paused)
      out.paused += clock.now() - paused_at;
    out.elapsed = clock.now() - start;
    FileOp release;
    release.kind = OpKind::release;
    release.handle = handle;
    frontend.vfs_dispatch(thread, file, release);
    thread.release_vcpu();
    return out;
  }

} // namespace devirt::workloads
