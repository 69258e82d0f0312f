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

#include <atomic>
#include <cstdint>
#include <vector>

#include "devirt/frontend.hpp"
#include "devirt/guest_runtime.hpp"

namespace devirt::workloads
{

  /// Hands the vCPU to the next waiter, if any.
  void yield(GuestThread& thread);

  struct CpuLoopResult
  {
    uint64_t quanta = 0;
    Micros elapsed{0};

    double rate() const;
  };

  /// Compile stand-in: quanta until stop is set or max_quanta ran.
  CpuLoopResult cpu_loop(GuestThread& thread, Micros quantum, const std::atomic<bool>& stop,
                         uint64_t max_quanta = UINT64_MAX);

  struct PollReaderConfig
  {
    const VirtualDeviceFile* file = nullptr;
    uint32_t frames = 10;
    uint32_t frame_bytes = 4096;
    uint32_t process_quanta = 2;
    Micros quantum{1000};
    uint32_t poll_timeout_ms = 1000;
  };

  struct PollReaderResult
  {
    uint32_t frames_read = 0;
    uint32_t timeouts = 0;
    Micros elapsed{0};
    /// First payload word of every frame.
    std::vector<uint32_t> seqs;
  };

  /// Camera application: poll, read a frame, process it.
  PollReaderResult poll_reader(GuestThread& thread, Frontend& frontend, const PollReaderConfig& config);

  struct RenderConfig
  {
    const VirtualDeviceFile* file = nullptr;
    Micros render_quantum{1000};
    uint32_t command_bytes = 256;
    uint64_t max_frames = UINT64_MAX;
    /// Background applications wait for their first resume.
    bool start_paused = false;
  };

  struct RenderResult
  {
    uint64_t frames = 0;
    uint64_t pauses = 0;
    Micros elapsed{0};
    Micros paused{0};
    uint32_t last_checksum = 0;

    double fps() const;
  };

  /// Graphics application: render, submit, repeat. Honors pause and
  /// resume signals delivered to its process.
  RenderResult render_loop(GuestThread& thread, Frontend& frontend, const RenderConfig& config,
                           const std::atomic<bool>& stop, std::atomic<uint64_t>* frame_counter = nullptr);

} // namespace devirt::workloads
