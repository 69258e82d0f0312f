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
#include <condition_variable>
#include <deque>
#include <exception>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <thread>
#include <vector>

#include "devirt/clock.hpp"
#include "devirt/common.hpp"
#include "devirt/memvirt.hpp"

namespace devirt
{

  struct GuestConfig
  {
    unsigned vcpus = 1;
    uint32_t memory_size = 16u << 20;
    memvirt::MemMode mem_mode = memvirt::MemMode::shadow;
  };

  /// vCPU tokens with FIFO handoff. A guest thread executes only while it
  /// holds one.
  class VcpuPool
  {
  public:
    explicit VcpuPool(unsigned count);

    unsigned acquire();
    void release(unsigned token);

    unsigned capacity() const { return unsigned(busy_.size()); }
    unsigned held() const;
    unsigned waiting() const;

  private:
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::vector<bool> busy_;
    std::deque<uint64_t> queue_;
    uint64_t next_ticket_ = 0;
    unsigned held_ = 0;
  };

  enum class ThreadState : uint8_t { runnable, running, sleeping };

  enum class SignalKind : uint8_t { io_event, pause, resume };

  struct Signal
  {
    SignalKind kind = SignalKind::io_event;
    DeviceId device{};
    bool operator==(const Signal&) const = default;
  };

  class Guest;
  class GuestProcess;

  class GuestThread
  {
  public:
    GuestThread(Guest& guest, GuestProcess& process, ThreadId id);

    ThreadId id() const { return id_; }
    GuestProcess& process() { return process_; }
    Guest& guest() { return guest_; }

    void acquire_vcpu();
    void release_vcpu();
    bool holds_vcpu() const;

    /// Global vCPU number of the held token, as seen by the hypervisor.
    uint32_t vcpu() const;

    /// Executes for the given virtual duration on the held vCPU.
    void run_quantum(Micros duration);

    /// Releases the vCPU and blocks until woken, then reacquires. A wake
    /// that arrived earlier is consumed instead.
    void sleep();
    void wake();

    ThreadState state() const;
    uint64_t progress() const { return progress_.load(); }

  private:
    Guest& guest_;
    GuestProcess& process_;
    ThreadId id_;
    std::atomic<uint64_t> progress_{0};

    mutable std::mutex mu_;
    std::condition_variable cv_;
    ThreadState state_ = ThreadState::runnable;
    std::optional<unsigned> token_;
    bool permit_ = false;
  };

  class GuestProcess
  {
  public:
    GuestProcess(Guest& guest, const memvirt::PageTableRoot& root);

    ProcessId id() const { return root_.owner; }
    const memvirt::PageTableRoot& page_table_root() const { return root_; }
    Guest& guest() { return guest_; }

    /// Reserves an unmapped, page-aligned virtual range.
    std::optional<Gva> reserve_va_range(uint32_t length);

    /// Reserves a range and backs it with fresh guest frames.
    Gva alloc_user_buffer(uint32_t length);

    /// Guest-side access through the guest's own page tables.
    void write_user(Gva gva, std::span<const uint8_t> bytes);
    void read_user(Gva gva, std::span<uint8_t> bytes) const;

    void deliver(Signal signal);
    std::optional<Signal> poll_signal();
    /// Waits for a signal for at most the given virtual duration.
    std::optional<Signal> wait_signal(Micros timeout);
    size_t pending_signals() const;

    void set_va_limit(uint32_t limit) { va_limit_ = limit; }

  private:
    Guest& guest_;
    memvirt::PageTableRoot root_;
    std::mutex va_mu_;
    uint32_t next_va_ = 0x1000'0000;
    uint32_t va_limit_ = 0xB000'0000;

    mutable std::mutex sig_mu_;
    std::condition_variable sig_cv_;
    std::deque<Signal> signals_;
  };

  /// Simulated guest OS: vCPU tokens, processes, threads, frame allocator.
  class Guest
  {
  public:
    Guest(GuestId id, const GuestConfig& config, memvirt::Hypervisor& hv, Clock& clock, uint32_t vcpu_base);
    ~Guest();

    Guest(const Guest&) = delete;
    Guest& operator=(const Guest&) = delete;

    GuestId id() const { return id_; }
    const GuestConfig& config() const { return config_; }
    VcpuPool& vcpus() { return vcpus_; }
    Clock& clock() { return clock_; }
    memvirt::VmMemory& memory() { return vm_; }
    uint32_t vcpu_base() const { return vcpu_base_; }

    GuestProcess& create_process();
    GuestThread& create_thread(GuestProcess& process);
    GuestThread* find_thread(ThreadId id);
    GuestProcess* find_process(ProcessId id);

    void kill_process(ProcessId id);
    void deliver_signal(ProcessId process, Signal signal);

    uint32_t alloc_frame();

    /// Runs body on a new execution context; joined by join_all().
    void run(GuestThread& thread, std::function<void(GuestThread&)> body);
    void join_all();

    /// Threads currently in the running state.
    unsigned running_threads() const;

  private:
    GuestId id_;
    GuestConfig config_;
    memvirt::VmMemory& vm_;
    Clock& clock_;
    uint32_t vcpu_base_;
    VcpuPool vcpus_;
    memvirt::FrameAllocator frames_;

    mutable std::mutex mu_;
    std::map<ProcessId, std::unique_ptr<GuestProcess>> processes_;
    std::vector<std::unique_ptr<GuestThread>> threads_;
    std::vector<std::unique_ptr<GuestProcess>> dead_;
    std::vector<std::thread> contexts_;
    std::exception_ptr failure_;
    uint32_t next_thread_id_ = 1;
  };

} // namespace devirt
