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
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "devirt/clock.hpp"
#include "devirt/devices.hpp"
#include "devirt/hypercall.hpp"
#include "devirt/interrupts.hpp"
#include "devirt/memvirt.hpp"

namespace devirt
{

  enum class HasMode : uint8_t { software, hardware };

  std::string_view has_mode_name(HasMode mode);

  /// Machine-parseable log, one key=value line per event:
  ///   t=<us> ev=<type> guest=<g> process=<p> thread=<t> op=<op> status=<s> [extra]
  class EventLog
  {
  public:
    explicit EventLog(const Clock& clock) : clock_(clock) {}

    void record(std::string_view ev, GuestId guest, ProcessId process, uint32_t thread, std::string_view op,
                std::string_view status, std::string_view extra = {});

    std::vector<std::string> lines() const;

    /// Lines whose key=value fields include every given pair.
    size_t count(std::initializer_list<std::pair<std::string_view, std::string_view>> match) const;

    void clear();

  private:
    const Clock& clock_;
    mutable std::mutex mu_;
    std::vector<std::string> lines_;
  };

  /// Parses one log line into its fields.
  std::map<std::string, std::string> parse_log_line(std::string_view line);

  /// Per-thread control block next to the result page.
  struct ResultControl
  {
    uint32_t seq = 0;
    int32_t status = 0;
    uint32_t data_offset = 0;
    uint32_t data_length = 0;
    std::array<uint32_t, 4> values{};
  };

  inline constexpr uint32_t kControlBytes = 32;
  inline constexpr uint32_t kControlDone = 0x100;

  ResultControl read_control(const memvirt::PhysMem& mem, Hpa at);
  void write_control(memvirt::PhysMem& mem, Hpa at, const ResultControl& c);

  struct GuestProcessRecord
  {
    struct ResultPage
    {
      Hpa data;
      Hpa control;
    };

    struct OpenHandle
    {
      DeviceId device;
      uint32_t driver_handle = 0;
    };

    GuestProcessRecord(GuestId g, memvirt::VmMemory& vm, const memvirt::PageTableRoot& root);

    GuestId guest;
    ProcessId process;
    memvirt::PageTableRoot stored_pt_root;
    memvirt::GuestProcessMemory memory;

    std::mutex mu;
    std::map<uint16_t, ResultPage> result_pages;
    std::map<uint32_t, OpenHandle> handles;
  };

  /// Recorded driver-initiated map awaiting a guest range.
  struct MapRequest
  {
    DeviceId device;
    uint32_t length = 0;
    std::vector<uint32_t> pfns;
  };

  class Backend
  {
  public:
    Backend(memvirt::Hypervisor& hv, Clock& clock, InterruptFabric& fabric, EventLog& log);
    ~Backend();

    Backend(const Backend&) = delete;
    Backend& operator=(const Backend&) = delete;

    void add_device(ClassDriver& driver);
    ClassDriver& device(DeviceId id) const;

    /// Reserves the guest's completion and pause/resume lines.
    void attach_guest(GuestId guest, HasMode has_mode);

    HypercallResult dispatch(const Call& call);

    struct Staging
    {
      Hpa page;
      uint32_t base = 0;
      uint32_t length = 0;
      uint32_t low = UINT32_MAX;
      uint32_t high = 0;
    };

    /// Runs the op against the host driver in a marked context.
    OpResult execute_fileop(GuestProcessRecord& record, const FileOp& op, HasMode has_mode,
                            Staging* staging = nullptr);

    void route_host_event(DeviceId device, std::span<const uint8_t> payload);

    /// nullopt means the host owns the foreground.
    void set_foreground(std::optional<GuestId> owner);
    std::optional<GuestId> foreground() const;

    /// Hook for rejecting ops from guests that ignore pause. Not enforced.
    void set_boycott_hook(std::function<bool(GuestId)> hook);

    uint32_t record_map_and_fail(GuestProcessRecord& record, DeviceId device, uint32_t length,
                                 std::span<const uint32_t> pfns);
    /// Raises StaleRequest when the entry is missing.
    MapRequest consume_map_request(GuestProcessRecord& record, uint32_t request_id, DeviceId device,
                                   uint32_t length);
    size_t ledger_size() const;

    GuestProcessRecord* find_record(GuestId guest, ProcessId process);
    bool has_dual_thread(GuestId guest, uint16_t thread) const;
    size_t dual_thread_count() const;

    uint64_t dropped_events() const { return dropped_events_.load(); }
    uint64_t accepted() const { return accepted_.load(); }
    uint64_t completions() const { return completions_.load(); }
    uint64_t pages_mapped() const { return pages_mapped_.load(); }
    void note_page_mapped() { ++pages_mapped_; }

    memvirt::Hypervisor& hypervisor() { return hv_; }
    EventLog& log() { return log_; }
    Clock& clock() { return clock_; }

    void shutdown();

  private:
    struct DualThread
    {
      GuestId guest;
      uint16_t thread = 0;
      std::mutex mu;
      std::condition_variable cv;
      std::optional<Call> pending;
      bool stop = false;
      std::thread worker;
    };

    struct GuestState
    {
      HasMode has_mode = HasMode::software;
      uint32_t completion_line = 0;
      uint32_t pause_line = 0;
      std::set<DeviceId> subscriptions;
    };

    GuestProcessRecord& record_for(const Call& call);
    void dual_thread_body(DualThread& dual);
    HasMode has_mode_of(GuestId guest) const;

    memvirt::Hypervisor& hv_;
    Clock& clock_;
    InterruptFabric& fabric_;
    EventLog& log_;

    mutable std::mutex mu_;
    std::map<DeviceId, ClassDriver*> devices_;
    std::map<GuestId, GuestState> guests_;
    std::map<std::pair<GuestId, ProcessId>, std::unique_ptr<GuestProcessRecord>> records_;
    std::map<std::pair<GuestId, uint16_t>, std::unique_ptr<DualThread>> duals_;
    std::optional<GuestId> foreground_;
    std::function<bool(GuestId)> boycott_hook_;

    mutable std::mutex ledger_mu_;
    std::map<std::tuple<GuestId, ProcessId, uint32_t>, MapRequest> ledger_;
    uint32_t next_request_ = 1;

    std::atomic<uint32_t> next_handle_{1};
    std::atomic<uint64_t> dropped_events_{0};
    std::atomic<uint64_t> accepted_{0};
    std::atomic<uint64_t> completions_{0};
    std::atomic<uint64_t> pages_mapped_{0};
  };

} // namespace devirt
