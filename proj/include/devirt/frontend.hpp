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
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "devirt/backend.hpp"
#include "devirt/devices.hpp"
#include "devirt/guest_runtime.hpp"
#include "devirt/hypercall.hpp"
#include "devirt/interrupts.hpp"

namespace devirt
{

  /// Guest-side handle on a devirtualized device.
  struct VirtualDeviceFile
  {
    std::string path;
    DeviceId device;
    std::set<OpKind> ops_table;
  };

  /// A mapped range of a device file in one guest process.
  struct Vma
  {
    uint32_t start = 0;
    uint32_t end = 0;
    uint32_t handle = 0;
    uint32_t pgoff = 0;
    uint32_t flags = 0;
    const VirtualDeviceFile* file = nullptr;
  };

  /// Guest kernel half: forwards file operations over the channel and
  /// turns interrupts back into wakes and signals.
  class Frontend
  {
  public:
    Frontend(Guest& guest, HypercallChannel& channel, InterruptFabric& fabric, EventLog& log);

    Frontend(const Frontend&) = delete;
    Frontend& operator=(const Frontend&) = delete;

    /// Creates the device file. The table is the intersection of both
    /// sides' supported ops.
    const VirtualDeviceFile& mount(std::string path, DeviceId device, const std::set<OpKind>& host_ops,
                                   const std::set<OpKind>& guest_ops = all_ops());
    const VirtualDeviceFile& file(std::string_view path) const;

    static std::set<OpKind> all_ops();

    void set_nonblocking(DeviceId device, bool on);
    void set_default_nonblocking(bool on);
    bool nonblocking(DeviceId device) const;

    /// Completion by polling the control block instead of sleeping.
    void set_polling(bool on) { polling_ = on; }

    /// The calling thread must hold a vCPU.
    OpResult vfs_dispatch(GuestThread& thread, const VirtualDeviceFile& file, FileOp op);

    /// Convenience wrappers over vfs_dispatch.
    OpResult open(GuestThread& thread, const VirtualDeviceFile& file, uint32_t flags = 0);
    OpResult read(GuestThread& thread, const VirtualDeviceFile& file, uint32_t handle, Gva buf, uint32_t length);
    OpResult write(GuestThread& thread, const VirtualDeviceFile& file, uint32_t handle, Gva buf, uint32_t length);
    OpResult poll(GuestThread& thread, const VirtualDeviceFile& file, uint32_t handle, uint32_t timeout_ms);
    OpResult ioctl(GuestThread& thread, const VirtualDeviceFile& file, uint32_t handle, uint32_t cmd, Gva arg,
                   uint32_t length);

    /// Reserves a range and maps the device there; values[0] is the start.
    OpResult mmap(GuestThread& thread, const VirtualDeviceFile& file, uint32_t handle, uint32_t length,
                  uint32_t pgoff = 0, uint32_t flags = 0);

    /// Guest access to a mapped address; a missing page goes to the driver.
    OpResult touch(GuestThread& thread, Gva gva);

    /// Idempotent per process and device.
    void subscribe_notifications(GuestThread& thread, const VirtualDeviceFile& file, uint32_t handle);
    std::vector<ProcessId> subscribers(DeviceId device) const;

    void handle_interrupt(uint32_t line, std::optional<uint32_t> arg);

    void register_renderer(ProcessId process);

    void export_device_info(DeviceId device, DeviceInfo info);
    /// Raises NotFound.
    const DeviceInfo& query_device_info(DeviceId device) const;

    /// Allocates the range the backend asked for and re-issues the op.
    OpResult mmap_retry(GuestThread& thread, const VirtualDeviceFile& file, FileOp failed_op,
                        const OpResult& failure);

    uint64_t hypercalls() const { return hypercalls_.load(); }
    uint64_t wakes() const { return wakes_.load(); }
    uint64_t dropped_interrupts() const { return dropped_interrupts_.load(); }
    uint64_t signals_sent() const { return signals_sent_.load(); }

    Guest& guest() { return guest_; }

  private:
    struct ResultSlot
    {
      Gpa data;
      Gpa control;
    };

    struct InFlight
    {
      GuestThread* thread = nullptr;
      ProcessId process;
      uint8_t tag = 0;
      bool done = false;
    };

    OpResult issue(GuestThread& thread, const FileOp& op, bool nonblocking);
    OpResult issue_blocking(GuestThread& thread, const FileOp& op);
    OpResult issue_nonblocking(GuestThread& thread, const FileOp& op);
    const ResultSlot& result_slot(GuestThread& thread);
    ResultControl read_control(const ResultSlot& slot) const;
    /// Marks done threads and wakes them. Returns the number woken.
    unsigned wake_completed(std::optional<uint32_t> hinted);

    Guest& guest_;
    HypercallChannel& channel_;
    InterruptFabric& fabric_;
    EventLog& log_;

    mutable std::mutex mu_;
    std::map<std::string, VirtualDeviceFile, std::less<>> files_;
    std::map<DeviceId, bool> nonblocking_;
    bool default_nonblocking_ = false;
    std::atomic<bool> polling_{false};
    std::map<ThreadId, ResultSlot> result_slots_;
    std::optional<uint32_t> control_page_;
    uint32_t next_control_slot_ = 0;
    std::map<ThreadId, InFlight> in_flight_;
    std::map<ThreadId, uint8_t> next_tag_;
    std::map<DeviceId, std::vector<ProcessId>> notify_lists_;
    std::map<uint32_t, DeviceId> notify_lines_;
    std::optional<ProcessId> renderer_;
    std::map<DeviceId, DeviceInfo> info_;
    std::map<ProcessId, std::vector<Vma>> vmas_;

    std::atomic<uint64_t> hypercalls_{0};
    std::atomic<uint64_t> wakes_{0};
    std::atomic<uint64_t> dropped_interrupts_{0};
    std::atomic<uint64_t> signals_sent_{0};
  };

} // namespace devirt
