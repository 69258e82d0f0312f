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

#include <array>
#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <istream>
#include <map>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "devirt/clock.hpp"
#include "devirt/common.hpp"
#include "devirt/hypercall.hpp"
#include "devirt/memvirt.hpp"

namespace devirt
{

  // ------------------------------------------------------ kernel routines

  namespace kernel
  {

    /// The user memory a driver touches on behalf of its current caller.
    class UserContext
    {
    public:
      virtual ~UserContext() = default;

      /// True for guest file operations executing on a host worker.
      virtual bool marked() const = 0;

      virtual memvirt::CopyResult copy(memvirt::CopyDirection direction, uint32_t uva,
                                       std::span<uint8_t> buf) = 0;
      virtual void insert_page(uint32_t uva, Hpa hpa) = 0;
      /// Maps pfns at an address chosen by the memory manager.
      virtual uint32_t vm_map(uint32_t length, std::span<const uint32_t> pfns) = 0;
    };

    /// Installs a context for the calling execution context.
    class ContextScope
    {
    public:
      explicit ContextScope(UserContext& ctx);
      ~ContextScope();

      ContextScope(const ContextScope&) = delete;
      ContextScope& operator=(const ContextScope&) = delete;

    private:
      UserContext* previous_;
    };

    UserContext* current();
    bool in_marked_context();

    /// Raise BadAddress on a fault.
    void copy_to_user(uint32_t uva, std::span<const uint8_t> bytes);
    void copy_from_user(std::span<uint8_t> bytes, uint32_t uva);
    void insert_page(uint32_t uva, Hpa hpa);
    uint32_t vm_map(uint32_t length, std::span<const uint32_t> pfns);

    /// Routine invocations by context kind, for canaries.
    uint64_t redirected_calls();
    uint64_t native_calls();

    /// Thrown by a guest context when the guest must supply the range.
    class MapDeferred : public Error
    {
    public:
      MapDeferred(uint32_t request_id, uint32_t length);
      uint32_t request_id() const { return request_id_; }
      uint32_t length() const { return length_; }

    private:
      uint32_t request_id_;
      uint32_t length_;
    };

    /// A native host process running driver code directly.
    class HostTask final : public UserContext
    {
    public:
      HostTask(memvirt::Hypervisor& hv, ProcessId id);

      bool marked() const override { return false; }
      memvirt::CopyResult copy(memvirt::CopyDirection direction, uint32_t uva,
                               std::span<uint8_t> buf) override;
      void insert_page(uint32_t uva, Hpa hpa) override;
      uint32_t vm_map(uint32_t length, std::span<const uint32_t> pfns) override;

      /// Backs a fresh user range with host frames.
      uint32_t alloc_buffer(uint32_t length);
      const memvirt::PageTableRoot& root() const { return root_; }

    private:
      memvirt::Hypervisor& hv_;
      memvirt::PageTableRoot root_;
      uint32_t next_va_ = 0x2000'0000;
    };

  } // namespace kernel

  // --------------------------------------------------------- class driver

  enum class DeviceClass : uint8_t { input, stream, framebuffer };

  struct OpResult
  {
    int32_t status = kStatusOk;
    std::array<uint32_t, 4> values{};

    bool operator==(const OpResult&) const = default;
  };

  using DeviceInfo = std::map<std::string, std::vector<uint8_t>>;

  std::vector<uint8_t> info_text(std::string_view s);

  /// Generic class driver: a table of file-operation handlers that see
  /// only the kernel memory routines, never the caller's identity.
  class ClassDriver
  {
  public:
    using EventCallback = std::function<void(DeviceId, std::span<const uint8_t>)>;

    ClassDriver(DeviceId id, std::string name, DeviceClass cls, Clock& clock);
    virtual ~ClassDriver() = default;

    DeviceId id() const { return id_; }
    const std::string& name() const { return name_; }
    DeviceClass device_class() const { return class_; }

    OpResult handle(const FileOp& op);
    virtual std::set<OpKind> supported_ops() const = 0;
    virtual DeviceInfo info() const;

    void set_event_callback(EventCallback cb);
    uint64_t events_fired() const { return events_fired_.load(); }

    /// Called as each op reaches the driver, before it runs.
    void set_op_observer(std::function<void(const FileOp&)> observer);

  protected:
    virtual OpResult open(uint32_t flags);
    virtual OpResult release(uint32_t handle);
    virtual OpResult read(uint32_t handle, uint32_t uva, uint32_t length, uint32_t offset);
    virtual OpResult write(uint32_t handle, uint32_t uva, uint32_t length, uint32_t offset);
    virtual OpResult ioctl(uint32_t handle, uint32_t cmd, uint32_t uva, uint32_t length);
    virtual OpResult mmap(uint32_t handle, uint32_t uva, uint32_t length, uint32_t pgoff, uint32_t flags);
    virtual OpResult page_fault(uint32_t handle, uint32_t fault_va, uint32_t vma_start, uint32_t pgoff);
    virtual OpResult poll(uint32_t handle, uint32_t timeout_ms);
    virtual OpResult subscribe(uint32_t handle);

    void fire_event(std::span<const uint8_t> payload);
    static OpResult failure(Errc code) { return {status_of(code), {}}; }

    Clock& clock_;

  private:
    DeviceId id_;
    std::string name_;
    DeviceClass class_;
    std::mutex cb_mu_;
    EventCallback callback_;
    std::function<void(const FileOp&)> observer_;
    std::atomic<uint64_t> events_fired_{0};
  };

  // --------------------------------------------------------- event device

  struct InputEvent
  {
    uint32_t time_ms = 0;
    uint32_t code = 0;
    int32_t value = 0;

    bool operator==(const InputEvent&) const = default;
  };

  inline constexpr uint32_t kInputEventBytes = 12;
  inline constexpr int32_t kPollReady = 1;
  inline constexpr int32_t kPollTimeout = 0;

  /// Mouse and keyboard stand-in. Every open has its own FIFO queue.
  class EventDevice final : public ClassDriver
  {
  public:
    EventDevice(DeviceId id, Clock& clock, std::string name = "event");

    std::set<OpKind> supported_ops() const override;
    DeviceInfo info() const override;

    void push(uint32_t code, int32_t value);
    size_t queued(uint32_t handle) const;

  protected:
    OpResult open(uint32_t flags) override;
    OpResult release(uint32_t handle) override;
    OpResult read(uint32_t handle, uint32_t uva, uint32_t length, uint32_t offset) override;
    OpResult poll(uint32_t handle, uint32_t timeout_ms) override;
    OpResult subscribe(uint32_t handle) override;

  private:
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::map<uint32_t, std::deque<InputEvent>> queues_;
    uint32_t next_handle_ = 1;
  };

  struct ScheduledEvent
  {
    uint32_t time_ms = 0;
    uint32_t code = 0;
    int32_t value = 0;
  };

  /// Parses "time_ms code value" lines; '#' starts a comment.
  std::vector<ScheduledEvent> parse_schedule(std::istream& in);

  /// Pushes events at their virtual times, measured from the call.
  size_t generate_events(EventDevice& device, std::span<const ScheduledEvent> schedule, Clock& clock);

  // -------------------------------------------------------- stream device

  struct StreamConfig
  {
    Micros period{40'000};
    uint32_t frame_size = 4096;
    bool capture = true; ///< false: playback, frames flow to the device
  };

  /// Camera stand-in. Exclusive open; frames fall on period boundaries
  /// from open time and a reader always gets the newest one.
  class StreamDevice final : public ClassDriver
  {
  public:
    StreamDevice(DeviceId id, Clock& clock, StreamConfig config = {}, std::string name = "stream");

    std::set<OpKind> supported_ops() const override;
    DeviceInfo info() const override;

    /// Announces the current frame to subscribers.
    void notify_frame();
    uint64_t frames_delivered() const;

  protected:
    OpResult open(uint32_t flags) override;
    OpResult release(uint32_t handle) override;
    OpResult read(uint32_t handle, uint32_t uva, uint32_t length, uint32_t offset) override;
    OpResult write(uint32_t handle, uint32_t uva, uint32_t length, uint32_t offset) override;
    OpResult poll(uint32_t handle, uint32_t timeout_ms) override;
    OpResult subscribe(uint32_t handle) override;

  private:
    uint64_t frame_at(Micros t) const;
    bool check_handle(uint32_t handle) const;
    /// Sleeps until a frame newer than the last consumed one exists.
    bool wait_frame(Micros deadline);

    StreamConfig config_;
    mutable std::mutex mu_;
    bool open_ = false;
    uint32_t handle_ = 0;
    uint32_t next_handle_ = 1;
    Micros epoch_{0};
    uint64_t last_frame_ = 0;
    uint64_t delivered_ = 0;
  };

  // --------------------------------------------------- framebuffer device

  struct FbConfig
  {
    uint32_t width = 64;
    uint32_t height = 32;
    uint32_t bytes_per_pixel = 4;
    uint32_t bo_pages = 256;
    Micros submit_cost{0};
  };

  namespace fb
  {
    inline constexpr uint32_t kGetInfo = 1;
    inline constexpr uint32_t kSubmit = 2;
    inline constexpr uint32_t kMapCmd = 3;
    inline constexpr uint32_t kMapPopulate = 1;
    inline constexpr uint32_t kInfoBytes = 16;
  } // namespace fb

  /// GPU stand-in: framebuffer pages reachable through mmap and faults,
  /// plus an ioctl that makes the driver map a buffer into the caller.
  class FbDevice final : public ClassDriver
  {
  public:
    FbDevice(DeviceId id, Clock& clock, memvirt::Hypervisor& hv, FbConfig config = {},
             std::string name = "fb");

    std::set<OpKind> supported_ops() const override;
    DeviceInfo info() const override;

    uint32_t fb_pages() const { return uint32_t(fb_frames_.size()); }
    Hpa fb_page(uint32_t index) const { return Hpa::from_page(fb_frames_.at(index)); }
    uint64_t fence() const;
    uint32_t bo_pages_used() const;
    uint64_t map_requests() const { return map_requests_.load(); }

  protected:
    OpResult open(uint32_t flags) override;
    OpResult release(uint32_t handle) override;
    OpResult read(uint32_t handle, uint32_t uva, uint32_t length, uint32_t offset) override;
    OpResult write(uint32_t handle, uint32_t uva, uint32_t length, uint32_t offset) override;
    OpResult ioctl(uint32_t handle, uint32_t cmd, uint32_t uva, uint32_t length) override;
    OpResult mmap(uint32_t handle, uint32_t uva, uint32_t length, uint32_t pgoff, uint32_t flags) override;
    OpResult page_fault(uint32_t handle, uint32_t fault_va, uint32_t vma_start, uint32_t pgoff) override;

  private:
    bool check_handle(uint32_t handle) const;

    memvirt::Hypervisor& hv_;
    FbConfig config_;
    std::vector<uint32_t> fb_frames_;
    std::vector<uint32_t> bo_frames_;
    mutable std::mutex mu_;
    std::set<uint32_t> handles_;
    uint32_t next_handle_ = 1;
    uint64_t fence_ = 0;
    uint32_t bo_used_ = 0;
    std::atomic<uint64_t> map_requests_{0};
  };

  /// 256-byte PCI-style configuration space for the framebuffer device.
  std::vector<uint8_t> fb_pci_config(DeviceId id);

} // namespace devirt
