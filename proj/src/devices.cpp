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

#include "devirt/devices.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace devirt
{

  namespace kernel
  {

    namespace
    {
      thread_local UserContext* tls_context = nullptr;
      std::atomic<uint64_t> g_redirected{0};
      std::atomic<uint64_t> g_native{0};

      UserContext& require_context()
      {
        if (!tls_context)
          raise(Errc::internal, "kernel routine outside a process context");
        if (tls_context->marked())
          ++g_redirected;
        else
          ++g_native;
        return *tls_context;
      }
    } // namespace

    ContextScope::ContextScope(UserContext& ctx)
      : previous_(tls_context)
    {
      tls_context = &ctx;
    }

    ContextScope::~ContextScope() { tls_context = previous_; }

    UserContext* current() { return tls_context; }

    bool in_marked_context() { return tls_context && tls_context->marked(); }

    void copy_to_user(uint32_t uva, std::span<const uint8_t> bytes)
    {
      auto& ctx = require_context();
      // The copy interface is bidirectional; the buffer is not written.
      auto r = ctx.copy(memvirt::CopyDirection::to_guest, uva,
                        std::span(const_cast<uint8_t*>(bytes.data()), bytes.size()));
      if (!r.ok())
        raise(Errc::bad_address, "copy_to_user at " + hex(uva + r.bytes_copied));
    }

    void copy_from_user(std::span<uint8_t> bytes, uint32_t uva)
    {
      auto& ctx = require_context();
      auto r = ctx.copy(memvirt::CopyDirection::from_guest, uva, bytes);
      if (!r.ok())
        raise(Errc::bad_address, "copy_from_user at " + hex(uva + r.bytes_copied));
    }

    void insert_page(uint32_t uva, Hpa hpa) { require_context().insert_page(uva, hpa); }

    uint32_t vm_map(uint32_t length, std::span<const uint32_t> pfns)
    {
      return require_context().vm_map(length, pfns);
    }

    uint64_t redirected_calls() { return g_redirected.load(); }
    uint64_t native_calls() { return g_native.load(); }

    MapDeferred::MapDeferred(uint32_t request_id, uint32_t length)
      : Error(Errc::need_guest_va_range, "request " + std::to_string(request_id)),
        request_id_(request_id), length_(length)
    {
    }

    // ------------------------------------------------------------ HostTask

    HostTask::HostTask(memvirt::Hypervisor& hv, ProcessId id)
      : hv_(hv), root_(hv.create_host_process(id))
    {
    }

    memvirt::CopyResult HostTask::copy(memvirt::CopyDirection direction, uint32_t uva, std::span<uint8_t> buf)
    {
      memvirt::CopyResult result;
      auto& mem = hv_.host_memory();
      while (result.bytes_copied < buf.size())
        {
          const uint32_t va = uva + uint32_t(result.bytes_copied);
          const size_t chunk = std::min<size_t>(buf.size() - result.bytes_copied, kPageSize - (va & (kPageSize - 1)));
          const auto w = memvirt::walk(mem, root_.root_pfn, va);
          if (w.status != memvirt::WalkStatus::ok)
            {
              result.fault = PageFault(va, w.level);
              return result;
            }
          auto part = buf.subspan(result.bytes_copied, chunk);
          if (direction == memvirt::CopyDirection::to_guest)
            mem.write(w.address, part);
          else
            mem.read(w.address, part);
          result.bytes_copied += chunk;
        }
      return result;
    }

    void HostTask::insert_page(uint32_t uva, Hpa hpa) { hv_.host_map(root_, Hva(uva), hpa); }

    uint32_t HostTask::vm_map(uint32_t length, std::span<const uint32_t> pfns)
    {
      const uint32_t pages = (length + kPageSize - 1) / kPageSize;
      if (pages > pfns.size())
        raise(Errc::internal, "vm_map with too few frames");
      const uint32_t base = next_va_;
      next_va_ += (pages + 1) * kPageSize;
      for (uint32_t i = 0; i < pages; ++i)
        hv_.host_map(root_, Hva(base + i * kPageSize), Hpa::from_page(pfns[i]));
      return base;
    }

    uint32_t HostTask::alloc_buffer(uint32_t length)
    {
      const uint32_t pages = (length + kPageSize - 1) / kPageSize;
      const auto frames = hv_.allocate_frames(pages);
      return vm_map(length, frames);
    }

  } // namespace kernel

  // ---------------------------------------------------------- ClassDriver

  std::vector<uint8_t> info_text(std::string_view s) { return {s.begin(), s.end()}; }

  ClassDriver::ClassDriver(DeviceId id, std::string name, DeviceClass cls, Clock& clock)
    : clock_(clock), id_(id), name_(std::move(name)), class_(cls)
  {
  }

  OpResult ClassDriver::handle(const FileOp& op)
  {
    {
      std::function<void(const FileOp&)> observer;
      {
        std::lock_guard lock(cb_mu_);
        observer = observer_;
      }
      if (observer)
        observer(op);
    }
    if (!supported_ops().contains(op.kind))
      return failure(Errc::op_unsupported);
    try
      {
        switch (op.kind)
          {
          case OpKind::open: return open(op.flags);
          case OpKind::release: return release(op.handle);
          case OpKind::read: return read(op.handle, op.user_gva, op.length, op.offset);
          case OpKind::write: return write(op.handle, op.user_gva, op.length, op.offset);
          case OpKind::ioctl: return ioctl(op.handle, op.cmd, op.user_gva, op.length);
          case OpKind::mmap: return mmap(op.handle, op.user_gva, op.length, op.offset, op.flags);
          case OpKind::page_fault: return page_fault(op.handle, op.fault_va, op.vma_start, op.offset);
          case OpKind::poll: return poll(op.handle, op.timeout_ms);
          case OpKind::notify_subscribe: return subscribe(op.handle);
          case OpKind::announce_result_page: break;
          }
      }
    catch (const kernel::MapDeferred&)
      {
        throw;
      }
    catch (const Error& e)
      {
        return failure(e.code() == Errc::page_fault ? Errc::bad_address : e.code());
      }
    return failure(Errc::op_unsupported);
  }

  DeviceInfo ClassDriver::info() const
  {
    return {{"name", info_text(name_)}, {"id", info_text(std::to_string(id_.value))}};
  }

  void ClassDriver::set_event_callback(EventCallback cb)
  {
    std::lock_guard lock(cb_mu_);
    callback_ = std::move(cb);
  }

  void ClassDriver::set_op_observer(std::function<void(const FileOp&)> observer)
  {
    std::lock_guard lock(cb_mu_);
    observer_ = std::move(observer);
  }

  void ClassDriver::fire_event(std::span<const uint8_t> payload)
  {
    EventCallback cb;
    {
      std::lock_guard lock(cb_mu_);
      cb = callback_;
    }
    ++events_fired_;
    if (cb)
      cb(id_, payload);
  }

  OpResult ClassDriver::open(uint32_t) { return failure(Errc::op_unsupported); }
  OpResult ClassDriver::release(uint32_t) { return failure(Errc::op_unsupported); }
  OpResult ClassDriver::read(uint32_t, uint32_t, uint32_t, uint32_t) { return failure(Errc::op_unsupported); }
  OpResult ClassDriver::write(uint32_t, uint32_t, uint32_t, uint32_t) { return failure(Errc::op_unsupported); }
  OpResult ClassDriver::ioctl(uint32_t, uint32_t, uint32_t, uint32_t) { return failure(Errc::op_unsupported); }
  OpResult ClassDriver::mmap(uint32_t, uint32_t, uint32_t, uint32_t, uint32_t)
  {
    return failure(Errc::op_unsupported);
  }
  OpResult ClassDriver::page_fault(uint32_t, uint32_t, uint32_t, uint32_t) { return failure(Errc::op_unsupported); }
  OpResult ClassDriver::poll(uint32_t, uint32_t) { return failure(Errc::op_unsupported); }
  OpResult ClassDriver::subscribe(uint32_t) { return failure(Errc::op_unsupported); }

  // ---------------------------------------------------------- EventDevice

  EventDevice::EventDevice(DeviceId id, Clock& clock, std::string name)
    : ClassDriver(id, std::move(name), DeviceClass::input, clock)
  {
  }

  std::set<OpKind> EventDevice::supported_ops() const
  {
    return {OpKind::open, OpKind::release, OpKind::read, OpKind::poll, OpKind::notify_subscribe};
  }

  DeviceInfo EventDevice::info() const
  {
    auto info = ClassDriver::info();
    info["class"] = info_text("input");
    info["event_size"] = info_text(std::to_string(kInputEventBytes));
    return info;
  }

  void EventDevice::push(uint32_t code, int32_t value)
  {
    const InputEvent ev{uint32_t(clock_.now().count() / 1000), code, value};
    {
      std::lock_guard lock(mu_);
      for (auto& [h, q] : queues_)
        q.push_back(ev);
    }
    cv_.notify_all();
    uint8_t payload[kInputEventBytes];
    std::memcpy(payload, &ev.time_ms, 4);
    std::memcpy(payload + 4, &ev.code, 4);
    std::memcpy(payload + 8, &ev.value, 4);
    fire_event(payload);
  }

  size_t EventDevice::queued(uint32_t handle) const
  {
    std::lock_guard lock(mu_);
    auto it = queues_.find(handle);
    return it == queues_.end() ? 0 : it->second.size();
  }

  OpResult EventDevice::open(uint32_t)
  {
    std::lock_guard lock(mu_);
    const uint32_t h = next_handle_++;
    queues_[h];
    return {int32_t(h), {}};
  }

  OpResult EventDevice::release(uint32_t handle)
  {
    std::lock_guard lock(mu_);
    if (!queues_.erase(handle))
      return failure(Errc::bad_fd);
    return {};
  }

  OpResult EventDevice::read(uint32_t handle, uint32_t uva, uint32_t length, uint32_t)
  {
    std::vector<uint8_t> out;
    {
      std::lock_guard lock(mu_);
      auto it = queues_.find(handle);
      if (it == queues_.end())
        return failure(Errc::bad_fd);
      auto& q = it->second;
      const size_t n = std::min<size_t>(length / kInputEventBytes, q.size());
      out.resize(n * kInputEventBytes);
      for (size_t i = 0; i < n; ++i)
        {
          std::memcpy(&out[i * 12], &q[i].time_ms, 4);
          std::memcpy(&out[i * 12 + 4], &q[i].code, 4);
          std::memcpy(&out[i * 12 + 8], &q[i].value, 4);
        }
      // Copy before consuming so a bad buffer loses no events.
      if (!out.empty())
        kernel::copy_to_user(uva, out);
      q.erase(q.begin(), q.begin() + long(n));
    }
    return {int32_t(out.size()), {}};
  }

  OpResult EventDevice::poll(uint32_t handle, uint32_t timeout_ms)
  {
    std::unique_lock lock(mu_);
    if (!queues_.contains(handle))
      return failure(Errc::bad_fd);
    const bool ready = clock_.wait_until(lock, cv_, clock_.now() + Micros(int64_t(timeout_ms) * 1000), [&] {
      auto it = queues_.find(handle);
      return it == queues_.end() || !it->second.empty();
    });
    return {ready ? kPollReady : kPollTimeout, {}};
  }

  OpResult EventDevice::subscribe(uint32_t handle)
  {
    std::lock_guard lock(mu_);
    return queues_.contains(handle) ? OpResult{} : failure(Errc::bad_fd);
  }

  std::vector<ScheduledEvent> parse_schedule(std::istream& in)
  {
    std::vector<ScheduledEvent> out;
    std::string line;
    unsigned lineno = 0;
    while (std::getline(in, line))
      {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos)
          line.erase(hash);
        std::istringstream ls(line);
        int64_t t;
        int64_t code;
        int64_t value;
        if (!(ls >> t))
          {
            if (line.find_first_not_of(" \t\r") == std::string::npos)
              continue;
            raise(Errc::invalid_config, "schedule line " + std::to_string(lineno) + ": expected time_ms");
          }
        std::string rest;
        if (!(ls >> code >> value) || (ls >> rest) || t < 0 || code < 0)
          raise(Errc::invalid_config, "schedule line " + std::to_string(lineno) + ": expected 'time_ms code value'");
        out.push_back({uint32_t(t), uint32_t(code), int32_t(value)});
      }
    std::stable_sort(out.begin(), out.end(),
                     [](const ScheduledEvent& a, const ScheduledEvent& b) { return a.time_ms < b.time_ms; });
    return out;
  }

  size_t generate_events(EventDevice& device, std::span<const ScheduledEvent> schedule, Clock& clock)
  {
    const Micros start = clock.now();
    for (const auto& ev : schedule)
      {
        clock.sleep_until(start + Micros(int64_t(ev.time_ms) * 1000));
        device.push(ev.code, ev.value);
      }
    return schedule.size();
  }

  // --------------------------------------------------------- StreamDevice

  StreamDevice::StreamDevice(DeviceId id, Clock& clock, StreamConfig config, std::string name)
    : ClassDriver(id, std::move(name), DeviceClass::stream, clock), config_(config)
  {
    if (config_.period.count() <= 0)
      raise(Errc::invalid_config, "stream period must be positive");
  }

  std::set<OpKind> StreamDevice::supported_ops() const
  {
    return {OpKind::open, OpKind::release, config_.capture ? OpKind::read : OpKind::write, OpKind::poll,
            OpKind::notify_subscribe};
  }

  DeviceInfo StreamDevice::info() const
  {
    auto info = ClassDriver::info();
    info["class"] = info_text("stream");
    info["direction"] = info_text(config_.capture ? "capture" : "playback");
    info["period_us"] = info_text(std::to_string(config_.period.count()));
    info["frame_size"] = info_text(std::to_string(config_.frame_size));
    return info;
  }

  uint64_t StreamDevice::frame_at(Micros t) const
  {
    return t < epoch_ ? 0 : uint64_t((t - epoch_) / config_.period);
  }

  bool StreamDevice::check_handle(uint32_t handle) const { return open_ && handle == handle_; }

  bool StreamDevice::wait_frame(Micros deadline)
  {
    Micros next;
    {
      std::lock_guard lock(mu_);
      next = epoch_ + config_.period * int64_t(last_frame_ + 1);
    }
    if (clock_.now() >= next)
      return true;
    clock_.sleep_until(std::min(next, deadline));
    return clock_.now() >= next;
  }

  void StreamDevice::notify_frame()
  {
    uint64_t frame;
    {
      std::lock_guard lock(mu_);
      frame = frame_at(clock_.now());
    }
    uint8_t payload[8];
    std::memcpy(payload, &frame, 8);
    fire_event(payload);
  }

  uint64_t StreamDevice::frames_delivered() const
  {
    std::lock_guard lock(mu_);
    return delivered_;
  }

  OpResult StreamDevice::open(uint32_t)
  {
    std::lock_guard lock(mu_);
    if (open_)
      return failure(Errc::busy);
    open_ = true;
    handle_ = next_handle_++;
    epoch_ = clock_.now();
    last_frame_ = 0;
    return {int32_t(handle_), {}};
  }

  OpResult StreamDevice::release(uint32_t handle)
  {
    std::lock_guard lock(mu_);
    if (!check_handle(handle))
      return failure(Errc::bad_fd);
    open_ = false;
    return {};
  }

  OpResult StreamDevice::read(uint32_t handle, uint32_t uva, uint32_t length, uint32_t)
  {
    {
      std::lock_guard lock(mu_);
      if (!check_handle(handle))
        return failure(Errc::bad_fd);
    }
    wait_frame(Micros::max());
    std::vector<uint8_t> payload;
    uint64_t frame;
    uint64_t seq;
    {
      std::lock_guard lock(mu_);
      frame = frame_at(clock_.now());
      seq = delivered_;
      payload.resize(std::min(length, config_.frame_size));
      for (size_t i = 0; i < payload.size(); ++i)
        payload[i] = uint8_t(seq * 131 + i);
    }
    if (!payload.empty())
      kernel::copy_to_user(uva, payload);
    std::lock_guard lock(mu_);
    last_frame_ = frame;
    ++delivered_;
    return {int32_t(payload.size()), {uint32_t(seq), 0, 0, 0}};
  }

  OpResult StreamDevice::write(uint32_t handle, uint32_t uva, uint32_t length, uint32_t)
  {
    {
      std::lock_guard lock(mu_);
      if (!check_handle(handle))
        return failure(Errc::bad_fd);
    }
    std::vector<uint8_t> payload(std::min(length, config_.frame_size));
    if (!payload.empty())
      kernel::copy_from_user(payload, uva);
    wait_frame(Micros::max());
    std::lock_guard lock(mu_);
    last_frame_ = frame_at(clock_.now());
    ++delivered_;
    return {int32_t(payload.size()), {}};
  }

  OpResult StreamDevice::poll(uint32_t handle, uint32_t timeout_ms)
  {
    {
      std::lock_guard lock(mu_);
      if (!check_handle(handle))
        return failure(Errc::bad_fd);
    }
    const bool ready = wait_frame(clock_.now() + Micros(int64_t(timeout_ms) * 1000));
    return {ready ? kPollReady : kPollTimeout, {}};
  }

  OpResult StreamDevice::subscribe(uint32_t handle)
  {
    std::lock_guard lock(mu_);
    return check_handle(handle) ? OpResult{} : failure(Errc::bad_fd);
  }

  // ------------------------------------------------------------- FbDevice

  std::vector<uint8_t> fb_pci_config(DeviceId id)
  {
    std::vector<uint8_t> cfg(256);
    const uint16_t vendor = 0x8086;
    const uint16_t device = uint16_t(0x0100 + id.value);
    std::memcpy(&cfg[0], &vendor, 2);
    std::memcpy(&cfg[2], &device, 2);
    cfg[0x0A] = 0x00; // VGA-compatible display controller
    cfg[0x0B] = 0x03;
    cfg[0x0E] = 0x00;
    for (size_t i = 0x40; i < cfg.size(); ++i)
      cfg[i] = uint8_t(i ^ id.value);
    return cfg;
  }

  FbDevice::FbDevice(DeviceId id, Clock& clock, memvirt::Hypervisor& hv, FbConfig config, std::string name)
    : ClassDriver(id, std::move(name), DeviceClass::framebuffer, clock), hv_(hv), config_(config)
  {
    const uint32_t bytes = config_.width * config_.height * config_.bytes_per_pixel;
    fb_frames_ = hv_.allocate_frames((bytes + kPageSize - 1) / kPageSize);
    bo_frames_ = hv_.allocate_frames(config_.bo_pages);
  }

  std::set<OpKind> FbDevice::supported_ops() const
  {
    return {OpKind::open, OpKind::release, OpKind::read, OpKind::write, OpKind::ioctl, OpKind::mmap,
            OpKind::page_fault};
  }

  DeviceInfo FbDevice::info() const
  {
    auto info = ClassDriver::info();
    info["class"] = info_text("framebuffer");
    info["model"] = info_text("simfb");
    info["vendor"] = info_text("8086");
    info["pci_config"] = fb_pci_config(id());
    return info;
  }

  uint64_t FbDevice::fence() const
  {
    std::lock_guard lock(mu_);
    return fence_;
  }

  uint32_t FbDevice::bo_pages_used() const
  {
    std::lock_guard lock(mu_);
    return bo_used_;
  }

  bool FbDevice::check_handle(uint32_t handle) const { return handles_.contains(handle); }

  OpResult FbDevice::open(uint32_t)
  {
    std::lock_guard lock(mu_);
    const uint32_t h = next_handle_++;
    handles_.insert(h);
    return {int32_t(h), {}};
  }

  OpResult FbDevice::release(uint32_t handle)
  {
    std::lock_guard lock(mu_);
    return handles_.erase(handle) ? OpResult{} : failure(Errc::bad_fd);
  }

  OpResult FbDevice::read(uint32_t handle, uint32_t uva, uint32_t length, uint32_t offset)
  {
    const uint64_t size = uint64_t(fb_frames_.size()) * kPageSize;
    {
      std::lock_guard lock(mu_);
      if (!check_handle(handle))
        return failure(Errc::bad_fd);
    }
    if (offset >= size)
      return {0, {}};
    std::vector<uint8_t> out(std::min<uint64_t>(length, size - offset));
    for (size_t done = 0; done < out.size();)
      {
        const uint64_t pos = offset + done;
        const size_t chunk = std::min<size_t>(out.size() - done, kPageSize - pos % kPageSize);
        hv_.host_memory().read(Hpa::from_page(fb_frames_[pos / kPageSize], uint32_t(pos % kPageSize)).value,
                               std::span(out).subspan(done, chunk));
        done += chunk;
      }
    if (!out.empty())
      kernel::copy_to_user(uva, out);
    return {int32_t(out.size()), {}};
  }

  OpResult FbDevice::write(uint32_t handle, uint32_t uva, uint32_t length, uint32_t offset)
  {
    const uint64_t size = uint64_t(fb_frames_.size()) * kPageSize;
    {
      std::lock_guard lock(mu_);
      if (!check_handle(handle))
        return failure(Errc::bad_fd);
    }
    if (offset >= size)
      return failure(Errc::out_of_range);
    std::vector<uint8_t> in(std::min<uint64_t>(length, size - offset));
    if (!in.empty())
      kernel::copy_from_user(in, uva);
    for (size_t done = 0; done < in.size();)
      {
        const uint64_t pos = offset + done;
        const size_t chunk = std::min<size_t>(in.size() - done, kPageSize - pos % kPageSize);
        hv_.host_memory().write(Hpa::from_page(fb_frames_[pos / kPageSize], uint32_t(pos % kPageSize)).value,
                                std::span(in).subspan(done, chunk));
        done += chunk;
      }
    return {int32_t(in.size()), {}};
  }

  OpResult FbDevice::ioctl(uint32_t handle, uint32_t cmd, uint32_t uva, uint32_t length)
  {
    {
      std::lock_guard lock(mu_);
      if (!check_handle(handle))
        return failure(Errc::bad_fd);
    }
    switch (cmd)
      {
      case fb::kGetInfo:
        {
          const uint32_t words[4] = {config_.width, config_.height, config_.bytes_per_pixel, fb_pages()};
          uint8_t out[fb::kInfoBytes];
          std::memcpy(out, words, sizeof out);
          kernel::copy_to_user(uva, out);
          return {};
        }
      case fb::kSubmit:
        {
          if (length > 16 * kPageSize)
            return failure(Errc::out_of_range);
          std::vector<uint8_t> cmds(length);
          if (length)
            kernel::copy_from_user(cmds, uva);
          uint32_t sum = 0;
          for (uint8_t b : cmds)
            sum = sum * 31 + b;
          if (config_.submit_cost.count() > 0)
            clock_.sleep_for(config_.submit_cost);
          std::lock_guard lock(mu_);
          hv_.host_memory().write_u32(Hpa::from_page(fb_frames_[0]).value, sum);
          return {int32_t(++fence_), {sum, 0, 0, 0}};
        }
      case fb::kMapCmd:
        {
          const uint32_t pages = (length + kPageSize - 1) / kPageSize;
          std::vector<uint32_t> pfns;
          {
            std::lock_guard lock(mu_);
            if (pages == 0 || bo_used_ + pages > bo_frames_.size())
              return failure(Errc::pool_exhausted);
            pfns.assign(bo_frames_.begin() + bo_used_, bo_frames_.begin() + bo_used_ + pages);
          }
          ++map_requests_;
          // Nothing is committed until the map exists.
          const uint32_t mapped = kernel::vm_map(length, pfns);
          uint8_t out[4];
          std::memcpy(out, &mapped, 4);
          kernel::copy_to_user(uva, out);
          std::lock_guard lock(mu_);
          bo_used_ += pages;
          return {0, {mapped, pages, 0, 0}};
        }
      default: return failure(Errc::invalid_cmd);
      }
  }

  OpResult FbDevice::mmap(uint32_t handle, uint32_t uva, uint32_t length, uint32_t pgoff, uint32_t flags)
  {
    {
      std::lock_guard lock(mu_);
      if (!check_handle(handle))
        return failure(Errc::bad_fd);
    }
    const uint32_t pages = (length + kPageSize - 1) / kPageSize;
    if (uva % kPageSize || pages == 0 || uint64_t(pgoff) + pages > fb_frames_.size())
      return failure(Errc::out_of_range);
    if (flags & fb::kMapPopulate)
      for (uint32_t i = 0; i < pages; ++i)
        kernel::insert_page(uva + i * kPageSize, Hpa::from_page(fb_frames_[pgoff + i]));
    return {0, {uva, pages, 0, 0}};
  }

  OpResult FbDevice::page_fault(uint32_t handle, uint32_t fault_va, uint32_t vma_start, uint32_t pgoff)
  {
    {
      std::lock_guard lock(mu_);
      if (!check_handle(handle))
        return failure(Errc::bad_fd);
    }
    if (fault_va < vma_start)
      return failure(Errc::bad_address);
    const uint64_t index = uint64_t(pgoff) + (fault_va - vma_start) / kPageSize;
    if (index >= fb_frames_.size())
      return failure(Errc::bad_address);
    kernel::insert_page(fault_va & ~(kPageSize - 1), Hpa::from_page(fb_frames_[index]));
    return {0, {uint32_t(index), 0, 0, 0}};
  }

} // namespace devirt
