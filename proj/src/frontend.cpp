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

#include "devirt/frontend.hpp"

#include <algorithm>

namespace devirt
{

  namespace
  {

    OpResult from_hypercall(const HypercallResult& r)
    {
      OpResult out;
      out.status = r.status;
      std::copy_n(r.values.begin(), out.values.size(), out.values.begin());
      return out;
    }

    OpResult failed(Errc code) { return {status_of(code), {}}; }

  } // namespace

  Frontend::Frontend(Guest& guest, HypercallChannel& channel, InterruptFabric& fabric, EventLog& log)
    : guest_(guest), channel_(channel), fabric_(fabric), log_(log)
  {
  }

  std::set<OpKind> Frontend::all_ops()
  {
    return {OpKind::open, OpKind::release, OpKind::read,  OpKind::write,
            OpKind::ioctl, OpKind::mmap,   OpKind::page_fault, OpKind::poll,
            OpKind::notify_subscribe};
  }

  const VirtualDeviceFile& Frontend::mount(std::string path, DeviceId device, const std::set<OpKind>& host_ops,
                                           const std::set<OpKind>& guest_ops)
  {
    VirtualDeviceFile f;
    f.path = path;
    f.device = device;
    std::set_intersection(host_ops.begin(), host_ops.end(), guest_ops.begin(), guest_ops.end(),
                          std::inserter(f.ops_table, f.ops_table.end()));
    std::lock_guard lock(mu_);
    for (const auto& [p, existing] : files_)
      if (existing.device == device)
        raise(Errc::duplicate_device, "device " + std::to_string(device.value) + " already at " + p);
    auto [it, inserted] = files_.emplace(path, std::move(f));
    if (!inserted)
      raise(Errc::duplicate_device, path);
    return it->second;
  }

  const VirtualDeviceFile& Frontend::file(std::string_view path) const
  {
    std::lock_guard lock(mu_);
    auto it = files_.find(path);
    if (it == files_.end())
      raise(Errc::not_found, std::string(path));
    return it->second;
  }

  void Frontend::set_nonblocking(DeviceId device, bool on)
  {
    std::lock_guard lock(mu_);
    nonblocking_[device] = on;
  }

  void Frontend::set_default_nonblocking(bool on)
  {
    std::lock_guard lock(mu_);
    default_nonblocking_ = on;
  }

  bool Frontend::nonblocking(DeviceId device) const
  {
    std::lock_guard lock(mu_);
    auto it = nonblocking_.find(device);
    return it == nonblocking_.end() ? default_nonblocking_ : it->second;
  }

  // -------------------------------------------------------------- dispatch

  OpResult Frontend::vfs_dispatch(GuestThread& thread, const VirtualDeviceFile& file, FileOp op)
  {
    if (!file.ops_table.contains(op.kind))
      return failed(Errc::op_unsupported);
    if (op.kind == OpKind::open || op.kind == OpKind::notify_subscribe)
      op.device = file.device.value;
    const OpResult r = issue(thread, op, nonblocking(file.device));
    if (r.status == status_of(Errc::need_guest_va_range))
      return mmap_retry(thread, file, op, r);
    return r;
  }

  OpResult Frontend::issue(GuestThread& thread, const FileOp& op, bool nonblocking)
  {
    return nonblocking ? issue_nonblocking(thread, op) : issue_blocking(thread, op);
  }

  OpResult Frontend::issue_blocking(GuestThread& thread, const FileOp& op)
  {
    const CallHeader header{uint16_t(thread.id().value), 0, false};
    const auto frames = pack(op, header, thread.vcpu(), thread.process().page_table_root().root_pfn);
    hypercalls_ += frames.size();
    return from_hypercall(channel_.issue(frames, thread.vcpu()));
  }

  const Frontend::ResultSlot& Frontend::result_slot(GuestThread& thread)
  {
    {
      std::lock_guard lock(mu_);
      if (auto it = result_slots_.find(thread.id()); it != result_slots_.end())
        return it->second;
    }
    ResultSlot slot;
    slot.data = Gpa::from_page(guest_.alloc_frame());
    {
      std::lock_guard lock(mu_);
      if (!control_page_ || next_control_slot_ == kPageSize / kControlBytes)
        {
          control_page_ = guest_.alloc_frame();
          next_control_slot_ = 0;
        }
      slot.control = Gpa::from_page(*control_page_) + next_control_slot_++ * kControlBytes;
    }
    FileOp announce;
    announce.kind = OpKind::announce_result_page;
    announce.result_gpa = slot.data.value;
    announce.control_gpa = slot.control.value;
    const auto r = issue_blocking(thread, announce);
    if (r.status != kStatusOk)
      raise(errc_of(r.status), "result page announcement failed");
    std::lock_guard lock(mu_);
    return result_slots_[thread.id()] = slot;
  }

  ResultControl Frontend::read_control(const ResultSlot& slot) const
  {
    auto& vm = guest_.memory();
    return devirt::read_control(vm.hypervisor().host_memory(), vm.gpa_to_hpa(slot.control));
  }

  OpResult Frontend::issue_nonblocking(GuestThread& thread, const FileOp& op)
  {
    const ResultSlot slot = result_slot(thread);
    auto& vm = guest_.memory();
    auto& host = vm.hypervisor().host_memory();
    uint8_t tag;
    {
      std::lock_guard lock(mu_);
      if (in_flight_.contains(thread.id()))
        return failed(Errc::busy);
      tag = ++next_tag_[thread.id()];
      in_flight_[thread.id()] = {&thread, thread.process().id(), tag, false};
    }
    host.write_u32(vm.gpa_to_hpa(slot.control).value, 0);

    const CallHeader header{uint16_t(thread.id().value), tag, true};
    const auto frames = pack(op, header, thread.vcpu(), thread.process().page_table_root().root_pfn);
    hypercalls_ += frames.size();
    const auto accepted = channel_.issue(frames, thread.vcpu());
    if (accepted.status != kStatusAccepted)
      {
        std::lock_guard lock(mu_);
        in_flight_.erase(thread.id());
        return from_hypercall(accepted);
      }

    for (;;)
      {
        if (polling_)
          {
            thread.release_vcpu();
            guest_.clock().sleep_for(Micros(50));
            thread.acquire_vcpu();
          }
        else
          thread.sleep();
        std::lock_guard lock(mu_);
        auto it = in_flight_.find(thread.id());
        if (it->second.done)
          {
            in_flight_.erase(it);
            break;
          }
      }

    const ResultControl ctl = read_control(slot);
    if (ctl.data_length > 0)
      {
        std::vector<uint8_t> staged(ctl.data_length);
        host.read(vm.gpa_to_hpa(slot.data).value + ctl.data_offset, staged);
        thread.process().write_user(Gva(op.user_gva) + ctl.data_offset, staged);
      }
    return {ctl.status, ctl.values};
  }

  unsigned Frontend::wake_completed(std::optional<uint32_t> hinted)
  {
    // Coalesced completions keep only the latest arg, so every waiter is
    // checked, the hinted one first.
    std::vector<std::pair<GuestThread*, InFlight>> woken;
    {
      std::lock_guard lock(mu_);
      auto check = [&](ThreadId id, InFlight& f) {
        if (f.done)
          return;
        const auto& slot = result_slots_.at(id);
        if (read_control(slot).seq != (kControlDone | f.tag))
          return;
        f.done = true;
        woken.emplace_back(f.thread, f);
      };
      if (hinted)
        if (auto it = in_flight_.find(ThreadId(*hinted)); it != in_flight_.end())
          check(it->first, it->second);
      for (auto& [id, f] : in_flight_)
        check(id, f);
    }
    for (auto& [thread, f] : woken)
      {
        ++wakes_;
        log_.record("wake", guest_.id(), f.process, thread->id().value, "-", "-",
                    "cause=completion tag=" + std::to_string(f.tag));
        thread->wake();
      }
    return unsigned(woken.size());
  }

  // -------------------------------------------------------- op wrappers

  OpResult Frontend::open(GuestThread& thread, const VirtualDeviceFile& file, uint32_t flags)
  {
    FileOp op;
    op.kind = OpKind::open;
    op.flags = flags;
    return vfs_dispatch(thread, file, op);
  }

  OpResult Frontend::read(GuestThread& thread, const VirtualDeviceFile& file, uint32_t handle, Gva buf,
                          uint32_t length)
  {
    FileOp op;
    op.kind = OpKind::read;
    op.handle = handle;
    op.user_gva = buf.value;
    op.length = length;
    return vfs_dispatch(thread, file, op);
  }

  OpResult Frontend::write(GuestThread& thread, const VirtualDeviceFile& file, uint32_t handle, Gva buf,
                           uint32_t length)
  {
    FileOp op;
    op.kind = OpKind::write;
    op.handle = handle;
    op.user_gva = buf.value;
    op.length = length;
    return vfs_dispatch(thread, file, op);
  }

  OpResult Frontend::poll(GuestThread& thread, const VirtualDeviceFile& file, uint32_t handle, uint32_t timeout_ms)
  {
    FileOp op;
    op.kind = OpKind::poll;
    op.handle = handle;
    op.timeout_ms = timeout_ms;
    return vfs_dispatch(thread, file, op);
  }

  OpResult Frontend::ioctl(GuestThread& thread, const VirtualDeviceFile& file, uint32_t handle, uint32_t cmd,
                           Gva arg, uint32_t length)
  {
    FileOp op;
    op.kind = OpKind::ioctl;
    op.handle = handle;
    op.cmd = cmd;
    op.user_gva = arg.value;
    op.length = length;
    return vfs_dispatch(thread, file, op);
  }

  OpResult Frontend::mmap(GuestThread& thread, const VirtualDeviceFile& file, uint32_t handle, uint32_t length,
                          uint32_t pgoff, uint32_t flags)
  {
    if (!file.ops_table.contains(OpKind::mmap))
      return failed(Errc::op_unsupported);
    const auto range = thread.process().reserve_va_range(length);
    if (!range)
      return failed(Errc::out_of_range);
    FileOp op;
    op.kind = OpKind::mmap;
    op.handle = handle;
    op.user_gva = range->value;
    op.length = length;
    op.offset = pgoff;
    op.flags = flags;
    OpResult r = vfs_dispatch(thread, file, op);
    if (r.status >= 0)
      {
        const uint32_t pages = (length + kPageSize - 1) / kPageSize;
        std::lock_guard lock(mu_);
        vmas_[thread.process().id()].push_back({range->value, range->value + pages * kPageSize, handle, pgoff,
                                                flags, &file});
        r.values[0] = range->value;
      }
    return r;
  }

  OpResult Frontend::touch(GuestThread& thread, Gva gva)
  {
    auto& proc = thread.process();
    try
      {
        memvirt::walk_guest(gva, proc.page_table_root(), guest_.memory().guest_memory());
        return {};
      }
    catch (const PageFault&)
      {
      }
    std::optional<Vma> vma;
    {
      std::lock_guard lock(mu_);
      for (const auto& v : vmas_[proc.id()])
        if (gva.value >= v.start && gva.value < v.end)
          vma = v;
    }
    if (!vma)
      return failed(Errc::bad_address);
    FileOp op;
    op.kind = OpKind::page_fault;
    op.handle = vma->handle;
    op.fault_va = gva.value;
    op.vma_start = vma->start;
    op.vma_end = vma->end;
    op.offset = vma->pgoff;
    op.flags = vma->flags;
    return vfs_dispatch(thread, *vma->file, op);
  }

  // -------------------------------------------------------- notifications

  void Frontend::subscribe_notifications(GuestThread& thread, const VirtualDeviceFile& file, uint32_t handle)
  {
    const ProcessId pid = thread.process().id();
    {
      std::lock_guard lock(mu_);
      const auto& list = notify_lists_[file.device];
      if (std::find(list.begin(), list.end(), pid) != list.end())
        return;
    }
    FileOp op;
    op.kind = OpKind::notify_subscribe;
    op.handle = handle;
    const auto r = vfs_dispatch(thread, file, op);
    if (r.status < 0)
      raise(errc_of(r.status), "subscribe to " + file.path);
    std::lock_guard lock(mu_);
    auto& list = notify_lists_[file.device];
    if (std::find(list.begin(), list.end(), pid) == list.end())
      list.push_back(pid);
    notify_lines_[r.values[0]] = file.device;
  }

  std::vector<ProcessId> Frontend::subscribers(DeviceId device) const
  {
    std::lock_guard lock(mu_);
    auto it = notify_lists_.find(device);
    return it == notify_lists_.end() ? std::vector<ProcessId>{} : it->second;
  }

  void Frontend::register_renderer(ProcessId process)
  {
    std::lock_guard lock(mu_);
    renderer_ = process;
  }

  void Frontend::handle_interrupt(uint32_t line, std::optional<uint32_t> arg)
  {
    const auto purpose = fabric_.purpose_of(guest_.id(), line);
    if (!purpose)
      {
        ++dropped_interrupts_;
        log_.record("drop", guest_.id(), ProcessId(), 0, "-", "UnknownLine", "line=" + std::to_string(line));
        return;
      }
    switch (purpose->kind)
      {
      case LineKind::completion:
        wake_completed(arg);
        return;
      case LineKind::notification:
        {
          std::vector<ProcessId> targets;
          {
            std::lock_guard lock(mu_);
            targets = notify_lists_[purpose->device];
          }
          for (ProcessId pid : targets)
            {
              try
                {
                  guest_.deliver_signal(pid, {SignalKind::io_event, purpose->device});
                  ++signals_sent_;
                }
              catch (const Error&)
                {
                  std::lock_guard lock(mu_);
                  std::erase(notify_lists_[purpose->device], pid);
                }
            }
          return;
        }
      case LineKind::pause_resume:
        {
          std::optional<ProcessId> renderer;
          {
            std::lock_guard lock(mu_);
            renderer = renderer_;
          }
          if (!renderer)
            return;
          try
            {
              guest_.deliver_signal(*renderer,
                                    {arg == kPauseArg ? SignalKind::pause : SignalKind::resume, DeviceId()});
              ++signals_sent_;
            }
          catch (const Error&)
            {
            }
          return;
        }
      }
  }

  // ---------------------------------------------------------- device info

  void Frontend::export_device_info(DeviceId device, DeviceInfo info)
  {
    std::lock_guard lock(mu_);
    if (!info_.emplace(device, std::move(info)).second)
      raise(Errc::duplicate_device, "device info " + std::to_string(device.value));
  }

  const DeviceInfo& Frontend::query_device_info(DeviceId device) const
  {
    std::lock_guard lock(mu_);
    auto it = info_.find(device);
    if (it == info_.end())
      raise(Errc::not_found, "device info " + std::to_string(device.value));
    return it->second;
  }

  // ------------------------------------------------------------ map retry

  OpResult Frontend::mmap_retry(GuestThread& thread, const VirtualDeviceFile& file, FileOp failed_op,
                                const OpResult& failure)
  {
    if (failed_op.request_id != 0)
      return failed(Errc::retry_failed);
    const auto range = thread.process().reserve_va_range(failure.values[1]);
    if (!range)
      return failed(Errc::retry_failed);
    failed_op.request_id = failure.values[0];
    failed_op.map_gva = range->value;
    const OpResult r = issue(thread, failed_op, nonblocking(file.device));
    if (r.status < 0)
      return failed(Errc::retry_failed);
    return r;
  }

} // namespace devirt
