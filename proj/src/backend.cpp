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

#include "devirt/backend.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace devirt
{

  std::string_view has_mode_name(HasMode mode)
  {
    return mode == HasMode::software ? "software" : "hardware";
  }

  namespace
  {

    std::string log_status(int32_t status)
    {
      if (status >= 0 && status != kStatusAccepted)
        return "OK";
      return status_name(status);
    }

  } // namespace

  // -------------------------------------------------------------- EventLog

  void EventLog::record(std::string_view ev, GuestId guest, ProcessId process, uint32_t thread,
                        std::string_view op, std::string_view status, std::string_view extra)
  {
    std::ostringstream s;
    s << "t=" << clock_.now().count() << " ev=" << ev << " guest=" << guest.value << " process=" << process.value
      << " thread=" << thread << " op=" << (op.empty() ? "-" : op) << " status=" << (status.empty() ? "-" : status);
    if (!extra.empty())
      s << ' ' << extra;
    std::lock_guard lock(mu_);
    lines_.push_back(s.str());
  }

  std::vector<std::string> EventLog::lines() const
  {
    std::lock_guard lock(mu_);
    return lines_;
  }

  size_t EventLog::count(std::initializer_list<std::pair<std::string_view, std::string_view>> match) const
  {
    std::lock_guard lock(mu_);
    size_t n = 0;
    for (const auto& line : lines_)
      {
        const auto fields = parse_log_line(line);
        bool ok = true;
        for (const auto& [k, v] : match)
          {
            auto it = fields.find(std::string(k));
            if (it == fields.end() || it->second != v)
              {
                ok = false;
                break;
              }
          }
        n += ok;
      }
    return n;
  }

  void EventLog::clear()
  {
    std::lock_guard lock(mu_);
    lines_.clear();
  }

  std::map<std::string, std::string> parse_log_line(std::string_view line)
  {
    std::map<std::string, std::string> out;
    std::istringstream in{std::string(line)};
    std::string token;
    while (in >> token)
      if (auto eq = token.find('='); eq != std::string::npos)
        out[token.substr(0, eq)] = token.substr(eq + 1);
    return out;
  }

  // --------------------------------------------------------- ResultControl

  ResultControl read_control(const memvirt::PhysMem& mem, Hpa at)
  {
    uint8_t raw[kControlBytes];
    mem.read(at.value, raw);
    ResultControl c;
    std::memcpy(&c.seq, raw, 4);
    std::memcpy(&c.status, raw + 4, 4);
    std::memcpy(&c.data_offset, raw + 8, 4);
    std::memcpy(&c.data_length, raw + 12, 4);
    std::memcpy(c.values.data(), raw + 16, 16);
    return c;
  }

  void write_control(memvirt::PhysMem& mem, Hpa at, const ResultControl& c)
  {
    uint8_t raw[kControlBytes];
    std::memcpy(raw + 4, &c.status, 4);
    std::memcpy(raw + 8, &c.data_offset, 4);
    std::memcpy(raw + 12, &c.data_length, 4);
    std::memcpy(raw + 16, c.values.data(), 16);
    mem.write(at.value + 4, std::span(raw + 4, kControlBytes - 4));
    // The sequence word goes last; the guest polls it.
    mem.write_u32(at.value, c.seq);
  }

  // ---------------------------------------------------- GuestProcessRecord

  GuestProcessRecord::GuestProcessRecord(GuestId g, memvirt::VmMemory& vm, const memvirt::PageTableRoot& root)
    : guest(g), process(root.owner), stored_pt_root(root), memory(vm, root)
  {
  }

  // ------------------------------------------------ guest memory contexts

  namespace
  {

    /// Driver memory routines redirected to a guest process.
    class GuestUserContext final : public kernel::UserContext
    {
    public:
      GuestUserContext(Backend& backend, GuestProcessRecord& record, HasMode mode, DeviceId device,
                       const FileOp& op, Backend::Staging* staging)
        : backend_(backend), record_(record), mode_(mode), device_(device), op_(op), staging_(staging)
      {
      }

      bool marked() const override { return true; }

      memvirt::CopyResult copy(memvirt::CopyDirection direction, uint32_t uva, std::span<uint8_t> buf) override
      {
        if (staging_ && direction == memvirt::CopyDirection::to_guest && uva >= staging_->base &&
            uint64_t(uva) + buf.size() <= uint64_t(staging_->base) + staging_->length)
          {
            const uint32_t off = uva - staging_->base;
            backend_.hypervisor().host_memory().write(staging_->page.value + off, buf);
            staging_->low = std::min(staging_->low, off);
            staging_->high = std::max(staging_->high, off + uint32_t(buf.size()));
            return {buf.size(), std::nullopt};
          }
        if (mode_ == HasMode::hardware)
          return record_.memory.copy_hardware(direction, Gva(uva), buf);
        return record_.memory.copy_user_buffer(direction, Gva(uva), buf);
      }

      void insert_page(uint32_t uva, Hpa hpa) override
      {
        record_.memory.map_page_into_guest(Gva(uva), hpa);
        backend_.note_page_mapped();
      }

      uint32_t vm_map(uint32_t length, std::span<const uint32_t> pfns) override
      {
        if (op_.request_id == 0)
          {
            const uint32_t id = backend_.record_map_and_fail(record_, device_, length, pfns);
            throw kernel::MapDeferred(id, length);
          }
        const auto req = backend_.consume_map_request(record_, op_.request_id, device_, length);
        if (!std::equal(req.pfns.begin(), req.pfns.end(), pfns.begin(), pfns.end()))
          raise(Errc::stale_request, "driver state changed since the map was recorded");
        for (size_t i = 0; i < req.pfns.size(); ++i)
          insert_page(op_.map_gva + uint32_t(i) * kPageSize, Hpa::from_page(req.pfns[i]));
        return op_.map_gva;
      }

    private:
      Backend& backend_;
      GuestProcessRecord& record_;
      HasMode mode_;
      DeviceId device_;
      const FileOp& op_;
      Backend::Staging* staging_;
    };

  } // namespace

  // --------------------------------------------------------------- Backend

  Backend::Backend(memvirt::Hypervisor& hv, Clock& clock, InterruptFabric& fabric, EventLog& log)
    : hv_(hv), clock_(clock), fabric_(fabric), log_(log)
  {
  }

  Backend::~Backend() { shutdown(); }

  void Backend::add_device(ClassDriver& driver)
  {
    {
      std::lock_guard lock(mu_);
      if (devices_.contains(driver.id()))
        raise(Errc::duplicate_device, driver.name());
      devices_[driver.id()] = &driver;
    }
    driver.set_event_callback([this](DeviceId id, std::span<const uint8_t> payload) { route_host_event(id, payload); });
  }

  ClassDriver& Backend::device(DeviceId id) const
  {
    std::lock_guard lock(mu_);
    auto it = devices_.find(id);
    if (it == devices_.end())
      raise(Errc::not_found, "device " + std::to_string(id.value));
    return *it->second;
  }

  void Backend::attach_guest(GuestId guest, HasMode has_mode)
  {
    GuestState st;
    st.has_mode = has_mode;
    st.completion_line = fabric_.reserve_line(guest, LinePurpose::completion());
    st.pause_line = fabric_.reserve_line(guest, LinePurpose::pause_resume());
    std::lock_guard lock(mu_);
    guests_[guest] = st;
  }

  HasMode Backend::has_mode_of(GuestId guest) const
  {
    std::lock_guard lock(mu_);
    auto it = guests_.find(guest);
    if (it == guests_.end())
      raise(Errc::unknown_owner, "guest " + std::to_string(guest.value) + " is not attached");
    return it->second.has_mode;
  }

  GuestProcessRecord& Backend::record_for(const Call& call)
  {
    std::lock_guard lock(mu_);
    auto& slot = records_[{call.guest, call.process}];
    if (!slot)
      {
        // The root is captured now and used for every later translation.
        const memvirt::PageTableRoot root{memvirt::TableKind::guest, call.process.value, call.process};
        slot = std::make_unique<GuestProcessRecord>(call.guest, hv_.vm(call.guest), root);
      }
    return *slot;
  }

  GuestProcessRecord* Backend::find_record(GuestId guest, ProcessId process)
  {
    std::lock_guard lock(mu_);
    auto it = records_.find({guest, process});
    return it == records_.end() ? nullptr : it->second.get();
  }

  HypercallResult Backend::dispatch(const Call& call)
  {
    const auto op = op_name(call.op.kind);
    const uint32_t thread = call.header.thread;
    const HasMode has = has_mode_of(call.guest);
    {
      std::function<bool(GuestId)> hook;
      {
        std::lock_guard lock(mu_);
        hook = boycott_hook_;
      }
      // Enforcement is not implemented; the hook only observes.
      if (hook)
        hook(call.guest);
    }
    auto& rec = record_for(call);

    if (call.op.kind == OpKind::announce_result_page)
      {
        const auto& vm = hv_.vm(call.guest);
        HypercallResult res;
        try
          {
            const GuestProcessRecord::ResultPage page{vm.gpa_to_hpa(Gpa(call.op.result_gpa)),
                                                      vm.gpa_to_hpa(Gpa(call.op.control_gpa))};
            std::lock_guard lock(rec.mu);
            rec.result_pages[call.header.thread] = page;
          }
        catch (const Error& e)
          {
            res.status = status_of(e.code());
          }
        log_.record("dispatch", call.guest, call.process, thread, op, log_status(res.status), "mode=blocking");
        return res;
      }

    if (!call.header.nonblocking)
      {
        const OpResult r = execute_fileop(rec, call.op, has);
        HypercallResult res;
        res.status = r.status;
        std::copy(r.values.begin(), r.values.end(), res.values.begin());
        log_.record("dispatch", call.guest, call.process, thread, op, log_status(r.status), "mode=blocking");
        return res;
      }

    {
      std::lock_guard lock(rec.mu);
      if (!rec.result_pages.contains(call.header.thread))
        {
          log_.record("dispatch", call.guest, call.process, thread, op, status_name(status_of(Errc::no_result_page)),
                      "mode=nonblocking");
          return {status_of(Errc::no_result_page), {}};
        }
    }

    DualThread* dual;
    {
      std::lock_guard lock(mu_);
      auto& slot = duals_[{call.guest, call.header.thread}];
      if (!slot)
        {
          // Spawned on the thread's first non-blocking op, never reaped.
          slot = std::make_unique<DualThread>();
          slot->guest = call.guest;
          slot->thread = call.header.thread;
          DualThread& d = *slot;
          d.worker = std::thread([this, &d] { dual_thread_body(d); });
        }
      dual = slot.get();
    }
    {
      std::lock_guard lock(dual->mu);
      if (dual->pending)
        {
          log_.record("dispatch", call.guest, call.process, thread, op, status_name(status_of(Errc::busy)),
                      "mode=nonblocking");
          return {status_of(Errc::busy), {}};
        }
      dual->pending = call;
      // Logged before the worker can complete, so the log stays ordered.
      ++accepted_;
      log_.record("dispatch", call.guest, call.process, thread, op, "ACCEPTED", "mode=nonblocking");
    }
    dual->cv.notify_all();
    return {kStatusAccepted, {}};
  }

  void Backend::dual_thread_body(DualThread& dual)
  {
    for (;;)
      {
        Call call;
        {
          std::unique_lock lock(dual.mu);
          dual.cv.wait(lock, [&] { return dual.stop || dual.pending.has_value(); });
          if (!dual.pending)
            return;
          call = *dual.pending;
        }
        auto& rec = record_for(call);
        GuestProcessRecord::ResultPage page;
        {
          std::lock_guard lock(rec.mu);
          page = rec.result_pages.at(call.header.thread);
        }

        Staging staging;
        staging.page = page.data;
        staging.base = call.op.user_gva;
        staging.length = call.op.length;
        const bool stage = call.op.user_gva != 0 && call.op.length > 0 && call.op.length <= kPageSize;

        OpResult r;
        try
          {
            r = execute_fileop(rec, call.op, has_mode_of(call.guest), stage ? &staging : nullptr);
          }
        catch (const Error& e)
          {
            r = {status_of(e.code()), {}};
          }

        ResultControl ctl;
        ctl.seq = kControlDone | call.header.tag;
        ctl.status = r.status;
        ctl.values = r.values;
        if (staging.high > staging.low)
          {
            ctl.data_offset = staging.low;
            ctl.data_length = staging.high - staging.low;
          }
        log_.record("complete", call.guest, call.process, call.header.thread, op_name(call.op.kind),
                    log_status(r.status), "bytes=" + std::to_string(ctl.data_length));
        {
          std::lock_guard lock(dual.mu);
          dual.pending.reset();
        }
        /// The guest may issue its next op as soon as it sees this.
        write_control(hv_.host_memory(), page.control, ctl);
        uint32_t line;
        {
          std::lock_guard lock(mu_);
          line = guests_.at(call.guest).completion_line;
        }
        ++completions_;
        log_.record("interrupt", call.guest, call.process, call.header.thread, op_name(call.op.kind), "-",
                    "line=" + std::to_string(line) + " kind=completion arg=" + std::to_string(call.header.thread));
        fabric_.inject({call.guest, line, call.header.thread});
      }
  }

  OpResult Backend::execute_fileop(GuestProcessRecord& record, const FileOp& op, HasMode has_mode,
                                   Staging* staging)
  {
    if (op.kind == OpKind::open)
      {
        auto& drv = device(DeviceId(op.device));
        const OpResult r = drv.handle(op);
        if (r.status < 0)
          return r;
        const uint32_t h = next_handle_++;
        std::lock_guard lock(record.mu);
        record.handles[h] = {drv.id(), uint32_t(r.status)};
        return {int32_t(h), r.values};
      }

    GuestProcessRecord::OpenHandle handle;
    {
      std::lock_guard lock(record.mu);
      auto it = record.handles.find(op.handle);
      if (it == record.handles.end())
        return {status_of(Errc::bad_fd), {}};
      handle = it->second;
    }
    auto& drv = device(handle.device);

    if (has_mode == HasMode::hardware)
      {
        try
          {
            record.memory.build_hybrid_top_level();
          }
        catch (const Error& e)
          {
            return {status_of(e.code()), {}};
          }
      }

    FileOp dop = op;
    dop.handle = handle.driver_handle;
    OpResult r;
    {
      GuestUserContext ctx(*this, record, has_mode, handle.device, op, staging);
      kernel::ContextScope scope(ctx);
      try
        {
          r = drv.handle(dop);
        }
      catch (const kernel::MapDeferred& m)
        {
          r = {status_of(Errc::need_guest_va_range), {m.request_id(), m.length(), 0, 0}};
        }
    }

    if (r.status >= 0 && op.kind == OpKind::release)
      {
        std::lock_guard lock(record.mu);
        record.handles.erase(op.handle);
      }
    if (r.status >= 0 && op.kind == OpKind::notify_subscribe)
      {
        const uint32_t line = fabric_.reserve_line(record.guest, LinePurpose::notification(handle.device));
        std::lock_guard lock(mu_);
        guests_.at(record.guest).subscriptions.insert(handle.device);
        r.values[0] = line;
      }
    return r;
  }

  void Backend::route_host_event(DeviceId device_id, std::span<const uint8_t>)
  {
    const DeviceClass cls = device(device_id).device_class();
    std::vector<GuestId> targets;
    {
      std::lock_guard lock(mu_);
      for (const auto& [g, st] : guests_)
        {
          if (!st.subscriptions.contains(device_id))
            continue;
          // Input goes to the foreground guest only.
          if (cls == DeviceClass::input && foreground_ != g)
            continue;
          targets.push_back(g);
        }
    }
    const std::string dev = "device=" + std::to_string(device_id.value);
    if (targets.empty())
      {
        ++dropped_events_;
        log_.record("route", GuestId(), ProcessId(), 0, "-", "DROPPED", dev);
        return;
      }
    for (GuestId g : targets)
      {
        const uint32_t line = fabric_.reserve_line(g, LinePurpose::notification(device_id));
        log_.record("interrupt", g, ProcessId(), 0, "-", "-",
                    "line=" + std::to_string(line) + " kind=notification " + dev);
        fabric_.inject({g, line, std::nullopt});
      }
  }

  void Backend::set_foreground(std::optional<GuestId> owner)
  {
    std::optional<GuestId> previous;
    uint32_t old_line = 0;
    uint32_t new_line = 0;
    {
      std::lock_guard lock(mu_);
      if (owner && !guests_.contains(*owner))
        raise(Errc::unknown_owner, "guest " + std::to_string(owner->value));
      if (owner == foreground_)
        return;
      previous = foreground_;
      foreground_ = owner;
      if (previous)
        old_line = guests_.at(*previous).pause_line;
      if (owner)
        new_line = guests_.at(*owner).pause_line;
    }
    if (previous)
      {
        log_.record("interrupt", *previous, ProcessId(), 0, "-", "-",
                    "line=" + std::to_string(old_line) + " kind=pause");
        fabric_.inject({*previous, old_line, kPauseArg});
      }
    if (owner)
      {
        log_.record("interrupt", *owner, ProcessId(), 0, "-", "-",
                    "line=" + std::to_string(new_line) + " kind=resume");
        fabric_.inject({*owner, new_line, kResumeArg});
      }
  }

  std::optional<GuestId> Backend::foreground() const
  {
    std::lock_guard lock(mu_);
    return foreground_;
  }

  void Backend::set_boycott_hook(std::function<bool(GuestId)> hook)
  {
    std::lock_guard lock(mu_);
    boycott_hook_ = std::move(hook);
  }

  uint32_t Backend::record_map_and_fail(GuestProcessRecord& record, DeviceId device, uint32_t length,
                                        std::span<const uint32_t> pfns)
  {
    uint32_t id;
    {
      std::lock_guard lock(ledger_mu_);
      id = next_request_++;
      ledger_[{record.guest, record.process, id}] = MapRequest{device, length, {pfns.begin(), pfns.end()}};
    }
    log_.record("map_fail", record.guest, record.process, 0, "ioctl", "NeedGuestVaRange",
                "request=" + std::to_string(id) + " pages=" + std::to_string(pfns.size()));
    return id;
  }

  MapRequest Backend::consume_map_request(GuestProcessRecord& record, uint32_t request_id, DeviceId device,
                                          uint32_t length)
  {
    MapRequest req;
    {
      std::lock_guard lock(ledger_mu_);
      auto it = ledger_.find({record.guest, record.process, request_id});
      if (it == ledger_.end() || it->second.device != device || it->second.length != length)
        raise(Errc::stale_request, "map request " + std::to_string(request_id));
      req = std::move(it->second);
      ledger_.erase(it);
    }
    log_.record("map_reexec", record.guest, record.process, 0, "ioctl", "OK",
                "request=" + std::to_string(request_id) + " pages=" + std::to_string(req.pfns.size()));
    return req;
  }

  size_t Backend::ledger_size() const
  {
    std::lock_guard lock(ledger_mu_);
    return ledger_.size();
  }

  bool Backend::has_dual_thread(GuestId guest, uint16_t thread) const
  {
    std::lock_guard lock(mu_);
    return duals_.contains({guest, thread});
  }

  size_t Backend::dual_thread_count() const
  {
    std::lock_guard lock(mu_);
    return duals_.size();
  }

  void Backend::shutdown()
  {
    std::vector<DualThread*> duals;
    {
      std::lock_guard lock(mu_);
      for (auto& [k, d] : duals_)
        duals.push_back(d.get());
    }
    for (auto* d : duals)
      {
        {
          std::lock_guard lock(d->mu);
          d->stop = true;
        }
        d->cv.notify_all();
      }
    for (auto* d : duals)
      if (d->worker.joinable())
        d->worker.join();
  }

} // namespace devirt
