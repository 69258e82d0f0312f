#include "doctest.h"

#include <cstring>
#include <mutex>
#include <thread>
#include <vector>

#include "devirt/backend.hpp"
#include "devirt/guest_runtime.hpp"

using namespace devirt;
using namespace std::chrono_literals;

namespace
{

  struct Irq
  {
    uint32_t line;
    std::optional<uint32_t> arg;
  };

  /// One guest attached to a backend, driving calls by hand.
  struct Rig
  {
    explicit Rig(HasMode has = HasMode::software, memvirt::MemMode mem = memvirt::MemMode::shadow,
                 unsigned guests = 1)
    {
      for (unsigned g = 0; g < guests; ++g)
        {
          GuestConfig cfg;
          cfg.vcpus = 2;
          cfg.mem_mode = mem;
          auto& guest = *os.emplace_back(std::make_unique<Guest>(GuestId(g), cfg, hv, clock, g * 8));
          fabric.attach_guest(guest.id(), guest.vcpus(), [this, g](uint32_t line, std::optional<uint32_t> arg) {
            std::lock_guard lock(mu);
            irqs[g].push_back({line, arg});
          });
          backend.attach_guest(guest.id(), has);
        }
      irqs.resize(guests);
    }

    ~Rig()
    {
      backend.shutdown();
      fabric.shutdown();
    }

    Guest& guest(unsigned g = 0) { return *os.at(g); }

    HypercallResult call(GuestProcess& p, const FileOp& op, uint16_t thread = 1, bool nonblocking = false,
                         uint8_t tag = 0)
    {
      Call c;
      c.guest = p.guest().id();
      c.process = p.id();
      c.header = {thread, tag, nonblocking};
      c.op = op;
      return backend.dispatch(c);
    }

    uint32_t open(GuestProcess& p, DeviceId dev)
    {
      FileOp op;
      op.kind = OpKind::open;
      op.device = dev.value;
      const auto r = call(p, op);
      REQUIRE(r.status > 0);
      return uint32_t(r.status);
    }

    struct Pages
    {
      Hpa data;
      Hpa control;
    };

    Pages announce(GuestProcess& p, uint16_t thread = 1)
    {
      auto& g = p.guest();
      FileOp op;
      op.kind = OpKind::announce_result_page;
      op.result_gpa = g.alloc_frame() * kPageSize;
      op.control_gpa = g.alloc_frame() * kPageSize;
      REQUIRE(call(p, op, thread).status == kStatusOk);
      return {g.memory().gpa_to_hpa(Gpa(op.result_gpa)), g.memory().gpa_to_hpa(Gpa(op.control_gpa))};
    }

    std::vector<Irq> irqs_of(unsigned g = 0)
    {
      fabric.drain(GuestId(g));
      std::lock_guard lock(mu);
      return irqs[g];
    }

    ResultControl wait_done(const Pages& pages, uint8_t tag = 0)
    {
      for (int i = 0; i < 2000; ++i)
        {
          auto c = read_control(hv.host_memory(), pages.control);
          if (c.seq == (kControlDone | tag))
            return c;
          std::this_thread::sleep_for(1ms);
        }
      FAIL("operation did not complete");
      return {};
    }

    memvirt::Hypervisor hv;
    ScaledClock clock;
    InterruptFabric fabric;
    EventLog log{clock};
    Backend backend{hv, clock, fabric, log};
    std::vector<std::unique_ptr<Guest>> os;
    std::mutex mu;
    std::vector<std::vector<Irq>> irqs;
  };

  FileOp rw(OpKind kind, uint32_t handle, Gva buf, uint32_t length)
  {
    FileOp op;
    op.kind = kind;
    op.handle = handle;
    op.user_gva = buf.value;
    op.length = length;
    return op;
  }

  std::vector<uint8_t> user_bytes(GuestProcess& p, Gva at, size_t n)
  {
    std::vector<uint8_t> out(n);
    p.read_user(at, out);
    return out;
  }

  std::vector<uint8_t> stream_read(HasMode has, uint32_t length)
  {
    Rig rig(has);
    StreamDevice cam(DeviceId(2), rig.clock, {Micros(2000), length, true});
    rig.backend.add_device(cam);
    auto& p = rig.guest().create_process();
    const uint32_t h = rig.open(p, cam.id());
    const Gva buf = p.alloc_user_buffer(length);
    REQUIRE(rig.call(p, rw(OpKind::read, h, buf, length)).status == int32_t(length));
    return user_bytes(p, buf, length);
  }

} // namespace

TEST_SUITE("backend")
{
  TEST_CASE("blocking read copies into the guest buffer")
  {
    Rig rig;
    EventDevice mouse(DeviceId(1), rig.clock);
    rig.backend.add_device(mouse);
    auto& p = rig.guest().create_process();
    const uint32_t h = rig.open(p, mouse.id());
    mouse.push(7, 9);
    mouse.push(8, -1);
    const Gva buf = p.alloc_user_buffer(kPageSize);
    const auto r = rig.call(p, rw(OpKind::read, h, buf, 24));
    CHECK(r.status == 24);
    const auto bytes = user_bytes(p, buf, 24);
    uint32_t code = 0;
    std::memcpy(&code, &bytes[16], 4);
    CHECK(code == 8);
    CHECK(rig.backend.dual_thread_count() == 0);
    CHECK(rig.log.count({{"ev", "dispatch"}, {"op", "read"}, {"status", "OK"}}) == 1);
  }

  TEST_CASE("duplicate device and unknown handle")
  {
    Rig rig;
    EventDevice a(DeviceId(1), rig.clock);
    EventDevice b(DeviceId(1), rig.clock);
    rig.backend.add_device(a);
    CHECK_THROWS_AS(rig.backend.add_device(b), Error);
    auto& p = rig.guest().create_process();
    CHECK(rig.call(p, rw(OpKind::read, 77, Gva(0x1000'0000), 12)).status == status_of(Errc::bad_fd));
  }

  TEST_CASE("non-blocking op needs an announced result page")
  {
    Rig rig;
    EventDevice mouse(DeviceId(1), rig.clock);
    rig.backend.add_device(mouse);
    auto& p = rig.guest().create_process();
    const uint32_t h = rig.open(p, mouse.id());
    const Gva buf = p.alloc_user_buffer(kPageSize);
    const auto r = rig.call(p, rw(OpKind::read, h, buf, 12), 1, true);
    CHECK(r.status == status_of(Errc::no_result_page));
    CHECK(rig.backend.dual_thread_count() == 0);
  }

  TEST_CASE("non-blocking op completes through the control block and one interrupt")
  {
    Rig rig;
    EventDevice mouse(DeviceId(1), rig.clock);
    rig.backend.add_device(mouse);
    auto& p = rig.guest().create_process();
    const uint32_t h = rig.open(p, mouse.id());
    const auto pages = rig.announce(p, 3);
    mouse.push(5, 42);
    const Gva buf = p.alloc_user_buffer(kPageSize);
    const auto r = rig.call(p, rw(OpKind::read, h, buf, 12), 3, true, 9);
    CHECK(r.status == kStatusAccepted);
    CHECK(rig.backend.has_dual_thread(GuestId(0), 3));
    CHECK_FALSE(rig.backend.has_dual_thread(GuestId(0), 1));

    const auto ctl = rig.wait_done(pages, 9);
    CHECK(ctl.status == 12);
    CHECK(ctl.data_offset == 0);
    CHECK(ctl.data_length == 12);
    uint8_t staged[12];
    rig.hv.host_memory().read(pages.data.value, staged);
    uint32_t code = 0;
    std::memcpy(&code, staged + 4, 4);
    CHECK(code == 5);
    // Staged data is not in the user buffer until the guest copies it.
    CHECK(user_bytes(p, buf, 12) == std::vector<uint8_t>(12, 0));

    const auto irqs = rig.irqs_of();
    REQUIRE(irqs.size() == 1);
    CHECK(irqs[0].arg == 3u);
    CHECK(rig.backend.completions() == 1);
    CHECK(rig.log.count({{"ev", "dispatch"}, {"status", "ACCEPTED"}}) == 1);
    CHECK(rig.log.count({{"ev", "interrupt"}, {"kind", "completion"}}) == 1);
  }

  TEST_CASE("second non-blocking op while one is pending is Busy")
  {
    Rig rig;
    StreamDevice cam(DeviceId(2), rig.clock, {Micros(200'000), 64, true});
    rig.backend.add_device(cam);
    auto& p = rig.guest().create_process();
    const uint32_t h = rig.open(p, cam.id());
    const auto pages = rig.announce(p);
    const Gva buf = p.alloc_user_buffer(kPageSize);
    CHECK(rig.call(p, rw(OpKind::read, h, buf, 64), 1, true, 1).status == kStatusAccepted);
    CHECK(rig.call(p, rw(OpKind::read, h, buf, 64), 1, true, 2).status == status_of(Errc::busy));
    rig.wait_done(pages, 1);
  }

  TEST_CASE("results up to one page are staged, larger ones copied directly")
  {
    Rig rig;
    StreamDevice small(DeviceId(2), rig.clock, {Micros(1000), kPageSize, true}, "cam0");
    StreamDevice large(DeviceId(3), rig.clock, {Micros(1000), 2 * kPageSize, true}, "cam1");
    rig.backend.add_device(small);
    rig.backend.add_device(large);
    auto& p = rig.guest().create_process();
    const auto pages = rig.announce(p);
    const Gva buf = p.alloc_user_buffer(2 * kPageSize);

    const uint32_t hs = rig.open(p, small.id());
    REQUIRE(rig.call(p, rw(OpKind::read, hs, buf, kPageSize), 1, true, 1).status == kStatusAccepted);
    auto ctl = rig.wait_done(pages, 1);
    CHECK(ctl.status == int32_t(kPageSize));
    CHECK(ctl.data_length == kPageSize);
    CHECK(user_bytes(p, buf, 16) == std::vector<uint8_t>(16, 0));

    const uint32_t hl = rig.open(p, large.id());
    REQUIRE(rig.call(p, rw(OpKind::read, hl, buf, 2 * kPageSize), 1, true, 2).status == kStatusAccepted);
    ctl = rig.wait_done(pages, 2);
    CHECK(ctl.status == int32_t(2 * kPageSize));
    CHECK(ctl.data_length == 0);
    const auto bytes = user_bytes(p, buf, 2 * kPageSize);
    for (uint32_t i = 0; i < bytes.size(); i += 997)
      CHECK(bytes[i] == uint8_t(i));
  }

  TEST_CASE("software and hardware address spaces give identical bytes")
  {
    const auto sw = stream_read(HasMode::software, 3 * kPageSize);
    const auto hw = stream_read(HasMode::hardware, 3 * kPageSize);
    CHECK(sw == hw);
    CHECK(sw[5] == 5);
  }

  TEST_CASE("hardware address space under two-dimensional paging is rejected")
  {
    Rig rig(HasMode::hardware, memvirt::MemMode::tdp);
    EventDevice mouse(DeviceId(1), rig.clock);
    rig.backend.add_device(mouse);
    auto& p = rig.guest().create_process();
    const uint32_t h = rig.open(p, mouse.id());
    const Gva buf = p.alloc_user_buffer(kPageSize);
    CHECK(rig.call(p, rw(OpKind::read, h, buf, 12)).status == status_of(Errc::tdp_unsupported));
  }

  TEST_CASE("8 KiB copy walks the guest tables two or three times")
  {
    Rig rig;
    StreamDevice cam(DeviceId(2), rig.clock, {Micros(1000), 2 * kPageSize, true});
    rig.backend.add_device(cam);
    auto& p = rig.guest().create_process();
    const uint32_t h = rig.open(p, cam.id());
    const Gva buf = p.alloc_user_buffer(3 * kPageSize);
    auto* rec = rig.backend.find_record(GuestId(0), p.id());
    REQUIRE(rec != nullptr);
    rec->memory.set_cache_enabled(false);
    const uint64_t before = rec->memory.translate_calls();
    REQUIRE(rig.call(p, rw(OpKind::read, h, buf + 100, 2 * kPageSize)).status == int32_t(2 * kPageSize));
    const uint64_t walks = rec->memory.translate_calls() - before;
    CHECK(walks >= 2);
    CHECK(walks <= 3);
  }

  TEST_CASE("input events go only to a subscribed foreground guest")
  {
    Rig rig(HasMode::software, memvirt::MemMode::shadow, 2);
    EventDevice mouse(DeviceId(1), rig.clock);
    rig.backend.add_device(mouse);
    auto& p0 = rig.guest(0).create_process();
    auto& p1 = rig.guest(1).create_process();
    for (auto* p : {&p0, &p1})
      {
        FileOp sub;
        sub.kind = OpKind::notify_subscribe;
        sub.handle = rig.open(*p, mouse.id());
        const auto r = rig.call(*p, sub);
        CHECK(r.status == kStatusOk);
      }

    mouse.push(1, 1);
    CHECK(rig.backend.dropped_events() == 1);
    CHECK(rig.log.count({{"ev", "route"}, {"status", "DROPPED"}}) == 1);

    rig.backend.set_foreground(GuestId(1));
    mouse.push(1, 2);
    CHECK(rig.backend.dropped_events() == 1);
    size_t notes0 = 0, notes1 = 0;
    for (auto& i : rig.irqs_of(0))
      notes0 += !i.arg.has_value();
    for (auto& i : rig.irqs_of(1))
      notes1 += !i.arg.has_value();
    CHECK(notes0 == 0);
    CHECK(notes1 == 1);
  }

  TEST_CASE("stream events go to every subscriber")
  {
    Rig rig(HasMode::software, memvirt::MemMode::shadow, 2);
    StreamDevice cam(DeviceId(2), rig.clock, {Micros(1000), 64, true});
    rig.backend.add_device(cam);
    auto& p0 = rig.guest(0).create_process();
    FileOp sub;
    sub.kind = OpKind::notify_subscribe;
    sub.handle = rig.open(p0, cam.id());
    const auto r = rig.call(p0, sub);
    REQUIRE(r.status == kStatusOk);
    const auto purpose = rig.fabric.purpose_of(GuestId(0), r.values[0]);
    REQUIRE(purpose.has_value());
    CHECK(*purpose == LinePurpose::notification(cam.id()));
    cam.notify_frame();
    CHECK(rig.irqs_of(0).size() == 1);
    CHECK(rig.irqs_of(1).empty());
    CHECK(rig.backend.dropped_events() == 0);
  }

  TEST_CASE("foreground switch pauses the old owner and resumes the new one")
  {
    Rig rig(HasMode::software, memvirt::MemMode::shadow, 2);
    rig.backend.set_foreground(GuestId(0));
    rig.irqs_of(0);
    rig.backend.set_foreground(GuestId(0));
    rig.backend.set_foreground(GuestId(1));
    CHECK_THROWS_AS(rig.backend.set_foreground(GuestId(9)), Error);
    CHECK(rig.backend.foreground() == GuestId(1));

    const auto g0 = rig.irqs_of(0);
    REQUIRE(g0.size() == 2);
    CHECK(g0[0].arg == kResumeArg);
    CHECK(g0[1].arg == kPauseArg);
    const auto g1 = rig.irqs_of(1);
    REQUIRE(g1.size() == 1);
    CHECK(g1[0].arg == kResumeArg);
  }

  TEST_CASE("driver-initiated map is recorded, then replayed into the guest range")
  {
    Rig rig;
    FbDevice gpu(DeviceId(4), rig.clock, rig.hv);
    rig.backend.add_device(gpu);
    auto& p = rig.guest().create_process();
    const uint32_t h = rig.open(p, gpu.id());
    const Gva out = p.alloc_user_buffer(kPageSize);

    FileOp map;
    map.kind = OpKind::ioctl;
    map.handle = h;
    map.cmd = fb::kMapCmd;
    map.user_gva = out.value;
    map.length = 64 * 1024;
    const auto first = rig.call(p, map);
    REQUIRE(first.status == status_of(Errc::need_guest_va_range));
    CHECK(first.values[1] == 64 * 1024);
    CHECK(rig.backend.ledger_size() == 1);
    CHECK(gpu.bo_pages_used() == 0);
    CHECK(rig.log.count({{"ev", "map_fail"}, {"status", "NeedGuestVaRange"}, {"pages", "16"}}) == 1);

    const auto range = p.reserve_va_range(64 * 1024);
    REQUIRE(range.has_value());
    map.request_id = first.values[0];
    map.map_gva = range->value;
    const auto second = rig.call(p, map);
    CHECK(second.status == kStatusOk);
    CHECK(second.values[0] == range->value);
    CHECK(second.values[1] == 16);
    CHECK(rig.backend.ledger_size() == 0);
    CHECK(rig.backend.pages_mapped() == 16);
    uint32_t reported = 0;
    p.read_user(out, std::span(reinterpret_cast<uint8_t*>(&reported), 4));
    CHECK(reported == range->value);

    // Guest writes land in the driver's buffer pages.
    const std::vector<uint8_t> pattern{1, 2, 3, 4};
    p.write_user(*range + 15 * kPageSize, pattern);
    auto& rec = *rig.backend.find_record(GuestId(0), p.id());
    std::vector<uint8_t> back(4);
    REQUIRE(rec.memory.copy_user_buffer(memvirt::CopyDirection::from_guest, *range + 15 * kPageSize, back).ok());
    CHECK(back == pattern);

    CHECK(rig.call(p, map).status == status_of(Errc::stale_request));
  }

  TEST_CASE("guest operations run redirected routines, host tasks native ones")
  {
    Rig rig;
    EventDevice mouse(DeviceId(1), rig.clock);
    rig.backend.add_device(mouse);
    auto& p = rig.guest().create_process();
    const uint32_t h = rig.open(p, mouse.id());
    const Gva buf = p.alloc_user_buffer(kPageSize);

    const uint64_t red0 = kernel::redirected_calls();
    const uint64_t nat0 = kernel::native_calls();
    mouse.push(1, 1);
    REQUIRE(rig.call(p, rw(OpKind::read, h, buf, 12)).status == 12);
    CHECK(kernel::redirected_calls() > red0);
    CHECK(kernel::native_calls() == nat0);

    // A native process with the same driver: no redirection.
    kernel::HostTask task(rig.hv, ProcessId(0xCAFE));
    kernel::ContextScope scope(task);
    FileOp open;
    open.kind = OpKind::open;
    const auto hn = mouse.handle(open);
    REQUIRE(hn.status > 0);
    mouse.push(2, 2);
    const uint32_t hbuf = task.alloc_buffer(kPageSize);
    FileOp rd = rw(OpKind::read, uint32_t(hn.status), Gva(hbuf), 12);
    const uint64_t red1 = kernel::redirected_calls();
    CHECK(mouse.handle(rd).status == 12);
    CHECK(kernel::redirected_calls() == red1);
    CHECK(kernel::native_calls() > nat0);
  }

  TEST_CASE("log lines parse into their fields")
  {
    ManualClock clock;
    clock.advance(Micros(1234));
    EventLog log(clock);
    log.record("dispatch", GuestId(1), ProcessId(7), 3, "read", "OK", "mode=blocking");
    const auto f = parse_log_line(log.lines().at(0));
    CHECK(f.at("t") == "1234");
    CHECK(f.at("ev") == "dispatch");
    CHECK(f.at("guest") == "1");
    CHECK(f.at("process") == "7");
    CHECK(f.at("thread") == "3");
    CHECK(f.at("mode") == "blocking");
  }
}
