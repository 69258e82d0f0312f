#include "doctest.h"

#include <atomic>
#include <chrono>
#include <stdexcept>
#include <thread>

#include "devirt/guest_runtime.hpp"

using namespace devirt;
using namespace std::chrono_literals;

namespace
{

  struct Rig
  {
    memvirt::Hypervisor hv;
    ScaledClock clock;
    Guest guest;

    explicit Rig(unsigned vcpus)
      : guest(GuestId(0), GuestConfig{vcpus}, hv, clock, 0)
    {
    }
  };

  /// Measures the sibling's progress while main holds a token.
  uint64_t sibling_progress_while_blocked(unsigned vcpus)
  {
    Rig rig(vcpus);
    auto& proc = rig.guest.create_process();
    auto& holder = rig.guest.create_thread(proc);
    auto& sibling = rig.guest.create_thread(proc);
    std::atomic<bool> stop{false};

    holder.acquire_vcpu();
    rig.guest.run(sibling, [&](GuestThread& t) {
      t.acquire_vcpu();
      while (!stop)
        t.run_quantum(1ms);
      t.release_vcpu();
    });
    std::this_thread::sleep_for(60ms);
    const uint64_t during = sibling.progress();
    holder.release_vcpu();
    stop = true;
    rig.guest.join_all();
    return during;
  }

} // namespace

TEST_SUITE("guest_runtime")
{
  TEST_CASE("UP guest: a held token freezes the sibling")
  {
    CHECK(sibling_progress_while_blocked(1) == 0);
  }

  TEST_CASE("SMP guest: the sibling runs on the second token")
  {
    CHECK(sibling_progress_while_blocked(2) > 10);
  }

  TEST_CASE("token release without a hold is a misuse")
  {
    Rig rig(1);
    auto& t = rig.guest.create_thread(rig.guest.create_process());
    CHECK_THROWS_AS(t.release_vcpu(), std::logic_error);
    CHECK_THROWS_AS(rig.guest.vcpus().release(0), std::logic_error);
    CHECK_THROWS_AS(t.run_quantum(1us), std::logic_error);
  }

  TEST_CASE("sleep then wake resumes holding a token")
  {
    Rig rig(1);
    auto& proc = rig.guest.create_process();
    auto& sleeper = rig.guest.create_thread(proc);
    std::atomic<bool> resumed{false};
    rig.guest.run(sleeper, [&](GuestThread& t) {
      t.acquire_vcpu();
      t.sleep();
      resumed = t.holds_vcpu();
      t.release_vcpu();
    });
    while (sleeper.state() != ThreadState::sleeping)
      std::this_thread::sleep_for(1ms);
    CHECK(rig.guest.vcpus().held() == 0);
    CHECK_FALSE(resumed);
    sleeper.wake();
    rig.guest.join_all();
    CHECK(resumed);
  }

  TEST_CASE("a wake before sleep is consumed as a permit")
  {
    Rig rig(1);
    auto& t = rig.guest.create_thread(rig.guest.create_process());
    t.acquire_vcpu();
    t.wake();
    t.sleep(); // returns at once
    CHECK(t.holds_vcpu());
    CHECK(t.state() == ThreadState::running);
    t.release_vcpu();
  }

  TEST_CASE("two wakes leave a single permit")
  {
    Rig rig(1);
    auto& proc = rig.guest.create_process();
    auto& t = rig.guest.create_thread(proc);
    t.wake();
    t.wake();
    std::atomic<int> passes{0};
    rig.guest.run(t, [&](GuestThread& self) {
      self.acquire_vcpu();
      self.sleep();
      ++passes;
      self.sleep(); // second sleep must block
      ++passes;
      self.release_vcpu();
    });
    std::this_thread::sleep_for(40ms);
    CHECK(passes == 1);
    CHECK(t.state() == ThreadState::sleeping);
    t.wake();
    rig.guest.join_all();
    CHECK(passes == 2);
  }

  TEST_CASE("a thread that throws holding a token gives it back")
  {
    Rig rig(1);
    auto& proc = rig.guest.create_process();
    rig.guest.run(rig.guest.create_thread(proc), [](GuestThread& t) {
      t.acquire_vcpu();
      throw std::runtime_error("listener died");
    });
    std::atomic<bool> ran{false};
    rig.guest.run(rig.guest.create_thread(proc), [&](GuestThread& t) {
      t.acquire_vcpu();
      ran = true;
      t.release_vcpu();
    });
    CHECK_THROWS_WITH(rig.guest.join_all(), "listener died");
    CHECK(ran);
    CHECK(rig.guest.vcpus().held() == 0);
  }

  TEST_CASE("token conservation under contention")
  {
    Rig rig(2);
    auto& proc = rig.guest.create_process();
    std::atomic<bool> violated{false};
    std::atomic<bool> stop{false};
    for (int i = 0; i < 5; ++i)
      rig.guest.run(rig.guest.create_thread(proc), [&](GuestThread& t) {
        for (int k = 0; k < 30; ++k)
          {
            t.acquire_vcpu();
            t.run_quantum(200us);
            if (k % 7 == 3)
              {
                t.wake();
                t.sleep();
              }
            t.release_vcpu();
          }
      });
    std::thread watcher([&] {
      while (!stop)
        {
          const unsigned held = rig.guest.vcpus().held();
          if (held > 2)
            violated = true;
          std::this_thread::yield();
        }
    });
    rig.guest.join_all();
    stop = true;
    watcher.join();
    CHECK_FALSE(violated);
    CHECK(rig.guest.vcpus().held() == 0);
    CHECK(rig.guest.running_threads() == 0);
  }

  TEST_CASE("progress is frozen while a thread sleeps")
  {
    Rig rig(1);
    auto& proc = rig.guest.create_process();
    auto& t = rig.guest.create_thread(proc);
    rig.guest.run(t, [&](GuestThread& self) {
      self.acquire_vcpu();
      for (int i = 0; i < 5; ++i)
        self.run_quantum(100us);
      self.sleep();
      self.run_quantum(100us);
      self.release_vcpu();
    });
    while (t.state() != ThreadState::sleeping)
      std::this_thread::sleep_for(1ms);
    const auto before = t.progress();
    std::this_thread::sleep_for(20ms);
    CHECK(t.progress() == before);
    CHECK(before == 5);
    t.wake();
    rig.guest.join_all();
    CHECK(t.progress() == 6);
  }

  TEST_CASE("signals arrive in enqueue order")
  {
    Rig rig(1);
    auto& proc = rig.guest.create_process();
    rig.guest.deliver_signal(proc.id(), {SignalKind::io_event, DeviceId(4)});
    rig.guest.deliver_signal(proc.id(), {SignalKind::pause, {}});
    rig.guest.deliver_signal(proc.id(), {SignalKind::resume, {}});
    CHECK(proc.pending_signals() == 3);
    CHECK(proc.poll_signal() == Signal{SignalKind::io_event, DeviceId(4)});
    CHECK(proc.poll_signal()->kind == SignalKind::pause);
    CHECK(proc.wait_signal(1ms)->kind == SignalKind::resume);
    CHECK_FALSE(proc.wait_signal(2ms).has_value());
  }

  TEST_CASE("signal to a dead process")
  {
    Rig rig(1);
    auto& proc = rig.guest.create_process();
    const auto id = proc.id();
    rig.guest.kill_process(id);
    CHECK(rig.guest.find_process(id) == nullptr);
    try
      {
        rig.guest.deliver_signal(id, {SignalKind::io_event, DeviceId(1)});
        FAIL("expected UnknownProcess");
      }
    catch (const Error& e)
      {
        CHECK(e.code() == Errc::unknown_process);
      }
  }

  TEST_CASE("processes get distinct page table roots; threads share them")
  {
    Rig rig(1);
    auto& a = rig.guest.create_process();
    auto& b = rig.guest.create_process();
    CHECK(a.id() != b.id());
    auto& t1 = rig.guest.create_thread(a);
    auto& t2 = rig.guest.create_thread(a);
    CHECK(&t1.process().page_table_root() == &t2.process().page_table_root());
    CHECK(rig.guest.find_thread(t2.id()) == &t2);
  }

  TEST_CASE("user buffers round-trip through guest page tables")
  {
    Rig rig(1);
    auto& p = rig.guest.create_process();
    const Gva buf = p.alloc_user_buffer(3 * kPageSize);
    std::vector<uint8_t> data(3 * kPageSize - 100), back(data.size());
    for (size_t i = 0; i < data.size(); ++i)
      data[i] = uint8_t(i * 31 + 7);
    p.write_user(buf + 50, data);
    p.read_user(buf + 50, back);
    CHECK(back == data);

    p.set_va_limit(p.reserve_va_range(1)->value + 2 * kPageSize);
    CHECK_FALSE(p.reserve_va_range(8 * kPageSize).has_value());
  }
}
