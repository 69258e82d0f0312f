#include "doctest.h"

#include <atomic>
#include <set>
#include <thread>

#include "devirt/interrupts.hpp"

using namespace devirt;
using namespace std::chrono_literals;

namespace
{

  struct Seen
  {
    std::mutex mu;
    std::vector<std::pair<uint32_t, std::optional<uint32_t>>> calls;

    InterruptFabric::Handler handler()
    {
      return [this](uint32_t line, std::optional<uint32_t> arg) {
        std::lock_guard lock(mu);
        calls.emplace_back(line, arg);
      };
    }
  };

} // namespace

TEST_SUITE("interrupts")
{
  TEST_CASE("line reservation")
  {
    InterruptFabric fabric(32);
    const GuestId g(0);
    const auto a = fabric.reserve_line(g, LinePurpose::notification(DeviceId(1)));
    const auto b = fabric.reserve_line(g, LinePurpose::notification(DeviceId(2)));
    CHECK(a != b);
    CHECK(fabric.reserve_line(g, LinePurpose::notification(DeviceId(1))) == a);
    const auto c = fabric.reserve_line(g, LinePurpose::completion());
    CHECK(fabric.reserve_line(g, LinePurpose::completion()) == c);
    CHECK(fabric.reserve_line(GuestId(1), LinePurpose::completion()) == 0);
    for (uint32_t d = 3; d < 32; ++d)
      fabric.reserve_line(g, LinePurpose::notification(DeviceId(d)));
    try
      {
        fabric.reserve_line(g, LinePurpose::notification(DeviceId(99)));
        FAIL("expected LinesExhausted");
      }
    catch (const Error& e)
      {
        CHECK(e.code() == Errc::lines_exhausted);
      }
  }

  TEST_CASE("arg passthrough")
  {
    VcpuPool vcpus(1);
    InterruptFabric fabric;
    Seen seen;
    const GuestId g(0);
    const auto line = fabric.reserve_line(g, LinePurpose::completion());
    fabric.attach_guest(g, vcpus, seen.handler());
    fabric.inject({g, line, 7});
    fabric.drain(g);
    REQUIRE(seen.calls.size() == 1);
    CHECK(seen.calls[0].first == line);
    CHECK(seen.calls[0].second == 7u);
  }

  TEST_CASE("coalescing bound and latest arg wins")
  {
    VcpuPool vcpus(1);
    InterruptFabric fabric;
    Seen seen;
    const GuestId g(0);
    const auto line = fabric.reserve_line(g, LinePurpose::completion());
    fabric.attach_guest(g, vcpus, seen.handler());
    for (uint32_t i = 1; i <= 100; ++i)
      fabric.inject({g, line, i});
    fabric.drain(g);
    CHECK(seen.calls.size() >= 1);
    CHECK(seen.calls.size() <= 100);
    CHECK(seen.calls.back().second == 100u);
    // No fabricated args: every observed arg was written, in increasing order.
    uint32_t last = 0;
    for (auto& [l, arg] : seen.calls)
      {
        REQUIRE(arg.has_value());
        CHECK(*arg > last);
        CHECK(*arg <= 100);
        last = *arg;
      }
    CHECK(fabric.injected(g, line) == 100);
    CHECK(fabric.handled(g, line) == seen.calls.size());
  }

  TEST_CASE("notification lines carry no arg")
  {
    VcpuPool vcpus(1);
    InterruptFabric fabric;
    Seen seen;
    const GuestId g(0);
    const auto a = fabric.reserve_line(g, LinePurpose::notification(DeviceId(1)));
    const auto b = fabric.reserve_line(g, LinePurpose::notification(DeviceId(2)));
    fabric.attach_guest(g, vcpus, seen.handler());
    fabric.inject({g, b, std::nullopt});
    fabric.drain(g);
    REQUIRE(seen.calls.size() == 1);
    CHECK(seen.calls[0].first == b);
    CHECK_FALSE(seen.calls[0].second.has_value());
    CHECK(fabric.handled(g, a) == 0);
  }

  TEST_CASE("unreserved line")
  {
    InterruptFabric fabric;
    try
      {
        fabric.inject({GuestId(0), 5, std::nullopt});
        FAIL("expected UnknownLine");
      }
    catch (const Error& e)
      {
        CHECK(e.code() == Errc::unknown_line);
      }
  }

  TEST_CASE("no delivery while every vCPU token is held")
  {
    VcpuPool vcpus(1);
    InterruptFabric fabric;
    Seen seen;
    const GuestId g(0);
    const auto line = fabric.reserve_line(g, LinePurpose::completion());
    fabric.attach_guest(g, vcpus, seen.handler());
    const unsigned token = vcpus.acquire();
    fabric.inject({g, line, 1});
    std::this_thread::sleep_for(30ms);
    {
      std::lock_guard lock(seen.mu);
      CHECK(seen.calls.empty());
    }
    vcpus.release(token);
    fabric.drain(g);
    CHECK(seen.calls.size() == 1);
  }

  TEST_CASE("handlers run holding a token")
  {
    VcpuPool vcpus(2);
    InterruptFabric fabric;
    const GuestId g(0);
    std::atomic<unsigned> held_in_handler{0};
    const auto line = fabric.reserve_line(g, LinePurpose::pause_resume());
    fabric.attach_guest(g, vcpus, [&](uint32_t, std::optional<uint32_t>) { held_in_handler = vcpus.held(); });
    fabric.inject({g, line, kPauseArg});
    fabric.drain(g);
    CHECK(held_in_handler == 1);
    CHECK(vcpus.held() == 0);
  }
}
