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

#include "devirt/interrupts.hpp"

#include <algorithm>

namespace devirt
{

  InterruptFabric::InterruptFabric(unsigned lines_per_guest)
    : lines_(lines_per_guest)
  {
    if (lines_ == 0 || lines_ > kPageSize / 4)
      raise(Errc::invalid_config, "line count must be in [1, 1024]");
  }

  InterruptFabric::~InterruptFabric() { shutdown(); }

  std::unique_ptr<InterruptFabric::GuestLines>& InterruptFabric::lines_for(GuestId guest)
  {
    auto& slot = guests_[guest];
    if (!slot)
      {
        slot = std::make_unique<GuestLines>();
        slot->purpose.resize(lines_);
        slot->arg_page.resize(lines_);
        slot->arg_valid.resize(lines_);
        slot->pending.resize(lines_);
        slot->injected.resize(lines_);
        slot->handled.resize(lines_);
      }
    return slot;
  }

  void InterruptFabric::attach_guest(GuestId guest, VcpuPool& vcpus, Handler handler)
  {
    std::lock_guard lock(mu_);
    auto& slot = lines_for(guest);
    if (slot->delivery.joinable())
      raise(Errc::internal, "guest already attached");
    slot->vcpus = &vcpus;
    slot->handler = std::move(handler);
    GuestLines& g = *slot;
    g.delivery = std::thread([this, guest, &g] { deliver_loop(guest, g); });
  }

  uint32_t InterruptFabric::reserve_line(GuestId guest, LinePurpose purpose)
  {
    std::lock_guard lock(mu_);
    auto& slot = lines_for(guest);
    auto& g = *slot;
    if (auto it = g.reserved.find(purpose); it != g.reserved.end())
      return it->second;
    if (g.reserved.size() >= lines_)
      raise(Errc::lines_exhausted, "guest " + std::to_string(guest.value) + " has no free line");
    const auto line = uint32_t(g.reserved.size());
    g.reserved[purpose] = line;
    g.purpose[line] = purpose;
    return line;
  }

  std::optional<LinePurpose> InterruptFabric::purpose_of(GuestId guest, uint32_t line) const
  {
    std::lock_guard lock(mu_);
    auto it = guests_.find(guest);
    if (it == guests_.end() || line >= lines_)
      return std::nullopt;
    return it->second->purpose[line];
  }

  void InterruptFabric::inject(const InterruptEvent& event)
  {
    {
      std::lock_guard lock(mu_);
      auto it = guests_.find(event.guest);
      if (it == guests_.end() || event.line >= lines_ || !it->second->purpose[event.line])
        raise(Errc::unknown_line, "line " + std::to_string(event.line) + " of guest " +
                                    std::to_string(event.guest.value));
      auto& g = *it->second;
      if (g.purpose[event.line]->carries_arg() != event.arg.has_value())
        raise(Errc::internal, "arg presence does not match the line declaration");
      if (event.arg)
        {
          g.arg_page[event.line] = *event.arg;
          g.arg_valid[event.line] = true;
        }
      ++g.injected[event.line];
      if (!g.pending[event.line])
        {
          g.pending[event.line] = true;
          ++g.outstanding;
        }
    }
    cv_.notify_all();
  }

  void InterruptFabric::deliver_loop(GuestId, GuestLines& g)
  {
    std::unique_lock lock(mu_);
    for (;;)
      {
        cv_.wait(lock, [&] {
          return stopping_ || std::find(g.pending.begin(), g.pending.end(), true) != g.pending.end();
        });
        if (stopping_)
          return;
        lock.unlock();
        const unsigned token = g.vcpus->acquire();
        lock.lock();
        for (uint32_t line = 0; line < lines_; ++line)
          {
            if (!g.pending[line])
              continue;
            g.pending[line] = false;
            std::optional<uint32_t> arg;
            if (g.arg_valid[line])
              {
                arg = g.arg_page[line];
                g.arg_valid[line] = false;
                g.arg_page[line] = 0;
              }
            ++g.handled[line];
            lock.unlock();
            g.handler(line, arg);
            lock.lock();
            --g.outstanding;
          }
        lock.unlock();
        g.vcpus->release(token);
        lock.lock();
        cv_.notify_all();
      }
  }

  void InterruptFabric::drain(GuestId guest)
  {
    std::unique_lock lock(mu_);
    auto it = guests_.find(guest);
    if (it == guests_.end())
      return;
    auto& g = *it->second;
    cv_.wait(lock, [&] { return g.outstanding == 0 || stopping_; });
  }

  void InterruptFabric::shutdown()
  {
    std::vector<std::thread> threads;
    {
      std::lock_guard lock(mu_);
      stopping_ = true;
      for (auto& [id, g] : guests_)
        if (g->delivery.joinable())
          threads.push_back(std::move(g->delivery));
    }
    cv_.notify_all();
    for (auto& t : threads)
      t.join();
  }

  uint64_t InterruptFabric::injected(GuestId guest, uint32_t line) const
  {
    std::lock_guard lock(mu_);
    auto it = guests_.find(guest);
    return it == guests_.end() || line >= lines_ ? 0 : it->second->injected[line];
  }

  uint64_t InterruptFabric::handled(GuestId guest, uint32_t line) const
  {
    std::lock_guard lock(mu_);
    auto it = guests_.find(guest);
    return it == guests_.end() || line >= lines_ ? 0 : it->second->handled[line];
  }

  uint64_t InterruptFabric::injected_total(LineKind kind) const
  {
    std::lock_guard lock(mu_);
    uint64_t n = 0;
    for (auto& [id, g] : guests_)
      for (uint32_t line = 0; line < lines_; ++line)
        if (g->purpose[line] && g->purpose[line]->kind == kind)
          n += g->injected[line];
    return n;
  }

} // namespace devirt
