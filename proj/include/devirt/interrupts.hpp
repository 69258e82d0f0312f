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

#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "devirt/common.hpp"
#include "devirt/guest_runtime.hpp"

namespace devirt
{

  enum class LineKind : uint8_t { completion, notification, pause_resume };

  struct LinePurpose
  {
    LineKind kind = LineKind::completion;
    DeviceId device{}; ///< notification lines only

    auto operator<=>(const LinePurpose&) const = default;

    static LinePurpose completion() { return {LineKind::completion, {}}; }
    static LinePurpose notification(DeviceId d) { return {LineKind::notification, d}; }
    static LinePurpose pause_resume() { return {LineKind::pause_resume, {}}; }

    bool carries_arg() const { return kind != LineKind::notification; }
  };

  struct InterruptEvent
  {
    GuestId guest;
    uint32_t line = 0;
    std::optional<uint32_t> arg;
  };

  inline constexpr uint32_t kPauseArg = 0;
  inline constexpr uint32_t kResumeArg = 1;

  /// Virtual interrupt lines per guest. Args travel in a shared page, one
  /// word per line; a busy line coalesces and the latest arg wins.
  class InterruptFabric
  {
  public:
    using Handler = std::function<void(uint32_t line, std::optional<uint32_t> arg)>;

    explicit InterruptFabric(unsigned lines_per_guest = 32);
    ~InterruptFabric();

    InterruptFabric(const InterruptFabric&) = delete;
    InterruptFabric& operator=(const InterruptFabric&) = delete;

    /// Starts the guest's delivery context. Handlers run holding one of
    /// the guest's vCPU tokens.
    void attach_guest(GuestId guest, VcpuPool& vcpus, Handler handler);

    uint32_t reserve_line(GuestId guest, LinePurpose purpose);
    std::optional<LinePurpose> purpose_of(GuestId guest, uint32_t line) const;

    void inject(const InterruptEvent& event);

    /// Blocks until every injected interrupt of the guest was handled.
    void drain(GuestId guest);
    void shutdown();

    uint64_t injected(GuestId guest, uint32_t line) const;
    uint64_t handled(GuestId guest, uint32_t line) const;
    uint64_t injected_total(LineKind kind) const;

    unsigned lines_per_guest() const { return lines_; }

  private:
    struct GuestLines
    {
      VcpuPool* vcpus = nullptr;
      Handler handler;
      std::map<LinePurpose, uint32_t> reserved;
      std::vector<std::optional<LinePurpose>> purpose;
      std::vector<uint32_t> arg_page;
      std::vector<bool> arg_valid;
      std::vector<bool> pending;
      std::vector<uint64_t> injected;
      std::vector<uint64_t> handled;
      uint64_t outstanding = 0;
      std::thread delivery;
    };

    std::unique_ptr<GuestLines>& lines_for(GuestId guest);
    void deliver_loop(GuestId guest, GuestLines& g);

    unsigned lines_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::map<GuestId, std::unique_ptr<GuestLines>> guests_;
    bool stopping_ = false;
  };

} // namespace devirt
