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
#include <chrono>
#include <condition_variable>
#include <functional>
#include <mutex>

namespace devirt
{

  using Micros = std::chrono::microseconds;

  /// Virtual time source for devices and workloads.
  class Clock
  {
  public:
    virtual ~Clock() = default;

    virtual Micros now() const = 0;

    /// Waits on cv until pred holds or the virtual deadline passes.
    /// Returns the final value of pred.
    virtual bool wait_until(std::unique_lock<std::mutex>& lock, std::condition_variable& cv,
                            Micros deadline, const std::function<bool()>& pred) = 0;

    virtual void sleep_until(Micros deadline) = 0;

    void sleep_for(Micros duration) { sleep_until(now() + duration); }
  };

  /// Real steady time, optionally scaled: virtual = real * scale.
  class ScaledClock final : public Clock
  {
  public:
    explicit ScaledClock(double scale = 1.0);

    Micros now() const override;
    bool wait_until(std::unique_lock<std::mutex>& lock, std::condition_variable& cv, Micros deadline,
                    const std::function<bool()>& pred) override;
    void sleep_until(Micros deadline) override;

  private:
    std::chrono::steady_clock::time_point to_real(Micros virtual_time) const;

    std::chrono::steady_clock::time_point start_;
    double scale_;
  };

  /// Time moves only when advance() is called. Waiters re-check every
  /// 100 us of real time.
  class ManualClock final : public Clock
  {
  public:
    Micros now() const override { return Micros(now_us_.load()); }
    bool wait_until(std::unique_lock<std::mutex>& lock, std::condition_variable& cv, Micros deadline,
                    const std::function<bool()>& pred) override;
    void sleep_until(Micros deadline) override;

    void advance(Micros delta) { now_us_ += delta.count(); }

  private:
    std::atomic<int64_t> now_us_{0};
  };

} // namespace devirt
