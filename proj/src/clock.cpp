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

#include "devirt/clock.hpp"

#include <thread>

namespace devirt
{

  ScaledClock::ScaledClock(double scale)
    : start_(std::chrono::steady_clock::now()), scale_(scale)
  {
  }

  Micros ScaledClock::now() const
  {
    const auto real = std::chrono::duration_cast<Micros>(std::chrono::steady_clock::now() - start_);
    return Micros(static_cast<int64_t>(double(real.count()) * scale_));
  }

  std::chrono::steady_clock::time_point ScaledClock::to_real(Micros virtual_time) const
  {
    return start_ + Micros(static_cast<int64_t>(double(virtual_time.count()) / scale_));
  }

  bool ScaledClock::wait_until(std::unique_lock<std::mutex>& lock, std::condition_variable& cv,
                               Micros deadline, const std::function<bool()>& pred)
  {
    return cv.wait_until(lock, to_real(deadline), pred);
  }

  void ScaledClock::sleep_until(Micros deadline)
  {
    std::this_thread::sleep_until(to_real(deadline));
  }

  bool ManualClock::wait_until(std::unique_lock<std::mutex>& lock, std::condition_variable& cv,
                               Micros deadline, const std::function<bool()>& pred)
  {
    while (!pred())
      {
        if (now() >= deadline)
          return false;
        cv.wait_for(lock, std::chrono::microseconds(100));
      }
    return true;
  }

  void ManualClock::sleep_until(Micros deadline)
  {
    while (now() < deadline)
      std::this_thread::sleep_for(std::chrono::microseconds(100));
  }

} // namespace devirt
