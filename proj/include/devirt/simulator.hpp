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

#include <memory>
#include <vector>

#include "devirt/backend.hpp"
#include "devirt/clock.hpp"
#include "devirt/devices.hpp"
#include "devirt/frontend.hpp"
#include "devirt/guest_runtime.hpp"
#include "devirt/hypercall.hpp"
#include "devirt/interrupts.hpp"
#include "devirt/memvirt.hpp"

namespace devirt
{

  struct SimConfig
  {
    std::vector<GuestConfig> guests{GuestConfig{}};
    HasMode has_mode = HasMode::software;
    bool nonblocking = false;
    double clock_scale = 1.0;
    /// Time only moves when advanced; nothing may sleep on it.
    bool manual_clock = false;
  };

  /// Raises InvalidConfig naming the violated constraint.
  void validate(const SimConfig& config);

  /// Host, guests, and both halves of the common virtual driver, wired.
  class Simulator
  {
  public:
    explicit Simulator(const SimConfig& config);
    ~Simulator();

    Simulator(const Simulator&) = delete;
    Simulator& operator=(const Simulator&) = delete;

    memvirt::Hypervisor& hypervisor() { return hv_; }
    Clock& clock() { return *clock_; }
    /// Null unless the config asked for a manual clock.
    ManualClock* manual_clock() { return dynamic_cast<ManualClock*>(clock_.get()); }
    InterruptFabric& fabric() { return fabric_; }
    EventLog& log() { return log_; }
    Backend& backend() { return backend_; }
    HypercallChannel& channel() { return channel_; }

    size_t guest_count() const { return guests_.size(); }
    Guest& guest(size_t i) { return *guests_.at(i); }
    Frontend& frontend(size_t i) { return *frontends_.at(i); }

    /// Registers the device with the backend and mounts /dev/<name> in
    /// every guest, exporting its info blob.
    EventDevice& add_event_device(DeviceId id, std::string name = "input0");
    StreamDevice& add_stream_device(DeviceId id, StreamConfig config = {}, std::string name = "video0");
    FbDevice& add_fb_device(DeviceId id, FbConfig config = {}, std::string name = "fb0");

    /// Joins guest threads, then the host workers and delivery contexts.
    void shutdown();

  private:
    void install(std::unique_ptr<ClassDriver> driver);

    SimConfig config_;
    memvirt::Hypervisor hv_;
    std::unique_ptr<Clock> clock_;
    InterruptFabric fabric_;
    EventLog log_{*clock_};
    Backend backend_{hv_, *clock_, fabric_, log_};
    HypercallChannel channel_;
    std::vector<std::unique_ptr<ClassDriver>> devices_;
    std::vector<std::unique_ptr<Guest>> guests_;
    std::vector<std::unique_ptr<Frontend>> frontends_;
    bool shut_down_ = false;
  };

} // namespace devirt
