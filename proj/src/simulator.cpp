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

#include "devirt/simulator.hpp"

#include <exception>

namespace devirt
{

  namespace
  {

    memvirt::HostConfig host_for(const SimConfig& config)
    {
      memvirt::HostConfig host;
      uint64_t total = 32u << 20;
      for (const auto& g : config.guests)
        total += g.memory_size;
      if (total > (1ull << 31))
        raise(Errc::invalid_config, "guest memory exceeds the 2 GiB host");
      host.memory_size = uint32_t(total);
      return host;
    }

  } // namespace

  void validate(const SimConfig& config)
  {
    if (config.guests.empty())
      raise(Errc::invalid_config, "at least one guest is required");
    for (size_t i = 0; i < config.guests.size(); ++i)
      {
        const auto& g = config.guests[i];
        if (g.vcpus == 0 || g.vcpus > 8)
          raise(Errc::invalid_config, "guest " + std::to_string(i) + ": vcpus must be in 1..8");
        if (config.has_mode == HasMode::hardware && g.mem_mode == memvirt::MemMode::tdp)
          raise(Errc::invalid_config,
                "guest " + std::to_string(i) +
                  ": hardware hybrid address space cannot be used with TDP memory virtualization; use shadow");
      }
    if (!(config.clock_scale > 0))
      raise(Errc::invalid_config, "clock scale must be positive");
  }

  Simulator::Simulator(const SimConfig& config)
    : config_((validate(config), config)), hv_(host_for(config)),
      clock_(config.manual_clock ? std::unique_ptr<Clock>(std::make_unique<ManualClock>())
                                 : std::make_unique<ScaledClock>(config.clock_scale))
  {
    channel_.attach([this](const Call& call) { return backend_.dispatch(call); });
    for (size_t i = 0; i < config_.guests.size(); ++i)
      {
        const GuestId id{uint32_t(i)};
        const uint32_t vcpu_base = uint32_t(i) * 8;
        auto& guest = *guests_.emplace_back(std::make_unique<Guest>(id, config_.guests[i], hv_, *clock_, vcpu_base));
        channel_.register_vcpus(id, vcpu_base, config_.guests[i].vcpus);
        auto& fe = *frontends_.emplace_back(std::make_unique<Frontend>(guest, channel_, fabric_, log_));
        fe.set_default_nonblocking(config_.nonblocking);
        fabric_.attach_guest(id, guest.vcpus(),
                             [&fe](uint32_t line, std::optional<uint32_t> arg) { fe.handle_interrupt(line, arg); });
        backend_.attach_guest(id, config_.has_mode);
      }
  }

  Simulator::~Simulator()
  {
    try
      {
        shutdown();
      }
    catch (...)
      {
      }
  }

  void Simulator::install(std::unique_ptr<ClassDriver> driver)
  {
    auto& d = *devices_.emplace_back(std::move(driver));
    backend_.add_device(d);
    for (auto& fe : frontends_)
      {
        fe->mount("/dev/" + d.name(), d.id(), d.supported_ops());
        fe->export_device_info(d.id(), d.info());
      }
  }

  EventDevice& Simulator::add_event_device(DeviceId id, std::string name)
  {
    auto dev = std::make_unique<EventDevice>(id, *clock_, std::move(name));
    auto& ref = *dev;
    install(std::move(dev));
    return ref;
  }

  StreamDevice& Simulator::add_stream_device(DeviceId id, StreamConfig config, std::string name)
  {
    auto dev = std::make_unique<StreamDevice>(id, *clock_, config, std::move(name));
    auto& ref = *dev;
    install(std::move(dev));
    return ref;
  }

  FbDevice& Simulator::add_fb_device(DeviceId id, FbConfig config, std::string name)
  {
    auto dev = std::make_unique<FbDevice>(id, *clock_, hv_, config, std::move(name));
    auto& ref = *dev;
    install(std::move(dev));
    return ref;
  }

  void Simulator::shutdown()
  {
    if (shut_down_)
      return;
    shut_down_ = true;
    std::exception_ptr failure;
    for (auto& g : guests_)
      {
        try
          {
            g->join_all();
          }
        catch (...)
          {
            if (!failure)
              failure = std::current_exception();
          }
      }
    backend_.shutdown();
    fabric_.shutdown();
    channel_.close();
    if (failure)
      std::rethrow_exception(failure);
  }

} // namespace devirt
