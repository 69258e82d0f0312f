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

#include "devirt/common.hpp"

#include <cstdio>

namespace devirt
{

  std::string_view errc_name(Errc code)
  {
    switch (code)
      {
      case Errc::page_fault: return "PageFault";
      case Errc::out_of_range: return "OutOfRange";
      case Errc::pool_exhausted: return "PoolExhausted";
      case Errc::already_mapped: return "AlreadyMapped";
      case Errc::tdp_unsupported: return "TdpUnsupported";
      case Errc::trap_exit: return "TrapExit";
      case Errc::unpackable: return "Unpackable";
      case Errc::channel_closed: return "ChannelClosed";
      case Errc::unknown_vcpu: return "UnknownVcpu";
      case Errc::lines_exhausted: return "LinesExhausted";
      case Errc::unknown_line: return "UnknownLine";
      case Errc::unknown_process: return "UnknownProcess";
      case Errc::op_unsupported: return "OpUnsupported";
      case Errc::retry_failed: return "RetryFailed";
      case Errc::duplicate_device: return "DuplicateDevice";
      case Errc::no_result_page: return "NoResultPage";
      case Errc::unknown_owner: return "UnknownOwner";
      case Errc::stale_request: return "StaleRequest";
      case Errc::busy: return "Busy";
      case Errc::invalid_cmd: return "InvalidCmd";
      case Errc::bad_address: return "BadAddress";
      case Errc::need_guest_va_range: return "NeedGuestVaRange";
      case Errc::invalid_config: return "InvalidConfig";
      case Errc::missing_metric: return "MissingMetric";
      case Errc::not_found: return "NotFound";
      case Errc::bad_fd: return "BadFd";
      case Errc::timeout: return "Timeout";
      case Errc::internal: return "Internal";
      }
    return "Unknown";
  }

  std::string status_name(int32_t status)
  {
    if (status == kStatusAccepted)
      return "ACCEPTED";
    if (is_error_status(status))
      return std::string(errc_name(errc_of(status)));
    if (status == kStatusOk)
      return "OK";
    return std::to_string(status);
  }

  Error::Error(Errc code, const std::string& what)
    : std::runtime_error(what.empty() ? std::string(errc_name(code))
                                      : std::string(errc_name(code)) + ": " + what),
      code_(code)
  {
  }

  PageFault::PageFault(uint32_t address, unsigned level)
    : Error(Errc::page_fault, hex(address) + " level " + std::to_string(level)),
      address_(address), level_(level)
  {
  }

  TrapExit::TrapExit(uint32_t address, unsigned level)
    : Error(Errc::trap_exit, hex(address) + " level " + std::to_string(level)),
      address_(address), level_(level)
  {
  }

  void raise(Errc code, const std::string& detail)
  {
    throw Error(code, detail);
  }

  std::string hex(uint64_t value)
  {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "0x%llx", static_cast<unsigned long long>(value));
    return buf;
  }

} // namespace devirt
