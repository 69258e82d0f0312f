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

#include <compare>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace devirt
{

  inline constexpr uint32_t kPageSize = 4096;
  inline constexpr uint32_t kPageShift = 12;

  /// Address wrapper. The tag keeps guest-virtual, guest-physical,
  /// host-virtual and host-physical addresses from mixing.
  template <typename Tag>
  struct Address
  {
    uint32_t value = 0;

    constexpr Address() = default;
    constexpr explicit Address(uint32_t v) : value(v) {}

    constexpr uint32_t page() const { return value >> kPageShift; }
    constexpr uint32_t offset() const { return value & (kPageSize - 1); }
    constexpr Address page_base() const { return Address(value & ~(kPageSize - 1)); }
    constexpr bool page_aligned() const { return offset() == 0; }

    static constexpr Address from_page(uint32_t pfn, uint32_t off = 0)
    { return Address((pfn << kPageShift) | off); }

    constexpr Address operator+(uint32_t delta) const { return Address(value + delta); }
    constexpr auto operator<=>(const Address&) const = default;
  };

  struct GvaTag {};
  struct GpaTag {};
  struct HvaTag {};
  struct HpaTag {};

  using Gva = Address<GvaTag>;
  using Gpa = Address<GpaTag>;
  using Hva = Address<HvaTag>;
  using Hpa = Address<HpaTag>;

  /// Small strong integer id.
  template <typename Tag>
  struct Id
  {
    uint32_t value = 0;

    constexpr Id() = default;
    constexpr explicit Id(uint32_t v) : value(v) {}
    constexpr auto operator<=>(const Id&) const = default;
  };

  struct GuestTag {};
  struct ProcessTag {};
  struct ThreadTag {};
  struct DeviceTag {};

  using GuestId = Id<GuestTag>;
  /// A guest process is identified by the frame number of its page-table
  /// root, which is what the virtual CR3 carries.
  using ProcessId = Id<ProcessTag>;
  using ThreadId = Id<ThreadTag>;
  using DeviceId = Id<DeviceTag>;

  enum class Errc : int32_t
  {
    page_fault = 1,
    out_of_range,
    pool_exhausted,
    already_mapped,
    tdp_unsupported,
    trap_exit,
    unpackable,
    channel_closed,
    unknown_vcpu,
    lines_exhausted,
    unknown_line,
    unknown_process,
    op_unsupported,
    retry_failed,
    duplicate_device,
    no_result_page,
    unknown_owner,
    stale_request,
    busy,
    invalid_cmd,
    bad_address,
    need_guest_va_range,
    invalid_config,
    missing_metric,
    not_found,
    bad_fd,
    timeout,
    internal,
  };

  std::string_view errc_name(Errc code);

  /// Status word carried on the hypercall return path. Negative values
  /// encode an Errc, non-negative values are operation-defined.
  inline constexpr int32_t kStatusOk = 0;
  inline constexpr int32_t kStatusAccepted = 0x4143; // "AC"

  constexpr int32_t status_of(Errc code) { return -static_cast<int32_t>(code); }
  constexpr bool is_error_status(int32_t status) { return status < 0; }
  constexpr Errc errc_of(int32_t status) { return static_cast<Errc>(-status); }

  std::string status_name(int32_t status);

  class Error : public std::runtime_error
  {
  public:
    Error(Errc code, const std::string& what);

    Errc code() const { return code_; }

  private:
    Errc code_;
  };

  /// Raised by page walks. The level is 1 for the top-level table.
  class PageFault : public Error
  {
  public:
    PageFault(uint32_t address, unsigned level);

    uint32_t address() const { return address_; }
    unsigned level() const { return level_; }

  private:
    uint32_t address_;
    unsigned level_;
  };

  /// Raised when a walk lands on a trapping shadow entry.
  class TrapExit : public Error
  {
  public:
    TrapExit(uint32_t address, unsigned level);

    uint32_t address() const { return address_; }
    unsigned level() const { return level_; }

  private:
    uint32_t address_;
    unsigned level_;
  };

  [[noreturn]] void raise(Errc code, const std::string& detail = {});

  std::string hex(uint64_t value);

} // namespace devirt

template <typename Tag>
struct std::hash<devirt::Id<Tag>>
{
  size_t operator()(const devirt::Id<Tag>& id) const noexcept
  { return std::hash<uint32_t>{}(id.value); }
};
