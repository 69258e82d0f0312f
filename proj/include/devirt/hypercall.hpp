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

#include <array>
#include <condition_variable>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <string_view>
#include <tuple>
#include <vector>

#include "devirt/common.hpp"

namespace devirt
{

  /// Device-file operations plus the one control call that travels the
  /// same channel.
  enum class OpKind : uint8_t
  {
    open = 1,
    release,
    read,
    write,
    ioctl,
    mmap,
    page_fault,
    poll,
    notify_subscribe,
    announce_result_page,
  };

  inline constexpr unsigned kOpKindCount = 10;

  std::string_view op_name(OpKind kind);
  bool is_file_op(OpKind kind);

  struct FileOp
  {
    OpKind kind = OpKind::read;
    uint32_t device = 0;
    uint32_t handle = 0;
    uint32_t user_gva = 0;
    uint32_t length = 0;
    uint32_t offset = 0;
    uint32_t flags = 0;
    uint32_t cmd = 0;
    uint32_t timeout_ms = 0;
    uint32_t fault_va = 0;
    uint32_t vma_start = 0;
    uint32_t vma_end = 0;
    uint32_t error_code = 0;
    uint32_t request_id = 0;
    uint32_t map_gva = 0;
    uint32_t result_gpa = 0;
    uint32_t control_gpa = 0;

    bool operator==(const FileOp&) const = default;
  };

  using OpField = uint32_t FileOp::*;

  /// Fields that travel for each kind, in slot order.
  std::span<const OpField> arg_layout(OpKind kind);

  inline constexpr unsigned kFrameArgs = 6;
  inline constexpr uint32_t kContinuationKind = 0xF;

  /// Per-call metadata carried in the opcode word: bits 0-3 kind, bit 4
  /// non-blocking, bits 8-15 sequence tag, bits 16-31 guest thread id.
  struct CallHeader
  {
    uint16_t thread = 0;
    uint8_t tag = 0;
    bool nonblocking = false;

    bool operator==(const CallHeader&) const = default;
  };

  struct HypercallFrame
  {
    uint32_t opcode = 0;
    std::array<uint32_t, kFrameArgs> args{};
    uint32_t vcpu = 0;
    uint32_t virtual_cr3 = 0;

    uint32_t kind_bits() const { return opcode & 0xF; }
    bool is_continuation() const { return kind_bits() == kContinuationKind; }
    CallHeader header() const;
  };

  struct HypercallResult
  {
    int32_t status = kStatusOk;
    std::array<uint32_t, kFrameArgs> values{};
  };

  std::vector<HypercallFrame> pack(const FileOp& op, const CallHeader& header, uint32_t vcpu,
                                   uint32_t virtual_cr3);

  struct Unpacked
  {
    CallHeader header;
    FileOp op;
  };

  /// Inverse of pack. Raises Unpackable on malformed input.
  Unpacked unpack(std::span<const HypercallFrame> frames);

  /// A reassembled call as seen by the backend.
  struct Call
  {
    GuestId guest;
    ProcessId process;
    uint32_t vcpu = 0;
    CallHeader header;
    FileOp op;
  };

  /// Mutex granting the lock in request order.
  class FifoMutex
  {
  public:
    void lock();
    void unlock();

  private:
    std::mutex mu_;
    std::condition_variable cv_;
    uint64_t next_ = 0;
    uint64_t serving_ = 0;
  };

  /// Guest-to-host trap channel. Calls from one guest are serialized; a
  /// blocking call keeps the service busy for its whole execution.
  class HypercallChannel
  {
  public:
    using Dispatcher = std::function<HypercallResult(const Call&)>;

    void register_vcpus(GuestId guest, uint32_t first, uint32_t count);
    void attach(Dispatcher dispatcher);
    void close();
    bool closed() const;

    std::pair<GuestId, ProcessId> identify(const HypercallFrame& frame) const;

    /// Delivers frames in order and returns the last result.
    HypercallResult issue(std::span<const HypercallFrame> frames, uint32_t vcpu);

    /// One trap. The first half of a two-frame call is buffered and
    /// acknowledged with kStatusOk.
    HypercallResult deliver(const HypercallFrame& frame);

    uint64_t frames_delivered() const;
    size_t pending_continuations() const;

  private:
    FifoMutex& service_lock(GuestId guest);

    mutable std::mutex mu_;
    std::map<uint32_t, GuestId> vcpu_owner_;
    std::map<GuestId, std::unique_ptr<FifoMutex>> service_;
    std::map<std::tuple<GuestId, ProcessId, uint8_t>, HypercallFrame> pending_;
    Dispatcher dispatcher_;
    bool closed_ = false;
    uint64_t frames_delivered_ = 0;
  };

} // namespace devirt
