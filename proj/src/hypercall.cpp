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

#include "devirt/hypercall.hpp"

namespace devirt
{

  namespace
  {

    constexpr OpField kOpenLayout[] = {&FileOp::device, &FileOp::flags};
    constexpr OpField kReleaseLayout[] = {&FileOp::handle};
    constexpr OpField kRwLayout[] = {&FileOp::handle, &FileOp::user_gva, &FileOp::length, &FileOp::offset};
    constexpr OpField kIoctlLayout[] = {&FileOp::handle, &FileOp::cmd,        &FileOp::user_gva,
                                        &FileOp::length, &FileOp::request_id, &FileOp::map_gva};
    constexpr OpField kMmapLayout[] = {&FileOp::handle, &FileOp::user_gva, &FileOp::length, &FileOp::offset,
                                       &FileOp::flags};
    constexpr OpField kFaultLayout[] = {&FileOp::handle, &FileOp::fault_va, &FileOp::vma_start,
                                        &FileOp::vma_end, &FileOp::offset,  &FileOp::flags,
                                        &FileOp::error_code};
    constexpr OpField kPollLayout[] = {&FileOp::handle, &FileOp::timeout_ms, &FileOp::flags};
    constexpr OpField kSubscribeLayout[] = {&FileOp::handle, &FileOp::device};
    constexpr OpField kAnnounceLayout[] = {&FileOp::result_gpa, &FileOp::control_gpa};

    constexpr unsigned kMaxWords = 2 * kFrameArgs;

    bool valid_kind(uint32_t bits) { return bits >= 1 && bits <= kOpKindCount; }

    uint32_t encode_opcode(uint32_t kind_bits, const CallHeader& h)
    {
      return (kind_bits & 0xF) | (h.nonblocking ? 0x10u : 0u) | (uint32_t(h.tag) << 8) | (uint32_t(h.thread) << 16);
    }

  } // namespace

  std::string_view op_name(OpKind kind)
  {
    switch (kind)
      {
      case OpKind::open: return "open";
      case OpKind::release: return "release";
      case OpKind::read: return "read";
      case OpKind::write: return "write";
      case OpKind::ioctl: return "ioctl";
      case OpKind::mmap: return "mmap";
      case OpKind::page_fault: return "page_fault";
      case OpKind::poll: return "poll";
      case OpKind::notify_subscribe: return "notify_subscribe";
      case OpKind::announce_result_page: return "announce_result_page";
      }
    return "unknown";
  }

  bool is_file_op(OpKind kind) { return kind != OpKind::announce_result_page; }

  std::span<const OpField> arg_layout(OpKind kind)
  {
    switch (kind)
      {
      case OpKind::open: return kOpenLayout;
      case OpKind::release: return kReleaseLayout;
      case OpKind::read:
      case OpKind::write: return kRwLayout;
      case OpKind::ioctl: return kIoctlLayout;
      case OpKind::mmap: return kMmapLayout;
      case OpKind::page_fault: return kFaultLayout;
      case OpKind::poll: return kPollLayout;
      case OpKind::notify_subscribe: return kSubscribeLayout;
      case OpKind::announce_result_page: return kAnnounceLayout;
      }
    raise(Errc::unpackable, "unknown op kind");
  }

  CallHeader HypercallFrame::header() const
  {
    return CallHeader{uint16_t(opcode >> 16), uint8_t(opcode >> 8), (opcode & 0x10) != 0};
  }

  std::vector<HypercallFrame> pack(const FileOp& op, const CallHeader& header, uint32_t vcpu,
                                   uint32_t virtual_cr3)
  {
    const auto layout = arg_layout(op.kind);
    if (layout.size() > kMaxWords)
      raise(Errc::unpackable, std::string(op_name(op.kind)) + " needs more than 12 words");
    const size_t count = layout.size() > kFrameArgs ? 2 : 1;
    std::vector<HypercallFrame> frames(count);
    for (size_t f = 0; f < count; ++f)
      {
        frames[f].opcode = encode_opcode(f == 0 ? uint32_t(op.kind) : kContinuationKind, header);
        frames[f].vcpu = vcpu;
        frames[f].virtual_cr3 = virtual_cr3;
      }
    for (size_t i = 0; i < layout.size(); ++i)
      frames[i / kFrameArgs].args[i % kFrameArgs] = op.*layout[i];
    return frames;
  }

  Unpacked unpack(std::span<const HypercallFrame> frames)
  {
    if (frames.empty() || frames.size() > 2)
      raise(Errc::unpackable, "a call is one or two frames");
    const auto& first = frames[0];
    if (!valid_kind(first.kind_bits()))
      raise(Errc::unpackable, "bad opcode " + hex(first.opcode));
    Unpacked out;
    out.header = first.header();
    out.op.kind = OpKind(first.kind_bits());
    const auto layout = arg_layout(out.op.kind);
    const size_t need = layout.size() > kFrameArgs ? 2 : 1;
    if (frames.size() != need)
      raise(Errc::unpackable, std::string(op_name(out.op.kind)) + " frame count mismatch");
    if (need == 2)
      {
        const auto& second = frames[1];
        if (!second.is_continuation() || second.header() != out.header || second.vcpu != first.vcpu ||
            second.virtual_cr3 != first.virtual_cr3)
          raise(Errc::unpackable, "continuation frame does not match");
      }
    for (size_t i = 0; i < layout.size(); ++i)
      out.op.*layout[i] = frames[i / kFrameArgs].args[i % kFrameArgs];
    return out;
  }

  // -------------------------------------------------------------- FifoMutex

  void FifoMutex::lock()
  {
    std::unique_lock lock(mu_);
    const uint64_t ticket = next_++;
    cv_.wait(lock, [&] { return serving_ == ticket; });
  }

  void FifoMutex::unlock()
  {
    {
      std::lock_guard lock(mu_);
      ++serving_;
    }
    cv_.notify_all();
  }

  // ------------------------------------------------------- HypercallChannel

  void HypercallChannel::register_vcpus(GuestId guest, uint32_t first, uint32_t count)
  {
    std::lock_guard lock(mu_);
    for (uint32_t v = first; v < first + count; ++v)
      vcpu_owner_[v] = guest;
    service_.try_emplace(guest, std::make_unique<FifoMutex>());
  }

  void HypercallChannel::attach(Dispatcher dispatcher)
  {
    std::lock_guard lock(mu_);
    dispatcher_ = std::move(dispatcher);
  }

  void HypercallChannel::close()
  {
    std::lock_guard lock(mu_);
    closed_ = true;
  }

  bool HypercallChannel::closed() const
  {
    std::lock_guard lock(mu_);
    return closed_;
  }

  std::pair<GuestId, ProcessId> HypercallChannel::identify(const HypercallFrame& frame) const
  {
    std::lock_guard lock(mu_);
    auto it = vcpu_owner_.find(frame.vcpu);
    if (it == vcpu_owner_.end())
      raise(Errc::unknown_vcpu, "vcpu " + std::to_string(frame.vcpu));
    return {it->second, ProcessId(frame.virtual_cr3)};
  }

  FifoMutex& HypercallChannel::service_lock(GuestId guest)
  {
    std::lock_guard lock(mu_);
    return *service_.at(guest);
  }

  HypercallResult HypercallChannel::issue(std::span<const HypercallFrame> frames, uint32_t vcpu)
  {
    HypercallResult result;
    for (const auto& f : frames)
      {
        if (f.vcpu != vcpu)
          raise(Errc::internal, "frame vcpu does not match the issuing vcpu");
        result = deliver(f);
      }
    return result;
  }

  HypercallResult HypercallChannel::deliver(const HypercallFrame& frame)
  {
    if (closed())
      raise(Errc::channel_closed, "backend is shut down");
    const auto [guest, process] = identify(frame);
    std::lock_guard service(service_lock(guest));

    Dispatcher dispatcher;
    Call call{guest, process, frame.vcpu, frame.header(), {}};
    {
      std::lock_guard lock(mu_);
      if (closed_)
        raise(Errc::channel_closed, "backend is shut down");
      ++frames_delivered_;
      const auto key = std::make_tuple(guest, process, call.header.tag);
      if (frame.is_continuation())
        {
          auto it = pending_.find(key);
          if (it == pending_.end())
            raise(Errc::unpackable, "continuation without a first frame");
          const HypercallFrame pair[2] = {it->second, frame};
          pending_.erase(it);
          call.op = unpack(pair).op;
        }
      else
        {
          if (!valid_kind(frame.kind_bits()))
            raise(Errc::unpackable, "bad opcode " + hex(frame.opcode));
          if (arg_layout(OpKind(frame.kind_bits())).size() > kFrameArgs)
            {
              pending_[key] = frame;
              return {};
            }
          call.op = unpack(std::span(&frame, 1)).op;
        }
      dispatcher = dispatcher_;
    }
    if (!dispatcher)
      raise(Errc::channel_closed, "no backend attached");
    return dispatcher(call);
  }

  uint64_t HypercallChannel::frames_delivered() const
  {
    std::lock_guard lock(mu_);
    return frames_delivered_;
  }

  size_t HypercallChannel::pending_continuations() const
  {
    std::lock_guard lock(mu_);
    return pending_.size();
  }

} // namespace devirt
