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

#include "devirt/guest_runtime.hpp"

#include <algorithm>
#include <exception>

namespace devirt
{

  // --------------------------------------------------------------- VcpuPool

  VcpuPool::VcpuPool(unsigned count)
    : busy_(count, false)
  {
    if (count == 0)
      raise(Errc::invalid_config, "a guest needs at least one vCPU");
  }

  unsigned VcpuPool::acquire()
  {
    std::unique_lock lock(mu_);
    const uint64_t ticket = next_ticket_++;
    queue_.push_back(ticket);
    cv_.wait(lock, [&] { return queue_.front() == ticket && held_ < busy_.size(); });
    queue_.pop_front();
    const auto it = std::find(busy_.begin(), busy_.end(), false);
    *it = true;
    ++held_;
    cv_.notify_all();
    return unsigned(it - busy_.begin());
  }

  void VcpuPool::release(unsigned token)
  {
    {
      std::lock_guard lock(mu_);
      if (token >= busy_.size() || !busy_[token])
        throw std::logic_error("release of a vCPU token that is not held");
      busy_[token] = false;
      --held_;
    }
    cv_.notify_all();
  }

  unsigned VcpuPool::held() const
  {
    std::lock_guard lock(mu_);
    return held_;
  }

  unsigned VcpuPool::waiting() const
  {
    std::lock_guard lock(mu_);
    return unsigned(queue_.size());
  }

  // ------------------------------------------------------------ GuestThread

  GuestThread::GuestThread(Guest& guest, GuestProcess& process, ThreadId id)
    : guest_(guest), process_(process), id_(id)
  {
  }

  void GuestThread::acquire_vcpu()
  {
    {
      std::lock_guard lock(mu_);
      if (token_)
        throw std::logic_error("thread already holds a vCPU");
    }
    const unsigned token = guest_.vcpus().acquire();
    std::lock_guard lock(mu_);
    token_ = token;
    state_ = ThreadState::running;
  }

  void GuestThread::release_vcpu()
  {
    unsigned token;
    {
      std::lock_guard lock(mu_);
      if (!token_)
        throw std::logic_error("release_vcpu without holding a vCPU");
      token = *token_;
      token_.reset();
      state_ = ThreadState::runnable;
    }
    guest_.vcpus().release(token);
  }

  bool GuestThread::holds_vcpu() const
  {
    std::lock_guard lock(mu_);
    return token_.has_value();
  }

  uint32_t GuestThread::vcpu() const
  {
    std::lock_guard lock(mu_);
    if (!token_)
      throw std::logic_error("thread holds no vCPU");
    return guest_.vcpu_base() + *token_;
  }

  void GuestThread::run_quantum(Micros duration)
  {
    if (!holds_vcpu())
      throw std::logic_error("run_quantum without a vCPU");
    guest_.clock().sleep_for(duration);
    ++progress_;
  }

  void GuestThread::sleep()
  {
    std::unique_lock lock(mu_);
    if (!token_)
      throw std::logic_error("sleep without holding a vCPU");
    if (permit_)
      {
        permit_ = false;
        return;
      }
    const unsigned token = *token_;
    token_.reset();
    state_ = ThreadState::sleeping;
    guest_.vcpus().release(token);
    cv_.wait(lock, [&] { return permit_; });
    permit_ = false;
    state_ = ThreadState::runnable;
    lock.unlock();
    acquire_vcpu();
  }

  void GuestThread::wake()
  {
    {
      std::lock_guard lock(mu_);
      permit_ = true;
    }
    cv_.notify_all();
  }

  ThreadState GuestThread::state() const
  {
    std::lock_guard lock(mu_);
    return state_;
  }

  // ----------------------------------------------------------- GuestProcess

  GuestProcess::GuestProcess(Guest& guest, const memvirt::PageTableRoot& root)
    : guest_(guest), root_(root)
  {
  }

  std::optional<Gva> GuestProcess::reserve_va_range(uint32_t length)
  {
    std::lock_guard lock(va_mu_);
    const uint32_t pages = (length + kPageSize - 1) / kPageSize;
    if (pages == 0 || uint64_t(next_va_) + uint64_t(pages) * kPageSize > va_limit_)
      return std::nullopt;
    const Gva start(next_va_);
    // One guard page between ranges.
    next_va_ += (pages + 1) * kPageSize;
    return start;
  }

  Gva GuestProcess::alloc_user_buffer(uint32_t length)
  {
    auto start = reserve_va_range(length);
    if (!start)
      raise(Errc::pool_exhausted, "guest virtual address space exhausted");
    const uint32_t pages = (length + kPageSize - 1) / kPageSize;
    auto& vm = guest_.memory();
    for (uint32_t i = 0; i < pages; ++i)
      vm.guest_map(root_, *start + i * kPageSize, Gpa::from_page(guest_.alloc_frame()),
                   [this] { return guest_.alloc_frame(); });
    return *start;
  }

  void GuestProcess::write_user(Gva gva, std::span<const uint8_t> bytes)
  {
    auto& vm = guest_.memory();
    auto& host = vm.hypervisor().host_memory();
    size_t done = 0;
    while (done < bytes.size())
      {
        const Gva va = gva + uint32_t(done);
        const size_t chunk = std::min<size_t>(bytes.size() - done, kPageSize - va.offset());
        const Hpa hpa = vm.gpa_to_hpa(memvirt::walk_guest(va, root_, vm.guest_memory()));
        host.write(hpa.value, bytes.subspan(done, chunk));
        done += chunk;
      }
  }

  void GuestProcess::read_user(Gva gva, std::span<uint8_t> bytes) const
  {
    auto& vm = guest_.memory();
    const auto& host = vm.hypervisor().host_memory();
    size_t done = 0;
    while (done < bytes.size())
      {
        const Gva va = gva + uint32_t(done);
        const size_t chunk = std::min<size_t>(bytes.size() - done, kPageSize - va.offset());
        const Hpa hpa = vm.gpa_to_hpa(memvirt::walk_guest(va, root_, vm.guest_memory()));
        host.read(hpa.value, bytes.subspan(done, chunk));
        done += chunk;
      }
  }

  void GuestProcess::deliver(Signal signal)
  {
    {
      std::lock_guard lock(sig_mu_);
      signals_.push_back(signal);
    }
    sig_cv_.notify_all();
  }

  std::optional<Signal> GuestProcess::poll_signal()
  {
    std::lock_guard lock(sig_mu_);
    if (signals_.empty())
      return std::nullopt;
    auto s = signals_.front();
    signals_.pop_front();
    return s;
  }

  std::optional<Signal> GuestProcess::wait_signal(Micros timeout)
  {
    std::unique_lock lock(sig_mu_);
    auto& clock = guest_.clock();
    if (!clock.wait_until(lock, sig_cv_, clock.now() + timeout, [&] { return !signals_.empty(); }))
      return std::nullopt;
    auto s = signals_.front();
    signals_.pop_front();
    return s;
  }

  size_t GuestProcess::pending_signals() const
  {
    std::lock_guard lock(sig_mu_);
    return signals_.size();
  }

  // ------------------------------------------------------------------ Guest

  Guest::Guest(GuestId id, const GuestConfig& config, memvirt::Hypervisor& hv, Clock& clock, uint32_t vcpu_base)
    : id_(id), config_(config),
      vm_(hv.create_vm(id, memvirt::VmConfig{config.memory_size, config.mem_mode,
                                             std::min<uint32_t>(1024, config.memory_size / kPageSize / 4)})),
      clock_(clock), vcpu_base_(vcpu_base), vcpus_(config.vcpus),
      frames_(16, vm_.guest_os_frames() - 16)
  {
  }

  Guest::~Guest()
  {
    for (auto& t : contexts_)
      if (t.joinable())
        t.join();
  }

  uint32_t Guest::alloc_frame()
  {
    auto pfn = frames_.allocate();
    if (!pfn)
      raise(Errc::pool_exhausted, "guest out of memory");
    vm_.guest_memory().zero_frame(*pfn);
    return *pfn;
  }

  GuestProcess& Guest::create_process()
  {
    const auto root = vm_.register_process(alloc_frame());
    std::lock_guard lock(mu_);
    auto& p = processes_[root.owner];
    p = std::make_unique<GuestProcess>(*this, root);
    return *p;
  }

  GuestThread& Guest::create_thread(GuestProcess& process)
  {
    std::lock_guard lock(mu_);
    threads_.push_back(std::make_unique<GuestThread>(*this, process, ThreadId(next_thread_id_++)));
    return *threads_.back();
  }

  GuestThread* Guest::find_thread(ThreadId id)
  {
    std::lock_guard lock(mu_);
    for (auto& t : threads_)
      if (t->id() == id)
        return t.get();
    return nullptr;
  }

  GuestProcess* Guest::find_process(ProcessId id)
  {
    std::lock_guard lock(mu_);
    auto it = processes_.find(id);
    return it == processes_.end() ? nullptr : it->second.get();
  }

  void Guest::kill_process(ProcessId id)
  {
    std::lock_guard lock(mu_);
    // The object stays allocated for threads that still reference it.
    auto it = processes_.find(id);
    if (it == processes_.end())
      raise(Errc::unknown_process, std::to_string(id.value));
    dead_.push_back(std::move(it->second));
    processes_.erase(it);
  }

  void Guest::deliver_signal(ProcessId process, Signal signal)
  {
    GuestProcess* p = find_process(process);
    if (!p)
      raise(Errc::unknown_process, "signal to process " + std::to_string(process.value));
    p->deliver(signal);
  }

  void Guest::run(GuestThread& thread, std::function<void(GuestThread&)> body)
  {
    std::lock_guard lock(mu_);
    contexts_.emplace_back([this, &thread, body = std::move(body)] {
      try
        {
          body(thread);
        }
      catch (...)
        {
          std::lock_guard l(mu_);
          if (!failure_)
            failure_ = std::current_exception();
        }
      /// Return a vCPU the body still holds.
      if (thread.holds_vcpu())
        thread.release_vcpu();
    });
  }

  void Guest::join_all()
  {
    std::vector<std::thread> contexts;
    {
      std::lock_guard lock(mu_);
      contexts.swap(contexts_);
    }
    for (auto& t : contexts)
      t.join();
    std::exception_ptr failure;
    {
      std::lock_guard lock(mu_);
      failure = std::exchange(failure_, nullptr);
    }
    if (failure)
      std::rethrow_exception(failure);
  }

  unsigned Guest::running_threads() const
  {
    std::lock_guard lock(mu_);
    unsigned n = 0;
    for (auto& t : threads_)
      n += t->state() == ThreadState::running;
    return n;
  }

} // namespace devirt
