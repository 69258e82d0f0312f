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

#include "devirt/memvirt.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <sstream>

namespace devirt::memvirt
{

  // ---------------------------------------------------------------- PhysMem

  PhysMem::PhysMem(uint64_t size_bytes)
    : storage_(nullptr), base_(0), size_(size_bytes)
  {
    if (size_bytes == 0 || size_bytes % kPageSize != 0)
      raise(Errc::out_of_range, "memory size must be a non-zero multiple of 4096");
    storage_ = std::make_shared<Storage>(size_bytes);
  }

  PhysMem::PhysMem(std::shared_ptr<Storage> storage, uint64_t base, uint64_t size)
    : storage_(std::move(storage)), base_(base), size_(size)
  {
  }

  PhysMem PhysMem::slice(uint64_t base, uint64_t size) const
  {
    if (base % kPageSize != 0 || size % kPageSize != 0 || size == 0)
      raise(Errc::out_of_range, "slice must be page aligned");
    check(base, size);
    return PhysMem(storage_, base_ + base, size);
  }

  void PhysMem::check(uint64_t addr, uint64_t len) const
  {
    if (addr > size_ || len > size_ - addr)
      raise(Errc::out_of_range, hex(addr) + "+" + std::to_string(len) + " outside " + hex(size_));
  }

  template <typename Fn>
  void PhysMem::for_each_page(uint64_t addr, uint64_t len, bool exclusive, Fn&& fn) const
  {
    check(addr, len);
    uint64_t done = 0;
    while (done < len)
      {
        uint64_t abs = base_ + addr + done;
        uint64_t chunk = std::min<uint64_t>(len - done, kPageSize - (abs % kPageSize));
        auto& stripe = storage_->stripes[(abs / kPageSize) % kStripes];
        if (exclusive)
          {
            std::unique_lock lock(stripe);
            fn(abs, done, chunk);
          }
        else
          {
            std::shared_lock lock(stripe);
            fn(abs, done, chunk);
          }
        done += chunk;
      }
  }

  void PhysMem::read(uint64_t addr, std::span<uint8_t> out) const
  {
    for_each_page(addr, out.size(), false, [&](uint64_t abs, uint64_t done, uint64_t chunk) {
      std::memcpy(out.data() + done, storage_->bytes.data() + abs, chunk);
    });
  }

  void PhysMem::write(uint64_t addr, std::span<const uint8_t> in)
  {
    for_each_page(addr, in.size(), true, [&](uint64_t abs, uint64_t done, uint64_t chunk) {
      std::memcpy(storage_->bytes.data() + abs, in.data() + done, chunk);
    });
  }

  uint64_t PhysMem::read_u64(uint64_t addr) const
  {
    uint64_t v = 0;
    read(addr, {reinterpret_cast<uint8_t*>(&v), sizeof v});
    return v;
  }

  void PhysMem::write_u64(uint64_t addr, uint64_t value)
  {
    write(addr, {reinterpret_cast<const uint8_t*>(&value), sizeof value});
  }

  uint32_t PhysMem::read_u32(uint64_t addr) const
  {
    uint32_t v = 0;
    read(addr, {reinterpret_cast<uint8_t*>(&v), sizeof v});
    return v;
  }

  void PhysMem::write_u32(uint64_t addr, uint32_t value)
  {
    write(addr, {reinterpret_cast<const uint8_t*>(&value), sizeof value});
  }

  void PhysMem::zero_frame(uint32_t pfn)
  {
    static const std::array<uint8_t, kPageSize> zeros{};
    write(uint64_t(pfn) * kPageSize, zeros);
  }

  std::string PhysMem::hex_dump(uint64_t addr, size_t len) const
  {
    std::vector<uint8_t> bytes(len);
    read(addr, bytes);
    std::ostringstream os;
    char buf[8];
    for (size_t i = 0; i < len; ++i)
      {
        if (i % 16 == 0)
          os << (i ? "\n" : "") << hex(addr + i) << ":";
        std::snprintf(buf, sizeof buf, " %02x", bytes[i]);
        os << buf;
      }
    return os.str();
  }

  // ------------------------------------------------------------ page tables

  std::string_view table_kind_name(TableKind kind)
  {
    switch (kind)
      {
      case TableKind::guest: return "guest";
      case TableKind::shadow: return "shadow";
      case TableKind::tdp: return "tdp";
      case TableKind::host: return "host";
      case TableKind::hybrid: return "hybrid";
      }
    return "?";
  }

  namespace
  {
    constexpr uint64_t kPresentBit = 1u << 0;
    constexpr uint64_t kWritableBit = 1u << 1;
    constexpr uint64_t kTrapBit = 1u << 9;
    constexpr uint64_t kPfnMask = 0xffff'ffffull << 12;

    uint64_t entry_address(uint32_t table_pfn, unsigned index)
    { return uint64_t(table_pfn) * kPageSize + uint64_t(index) * kEntryBytes; }
  }

  uint64_t PageTableEntry::encode() const
  {
    switch (state)
      {
      case EntryState::not_present: return 0;
      case EntryState::trapping: return kTrapBit;
      case EntryState::present:
        return kPresentBit | (writable ? kWritableBit : 0) | (uint64_t(target_pfn) << 12);
      }
    return 0;
  }

  PageTableEntry PageTableEntry::decode(uint64_t raw)
  {
    if (raw & kTrapBit)
      return trapping();
    if (raw & kPresentBit)
      return present(uint32_t((raw & kPfnMask) >> 12), (raw & kWritableBit) != 0);
    return {};
  }

  PageTableEntry read_entry(const PhysMem& mem, uint32_t table_pfn, unsigned index)
  {
    return PageTableEntry::decode(mem.read_u64(entry_address(table_pfn, index)));
  }

  void write_entry(PhysMem& mem, TableKind kind, uint32_t table_pfn, unsigned index,
                   PageTableEntry entry)
  {
    if (entry.state == EntryState::trapping && kind != TableKind::shadow && kind != TableKind::hybrid)
      raise(Errc::internal, "trapping entry in a " + std::string(table_kind_name(kind)) + " table");
    mem.write_u64(entry_address(table_pfn, index), entry.encode());
  }

  WalkResult walk(const PhysMem& mem, uint32_t root_pfn, uint32_t va)
  {
    const auto idx = TableIndex::of(va);
    uint32_t table = root_pfn;
    for (unsigned level = 1; level <= kLevels; ++level)
      {
        const auto e = read_entry(mem, table, idx.at(level));
        if (e.state == EntryState::trapping)
          return {WalkStatus::trap, level, 0};
        if (e.state == EntryState::not_present)
          return {WalkStatus::fault, level, 0};
        table = e.target_pfn;
      }
    return {WalkStatus::ok, 0, (table << kPageShift) | idx.offset};
  }

  uint32_t walk_or_throw(const PhysMem& mem, uint32_t root_pfn, uint32_t va)
  {
    const auto r = walk(mem, root_pfn, va);
    if (r.status == WalkStatus::fault)
      throw PageFault(va, r.level);
    if (r.status == WalkStatus::trap)
      throw TrapExit(va, r.level);
    return r.address;
  }

  MapOutcome map_leaf(PhysMem& mem, const PageTableRoot& root, uint32_t va, PageTableEntry leaf,
                      const NodeAllocator& alloc, bool replace)
  {
    MapOutcome out;
    const auto idx = TableIndex::of(va);
    uint32_t table = root.root_pfn;
    for (unsigned level = 1; level < kLevels; ++level)
      {
        auto e = read_entry(mem, table, idx.at(level));
        if (e.state != EntryState::present)
          {
            const uint32_t node = alloc();
            e = PageTableEntry::present(node);
            write_entry(mem, root.kind, table, idx.at(level), e);
            ++out.nodes_created;
            if (level == 1)
              out.top_level_changed = true;
          }
        table = e.target_pfn;
      }
    const auto current = read_entry(mem, table, idx.leaf);
    if (current.state == EntryState::present && !replace)
      raise(Errc::already_mapped, hex(va));
    write_entry(mem, root.kind, table, idx.leaf, leaf);
    return out;
  }

  std::optional<PageTableEntry> leaf_entry(const PhysMem& mem, const PageTableRoot& root, uint32_t va)
  {
    const auto idx = TableIndex::of(va);
    uint32_t table = root.root_pfn;
    for (unsigned level = 1; level < kLevels; ++level)
      {
        const auto e = read_entry(mem, table, idx.at(level));
        if (e.state != EntryState::present)
          return std::nullopt;
        table = e.target_pfn;
      }
    return read_entry(mem, table, idx.leaf);
  }

  Gpa walk_guest(Gva gva, const PageTableRoot& root, const PhysMem& guest_mem)
  {
    if (root.kind != TableKind::guest)
      raise(Errc::internal, "walk_guest on a " + std::string(table_kind_name(root.kind)) + " table");
    const auto r = walk(guest_mem, root.root_pfn, gva.value);
    if (r.status != WalkStatus::ok)
      throw PageFault(gva.value, r.level);
    return Gpa(r.address);
  }

  PageTableRoot merge_top_level(PhysMem& host_mem, const PageTableRoot& shadow_root,
                                const PageTableRoot& host_root, uint32_t dest_pfn)
  {
    if (shadow_root.kind != TableKind::shadow || host_root.kind != TableKind::host)
      raise(Errc::internal, "hybrid table needs a shadow root and a host root");
    for (unsigned i = 0; i < kKernelTopIndex; ++i)
      write_entry(host_mem, TableKind::hybrid, dest_pfn, i, read_entry(host_mem, shadow_root.root_pfn, i));
    write_entry(host_mem, TableKind::hybrid, dest_pfn, kKernelTopIndex,
                read_entry(host_mem, host_root.root_pfn, kKernelTopIndex));
    return {TableKind::hybrid, dest_pfn, shadow_root.owner};
  }

  Hpa resolve_hybrid(uint32_t va, const PageTableRoot& root, const PhysMem& host_mem)
  {
    if (root.kind != TableKind::hybrid)
      raise(Errc::internal, "resolve_hybrid on a non-hybrid root");
    return Hpa(walk_or_throw(host_mem, root.root_pfn, va));
  }

  // --------------------------------------------------------- FrameAllocator

  FrameAllocator::FrameAllocator(uint32_t first, uint32_t count)
    : first_(first), used_(count, false), free_count_(count)
  {
  }

  std::optional<uint32_t> FrameAllocator::allocate()
  {
    std::lock_guard lock(mu_);
    for (size_t i = used_.size(); i-- > 0;)
      if (!used_[i])
        {
          used_[i] = true;
          --free_count_;
          return first_ + uint32_t(i);
        }
    return std::nullopt;
  }

  std::optional<uint32_t> FrameAllocator::allocate_contiguous(uint32_t count)
  {
    std::lock_guard lock(mu_);
    uint32_t run = 0;
    for (size_t i = 0; i < used_.size(); ++i)
      {
        run = used_[i] ? 0 : run + 1;
        if (run == count)
          {
            size_t start = i + 1 - count;
            for (size_t j = start; j <= i; ++j)
              used_[j] = true;
            free_count_ -= count;
            return first_ + uint32_t(start);
          }
      }
    return std::nullopt;
  }

  void FrameAllocator::release(uint32_t pfn)
  {
    std::lock_guard lock(mu_);
    if (pfn < first_ || pfn - first_ >= used_.size() || !used_[pfn - first_])
      raise(Errc::internal, "release of unowned frame " + std::to_string(pfn));
    used_[pfn - first_] = false;
    ++free_count_;
  }

  uint32_t FrameAllocator::available() const
  {
    std::lock_guard lock(mu_);
    return free_count_;
  }

  // ------------------------------------------------------- ReservedPagePool

  void ReservedPagePool::add_gpa_pages(uint32_t first_pfn, uint32_t count)
  {
    std::lock_guard lock(mu_);
    reserved_first_ = first_pfn;
    reserved_count_ = count;
    for (uint32_t i = 0; i < count; ++i)
      free_gpa_pages_.insert(first_pfn + i);
  }

  void ReservedPagePool::donate_pt_pages(std::span<const uint32_t> pfns)
  {
    std::lock_guard lock(mu_);
    for (auto pfn : pfns)
      {
        if (pfn >= reserved_first_ && pfn < reserved_first_ + reserved_count_)
          raise(Errc::internal, "donated page overlaps the reserved range");
        if (handed_out_.count(pfn) || !free_guest_pt_pages_.insert(pfn).second)
          raise(Errc::internal, "page donated twice");
      }
  }

  uint32_t ReservedPagePool::take_gpa_page()
  {
    std::lock_guard lock(mu_);
    if (free_gpa_pages_.empty())
      raise(Errc::pool_exhausted, "no reserved guest physical pages left");
    const uint32_t pfn = *free_gpa_pages_.begin();
    free_gpa_pages_.erase(free_gpa_pages_.begin());
    handed_out_.insert(pfn);
    return pfn;
  }

  uint32_t ReservedPagePool::take_pt_page()
  {
    std::lock_guard lock(mu_);
    if (free_guest_pt_pages_.empty())
      raise(Errc::pool_exhausted, "no guest page-table pages left");
    const uint32_t pfn = *free_guest_pt_pages_.begin();
    free_guest_pt_pages_.erase(free_guest_pt_pages_.begin());
    handed_out_.insert(pfn);
    return pfn;
  }

  size_t ReservedPagePool::gpa_pages_left() const
  {
    std::lock_guard lock(mu_);
    return free_gpa_pages_.size();
  }

  size_t ReservedPagePool::pt_pages_left() const
  {
    std::lock_guard lock(mu_);
    return free_guest_pt_pages_.size();
  }

  bool ReservedPagePool::owns_gpa_page(uint32_t pfn) const
  {
    std::lock_guard lock(mu_);
    return pfn >= reserved_first_ && pfn < reserved_first_ + reserved_count_;
  }

  // --------------------------------------------------------------- VmMemory

  std::string_view mem_mode_name(MemMode mode)
  {
    return mode == MemMode::shadow ? "shadow" : "tdp";
  }

  VmMemory::VmMemory(Hypervisor& hv, GuestId guest, const VmConfig& config, uint32_t slot_first_frame)
    : hv_(hv), guest_(guest), config_(config),
      slot_base_(Hpa::from_page(slot_first_frame)),
      guest_mem_(hv.host_memory().slice(uint64_t(slot_first_frame) * kPageSize, config.memory_size))
  {
    const uint32_t frames = config.memory_size / kPageSize;
    if (config.reserved_gpa_pages >= frames)
      raise(Errc::invalid_config, "reserved pool larger than guest memory");
    pool_.add_gpa_pages(frames - config.reserved_gpa_pages, config.reserved_gpa_pages);

    if (config.mode == MemMode::tdp)
      {
        PageTableRoot root{TableKind::tdp, hv.allocate_frame(), ProcessId{}};
        auto alloc = [&] { return hv_.allocate_frame(); };
        for (uint32_t pfn = 0; pfn < frames; ++pfn)
          map_leaf(hv.host_memory(), root, pfn << kPageShift,
                   PageTableEntry::present(slot_base_.page() + pfn), alloc);
        tdp_root_ = root;
      }
  }

  uint32_t VmMemory::guest_os_frames() const
  {
    return config_.memory_size / kPageSize - config_.reserved_gpa_pages;
  }

  Hpa VmMemory::gpa_to_hpa(Gpa gpa) const
  {
    if (gpa.value >= config_.memory_size)
      raise(Errc::out_of_range, "gpa " + hex(gpa.value) + " beyond guest memory slot");
    {
      std::lock_guard lock(mu_);
      if (auto it = remaps_.find(gpa.page()); it != remaps_.end())
        return Hpa::from_page(it->second, gpa.offset());
    }
    return slot_base_ + gpa.value;
  }

  Hpa VmMemory::gpa_to_hpa_via_tdp(Gpa gpa) const
  {
    if (!tdp_root_)
      raise(Errc::internal, "guest does not use TDP");
    if (gpa.value >= config_.memory_size)
      raise(Errc::out_of_range, "gpa " + hex(gpa.value) + " beyond guest memory slot");
    return Hpa(walk_or_throw(hv_.host_memory(), tdp_root_->root_pfn, gpa.value));
  }

  uint32_t VmMemory::alloc_host_table_frame()
  {
    return hv_.allocate_frame();
  }

  PageTableRoot VmMemory::register_process(uint32_t root_gpa_pfn)
  {
    std::lock_guard lock(mu_);
    const ProcessId pid(root_gpa_pfn);
    if (config_.mode == MemMode::shadow && !shadow_roots_.count(pid))
      {
        shadow_roots_[pid] = {TableKind::shadow, alloc_host_table_frame(), pid};
        shadow_generation_[pid] = 0;
      }
    return {TableKind::guest, root_gpa_pfn, pid};
  }

  PageTableRoot VmMemory::shadow_root(ProcessId process) const
  {
    std::lock_guard lock(mu_);
    auto it = shadow_roots_.find(process);
    if (it == shadow_roots_.end())
      raise(Errc::unknown_process, "no shadow table for process " + std::to_string(process.value));
    return it->second;
  }

  uint64_t VmMemory::shadow_top_generation(ProcessId process) const
  {
    std::lock_guard lock(mu_);
    auto it = shadow_generation_.find(process);
    return it == shadow_generation_.end() ? 0 : it->second;
  }

  MapOutcome VmMemory::map_shadow_locked(ProcessId process, uint32_t va, PageTableEntry leaf, bool replace)
  {
    auto it = shadow_roots_.find(process);
    if (it == shadow_roots_.end())
      raise(Errc::unknown_process, "no shadow table for process " + std::to_string(process.value));
    auto out = map_leaf(hv_.host_memory(), it->second, va, leaf,
                        [this] { return alloc_host_table_frame(); }, replace);
    if (out.top_level_changed)
      ++shadow_generation_[process];
    return out;
  }

  void VmMemory::guest_map(const PageTableRoot& guest_root, Gva gva, Gpa gpa, const NodeAllocator& alloc)
  {
    std::lock_guard lock(mu_);
    map_leaf(guest_mem_, guest_root, gva.page_base().value, PageTableEntry::present(gpa.page()), alloc);
    if (config_.mode == MemMode::shadow)
      map_shadow_locked(guest_root.owner, gva.page_base().value, PageTableEntry::trapping(), true);
  }

  void VmMemory::fixup_trap(ProcessId process, uint32_t va)
  {
    const PageTableRoot guest_root{TableKind::guest, process.value, process};
    const Gpa gpa = walk_guest(Gva(va), guest_root, guest_mem_);
    const Hpa hpa = gpa_to_hpa(gpa);
    std::lock_guard lock(mu_);
    map_shadow_locked(process, va & ~(kPageSize - 1), PageTableEntry::present(hpa.page()), true);
  }

  void VmMemory::remap_gpa(Gpa gpa, Hpa hpa)
  {
    std::lock_guard lock(mu_);
    remaps_[gpa.page()] = hpa.page();
    if (tdp_root_)
      map_leaf(hv_.host_memory(), *tdp_root_, gpa.page_base().value, PageTableEntry::present(hpa.page()),
               [this] { return alloc_host_table_frame(); }, true);
  }

  // ------------------------------------------------------------- Hypervisor

  Hypervisor::Hypervisor(const HostConfig& config)
    : config_(config), host_mem_(config.memory_size),
      frames_(config.slot_area_first_frame, config.memory_size / kPageSize - config.slot_area_first_frame)
  {
    host_root_ = {TableKind::host, allocate_frame(), ProcessId{}};
    kernel_mid_pfn_ = allocate_frame();
    write_entry(host_mem_, TableKind::host, host_root_.root_pfn, kKernelTopIndex,
                PageTableEntry::present(kernel_mid_pfn_));
    for (uint32_t i = 0; i < config.kernel_pages; ++i)
      kernel_map(Hva(kKernelBase + i * kPageSize), Hpa::from_page(allocate_frame()));
  }

  uint32_t Hypervisor::allocate_frame()
  {
    auto pfn = frames_.allocate();
    if (!pfn)
      raise(Errc::pool_exhausted, "host memory exhausted");
    host_mem_.zero_frame(*pfn);
    return *pfn;
  }

  std::vector<uint32_t> Hypervisor::allocate_frames(uint32_t count)
  {
    std::vector<uint32_t> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i)
      out.push_back(allocate_frame());
    return out;
  }

  VmMemory& Hypervisor::create_vm(GuestId guest, const VmConfig& config)
  {
    std::lock_guard lock(mu_);
    if (vms_.count(guest))
      raise(Errc::invalid_config, "guest " + std::to_string(guest.value) + " already exists");
    if (config.memory_size == 0 || config.memory_size % kPageSize != 0)
      raise(Errc::invalid_config, "guest memory must be a multiple of 4096");
    auto first = frames_.allocate_contiguous(config.memory_size / kPageSize);
    if (!first)
      raise(Errc::pool_exhausted, "no host memory for guest slot");
    auto vm = std::make_unique<VmMemory>(*this, guest, config, *first);
    auto& ref = *vm;
    vms_.emplace(guest, std::move(vm));
    return ref;
  }

  VmMemory& Hypervisor::vm(GuestId guest)
  {
    std::lock_guard lock(mu_);
    auto it = vms_.find(guest);
    if (it == vms_.end())
      raise(Errc::not_found, "guest " + std::to_string(guest.value));
    return *it->second;
  }

  bool Hypervisor::has_vm(GuestId guest) const
  {
    return vms_.count(guest) != 0;
  }

  PageTableRoot Hypervisor::create_host_process(ProcessId owner)
  {
    PageTableRoot root{TableKind::host, allocate_frame(), owner};
    write_entry(host_mem_, TableKind::host, root.root_pfn, kKernelTopIndex,
                PageTableEntry::present(kernel_mid_pfn_));
    return root;
  }

  void Hypervisor::host_map(const PageTableRoot& root, Hva hva, Hpa hpa)
  {
    std::lock_guard lock(mu_);
    auto out = map_leaf(host_mem_, root, hva.page_base().value, PageTableEntry::present(hpa.page()),
                        [this] { return allocate_frame(); });
    if (out.top_level_changed && root == host_root_)
      ++host_top_generation_;
  }

  void Hypervisor::kernel_map(Hva hva, Hpa hpa)
  {
    if (hva.value < kKernelBase)
      raise(Errc::bad_address, "kernel mapping below the kernel split");
    map_leaf(host_mem_, host_root_, hva.page_base().value, PageTableEntry::present(hpa.page()),
             [this] { return allocate_frame(); });
  }

  // ------------------------------------------------------- TranslationCache

  std::optional<uint32_t> TranslationCache::lookup(uint32_t gva_page)
  {
    for (const auto& e : entries_)
      if (e.gva_page == gva_page)
        {
          ++hits_;
          return e.hpa_page;
        }
    ++misses_;
    return std::nullopt;
  }

  void TranslationCache::insert(uint32_t gva_page, uint32_t hpa_page)
  {
    for (const auto& e : entries_)
      if (e.gva_page == gva_page)
        return;
    if (entries_.size() == kCapacity)
      entries_.pop_front();
    entries_.push_back({gva_page, hpa_page});
  }

  void TranslationCache::flush(uint32_t gva_page)
  {
    std::erase_if(entries_, [&](const Entry& e) { return e.gva_page == gva_page; });
  }

  void TranslationCache::clear()
  {
    entries_.clear();
  }

  double TranslationCache::hit_rate() const
  {
    const auto total = hits_ + misses_;
    return total ? double(hits_) / double(total) : 0.0;
  }

  // ----------------------------------------------------- GuestProcessMemory

  GuestProcessMemory::GuestProcessMemory(VmMemory& vm, const PageTableRoot& guest_root)
    : vm_(vm), guest_root_(guest_root)
  {
    if (guest_root.kind != TableKind::guest)
      raise(Errc::internal, "process memory needs a guest page-table root");
  }

  Hpa GuestProcessMemory::translate_uncached(Gva gva) const
  {
    return vm_.gpa_to_hpa(walk_guest(gva, guest_root_, vm_.guest_memory()));
  }

  Hpa GuestProcessMemory::translate(Gva gva)
  {
    std::lock_guard lock(mu_);
    ++translate_calls_;
    if (cache_enabled_)
      if (auto hit = cache_.lookup(gva.page()))
        return Hpa::from_page(*hit, gva.offset());
    const Hpa hpa = translate_uncached(gva);
    if (cache_enabled_)
      cache_.insert(gva.page(), hpa.page());
    return hpa;
  }

  template <typename Resolve>
  CopyResult GuestProcessMemory::copy_paged(CopyDirection direction, Gva gva, std::span<uint8_t> host_buf,
                                            Resolve&& resolve)
  {
    CopyResult result;
    auto& host = vm_.hypervisor().host_memory();
    while (result.bytes_copied < host_buf.size())
      {
        const Gva va = gva + uint32_t(result.bytes_copied);
        const size_t chunk = std::min<size_t>(host_buf.size() - result.bytes_copied, kPageSize - va.offset());
        Hpa hpa;
        try
          {
            hpa = resolve(va);
          }
        catch (const PageFault& pf)
          {
            result.fault = pf;
            return result;
          }
        auto part = host_buf.subspan(result.bytes_copied, chunk);
        if (direction == CopyDirection::to_guest)
          host.write(hpa.value, part);
        else
          host.read(hpa.value, part);
        result.bytes_copied += chunk;
      }
    return result;
  }

  CopyResult GuestProcessMemory::copy_user_buffer(CopyDirection direction, Gva gva, std::span<uint8_t> host_buf)
  {
    return copy_paged(direction, gva, host_buf, [this](Gva va) { return translate(va); });
  }

  void GuestProcessMemory::map_page_into_guest(Gva gva, Hpa hpa)
  {
    if (!gva.page_aligned())
      raise(Errc::bad_address, "map target " + hex(gva.value) + " not page aligned");
    {
      std::lock_guard lock(vm_.mu_);
      auto& gmem = vm_.guest_mem_;
      const auto idx = TableIndex::of(gva.value);

      unsigned nodes_needed = 0;
      const auto top = read_entry(gmem, guest_root_.root_pfn, idx.top);
      if (top.state != EntryState::present)
        nodes_needed = 2;
      else if (read_entry(gmem, top.target_pfn, idx.mid).state != EntryState::present)
        nodes_needed = 1;
      else if (read_entry(gmem, read_entry(gmem, top.target_pfn, idx.mid).target_pfn, idx.leaf).state
               == EntryState::present)
        raise(Errc::already_mapped, hex(gva.value));

      if (vm_.pool_.pt_pages_left() < nodes_needed)
        raise(Errc::pool_exhausted, "no guest page-table pages left");
      const uint32_t gpa_pfn = vm_.pool_.take_gpa_page();

      map_leaf(gmem, guest_root_, gva.value, PageTableEntry::present(gpa_pfn), [&] {
        const uint32_t pfn = vm_.pool_.take_pt_page();
        gmem.zero_frame(pfn);
        return pfn;
      });
      vm_.remaps_[gpa_pfn] = hpa.page();

      if (vm_.mode() == MemMode::shadow)
        vm_.map_shadow_locked(process(), gva.value, PageTableEntry::present(hpa.page()), true);
      else
        map_leaf(vm_.hv_.host_memory(), *vm_.tdp_root_, gpa_pfn << kPageShift,
                 PageTableEntry::present(hpa.page()), [this] { return vm_.alloc_host_table_frame(); }, true);
    }
    std::lock_guard lock(mu_);
    cache_.flush(gva.page());
  }

  const PageTableRoot& GuestProcessMemory::build_hybrid_top_level()
  {
    if (vm_.mode() == MemMode::tdp)
      raise(Errc::tdp_unsupported, "hardware hybrid address space cannot be used with TDP");
    std::lock_guard lock(mu_);
    auto& hv = vm_.hypervisor();
    const auto shadow_gen = vm_.shadow_top_generation(process());
    const auto host_gen = hv.host_top_generation();
    if (hybrid_ && shadow_gen == hybrid_shadow_gen_ && host_gen == hybrid_host_gen_)
      return *hybrid_;
    const uint32_t dest = hybrid_ ? hybrid_->root_pfn : hv.allocate_frame();
    hybrid_ = merge_top_level(hv.host_memory(), vm_.shadow_root(process()), hv.host_root(), dest);
    hybrid_shadow_gen_ = shadow_gen;
    hybrid_host_gen_ = host_gen;
    ++hybrid_builds_;
    return *hybrid_;
  }

  Hpa GuestProcessMemory::resolve_hardware(uint32_t va)
  {
    auto& host = vm_.hypervisor().host_memory();
    auto root = build_hybrid_top_level();
    {
      std::lock_guard lock(mu_);
      ++hardware_walks_;
    }
    try
      {
        return resolve_hybrid(va, root, host);
      }
    catch (const TrapExit&)
      {
      }
    vm_.fixup_trap(process(), va);
    root = build_hybrid_top_level();
    {
      std::lock_guard lock(mu_);
      ++trap_fixups_;
      ++hardware_walks_;
    }
    try
      {
        return resolve_hybrid(va, root, host);
      }
    catch (const TrapExit& again)
      {
        raise(Errc::internal, std::string("trap repeated after fixup: ") + again.what());
      }
  }

  CopyResult GuestProcessMemory::copy_hardware(CopyDirection direction, Gva gva, std::span<uint8_t> host_buf)
  {
    return copy_paged(direction, gva, host_buf, [this](Gva va) { return resolve_hardware(va.value); });
  }

} // namespace devirt::memvirt
