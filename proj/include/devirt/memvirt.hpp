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
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "devirt/common.hpp"

namespace devirt::memvirt
{

  /// Flat simulated physical memory. A slice aliases a page-aligned
  /// window of its parent, which is how a guest's physical memory lives
  /// inside host physical memory.
  class PhysMem
  {
  public:
    explicit PhysMem(uint64_t size_bytes);

    PhysMem slice(uint64_t base, uint64_t size) const;

    uint64_t size_bytes() const { return size_; }
    uint32_t frames() const { return static_cast<uint32_t>(size_ / kPageSize); }

    /// Offset of this view inside the backing storage.
    uint64_t base() const { return base_; }

    void read(uint64_t addr, std::span<uint8_t> out) const;
    void write(uint64_t addr, std::span<const uint8_t> in);

    uint64_t read_u64(uint64_t addr) const;
    void write_u64(uint64_t addr, uint64_t value);
    uint32_t read_u32(uint64_t addr) const;
    void write_u32(uint64_t addr, uint32_t value);

    void zero_frame(uint32_t pfn);

    std::string hex_dump(uint64_t addr, size_t len) const;

  private:
    static constexpr size_t kStripes = 64;

    struct Storage
    {
      explicit Storage(uint64_t size) : bytes(size, 0) {}
      std::vector<uint8_t> bytes;
      mutable std::array<std::shared_mutex, kStripes> stripes;
    };

    PhysMem(std::shared_ptr<Storage> storage, uint64_t base, uint64_t size);

    void check(uint64_t addr, uint64_t len) const;
    template <typename Fn> void for_each_page(uint64_t addr, uint64_t len, bool exclusive, Fn&& fn) const;

    std::shared_ptr<Storage> storage_;
    uint64_t base_ = 0;
    uint64_t size_ = 0;
  };

  // Page-table layout: 32-bit virtual addresses split 2/9/9/12.
  inline constexpr unsigned kLevels = 3;
  inline constexpr unsigned kTopEntries = 4;
  inline constexpr unsigned kNodeEntries = 512;
  inline constexpr unsigned kEntryBytes = 8;
  inline constexpr uint32_t kKernelBase = 0xC000'0000;
  inline constexpr unsigned kKernelTopIndex = 3;

  enum class TableKind : uint8_t { guest, shadow, tdp, host, hybrid };

  std::string_view table_kind_name(TableKind kind);

  struct PageTableRoot
  {
    TableKind kind = TableKind::guest;
    uint32_t root_pfn = 0;
    ProcessId owner{};

    uint32_t id() const { return root_pfn; }
    bool operator==(const PageTableRoot&) const = default;
  };

  enum class EntryState : uint8_t { not_present, present, trapping };

  struct PageTableEntry
  {
    EntryState state = EntryState::not_present;
    uint32_t target_pfn = 0;
    bool writable = false;

    static PageTableEntry present(uint32_t pfn, bool writable = true)
    { return {EntryState::present, pfn, writable}; }
    static PageTableEntry trapping() { return {EntryState::trapping, 0, false}; }

    uint64_t encode() const;
    static PageTableEntry decode(uint64_t raw);

    bool operator==(const PageTableEntry&) const = default;
  };

  struct TableIndex
  {
    unsigned top = 0;
    unsigned mid = 0;
    unsigned leaf = 0;
    uint32_t offset = 0;

    static constexpr TableIndex of(uint32_t va)
    { return {va >> 30, (va >> 21) & 0x1ff, (va >> 12) & 0x1ff, va & 0xfff}; }

    unsigned at(unsigned level) const
    { return level == 1 ? top : level == 2 ? mid : leaf; }
  };

  enum class WalkStatus : uint8_t { ok, fault, trap };

  struct WalkResult
  {
    WalkStatus status = WalkStatus::fault;
    unsigned level = 0; ///< failing level, 0 on success
    uint32_t address = 0; ///< translated address on success

    bool operator==(const WalkResult&) const = default;
  };

  PageTableEntry read_entry(const PhysMem& mem, uint32_t table_pfn, unsigned index);
  void write_entry(PhysMem& mem, TableKind kind, uint32_t table_pfn, unsigned index,
                   PageTableEntry entry);

  /// Non-throwing three-level walk.
  WalkResult walk(const PhysMem& mem, uint32_t root_pfn, uint32_t va);

  /// Walk that raises PageFault or TrapExit.
  uint32_t walk_or_throw(const PhysMem& mem, uint32_t root_pfn, uint32_t va);

  /// Returns a zeroed frame in the table's memory.
  using NodeAllocator = std::function<uint32_t()>;

  struct MapOutcome
  {
    unsigned nodes_created = 0;
    bool top_level_changed = false;
  };

  /// Installs a leaf for va, creating intermediate nodes as needed.
  /// Raises AlreadyMapped when a present leaf exists and replace is false.
  MapOutcome map_leaf(PhysMem& mem, const PageTableRoot& root, uint32_t va,
                      PageTableEntry leaf, const NodeAllocator& alloc, bool replace = false);

  /// The leaf entry for va, or nullopt when an upper level is missing.
  std::optional<PageTableEntry> leaf_entry(const PhysMem& mem, const PageTableRoot& root,
                                           uint32_t va);

  /// Software walk of a guest page table over guest physical memory.
  Gpa walk_guest(Gva gva, const PageTableRoot& root, const PhysMem& guest_mem);

  /// Copies top-level entries 0-2 from the shadow table and entry 3 from the
  /// host table into the table at dest_pfn.
  PageTableRoot merge_top_level(PhysMem& host_mem, const PageTableRoot& shadow_root,
                                const PageTableRoot& host_root, uint32_t dest_pfn);

  /// Simulated MMU walk over a merged table.
  Hpa resolve_hybrid(uint32_t va, const PageTableRoot& root, const PhysMem& host_mem);

  /// Page frame bitmap allocator. Contiguous runs come from the bottom,
  /// single frames from the top.
  class FrameAllocator
  {
  public:
    FrameAllocator(uint32_t first, uint32_t count);

    std::optional<uint32_t> allocate();
    std::optional<uint32_t> allocate_contiguous(uint32_t count);
    void release(uint32_t pfn);
    uint32_t available() const;

  private:
    mutable std::mutex mu_;
    uint32_t first_;
    std::vector<bool> used_;
    uint32_t free_count_;
  };

  /// Guest physical pages the backend may use without the guest OS.
  class ReservedPagePool
  {
  public:
    void add_gpa_pages(uint32_t first_pfn, uint32_t count);
    void donate_pt_pages(std::span<const uint32_t> pfns);

    uint32_t take_gpa_page();
    uint32_t take_pt_page();

    size_t gpa_pages_left() const;
    size_t pt_pages_left() const;
    bool owns_gpa_page(uint32_t pfn) const;

  private:
    mutable std::mutex mu_;
    std::set<uint32_t> free_gpa_pages_;
    std::set<uint32_t> free_guest_pt_pages_;
    std::set<uint32_t> handed_out_;
    uint32_t reserved_first_ = 0;
    uint32_t reserved_count_ = 0;
  };

  enum class MemMode : uint8_t { shadow, tdp };

  std::string_view mem_mode_name(MemMode mode);

  struct VmConfig
  {
    uint32_t memory_size = 16u << 20;
    MemMode mode = MemMode::shadow;
    uint32_t reserved_gpa_pages = 1024;
  };

  class Hypervisor;

  /// Hypervisor-side view of one guest's memory: the linear memory slot,
  /// its TDP table or per-process shadow tables, and the reserved pool.
  class VmMemory
  {
  public:
    VmMemory(Hypervisor& hv, GuestId guest, const VmConfig& config, uint32_t slot_first_frame);

    GuestId guest() const { return guest_; }
    MemMode mode() const { return config_.mode; }
    uint32_t size_bytes() const { return config_.memory_size; }
    Hpa slot_base() const { return slot_base_; }

    PhysMem& guest_memory() { return guest_mem_; }
    const PhysMem& guest_memory() const { return guest_mem_; }

    /// Frames the guest OS may manage; the rest are hypervisor-reserved.
    uint32_t guest_os_frames() const;

    /// Linear memslot translation plus reserved-page remaps.
    Hpa gpa_to_hpa(Gpa gpa) const;

    /// Walks the TDP table (TDP mode only).
    Hpa gpa_to_hpa_via_tdp(Gpa gpa) const;

    std::optional<PageTableRoot> tdp_root() const { return tdp_root_; }

    /// Called when the guest OS creates an address space; returns the
    /// guest root and sets up the shadow table in shadow mode.
    PageTableRoot register_process(uint32_t root_gpa_pfn);

    PageTableRoot shadow_root(ProcessId process) const;

    /// Guest OS PTE write. In shadow mode the hypervisor marks the
    /// shadow leaf trapping until the next access syncs it.
    void guest_map(const PageTableRoot& guest_root, Gva gva, Gpa gpa, const NodeAllocator& alloc);

    /// Shadow sync on a trapping access.
    void fixup_trap(ProcessId process, uint32_t va);

    /// Redirects a reserved guest physical page to a host page.
    void remap_gpa(Gpa gpa, Hpa hpa);

    ReservedPagePool& pool() { return pool_; }

    /// Bumped whenever a shadow table's top level changes.
    uint64_t shadow_top_generation(ProcessId process) const;

    Hypervisor& hypervisor() { return hv_; }

    std::mutex& table_mutex() const { return mu_; }

  private:
    friend class GuestProcessMemory;

    uint32_t alloc_host_table_frame();
    MapOutcome map_shadow_locked(ProcessId process, uint32_t va, PageTableEntry leaf, bool replace);

    Hypervisor& hv_;
    GuestId guest_;
    VmConfig config_;
    Hpa slot_base_;
    PhysMem guest_mem_;
    std::optional<PageTableRoot> tdp_root_;
    ReservedPagePool pool_;
    std::unordered_map<uint32_t, uint32_t> remaps_;
    std::map<ProcessId, PageTableRoot> shadow_roots_;
    std::map<ProcessId, uint64_t> shadow_generation_;
    mutable std::mutex mu_;
  };

  struct HostConfig
  {
    uint32_t memory_size = 64u << 20;
    uint32_t slot_area_first_frame = 256; ///< first guest slot starts at 1 MiB
    uint32_t kernel_pages = 64;
  };

  /// Owns host physical memory and the host kernel page table.
  class Hypervisor
  {
  public:
    explicit Hypervisor(const HostConfig& config = {});

    PhysMem& host_memory() { return host_mem_; }
    const PhysMem& host_memory() const { return host_mem_; }

    VmMemory& create_vm(GuestId guest, const VmConfig& config);
    VmMemory& vm(GuestId guest);
    bool has_vm(GuestId guest) const;

    /// Page table of the host process the backend workers run in.
    const PageTableRoot& host_root() const { return host_root_; }

    /// A fresh host process table sharing the kernel portion.
    PageTableRoot create_host_process(ProcessId owner);

    void host_map(const PageTableRoot& root, Hva hva, Hpa hpa);
    void kernel_map(Hva hva, Hpa hpa);

    uint64_t host_top_generation() const { return host_top_generation_; }

    uint32_t allocate_frame();
    std::vector<uint32_t> allocate_frames(uint32_t count);

    std::mutex& table_mutex() { return mu_; }

  private:
    HostConfig config_;
    PhysMem host_mem_;
    FrameAllocator frames_;
    PageTableRoot host_root_;
    uint32_t kernel_mid_pfn_ = 0;
    uint64_t host_top_generation_ = 0;
    std::map<GuestId, std::unique_ptr<VmMemory>> vms_;
    std::mutex mu_;
  };

  /// Per-process FIFO translation cache keyed by guest virtual page.
  class TranslationCache
  {
  public:
    static constexpr size_t kCapacity = 10;

    struct Entry
    {
      uint32_t gva_page;
      uint32_t hpa_page;
      bool operator==(const Entry&) const = default;
    };

    std::optional<uint32_t> lookup(uint32_t gva_page);
    void insert(uint32_t gva_page, uint32_t hpa_page);
    void flush(uint32_t gva_page);
    void clear();

    const std::deque<Entry>& entries() const { return entries_; }
    uint64_t hits() const { return hits_; }
    uint64_t misses() const { return misses_; }
    double hit_rate() const;

  private:
    std::deque<Entry> entries_;
    uint64_t hits_ = 0;
    uint64_t misses_ = 0;
  };

  enum class CopyDirection : uint8_t { to_guest, from_guest };

  struct CopyResult
  {
    size_t bytes_copied = 0;
    std::optional<PageFault> fault;

    bool ok() const { return !fault.has_value(); }
  };

  /// Host-side handle on a guest process address space. Implements both
  /// hybrid address space realizations: software (page walks plus the
  /// translation cache) and hardware (a merged top-level table).
  class GuestProcessMemory
  {
  public:
    GuestProcessMemory(VmMemory& vm, const PageTableRoot& guest_root);

    ProcessId process() const { return guest_root_.owner; }
    const PageTableRoot& guest_root() const { return guest_root_; }
    VmMemory& vm() { return vm_; }

    Hpa translate(Gva gva);
    Hpa translate_uncached(Gva gva) const;

    CopyResult copy_user_buffer(CopyDirection direction, Gva gva, std::span<uint8_t> host_buf);

    void map_page_into_guest(Gva gva, Hpa hpa);

    /// Builds or returns the cached merged table. Raises TdpUnsupported.
    const PageTableRoot& build_hybrid_top_level();

    /// Resolution through the merged table; a trapping entry is fixed up
    /// by the hypervisor and retried once.
    Hpa resolve_hardware(uint32_t va);
    CopyResult copy_hardware(CopyDirection direction, Gva gva, std::span<uint8_t> host_buf);

    TranslationCache& cache() { return cache_; }
    void set_cache_enabled(bool enabled) { cache_enabled_ = enabled; }

    uint64_t translate_calls() const { return translate_calls_; }
    uint64_t hardware_walks() const { return hardware_walks_; }
    uint64_t trap_fixups() const { return trap_fixups_; }
    uint64_t hybrid_builds() const { return hybrid_builds_; }

  private:
    template <typename Resolve>
    CopyResult copy_paged(CopyDirection direction, Gva gva, std::span<uint8_t> host_buf,
                          Resolve&& resolve);

    VmMemory& vm_;
    PageTableRoot guest_root_;
    TranslationCache cache_;
    bool cache_enabled_ = true;
    std::optional<PageTableRoot> hybrid_;
    uint64_t hybrid_shadow_gen_ = 0;
    uint64_t hybrid_host_gen_ = 0;
    uint64_t translate_calls_ = 0;
    uint64_t hardware_walks_ = 0;
    uint64_t trap_fixups_ = 0;
    uint64_t hybrid_builds_ = 0;
    std::mutex mu_;
  };

} // namespace devirt::memvirt
