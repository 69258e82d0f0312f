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

// Helpers shared by the unit and acceptance suites. The oracles here read
// raw table memory and must not call into the walker they check.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <vector>

#include "devirt/memvirt.hpp"

namespace devirt::testing
{

  /// Outcome of an oracle lookup: either an address or a failing level,
  /// plus whether the failing entry was a trapping one.
  struct OracleResult
  {
    bool ok = false;
    unsigned level = 0;
    bool trap = false;
    uint32_t address = 0;
  };

  /// Enumerates every entry reachable from a root by linear scan and
  /// answers lookups from the resulting tables.
  class TableScanOracle
  {
  public:
    TableScanOracle(const memvirt::PhysMem& mem, uint32_t root_pfn)
    {
      constexpr uint64_t kPresent = 1, kTrap = 1u << 9;
      auto raw = [&](uint32_t table, uint32_t i) { return mem.read_u64(uint64_t(table) * 4096 + i * 8); };
      for (uint32_t t = 0; t < 4; ++t)
        {
          const uint64_t e1 = raw(root_pfn, t);
          if (e1 & kTrap) { trap_[1].insert(t); continue; }
          if (!(e1 & kPresent)) continue;
          present_[1].insert(t);
          const uint32_t mid_table = uint32_t(e1 >> 12);
          for (uint32_t m = 0; m < 512; ++m)
            {
              const uint64_t e2 = raw(mid_table, m);
              const uint32_t mid_key = t * 512 + m;
              if (e2 & kTrap) { trap_[2].insert(mid_key); continue; }
              if (!(e2 & kPresent)) continue;
              present_[2].insert(mid_key);
              const uint32_t leaf_table = uint32_t(e2 >> 12);
              for (uint32_t l = 0; l < 512; ++l)
                {
                  const uint64_t e3 = raw(leaf_table, l);
                  const uint32_t page = mid_key * 512 + l;
                  if (e3 & kTrap) { trap_[3].insert(page); continue; }
                  if (e3 & kPresent)
                    pages_[page] = uint32_t(e3 >> 12);
                }
            }
        }
    }

    OracleResult lookup(uint32_t va) const
    {
      const uint32_t quarter = va / (1u << 30);
      const uint32_t two_meg = va / (1u << 21);
      const uint32_t page = va / 4096;
      if (trap_[1].count(quarter)) return {false, 1, true, 0};
      if (!present_[1].count(quarter)) return {false, 1, false, 0};
      if (trap_[2].count(two_meg)) return {false, 2, true, 0};
      if (!present_[2].count(two_meg)) return {false, 2, false, 0};
      if (trap_[3].count(page)) return {false, 3, true, 0};
      auto it = pages_.find(page);
      if (it == pages_.end()) return {false, 3, false, 0};
      return {true, 0, false, it->second * 4096 + va % 4096};
    }

    size_t mapped_pages() const { return pages_.size(); }

  private:
    std::set<uint32_t> present_[4];
    std::set<uint32_t> trap_[4];
    std::map<uint32_t, uint32_t> pages_;
  };

  /// Minimal guest OS memory manager over a VmMemory, for memvirt tests.
  struct TestGuestOs
  {
    explicit TestGuestOs(memvirt::VmMemory& vm_)
      : vm(vm_), frames(16, vm_.guest_os_frames() - 16)
    {
    }

    uint32_t alloc_frame()
    {
      const uint32_t pfn = *frames.allocate();
      vm.guest_memory().zero_frame(pfn);
      return pfn;
    }

    memvirt::PageTableRoot new_process()
    {
      return vm.register_process(alloc_frame());
    }

    void map(const memvirt::PageTableRoot& root, uint32_t gva, uint32_t gpa_pfn)
    {
      vm.guest_map(root, Gva(gva), Gpa::from_page(gpa_pfn), [this] { return alloc_frame(); });
    }

    /// Maps a fresh data frame and returns its frame number.
    uint32_t map_fresh(const memvirt::PageTableRoot& root, uint32_t gva)
    {
      const uint32_t pfn = alloc_frame();
      map(root, gva, pfn);
      return pfn;
    }

    memvirt::VmMemory& vm;
    memvirt::FrameAllocator frames;
  };

  /// Random page-table population: mappings cluster around a few regions so
  /// that all three fault levels occur.
  inline std::vector<uint32_t> random_user_pages(std::mt19937_64& rng, size_t count, uint32_t limit_page)
  {
    std::uniform_int_distribution<uint32_t> region(0, 7);
    std::uniform_int_distribution<uint32_t> spread(0, 1500);
    std::set<uint32_t> pages;
    while (pages.size() < count)
      {
        const uint32_t base = region(rng) * (limit_page / 8);
        pages.insert(std::min(limit_page - 1, base + spread(rng)));
      }
    return {pages.begin(), pages.end()};
  }

} // namespace devirt::testing
