#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <utility>

namespace castle {

// Process-wide multiply-add counter. Matrix kernels report their madds here
// and the bench harness reads deltas around timed regions. The count is
// monotone while work runs; reset() exists for harness bookkeeping only.
class FlopCounter {
 public:
  static FlopCounter& global() {
    static FlopCounter counter;
    return counter;
  }

  void add(std::uint64_t madds) noexcept {
    multiply_adds_.fetch_add(madds, std::memory_order_relaxed);
  }

  std::uint64_t multiply_adds() const noexcept {
    return multiply_adds_.load(std::memory_order_relaxed);
  }

  void reset() noexcept { multiply_adds_.store(0, std::memory_order_relaxed); }

  // Named tallies, filled in by FlopRegion.
  void record_region(const std::string& tag, std::uint64_t madds) {
    std::lock_guard<std::mutex> lock(mutex_);
    regions_[tag] += madds;
  }

  std::map<std::string, std::uint64_t> regions() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return regions_;
  }

  void clear_regions() {
    std::lock_guard<std::mutex> lock(mutex_);
    regions_.clear();
  }

 private:
  FlopCounter() = default;
  std::atomic<std::uint64_t> multiply_adds_{0};
  mutable std::mutex mutex_;
  std::map<std::string, std::uint64_t> regions_;
};

// RAII helper: attributes every madd issued during its lifetime (including
// madds from worker threads) to a named kernel region.
class FlopRegion {
 public:
  explicit FlopRegion(std::string tag)
      : tag_(std::move(tag)), entry_(FlopCounter::global().multiply_adds()) {}

  FlopRegion(const FlopRegion&) = delete;
  FlopRegion& operator=(const FlopRegion&) = delete;

  ~FlopRegion() {
    FlopCounter::global().record_region(
        tag_, FlopCounter::global().multiply_adds() - entry_);
  }

 private:
  std::string tag_;
  std::uint64_t entry_;
};

}  // namespace castle
