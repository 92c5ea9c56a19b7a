#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>

namespace ctun {

/// Process-wide accounting of tensor payload bytes.
///
/// Every Buffer registers its payload on construction and releases it on
/// destruction, so live_bytes() is the sum of all payloads currently alive and
/// peak_bytes() the running maximum since the last reset_peak().
class AllocationMeter {
 public:
  static AllocationMeter& global();

  void on_alloc(std::size_t bytes);
  void on_free(std::size_t bytes);

  std::size_t live_bytes() const { return live_.load(std::memory_order_relaxed); }
  std::size_t peak_bytes() const { return peak_.load(std::memory_order_relaxed); }

  // Sets peak to the current live value.
  void reset_peak();

 private:
  std::atomic<std::size_t> live_{0};
  std::atomic<std::size_t> peak_{0};
};

/// Global counter of multiply-accumulates performed by convolution forwards.
class MacCounter {
 public:
  static MacCounter& global();

  void add(std::uint64_t macs) { macs_.fetch_add(macs, std::memory_order_relaxed); }
  std::uint64_t value() const { return macs_.load(std::memory_order_relaxed); }
  void reset() { macs_.store(0, std::memory_order_relaxed); }

 private:
  std::atomic<std::uint64_t> macs_{0};
};

}  // namespace ctun
