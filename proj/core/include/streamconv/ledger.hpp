#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <string>
#include <vector>

namespace streamconv {

// Tracks live tensor payload bytes. Counts payloads only: shape vectors, masks,
// argmax maps and other scaffolding are deliberately excluded so that the peak
// can be compared against closed-form sums of activation sizes.
class AllocationLedger {
 public:
  struct Event {
    uint64_t seq;
    int64_t bytes;     // positive = alloc, negative = free
    int64_t current;   // live bytes after this event
    uint32_t phase;    // index into phases()
  };

  AllocationLedger() { phases_.push_back("start"); }

  // Phase labels let reports attribute peaks to stages of a run.
  uint32_t set_phase(const std::string& name);
  uint32_t current_phase() const { return phase_.load(std::memory_order_relaxed); }

  void on_alloc(int64_t bytes, uint32_t phase);
  void on_free(int64_t bytes, uint32_t phase);

  int64_t current_bytes() const { return current_.load(std::memory_order_relaxed); }
  int64_t peak_bytes() const { return peak_.load(std::memory_order_relaxed); }

  // Peak observed while each phase was active.
  std::vector<std::pair<std::string, int64_t>> phase_peaks() const;

  std::vector<Event> events() const;
  const std::vector<std::string>& phases() const { return phases_; }

  // Scoped installation: tensors allocated while a ledger is active register
  // with it and deregister on destruction. The ledger must outlive them.
  static AllocationLedger* active();

 private:
  friend class LedgerScope;
  static std::atomic<AllocationLedger*> active_;

  std::atomic<int64_t> current_{0};
  std::atomic<int64_t> peak_{0};
  std::atomic<uint64_t> seq_{0};
  std::atomic<uint32_t> phase_{0};

  mutable std::mutex mu_;
  std::vector<std::string> phases_;
  std::vector<int64_t> phase_peak_;
  std::vector<Event> events_;

  void bump_peak(int64_t cur, uint32_t phase);
  void record(int64_t bytes, uint32_t phase);
};

class LedgerScope {
 public:
  explicit LedgerScope(AllocationLedger& ledger);
  ~LedgerScope();
  LedgerScope(const LedgerScope&) = delete;
  LedgerScope& operator=(const LedgerScope&) = delete;
};

}  // namespace streamconv
