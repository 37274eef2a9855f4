#include "streamconv/ledger.hpp"

#include "streamconv/error.hpp"

namespace streamconv {

std::atomic<AllocationLedger*> AllocationLedger::active_{nullptr};

AllocationLedger* AllocationLedger::active() {
  return active_.load(std::memory_order_acquire);
}

uint32_t AllocationLedger::set_phase(const std::string& name) {
  std::lock_guard<std::mutex> lock(mu_);
  phases_.push_back(name);
  if (phase_peak_.size() < phases_.size()) phase_peak_.resize(phases_.size(), 0);
  uint32_t id = static_cast<uint32_t>(phases_.size() - 1);
  phase_.store(id, std::memory_order_relaxed);
  int64_t cur = current_.load(std::memory_order_relaxed);
  if (phase_peak_[id] < cur) phase_peak_[id] = cur;
  return id;
}

void AllocationLedger::bump_peak(int64_t cur, uint32_t phase) {
  int64_t prev = peak_.load(std::memory_order_relaxed);
  while (cur > prev && !peak_.compare_exchange_weak(prev, cur)) {
  }
  std::lock_guard<std::mutex> lock(mu_);
  if (phase_peak_.size() <= phase) phase_peak_.resize(phase + 1, 0);
  if (phase_peak_[phase] < cur) phase_peak_[phase] = cur;
}

void AllocationLedger::record(int64_t bytes, uint32_t phase) {
  int64_t cur = current_.load(std::memory_order_relaxed);
  std::lock_guard<std::mutex> lock(mu_);
  events_.push_back(Event{seq_.fetch_add(1), bytes, cur, phase});
}

void AllocationLedger::on_alloc(int64_t bytes, uint32_t phase) {
  int64_t cur = current_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  bump_peak(cur, phase);
  record(bytes, phase);
}

void AllocationLedger::on_free(int64_t bytes, uint32_t phase) {
  int64_t cur = current_.fetch_sub(bytes, std::memory_order_relaxed) - bytes;
  if (cur < 0) throw InternalError("ledger: live bytes went negative");
  record(-bytes, phase);
}

std::vector<std::pair<std::string, int64_t>> AllocationLedger::phase_peaks() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<std::pair<std::string, int64_t>> out;
  for (size_t i = 0; i < phases_.size(); ++i) {
    out.emplace_back(phases_[i], i < phase_peak_.size() ? phase_peak_[i] : 0);
  }
  return out;
}

std::vector<AllocationLedger::Event> AllocationLedger::events() const {
  std::lock_guard<std::mutex> lock(mu_);
  return events_;
}

LedgerScope::LedgerScope(AllocationLedger& ledger) {
  AllocationLedger* expected = nullptr;
  if (!AllocationLedger::active_.compare_exchange_strong(expected, &ledger)) {
    throw UsageError("ledger scopes do not nest");
  }
}

LedgerScope::~LedgerScope() {
  AllocationLedger::active_.store(nullptr, std::memory_order_release);
}

}  // namespace streamconv
