#pragma once

// Instrumented allocation tracking for the dense buffers used across the
// library. Every Volume3/WarpField/LabelVolume data buffer goes through
// tracked_allocator, so tests can assert how many lattice-sized buffers an
// operation materializes and what its peak working set was.
//
// Counters are thread-local: each fabric worker owns its rank's ledger.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <vector>

namespace voxreg {

class AllocLedger {
public:
    static AllocLedger& instance() {
        thread_local AllocLedger ledger;
        return ledger;
    }

    void on_alloc(std::size_t bytes) {
        live_bytes_ += static_cast<std::int64_t>(bytes);
        if (live_bytes_ > peak_bytes_) peak_bytes_ = live_bytes_;
        ++total_allocs_;
        events_.push_back(static_cast<std::int64_t>(bytes));
    }

    void on_free(std::size_t bytes) {
        live_bytes_ -= static_cast<std::int64_t>(bytes);
        events_.push_back(-static_cast<std::int64_t>(bytes));
    }

    std::int64_t live_bytes() const { return live_bytes_; }
    std::int64_t peak_bytes() const { return peak_bytes_; }
    std::uint64_t total_allocs() const { return total_allocs_; }
    std::size_t event_count() const { return events_.size(); }
    const std::vector<std::int64_t>& events() const { return events_; }

    void reset() {
        events_.clear();
        peak_bytes_ = live_bytes_;
        total_allocs_ = 0;
    }

private:
    std::int64_t live_bytes_ = 0;
    std::int64_t peak_bytes_ = 0;
    std::uint64_t total_allocs_ = 0;
    std::vector<std::int64_t> events_;
};

// Snapshot of the ledger over a lexical scope. Queries replay the event log
// recorded since construction, so scopes may nest.
class AllocScope {
public:
    AllocScope() : mark_(AllocLedger::instance().event_count()) {}

    // Number of allocations of at least `min_bytes` made inside the scope.
    std::size_t alloc_count_at_least(std::size_t min_bytes) const {
        const auto& ev = AllocLedger::instance().events();
        std::size_t n = 0;
        for (std::size_t i = mark_; i < ev.size(); ++i)
            if (ev[i] > 0 && static_cast<std::size_t>(ev[i]) >= min_bytes) ++n;
        return n;
    }

    // Allocations inside the scope that are still live at the end of it.
    // The outstanding net is matched by size (alloc/free of equal size cancel).
    std::size_t live_alloc_count_at_least(std::size_t min_bytes) const {
        const auto& ev = AllocLedger::instance().events();
        std::vector<std::int64_t> open;
        for (std::size_t i = mark_; i < ev.size(); ++i) {
            if (ev[i] > 0) {
                open.push_back(ev[i]);
            } else {
                for (auto it = open.rbegin(); it != open.rend(); ++it) {
                    if (*it == -ev[i]) {
                        open.erase(std::next(it).base());
                        break;
                    }
                }
            }
        }
        std::size_t n = 0;
        for (auto b : open)
            if (static_cast<std::size_t>(b) >= min_bytes) ++n;
        return n;
    }

    // Peak live bytes above the level at scope entry.
    std::uint64_t peak_extra_bytes() const {
        const auto& ev = AllocLedger::instance().events();
        std::int64_t live = 0, peak = 0;
        for (std::size_t i = mark_; i < ev.size(); ++i) {
            live += ev[i];
            if (live > peak) peak = live;
        }
        return static_cast<std::uint64_t>(peak);
    }

private:
    std::size_t mark_;
};

template <typename T>
struct tracked_allocator {
    using value_type = T;

    tracked_allocator() = default;
    template <typename U>
    tracked_allocator(const tracked_allocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        AllocLedger::instance().on_alloc(n * sizeof(T));
        return std::allocator<T>{}.allocate(n);
    }

    void deallocate(T* p, std::size_t n) noexcept {
        AllocLedger::instance().on_free(n * sizeof(T));
        std::allocator<T>{}.deallocate(p, n);
    }

    bool operator==(const tracked_allocator&) const { return true; }
    bool operator!=(const tracked_allocator&) const { return false; }
};

template <typename T>
using tracked_vector = std::vector<T, tracked_allocator<T>>;

} // namespace voxreg
