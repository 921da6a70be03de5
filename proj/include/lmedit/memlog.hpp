#pragma once

#include <atomic>
#include <cstddef>
#include <memory>

// Allocation accounting. Every numeric buffer in the library goes through
// tracking_allocator so tests can assert peak live footprints instead of
// sampling the OS. Counters are process-global.

namespace lmedit::memlog {

inline std::atomic<std::size_t>& live_counter() {
    static std::atomic<std::size_t> c{0};
    return c;
}

inline std::atomic<std::size_t>& peak_counter() {
    static std::atomic<std::size_t> c{0};
    return c;
}

inline void on_alloc(std::size_t bytes) {
    const std::size_t now = live_counter().fetch_add(bytes) + bytes;
    std::size_t prev = peak_counter().load(std::memory_order_relaxed);
    while (now > prev && !peak_counter().compare_exchange_weak(prev, now)) {
    }
}

inline void on_free(std::size_t bytes) { live_counter().fetch_sub(bytes); }

inline std::size_t live_bytes() { return live_counter().load(); }
inline std::size_t peak_bytes() { return peak_counter().load(); }

// Collapse the peak down to the current live amount.
inline void reset_peak() { peak_counter().store(live_counter().load()); }

template <class T>
struct tracking_allocator {
    using value_type = T;

    tracking_allocator() = default;
    template <class U>
    tracking_allocator(const tracking_allocator<U>&) {}

    T* allocate(std::size_t n) {
        on_alloc(n * sizeof(T));
        return std::allocator<T>{}.allocate(n);
    }

    void deallocate(T* p, std::size_t n) {
        std::allocator<T>{}.deallocate(p, n);
        on_free(n * sizeof(T));
    }

    template <class U>
    bool operator==(const tracking_allocator<U>&) const { return true; }
    template <class U>
    bool operator!=(const tracking_allocator<U>&) const { return false; }
};

// Measures the extra peak footprint accrued while the scope is alive.
// Not reentrant: nesting scopes resets the shared peak counter.
class PeakScope {
public:
    PeakScope() : base_(live_bytes()) { reset_peak(); }

    std::size_t peak_delta() const {
        const std::size_t p = peak_bytes();
        return p > base_ ? p - base_ : 0;
    }

private:
    std::size_t base_;
};

} // namespace lmedit::memlog
