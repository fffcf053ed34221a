#include "ootd/ootdnet.hpp"

namespace ootd {
namespace detail {
std::atomic<long> g_outfit_calls{0};
std::atomic<long> g_denoise_calls{0};
}  // namespace detail

long outfit_forward_count() { return detail::g_outfit_calls.load(std::memory_order_relaxed); }
long denoise_forward_count() { return detail::g_denoise_calls.load(std::memory_order_relaxed); }
void reset_forward_counters() {
    detail::g_outfit_calls.store(0, std::memory_order_relaxed);
    detail::g_denoise_calls.store(0, std::memory_order_relaxed);
}

}  // namespace ootd
