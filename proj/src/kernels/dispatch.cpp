#include "figver/kernels.hpp"

#include <atomic>
#include <cstdlib>

namespace figver::kernels {

namespace {

Isa initial_isa() noexcept {
    if (const char *force = std::getenv("FIGVER_FORCE_SCALAR"); force && *force && *force != '0')
        return Isa::scalar;
    return detect_isa();
}

std::atomic<Isa> &current() noexcept {
    static std::atomic<Isa> isa{initial_isa()};
    return isa;
}

} // namespace

std::string_view isa_name(Isa isa) noexcept {
    switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    }
    return "unknown";
}

Isa detect_isa() noexcept { return avx2::supported() ? Isa::avx2 : Isa::scalar; }

Isa active_isa() noexcept { return current().load(std::memory_order_relaxed); }

Isa set_active_isa(Isa isa) noexcept {
    if (isa == Isa::avx2 && !avx2::supported()) isa = Isa::scalar;
    current().store(isa, std::memory_order_relaxed);
    return isa;
}

OverlapCounts overlap(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) noexcept {
    return active_isa() == Isa::avx2 ? avx2::overlap(a, b) : scalar::overlap(a, b);
}

std::uint64_t count_set(std::span<const std::uint8_t> a) noexcept {
    return active_isa() == Isa::avx2 ? avx2::count_set(a) : scalar::count_set(a);
}

void accumulate(std::span<std::uint8_t> counts, std::span<const std::uint8_t> plane) noexcept {
    if (active_isa() == Isa::avx2)
        avx2::accumulate(counts, plane);
    else
        scalar::accumulate(counts, plane);
}

void threshold(std::span<const std::uint8_t> counts, std::uint8_t t, std::span<std::uint8_t> out) noexcept {
    if (active_isa() == Isa::avx2)
        avx2::threshold(counts, t, out);
    else
        scalar::threshold(counts, t, out);
}

std::size_t find_not(std::span<const std::uint8_t> a, std::size_t from, std::uint8_t value) noexcept {
    return active_isa() == Isa::avx2 ? avx2::find_not(a, from, value) : scalar::find_not(a, from, value);
}

} // namespace figver::kernels
