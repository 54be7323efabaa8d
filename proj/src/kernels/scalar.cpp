#include "figver/kernels.hpp"

#include <algorithm>

namespace figver::kernels::scalar {

OverlapCounts overlap(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) noexcept {
    OverlapCounts c;
    const std::size_t n = std::min(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i) {
        c.a += a[i];
        c.b += b[i];
        c.intersection += a[i] & b[i];
    }
    return c;
}

std::uint64_t count_set(std::span<const std::uint8_t> a) noexcept {
    std::uint64_t n = 0;
    for (auto v : a) n += v;
    return n;
}

void accumulate(std::span<std::uint8_t> counts, std::span<const std::uint8_t> plane) noexcept {
    const std::size_t n = std::min(counts.size(), plane.size());
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned sum = counts[i] + plane[i];
        counts[i] = static_cast<std::uint8_t>(sum > 255 ? 255 : sum);
    }
}

void threshold(std::span<const std::uint8_t> counts, std::uint8_t threshold,
               std::span<std::uint8_t> out) noexcept {
    const std::size_t n = std::min(counts.size(), out.size());
    for (std::size_t i = 0; i < n; ++i) out[i] = counts[i] >= threshold ? 1 : 0;
}

std::size_t find_not(std::span<const std::uint8_t> a, std::size_t from, std::uint8_t value) noexcept {
    for (std::size_t i = from; i < a.size(); ++i)
        if (a[i] != value) return i;
    return a.size();
}

} // namespace figver::kernels::scalar
