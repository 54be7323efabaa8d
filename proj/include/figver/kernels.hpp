#pragma once

// Pixel inner loops over decoded 0/1 byte planes. Each kernel has a scalar
// reference and an AVX2 variant; the dispatcher picks one at runtime.

#include <cstdint>
#include <span>
#include <string_view>

namespace figver::kernels {

struct OverlapCounts {
    std::uint64_t a = 0;
    std::uint64_t b = 0;
    std::uint64_t intersection = 0;

    [[nodiscard]] std::uint64_t union_count() const noexcept { return a + b - intersection; }
    friend bool operator==(const OverlapCounts &, const OverlapCounts &) = default;
};

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa) noexcept;

/// Best ISA the running CPU supports (and this build compiled in).
Isa detect_isa() noexcept;

/// ISA used by the dispatching entry points below. Starts as detect_isa(),
/// or scalar when FIGVER_FORCE_SCALAR is set in the environment.
Isa active_isa() noexcept;

/// Overrides the active ISA; requests for an unsupported ISA fall back to
/// scalar. Returns the ISA now in effect.
Isa set_active_isa(Isa isa) noexcept;

namespace scalar {
OverlapCounts overlap(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) noexcept;
std::uint64_t count_set(std::span<const std::uint8_t> a) noexcept;
/// out[i] += plane[i]; counts saturate at 255.
void accumulate(std::span<std::uint8_t> counts, std::span<const std::uint8_t> plane) noexcept;
/// out[i] = counts[i] >= threshold.
void threshold(std::span<const std::uint8_t> counts, std::uint8_t threshold,
               std::span<std::uint8_t> out) noexcept;
/// Index of the first byte != value at or after `from`, or size.
std::size_t find_not(std::span<const std::uint8_t> a, std::size_t from, std::uint8_t value) noexcept;
} // namespace scalar

namespace avx2 {
bool supported() noexcept;
OverlapCounts overlap(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) noexcept;
std::uint64_t count_set(std::span<const std::uint8_t> a) noexcept;
void accumulate(std::span<std::uint8_t> counts, std::span<const std::uint8_t> plane) noexcept;
void threshold(std::span<const std::uint8_t> counts, std::uint8_t threshold,
               std::span<std::uint8_t> out) noexcept;
std::size_t find_not(std::span<const std::uint8_t> a, std::size_t from, std::uint8_t value) noexcept;
} // namespace avx2

// Dispatching entry points. Planes must hold 0/1 bytes; spans of a call
// share one length.
OverlapCounts overlap(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) noexcept;
std::uint64_t count_set(std::span<const std::uint8_t> a) noexcept;
void accumulate(std::span<std::uint8_t> counts, std::span<const std::uint8_t> plane) noexcept;
void threshold(std::span<const std::uint8_t> counts, std::uint8_t threshold,
               std::span<std::uint8_t> out) noexcept;
std::size_t find_not(std::span<const std::uint8_t> a, std::size_t from, std::uint8_t value) noexcept;

} // namespace figver::kernels
