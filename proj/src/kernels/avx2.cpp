#include "figver/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#define FIGVER_HAVE_AVX2 1
#include <immintrin.h>
#else
#define FIGVER_HAVE_AVX2 0
#endif

namespace figver::kernels::avx2 {

#if FIGVER_HAVE_AVX2

#define FIGVER_AVX2 __attribute__((target("avx2")))

namespace {

constexpr std::size_t kLanes = 32;

FIGVER_AVX2 inline std::uint64_t hsum_epi64(__m256i v) {
    const __m128i lo = _mm256_castsi256_si128(v);
    const __m128i hi = _mm256_extracti128_si256(v, 1);
    const __m128i s = _mm_add_epi64(lo, hi);
    return static_cast<std::uint64_t>(_mm_cvtsi128_si64(s)) +
           static_cast<std::uint64_t>(_mm_extract_epi64(s, 1));
}

FIGVER_AVX2 inline __m256i load(const std::uint8_t *p) {
    return _mm256_loadu_si256(reinterpret_cast<const __m256i *>(p));
}

} // namespace

bool supported() noexcept {
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2");
}

// Bytes are 0/1, so sad_epu8 against zero sums each 8-byte group into a
// 64-bit lane without overflow.
FIGVER_AVX2 OverlapCounts overlap(std::span<const std::uint8_t> a,
                                  std::span<const std::uint8_t> b) noexcept {
    const std::size_t n = a.size() < b.size() ? a.size() : b.size();
    const __m256i zero = _mm256_setzero_si256();
    __m256i sa = zero, sb = zero, si = zero;
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        const __m256i va = load(a.data() + i);
        const __m256i vb = load(b.data() + i);
        sa = _mm256_add_epi64(sa, _mm256_sad_epu8(va, zero));
        sb = _mm256_add_epi64(sb, _mm256_sad_epu8(vb, zero));
        si = _mm256_add_epi64(si, _mm256_sad_epu8(_mm256_and_si256(va, vb), zero));
    }
    OverlapCounts c{hsum_epi64(sa), hsum_epi64(sb), hsum_epi64(si)};
    const auto tail = scalar::overlap(a.subspan(i, n - i), b.subspan(i, n - i));
    c.a += tail.a;
    c.b += tail.b;
    c.intersection += tail.intersection;
    return c;
}

FIGVER_AVX2 std::uint64_t count_set(std::span<const std::uint8_t> a) noexcept {
    const __m256i zero = _mm256_setzero_si256();
    __m256i s = zero;
    std::size_t i = 0;
    for (; i + kLanes <= a.size(); i += kLanes)
        s = _mm256_add_epi64(s, _mm256_sad_epu8(load(a.data() + i), zero));
    return hsum_epi64(s) + scalar::count_set(a.subspan(i));
}

FIGVER_AVX2 void accumulate(std::span<std::uint8_t> counts,
                            std::span<const std::uint8_t> plane) noexcept {
    const std::size_t n = counts.size() < plane.size() ? counts.size() : plane.size();
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        auto *dst = reinterpret_cast<__m256i *>(counts.data() + i);
        _mm256_storeu_si256(dst, _mm256_adds_epu8(_mm256_loadu_si256(dst), load(plane.data() + i)));
    }
    scalar::accumulate(counts.subspan(i, n - i), plane.subspan(i, n - i));
}

FIGVER_AVX2 void threshold(std::span<const std::uint8_t> counts, std::uint8_t threshold,
                           std::span<std::uint8_t> out) noexcept {
    const std::size_t n = counts.size() < out.size() ? counts.size() : out.size();
    const __m256i thr = _mm256_set1_epi8(static_cast<char>(threshold));
    const __m256i one = _mm256_set1_epi8(1);
    std::size_t i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        const __m256i c = load(counts.data() + i);
        // c >= thr (unsigned) <=> max(c, thr) == c
        const __m256i ge = _mm256_cmpeq_epi8(_mm256_max_epu8(c, thr), c);
        _mm256_storeu_si256(reinterpret_cast<__m256i *>(out.data() + i), _mm256_and_si256(ge, one));
    }
    scalar::threshold(counts.subspan(i, n - i), threshold, out.subspan(i, n - i));
}

FIGVER_AVX2 std::size_t find_not(std::span<const std::uint8_t> a, std::size_t from,
                                 std::uint8_t value) noexcept {
    const __m256i v = _mm256_set1_epi8(static_cast<char>(value));
    std::size_t i = from;
    for (; i + kLanes <= a.size(); i += kLanes) {
        const auto eq = static_cast<std::uint32_t>(_mm256_movemask_epi8(_mm256_cmpeq_epi8(load(a.data() + i), v)));
        if (eq != 0xFFFFFFFFu) return i + static_cast<std::size_t>(__builtin_ctz(~eq));
    }
    return scalar::find_not(a, i, value);
}

#undef FIGVER_AVX2

#else

bool supported() noexcept { return false; }
OverlapCounts overlap(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) noexcept {
    return scalar::overlap(a, b);
}
std::uint64_t count_set(std::span<const std::uint8_t> a) noexcept { return scalar::count_set(a); }
void accumulate(std::span<std::uint8_t> counts, std::span<const std::uint8_t> plane) noexcept {
    scalar::accumulate(counts, plane);
}
void threshold(std::span<const std::uint8_t> counts, std::uint8_t t, std::span<std::uint8_t> out) noexcept {
    scalar::threshold(counts, t, out);
}
std::size_t find_not(std::span<const std::uint8_t> a, std::size_t from, std::uint8_t value) noexcept {
    return scalar::find_not(a, from, value);
}

#endif

} // namespace figver::kernels::avx2
