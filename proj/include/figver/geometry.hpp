#pragma once

// Pixel geometry: boxes, run-length masks, centroids, IoU, OCR box merging
// and mask voting. Everything here is a pure function over values.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace figver {

class GeometryError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct Point {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Point &, const Point &) = default;
};

/// Integer pixel box, half-open: column c is inside iff x_min <= c < x_max.
struct BoundingBox {
    int x_min = 0;
    int y_min = 0;
    int x_max = 0;
    int y_max = 0;

    [[nodiscard]] bool valid() const noexcept { return x_min < x_max && y_min < y_max; }
    [[nodiscard]] std::int64_t area() const noexcept {
        return static_cast<std::int64_t>(x_max - x_min) * (y_max - y_min);
    }

    /// Throws GeometryError unless valid().
    static BoundingBox checked(int x_min, int y_min, int x_max, int y_max);

    friend bool operator==(const BoundingBox &, const BoundingBox &) = default;
};

/// Row-major run-length encoded binary mask. Runs alternate background and
/// foreground starting with background; only the first run may be zero.
class BinaryMask {
  public:
    BinaryMask() = default;

    /// All-background mask of the given size.
    static BinaryMask empty(int width, int height);

    /// Encodes a 0/1 pixel grid (any non-zero byte counts as foreground).
    static BinaryMask encode(int width, int height, std::span<const std::uint8_t> pixels);

    /// Validates runs against the canonical-form invariants.
    static BinaryMask from_runs(int width, int height, std::vector<std::uint32_t> runs);

    /// Foreground inside `box` clipped to the grid.
    static BinaryMask from_box(int width, int height, const BoundingBox &box);

    [[nodiscard]] int width() const noexcept { return width_; }
    [[nodiscard]] int height() const noexcept { return height_; }
    [[nodiscard]] std::size_t pixel_count() const noexcept {
        return static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_);
    }
    [[nodiscard]] const std::vector<std::uint32_t> &runs() const noexcept { return runs_; }

    /// Decoded 0/1 bytes, row-major.
    [[nodiscard]] std::vector<std::uint8_t> decode() const;
    void decode_into(std::span<std::uint8_t> out) const;

    [[nodiscard]] std::uint64_t foreground() const noexcept;
    [[nodiscard]] bool is_empty() const noexcept { return foreground() == 0; }
    [[nodiscard]] bool same_shape(const BinaryMask &other) const noexcept {
        return width_ == other.width_ && height_ == other.height_;
    }
    [[nodiscard]] bool at(int x, int y) const;

    friend bool operator==(const BinaryMask &, const BinaryMask &) = default;

  private:
    BinaryMask(int width, int height, std::vector<std::uint32_t> runs)
        : width_(width), height_(height), runs_(std::move(runs)) {}

    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint32_t> runs_;
};

struct TextBox {
    std::string id;
    std::string text;
    BoundingBox box;
    double confidence = 1.0;
    std::vector<std::string> members;

    friend bool operator==(const TextBox &, const TextBox &) = default;
};

Point centroid(const BoundingBox &box) noexcept;
double pixel_distance(const Point &a, const Point &b) noexcept;

double box_iou(const BoundingBox &a, const BoundingBox &b) noexcept;

/// |a & b| / |a | b|. Two empty masks score 1.0. Throws on size mismatch.
double mask_iou(const BinaryMask &a, const BinaryMask &b);

/// Groups boxes by the transitive closure of centroid distance < min_pixel.
/// Each group becomes one box: union extent, texts joined by a space in
/// reading order, minimum confidence, member ids recorded.
std::vector<TextBox> merge_text_boxes(std::span<const TextBox> boxes, double min_pixel);

/// Pixel set iff set in strictly more than half the inputs.
BinaryMask mask_vote(std::span<const BinaryMask> masks);

std::optional<BoundingBox> box_of_mask(const BinaryMask &mask);

// JSON forms. Masks are {"w","h","runs"}; boxes are [x_min,y_min,x_max,y_max].
void to_json(nlohmann::json &j, const BinaryMask &m);
void from_json(const nlohmann::json &j, BinaryMask &m);
void to_json(nlohmann::json &j, const BoundingBox &b);
void from_json(const nlohmann::json &j, BoundingBox &b);
void to_json(nlohmann::json &j, const Point &p);
void from_json(const nlohmann::json &j, Point &p);
void to_json(nlohmann::json &j, const TextBox &t);
void from_json(const nlohmann::json &j, TextBox &t);

} // namespace figver
