#include "figver/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <tuple>

#include "figver/kernels.hpp"

namespace figver {

BoundingBox BoundingBox::checked(int x_min, int y_min, int x_max, int y_max) {
    BoundingBox b{x_min, y_min, x_max, y_max};
    if (!b.valid())
        throw GeometryError("invalid box [" + std::to_string(x_min) + "," + std::to_string(y_min) + "," +
                            std::to_string(x_max) + "," + std::to_string(y_max) + "]");
    return b;
}

// ---------------------------------------------------------------------------
// BinaryMask

namespace {

void check_dims(int width, int height) {
    if (width <= 0 || height <= 0)
        throw GeometryError("mask dimensions must be positive, got " + std::to_string(width) + "x" +
                            std::to_string(height));
}

void check_same_shape(const BinaryMask &a, const BinaryMask &b) {
    if (!a.same_shape(b))
        throw GeometryError("mask dimension mismatch: " + std::to_string(a.width()) + "x" +
                            std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                            std::to_string(b.height()));
}

} // namespace

BinaryMask BinaryMask::empty(int width, int height) {
    check_dims(width, height);
    return BinaryMask(width, height, {static_cast<std::uint32_t>(width * height)});
}

BinaryMask BinaryMask::encode(int width, int height, std::span<const std::uint8_t> pixels) {
    check_dims(width, height);
    const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    if (pixels.size() != n)
        throw GeometryError("pixel buffer holds " + std::to_string(pixels.size()) + " values, expected " +
                            std::to_string(n));

    std::vector<std::uint8_t> bits;
    std::span<const std::uint8_t> plane = pixels;
    if (std::any_of(pixels.begin(), pixels.end(), [](std::uint8_t v) { return v > 1; })) {
        bits.resize(n);
        std::transform(pixels.begin(), pixels.end(), bits.begin(),
                       [](std::uint8_t v) { return static_cast<std::uint8_t>(v != 0); });
        plane = bits;
    }

    std::vector<std::uint32_t> runs;
    std::size_t pos = 0;
    std::uint8_t value = 0;
    while (pos < n) {
        const std::size_t next = kernels::find_not(plane, pos, value);
        runs.push_back(static_cast<std::uint32_t>(next - pos));
        pos = next;
        value ^= 1;
    }
    return BinaryMask(width, height, std::move(runs));
}

BinaryMask BinaryMask::from_runs(int width, int height, std::vector<std::uint32_t> runs) {
    check_dims(width, height);
    if (runs.empty()) throw GeometryError("run list is empty");
    std::uint64_t total = 0;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        if (runs[i] == 0 && i != 0) throw GeometryError("zero-length run at index " + std::to_string(i));
        total += runs[i];
    }
    if (runs.size() == 1 && runs[0] == 0) throw GeometryError("run list covers no pixels");
    const auto expected = static_cast<std::uint64_t>(width) * static_cast<std::uint64_t>(height);
    if (total != expected)
        throw GeometryError("runs sum to " + std::to_string(total) + ", expected " + std::to_string(expected));
    return BinaryMask(width, height, std::move(runs));
}

BinaryMask BinaryMask::from_box(int width, int height, const BoundingBox &box) {
    check_dims(width, height);
    const int x0 = std::clamp(box.x_min, 0, width), x1 = std::clamp(box.x_max, 0, width);
    const int y0 = std::clamp(box.y_min, 0, height), y1 = std::clamp(box.y_max, 0, height);
    std::vector<std::uint8_t> px(static_cast<std::size_t>(width) * height, 0);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) px[static_cast<std::size_t>(y) * width + x] = 1;
    return encode(width, height, px);
}

std::vector<std::uint8_t> BinaryMask::decode() const {
    std::vector<std::uint8_t> out(pixel_count(), 0);
    decode_into(out);
    return out;
}

void BinaryMask::decode_into(std::span<std::uint8_t> out) const {
    std::size_t pos = 0;
    std::uint8_t value = 0;
    for (auto run : runs_) {
        const std::size_t end = std::min(out.size(), pos + run);
        if (end > pos) std::memset(out.data() + pos, value, end - pos);
        pos += run;
        value ^= 1;
    }
}

std::uint64_t BinaryMask::foreground() const noexcept {
    std::uint64_t n = 0;
    for (std::size_t i = 1; i < runs_.size(); i += 2) n += runs_[i];
    return n;
}

bool BinaryMask::at(int x, int y) const {
    if (x < 0 || y < 0 || x >= width_ || y >= height_) throw GeometryError("pixel out of range");
    const std::uint64_t target = static_cast<std::uint64_t>(y) * width_ + x;
    std::uint64_t pos = 0;
    for (std::size_t i = 0; i < runs_.size(); ++i) {
        pos += runs_[i];
        if (target < pos) return (i % 2) == 1;
    }
    return false;
}

// ---------------------------------------------------------------------------
// Points and boxes

Point centroid(const BoundingBox &box) noexcept {
    return {(box.x_min + box.x_max) / 2.0, (box.y_min + box.y_max) / 2.0};
}

double pixel_distance(const Point &a, const Point &b) noexcept { return std::hypot(a.x - b.x, a.y - b.y); }

double box_iou(const BoundingBox &a, const BoundingBox &b) noexcept {
    const int ix = std::max(0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const int iy = std::max(0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double inter = static_cast<double>(ix) * iy;
    const double uni = static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

double mask_iou(const BinaryMask &a, const BinaryMask &b) {
    check_same_shape(a, b);
    const auto pa = a.decode();
    const auto pb = b.decode();
    const auto c = kernels::overlap(pa, pb);
    if (c.union_count() == 0) return 1.0;
    return static_cast<double>(c.intersection) / static_cast<double>(c.union_count());
}

// ---------------------------------------------------------------------------
// Text box merging

namespace {

// Reading order: top to bottom, then left to right; text and id settle
// exact ties so the order is total.
bool reading_before(const Point &pa, const TextBox &a, const Point &pb, const TextBox &b) {
    return std::tie(pa.y, pa.x, a.text, a.id) < std::tie(pb.y, pb.x, b.text, b.id);
}

struct DisjointSets {
    std::vector<std::size_t> parent;
    explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    std::size_t find(std::size_t i) {
        while (parent[i] != i) i = parent[i] = parent[parent[i]];
        return i;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

} // namespace

std::vector<TextBox> merge_text_boxes(std::span<const TextBox> boxes, double min_pixel) {
    if (!(min_pixel > 0)) throw GeometryError("min_pixel must be positive");
    const std::size_t n = boxes.size();
    std::vector<Point> centers(n);
    for (std::size_t i = 0; i < n; ++i) centers[i] = centroid(boxes[i].box);

    DisjointSets sets(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (pixel_distance(centers[i], centers[j]) < min_pixel) sets.unite(i, j);

    std::vector<std::vector<std::size_t>> groups;
    std::vector<std::size_t> group_of(n, SIZE_MAX);
    for (std::size_t i = 0; i < n; ++i) {
        const auto root = sets.find(i);
        if (group_of[root] == SIZE_MAX) {
            group_of[root] = groups.size();
            groups.emplace_back();
        }
        groups[group_of[root]].push_back(i);
    }

    std::vector<TextBox> merged;
    merged.reserve(groups.size());
    for (auto &members : groups) {
        std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
            return reading_before(centers[a], boxes[a], centers[b], boxes[b]);
        });
        TextBox out;
        out.box = boxes[members.front()].box;
        out.confidence = boxes[members.front()].confidence;
        for (std::size_t k = 0; k < members.size(); ++k) {
            const TextBox &src = boxes[members[k]];
            if (k) out.text += ' ';
            out.text += src.text;
            out.box.x_min = std::min(out.box.x_min, src.box.x_min);
            out.box.y_min = std::min(out.box.y_min, src.box.y_min);
            out.box.x_max = std::max(out.box.x_max, src.box.x_max);
            out.box.y_max = std::max(out.box.y_max, src.box.y_max);
            out.confidence = std::min(out.confidence, src.confidence);
            if (src.members.empty())
                out.members.push_back(src.id);
            else
                out.members.insert(out.members.end(), src.members.begin(), src.members.end());
        }
        out.id = members.size() == 1 ? boxes[members.front()].id : out.members.front();
        merged.push_back(std::move(out));
    }

    std::sort(merged.begin(), merged.end(), [](const TextBox &a, const TextBox &b) {
        return reading_before(centroid(a.box), a, centroid(b.box), b);
    });
    return merged;
}

// ---------------------------------------------------------------------------
// Voting

BinaryMask mask_vote(std::span<const BinaryMask> masks) {
    if (masks.empty()) throw GeometryError("mask_vote needs at least one mask");
    const BinaryMask &first = masks.front();
    for (const auto &m : masks) check_same_shape(first, m);
    if (masks.size() == 1) return first;

    const std::size_t k = masks.size();
    const std::size_t n = first.pixel_count();
    std::vector<std::uint8_t> plane(n), out(n);

    // Strict majority: count > k/2  <=>  count >= k/2 + 1.
    const std::size_t need = k / 2 + 1;
    if (k <= 255) {
        std::vector<std::uint8_t> counts(n, 0);
        for (const auto &m : masks) {
            m.decode_into(plane);
            kernels::accumulate(counts, plane);
        }
        kernels::threshold(counts, static_cast<std::uint8_t>(need), out);
    } else {
        std::vector<std::uint32_t> counts(n, 0);
        for (const auto &m : masks) {
            m.decode_into(plane);
            for (std::size_t i = 0; i < n; ++i) counts[i] += plane[i];
        }
        for (std::size_t i = 0; i < n; ++i) out[i] = counts[i] >= need ? 1 : 0;
    }
    return BinaryMask::encode(first.width(), first.height(), out);
}

std::optional<BoundingBox> box_of_mask(const BinaryMask &mask) {
    if (mask.is_empty()) return std::nullopt;
    const int w = mask.width();
    BoundingBox box{w, mask.height(), -1, -1};
    std::uint64_t pos = 0;
    const auto &runs = mask.runs();
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const std::uint64_t start = pos;
        pos += runs[i];
        if (i % 2 == 0 || runs[i] == 0) continue;
        const std::uint64_t last = pos - 1;
        const int y0 = static_cast<int>(start / w), y1 = static_cast<int>(last / w);
        box.y_min = std::min(box.y_min, y0);
        box.y_max = std::max(box.y_max, y1 + 1);
        if (y0 == y1) {
            box.x_min = std::min(box.x_min, static_cast<int>(start % w));
            box.x_max = std::max(box.x_max, static_cast<int>(last % w) + 1);
        } else {
            // A run crossing a row boundary touches both column 0 and w-1.
            box.x_min = 0;
            box.x_max = w;
        }
    }
    return box;
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json &j, const BinaryMask &m) {
    j = nlohmann::json{{"w", m.width()}, {"h", m.height()}, {"runs", m.runs()}};
}

void from_json(const nlohmann::json &j, BinaryMask &m) {
    if (!j.is_object() || !j.contains("w") || !j.contains("h") || !j.contains("runs"))
        throw GeometryError("mask JSON needs w, h and runs");
    m = BinaryMask::from_runs(j.at("w").get<int>(), j.at("h").get<int>(),
                              j.at("runs").get<std::vector<std::uint32_t>>());
}

void to_json(nlohmann::json &j, const BoundingBox &b) { j = nlohmann::json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

void from_json(const nlohmann::json &j, BoundingBox &b) {
    if (!j.is_array() || j.size() != 4) throw GeometryError("box JSON must be [x_min,y_min,x_max,y_max]");
    b = BoundingBox::checked(j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>());
}

void to_json(nlohmann::json &j, const Point &p) { j = nlohmann::json{{"x", p.x}, {"y", p.y}}; }

void from_json(const nlohmann::json &j, Point &p) {
    p.x = j.at("x").get<double>();
    p.y = j.at("y").get<double>();
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw GeometryError("point must be finite");
}

void to_json(nlohmann::json &j, const TextBox &t) {
    j = nlohmann::json{{"id", t.id}, {"text", t.text}, {"box", t.box}, {"confidence", t.confidence}};
    if (!t.members.empty()) j["members"] = t.members;
}

void from_json(const nlohmann::json &j, TextBox &t) {
    t.id = j.value("id", std::string{});
    t.text = j.at("text").get<std::string>();
    t.box = j.at("box").get<BoundingBox>();
    t.confidence = j.value("confidence", 1.0);
    if (!(t.confidence >= 0.0 && t.confidence <= 1.0)) throw GeometryError("confidence outside [0,1]");
    t.members = j.value("members", std::vector<std::string>{});
}

} // namespace figver
