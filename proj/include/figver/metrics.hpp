#pragma once

// Segmentation quality (cIoU, gIoU) and missed-module detection scores
// (micro-averaged precision, recall, F1).

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "figver/geometry.hpp"

namespace figver::metrics {

class MetricsError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// One predicted/gold mask pair with its pixel areas.
struct EvalPair {
    std::string id;
    std::uint64_t predicted_area = 0;  // A_i
    std::uint64_t gold_area = 0;       // B_i
    std::uint64_t intersection = 0;    // I_i

    [[nodiscard]] std::uint64_t union_area() const noexcept {
        return predicted_area + gold_area - intersection;
    }
    /// Per-pair IoU; empty/empty scores 1.
    [[nodiscard]] double iou() const noexcept;

    static EvalPair from_masks(std::string id, const BinaryMask &predicted, const BinaryMask &gold);
    /// Throws unless I <= min(A, B).
    static EvalPair from_counts(std::string id, std::uint64_t predicted_area, std::uint64_t gold_area,
                                std::uint64_t intersection);
};

struct DetectionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    friend bool operator==(const DetectionCounts &, const DetectionCounts &) = default;
};

struct Prf {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct Matching {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (prediction, gold)
    std::vector<double> ious;                                // parallel to pairs
    DetectionCounts counts;
};

double ciou(std::span<const EvalPair> pairs);
double giou(std::span<const EvalPair> pairs);

/// Greedy one-to-one matching by descending IoU; ties go to the lower
/// (prediction, gold) index pair. A pair is eligible iff IoU >= threshold.
Matching match_missed(std::span<const BinaryMask> predicted, std::span<const BinaryMask> gold,
                      double iou_threshold = 0.5);

/// Micro-averaged over figures; any 0/0 ratio is 0.
Prf detection_prf(std::span<const DetectionCounts> counts);

struct FigureDetection {
    std::string figure_id;
    DetectionCounts counts;
};

struct EvalReport {
    double ciou = 0.0;
    double giou = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t n_items = 0;
    double iou_threshold = 0.5;
    std::vector<EvalPair> items;
    std::vector<FigureDetection> figures;
};

EvalReport make_report(std::vector<EvalPair> pairs, std::vector<FigureDetection> figures, double iou_threshold);

void to_json(nlohmann::json &j, const EvalPair &p);
void to_json(nlohmann::json &j, const DetectionCounts &c);
void to_json(nlohmann::json &j, const EvalReport &r);

/// Plain-text table with columns cIoU, gIoU, P, R, F1 (percentages).
std::string format_table(const EvalReport &r);

} // namespace figver::metrics
