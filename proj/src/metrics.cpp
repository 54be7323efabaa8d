#include "figver/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <tuple>

#include "figver/kernels.hpp"

namespace figver::metrics {

namespace {

double ratio_or_zero(std::uint64_t num, std::uint64_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

void require_non_empty(std::size_t n, const char *what) {
    if (n == 0) throw MetricsError(std::string(what) + " needs at least one item");
}

} // namespace

double EvalPair::iou() const noexcept {
    const auto u = union_area();
    return u == 0 ? 1.0 : static_cast<double>(intersection) / static_cast<double>(u);
}

EvalPair EvalPair::from_masks(std::string id, const BinaryMask &predicted, const BinaryMask &gold) {
    if (!predicted.same_shape(gold))
        throw MetricsError("pair '" + id + "': predicted and gold masks differ in size");
    const auto a = predicted.decode();
    const auto b = gold.decode();
    const auto c = kernels::overlap(a, b);
    return EvalPair{std::move(id), c.a, c.b, c.intersection};
}

EvalPair EvalPair::from_counts(std::string id, std::uint64_t predicted_area, std::uint64_t gold_area,
                               std::uint64_t intersection) {
    if (intersection > std::min(predicted_area, gold_area))
        throw MetricsError("pair '" + id + "': intersection exceeds an area");
    return EvalPair{std::move(id), predicted_area, gold_area, intersection};
}

double ciou(std::span<const EvalPair> pairs) {
    require_non_empty(pairs.size(), "ciou");
    std::uint64_t inter = 0, uni = 0;
    for (const auto &p : pairs) {
        inter += p.intersection;
        uni += p.union_area();
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double giou(std::span<const EvalPair> pairs) {
    require_non_empty(pairs.size(), "giou");
    double sum = 0.0;
    for (const auto &p : pairs) sum += p.iou();
    return sum / static_cast<double>(pairs.size());
}

Matching match_missed(std::span<const BinaryMask> predicted, std::span<const BinaryMask> gold,
                      double iou_threshold) {
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0))
        throw MetricsError("iou_threshold must lie in (0, 1]");

    struct Candidate {
        double iou;
        std::size_t p, g;
    };
    std::vector<Candidate> candidates;
    for (std::size_t p = 0; p < predicted.size(); ++p) {
        for (std::size_t g = 0; g < gold.size(); ++g) {
            if (!predicted[p].same_shape(gold[g])) throw MetricsError("match_missed: mask dimension mismatch");
            const double iou = mask_iou(predicted[p], gold[g]);
            if (iou >= iou_threshold) candidates.push_back({iou, p, g});
        }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate &a, const Candidate &b) {
        if (a.iou != b.iou) return a.iou > b.iou;
        return std::tie(a.p, a.g) < std::tie(b.p, b.g);
    });

    Matching m;
    std::vector<bool> used_p(predicted.size()), used_g(gold.size());
    for (const auto &c : candidates) {
        if (used_p[c.p] || used_g[c.g]) continue;
        used_p[c.p] = used_g[c.g] = true;
        m.pairs.emplace_back(c.p, c.g);
        m.ious.push_back(c.iou);
    }
    m.counts.tp = m.pairs.size();
    m.counts.fp = predicted.size() - m.pairs.size();
    m.counts.fn = gold.size() - m.pairs.size();
    return m;
}

Prf detection_prf(std::span<const DetectionCounts> counts) {
    require_non_empty(counts.size(), "detection_prf");
    std::uint64_t tp = 0, fp = 0, fn = 0;
    for (const auto &c : counts) {
        tp += c.tp;
        fp += c.fp;
        fn += c.fn;
    }
    Prf r;
    r.precision = ratio_or_zero(tp, tp + fp);
    r.recall = ratio_or_zero(tp, tp + fn);
    const double s = r.precision + r.recall;
    r.f1 = s == 0.0 ? 0.0 : 2.0 * r.precision * r.recall / s;
    return r;
}

EvalReport make_report(std::vector<EvalPair> pairs, std::vector<FigureDetection> figures, double iou_threshold) {
    EvalReport r;
    r.iou_threshold = iou_threshold;
    r.n_items = pairs.size();
    if (!pairs.empty()) {
        r.ciou = ciou(pairs);
        r.giou = giou(pairs);
    }
    if (!figures.empty()) {
        std::vector<DetectionCounts> counts;
        counts.reserve(figures.size());
        for (const auto &f : figures) counts.push_back(f.counts);
        const auto prf = detection_prf(counts);
        r.precision = prf.precision;
        r.recall = prf.recall;
        r.f1 = prf.f1;
    }
    r.items = std::move(pairs);
    r.figures = std::move(figures);
    return r;
}

void to_json(nlohmann::json &j, const EvalPair &p) {
    j = nlohmann::json{{"id", p.id},
                       {"predicted_area", p.predicted_area},
                       {"gold_area", p.gold_area},
                       {"intersection", p.intersection},
                       {"iou", p.iou()}};
}

void to_json(nlohmann::json &j, const DetectionCounts &c) {
    j = nlohmann::json{{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}};
}

void to_json(nlohmann::json &j, const EvalReport &r) {
    nlohmann::json figures = nlohmann::json::array();
    for (const auto &f : r.figures) figures.push_back({{"figure", f.figure_id}, {"counts", f.counts}});
    j = nlohmann::json{{"ciou", r.ciou},
                       {"giou", r.giou},
                       {"precision", r.precision},
                       {"recall", r.recall},
                       {"f1", r.f1},
                       {"n_items", r.n_items},
                       {"iou_threshold", r.iou_threshold},
                       {"items", r.items},
                       {"figures", figures}};
}

std::string format_table(const EvalReport &r) {
    char buf[256];
    std::string out = "  cIoU    gIoU       P       R      F1   (n=" + std::to_string(r.n_items) + ")\n";
    std::snprintf(buf, sizeof buf, "%6.2f  %6.2f  %6.2f  %6.2f  %6.2f\n", 100 * r.ciou, 100 * r.giou,
                  100 * r.precision, 100 * r.recall, 100 * r.f1);
    return out + buf;
}

} // namespace figver::metrics
