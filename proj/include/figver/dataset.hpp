#pragma once

// Figure-seg construction: ingest extracted figures, filter by category,
// merge OCR anchors, locate modules behind two IoU gates, attach attribute
// descriptions, track manual review and draw training samples.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "figver/alignment.hpp"
#include "figver/backends.hpp"
#include "figver/geometry.hpp"

namespace figver::dataset {

class DatasetError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct Thresholds {
    double min_pixel = 50.0;         // OCR box merge distance
    double min_iou = 0.1;            // anchor box vs text-prompted mask, inclusive
    double consistency_iou = 0.95;   // text- vs point-prompted mask, strict
    double match_iou = 0.5;          // term mask vs enumerated module
    double dedup_iou = 0.5;          // duplicate enumerated modules

    void validate() const;
};

struct Sampling {
    int alpha = 2;
    double beta = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct FigureRecord {
    std::string id;
    std::string paper_id;
    std::string image;  // path relative to the project root
    std::string caption;
    int page = 0;
    std::optional<int> year;
    int width = 0;
    int height = 0;
    std::optional<backends::FigureCategory> category;
    std::string provenance;
    std::vector<std::string> paragraphs;  // citing-context text, when extracted

    [[nodiscard]] backends::ImageRef image_ref() const { return {id, image, width, height}; }
};

void to_json(nlohmann::json &j, const FigureRecord &f);
void from_json(const nlohmann::json &j, FigureRecord &f);

enum class Status { auto_, accepted, rejected, missed };
std::string_view to_string(Status s) noexcept;
Status parse_status(std::string_view s);

struct ReviewEvent {
    std::string actor;
    std::string timestamp;  // ISO-8601 UTC
    std::string decision;

    friend bool operator==(const ReviewEvent &, const ReviewEvent &) = default;
};

struct DatasetEntry {
    std::string id;
    std::string figure_id;
    std::string module_name;
    BinaryMask mask;
    alignment::AttributeSet attributes;
    std::string paragraph;
    Status status = Status::auto_;
    std::vector<ReviewEvent> review_log;
    std::optional<BoundingBox> anchor_box;
    double anchor_confidence = 1.0;

    friend bool operator==(const DatasetEntry &, const DatasetEntry &) = default;
};

void to_json(nlohmann::json &j, const DatasetEntry &e);
void from_json(const nlohmann::json &j, DatasetEntry &e);

// ---------------------------------------------------------------------------
// Pipeline stages

/// Reads an extraction manifest: either a list of items or
/// {"extractor": {"name","version"}, "figures": [items]}. Each item is
/// {"figure_id","paper_id","image","caption","page","kind","year"?,
/// "paragraphs"?}; items
/// whose kind is not "figure" are dropped. Image paths are resolved against
/// `image_root` and must exist; width/height come from `measure`.
using RasterMeasure = std::function<std::pair<int, int>(const std::filesystem::path &)>;
std::vector<FigureRecord> ingest_figures(const std::filesystem::path &manifest,
                                         const std::filesystem::path &image_root, const RasterMeasure &measure);

/// Classifies every record and keeps those whose label is allowed.
std::vector<FigureRecord> filter_figures(std::vector<FigureRecord> records, const std::vector<std::string> &allowed,
                                         backends::Gateway &gateway);

/// OCR then merge_text_boxes; blank OCR boxes are discarded.
std::vector<TextBox> extract_anchor_texts(const FigureRecord &figure, backends::Gateway &gateway,
                                          const Thresholds &thresholds);

struct GateCheck {
    double consistency = 0.0;  // IoU(text mask, point mask)
    double anchor = 0.0;       // IoU(anchor box mask, text mask)
    bool kept = false;
};

/// The two acceptance gates for one anchor.
GateCheck check_gates(const BinaryMask &text_mask, const BinaryMask &point_mask, const BoundingBox &anchor,
                      const Thresholds &thresholds);

struct LocatedModule {
    TextBox anchor;
    BinaryMask mask;
    GateCheck gates;
};

/// Dual-prompt localisation for each anchor. Returns every anchor's gate
/// outcome in anchor order; callers keep the ones with gates.kept.
std::vector<LocatedModule> locate_anchors(const FigureRecord &figure, const std::vector<TextBox> &anchors,
                                          backends::Gateway &gateway, const Thresholds &thresholds);

/// Candidate entries (status auto) for the anchors that pass both gates.
/// Entry ids are "<figure id>-<nnn>" over the kept anchors.
std::vector<DatasetEntry> locate_modules(const FigureRecord &figure, const std::vector<TextBox> &anchors,
                                         backends::Gateway &gateway, const Thresholds &thresholds);

/// Fills attributes from the interpreter; "Unknown" becomes absent.
DatasetEntry enhance_semantics(DatasetEntry entry, const FigureRecord &figure, backends::Gateway &gateway);

// ---------------------------------------------------------------------------
// Review

enum class Decision { accepted, rejected };
std::string_view to_string(Decision d) noexcept;
Decision parse_decision(std::string_view s);

class ReviewError : public DatasetError {
  public:
    enum class Kind { unknown_entry, illegal_transition, invalid_request };
    ReviewError(Kind kind, const std::string &what) : DatasetError(what), kind_(kind) {}
    [[nodiscard]] Kind kind() const noexcept { return kind_; }

  private:
    Kind kind_;
};

/// Applies a decision to an auto entry. Throws ReviewError otherwise.
void apply_decision(DatasetEntry &entry, Decision decision, const std::string &actor, const std::string &timestamp);

/// New missed entry for a reviewer-drawn box; mask is the box clipped to
/// the figure.
DatasetEntry make_missed_entry(const FigureRecord &figure, std::string entry_id, std::string module_name,
                               const BoundingBox &box, const std::string &actor, const std::string &timestamp);

/// Next free "<figure>-m<nnn>" id among `existing`.
std::string next_missed_id(const std::string &figure_id, const std::vector<DatasetEntry> &existing);

// ---------------------------------------------------------------------------
// Training samples

enum class Polarity { positive, negative };

struct TrainingSample {
    std::string id;
    std::string figure_id;
    std::string question;
    std::string answer;
    Polarity polarity = Polarity::positive;
    std::vector<alignment::AttributeKind> attributes_used;  // subset of abs/rel/sem
    std::optional<BinaryMask> target_mask;
};

void to_json(nlohmann::json &j, const TrainingSample &s);

inline constexpr std::string_view kPositiveAnswer = "[MODULE] is the module that has been segmented.";
inline constexpr std::string_view kNegativeAnswer =
    "[MODULE] is the module that has been segmented. There is no corresponding module in the figure.";

struct LexiconEntry {
    std::string name;
    std::uint64_t count = 0;
    friend bool operator==(const LexiconEntry &, const LexiconEntry &) = default;
};

/// Module names with frequencies, sorted by descending count then name.
struct Lexicon {
    std::vector<LexiconEntry> entries;
    [[nodiscard]] bool contains(const std::string &name) const;
};

Lexicon build_lexicon(const std::vector<DatasetEntry> &entries);

struct FrequencyReport {
    Lexicon overall;
    std::map<int, Lexicon> by_year;
};

/// Counts non-rejected entries by module name, overall and per source year.
FrequencyReport module_frequency_report(const std::vector<DatasetEntry> &entries,
                                        const std::vector<FigureRecord> &figures);

void to_json(nlohmann::json &j, const FrequencyReport &r);

/// std::mt19937_64 (its output sequence is fixed by the standard) with an
/// unbiased bounded draw, so samples reproduce across standard libraries.
class SampleRng {
  public:
    explicit SampleRng(std::uint64_t seed) : engine_(seed) {}
    /// Uniform in [0, bound); bound must be positive.
    std::uint64_t below(std::uint64_t bound);

  private:
    std::mt19937_64 engine_;
};

/// Per accepted entry: alpha attribute subsets drawn without replacement
/// from the subsets of its present attributes (name-only included), then
/// floor(beta * alpha) negatives naming lexicon modules absent from the
/// entry's figure.
std::vector<TrainingSample> build_training_samples(const std::vector<DatasetEntry> &entries, const Sampling &sampling,
                                                   const Lexicon &lexicon);

// ---------------------------------------------------------------------------
// JSON-Lines

/// Canonical line for one entry (no trailing newline).
std::string entry_line(const DatasetEntry &entry);
std::string export_jsonl(const std::vector<DatasetEntry> &entries);
void export_dataset(const std::vector<DatasetEntry> &entries, const std::filesystem::path &path);

/// Throws DatasetError naming the 1-based line of the first bad record.
std::vector<DatasetEntry> parse_jsonl(std::string_view text);
std::vector<DatasetEntry> import_dataset(const std::filesystem::path &path);

} // namespace figver::dataset
