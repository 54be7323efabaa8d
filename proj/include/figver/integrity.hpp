#pragma once

// Integrity verification: enumerate a figure's modules, pull terms out of
// the accompanying text, align each term and split the modules into the
// described set and the missed set. Integrity augmentation then drafts a
// description for a missed module from figures in cited work.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "figver/alignment.hpp"
#include "figver/backends.hpp"
#include "figver/dataset.hpp"
#include "figver/geometry.hpp"

namespace figver::integrity {

class IntegrityError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Raised when augmentation has nothing to reason from.
class NoEvidenceError : public IntegrityError {
  public:
    using IntegrityError::IntegrityError;
};

struct EnumeratedModule {
    std::string name;
    BinaryMask mask;
    double confidence = 1.0;
    BoundingBox anchor_box;
};

struct EnumerateOptions {
    dataset::Thresholds thresholds;
    /// Accept every non-empty text-prompted mask without the two gates.
    bool blind = false;
};

/// Anchors located with the dataset gates, then deduplicated: a module whose
/// mask overlaps an already kept one at IoU > dedup_iou is dropped, visiting
/// modules by descending anchor confidence (ties: anchor order).
std::vector<EnumeratedModule> enumerate_modules(const dataset::FigureRecord &figure, backends::Gateway &gateway,
                                                const EnumerateOptions &options);

/// NER terms, trimmed, deduplicated, first-mention order.
std::vector<std::string> extract_terms(std::string_view text, backends::Gateway &gateway);

struct AlignedModule {
    std::string term;
    std::size_t module_index = 0;
    std::string module_name;
    BinaryMask mask;
    double iou = 0.0;
};

struct MissedModule {
    std::size_t module_index = 0;
    std::string module_name;
    BinaryMask mask;
    double best_iou = 0.0;  // best term IoU, below the match threshold
};

struct IntegrityReport {
    std::string figure_id;
    std::string text_digest;
    std::vector<EnumeratedModule> modules;
    std::vector<std::string> terms;
    std::vector<AlignedModule> aligned;   // g+
    std::vector<MissedModule> missed;     // g-
    std::vector<std::string> unmatched_terms;
    std::vector<std::string> failed_terms;
    /// iou[t][m]: IoU of term t's final mask with module m.
    std::vector<std::vector<double>> iou;
    std::vector<alignment::AlignmentResult> alignments;

    /// True iff aligned and missed partition the enumerated modules.
    [[nodiscard]] bool partition_holds() const;
};

nlohmann::json to_json(const IntegrityReport &r);
std::string summarize(const IntegrityReport &r);

struct VerifyOptions {
    EnumerateOptions enumerate;
    alignment::AlignOptions align;
    int concurrency = 4;
};

/// Assigns modules given the aligned term masks: module m joins g+ iff some
/// term mask reaches IoU >= match_iou with it (best term wins, ties to the
/// earlier term); the rest form g-.
void assign_modules(IntegrityReport &report, const std::vector<std::optional<BinaryMask>> &term_masks,
                    double match_iou);

IntegrityReport verify_figure(const dataset::FigureRecord &figure, std::string_view text,
                              std::shared_ptr<backends::Gateway> gateway, const VerifyOptions &options);

// ---------------------------------------------------------------------------
// Augmentation

struct CitationFigure {
    std::string paper_id;
    backends::ImageRef figure;
    std::vector<std::string> paragraphs;
    double relevance = 0.0;
};

/// Manifest: [{"paper_id","figure_image","text_path","figure_id"?}]; paths
/// relative to the manifest's directory. `measure` supplies image sizes.
std::vector<CitationFigure> load_citation_corpus(const std::filesystem::path &manifest,
                                                 const dataset::RasterMeasure &measure);

struct EvidenceItem {
    std::string step;        // retrieval | relevance | qa | reader_questions | analogical | summary | interpreter
    std::string capability;  // backend capability invoked
    std::string source;      // citation paper id or target figure id
    std::string detail;
};

struct AugmentedDescription {
    std::string figure_id;
    std::string module_name;
    std::string description;
    bool degraded = false;
    std::vector<std::string> relevant_papers;
    std::vector<EvidenceItem> evidence;
};

nlohmann::json to_json(const AugmentedDescription &d);

AugmentedDescription augment_missing(const dataset::FigureRecord &figure, const std::string &module_name,
                                     std::vector<CitationFigure> corpus, std::shared_ptr<backends::Gateway> gateway,
                                     const alignment::AlignOptions &align_options = {});

} // namespace figver::integrity
