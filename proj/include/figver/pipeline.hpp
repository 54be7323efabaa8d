#pragma once

// Whole-run operations shared by the CLI and the service.

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "figver/config.hpp"
#include "figver/integrity.hpp"
#include "figver/metrics.hpp"
#include "figver/store.hpp"

namespace figver::app {

struct BuildSummary {
    std::size_t ingested = 0;
    std::size_t kept_figures = 0;
    std::size_t anchors = 0;
    std::size_t candidates = 0;
    std::size_t preserved = 0;  // reviewed entries carried over from an earlier build
    std::size_t entries = 0;
};

nlohmann::json to_json(const BuildSummary &s);

/// Ingest, filter, locate and enhance every figure in the extraction
/// manifest, then rewrite dataset.jsonl. Entries that were already reviewed
/// (status other than auto) survive a rebuild unchanged.
BuildSummary run_build(store::Project &project, const RunConfig &config, backends::Gateway &gateway,
                       const std::filesystem::path &manifest, const std::string &actor = "figver");

/// verify_figure on a stored figure; the report is snapshotted in the project
/// when it is writable.
struct VerifyOutcome {
    integrity::IntegrityReport report;
    std::optional<store::StoredReport> stored;
};

VerifyOutcome run_verify(store::Project &project, const RunConfig &config,
                         std::shared_ptr<backends::Gateway> gateway, const std::string &figure_id,
                         const std::string &text, bool blind = false);

/// Segmentation pairs: every gold entry with status auto or accepted, matched
/// to the prediction with the same entry id (absent prediction = empty mask).
/// Detection: per figure, predicted vs gold entries with status missed.
metrics::EvalReport evaluate_datasets(const std::vector<dataset::DatasetEntry> &predicted,
                                      const std::vector<dataset::DatasetEntry> &gold, double iou_threshold);

/// Training samples for the project's accepted entries, one JSON per line.
std::string samples_jsonl(const std::vector<dataset::DatasetEntry> &entries, const dataset::Sampling &sampling);

} // namespace figver::app
