#pragma once

// Project persistence. A project is a directory:
//
//   project.json     manifest (id, schema version, paths, config snapshot)
//   figures/         one <figure id>.json per ingested figure
//   dataset.jsonl    dataset entries, one canonical line each, ordered by id
//   audit.log        append-only JSON-Lines event log
//   reports/         immutable report snapshots, reports/<figure>/<key>.json
//
// Files are replaced by write-to-temp then rename, so readers never observe
// a torn file. One writer per project is enforced with a lock file.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "figver/dataset.hpp"

namespace figver::store {

class StoreError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Another process (or handle) already holds the project's writer lock.
class LockedError : public StoreError {
  public:
    using StoreError::StoreError;
};

inline constexpr int kSchemaVersion = 1;

struct ProjectPaths {
    std::string images = "images";
    std::string figures = "figures";
    std::string dataset = "dataset.jsonl";
    std::string fixtures = "fixtures";
    std::string reports = "reports";
    std::string audit = "audit.log";
    std::string manifest = "manifest.json";  // extraction manifest

    friend bool operator==(const ProjectPaths &, const ProjectPaths &) = default;
};

struct ProjectManifest {
    std::string project_id;
    int schema_version = kSchemaVersion;
    ProjectPaths paths;
    nlohmann::json config = nlohmann::json::object();  // snapshot of the last build's RunConfig

    friend bool operator==(const ProjectManifest &, const ProjectManifest &) = default;
};

void to_json(nlohmann::json &j, const ProjectManifest &m);
void from_json(const nlohmann::json &j, ProjectManifest &m);

struct AuditEvent {
    std::uint64_t seq = 0;
    std::string time;  // ISO-8601 UTC, microseconds
    std::string actor;
    std::string action;
    std::string target;
    nlohmann::json detail = nlohmann::json::object();
};

void to_json(nlohmann::json &j, const AuditEvent &e);
void from_json(const nlohmann::json &j, AuditEvent &e);

struct EntryFilter {
    std::optional<dataset::Status> status;
    std::optional<std::string> figure_id;
};

struct StoredReport {
    std::string key;
    std::string figure_id;
    nlohmann::json body;
};

enum class Access { read, write };

/// Current UTC time as ISO-8601 with microseconds.
std::string utc_now();

class Project {
  public:
    /// Lays out a new project (fails if project.json exists) and opens it for writing.
    static Project create(const std::filesystem::path &root, std::string project_id);
    /// Opens an existing project. Write access takes the lock and repairs an
    /// interrupted write: stale temp files are removed and a torn final line
    /// of dataset.jsonl or audit.log is truncated.
    static Project open(const std::filesystem::path &root, Access access);

    Project(Project &&) noexcept;
    Project &operator=(Project &&) noexcept;
    Project(const Project &) = delete;
    Project &operator=(const Project &) = delete;
    ~Project();

    [[nodiscard]] const std::filesystem::path &root() const noexcept { return root_; }
    [[nodiscard]] ProjectManifest manifest() const;
    [[nodiscard]] std::filesystem::path resolve(const std::string &relative) const { return root_ / relative; }
    [[nodiscard]] bool writable() const noexcept { return lock_fd_ >= 0; }

    void set_config_snapshot(const nlohmann::json &config);

    // Figures
    void put_figure(const dataset::FigureRecord &figure);
    [[nodiscard]] std::optional<dataset::FigureRecord> get_figure(const std::string &id) const;
    [[nodiscard]] std::vector<dataset::FigureRecord> list_figures() const;

    // Entries
    void put_entry(const dataset::DatasetEntry &entry);
    void put_entries(const std::vector<dataset::DatasetEntry> &entries);
    /// Replaces the whole entry set.
    void replace_entries(const std::vector<dataset::DatasetEntry> &entries);
    /// Drops every auto entry and adds `candidates`, in one write; reviewed
    /// entries win over candidates with the same id. Returns how many
    /// reviewed entries were kept.
    std::size_t replace_auto_entries(const std::vector<dataset::DatasetEntry> &candidates);
    [[nodiscard]] std::optional<dataset::DatasetEntry> get_entry(const std::string &id) const;
    [[nodiscard]] std::vector<dataset::DatasetEntry> list_entries(const EntryFilter &filter = {}) const;

    /// Read-modify-write of one entry under the writer mutex; `mutate` may
    /// throw to abort without writing. Audits the change as `action`.
    dataset::DatasetEntry update_entry(const std::string &id, const std::string &actor, const std::string &action,
                                       const std::function<void(dataset::DatasetEntry &)> &mutate,
                                       const nlohmann::json &detail = nlohmann::json::object());
    /// Inserts a new entry built from the current entry set (used for ids
    /// that depend on existing entries). Audited as `action`.
    dataset::DatasetEntry insert_entry(const std::string &actor, const std::string &action,
                                       const std::function<dataset::DatasetEntry(const std::vector<dataset::DatasetEntry> &)> &make,
                                       const nlohmann::json &detail = nlohmann::json::object());

    // Audit
    AuditEvent append_audit(const std::string &actor, const std::string &action, const std::string &target,
                            const nlohmann::json &detail = nlohmann::json::object());
    [[nodiscard]] std::vector<AuditEvent> audit_log() const;

    // Reports
    /// Stores `body` under hex_digest(figure, text digest, config digest).
    /// An existing snapshot with that key is left untouched.
    StoredReport put_report(const std::string &figure_id, const std::string &text_digest,
                            const std::string &config_digest, const nlohmann::json &body);
    [[nodiscard]] std::vector<StoredReport> list_reports(const std::string &figure_id) const;

  private:
    Project() = default;
    void require_writer() const;
    void load_entries();
    void write_entries_locked();
    std::filesystem::path path_of(const std::string &rel) const { return root_ / rel; }

    std::filesystem::path root_;
    ProjectManifest manifest_;
    int lock_fd_ = -1;
    std::uint64_t last_seq_ = 0;
    std::string last_time_;
    std::map<std::string, dataset::DatasetEntry> entries_;
    mutable std::unique_ptr<std::mutex> mutex_ = std::make_unique<std::mutex>();
};

/// Atomically replaces `path` with `content` (temp file, fsync, rename).
void write_file_atomic(const std::filesystem::path &path, std::string_view content);
std::string read_file(const std::filesystem::path &path);

// ---------------------------------------------------------------------------
// Raster access

struct Raster {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 (gray) or 3 (RGB) or 4 (RGBA)
    std::vector<std::uint8_t> pixels;

    [[nodiscard]] std::uint8_t at(int x, int y, int c = 0) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

/// Decodes PNG (via libpng) or binary PNM (P5/P6).
Raster load_raster(const std::filesystem::path &path);
/// Width and height from the file header only.
std::pair<int, int> raster_size(const std::filesystem::path &path);

} // namespace figver::store
