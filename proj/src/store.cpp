#include "figver/store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>

#include <png.h>

#include "figver/digest.hpp"

namespace figver::store {

namespace fs = std::filesystem;
using nlohmann::json;
using dataset::DatasetEntry;
using dataset::FigureRecord;

// ---------------------------------------------------------------------------
// JSON forms

void to_json(json &j, const ProjectManifest &m) {
    j = json{{"project_id", m.project_id},
             {"schema_version", m.schema_version},
             {"paths",
              {{"images", m.paths.images},
               {"figures", m.paths.figures},
               {"dataset", m.paths.dataset},
               {"fixtures", m.paths.fixtures},
               {"reports", m.paths.reports},
               {"audit", m.paths.audit},
               {"manifest", m.paths.manifest}}},
             {"config", m.config}};
}

void from_json(const json &j, ProjectManifest &m) {
    m.project_id = j.at("project_id").get<std::string>();
    m.schema_version = j.at("schema_version").get<int>();
    m.paths = {};
    if (const auto p = j.find("paths"); p != j.end()) {
        auto get = [&](const char *key, std::string &out) {
            if (p->contains(key)) out = p->at(key).get<std::string>();
        };
        get("images", m.paths.images);
        get("figures", m.paths.figures);
        get("dataset", m.paths.dataset);
        get("fixtures", m.paths.fixtures);
        get("reports", m.paths.reports);
        get("audit", m.paths.audit);
        get("manifest", m.paths.manifest);
    }
    m.config = j.value("config", json::object());
}

void to_json(json &j, const AuditEvent &e) {
    j = json{{"seq", e.seq}, {"time", e.time}, {"actor", e.actor},
             {"action", e.action}, {"target", e.target}, {"detail", e.detail}};
}

void from_json(const json &j, AuditEvent &e) {
    e.seq = j.at("seq").get<std::uint64_t>();
    e.time = j.at("time").get<std::string>();
    e.actor = j.at("actor").get<std::string>();
    e.action = j.at("action").get<std::string>();
    e.target = j.at("target").get<std::string>();
    e.detail = j.value("detail", json::object());
}

// ---------------------------------------------------------------------------
// Files

std::string read_file(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StoreError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace {

constexpr const char *kTempSuffix = ".tmp";

[[noreturn]] void sys_fail(const std::string &what, const fs::path &path) {
    throw StoreError(what + " " + path.string() + ": " + std::strerror(errno));
}

void write_all(int fd, std::string_view data, const fs::path &path) {
    while (!data.empty()) {
        const auto n = ::write(fd, data.data(), data.size());
        if (n < 0) {
            if (errno == EINTR) continue;
            sys_fail("write", path);
        }
        data.remove_prefix(static_cast<std::size_t>(n));
    }
}

void fsync_dir(const fs::path &dir) {
    const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
    if (fd < 0) return;
    ::fsync(fd);
    ::close(fd);
}

bool valid_component(const std::string &id) {
    return !id.empty() && id != "." && id != ".." && id.find('/') == std::string::npos &&
           id.find('\0') == std::string::npos;
}

void check_component(const std::string &id, const char *what) {
    if (!valid_component(id)) throw StoreError(std::string("invalid ") + what + " '" + id + "'");
}

/// Splits JSON-Lines text, dropping a torn final line (no trailing newline
/// and not parseable). Returns the byte length of the intact prefix.
std::size_t intact_prefix(const std::string &text) {
    if (text.empty() || text.back() == '\n') return text.size();
    const auto cut = text.rfind('\n');
    const std::size_t start = cut == std::string::npos ? 0 : cut + 1;
    const auto tail = std::string_view(text).substr(start);
    if (json::accept(tail)) return text.size();
    return start;
}

void truncate_to(const fs::path &path, std::size_t size) {
    if (::truncate(path.c_str(), static_cast<off_t>(size)) != 0) sys_fail("truncate", path);
}

void remove_temp_files(const fs::path &dir) {
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) return;
    for (const auto &e : fs::recursive_directory_iterator(dir, ec)) {
        if (e.is_regular_file() && e.path().extension() == kTempSuffix) fs::remove(e.path(), ec);
    }
}

} // namespace

void write_file_atomic(const fs::path &path, std::string_view content) {
    const fs::path tmp = path.string() + kTempSuffix;
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0) sys_fail("create", tmp);
    try {
        write_all(fd, content, tmp);
        if (::fsync(fd) != 0) sys_fail("fsync", tmp);
    } catch (...) {
        ::close(fd);
        ::unlink(tmp.c_str());
        throw;
    }
    ::close(fd);
    if (::rename(tmp.c_str(), path.c_str()) != 0) {
        ::unlink(tmp.c_str());
        sys_fail("rename onto", path);
    }
    fsync_dir(path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    const auto us =
        std::chrono::duration_cast<std::chrono::microseconds>(now.time_since_epoch()).count() % 1000000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%06lldZ", tm.tm_year + 1900, tm.tm_mon + 1,
                  tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<long long>(us));
    return buf;
}

// ---------------------------------------------------------------------------
// Project lifecycle

Project::Project(Project &&o) noexcept
    : root_(std::move(o.root_)), manifest_(std::move(o.manifest_)), lock_fd_(std::exchange(o.lock_fd_, -1)),
      last_seq_(o.last_seq_), last_time_(std::move(o.last_time_)), entries_(std::move(o.entries_)),
      mutex_(std::move(o.mutex_)) {}

Project &Project::operator=(Project &&o) noexcept {
    if (this != &o) {
        if (lock_fd_ >= 0) ::close(lock_fd_);
        root_ = std::move(o.root_);
        manifest_ = std::move(o.manifest_);
        lock_fd_ = std::exchange(o.lock_fd_, -1);
        last_seq_ = o.last_seq_;
        last_time_ = std::move(o.last_time_);
        entries_ = std::move(o.entries_);
        mutex_ = std::move(o.mutex_);
    }
    return *this;
}

Project::~Project() {
    if (lock_fd_ >= 0) ::close(lock_fd_);
}

Project Project::create(const fs::path &root, std::string project_id) {
    check_component(project_id, "project id");
    fs::create_directories(root);
    if (fs::exists(root / "project.json")) throw StoreError("project already exists at " + root.string());
    ProjectManifest m;
    m.project_id = std::move(project_id);
    write_file_atomic(root / "project.json", json(m).dump(2) + "\n");
    return open(root, Access::write);
}

Project Project::open(const fs::path &root, Access access) {
    Project p;
    p.root_ = root;
    const auto manifest_path = root / "project.json";
    if (!fs::exists(manifest_path)) throw StoreError("not a project (no project.json): " + root.string());
    try {
        p.manifest_ = json::parse(read_file(manifest_path)).get<ProjectManifest>();
    } catch (const json::exception &e) {
        throw StoreError("malformed project.json in " + root.string() + ": " + e.what());
    }
    if (p.manifest_.schema_version != kSchemaVersion)
        throw StoreError("project schema version " + std::to_string(p.manifest_.schema_version) +
                         " is not supported (expected " + std::to_string(kSchemaVersion) + ")");

    if (access == Access::write) {
        const auto lock_path = root / ".lock";
        p.lock_fd_ = ::open(lock_path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
        if (p.lock_fd_ < 0) sys_fail("open", lock_path);
        if (::flock(p.lock_fd_, LOCK_EX | LOCK_NB) != 0) {
            ::close(std::exchange(p.lock_fd_, -1));
            throw LockedError("project " + root.string() + " is locked by another writer");
        }
        remove_temp_files(root);
        fs::create_directories(p.path_of(p.manifest_.paths.figures));
        fs::create_directories(p.path_of(p.manifest_.paths.reports));
    }

    const auto audit_path = p.path_of(p.manifest_.paths.audit);
    if (fs::exists(audit_path)) {
        const auto text = read_file(audit_path);
        const auto keep = intact_prefix(text);
        if (keep != text.size() && access == Access::write) truncate_to(audit_path, keep);
        std::string_view rest(text.data(), keep);
        std::size_t start = 0;
        while (start < rest.size()) {
            auto end = rest.find('\n', start);
            if (end == std::string_view::npos) end = rest.size();
            const auto line = rest.substr(start, end - start);
            if (!line.empty()) {
                const auto e = json::parse(line).get<AuditEvent>();
                p.last_seq_ = e.seq;
                p.last_time_ = e.time;
            }
            start = end + 1;
        }
    }
    p.load_entries();
    return p;
}

void Project::load_entries() {
    entries_.clear();
    const auto path = path_of(manifest_.paths.dataset);
    if (!fs::exists(path)) return;
    const auto text = read_file(path);
    const auto keep = intact_prefix(text);
    if (keep != text.size() && writable()) truncate_to(path, keep);
    std::vector<DatasetEntry> parsed;
    try {
        parsed = dataset::parse_jsonl(std::string_view(text.data(), keep));
    } catch (const dataset::DatasetError &e) {
        throw StoreError(path.string() + ": " + e.what());
    }
    for (auto &e : parsed) entries_.emplace(e.id, std::move(e));
}

ProjectManifest Project::manifest() const {
    std::lock_guard lock(*mutex_);
    return manifest_;
}

void Project::require_writer() const {
    if (!writable()) throw StoreError("project " + root_.string() + " is open read-only");
}

void Project::set_config_snapshot(const json &config) {
    require_writer();
    std::lock_guard lock(*mutex_);
    manifest_.config = config;
    write_file_atomic(root_ / "project.json", json(manifest_).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Figures

void Project::put_figure(const FigureRecord &figure) {
    require_writer();
    check_component(figure.id, "figure id");
    std::lock_guard lock(*mutex_);
    write_file_atomic(path_of(manifest_.paths.figures) / (figure.id + ".json"), json(figure).dump(2) + "\n");
}

std::optional<FigureRecord> Project::get_figure(const std::string &id) const {
    if (!valid_component(id)) return std::nullopt;
    const auto path = path_of(manifest_.paths.figures) / (id + ".json");
    if (!fs::exists(path)) return std::nullopt;
    return json::parse(read_file(path)).get<FigureRecord>();
}

std::vector<FigureRecord> Project::list_figures() const {
    std::vector<FigureRecord> out;
    const auto dir = path_of(manifest_.paths.figures);
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) return out;
    for (const auto &e : fs::directory_iterator(dir)) {
        if (e.path().extension() != ".json") continue;
        out.push_back(json::parse(read_file(e.path())).get<FigureRecord>());
    }
    std::sort(out.begin(), out.end(), [](const auto &a, const auto &b) { return a.id < b.id; });
    return out;
}

// ---------------------------------------------------------------------------
// Entries

void Project::write_entries_locked() {
    std::string text;
    for (const auto &[id, e] : entries_) {
        text += dataset::entry_line(e);
        text += '\n';
    }
    write_file_atomic(path_of(manifest_.paths.dataset), text);
}

void Project::put_entry(const DatasetEntry &entry) { put_entries({entry}); }

void Project::put_entries(const std::vector<DatasetEntry> &entries) {
    require_writer();
    for (const auto &e : entries)
        if (e.id.empty()) throw StoreError("dataset entry without an id");
    std::lock_guard lock(*mutex_);
    auto saved = entries_;
    for (const auto &e : entries) entries_.insert_or_assign(e.id, e);
    try {
        write_entries_locked();
    } catch (...) {
        entries_ = std::move(saved);
        throw;
    }
}

void Project::replace_entries(const std::vector<DatasetEntry> &entries) {
    require_writer();
    std::map<std::string, DatasetEntry> next;
    for (const auto &e : entries) {
        if (e.id.empty()) throw StoreError("dataset entry without an id");
        if (!next.emplace(e.id, e).second) throw StoreError("duplicate entry id '" + e.id + "'");
    }
    std::lock_guard lock(*mutex_);
    std::swap(entries_, next);
    try {
        write_entries_locked();
    } catch (...) {
        std::swap(entries_, next);
        throw;
    }
}

std::size_t Project::replace_auto_entries(const std::vector<DatasetEntry> &candidates) {
    require_writer();
    std::lock_guard lock(*mutex_);
    std::map<std::string, DatasetEntry> next;
    for (const auto &[id, e] : entries_)
        if (e.status != dataset::Status::auto_) next.emplace(id, e);
    const auto preserved = next.size();
    for (const auto &e : candidates) {
        if (e.id.empty()) throw StoreError("dataset entry without an id");
        next.emplace(e.id, e);
    }
    std::swap(entries_, next);
    try {
        write_entries_locked();
    } catch (...) {
        std::swap(entries_, next);
        throw;
    }
    return preserved;
}

std::optional<DatasetEntry> Project::get_entry(const std::string &id) const {
    std::lock_guard lock(*mutex_);
    const auto it = entries_.find(id);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

std::vector<DatasetEntry> Project::list_entries(const EntryFilter &filter) const {
    std::lock_guard lock(*mutex_);
    std::vector<DatasetEntry> out;
    for (const auto &[id, e] : entries_) {
        if (filter.status && e.status != *filter.status) continue;
        if (filter.figure_id && e.figure_id != *filter.figure_id) continue;
        out.push_back(e);
    }
    return out;
}

namespace {

AuditEvent append_audit_locked(const fs::path &path, std::uint64_t &last_seq, std::string &last_time,
                               const std::string &actor, const std::string &action, const std::string &target,
                               const json &detail) {
    AuditEvent e;
    e.seq = last_seq + 1;
    e.time = std::max(utc_now(), last_time);
    e.actor = actor;
    e.action = action;
    e.target = target;
    e.detail = detail;
    const auto line = json(e).dump() + "\n";
    const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) sys_fail("open", path);
    try {
        write_all(fd, line, path);
        if (::fsync(fd) != 0) sys_fail("fsync", path);
    } catch (...) {
        ::close(fd);
        throw;
    }
    ::close(fd);
    last_seq = e.seq;
    last_time = e.time;
    return e;
}

} // namespace

DatasetEntry Project::update_entry(const std::string &id, const std::string &actor, const std::string &action,
                                   const std::function<void(DatasetEntry &)> &mutate, const json &detail) {
    require_writer();
    std::lock_guard lock(*mutex_);
    const auto it = entries_.find(id);
    if (it == entries_.end())
        throw dataset::ReviewError(dataset::ReviewError::Kind::unknown_entry, "unknown entry '" + id + "'");
    DatasetEntry updated = it->second;
    mutate(updated);
    if (updated.id != id) throw StoreError("an update may not change the entry id");
    DatasetEntry previous = std::exchange(it->second, updated);
    try {
        write_entries_locked();
    } catch (...) {
        it->second = std::move(previous);
        throw;
    }
    append_audit_locked(path_of(manifest_.paths.audit), last_seq_, last_time_, actor, action, id, detail);
    return updated;
}

DatasetEntry Project::insert_entry(const std::string &actor, const std::string &action,
                                   const std::function<DatasetEntry(const std::vector<DatasetEntry> &)> &make,
                                   const json &detail) {
    require_writer();
    std::lock_guard lock(*mutex_);
    std::vector<DatasetEntry> current;
    current.reserve(entries_.size());
    for (const auto &[id, e] : entries_) current.push_back(e);
    DatasetEntry created = make(current);
    if (created.id.empty() || entries_.count(created.id))
        throw StoreError("cannot insert entry with id '" + created.id + "'");
    entries_.emplace(created.id, created);
    try {
        write_entries_locked();
    } catch (...) {
        entries_.erase(created.id);
        throw;
    }
    append_audit_locked(path_of(manifest_.paths.audit), last_seq_, last_time_, actor, action, created.id, detail);
    return created;
}

// ---------------------------------------------------------------------------
// Audit

AuditEvent Project::append_audit(const std::string &actor, const std::string &action, const std::string &target,
                                 const json &detail) {
    require_writer();
    std::lock_guard lock(*mutex_);
    return append_audit_locked(path_of(manifest_.paths.audit), last_seq_, last_time_, actor, action, target, detail);
}

std::vector<AuditEvent> Project::audit_log() const {
    std::vector<AuditEvent> out;
    const auto path = path_of(manifest_.paths.audit);
    std::lock_guard lock(*mutex_);
    if (!fs::exists(path)) return out;
    const auto text = read_file(path);
    std::istringstream in(text.substr(0, intact_prefix(text)));
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(json::parse(line).get<AuditEvent>());
    return out;
}

// ---------------------------------------------------------------------------
// Reports

StoredReport Project::put_report(const std::string &figure_id, const std::string &text_digest,
                                 const std::string &config_digest, const json &body) {
    require_writer();
    check_component(figure_id, "figure id");
    StoredReport r;
    r.key = hex_digest(figure_id + "\n" + text_digest + "\n" + config_digest);
    r.figure_id = figure_id;
    r.body = json{{"key", r.key},
                  {"figure", figure_id},
                  {"text_digest", text_digest},
                  {"config_digest", config_digest},
                  {"report", body}};
    std::lock_guard lock(*mutex_);
    const auto dir = path_of(manifest_.paths.reports) / figure_id;
    fs::create_directories(dir);
    const auto path = dir / (r.key + ".json");
    if (fs::exists(path)) {
        r.body = json::parse(read_file(path));
        return r;
    }
    write_file_atomic(path, r.body.dump(2) + "\n");
    append_audit_locked(path_of(manifest_.paths.audit), last_seq_, last_time_, "figver", "report", figure_id,
                        {{"key", r.key}});
    return r;
}

std::vector<StoredReport> Project::list_reports(const std::string &figure_id) const {
    std::vector<StoredReport> out;
    if (!valid_component(figure_id)) return out;
    const auto dir = path_of(manifest_.paths.reports) / figure_id;
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) return out;
    for (const auto &e : fs::directory_iterator(dir)) {
        if (e.path().extension() != ".json") continue;
        out.push_back({e.path().stem().string(), figure_id, json::parse(read_file(e.path()))});
    }
    std::sort(out.begin(), out.end(), [](const auto &a, const auto &b) { return a.key < b.key; });
    return out;
}

// ---------------------------------------------------------------------------
// Rasters

namespace {

bool is_png(const std::string &head) {
    return head.size() >= 8 && std::memcmp(head.data(), "\x89PNG\r\n\x1a\n", 8) == 0;
}

struct PnmHeader {
    int width = 0, height = 0, maxval = 0, channels = 0;
    std::size_t data_offset = 0;
};

PnmHeader parse_pnm_header(const std::string &bytes, const fs::path &path) {
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw StoreError("unsupported image format: " + path.string());
    PnmHeader h;
    h.channels = bytes[1] == '5' ? 1 : 3;
    std::size_t pos = 2;
    auto next_int = [&]() {
        for (;;) {
            while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos])))
            throw StoreError("malformed PNM header: " + path.string());
        long v = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + (bytes[pos++] - '0');
            if (v > 1 << 20) throw StoreError("PNM dimension too large: " + path.string());
        }
        return static_cast<int>(v);
    };
    h.width = next_int();
    h.height = next_int();
    h.maxval = next_int();
    if (h.width <= 0 || h.height <= 0 || h.maxval <= 0 || h.maxval > 255)
        throw StoreError("unsupported PNM header: " + path.string());
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw StoreError("malformed PNM header: " + path.string());
    h.data_offset = pos + 1;
    return h;
}

std::string read_head(const fs::path &path, std::size_t n) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StoreError("cannot read image " + path.string());
    std::string head(n, '\0');
    in.read(head.data(), static_cast<std::streamsize>(n));
    head.resize(static_cast<std::size_t>(in.gcount()));
    return head;
}

} // namespace

Raster load_raster(const fs::path &path) {
    const auto bytes = read_file(path);
    Raster r;
    if (is_png(bytes)) {
        png_image img{};
        img.version = PNG_IMAGE_VERSION;
        if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
            throw StoreError("cannot decode PNG " + path.string() + ": " + img.message);
        img.format = PNG_FORMAT_RGBA;
        r.width = static_cast<int>(img.width);
        r.height = static_cast<int>(img.height);
        r.channels = 4;
        r.pixels.resize(PNG_IMAGE_SIZE(img));
        if (!png_image_finish_read(&img, nullptr, r.pixels.data(), 0, nullptr)) {
            const std::string msg = img.message;
            png_image_free(&img);
            throw StoreError("cannot decode PNG " + path.string() + ": " + msg);
        }
        return r;
    }
    const auto h = parse_pnm_header(bytes, path);
    const std::size_t n = static_cast<std::size_t>(h.width) * h.height * h.channels;
    if (bytes.size() - h.data_offset < n) throw StoreError("truncated PNM data: " + path.string());
    r.width = h.width;
    r.height = h.height;
    r.channels = h.channels;
    r.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset),
                    bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset + n));
    if (h.maxval != 255)
        for (auto &p : r.pixels) p = static_cast<std::uint8_t>((p * 255 + h.maxval / 2) / h.maxval);
    return r;
}

std::pair<int, int> raster_size(const fs::path &path) {
    const auto head = read_head(path, 512);
    if (is_png(head)) {
        png_image img{};
        img.version = PNG_IMAGE_VERSION;
        if (!png_image_begin_read_from_file(&img, path.c_str()))
            throw StoreError("cannot decode PNG " + path.string() + ": " + img.message);
        const std::pair<int, int> wh{static_cast<int>(img.width), static_cast<int>(img.height)};
        png_image_free(&img);
        return wh;
    }
    const auto h = parse_pnm_header(head, path);
    return {h.width, h.height};
}

} // namespace figver::store
