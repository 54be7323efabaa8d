#pragma once

// One gateway over every neural capability the pipeline delegates: OCR,
// figure classification, prompted segmentation, attribute interpretation,
// existence checks, term recognition and free-text generation.
//
// Requests and responses travel as JSON envelopes through a Transport. Two
// transports exist: RemoteTransport (HTTP POST to /v1/<capability>) and
// FixtureTransport (a directory of canned responses, for offline runs).

#include <array>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "figver/geometry.hpp"

namespace figver::backends {

enum class Capability { ocr, classify, segment, interpret, exist, ner, generate };

inline constexpr std::array<Capability, 7> kAllCapabilities{
    Capability::ocr,   Capability::classify, Capability::segment, Capability::interpret,
    Capability::exist, Capability::ner,      Capability::generate};

std::string_view to_string(Capability c) noexcept;
std::optional<Capability> parse_capability(std::string_view s) noexcept;
/// "/v1/<name>"
std::string route(Capability c);

enum class ErrorKind { transport, timeout, malformed };
std::string_view to_string(ErrorKind k) noexcept;

class BackendError : public std::runtime_error {
  public:
    BackendError(ErrorKind kind, Capability capability, std::string endpoint, std::string cause);

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }
    [[nodiscard]] Capability capability() const noexcept { return capability_; }
    [[nodiscard]] const std::string &endpoint() const noexcept { return endpoint_; }
    [[nodiscard]] const std::string &cause() const noexcept { return cause_; }

  private:
    ErrorKind kind_;
    Capability capability_;
    std::string endpoint_;
    std::string cause_;
};

struct BackendDescriptor {
    Capability capability = Capability::ocr;
    std::string endpoint;  // "fixture:<dir>" or "http://host:port"
    double timeout_seconds = 60.0;
    int max_in_flight = 4;

    /// Throws std::invalid_argument on timeout <= 0 or max_in_flight < 1.
    void validate() const;
};

/// A figure image as sent to backends. `path` is project-relative.
struct ImageRef {
    std::string figure_id;
    std::string path;
    int width = 0;
    int height = 0;
};

struct SegmentPrompt {
    enum class Kind { text, point, box };
    Kind kind = Kind::text;
    std::optional<std::string> text;
    std::optional<Point> point;
    std::optional<BoundingBox> box;

    static SegmentPrompt with_text(std::string text);
    static SegmentPrompt with_point(Point p);
    static SegmentPrompt with_box(BoundingBox b);

    /// Exactly the field matching `kind` is present and lies on the grid.
    void validate(int width, int height) const;
};

/// The 19-way figure taxonomy used by the filtering stage.
const std::vector<std::string> &figure_taxonomy();
bool is_taxonomy_label(std::string_view label);
/// algorithm, architecture, neural-network, tree, graph
const std::vector<std::string> &default_kept_categories();

struct FigureCategory {
    std::string label;
    double confidence = 0.0;
};

struct TermSpan {
    std::string text;
    std::size_t start = 0;
    std::size_t end = 0;
};

/// Raw interpreter answer; any field may be the literal "Unknown".
struct InterpreterReply {
    std::string absolute_position;
    std::string relative_position;
    std::string semantic;
};

inline constexpr std::string_view kUnknown = "Unknown";

/// True for "Unknown" (any case, optional quotes/period) or blank text.
bool is_unknown(std::string_view answer);

/// Query wording sent to the interpreter.
std::string semantic_query(std::string_view module_name);
std::string spatial_query(std::string_view module_name);

/// Parses "Its absolute position is: X, and its relative position is: Y."
/// Returns nullopt if the answer follows neither that shape nor "Unknown".
std::optional<std::pair<std::string, std::string>> parse_spatial_answer(std::string_view answer);
/// Parses "Its function is X." (the prefix is optional).
std::string parse_semantic_answer(std::string_view answer);

struct ContextBlock {
    enum class Kind { text, image };
    Kind kind = Kind::text;
    std::string text;
    std::optional<ImageRef> image;
    std::string source;  // where the block came from, e.g. citation paper id
};

struct GenerateRequest {
    std::string purpose;
    std::string prompt;
    std::vector<ContextBlock> context;
};

void to_json(nlohmann::json &j, const ImageRef &r);
void to_json(nlohmann::json &j, const SegmentPrompt &p);
void to_json(nlohmann::json &j, const ContextBlock &b);
void to_json(nlohmann::json &j, const GenerateRequest &r);

// ---------------------------------------------------------------------------
// Transports

class Transport {
  public:
    virtual ~Transport() = default;
    /// Sends one request envelope and returns the parsed JSON reply. Throws
    /// BackendError (transport, timeout or malformed).
    virtual nlohmann::json call(Capability capability, const nlohmann::json &request) = 0;
    [[nodiscard]] virtual std::string endpoint(Capability capability) const = 0;
};

/// Canned responses read from a directory:
///
///   <dir>/<figure id>/figure.json      {"width","height","modules":[names]}
///   <dir>/<figure id>/<capability>.json
///   <dir>/_global/<capability>.json    requests without a figure (ner, generate)
///
/// A capability file is a list of {"request": pattern, ...} rules with one of
/// "response" (reply JSON), "raw" (reply text, parsed as JSON) or "error"
/// ("transport" | "timeout"). A rule matches when every key in its pattern
/// equals the request's value at that key; the first matching rule wins.
/// Requests with no matching rule get the per-capability default: no OCR
/// boxes, an empty mask, an all-"Unknown" interpretation, existence iff the
/// name is in figure.json's modules, no terms; classify and generate fail.
class FixtureTransport final : public Transport {
  public:
    explicit FixtureTransport(std::filesystem::path dir);

    nlohmann::json call(Capability capability, const nlohmann::json &request) override;
    [[nodiscard]] std::string endpoint(Capability capability) const override;

    [[nodiscard]] const std::filesystem::path &directory() const noexcept { return dir_; }

  private:
    struct FigureFixture {
        nlohmann::json info;
        std::map<Capability, nlohmann::json> rules;
    };

    const FigureFixture *figure(const std::string &id) const;
    nlohmann::json fallback(Capability capability, const nlohmann::json &request) const;

    std::filesystem::path dir_;
    std::map<std::string, FigureFixture> figures_;
};

struct RemoteOptions {
    double timeout_seconds = 60.0;
    bool inline_images = false;
    std::filesystem::path image_root;  // resolves ImageRef paths when inlining
};

/// JSON over HTTP POST, one route per capability.
class RemoteTransport final : public Transport {
  public:
    RemoteTransport(std::string base_url, RemoteOptions options);

    nlohmann::json call(Capability capability, const nlohmann::json &request) override;
    [[nodiscard]] std::string endpoint(Capability capability) const override;

  private:
    std::string base_url_;
    RemoteOptions options_;
};

std::string base64_encode(std::string_view bytes);

// ---------------------------------------------------------------------------
// Gateway

/// Caps concurrent calls; acquire() blocks while `limit` calls are active.
class InFlightLimiter {
  public:
    explicit InFlightLimiter(int limit);
    void acquire();
    void release();
    [[nodiscard]] int limit() const noexcept { return limit_; }

  private:
    std::mutex mutex_;
    std::condition_variable cv_;
    int limit_;
    int active_ = 0;
};

struct Route {
    std::shared_ptr<Transport> transport;
    BackendDescriptor descriptor;
};

class Gateway {
  public:
    explicit Gateway(std::map<Capability, Route> routes);

    /// Every capability routed to one transport with default limits.
    static std::shared_ptr<Gateway> uniform(std::shared_ptr<Transport> transport, int max_in_flight = 4,
                                            double timeout_seconds = 60.0);

    std::vector<TextBox> ocr(const ImageRef &image);
    FigureCategory classify(const ImageRef &image);
    BinaryMask segment(const ImageRef &image, const SegmentPrompt &prompt);
    InterpreterReply interpret(const ImageRef &image, std::string_view module_name);
    bool exists(const ImageRef &image, std::string_view module_name);
    std::vector<TermSpan> ner(std::string_view text);
    std::string generate(const GenerateRequest &request);

    [[nodiscard]] bool has(Capability c) const noexcept { return slots_.count(c) != 0; }
    [[nodiscard]] const BackendDescriptor &descriptor(Capability c) const;

  private:
    struct Slot {
        Route route;
        std::unique_ptr<InFlightLimiter> limiter;
    };

    nlohmann::json invoke(Capability c, const nlohmann::json &request);
    [[noreturn]] void malformed(Capability c, const std::string &cause) const;

    std::map<Capability, Slot> slots_;
};

} // namespace figver::backends
