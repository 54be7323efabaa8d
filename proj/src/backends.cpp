#include "figver/backends.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include <httplib.h>

namespace figver::backends {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Names

std::string_view to_string(Capability c) noexcept {
    switch (c) {
    case Capability::ocr: return "ocr";
    case Capability::classify: return "classify";
    case Capability::segment: return "segment";
    case Capability::interpret: return "interpret";
    case Capability::exist: return "exist";
    case Capability::ner: return "ner";
    case Capability::generate: return "generate";
    }
    return "unknown";
}

std::optional<Capability> parse_capability(std::string_view s) noexcept {
    for (auto c : kAllCapabilities)
        if (to_string(c) == s) return c;
    return std::nullopt;
}

std::string route(Capability c) { return "/v1/" + std::string(to_string(c)); }

std::string_view to_string(ErrorKind k) noexcept {
    switch (k) {
    case ErrorKind::transport: return "transport";
    case ErrorKind::timeout: return "timeout";
    case ErrorKind::malformed: return "malformed";
    }
    return "unknown";
}

BackendError::BackendError(ErrorKind kind, Capability capability, std::string endpoint, std::string cause)
    : std::runtime_error(std::string(to_string(capability)) + " backend " + std::string(to_string(kind)) +
                         " error at " + endpoint + ": " + cause),
      kind_(kind), capability_(capability), endpoint_(std::move(endpoint)), cause_(std::move(cause)) {}

void BackendDescriptor::validate() const {
    if (!(timeout_seconds > 0))
        throw std::invalid_argument(std::string(to_string(capability)) + ": timeout must be positive");
    if (max_in_flight < 1)
        throw std::invalid_argument(std::string(to_string(capability)) + ": max_in_flight must be >= 1");
    if (endpoint.empty()) throw std::invalid_argument(std::string(to_string(capability)) + ": endpoint is empty");
}

// ---------------------------------------------------------------------------
// Prompts and taxonomy

SegmentPrompt SegmentPrompt::with_text(std::string text) {
    SegmentPrompt p;
    p.kind = Kind::text;
    p.text = std::move(text);
    return p;
}

SegmentPrompt SegmentPrompt::with_point(Point pt) {
    SegmentPrompt p;
    p.kind = Kind::point;
    p.point = pt;
    return p;
}

SegmentPrompt SegmentPrompt::with_box(BoundingBox b) {
    SegmentPrompt p;
    p.kind = Kind::box;
    p.box = b;
    return p;
}

void SegmentPrompt::validate(int width, int height) const {
    const int present = int(text.has_value()) + int(point.has_value()) + int(box.has_value());
    if (present != 1) throw std::invalid_argument("segment prompt must carry exactly one of text/point/box");
    switch (kind) {
    case Kind::text:
        if (!text || text->empty()) throw std::invalid_argument("text prompt is empty");
        break;
    case Kind::point:
        if (!point || point->x < 0 || point->y < 0 || point->x > width || point->y > height)
            throw std::invalid_argument("point prompt lies outside the figure");
        break;
    case Kind::box:
        if (!box || !box->valid() || box->x_max <= 0 || box->y_max <= 0 || box->x_min >= width ||
            box->y_min >= height)
            throw std::invalid_argument("box prompt does not overlap the figure");
        break;
    }
}

const std::vector<std::string> &figure_taxonomy() {
    static const std::vector<std::string> labels{
        "algorithm",     "architecture", "bar-chart",   "boxplot",        "confusion-matrix",
        "graph",         "line-chart",   "map",         "natural-image",  "neural-network",
        "nlp-grammar",   "pareto",       "pie-chart",   "scatter-plot",   "screenshot",
        "table",         "tree",         "venn-diagram", "word-cloud"};
    return labels;
}

bool is_taxonomy_label(std::string_view label) {
    const auto &t = figure_taxonomy();
    return std::find(t.begin(), t.end(), label) != t.end();
}

const std::vector<std::string> &default_kept_categories() {
    static const std::vector<std::string> kept{"algorithm", "architecture", "neural-network", "tree", "graph"};
    return kept;
}

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto &ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return out;
}

std::string_view strip_answer(std::string_view s) {
    s = trim(s);
    while (!s.empty() && (s.back() == '.' || s.back() == '\'' || s.back() == '"')) s.remove_suffix(1);
    while (!s.empty() && (s.front() == '\'' || s.front() == '"')) s.remove_prefix(1);
    return trim(s);
}

} // namespace

bool is_unknown(std::string_view answer) {
    const auto s = strip_answer(answer);
    return s.empty() || lower(s) == "unknown";
}

std::string semantic_query(std::string_view module_name) {
    return "<image> Please describe the function of the module '" + std::string(module_name) +
           "' in the diagram in one sentence using the format: Its function is XX. If you cannot identify "
           "the module from the picture, please directly answer 'Unknown'.";
}

std::string spatial_query(std::string_view module_name) {
    return "<image> Please tell me the position of the module '" + std::string(module_name) +
           "' in the figure using the following format: Its absolute position is: XX, and its relative "
           "position is: XX. If you cannot identify the module from the picture, please directly answer "
           "'Unknown'.";
}

std::optional<std::pair<std::string, std::string>> parse_spatial_answer(std::string_view answer) {
    if (is_unknown(answer)) return std::pair{std::string(kUnknown), std::string(kUnknown)};
    const std::string text(trim(answer));
    const std::string low = lower(text);
    constexpr std::string_view abs_key = "absolute position is:";
    constexpr std::string_view rel_key = "relative position is:";
    const auto a = low.find(abs_key);
    const auto r = low.find(rel_key);
    if (a == std::string::npos || r == std::string::npos || r < a) return std::nullopt;

    std::string_view abs_part(text.data() + a + abs_key.size(), r - a - abs_key.size());
    // Drop the ", and its" joint between the two clauses.
    abs_part = trim(abs_part);
    const std::string abs_low = lower(abs_part);
    if (const auto joint = abs_low.rfind(", and its"); joint != std::string::npos)
        abs_part = abs_part.substr(0, joint);
    else if (const auto joint2 = abs_low.rfind("and its"); joint2 != std::string::npos)
        abs_part = abs_part.substr(0, joint2);
    std::string_view rel_part(text.data() + r + rel_key.size(), text.size() - r - rel_key.size());

    auto clean = [](std::string_view v) {
        v = strip_answer(v);
        while (!v.empty() && v.back() == ',') v.remove_suffix(1);
        return is_unknown(v) ? std::string(kUnknown) : std::string(trim(v));
    };
    return std::pair{clean(abs_part), clean(rel_part)};
}

std::string parse_semantic_answer(std::string_view answer) {
    if (is_unknown(answer)) return std::string(kUnknown);
    std::string_view s = trim(answer);
    constexpr std::string_view prefix = "its function is";
    if (lower(s.substr(0, std::min(s.size(), prefix.size()))) == prefix) {
        s.remove_prefix(prefix.size());
        s = trim(s);
        if (!s.empty() && s.front() == ':') s.remove_prefix(1);
    }
    const auto out = strip_answer(s);
    return out.empty() ? std::string(kUnknown) : std::string(out);
}

// ---------------------------------------------------------------------------
// JSON envelopes

void to_json(json &j, const ImageRef &r) {
    j = json{{"figure", r.figure_id}, {"path", r.path}, {"width", r.width}, {"height", r.height}};
}

void to_json(json &j, const SegmentPrompt &p) {
    switch (p.kind) {
    case SegmentPrompt::Kind::text: j = json{{"kind", "text"}, {"text", p.text.value_or("")}}; break;
    case SegmentPrompt::Kind::point: j = json{{"kind", "point"}, {"x", p.point->x}, {"y", p.point->y}}; break;
    case SegmentPrompt::Kind::box: j = json{{"kind", "box"}, {"box", *p.box}}; break;
    }
}

void to_json(json &j, const ContextBlock &b) {
    j = json{{"kind", b.kind == ContextBlock::Kind::text ? "text" : "image"}, {"source", b.source}};
    if (!b.text.empty()) j["text"] = b.text;
    if (b.image) j["image"] = *b.image;
}

void to_json(json &j, const GenerateRequest &r) {
    j = json{{"purpose", r.purpose}, {"prompt", r.prompt}, {"context", r.context}};
}

// ---------------------------------------------------------------------------
// FixtureTransport

namespace {

json read_json_file(const fs::path &path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception &e) {
        throw std::runtime_error("malformed JSON in " + path.string() + ": " + e.what());
    }
}

bool pattern_matches(const json &pattern, const json &value) {
    if (pattern.is_object()) {
        if (!value.is_object()) return false;
        for (const auto &[key, sub] : pattern.items()) {
            const auto it = value.find(key);
            if (it == value.end() || !pattern_matches(sub, *it)) return false;
        }
        return true;
    }
    if (pattern.is_number() && value.is_number()) return pattern.get<double>() == value.get<double>();
    return pattern == value;
}

constexpr std::string_view kGlobalFixture = "_global";

} // namespace

FixtureTransport::FixtureTransport(fs::path dir) : dir_(std::move(dir)) {
    if (!fs::is_directory(dir_)) throw std::runtime_error("fixture directory not found: " + dir_.string());
    for (const auto &entry : fs::directory_iterator(dir_)) {
        if (!entry.is_directory()) continue;
        FigureFixture fx;
        const auto info_path = entry.path() / "figure.json";
        if (fs::exists(info_path)) fx.info = read_json_file(info_path);
        for (auto c : kAllCapabilities) {
            const auto p = entry.path() / (std::string(to_string(c)) + ".json");
            if (!fs::exists(p)) continue;
            auto rules = read_json_file(p);
            if (!rules.is_array()) throw std::runtime_error(p.string() + ": fixture rules must be a list");
            fx.rules.emplace(c, std::move(rules));
        }
        figures_.emplace(entry.path().filename().string(), std::move(fx));
    }
}

std::string FixtureTransport::endpoint(Capability capability) const {
    return "fixture:" + dir_.string() + route(capability);
}

const FixtureTransport::FigureFixture *FixtureTransport::figure(const std::string &id) const {
    const auto it = figures_.find(id);
    return it == figures_.end() ? nullptr : &it->second;
}

json FixtureTransport::call(Capability capability, const json &request) {
    std::string figure_id(kGlobalFixture);
    if (const auto it = request.find("image"); it != request.end() && it->is_object())
        figure_id = it->value("figure", std::string(kGlobalFixture));

    if (const auto *fx = figure(figure_id)) {
        if (const auto r = fx->rules.find(capability); r != fx->rules.end()) {
            for (const auto &rule : r->second) {
                if (!pattern_matches(rule.value("request", json::object()), request)) continue;
                if (const auto err = rule.find("error"); err != rule.end()) {
                    const auto kind = err->get<std::string>();
                    throw BackendError(kind == "timeout" ? ErrorKind::timeout : ErrorKind::transport, capability,
                                       endpoint(capability), "fixture-injected " + kind + " failure");
                }
                if (const auto raw = rule.find("raw"); raw != rule.end()) {
                    try {
                        return json::parse(raw->get<std::string>());
                    } catch (const json::exception &e) {
                        throw BackendError(ErrorKind::malformed, capability, endpoint(capability),
                                           std::string("unparseable reply: ") + e.what());
                    }
                }
                return rule.value("response", json::object());
            }
        }
    }
    return fallback(capability, request);
}

json FixtureTransport::fallback(Capability capability, const json &request) const {
    switch (capability) {
    case Capability::ocr: return json{{"boxes", json::array()}};
    case Capability::segment: {
        const auto &img = request.at("image");
        return json{{"mask", BinaryMask::empty(img.at("width").get<int>(), img.at("height").get<int>())}};
    }
    case Capability::interpret:
        return json{{"absolute_position", kUnknown}, {"relative_position", kUnknown}, {"semantic", kUnknown}};
    case Capability::exist: {
        bool found = false;
        const auto figure_id = request.at("image").value("figure", std::string{});
        if (const auto *fx = figure(figure_id); fx && fx->info.contains("modules")) {
            const auto name = request.value("module", std::string{});
            for (const auto &m : fx->info.at("modules"))
                if (m.get<std::string>() == name) found = true;
        }
        return json{{"exists", found}};
    }
    case Capability::ner: return json{{"terms", json::array()}};
    case Capability::classify:
    case Capability::generate: break;
    }
    throw BackendError(ErrorKind::malformed, capability, endpoint(capability), "no fixture rule matches request");
}

// ---------------------------------------------------------------------------
// RemoteTransport

std::string base64_encode(std::string_view bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char *>(out.data()),
                                  reinterpret_cast<const unsigned char *>(bytes.data()),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

RemoteTransport::RemoteTransport(std::string base_url, RemoteOptions options)
    : base_url_(std::move(base_url)), options_(std::move(options)) {
    while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
}

std::string RemoteTransport::endpoint(Capability capability) const { return base_url_ + route(capability); }

json RemoteTransport::call(Capability capability, const json &request) {
    json body = request;
    if (options_.inline_images) {
        if (auto it = body.find("image"); it != body.end() && it->is_object() && it->contains("path")) {
            const auto path = options_.image_root / it->at("path").get<std::string>();
            std::ifstream in(path, std::ios::binary);
            if (!in)
                throw BackendError(ErrorKind::transport, capability, endpoint(capability),
                                   "cannot read image " + path.string());
            std::ostringstream bytes;
            bytes << in.rdbuf();
            (*it)["base64"] = base64_encode(bytes.str());
        }
    }

    httplib::Client client(base_url_);
    const auto whole = std::chrono::duration<double>(options_.timeout_seconds);
    const auto us = std::chrono::duration_cast<std::chrono::microseconds>(whole);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(us).count(),
                                  static_cast<time_t>(us.count() % 1000000));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(us).count(),
                            static_cast<time_t>(us.count() % 1000000));
    client.set_write_timeout(std::chrono::duration_cast<std::chrono::seconds>(us).count(),
                             static_cast<time_t>(us.count() % 1000000));

    const auto started = std::chrono::steady_clock::now();
    auto res = client.Post(route(capability), body.dump(), "application/json");
    if (!res) {
        const auto err = res.error();
        const auto elapsed = std::chrono::steady_clock::now() - started;
        const bool timed_out = err == httplib::Error::ConnectionTimeout ||
                               (err == httplib::Error::Read && elapsed >= whole * 0.95);
        throw BackendError(timed_out ? ErrorKind::timeout : ErrorKind::transport, capability,
                           endpoint(capability), httplib::to_string(err));
    }
    if (res->status >= 500)
        throw BackendError(ErrorKind::transport, capability, endpoint(capability),
                           "HTTP " + std::to_string(res->status));
    if (res->status != 200)
        throw BackendError(ErrorKind::malformed, capability, endpoint(capability),
                           "HTTP " + std::to_string(res->status) + ": " + res->body);
    try {
        return json::parse(res->body);
    } catch (const json::exception &e) {
        throw BackendError(ErrorKind::malformed, capability, endpoint(capability),
                           std::string("unparseable reply: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Gateway

InFlightLimiter::InFlightLimiter(int limit) : limit_(limit) {
    if (limit < 1) throw std::invalid_argument("in-flight limit must be >= 1");
}

void InFlightLimiter::acquire() {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return active_ < limit_; });
    ++active_;
}

void InFlightLimiter::release() {
    {
        std::lock_guard lock(mutex_);
        --active_;
    }
    cv_.notify_one();
}

namespace {

class LimiterGuard {
  public:
    explicit LimiterGuard(InFlightLimiter &l) : l_(l) { l_.acquire(); }
    ~LimiterGuard() { l_.release(); }
    LimiterGuard(const LimiterGuard &) = delete;
    LimiterGuard &operator=(const LimiterGuard &) = delete;

  private:
    InFlightLimiter &l_;
};

} // namespace

Gateway::Gateway(std::map<Capability, Route> routes) {
    for (auto &[cap, r] : routes) {
        if (!r.transport) throw std::invalid_argument(std::string(to_string(cap)) + ": no transport");
        r.descriptor.capability = cap;
        r.descriptor.validate();
        auto limiter = std::make_unique<InFlightLimiter>(r.descriptor.max_in_flight);
        slots_.emplace(cap, Slot{std::move(r), std::move(limiter)});
    }
}

std::shared_ptr<Gateway> Gateway::uniform(std::shared_ptr<Transport> transport, int max_in_flight,
                                          double timeout_seconds) {
    std::map<Capability, Route> routes;
    for (auto c : kAllCapabilities)
        routes.emplace(c, Route{transport, BackendDescriptor{c, transport->endpoint(c), timeout_seconds, max_in_flight}});
    return std::make_shared<Gateway>(std::move(routes));
}

const BackendDescriptor &Gateway::descriptor(Capability c) const {
    const auto it = slots_.find(c);
    if (it == slots_.end()) throw std::out_of_range(std::string("no backend configured for ") + std::string(to_string(c)));
    return it->second.route.descriptor;
}

void Gateway::malformed(Capability c, const std::string &cause) const {
    const auto it = slots_.find(c);
    throw BackendError(ErrorKind::malformed, c,
                       it == slots_.end() ? std::string("?") : it->second.route.transport->endpoint(c), cause);
}

json Gateway::invoke(Capability c, const json &request) {
    const auto it = slots_.find(c);
    if (it == slots_.end())
        throw BackendError(ErrorKind::transport, c, "(unconfigured)", "no backend configured for capability");
    Slot &slot = it->second;
    LimiterGuard guard(*slot.limiter);
    try {
        return slot.route.transport->call(c, request);
    } catch (const BackendError &e) {
        if (e.kind() != ErrorKind::transport) throw;
    }
    // One retry on transport failure; malformed replies and timeouts are final.
    return slot.route.transport->call(c, request);
}

namespace {

template <typename T>
T field(const json &j, const char *key) {
    return j.at(key).get<T>();
}

} // namespace

std::vector<TextBox> Gateway::ocr(const ImageRef &image) {
    const auto reply = invoke(Capability::ocr, json{{"image", image}});
    std::vector<TextBox> boxes;
    try {
        const auto &list = reply.at("boxes");
        if (!list.is_array()) malformed(Capability::ocr, "'boxes' is not a list");
        for (std::size_t i = 0; i < list.size(); ++i) {
            auto box = list[i].get<TextBox>();
            if (box.id.empty()) box.id = "t" + std::to_string(i);
            boxes.push_back(std::move(box));
        }
    } catch (const BackendError &) {
        throw;
    } catch (const std::exception &e) {
        malformed(Capability::ocr, e.what());
    }
    return boxes;
}

FigureCategory Gateway::classify(const ImageRef &image) {
    const auto reply = invoke(Capability::classify, json{{"image", image}});
    FigureCategory cat;
    try {
        cat.label = field<std::string>(reply, "label");
        cat.confidence = reply.value("confidence", 1.0);
    } catch (const std::exception &e) {
        malformed(Capability::classify, e.what());
    }
    if (!is_taxonomy_label(cat.label)) malformed(Capability::classify, "label '" + cat.label + "' not in taxonomy");
    if (!(cat.confidence >= 0.0 && cat.confidence <= 1.0)) malformed(Capability::classify, "confidence outside [0,1]");
    return cat;
}

BinaryMask Gateway::segment(const ImageRef &image, const SegmentPrompt &prompt) {
    prompt.validate(image.width, image.height);
    const auto reply = invoke(Capability::segment, json{{"image", image}, {"prompt", prompt}});
    BinaryMask mask;
    try {
        mask = reply.at("mask").get<BinaryMask>();
    } catch (const std::exception &e) {
        malformed(Capability::segment, e.what());
    }
    if (mask.width() != image.width || mask.height() != image.height)
        malformed(Capability::segment, "mask is " + std::to_string(mask.width()) + "x" + std::to_string(mask.height()) +
                                           ", figure is " + std::to_string(image.width) + "x" +
                                           std::to_string(image.height));
    return mask;
}

InterpreterReply Gateway::interpret(const ImageRef &image, std::string_view module_name) {
    if (module_name.empty()) throw std::invalid_argument("interpret: module name is empty");
    const auto reply = invoke(Capability::interpret,
                              json{{"image", image},
                                   {"module", module_name},
                                   {"queries", {{"semantic", semantic_query(module_name)},
                                                {"spatial", spatial_query(module_name)}}}});
    InterpreterReply out;
    try {
        if (reply.contains("spatial_answer") || reply.contains("semantic_answer")) {
            const auto spatial = parse_spatial_answer(reply.value("spatial_answer", std::string(kUnknown)));
            if (!spatial) malformed(Capability::interpret, "spatial answer does not follow the position format");
            out.absolute_position = spatial->first;
            out.relative_position = spatial->second;
            out.semantic = parse_semantic_answer(reply.value("semantic_answer", std::string(kUnknown)));
        } else {
            out.absolute_position = field<std::string>(reply, "absolute_position");
            out.relative_position = field<std::string>(reply, "relative_position");
            out.semantic = field<std::string>(reply, "semantic");
        }
    } catch (const BackendError &) {
        throw;
    } catch (const std::exception &e) {
        malformed(Capability::interpret, e.what());
    }
    return out;
}

bool Gateway::exists(const ImageRef &image, std::string_view module_name) {
    const auto reply = invoke(Capability::exist, json{{"image", image}, {"module", module_name}});
    const auto it = reply.find("exists");
    if (it == reply.end() || !it->is_boolean()) malformed(Capability::exist, "reply lacks boolean 'exists'");
    return it->get<bool>();
}

std::vector<TermSpan> Gateway::ner(std::string_view text) {
    std::vector<TermSpan> terms;
    if (text.empty()) return terms;
    const auto reply = invoke(Capability::ner, json{{"text", text}});
    try {
        for (const auto &t : reply.at("terms")) {
            TermSpan span;
            if (t.is_string()) {
                span.text = t.get<std::string>();
            } else {
                span.text = field<std::string>(t, "text");
                span.start = t.value("start", std::size_t{0});
                span.end = t.value("end", span.start + span.text.size());
            }
            terms.push_back(std::move(span));
        }
    } catch (const std::exception &e) {
        malformed(Capability::ner, e.what());
    }
    return terms;
}

std::string Gateway::generate(const GenerateRequest &request) {
    const auto reply = invoke(Capability::generate, json(request));
    const auto it = reply.find("text");
    if (it == reply.end() || !it->is_string() || it->get<std::string>().empty())
        malformed(Capability::generate, "reply lacks non-empty 'text'");
    return it->get<std::string>();
}

} // namespace figver::backends
