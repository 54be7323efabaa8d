#include "figver/alignment.hpp"

#include <atomic>
#include <chrono>
#include <future>
#include <thread>

namespace figver::alignment {

using nlohmann::json;

std::string_view to_string(AttributeKind k) noexcept {
    switch (k) {
    case AttributeKind::absolute: return "abs";
    case AttributeKind::relative: return "rel";
    case AttributeKind::semantic: return "sem";
    case AttributeKind::name_only: return "name";
    }
    return "unknown";
}

std::string_view to_string(Mode m) noexcept { return m == Mode::full ? "full" : "simplified"; }

Mode parse_mode(std::string_view s) {
    if (s == "full") return Mode::full;
    if (s == "simplified") return Mode::simplified;
    throw std::invalid_argument("mode must be 'full' or 'simplified', got '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// AttributeSet

namespace {

std::optional<std::string> clean_attribute(const std::string &raw) {
    if (backends::is_unknown(raw)) return std::nullopt;
    std::string_view s = raw;
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && (std::isspace(static_cast<unsigned char>(s.back())) || s.back() == '.')) s.remove_suffix(1);
    if (s.empty()) return std::nullopt;
    return std::string(s);
}

const std::optional<std::string> kNone;

} // namespace

AttributeSet AttributeSet::from_reply(std::string name, const backends::InterpreterReply &reply) {
    AttributeSet a;
    a.name = std::move(name);
    a.absolute_position = clean_attribute(reply.absolute_position);
    a.relative_position = clean_attribute(reply.relative_position);
    a.semantic = clean_attribute(reply.semantic);
    return a;
}

const std::optional<std::string> &AttributeSet::get(AttributeKind k) const {
    switch (k) {
    case AttributeKind::absolute: return absolute_position;
    case AttributeKind::relative: return relative_position;
    case AttributeKind::semantic: return semantic;
    case AttributeKind::name_only: break;
    }
    return kNone;
}

AttributeSet AttributeSet::only(std::initializer_list<AttributeKind> kinds) const {
    AttributeSet out;
    out.name = name;
    for (auto k : kinds) {
        switch (k) {
        case AttributeKind::absolute: out.absolute_position = absolute_position; break;
        case AttributeKind::relative: out.relative_position = relative_position; break;
        case AttributeKind::semantic: out.semantic = semantic; break;
        case AttributeKind::name_only: break;
        }
    }
    return out;
}

void to_json(json &j, const AttributeSet &a) {
    j = json{{"name", a.name}};
    j["abs"] = a.absolute_position ? json(*a.absolute_position) : json(nullptr);
    j["rel"] = a.relative_position ? json(*a.relative_position) : json(nullptr);
    j["sem"] = a.semantic ? json(*a.semantic) : json(nullptr);
}

void from_json(const json &j, AttributeSet &a) {
    a.name = j.at("name").get<std::string>();
    if (a.name.empty()) throw std::invalid_argument("attribute set has an empty name");
    auto opt = [&](const char *key) -> std::optional<std::string> {
        const auto it = j.find(key);
        if (it == j.end() || it->is_null()) return std::nullopt;
        auto s = it->get<std::string>();
        if (s.empty()) throw std::invalid_argument(std::string("attribute '") + key + "' is an empty string");
        return s;
    };
    a.absolute_position = opt("abs");
    a.relative_position = opt("rel");
    a.semantic = opt("sem");
}

std::string build_query(const AttributeSet &a) {
    std::string q = "<image> Segment the corresponding module from the figure based on the given attributes: name: ";
    q += a.name;
    if (a.semantic) q += ", function: " + *a.semantic;
    if (a.relative_position) q += ", relative position: " + *a.relative_position;
    if (a.absolute_position) q += ", absolute position: " + *a.absolute_position;
    q += '.';
    return q;
}

// ---------------------------------------------------------------------------
// Results

bool operator==(const AlignmentResult &a, const AlignmentResult &b) {
    return a.figure_id == b.figure_id && a.module_name == b.module_name && a.exists == b.exists &&
           a.attributes == b.attributes && a.per_attribute_masks == b.per_attribute_masks &&
           a.final_mask == b.final_mask && a.mode == b.mode;
}

json to_json(const AlignmentResult &r, bool include_timing) {
    json masks = json::object();
    for (const auto &[kind, mask] : r.per_attribute_masks) masks[std::string(to_string(kind))] = mask;
    json j{{"figure", r.figure_id},
           {"module", r.module_name},
           {"exists", r.exists},
           {"mode", to_string(r.mode)},
           {"attributes", r.attributes ? json(*r.attributes) : json(nullptr)},
           {"per_attribute_masks", masks},
           {"final_mask", r.final_mask}};
    if (include_timing)
        j["timing_ms"] = {{"exists", r.timing.exists_ms},
                          {"interpret", r.timing.interpret_ms},
                          {"segment", r.timing.segment_ms},
                          {"vote", r.timing.vote_ms}};
    return j;
}

StageError::StageError(std::string stage, std::string module, const std::exception &cause)
    : std::runtime_error("alignment of '" + module + "' failed at stage " + stage + ": " + cause.what()),
      stage_(std::move(stage)) {}

// ---------------------------------------------------------------------------
// Aligner

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

template <typename F>
auto staged(const char *stage, const std::string &module, F &&f) {
    try {
        return f();
    } catch (const StageError &) {
        throw;
    } catch (const std::exception &e) {
        throw StageError(stage, module, e);
    }
}

} // namespace

AlignmentResult Aligner::align(const backends::ImageRef &figure, const std::string &module_name,
                               const AlignOptions &options) const {
    if (module_name.empty()) throw std::invalid_argument("module name is empty");
    AlignmentResult r;
    r.figure_id = figure.figure_id;
    r.module_name = module_name;
    r.mode = options.mode;
    r.final_mask = BinaryMask::empty(figure.width, figure.height);

    if (options.mode == Mode::full) {
        const auto t0 = Clock::now();
        r.exists = staged("exists", module_name, [&] { return gateway_->exists(figure, module_name); });
        r.timing.exists_ms = ms_since(t0);
        if (!r.exists) return r;
    }

    const auto t1 = Clock::now();
    const auto reply = staged("interpret", module_name, [&] { return gateway_->interpret(figure, module_name); });
    r.attributes = AttributeSet::from_reply(module_name, reply);
    r.timing.interpret_ms = ms_since(t1);

    std::vector<std::pair<AttributeKind, AttributeSet>> branches;
    for (auto kind : {AttributeKind::absolute, AttributeKind::relative, AttributeKind::semantic})
        if (r.attributes->get(kind)) branches.emplace_back(kind, r.attributes->only({kind}));

    if (branches.empty()) {
        // Simplified mode lets the interpreter decide existence.
        if (options.mode == Mode::simplified) {
            r.exists = false;
            return r;
        }
        branches.emplace_back(AttributeKind::name_only, r.attributes->only({}));
    }
    r.exists = true;

    const auto t2 = Clock::now();
    auto segment = [&](const AttributeSet &attrs) {
        return staged("segment", module_name, [&] {
            return gateway_->segment(figure, backends::SegmentPrompt::with_text(build_query(attrs)));
        });
    };
    std::vector<BinaryMask> masks(branches.size());
    if (options.parallel_branches && branches.size() > 1) {
        std::vector<std::future<BinaryMask>> pending;
        for (const auto &b : branches) pending.push_back(std::async(std::launch::async, segment, std::cref(b.second)));
        for (std::size_t i = 0; i < pending.size(); ++i) masks[i] = pending[i].get();
    } else {
        for (std::size_t i = 0; i < branches.size(); ++i) masks[i] = segment(branches[i].second);
    }
    r.timing.segment_ms = ms_since(t2);

    const auto t3 = Clock::now();
    for (std::size_t i = 0; i < branches.size(); ++i) r.per_attribute_masks.emplace(branches[i].first, masks[i]);
    r.final_mask = mask_vote(masks);
    r.timing.vote_ms = ms_since(t3);
    return r;
}

std::vector<Aligner::BatchItem> Aligner::align_batch(const backends::ImageRef &figure,
                                                     const std::vector<std::string> &names,
                                                     const AlignOptions &options, int concurrency) const {
    if (concurrency < 1) throw std::invalid_argument("concurrency limit must be >= 1");
    std::vector<BatchItem> items(names.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < names.size(); i = next++) {
            items[i].module_name = names[i];
            try {
                items[i].result = align(figure, names[i], options);
            } catch (const std::exception &e) {
                items[i].error = e.what();
            }
        }
    };
    const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(concurrency), names.size());
    if (n_workers <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    }
    return items;
}

} // namespace figver::alignment
