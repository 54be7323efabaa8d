#include "figver/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace figver::dataset {

namespace fs = std::filesystem;
using nlohmann::json;
using alignment::AttributeKind;

void Thresholds::validate() const {
    if (!(min_pixel > 0)) throw std::invalid_argument("thresholds.min_pixel must be positive");
    auto ratio = [](double v, const char *name) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string("thresholds.") + name + " must lie in [0,1]");
    };
    ratio(min_iou, "min_iou");
    ratio(consistency_iou, "consistency_iou");
    ratio(dedup_iou, "dedup_iou");
    if (!(match_iou > 0.0 && match_iou <= 1.0)) throw std::invalid_argument("thresholds.match_iou must lie in (0,1]");
}

void Sampling::validate() const {
    if (alpha < 1 || alpha > 8) throw std::invalid_argument("sampling.alpha must lie in [1,8]");
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw std::invalid_argument("sampling.beta must be >= 0");
}

// ---------------------------------------------------------------------------
// Records

void to_json(json &j, const FigureRecord &f) {
    j = json{{"id", f.id},         {"paper_id", f.paper_id}, {"image", f.image},
             {"caption", f.caption}, {"page", f.page},       {"width", f.width},
             {"height", f.height},   {"provenance", f.provenance}};
    j["year"] = f.year ? json(*f.year) : json(nullptr);
    j["category"] = f.category ? json{{"label", f.category->label}, {"confidence", f.category->confidence}} : json(nullptr);
    if (!f.paragraphs.empty()) j["paragraphs"] = f.paragraphs;
}

void from_json(const json &j, FigureRecord &f) {
    f.id = j.at("id").get<std::string>();
    f.paper_id = j.value("paper_id", std::string{});
    f.image = j.at("image").get<std::string>();
    f.caption = j.value("caption", std::string{});
    f.page = j.value("page", 0);
    f.width = j.at("width").get<int>();
    f.height = j.at("height").get<int>();
    f.provenance = j.value("provenance", std::string{});
    f.year.reset();
    if (const auto it = j.find("year"); it != j.end() && !it->is_null()) f.year = it->get<int>();
    f.category.reset();
    if (const auto it = j.find("category"); it != j.end() && !it->is_null())
        f.category = backends::FigureCategory{it->at("label").get<std::string>(), it->value("confidence", 1.0)};
    f.paragraphs = j.value("paragraphs", std::vector<std::string>{});
}

std::string_view to_string(Status s) noexcept {
    switch (s) {
    case Status::auto_: return "auto";
    case Status::accepted: return "accepted";
    case Status::rejected: return "rejected";
    case Status::missed: return "missed";
    }
    return "unknown";
}

Status parse_status(std::string_view s) {
    if (s == "auto") return Status::auto_;
    if (s == "accepted") return Status::accepted;
    if (s == "rejected") return Status::rejected;
    if (s == "missed") return Status::missed;
    throw DatasetError("unknown status '" + std::string(s) + "'");
}

void to_json(json &j, const DatasetEntry &e) {
    json log = json::array();
    for (const auto &ev : e.review_log)
        log.push_back({{"actor", ev.actor}, {"timestamp", ev.timestamp}, {"decision", ev.decision}});
    j = json{{"id", e.id},
             {"figure", e.figure_id},
             {"module", e.module_name},
             {"mask", e.mask},
             {"attributes", e.attributes},
             {"paragraph", e.paragraph},
             {"status", to_string(e.status)},
             {"review_log", log},
             {"anchor_box", e.anchor_box ? json(*e.anchor_box) : json(nullptr)},
             {"anchor_confidence", e.anchor_confidence}};
}

void from_json(const json &j, DatasetEntry &e) {
    e.id = j.at("id").get<std::string>();
    e.figure_id = j.at("figure").get<std::string>();
    e.module_name = j.at("module").get<std::string>();
    e.mask = j.at("mask").get<BinaryMask>();
    e.attributes = j.at("attributes").get<alignment::AttributeSet>();
    e.paragraph = j.value("paragraph", std::string{});
    e.status = parse_status(j.at("status").get<std::string>());
    e.review_log.clear();
    for (const auto &ev : j.value("review_log", json::array()))
        e.review_log.push_back({ev.at("actor").get<std::string>(), ev.at("timestamp").get<std::string>(),
                                ev.at("decision").get<std::string>()});
    e.anchor_box.reset();
    if (const auto it = j.find("anchor_box"); it != j.end() && !it->is_null()) e.anchor_box = it->get<BoundingBox>();
    e.anchor_confidence = j.value("anchor_confidence", 1.0);
    if (e.id.empty() || e.figure_id.empty() || e.module_name.empty())
        throw DatasetError("entry needs non-empty id, figure and module");
    if (e.status == Status::missed && !e.paragraph.empty())
        throw DatasetError("missed entry '" + e.id + "' must not link a paragraph");
}

// ---------------------------------------------------------------------------
// Ingest and filter

namespace {

std::string lower(std::string s) {
    for (auto &ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return s;
}

json read_json(const fs::path &path) {
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception &e) {
        throw DatasetError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

std::string first_mentioning(const std::vector<std::string> &paragraphs, const std::string &name) {
    const auto needle = lower(name);
    for (const auto &p : paragraphs)
        if (lower(p).find(needle) != std::string::npos) return p;
    return {};
}

} // namespace

std::vector<FigureRecord> ingest_figures(const fs::path &manifest, const fs::path &image_root,
                                         const RasterMeasure &measure) {
    const json doc = read_json(manifest);
    const json *items = &doc;
    std::string provenance = "unknown";
    if (doc.is_object()) {
        if (!doc.contains("figures")) throw DatasetError(manifest.string() + ": manifest object lacks 'figures'");
        items = &doc.at("figures");
        if (const auto it = doc.find("extractor"); it != doc.end())
            provenance = it->value("name", std::string("unknown")) + " " + it->value("version", std::string{});
    }
    if (!items->is_array()) throw DatasetError(manifest.string() + ": manifest must list figures");

    std::vector<FigureRecord> records;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < items->size(); ++i) {
        const auto &item = (*items)[i];
        try {
            if (lower(item.value("kind", std::string("figure"))) != "figure") continue;
            FigureRecord r;
            r.id = item.at("figure_id").get<std::string>();
            r.paper_id = item.value("paper_id", std::string{});
            r.image = item.at("image").get<std::string>();
            r.caption = item.value("caption", std::string{});
            r.page = item.value("page", 0);
            if (const auto y = item.find("year"); y != item.end() && !y->is_null()) r.year = y->get<int>();
            r.paragraphs = item.value("paragraphs", std::vector<std::string>{});
            r.provenance = provenance;
            if (!seen.insert(r.id).second) throw DatasetError("duplicate figure id '" + r.id + "'");
            const auto path = image_root / r.image;
            if (!fs::exists(path)) throw DatasetError("image not found: " + path.string());
            std::tie(r.width, r.height) = measure(path);
            records.push_back(std::move(r));
        } catch (const DatasetError &) {
            throw;
        } catch (const std::exception &e) {
            throw DatasetError(manifest.string() + ": item " + std::to_string(i) + ": " + e.what());
        }
    }
    return records;
}

std::vector<FigureRecord> filter_figures(std::vector<FigureRecord> records, const std::vector<std::string> &allowed,
                                         backends::Gateway &gateway) {
    std::vector<FigureRecord> kept;
    if (allowed.empty()) return kept;
    for (auto &r : records) {
        try {
            r.category = gateway.classify(r.image_ref());
        } catch (const std::exception &e) {
            throw DatasetError("classifying figure '" + r.id + "': " + e.what());
        }
        if (std::find(allowed.begin(), allowed.end(), r.category->label) != allowed.end()) kept.push_back(std::move(r));
    }
    return kept;
}

std::vector<TextBox> extract_anchor_texts(const FigureRecord &figure, backends::Gateway &gateway,
                                          const Thresholds &thresholds) {
    auto boxes = gateway.ocr(figure.image_ref());
    std::erase_if(boxes, [](const TextBox &b) {
        return std::all_of(b.text.begin(), b.text.end(), [](unsigned char c) { return std::isspace(c); });
    });
    return merge_text_boxes(boxes, thresholds.min_pixel);
}

// ---------------------------------------------------------------------------
// Localisation

GateCheck check_gates(const BinaryMask &text_mask, const BinaryMask &point_mask, const BoundingBox &anchor,
                      const Thresholds &thresholds) {
    GateCheck g;
    g.consistency = mask_iou(text_mask, point_mask);
    g.anchor = mask_iou(BinaryMask::from_box(text_mask.width(), text_mask.height(), anchor), text_mask);
    g.kept = g.consistency > thresholds.consistency_iou && g.anchor >= thresholds.min_iou;
    return g;
}

std::vector<LocatedModule> locate_anchors(const FigureRecord &figure, const std::vector<TextBox> &anchors,
                                          backends::Gateway &gateway, const Thresholds &thresholds) {
    const auto image = figure.image_ref();
    std::vector<LocatedModule> out;
    out.reserve(anchors.size());
    for (const auto &anchor : anchors) {
        try {
            auto text_mask = gateway.segment(image, backends::SegmentPrompt::with_text(anchor.text));
            const auto point_mask = gateway.segment(image, backends::SegmentPrompt::with_point(centroid(anchor.box)));
            const auto gates = check_gates(text_mask, point_mask, anchor.box, thresholds);
            out.push_back({anchor, std::move(text_mask), gates});
        } catch (const std::exception &e) {
            throw DatasetError("locating anchor '" + anchor.text + "' in figure '" + figure.id + "': " + e.what());
        }
    }
    return out;
}

std::vector<DatasetEntry> locate_modules(const FigureRecord &figure, const std::vector<TextBox> &anchors,
                                         backends::Gateway &gateway, const Thresholds &thresholds) {
    std::vector<DatasetEntry> entries;
    for (auto &located : locate_anchors(figure, anchors, gateway, thresholds)) {
        if (!located.gates.kept) continue;
        char suffix[16];
        std::snprintf(suffix, sizeof suffix, "-%03zu", entries.size());
        DatasetEntry e;
        e.id = figure.id + suffix;
        e.figure_id = figure.id;
        e.module_name = located.anchor.text;
        e.mask = std::move(located.mask);
        e.attributes.name = located.anchor.text;
        e.paragraph = first_mentioning(figure.paragraphs, located.anchor.text);
        e.status = Status::auto_;
        e.anchor_box = located.anchor.box;
        e.anchor_confidence = located.anchor.confidence;
        entries.push_back(std::move(e));
    }
    return entries;
}

DatasetEntry enhance_semantics(DatasetEntry entry, const FigureRecord &figure, backends::Gateway &gateway) {
    try {
        entry.attributes =
            alignment::AttributeSet::from_reply(entry.module_name, gateway.interpret(figure.image_ref(), entry.module_name));
    } catch (const std::exception &e) {
        throw DatasetError("interpreting '" + entry.module_name + "' in figure '" + figure.id + "': " + e.what());
    }
    return entry;
}

// ---------------------------------------------------------------------------
// Review

std::string_view to_string(Decision d) noexcept { return d == Decision::accepted ? "accepted" : "rejected"; }

Decision parse_decision(std::string_view s) {
    if (s == "accepted" || s == "accept") return Decision::accepted;
    if (s == "rejected" || s == "reject") return Decision::rejected;
    throw ReviewError(ReviewError::Kind::invalid_request, "decision must be 'accepted' or 'rejected'");
}

void apply_decision(DatasetEntry &entry, Decision decision, const std::string &actor, const std::string &timestamp) {
    if (entry.status != Status::auto_)
        throw ReviewError(ReviewError::Kind::illegal_transition,
                          "entry '" + entry.id + "' is " + std::string(to_string(entry.status)) + "; only auto entries can be " +
                              std::string(to_string(decision)));
    entry.status = decision == Decision::accepted ? Status::accepted : Status::rejected;
    entry.review_log.push_back({actor, timestamp, std::string(to_string(decision))});
}

DatasetEntry make_missed_entry(const FigureRecord &figure, std::string entry_id, std::string module_name,
                               const BoundingBox &box, const std::string &actor, const std::string &timestamp) {
    if (!box.valid() || box.x_max <= 0 || box.y_max <= 0 || box.x_min >= figure.width || box.y_min >= figure.height)
        throw ReviewError(ReviewError::Kind::invalid_request, "missed-module box does not overlap the figure");
    if (module_name.empty()) throw ReviewError(ReviewError::Kind::invalid_request, "missed module needs a name");
    DatasetEntry e;
    e.id = std::move(entry_id);
    e.figure_id = figure.id;
    e.attributes.name = module_name;
    e.module_name = std::move(module_name);
    e.mask = BinaryMask::from_box(figure.width, figure.height, box);
    e.status = Status::missed;
    e.anchor_box = box;
    e.review_log.push_back({actor, timestamp, "mark_missed"});
    return e;
}

std::string next_missed_id(const std::string &figure_id, const std::vector<DatasetEntry> &existing) {
    std::set<std::string> ids;
    for (const auto &e : existing) ids.insert(e.id);
    for (std::size_t k = 0;; ++k) {
        char suffix[24];
        std::snprintf(suffix, sizeof suffix, "-m%03zu", k);
        auto id = figure_id + suffix;
        if (!ids.count(id)) return id;
    }
}

// ---------------------------------------------------------------------------
// Lexicon and frequencies

bool Lexicon::contains(const std::string &name) const {
    return std::any_of(entries.begin(), entries.end(), [&](const LexiconEntry &e) { return e.name == name; });
}

namespace {

std::string trimmed(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return std::string(s);
}

Lexicon lexicon_from_counts(const std::map<std::string, std::uint64_t> &counts) {
    Lexicon lex;
    for (const auto &[name, n] : counts) lex.entries.push_back({name, n});
    std::stable_sort(lex.entries.begin(), lex.entries.end(),
                     [](const LexiconEntry &a, const LexiconEntry &b) { return a.count > b.count; });
    return lex;
}

} // namespace

Lexicon build_lexicon(const std::vector<DatasetEntry> &entries) {
    std::map<std::string, std::uint64_t> counts;
    for (const auto &e : entries) {
        if (e.status == Status::rejected) continue;
        auto name = trimmed(e.module_name);
        if (!name.empty()) ++counts[name];
    }
    return lexicon_from_counts(counts);
}

FrequencyReport module_frequency_report(const std::vector<DatasetEntry> &entries,
                                        const std::vector<FigureRecord> &figures) {
    std::map<std::string, std::optional<int>> year_of;
    for (const auto &f : figures) year_of[f.id] = f.year;

    std::map<std::string, std::uint64_t> overall;
    std::map<int, std::map<std::string, std::uint64_t>> per_year;
    for (const auto &e : entries) {
        if (e.status == Status::rejected) continue;
        auto name = trimmed(e.module_name);
        if (name.empty()) continue;
        ++overall[name];
        if (const auto it = year_of.find(e.figure_id); it != year_of.end() && it->second) ++per_year[*it->second][name];
    }
    FrequencyReport r;
    r.overall = lexicon_from_counts(overall);
    for (const auto &[year, counts] : per_year) r.by_year.emplace(year, lexicon_from_counts(counts));
    return r;
}

void to_json(json &j, const FrequencyReport &r) {
    auto lex = [](const Lexicon &l) {
        json a = json::array();
        for (const auto &e : l.entries) a.push_back({{"name", e.name}, {"count", e.count}});
        return a;
    };
    j = json{{"overall", lex(r.overall)}, {"by_year", json::object()}};
    for (const auto &[year, l] : r.by_year) j["by_year"][std::to_string(year)] = lex(l);
}

// ---------------------------------------------------------------------------
// Samples

std::uint64_t SampleRng::below(std::uint64_t bound) {
    if (bound == 0) throw std::invalid_argument("SampleRng::below(0)");
    // Rejection sampling over the largest multiple of bound.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t v;
    do {
        v = engine_();
    } while (v >= limit);
    return v % bound;
}

void to_json(json &j, const TrainingSample &s) {
    json used = json::array();
    for (auto k : s.attributes_used) used.push_back(alignment::to_string(k));
    j = json{{"id", s.id},
             {"figure", s.figure_id},
             {"question", s.question},
             {"answer", s.answer},
             {"polarity", s.polarity == Polarity::positive ? "positive" : "negative"},
             {"attributes_used", used},
             {"target_mask", s.target_mask ? json(*s.target_mask) : json(nullptr)}};
}

std::vector<TrainingSample> build_training_samples(const std::vector<DatasetEntry> &entries, const Sampling &sampling,
                                                   const Lexicon &lexicon) {
    sampling.validate();

    std::map<std::string, std::set<std::string>> figure_names;
    for (const auto &e : entries) figure_names[e.figure_id].insert(trimmed(e.module_name));

    std::vector<const DatasetEntry *> accepted;
    for (const auto &e : entries)
        if (e.status == Status::accepted) accepted.push_back(&e);
    std::sort(accepted.begin(), accepted.end(), [](auto *a, auto *b) { return a->id < b->id; });

    constexpr AttributeKind kinds[] = {AttributeKind::absolute, AttributeKind::relative, AttributeKind::semantic};
    const double per_entry_negatives = sampling.beta * sampling.alpha;
    auto negatives_through = [&](std::size_t n) {
        return static_cast<std::size_t>(std::floor(per_entry_negatives * static_cast<double>(n) + 1e-9));
    };

    SampleRng rng(sampling.seed);
    std::vector<TrainingSample> samples;
    for (std::size_t idx = 0; idx < accepted.size(); ++idx) {
        const DatasetEntry &e = *accepted[idx];
        if (e.mask.is_empty()) throw DatasetError("accepted entry '" + e.id + "' has an empty mask");

        // Subsets of the present attributes, in bitmask order (abs=1, rel=2, sem=4).
        unsigned present = 0;
        for (unsigned b = 0; b < 3; ++b)
            if (e.attributes.get(kinds[b])) present |= 1u << b;
        std::vector<unsigned> subsets;
        for (unsigned m = 0; m < 8; ++m)
            if ((m & ~present) == 0) subsets.push_back(m);
        if (static_cast<std::size_t>(sampling.alpha) > subsets.size())
            throw DatasetError("entry '" + e.id + "': alpha " + std::to_string(sampling.alpha) + " exceeds the " +
                               std::to_string(subsets.size()) + " available attribute subsets");

        // Partial Fisher-Yates: the first alpha slots are the draw.
        for (std::size_t k = 0; k < static_cast<std::size_t>(sampling.alpha); ++k) {
            const auto j = k + static_cast<std::size_t>(rng.below(subsets.size() - k));
            std::swap(subsets[k], subsets[j]);
            const unsigned m = subsets[k];

            TrainingSample s;
            s.id = e.id + "/p" + std::to_string(k);
            s.figure_id = e.figure_id;
            s.polarity = Polarity::positive;
            alignment::AttributeSet chosen;
            chosen.name = e.attributes.name.empty() ? e.module_name : e.attributes.name;
            for (unsigned b = 0; b < 3; ++b) {
                if (!(m & (1u << b))) continue;
                s.attributes_used.push_back(kinds[b]);
                switch (kinds[b]) {
                case AttributeKind::absolute: chosen.absolute_position = e.attributes.absolute_position; break;
                case AttributeKind::relative: chosen.relative_position = e.attributes.relative_position; break;
                case AttributeKind::semantic: chosen.semantic = e.attributes.semantic; break;
                case AttributeKind::name_only: break;
                }
            }
            s.question = alignment::build_query(chosen);
            s.answer = std::string(kPositiveAnswer);
            s.target_mask = e.mask;
            samples.push_back(std::move(s));
        }

        const std::size_t n_neg = negatives_through(idx + 1) - negatives_through(idx);
        if (n_neg == 0) continue;
        const auto &exclude = figure_names[e.figure_id];
        std::vector<std::string> candidates;
        for (const auto &le : lexicon.entries)
            if (!exclude.count(le.name)) candidates.push_back(le.name);
        if (candidates.empty())
            throw DatasetError("entry '" + e.id + "': lexicon has no module name outside figure '" + e.figure_id + "'");
        for (std::size_t k = 0; k < n_neg; ++k) {
            TrainingSample s;
            s.id = e.id + "/n" + std::to_string(k);
            s.figure_id = e.figure_id;
            s.polarity = Polarity::negative;
            alignment::AttributeSet neg;
            neg.name = candidates[rng.below(candidates.size())];
            s.question = alignment::build_query(neg);
            s.answer = std::string(kNegativeAnswer);
            s.target_mask = BinaryMask::empty(e.mask.width(), e.mask.height());
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

// ---------------------------------------------------------------------------
// JSON-Lines

std::string entry_line(const DatasetEntry &entry) { return json(entry).dump(); }

std::string export_jsonl(const std::vector<DatasetEntry> &entries) {
    std::vector<const DatasetEntry *> sorted;
    for (const auto &e : entries) sorted.push_back(&e);
    std::sort(sorted.begin(), sorted.end(), [](auto *a, auto *b) { return a->id < b->id; });
    std::string out;
    for (const auto *e : sorted) {
        out += entry_line(*e);
        out += '\n';
    }
    return out;
}

void export_dataset(const std::vector<DatasetEntry> &entries, const fs::path &path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DatasetError("cannot write " + path.string());
    out << export_jsonl(entries);
    if (!out) throw DatasetError("write failed for " + path.string());
}

std::vector<DatasetEntry> parse_jsonl(std::string_view text) {
    std::vector<DatasetEntry> entries;
    std::set<std::string> ids;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto nl = text.find('\n', pos);
        const auto line = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() : nl + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        try {
            auto e = json::parse(line).get<DatasetEntry>();
            if (!ids.insert(e.id).second) throw DatasetError("duplicate entry id '" + e.id + "'");
            entries.push_back(std::move(e));
        } catch (const std::exception &e) {
            throw DatasetError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return entries;
}

std::vector<DatasetEntry> import_dataset(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError("cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse_jsonl(buf.str());
    } catch (const DatasetError &e) {
        throw DatasetError(path.string() + ": " + e.what());
    }
}

} // namespace figver::dataset
