#include "figver/integrity.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "figver/digest.hpp"

namespace figver::integrity {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trimmed(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return std::string(s);
}

} // namespace

// ---------------------------------------------------------------------------
// Enumeration and terms

std::vector<EnumeratedModule> enumerate_modules(const dataset::FigureRecord &figure, backends::Gateway &gateway,
                                                const EnumerateOptions &options) {
    const auto anchors = dataset::extract_anchor_texts(figure, gateway, options.thresholds);
    const auto located = dataset::locate_anchors(figure, anchors, gateway, options.thresholds);

    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < located.size(); ++i) {
        const bool ok = options.blind ? !located[i].mask.is_empty() : located[i].gates.kept;
        if (ok) candidates.push_back(i);
    }
    std::vector<std::size_t> by_confidence = candidates;
    std::stable_sort(by_confidence.begin(), by_confidence.end(), [&](std::size_t a, std::size_t b) {
        return located[a].anchor.confidence > located[b].anchor.confidence;
    });

    std::vector<bool> keep(located.size(), false);
    std::vector<std::size_t> kept;
    for (auto i : by_confidence) {
        const bool duplicate = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
            return mask_iou(located[i].mask, located[k].mask) > options.thresholds.dedup_iou;
        });
        if (duplicate) continue;
        kept.push_back(i);
        keep[i] = true;
    }

    std::vector<EnumeratedModule> modules;
    for (auto i : candidates) {
        if (!keep[i]) continue;
        const auto &l = located[i];
        modules.push_back({l.anchor.text, l.mask, l.anchor.confidence, l.anchor.box});
    }
    return modules;
}

std::vector<std::string> extract_terms(std::string_view text, backends::Gateway &gateway) {
    std::vector<std::string> terms;
    const auto body = trimmed(text);
    if (body.empty()) return terms;
    std::set<std::string> seen;
    for (const auto &span : gateway.ner(body)) {
        auto t = trimmed(span.text);
        if (!t.empty() && seen.insert(t).second) terms.push_back(std::move(t));
    }
    return terms;
}

// ---------------------------------------------------------------------------
// Verification

bool IntegrityReport::partition_holds() const {
    std::vector<int> seen(modules.size(), 0);
    for (const auto &a : aligned) {
        if (a.module_index >= modules.size()) return false;
        ++seen[a.module_index];
    }
    for (const auto &m : missed) {
        if (m.module_index >= modules.size()) return false;
        ++seen[m.module_index];
    }
    return std::all_of(seen.begin(), seen.end(), [](int n) { return n == 1; });
}

void assign_modules(IntegrityReport &report, const std::vector<std::optional<BinaryMask>> &term_masks,
                    double match_iou) {
    const std::size_t n_terms = report.terms.size();
    const std::size_t n_mods = report.modules.size();
    report.iou.assign(n_terms, std::vector<double>(n_mods, 0.0));
    for (std::size_t t = 0; t < n_terms; ++t) {
        if (!term_masks[t]) continue;
        for (std::size_t m = 0; m < n_mods; ++m) report.iou[t][m] = mask_iou(*term_masks[t], report.modules[m].mask);
    }

    report.aligned.clear();
    report.missed.clear();
    std::vector<bool> term_used(n_terms, false);
    for (std::size_t m = 0; m < n_mods; ++m) {
        std::optional<std::size_t> best;
        double best_iou = 0.0;
        for (std::size_t t = 0; t < n_terms; ++t) {
            if (!term_masks[t]) continue;
            const double v = report.iou[t][m];
            if (v > best_iou || (!best && v >= best_iou)) {
                best_iou = v;
                best = t;
            }
        }
        const auto &mod = report.modules[m];
        if (best && best_iou >= match_iou) {
            report.aligned.push_back({report.terms[*best], m, mod.name, mod.mask, best_iou});
        } else {
            report.missed.push_back({m, mod.name, mod.mask, best ? best_iou : 0.0});
        }
    }
    for (std::size_t t = 0; t < n_terms; ++t)
        for (std::size_t m = 0; m < n_mods; ++m)
            if (term_masks[t] && report.iou[t][m] >= match_iou) term_used[t] = true;

    report.unmatched_terms.clear();
    for (std::size_t t = 0; t < n_terms; ++t)
        if (term_masks[t] && !term_used[t]) report.unmatched_terms.push_back(report.terms[t]);
}

IntegrityReport verify_figure(const dataset::FigureRecord &figure, std::string_view text,
                              std::shared_ptr<backends::Gateway> gateway, const VerifyOptions &options) {
    IntegrityReport report;
    report.figure_id = figure.id;
    report.text_digest = hex_digest(text);
    try {
        report.modules = enumerate_modules(figure, *gateway, options.enumerate);
    } catch (const std::exception &e) {
        throw IntegrityError(std::string("enumerate stage: ") + e.what());
    }
    try {
        report.terms = extract_terms(text, *gateway);
    } catch (const std::exception &e) {
        throw IntegrityError(std::string("term extraction stage: ") + e.what());
    }

    alignment::Aligner aligner(gateway);
    const auto batch = aligner.align_batch(figure.image_ref(), report.terms, options.align, options.concurrency);
    std::vector<std::optional<BinaryMask>> term_masks(report.terms.size());
    for (std::size_t t = 0; t < batch.size(); ++t) {
        if (batch[t].result) {
            term_masks[t] = batch[t].result->final_mask;
            report.alignments.push_back(*batch[t].result);
        } else {
            report.failed_terms.push_back(report.terms[t] + ": " + batch[t].error.value_or("unknown error"));
        }
    }
    assign_modules(report, term_masks, options.enumerate.thresholds.match_iou);
    return report;
}

json to_json(const IntegrityReport &r) {
    json modules = json::array();
    for (const auto &m : r.modules)
        modules.push_back({{"name", m.name}, {"mask", m.mask}, {"confidence", m.confidence}, {"anchor_box", m.anchor_box}});
    json aligned = json::array();
    for (const auto &a : r.aligned)
        aligned.push_back({{"term", a.term}, {"module_index", a.module_index}, {"module", a.module_name},
                           {"mask", a.mask}, {"iou", a.iou}});
    json missed = json::array();
    for (const auto &m : r.missed)
        missed.push_back({{"module_index", m.module_index}, {"module", m.module_name}, {"mask", m.mask},
                          {"best_iou", m.best_iou}});
    json alignments = json::array();
    for (const auto &a : r.alignments) alignments.push_back(alignment::to_json(a, false));
    return json{{"figure", r.figure_id},
                {"text_digest", r.text_digest},
                {"modules", modules},
                {"terms", r.terms},
                {"aligned", aligned},
                {"missed", missed},
                {"unmatched_terms", r.unmatched_terms},
                {"failed_terms", r.failed_terms},
                {"evidence", {{"iou", r.iou}, {"alignments", alignments}}}};
}

std::string summarize(const IntegrityReport &r) {
    std::ostringstream out;
    out << "figure " << r.figure_id << ": " << r.modules.size() << " modules, " << r.terms.size() << " terms\n";
    out << "  described (" << r.aligned.size() << "):\n";
    for (const auto &a : r.aligned) out << "    " << a.module_name << "  <- \"" << a.term << "\" (IoU " << a.iou << ")\n";
    out << "  missed (" << r.missed.size() << "):\n";
    for (const auto &m : r.missed) out << "    " << m.module_name << "\n";
    if (!r.unmatched_terms.empty()) {
        out << "  terms without a module:";
        for (const auto &t : r.unmatched_terms) out << " \"" << t << "\"";
        out << "\n";
    }
    for (const auto &f : r.failed_terms) out << "  failed: " << f << "\n";
    return out.str();
}

// ---------------------------------------------------------------------------
// Augmentation

std::vector<CitationFigure> load_citation_corpus(const fs::path &manifest, const dataset::RasterMeasure &measure) {
    std::ifstream in(manifest);
    if (!in) throw IntegrityError("cannot read citation manifest " + manifest.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception &e) {
        throw IntegrityError("malformed citation manifest " + manifest.string() + ": " + e.what());
    }
    if (!doc.is_array()) throw IntegrityError("citation manifest must be a list");

    const auto root = manifest.parent_path();
    std::vector<CitationFigure> corpus;
    for (const auto &item : doc) {
        CitationFigure c;
        c.paper_id = item.at("paper_id").get<std::string>();
        const auto image = item.at("figure_image").get<std::string>();
        const auto image_path = root / image;
        if (!fs::exists(image_path)) throw IntegrityError("citation figure not found: " + image_path.string());
        const auto [w, h] = measure(image_path);
        c.figure = {item.value("figure_id", c.paper_id), image_path.lexically_normal().generic_string(), w, h};

        const auto text_path = root / item.at("text_path").get<std::string>();
        std::ifstream tf(text_path);
        if (!tf) throw IntegrityError("citation text not found: " + text_path.string());
        std::string line, para;
        while (std::getline(tf, line)) {
            if (trimmed(line).empty()) {
                if (!para.empty()) c.paragraphs.push_back(std::move(para));
                para.clear();
            } else {
                if (!para.empty()) para += ' ';
                para += trimmed(line);
            }
        }
        if (!para.empty()) c.paragraphs.push_back(std::move(para));
        corpus.push_back(std::move(c));
    }
    return corpus;
}

namespace {

backends::ContextBlock image_block(const backends::ImageRef &ref, std::string source) {
    backends::ContextBlock b;
    b.kind = backends::ContextBlock::Kind::image;
    b.image = ref;
    b.source = std::move(source);
    return b;
}

backends::ContextBlock text_block(std::string text, std::string source) {
    backends::ContextBlock b;
    b.kind = backends::ContextBlock::Kind::text;
    b.text = std::move(text);
    b.source = std::move(source);
    return b;
}

std::string fallback_description(const alignment::AttributeSet &a) {
    std::string d;
    if (a.semantic) d += "Its function is " + *a.semantic + ".";
    if (a.absolute_position) d += std::string(d.empty() ? "" : " ") + "Its absolute position is " + *a.absolute_position + ".";
    if (a.relative_position) d += std::string(d.empty() ? "" : " ") + "Its relative position is " + *a.relative_position + ".";
    return d;
}

} // namespace

AugmentedDescription augment_missing(const dataset::FigureRecord &figure, const std::string &module_name,
                                     std::vector<CitationFigure> corpus, std::shared_ptr<backends::Gateway> gateway,
                                     const alignment::AlignOptions &align_options) {
    if (module_name.empty()) throw IntegrityError("augment: module name is empty");
    if (corpus.empty()) throw NoEvidenceError("citation corpus is empty; nothing to reason from for '" + module_name + "'");

    AugmentedDescription out;
    out.figure_id = figure.id;
    out.module_name = module_name;

    // Figure retrieval.
    for (const auto &c : corpus) out.evidence.push_back({"retrieval", "", c.paper_id, c.figure.path});

    // Relevance check.
    alignment::Aligner aligner(gateway);
    std::vector<const CitationFigure *> relevant;
    for (auto &c : corpus) {
        alignment::AlignmentResult r;
        try {
            r = aligner.align(c.figure, module_name, align_options);
        } catch (const std::exception &e) {
            throw IntegrityError("relevance check on '" + c.paper_id + "': " + e.what());
        }
        if (r.exists && !r.final_mask.is_empty()) {
            std::size_t non_empty = 0;
            for (const auto &[kind, m] : r.per_attribute_masks) non_empty += m.is_empty() ? 0 : 1;
            c.relevance = r.per_attribute_masks.empty() ? 1.0
                                                        : static_cast<double>(non_empty) / r.per_attribute_masks.size();
            relevant.push_back(&c);
        } else {
            c.relevance = 0.0;
        }
        out.evidence.push_back({"relevance", "segment", c.paper_id,
                                r.exists && !r.final_mask.is_empty() ? "relevant" : "not relevant"});
    }

    const auto target = figure.image_ref();
    if (relevant.empty()) {
        backends::InterpreterReply reply;
        try {
            reply = gateway->interpret(target, module_name);
        } catch (const std::exception &e) {
            throw IntegrityError(std::string("fallback interpretation: ") + e.what());
        }
        const auto attrs = alignment::AttributeSet::from_reply(module_name, reply);
        out.description = fallback_description(attrs);
        if (out.description.empty())
            throw NoEvidenceError("no relevant citation figure and the interpreter cannot describe '" + module_name + "'");
        out.degraded = true;
        out.evidence.push_back({"interpreter", "interpret", figure.id, "no relevant citation figure"});
        return out;
    }

    auto generate = [&](const char *step, backends::GenerateRequest req, const std::string &source) {
        try {
            auto text = gateway->generate(req);
            out.evidence.push_back({step, "generate", source, req.purpose});
            return text;
        } catch (const std::exception &e) {
            throw IntegrityError(std::string(step) + " step: " + e.what());
        }
    };

    // Multimodal input construction: QA pairs per relevant citation figure,
    // then reader questions about the target module.
    std::vector<backends::ContextBlock> qa_blocks;
    for (const auto *c : relevant) {
        out.relevant_papers.push_back(c->paper_id);
        backends::GenerateRequest req;
        req.purpose = "qa_pairs";
        req.prompt = "Write question-answer pairs about the module '" + module_name +
                     "' grounded in the following description of a figure from a cited paper.";
        req.context.push_back(image_block(c->figure, c->paper_id));
        for (const auto &p : c->paragraphs) req.context.push_back(text_block(p, c->paper_id));
        qa_blocks.push_back(text_block(generate("qa", std::move(req), c->paper_id), c->paper_id));
    }

    backends::GenerateRequest reader;
    reader.purpose = "reader_questions";
    reader.prompt = "As a reader of this figure, ask questions from several perspectives about the module '" +
                    module_name + "'.";
    reader.context.push_back(image_block(target, figure.id));
    const auto questions = generate("reader_questions", std::move(reader), figure.id);

    // Analogical reasoning, then a summary.
    backends::GenerateRequest analogy;
    analogy.purpose = "analogical_answer";
    analogy.prompt = "Using the cited figures and their question-answer pairs as analogies, answer the reader's "
                     "questions about the module '" + module_name + "' in the target figure.";
    for (const auto *c : relevant) analogy.context.push_back(image_block(c->figure, c->paper_id));
    analogy.context.insert(analogy.context.end(), qa_blocks.begin(), qa_blocks.end());
    analogy.context.push_back(image_block(target, figure.id));
    analogy.context.push_back(text_block(questions, figure.id));
    const auto answers = generate("analogical", std::move(analogy), figure.id);

    backends::GenerateRequest summary;
    summary.purpose = "summarize";
    summary.prompt = "Summarize the answers into a description of the module '" + module_name + "'.";
    summary.context.push_back(text_block(answers, figure.id));
    out.description = generate("summary", std::move(summary), figure.id);
    return out;
}

json to_json(const AugmentedDescription &d) {
    json evidence = json::array();
    for (const auto &e : d.evidence)
        evidence.push_back({{"step", e.step}, {"capability", e.capability}, {"source", e.source}, {"detail", e.detail}});
    return json{{"figure", d.figure_id},         {"module", d.module_name},
                {"description", d.description},  {"degraded", d.degraded},
                {"relevant_papers", d.relevant_papers}, {"evidence", evidence}};
}

} // namespace figver::integrity
