#include "figver/pipeline.hpp"

#include <atomic>
#include <map>
#include <set>
#include <thread>

namespace figver::app {

namespace fs = std::filesystem;
using nlohmann::json;
using dataset::DatasetEntry;
using dataset::FigureRecord;
using dataset::Status;

json to_json(const BuildSummary &s) {
    return json{{"ingested", s.ingested},     {"kept_figures", s.kept_figures}, {"anchors", s.anchors},
                {"candidates", s.candidates}, {"preserved", s.preserved},       {"entries", s.entries}};
}

BuildSummary run_build(store::Project &project, const RunConfig &config, backends::Gateway &gateway,
                       const fs::path &manifest, const std::string &actor) {
    config.validate();
    project.set_config_snapshot(to_json(config));

    BuildSummary summary;
    auto records = dataset::ingest_figures(manifest, project.root(), store::raster_size);
    summary.ingested = records.size();
    auto kept = dataset::filter_figures(std::move(records), config.categories, gateway);
    std::sort(kept.begin(), kept.end(), [](const auto &a, const auto &b) { return a.id < b.id; });
    summary.kept_figures = kept.size();

    struct FigureOutput {
        std::size_t anchors = 0;
        std::vector<DatasetEntry> entries;
        std::string error;
    };
    std::vector<FigureOutput> outputs(kept.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < kept.size(); i = next++) {
            try {
                const auto anchors = dataset::extract_anchor_texts(kept[i], gateway, config.thresholds);
                outputs[i].anchors = anchors.size();
                for (auto &e : dataset::locate_modules(kept[i], anchors, gateway, config.thresholds))
                    outputs[i].entries.push_back(dataset::enhance_semantics(std::move(e), kept[i], gateway));
            } catch (const std::exception &e) {
                outputs[i].error = e.what();
            }
        }
    };
    const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(config.concurrency), kept.size());
    if (n_workers <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    }
    for (const auto &o : outputs)
        if (!o.error.empty()) throw dataset::DatasetError(o.error);

    std::vector<DatasetEntry> candidates;
    for (auto &o : outputs) {
        summary.anchors += o.anchors;
        for (auto &e : o.entries) candidates.push_back(std::move(e));
    }
    summary.candidates = candidates.size();

    for (const auto &f : kept) project.put_figure(f);
    summary.preserved = project.replace_auto_entries(candidates);
    summary.entries = project.list_entries().size();
    project.append_audit(actor, "build", manifest.filename().string(), to_json(summary));
    return summary;
}

VerifyOutcome run_verify(store::Project &project, const RunConfig &config,
                         std::shared_ptr<backends::Gateway> gateway, const std::string &figure_id,
                         const std::string &text, bool blind) {
    const auto figure = project.get_figure(figure_id);
    if (!figure) throw store::StoreError("unknown figure '" + figure_id + "'");
    integrity::VerifyOptions opts;
    opts.enumerate.thresholds = config.thresholds;
    opts.enumerate.blind = blind;
    opts.align.mode = config.mode;
    opts.concurrency = config.concurrency;

    VerifyOutcome out{integrity::verify_figure(*figure, text, std::move(gateway), opts), std::nullopt};
    if (project.writable())
        out.stored = project.put_report(figure_id, out.report.text_digest, config_digest(config),
                                        integrity::to_json(out.report));
    return out;
}

metrics::EvalReport evaluate_datasets(const std::vector<DatasetEntry> &predicted, const std::vector<DatasetEntry> &gold,
                                      double iou_threshold) {
    std::map<std::string, const DatasetEntry *> pred_by_id;
    for (const auto &p : predicted) pred_by_id[p.id] = &p;

    std::vector<metrics::EvalPair> pairs;
    std::vector<const DatasetEntry *> gold_sorted;
    for (const auto &g : gold) gold_sorted.push_back(&g);
    std::sort(gold_sorted.begin(), gold_sorted.end(), [](auto *a, auto *b) { return a->id < b->id; });
    for (const auto *g : gold_sorted) {
        if (g->status != Status::auto_ && g->status != Status::accepted) continue;
        const auto it = pred_by_id.find(g->id);
        const auto empty = BinaryMask::empty(g->mask.width(), g->mask.height());
        const BinaryMask &pm = it == pred_by_id.end() ? empty : it->second->mask;
        if (!pm.same_shape(g->mask))
            throw metrics::MetricsError("entry '" + g->id + "': predicted and gold masks differ in size");
        pairs.push_back(metrics::EvalPair::from_masks(g->id, pm, g->mask));
    }

    std::map<std::string, std::pair<std::vector<BinaryMask>, std::vector<BinaryMask>>> missed;
    std::vector<const DatasetEntry *> pred_sorted;
    for (const auto &p : predicted) pred_sorted.push_back(&p);
    std::sort(pred_sorted.begin(), pred_sorted.end(), [](auto *a, auto *b) { return a->id < b->id; });
    for (const auto *p : pred_sorted)
        if (p->status == Status::missed) missed[p->figure_id].first.push_back(p->mask);
    for (const auto *g : gold_sorted)
        if (g->status == Status::missed) missed[g->figure_id].second.push_back(g->mask);

    std::vector<metrics::FigureDetection> figures;
    for (const auto &[fig, pg] : missed) {
        const auto m = metrics::match_missed(pg.first, pg.second, iou_threshold);
        figures.push_back({fig, m.counts});
    }
    return metrics::make_report(std::move(pairs), std::move(figures), iou_threshold);
}

std::string samples_jsonl(const std::vector<DatasetEntry> &entries, const dataset::Sampling &sampling) {
    const auto lexicon = dataset::build_lexicon(entries);
    std::string out;
    for (const auto &s : dataset::build_training_samples(entries, sampling, lexicon)) {
        out += json(s).dump();
        out += '\n';
    }
    return out;
}

} // namespace figver::app
