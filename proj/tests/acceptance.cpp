// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <array>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "figver/alignment.hpp"
#include "figver/config.hpp"
#include "figver/dataset.hpp"
#include "figver/integrity.hpp"
#include "figver/kernels.hpp"
#include "figver/metrics.hpp"
#include "figver/store.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace figver;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kTol = 1e-12;
constexpr double kMetricBudgetSeconds = 10.0;
constexpr double kEndToEndBudgetSeconds = 60.0;
constexpr int kMetricPairs = 600;
constexpr int kVoteTriples = 600;
constexpr int kMergeSets = 300;

struct Outcome {
    bool pass = true;
    std::string detail;
    std::vector<std::string> failures;

    void expect(bool ok, const std::string &what) {
        if (ok) return;
        pass = false;
        if (failures.size() < 5) failures.push_back(what);
    }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(3);
    s << std::fixed << v;
    return s.str();
}

// ---------------------------------------------------------------------------

Outcome metric_oracle() {
    Outcome o;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(20240601);
    std::vector<metrics::EvalPair> pairs;
    std::uint64_t sum_i = 0, sum_u = 0;
    double sum_iou = 0.0;
    for (int k = 0; k < kMetricPairs; ++k) {
        const int w = 1 + static_cast<int>(rng() % 128), h = 1 + static_cast<int>(rng() % 128);
        const auto p = testing::random_grid(rng, w, h), g = testing::random_grid(rng, w, h);
        std::uint64_t i = 0, u = 0;
        for (std::size_t x = 0; x < p.px.size(); ++x) {
            i += p.px[x] & g.px[x];
            u += p.px[x] | g.px[x];
        }
        const double oracle = u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u);
        sum_i += i;
        sum_u += u;
        sum_iou += oracle;
        const auto pm = p.mask(), gm = g.mask();
        for (auto isa : {kernels::Isa::scalar, kernels::Isa::avx2}) {
            kernels::set_active_isa(isa);
            o.expect(std::abs(mask_iou(pm, gm) - oracle) <= kTol, "mask_iou pair " + std::to_string(k));
        }
        pairs.push_back(metrics::EvalPair::from_masks(std::to_string(k), pm, gm));
    }
    kernels::set_active_isa(kernels::avx2::supported() ? kernels::Isa::avx2 : kernels::Isa::scalar);
    const double c_oracle = sum_u == 0 ? 1.0 : static_cast<double>(sum_i) / static_cast<double>(sum_u);
    const double g_oracle = sum_iou / kMetricPairs;
    o.expect(std::abs(metrics::ciou(pairs) - c_oracle) <= kTol, "cIoU");
    o.expect(std::abs(metrics::giou(pairs) - g_oracle) <= kTol, "gIoU");
    const double elapsed = seconds_since(t0);
    o.expect(elapsed < kMetricBudgetSeconds, "runtime " + fmt(elapsed) + " s");
    o.detail = std::to_string(kMetricPairs) + " pairs up to 128x128, both ISAs, tol 1e-12, " + fmt(elapsed) + " s";
    return o;
}

Outcome vote_oracle() {
    Outcome o;
    std::mt19937_64 rng(77);
    for (int t = 0; t < kVoteTriples; ++t) {
        const int w = 1 + static_cast<int>(rng() % 64), h = 1 + static_cast<int>(rng() % 64);
        std::vector<testing::Grid> grids;
        std::vector<BinaryMask> masks;
        for (int k = 0; k < 3; ++k) {
            grids.push_back(testing::random_grid(rng, w, h));
            masks.push_back(grids.back().mask());
        }
        o.expect(mask_vote(masks) == BinaryMask::encode(w, h, oracle::vote_pixels(grids)),
                 "triple " + std::to_string(t));
    }
    // Every binary input for three voters, one pixel per combination.
    std::array<std::vector<std::uint8_t>, 3> cols;
    std::vector<std::uint8_t> averaged;
    for (unsigned combo = 0; combo < 8; ++combo) {
        double sum = 0;
        for (unsigned v = 0; v < 3; ++v) {
            cols[v].push_back((combo >> v) & 1u);
            sum += (combo >> v) & 1u;
        }
        averaged.push_back(sum / 3.0 > 0.5 ? 1 : 0);
    }
    std::vector<BinaryMask> voters;
    for (const auto &c : cols) voters.push_back(BinaryMask::encode(8, 1, c));
    o.expect(mask_vote(voters) == BinaryMask::encode(8, 1, averaged), "k=3 exhaustive vs average>0.5");
    o.detail = std::to_string(kVoteTriples) + " random triples; 8/8 exhaustive k=3 inputs";
    return o;
}

Outcome merge_oracle() {
    Outcome o;
    std::mt19937_64 rng(4242);
    for (int t = 0; t < kMergeSets; ++t) {
        auto boxes = oracle::random_boxes(rng, 1 + rng() % 16);
        const auto expected = oracle::brute_merge(boxes, 50.0);
        const auto got = merge_text_boxes(boxes, 50.0);
        o.expect(got == expected, "set " + std::to_string(t));
        for (int s = 0; s < 3; ++s) {
            std::shuffle(boxes.begin(), boxes.end(), rng);
            o.expect(merge_text_boxes(boxes, 50.0) == got, "permutation of set " + std::to_string(t));
        }
    }
    o.detail = std::to_string(kMergeSets) + " random sets, 3 permutations each";
    return o;
}

Outcome paper_constants() {
    Outcome o;
    const app::RunConfig c = app::load_config(std::nullopt);
    o.expect(c.thresholds.min_pixel == 50.0, "min_pixel");
    o.expect(c.thresholds.min_iou == 0.1, "min_iou");
    o.expect(c.thresholds.consistency_iou == 0.95, "consistency");
    o.expect(c.sampling.alpha == 2, "alpha");
    o.expect(c.sampling.beta == 1.0, "beta");

    // Gate boundaries: min_iou inclusive, consistency strict.
    // On a 20x1 strip: a 20-pixel text mask, a 2-pixel anchor box gives IoU
    // exactly 0.1, and a 19-pixel point mask gives consistency exactly 0.95.
    const auto text20 = BinaryMask::from_box(20, 1, {0, 0, 20, 1});
    const auto point19 = BinaryMask::from_box(20, 1, {0, 0, 19, 1});
    o.expect(dataset::check_gates(text20, text20, {0, 0, 2, 1}, c.thresholds).kept, "anchor IoU 0.1 passes");
    o.expect(!dataset::check_gates(text20, text20, {0, 0, 1, 1}, c.thresholds).kept, "anchor IoU 0.05 fails");
    o.expect(!dataset::check_gates(text20, point19, {0, 0, 20, 1}, c.thresholds).kept, "consistency 0.95 fails");

    auto gw = backends::Gateway::uniform(testing::fixture_transport());
    const auto figures = dataset::ingest_figures(testing::fixture_project() / "manifest.json",
                                                 testing::fixture_project(), store::raster_size);
    const auto &f1 = figures.front();
    const auto located = dataset::locate_anchors(f1, dataset::extract_anchor_texts(f1, *gw, c.thresholds), *gw,
                                                 c.thresholds);
    std::map<std::string, bool> kept;
    for (const auto &l : located) kept[l.anchor.text] = l.gates.kept;
    const std::map<std::string, bool> expected{
        {"Encoder", true}, {"Attention Layer", true}, {"Decoder", true}, {"Softmax", false}, {"Legend", false}};
    o.expect(kept == expected, "F1 keep/drop pattern");
    o.detail = "min_pixel=50 min_iou=0.1 consistency>0.95 alpha=2 beta=1; F1 keeps 3 of 5 anchors";
    return o;
}

Outcome coa_contract() {
    Outcome o;
    auto counting = std::make_shared<testing::CountingTransport>(testing::fixture_transport());
    alignment::Aligner aligner(backends::Gateway::uniform(counting));
    const backends::ImageRef f1{"F1", "images/F1.png", 240, 160};

    const auto absent = aligner.align(f1, "Flux Capacitor");
    o.expect(!absent.exists && absent.final_mask.is_empty(), "nonexistent module gives an empty mask");
    o.expect(counting->count(backends::Capability::segment) == 0, "segment not called when exists=false");
    o.expect(counting->count(backends::Capability::interpret) == 0, "interpret not called when exists=false");

    auto rect = [](int x0, int y0, int x1, int y1) { return BinaryMask::from_box(240, 160, {x0, y0, x1, y1}); };
    const auto enc = aligner.align(f1, "Encoder");
    o.expect(enc.per_attribute_masks.size() == 3, "Encoder has three branches");
    o.expect(enc.final_mask == rect(10, 40, 60, 100), "Encoder vote");
    const auto dec = aligner.align(f1, "Decoder");
    o.expect(dec.per_attribute_masks.size() == 2, "Decoder has two branches");
    o.expect(dec.final_mask == rect(150, 40, 200, 100), "Decoder vote");
    const auto att = aligner.align(f1, "Attention Layer");
    o.expect(att.per_attribute_masks.count(alignment::AttributeKind::name_only) == 1, "name-only fallback");
    o.expect(att.final_mask == rect(80, 40, 130, 100), "Attention Layer mask");
    o.detail = "empty branch, short-circuit (0 segment calls), 3/2/1-branch votes match hand masks";
    return o;
}

Outcome integrity_identity() {
    Outcome o;
    auto gw = backends::Gateway::uniform(testing::fixture_transport());
    const auto figures = dataset::ingest_figures(testing::fixture_project() / "manifest.json",
                                                 testing::fixture_project(), store::raster_size);
    const auto texts = std::map<std::string, std::string>{
        {"partial", store::read_file(testing::fixture_project() / "texts/F1_partial.txt")},
        {"full", store::read_file(testing::fixture_project() / "texts/F1_full.txt")},
        {"empty", ""}};
    int runs = 0;
    for (const auto &fig : figures) {
        if (fig.id == "F2") continue;
        for (const auto &[label, text] : texts) {
            const auto r = integrity::verify_figure(fig, text, gw, {});
            ++runs;
            const std::string tag = fig.id + "/" + label;
            o.expect(r.partition_holds(), tag + " partition");

            std::vector<std::optional<BinaryMask>> term_masks;
            for (const auto &a : r.alignments) term_masks.emplace_back(a.final_mask);
            std::set<std::size_t> plus, minus, got_plus, got_minus;
            for (std::size_t m = 0; m < r.modules.size(); ++m) {
                const auto mp = r.modules[m].mask.decode();
                bool hit = false;
                for (const auto &t : term_masks) {
                    const auto tp = t->decode();
                    std::uint64_t i = 0, u = 0;
                    for (std::size_t k = 0; k < mp.size(); ++k) {
                        i += mp[k] & tp[k];
                        u += mp[k] | tp[k];
                    }
                    hit = hit || (u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u)) >= 0.5;
                }
                (hit ? plus : minus).insert(m);
            }
            for (const auto &a : r.aligned) got_plus.insert(a.module_index);
            for (const auto &m : r.missed) got_minus.insert(m.module_index);
            o.expect(got_plus == plus && got_minus == minus, tag + " brute-force oracle");
            if (label == "empty") o.expect(r.missed.size() == r.modules.size(), tag + " all missed");
            if (label == "full" && fig.id == "F1") o.expect(r.missed.empty(), tag + " all covered");
        }
    }
    o.detail = std::to_string(runs) + " verify runs; partition, oracle, all-covered and empty-text cases";
    return o;
}

Outcome sampling_counts() {
    Outcome o;
    std::vector<dataset::DatasetEntry> entries;
    const std::vector<std::string> names{"Encoder", "Decoder", "Attention", "Softmax", "Embedding", "Pooling",
                                         "Classifier", "Tokenizer", "Router", "Memory", "Gate", "Head"};
    for (std::size_t i = 0; i < names.size(); ++i) {
        dataset::DatasetEntry e;
        e.figure_id = "F" + std::to_string(i % 4);
        e.id = e.figure_id + "-" + std::to_string(100 + i);
        e.module_name = names[i];
        e.mask = BinaryMask::from_box(32, 32, {1, 1, 9, 9});
        e.attributes.name = names[i];
        e.attributes.absolute_position = "left";
        e.attributes.relative_position = "above the rest";
        e.attributes.semantic = "transforms features";
        e.status = dataset::Status::accepted;
        entries.push_back(e);
    }
    const auto lex = dataset::build_lexicon(entries);
    std::map<std::string, std::set<std::string>> in_figure;
    for (const auto &e : entries) in_figure[e.figure_id].insert(e.module_name);
    const std::size_t n = entries.size();

    auto dump = [](const std::vector<dataset::TrainingSample> &v) {
        std::string s;
        for (const auto &x : v) s += json(x).dump() + "\n";
        return s;
    };
    for (const dataset::Sampling s : {dataset::Sampling{2, 1.0, 7}, dataset::Sampling{3, 0.5, 7},
                                      dataset::Sampling{4, 0.25, 9}, dataset::Sampling{1, 2.0, 1}}) {
        const auto samples = dataset::build_training_samples(entries, s, lex);
        std::size_t pos = 0, neg = 0;
        for (const auto &x : samples) {
            if (x.polarity == dataset::Polarity::positive) {
                ++pos;
                continue;
            }
            ++neg;
            for (const auto &name : in_figure[x.figure_id])
                o.expect(x.question.find("name: " + name + ",") == std::string::npos &&
                             x.question.find("name: " + name + ".") == std::string::npos,
                         "negative names in-figure module " + name);
        }
        const auto want_neg = static_cast<std::size_t>(std::floor(s.beta * s.alpha * static_cast<double>(n)));
        const std::string tag = "alpha=" + std::to_string(s.alpha) + " beta=" + fmt(s.beta);
        o.expect(pos == static_cast<std::size_t>(s.alpha) * n, tag + " positives");
        o.expect(neg == want_neg, tag + " negatives " + std::to_string(neg) + " != " + std::to_string(want_neg));
        o.expect(dump(dataset::build_training_samples(entries, s, lex)) == dump(samples), tag + " same seed");
    }
    o.detail = "n=" + std::to_string(n) + ", 4 (alpha, beta) settings";
    return o;
}

struct Proc {
    int code = -1;
    std::string out;
};

Proc run(const std::string &args) {
    Proc p;
    FILE *f = ::popen((std::string(FIGVER_BIN) + " " + args + " 2>/dev/null").c_str(), "r");
    if (!f) return p;
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = std::fread(buf.data(), 1, buf.size(), f)) > 0) p.out.append(buf.data(), n);
    const int status = ::pclose(f);
    p.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return p;
}

Outcome end_to_end() {
    Outcome o;
    const auto t0 = Clock::now();
    testing::TempDir tmp;
    const auto project = testing::copy_project(tmp);
    const auto built = run("build --project " + project.string());
    o.expect(built.code == 0, "build exit " + std::to_string(built.code));
    const auto golden = store::read_file(testing::fixtures_root() / "golden/dataset.jsonl");
    o.expect(std::filesystem::exists(project / "dataset.jsonl") &&
                 store::read_file(project / "dataset.jsonl") == golden,
             "dataset.jsonl differs from golden");

    const auto gold = (testing::fixtures_root() / "eval/gold.jsonl").string();
    const auto report_path = tmp / "eval.json";
    const auto ev = run("eval --pred " + gold + " --gold " + gold + " --out " + report_path.string());
    o.expect(ev.code == 0, "eval exit " + std::to_string(ev.code));
    if (ev.code == 0) {
        const auto r = json::parse(store::read_file(report_path));
        for (const char *k : {"ciou", "giou", "precision", "recall", "f1"})
            o.expect(r.at(k).get<double>() == 1.0, std::string(k) + " != 1");
    }
    const double elapsed = seconds_since(t0);
    o.expect(elapsed < kEndToEndBudgetSeconds, "runtime " + fmt(elapsed) + " s");
    o.detail = "golden dataset.jsonl byte-identical, eval pred=gold all 1.0, " + fmt(elapsed) + " s";
    return o;
}

Outcome detection_spots() {
    Outcome o;
    const auto half = metrics::detection_prf(std::vector<metrics::DetectionCounts>{{1, 1, 1}});
    o.expect(half.precision == 0.5 && half.recall == 0.5 && half.f1 == 0.5, "1/1/1");
    const auto none = metrics::detection_prf(std::vector<metrics::DetectionCounts>{{0, 0, 0}});
    o.expect(none.precision == 0.0 && none.recall == 0.0 && none.f1 == 0.0, "0/0/0");
    const auto no_pred = metrics::detection_prf(std::vector<metrics::DetectionCounts>{{0, 0, 4}});
    o.expect(no_pred.precision == 0.0 && no_pred.recall == 0.0 && no_pred.f1 == 0.0, "0/0/4");
    const auto no_gold = metrics::detection_prf(std::vector<metrics::DetectionCounts>{{0, 4, 0}});
    o.expect(no_gold.precision == 0.0 && no_gold.recall == 0.0 && no_gold.f1 == 0.0, "0/4/0");
    o.detail = "tp=1,fp=1,fn=1 -> 0.5/0.5/0.5; empty denominators -> 0";
    return o;
}

} // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"metric-oracle", metric_oracle},
        {"vote-oracle", vote_oracle},
        {"merge-oracle", merge_oracle},
        {"default-constants-and-gates", paper_constants},
        {"chain-of-attribute-contract", coa_contract},
        {"integrity-set-identity", integrity_identity},
        {"sampling-counts", sampling_counts},
        {"end-to-end-determinism", end_to_end},
        {"detection-spot-values", detection_spots},
    };
    int failed = 0;
    for (const auto &[name, fn] : criteria) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception &e) {
            o.pass = false;
            o.failures.push_back(std::string("exception: ") + e.what());
        }
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << "\n";
        for (const auto &f : o.failures) std::cout << "    " << f << "\n";
        failed += o.pass ? 0 : 1;
    }
    std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed\n";
    return failed == 0 ? 0 : 1;
}
