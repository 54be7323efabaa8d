#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "figver/digest.hpp"
#include "figver/integrity.hpp"
#include "figver/store.hpp"
#include "support.hpp"

using namespace figver;
using namespace figver::integrity;
using nlohmann::json;

namespace {

std::shared_ptr<backends::Gateway> fixture_gateway() { return backends::Gateway::uniform(testing::fixture_transport()); }

dataset::FigureRecord figure(const std::string &id) {
    for (auto &f : dataset::ingest_figures(testing::fixture_project() / "manifest.json", testing::fixture_project(),
                                           store::raster_size))
        if (f.id == id) return f;
    FAIL("no fixture figure " << id);
    return {};
}

std::string text(const std::string &name) { return store::read_file(testing::fixture_project() / "texts" / name); }

std::set<std::string> names_of(const std::vector<EnumeratedModule> &ms) {
    std::set<std::string> out;
    for (const auto &m : ms) out.insert(m.name);
    return out;
}

// Brute-force assignment straight from the definition: a module is described
// iff some term's mask reaches the threshold against it.
std::pair<std::set<std::size_t>, std::set<std::size_t>> oracle_split(const std::vector<BinaryMask> &modules,
                                                                    const std::vector<std::optional<BinaryMask>> &terms,
                                                                    double thr) {
    std::set<std::size_t> plus, minus;
    for (std::size_t m = 0; m < modules.size(); ++m) {
        const auto a = modules[m].decode();
        bool hit = false;
        for (const auto &t : terms) {
            if (!t) continue;
            const auto b = t->decode();
            std::uint64_t i = 0, u = 0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                i += a[k] & b[k];
                u += a[k] | b[k];
            }
            const double iou = u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u);
            hit = hit || iou >= thr;
        }
        (hit ? plus : minus).insert(m);
    }
    return {plus, minus};
}

std::set<std::size_t> aligned_indices(const IntegrityReport &r) {
    std::set<std::size_t> out;
    for (const auto &a : r.aligned) out.insert(a.module_index);
    return out;
}

std::set<std::size_t> missed_indices(const IntegrityReport &r) {
    std::set<std::size_t> out;
    for (const auto &m : r.missed) out.insert(m.module_index);
    return out;
}

} // namespace

TEST_CASE("enumerate_modules on the fixture figures") {
    auto gw = fixture_gateway();
    const auto f1 = enumerate_modules(figure("F1"), *gw, {});
    CHECK(names_of(f1) == std::set<std::string>{"Encoder", "Attention Layer", "Decoder"});
    for (const auto &m : f1) CHECK_FALSE(m.mask.is_empty());

    // Node B overlaps Leaf B above the dedup threshold and loses on confidence.
    const auto f3 = enumerate_modules(figure("F3"), *gw, {});
    CHECK(names_of(f3) == std::set<std::string>{"Root", "Leaf A", "Leaf B"});
    for (std::size_t i = 0; i < f3.size(); ++i)
        for (std::size_t j = i + 1; j < f3.size(); ++j) CHECK(mask_iou(f3[i].mask, f3[j].mask) <= 0.5);

    EnumerateOptions no_dedup;
    no_dedup.thresholds.dedup_iou = 1.0;
    CHECK(enumerate_modules(figure("F3"), *gw, no_dedup).size() == 4);
}

TEST_CASE("blind enumeration skips the gates") {
    auto gw = fixture_gateway();
    EnumerateOptions blind;
    blind.blind = true;
    const auto all = enumerate_modules(figure("F1"), *gw, blind);
    const auto gated = enumerate_modules(figure("F1"), *gw, {});
    CHECK(all.size() >= gated.size());
    const auto names = names_of(all);
    for (const auto &n : names_of(gated)) CHECK(names.count(n) == 1);
    for (const auto &m : all) CHECK_FALSE(m.mask.is_empty());
}

TEST_CASE("extract_terms trims and deduplicates") {
    auto gw = fixture_gateway();
    CHECK(extract_terms(text("F1_partial.txt"), *gw) ==
          std::vector<std::string>{"Encoder", "Decoder", "Transformer"});
    CHECK(extract_terms("", *gw).empty());
    CHECK(extract_terms("   \n", *gw).empty());
    CHECK(extract_terms("nothing known here", *gw).empty());
}

TEST_CASE("verify_figure on partial, full and empty texts") {
    auto gw = fixture_gateway();
    const auto f1 = figure("F1");

    SUBCASE("partial text") {
        const auto r = verify_figure(f1, text("F1_partial.txt"), gw, {});
        CHECK(r.partition_holds());
        std::set<std::string> described, missed;
        for (const auto &a : r.aligned) {
            described.insert(a.module_name);
            CHECK(a.iou == 1.0);
            CHECK(a.term == a.module_name);
        }
        for (const auto &m : r.missed) missed.insert(m.module_name);
        CHECK(described == std::set<std::string>{"Encoder", "Decoder"});
        CHECK(missed == std::set<std::string>{"Attention Layer"});
        CHECK(r.unmatched_terms == std::vector<std::string>{"Transformer"});
        CHECK(r.failed_terms.empty());
        CHECK(r.iou.size() == 3);
        CHECK(r.text_digest == hex_digest(text("F1_partial.txt")));
    }
    SUBCASE("full text") {
        const auto r = verify_figure(f1, text("F1_full.txt"), gw, {});
        CHECK(r.partition_holds());
        CHECK(r.aligned.size() == 3);
        CHECK(r.missed.empty());
        CHECK(r.unmatched_terms.empty());
    }
    SUBCASE("empty text") {
        const auto r = verify_figure(f1, "", gw, {});
        CHECK(r.partition_holds());
        CHECK(r.terms.empty());
        CHECK(r.aligned.empty());
        CHECK(r.missed.size() == r.modules.size());
        for (const auto &m : r.missed) CHECK(m.best_iou == 0.0);
    }
}

TEST_CASE("verify_figure agrees with the brute-force split") {
    auto gw = fixture_gateway();
    for (const char *fig : {"F1", "F3"})
        for (const char *t : {"F1_partial.txt", "F1_full.txt"}) {
            CAPTURE(fig);
            CAPTURE(t);
            const auto r = verify_figure(figure(fig), text(t), gw, {});
            std::vector<BinaryMask> modules;
            for (const auto &m : r.modules) modules.push_back(m.mask);
            std::vector<std::optional<BinaryMask>> terms;
            for (const auto &a : r.alignments) terms.push_back(a.final_mask);
            const auto [plus, minus] = oracle_split(modules, terms, 0.5);
            CHECK(aligned_indices(r) == plus);
            CHECK(missed_indices(r) == minus);
            CHECK(r.partition_holds());

            const auto j = to_json(r);
            CHECK(j.at("aligned").size() == r.aligned.size());
            CHECK(j.at("evidence").at("iou").size() == r.terms.size());
            CHECK(summarize(r).find("missed (" + std::to_string(r.missed.size()) + ")") != std::string::npos);
        }
}

TEST_CASE("assign_modules: oracle, partition and monotonicity on random masks") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        const int w = 1 + static_cast<int>(rng() % 20), h = 1 + static_cast<int>(rng() % 20);
        IntegrityReport r;
        std::vector<BinaryMask> modules;
        for (std::size_t i = 0, n = rng() % 6; i < n; ++i) {
            modules.push_back(testing::random_grid(rng, w, h).mask());
            r.modules.push_back({"m" + std::to_string(i), modules.back(), 1.0, {}});
        }
        std::vector<std::optional<BinaryMask>> terms;
        for (std::size_t i = 0, n = rng() % 6; i < n; ++i) {
            r.terms.push_back("t" + std::to_string(i));
            if (rng() % 5 == 0)
                terms.emplace_back();
            else
                terms.emplace_back(testing::random_grid(rng, w, h).mask());
        }
        const double thr = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
        assign_modules(r, terms, thr);
        const auto [plus, minus] = oracle_split(modules, terms, thr);
        CHECK(aligned_indices(r) == plus);
        CHECK(missed_indices(r) == minus);
        CHECK(r.partition_holds());
        for (const auto &a : r.aligned) CHECK(a.iou >= thr);
        for (const auto &m : r.missed) CHECK(m.best_iou < thr);

        // More terms never shrink the described set.
        if (!terms.empty()) {
            IntegrityReport fewer = r;
            fewer.terms.pop_back();
            auto sub = terms;
            sub.pop_back();
            assign_modules(fewer, sub, thr);
            const auto small = aligned_indices(fewer), big = aligned_indices(r);
            CHECK(std::includes(big.begin(), big.end(), small.begin(), small.end()));
        }
        // A lower threshold never shrinks it either.
        IntegrityReport looser = r;
        assign_modules(looser, terms, thr / 2);
        const auto lo = aligned_indices(looser), hi = aligned_indices(r);
        CHECK(std::includes(lo.begin(), lo.end(), hi.begin(), hi.end()));
    }
}

TEST_CASE("citation corpus loading") {
    const auto corpus = load_citation_corpus(testing::fixture_project() / "citations/manifest.json", store::raster_size);
    REQUIRE(corpus.size() == 2);
    CHECK(corpus[0].paper_id == "C1-attention");
    CHECK(corpus[0].figure.figure_id == "C1");
    CHECK(corpus[0].figure.width == 120);
    CHECK(corpus[0].paragraphs.size() == 2);
    CHECK(corpus[1].paragraphs.size() == 1);

    testing::TempDir tmp;
    CHECK_THROWS_AS(load_citation_corpus(tmp / "missing.json", store::raster_size), IntegrityError);
    store::write_file_atomic(tmp / "m.json", R"([{"paper_id":"X","figure_image":"none.png","text_path":"x.txt"}])");
    CHECK_THROWS_AS(load_citation_corpus(tmp / "m.json", store::raster_size), IntegrityError);
}

TEST_CASE("augment_missing") {
    auto counting = std::make_shared<testing::CountingTransport>(testing::fixture_transport());
    auto gw = backends::Gateway::uniform(counting);
    const auto corpus = load_citation_corpus(testing::fixture_project() / "citations/manifest.json", store::raster_size);
    const auto f1 = figure("F1");

    SUBCASE("relevant citation figure drives the generation chain") {
        const auto d = augment_missing(f1, "Attention Layer", corpus, gw);
        CHECK_FALSE(d.degraded);
        CHECK(d.relevant_papers == std::vector<std::string>{"C1-attention"});
        CHECK(d.description ==
              "The Attention Layer pools encoder states into a context vector that the Decoder reads at every step.");
        std::vector<std::string> steps;
        for (const auto &e : d.evidence) steps.push_back(e.step);
        CHECK(std::count(steps.begin(), steps.end(), "retrieval") == 2);
        CHECK(std::count(steps.begin(), steps.end(), "relevance") == 2);
        for (const char *s : {"qa", "reader_questions", "analogical", "summary"})
            CHECK(std::count(steps.begin(), steps.end(), s) == 1);
        CHECK(counting->count(backends::Capability::generate) == 4);
        const auto j = to_json(d);
        CHECK(j.at("evidence").size() == d.evidence.size());
        CHECK(j.at("degraded") == false);
    }
    SUBCASE("no relevant figure degrades to the interpreter") {
        const auto d = augment_missing(f1, "Positional Encoding", corpus, gw);
        CHECK(d.degraded);
        CHECK(d.relevant_papers.empty());
        CHECK(d.description.rfind("Its function is ", 0) == 0);
        CHECK(d.evidence.back().step == "interpreter");
        CHECK(counting->count(backends::Capability::generate) == 0);
    }
    SUBCASE("nothing to reason from") {
        CHECK_THROWS_AS(augment_missing(f1, "Attention Layer", {}, gw), NoEvidenceError);
        CHECK_THROWS_AS(augment_missing(f1, "Flux Widget", corpus, gw), NoEvidenceError);
        CHECK_THROWS_AS(augment_missing(f1, "", corpus, gw), IntegrityError);
    }
}
