#include "figver/cli.hpp"

#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "figver/pipeline.hpp"
#include "figver/service.hpp"

namespace figver::app {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DomainError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path &p, const std::string &text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw DomainError("cannot write " + p.string());
    out << text;
    if (!out) throw DomainError("cannot write " + p.string());
}

/// JSON result to --out (summary to stdout) or to stdout (summary to stderr).
void emit(const json &result, const std::string &summary, const std::string &out_path, std::ostream &out,
          std::ostream &err) {
    if (!out_path.empty()) {
        write_text(out_path, result.dump(2) + "\n");
        out << summary;
    } else {
        out << result.dump(2) << "\n";
        err << summary;
    }
}

store::Project open_project(const std::string &dir, store::Access access) {
    try {
        return store::Project::open(dir, access);
    } catch (const store::StoreError &e) {
        throw DomainError(e.what());
    }
}

dataset::FigureRecord figure_or_fail(const store::Project &p, const std::string &id) {
    auto f = p.get_figure(id);
    if (!f) throw DomainError("unknown figure '" + id + "' (run figver build first)");
    return *f;
}

} // namespace

int run_cli(int argc, const char *const *argv, std::ostream &out, std::ostream &err) {
    CLI::App app{"figver: figure-integrity engine", "figver"};
    app.require_subcommand(1);

    std::string config_path;
    auto add_config = [&](CLI::App *a) {
        a->add_option("--config", config_path, "RunConfig JSON (fallback: $FIGVER_CONFIG)");
    };
    add_config(&app);

    std::string project_dir, figure, module, mode, text_path, citations, out_path, pred, gold, manifest;
    std::string samples_path, frequency_path, host = "127.0.0.1", ui_dir;
    double threshold = -1.0;
    int port = 8080;
    bool blind = false;

    auto *build = app.add_subcommand("build", "construct dataset.jsonl from the extraction manifest");
    build->add_option("--project", project_dir, "project directory")->required();
    build->add_option("--manifest", manifest, "extraction manifest (default: the project's)");

    auto *align = app.add_subcommand("align", "chain-of-attribute alignment of one module");
    align->add_option("--project", project_dir, "project directory")->required();
    align->add_option("--figure", figure, "figure id")->required();
    align->add_option("--module", module, "module name")->required();
    align->add_option("--mode", mode, "full | simplified")->check(CLI::IsMember({"full", "simplified"}));
    align->add_option("--out", out_path, "write the result JSON here");

    auto *verify = app.add_subcommand("verify", "integrity verification of a figure against its text");
    verify->add_option("--project", project_dir, "project directory")->required();
    verify->add_option("--figure", figure, "figure id")->required();
    verify->add_option("--text", text_path, "text file")->required();
    verify->add_flag("--blind", blind, "enumerate modules without the two gates");
    verify->add_option("--out", out_path, "write the report JSON here");

    auto *augment = app.add_subcommand("augment", "describe a missed module from cited figures");
    augment->add_option("--project", project_dir, "project directory")->required();
    augment->add_option("--figure", figure, "figure id")->required();
    augment->add_option("--module", module, "module name")->required();
    augment->add_option("--citations", citations, "citation corpus manifest")->required();
    augment->add_option("--out", out_path, "write the description JSON here");

    auto *eval = app.add_subcommand("eval", "score predicted entries against gold entries");
    eval->add_option("--pred", pred, "predicted dataset JSON-Lines")->required();
    eval->add_option("--gold", gold, "gold dataset JSON-Lines")->required();
    eval->add_option("--threshold", threshold, "IoU threshold for matching missed modules");
    eval->add_option("--out", out_path, "write the report JSON here");

    auto *serve = app.add_subcommand("serve", "run the review REST service");
    serve->add_option("--project", project_dir, "project directory")->required();
    serve->add_option("--host", host, "bind address");
    serve->add_option("--port", port, "port (0 picks a free one)")->check(CLI::Range(0, 65535));
    serve->add_option("--ui", ui_dir, "static review UI directory");

    auto *exp = app.add_subcommand("export", "write the dataset and training samples");
    exp->add_option("--project", project_dir, "project directory")->required();
    exp->add_option("--out", out_path, "dataset JSON-Lines path")->required();
    exp->add_option("--samples", samples_path, "training samples JSON-Lines path");
    exp->add_option("--frequency", frequency_path, "module frequency report JSON path");

    for (auto *sub : {build, align, verify, augment, eval, serve, exp}) add_config(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        if (e.get_exit_code() == 0) return app.exit(e, out, err);
        err << "figver: " << e.what() << "\n";
        const auto selected = app.get_subcommands();
        err << (selected.empty() ? app.help() : selected.front()->help());
        return 2;
    }

    try {
        const auto config = load_config(config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path));

        if (build->parsed()) {
            if (!fs::exists(fs::path(project_dir) / "project.json")) {
                auto id = fs::path(project_dir).lexically_normal().filename().string();
                if (id.empty()) id = fs::absolute(project_dir).lexically_normal().parent_path().filename().string();
                store::Project::create(project_dir, id);
            }
            auto project = open_project(project_dir, store::Access::write);
            const fs::path m = manifest.empty() ? project.resolve(project.manifest().paths.manifest) : fs::path(manifest);
            auto gateway = make_gateway(config, project.root());
            const auto summary = run_build(project, config, *gateway, m);
            out << "built " << summary.entries << " entries (" << summary.candidates << " candidates from "
                << summary.anchors << " anchors in " << summary.kept_figures << " of " << summary.ingested
                << " figures; " << summary.preserved << " reviewed entries kept)\n";
            return 0;
        }

        if (align->parsed()) {
            auto project = open_project(project_dir, store::Access::read);
            const auto fig = figure_or_fail(project, figure);
            alignment::AlignOptions opts;
            opts.mode = mode.empty() ? config.mode : alignment::parse_mode(mode);
            alignment::Aligner aligner(make_gateway(config, project.root()));
            const auto r = aligner.align(fig.image_ref(), module, opts);
            std::ostringstream summary;
            summary << module << ": " << (r.exists ? "exists" : "not found") << ", "
                    << r.final_mask.foreground() << " mask pixels\n";
            emit(alignment::to_json(r), summary.str(), out_path, out, err);
            return 0;
        }

        if (verify->parsed()) {
            std::optional<store::Project> project;
            try {
                project = store::Project::open(project_dir, store::Access::write);
            } catch (const store::LockedError &) {
                err << "figver: project is locked; the report will not be stored\n";
                project = open_project(project_dir, store::Access::read);
            } catch (const store::StoreError &e) {
                throw DomainError(e.what());
            }
            auto text = read_text(text_path);
            text.erase(text.find_last_not_of(" \t\r\n") + 1);
            const auto outcome =
                run_verify(*project, config, make_gateway(config, project->root()), figure, text, blind);
            json result = integrity::to_json(outcome.report);
            if (outcome.stored) result["report_key"] = outcome.stored->key;
            emit(result, integrity::summarize(outcome.report), out_path, out, err);
            return 0;
        }

        if (augment->parsed()) {
            auto project = open_project(project_dir, store::Access::read);
            const auto fig = figure_or_fail(project, figure);
            auto corpus = integrity::load_citation_corpus(citations, store::raster_size);
            alignment::AlignOptions opts;
            opts.mode = config.mode;
            const auto d = integrity::augment_missing(fig, module, std::move(corpus),
                                                      make_gateway(config, project.root()), opts);
            emit(integrity::to_json(d), d.description + (d.degraded ? "  (degraded)\n" : "\n"), out_path, out, err);
            return 0;
        }

        if (eval->parsed()) {
            const double t = threshold < 0 ? config.thresholds.match_iou : threshold;
            if (!(t > 0.0 && t <= 1.0)) {
                err << "figver eval: --threshold must be in (0, 1]\n";
                return 2;
            }
            const auto report = evaluate_datasets(dataset::import_dataset(pred), dataset::import_dataset(gold), t);
            emit(json(report), metrics::format_table(report), out_path, out, err);
            return 0;
        }

        if (exp->parsed()) {
            auto project = open_project(project_dir, store::Access::read);
            const auto entries = project.list_entries();
            dataset::export_dataset(entries, out_path);
            if (!samples_path.empty()) write_text(samples_path, samples_jsonl(entries, config.sampling));
            if (!frequency_path.empty())
                write_text(frequency_path,
                           json(dataset::module_frequency_report(entries, project.list_figures())).dump(2) + "\n");
            out << "exported " << entries.size() << " entries\n";
            return 0;
        }

        if (serve->parsed()) {
            auto project = open_project(project_dir, store::Access::write);
            ServiceOptions opts;
            if (!ui_dir.empty()) opts.ui_dir = ui_dir;
            Service service(project, config, make_gateway(config, project.root()), opts);
            sigset_t set;
            sigemptyset(&set);
            sigaddset(&set, SIGINT);
            sigaddset(&set, SIGTERM);
            pthread_sigmask(SIG_BLOCK, &set, nullptr);
            const int bound = service.bind(host, port);
            out << "serving " << project.root().string() << " on http://" << host << ":" << bound << "\n" << std::flush;
            std::thread waiter([&] {
                int sig = 0;
                sigwait(&set, &sig);
                service.stop();
            });
            service.run();
            pthread_kill(waiter.native_handle(), SIGTERM);
            waiter.join();
            return 0;
        }
    } catch (const std::exception &e) {
        err << "figver: error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

} // namespace figver::app
