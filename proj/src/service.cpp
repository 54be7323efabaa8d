#include "figver/service.hpp"

#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <thread>

#include <httplib.h>

#include "figver/pipeline.hpp"

namespace figver::app {

namespace fs = std::filesystem;
using nlohmann::json;
using dataset::DatasetEntry;
using dataset::ReviewError;
using dataset::Status;

namespace {

struct HttpError : std::runtime_error {
    int status;
    HttpError(int s, const std::string &what) : std::runtime_error(what), status(s) {}
};

void send_json(httplib::Response &res, const json &body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

json parse_body(const httplib::Request &req) {
    try {
        auto j = json::parse(req.body);
        if (!j.is_object()) throw HttpError(400, "request body must be a JSON object");
        return j;
    } catch (const json::exception &e) {
        throw HttpError(400, std::string("request body is not valid JSON: ") + e.what());
    }
}

int review_status(ReviewError::Kind k) {
    switch (k) {
    case ReviewError::Kind::unknown_entry: return 404;
    case ReviewError::Kind::illegal_transition: return 409;
    case ReviewError::Kind::invalid_request: return 400;
    }
    return 400;
}

std::string mime_for(const fs::path &p) {
    const auto ext = p.extension().string();
    if (ext == ".png") return "image/png";
    if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return "image/x-portable-anymap";
    if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
    return "application/octet-stream";
}

} // namespace

struct Job {
    std::string id;
    std::string kind;
    json request;
    std::string status = "queued";  // queued | running | done | failed
    json result;
    std::string error;
};

json to_json(const Job &j) {
    json out{{"id", j.id}, {"kind", j.kind}, {"status", j.status}, {"request", j.request}};
    if (j.status == "done") out["result"] = j.result;
    if (j.status == "failed") out["error"] = j.error;
    return out;
}

struct Service::Impl {
    store::Project &project;
    RunConfig config;
    std::shared_ptr<backends::Gateway> gateway;
    ServiceOptions options;
    httplib::Server server;
    std::thread server_thread;

    std::mutex jobs_mutex;
    std::condition_variable jobs_cv;
    std::map<std::string, Job> jobs;
    std::deque<std::string> queue;
    std::size_t next_job = 1;
    bool busy = false;
    bool stopping = false;
    std::thread worker;

    Impl(store::Project &p, RunConfig c, std::shared_ptr<backends::Gateway> g, ServiceOptions o)
        : project(p), config(std::move(c)), gateway(std::move(g)), options(std::move(o)) {
        routes();
        worker = std::thread([this] { work(); });
    }

    ~Impl() {
        {
            std::lock_guard lock(jobs_mutex);
            stopping = true;
        }
        jobs_cv.notify_all();
        if (worker.joinable()) worker.join();
        server.stop();
        if (server_thread.joinable()) server_thread.join();
    }

    std::string actor_of(const json &body) const { return body.value("actor", options.default_actor); }

    template <typename F>
    auto guarded(F f) {
        return [this, f](const httplib::Request &req, httplib::Response &res) {
            try {
                f(req, res);
            } catch (const HttpError &e) {
                send_json(res, {{"error", e.what()}}, e.status);
            } catch (const ReviewError &e) {
                send_json(res, {{"error", e.what()}}, review_status(e.kind()));
            } catch (const json::exception &e) {
                send_json(res, {{"error", e.what()}}, 400);
            } catch (const GeometryError &e) {
                send_json(res, {{"error", e.what()}}, 400);
            } catch (const std::invalid_argument &e) {
                send_json(res, {{"error", e.what()}}, 400);
            }
        };
    }

    json entries_json(const std::vector<DatasetEntry> &entries) const {
        json out = json::array();
        for (const auto &e : entries) out.push_back(e);
        return out;
    }

    dataset::FigureRecord require_figure(const std::string &id) const {
        auto f = project.get_figure(id);
        if (!f) throw HttpError(404, "unknown figure '" + id + "'");
        return *f;
    }

    void routes() {
        server.set_exception_handler([](const httplib::Request &, httplib::Response &res, std::exception_ptr ep) {
            std::string what = "internal error";
            try {
                if (ep) std::rethrow_exception(ep);
            } catch (const std::exception &e) {
                what = e.what();
            } catch (...) {
            }
            send_json(res, {{"error", what}}, 500);
        });

        server.Get("/api/figures", guarded([this](const httplib::Request &, httplib::Response &res) {
            json out = json::array();
            const auto entries = project.list_entries();
            for (const auto &f : project.list_figures()) {
                json counts{{"auto", 0}, {"accepted", 0}, {"rejected", 0}, {"missed", 0}};
                for (const auto &e : entries)
                    if (e.figure_id == f.id) counts[std::string(dataset::to_string(e.status))] =
                                                 counts[std::string(dataset::to_string(e.status))].get<int>() + 1;
                json item = f;
                item["counts"] = counts;
                out.push_back(item);
            }
            send_json(res, out);
        }));

        server.Get(R"(/api/figures/([^/]+))", guarded([this](const httplib::Request &req, httplib::Response &res) {
            const auto figure = require_figure(req.matches[1]);
            send_json(res, {{"figure", figure},
                            {"image_url", "/api/figures/" + figure.id + "/image"},
                            {"entries", entries_json(project.list_entries({std::nullopt, figure.id}))}});
        }));

        server.Get(R"(/api/figures/([^/]+)/image)",
                   guarded([this](const httplib::Request &req, httplib::Response &res) {
                       const auto figure = require_figure(req.matches[1]);
                       const auto path = project.root() / figure.image;
                       if (!fs::exists(path)) throw HttpError(404, "image file missing for '" + figure.id + "'");
                       res.set_content(store::read_file(path), mime_for(path));
                   }));

        server.Post(R"(/api/figures/([^/]+)/missed)",
                    guarded([this](const httplib::Request &req, httplib::Response &res) {
                        const auto figure = require_figure(req.matches[1]);
                        const auto body = parse_body(req);
                        if (!body.contains("box")) throw HttpError(400, "missing 'box'");
                        const auto box = body.at("box").get<BoundingBox>();
                        const auto name = body.value("name", std::string{});
                        const auto actor = actor_of(body);
                        const auto created = project.insert_entry(
                            actor, "mark_missed",
                            [&](const std::vector<DatasetEntry> &existing) {
                                return dataset::make_missed_entry(figure, dataset::next_missed_id(figure.id, existing),
                                                                  name, box, actor, store::utc_now());
                            },
                            {{"figure", figure.id}, {"box", box}, {"name", name}});
                        send_json(res, created, 201);
                    }));

        server.Get("/api/queue", guarded([this](const httplib::Request &, httplib::Response &res) {
            send_json(res, entries_json(project.list_entries({Status::auto_, std::nullopt})));
        }));

        server.Get("/api/entries", guarded([this](const httplib::Request &req, httplib::Response &res) {
            store::EntryFilter filter;
            if (req.has_param("status")) {
                try {
                    filter.status = dataset::parse_status(req.get_param_value("status"));
                } catch (const std::exception &e) {
                    throw HttpError(400, e.what());
                }
            }
            if (req.has_param("figure")) filter.figure_id = req.get_param_value("figure");
            send_json(res, entries_json(project.list_entries(filter)));
        }));

        server.Get(R"(/api/entries/([^/]+))", guarded([this](const httplib::Request &req, httplib::Response &res) {
            const auto e = project.get_entry(req.matches[1]);
            if (!e) throw HttpError(404, "unknown entry '" + std::string(req.matches[1]) + "'");
            send_json(res, *e);
        }));

        server.Post(R"(/api/entries/([^/]+)/decision)",
                    guarded([this](const httplib::Request &req, httplib::Response &res) {
                        const auto body = parse_body(req);
                        if (!body.contains("decision")) throw HttpError(400, "missing 'decision'");
                        dataset::Decision decision;
                        try {
                            decision = dataset::parse_decision(body.at("decision").get<std::string>());
                        } catch (const std::exception &e) {
                            throw HttpError(400, e.what());
                        }
                        const auto actor = actor_of(body);
                        const auto updated = project.update_entry(
                            req.matches[1], actor, std::string(dataset::to_string(decision)),
                            [&](DatasetEntry &e) { dataset::apply_decision(e, decision, actor, store::utc_now()); },
                            {{"decision", dataset::to_string(decision)}});
                        send_json(res, updated);
                    }));

        server.Put(R"(/api/entries/([^/]+)/attributes)",
                   guarded([this](const httplib::Request &req, httplib::Response &res) {
                       auto body = parse_body(req);
                       const auto actor = actor_of(body);
                       body.erase("actor");
                       const std::string id = req.matches[1];
                       const auto updated = project.update_entry(
                           id, actor, "edit_attributes",
                           [&](DatasetEntry &e) {
                               if (!body.contains("name")) body["name"] = e.module_name;
                               auto attrs = body.get<alignment::AttributeSet>();
                               if (attrs.name != e.module_name)
                                   throw HttpError(400, "attribute name must match the entry's module name");
                               e.attributes = std::move(attrs);
                               e.review_log.push_back({actor, store::utc_now(), "edit_attributes"});
                           },
                           {{"attributes", body}});
                       send_json(res, updated);
                   }));

        server.Get(R"(/api/reports/([^/]+))", guarded([this](const httplib::Request &req, httplib::Response &res) {
            json out = json::array();
            for (const auto &r : project.list_reports(req.matches[1])) out.push_back(r.body);
            send_json(res, out);
        }));

        server.Get("/api/export", guarded([this](const httplib::Request &, httplib::Response &res) {
            res.set_content(dataset::export_jsonl(project.list_entries()), "application/x-ndjson");
        }));

        server.Get("/api/audit", guarded([this](const httplib::Request &, httplib::Response &res) {
            json out = json::array();
            for (const auto &e : project.audit_log()) out.push_back(e);
            send_json(res, out);
        }));

        server.Post("/api/jobs", guarded([this](const httplib::Request &req, httplib::Response &res) {
            const auto body = parse_body(req);
            const auto kind = body.value("kind", std::string{});
            if (kind == "verify") {
                if (!body.contains("figure") || !body.contains("text"))
                    throw HttpError(400, "verify job needs 'figure' and 'text'");
                require_figure(body["figure"].get<std::string>());
            } else if (kind != "build") {
                throw HttpError(400, "job kind must be 'verify' or 'build'");
            }
            send_json(res, submit(kind, body), 202);
        }));

        server.Get("/api/jobs", guarded([this](const httplib::Request &, httplib::Response &res) {
            std::lock_guard lock(jobs_mutex);
            json out = json::array();
            for (const auto &[id, j] : jobs) out.push_back(to_json(j));
            send_json(res, out);
        }));

        server.Get(R"(/api/jobs/([^/]+))", guarded([this](const httplib::Request &req, httplib::Response &res) {
            std::lock_guard lock(jobs_mutex);
            const auto it = jobs.find(req.matches[1]);
            if (it == jobs.end()) throw HttpError(404, "unknown job '" + std::string(req.matches[1]) + "'");
            send_json(res, to_json(it->second));
        }));

        if (options.ui_dir && fs::is_directory(*options.ui_dir)) server.set_mount_point("/", options.ui_dir->string());
    }

    json submit(const std::string &kind, const json &request) {
        std::lock_guard lock(jobs_mutex);
        Job j;
        j.id = "job-" + std::to_string(next_job++);
        j.kind = kind;
        j.request = request;
        const auto out = to_json(j);
        queue.push_back(j.id);
        jobs.emplace(j.id, std::move(j));
        jobs_cv.notify_all();
        return out;
    }

    json execute(const Job &job) {
        if (job.kind == "verify") {
            const auto outcome = run_verify(project, config, gateway, job.request.at("figure").get<std::string>(),
                                            job.request.at("text").get<std::string>(),
                                            job.request.value("blind", false));
            json out = integrity::to_json(outcome.report);
            if (outcome.stored) out["report_key"] = outcome.stored->key;
            return out;
        }
        fs::path manifest = project.resolve(project.manifest().paths.manifest);
        if (job.request.contains("manifest")) manifest = project.resolve(job.request["manifest"].get<std::string>());
        return to_json(run_build(project, config, *gateway, manifest, job.request.value("actor", options.default_actor)));
    }

    void work() {
        std::unique_lock lock(jobs_mutex);
        for (;;) {
            jobs_cv.wait(lock, [this] { return stopping || !queue.empty(); });
            if (stopping) return;
            const auto id = queue.front();
            queue.pop_front();
            busy = true;
            jobs[id].status = "running";
            const Job snapshot = jobs[id];
            lock.unlock();
            json result;
            std::string error;
            try {
                result = execute(snapshot);
            } catch (const std::exception &e) {
                error = e.what();
            }
            lock.lock();
            auto &j = jobs[id];
            if (error.empty()) {
                j.status = "done";
                j.result = std::move(result);
            } else {
                j.status = "failed";
                j.error = std::move(error);
            }
            busy = false;
            jobs_cv.notify_all();
        }
    }
};

Service::Service(store::Project &project, RunConfig config, std::shared_ptr<backends::Gateway> gateway,
                 ServiceOptions options)
    : impl_(std::make_unique<Impl>(project, std::move(config), std::move(gateway), std::move(options))) {
    if (!project.writable()) throw store::StoreError("the service needs the project open for writing");
}

Service::~Service() = default;

int Service::bind(const std::string &host, int port) {
    if (port == 0) {
        const int p = impl_->server.bind_to_any_port(host);
        if (p < 0) throw std::runtime_error("cannot bind to " + host);
        return p;
    }
    if (!impl_->server.bind_to_port(host, port))
        throw std::runtime_error("cannot bind to " + host + ":" + std::to_string(port));
    return port;
}

void Service::run() { impl_->server.listen_after_bind(); }

void Service::start() {
    impl_->server_thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
}

void Service::stop() { impl_->server.stop(); }

void Service::drain_jobs() {
    std::unique_lock lock(impl_->jobs_mutex);
    impl_->jobs_cv.wait(lock, [this] { return impl_->queue.empty() && !impl_->busy; });
}

} // namespace figver::app
