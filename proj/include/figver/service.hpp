#pragma once

// REST service for the review workbench.
//
//   GET  /api/figures                      figures with per-status entry counts
//   GET  /api/figures/{id}                 figure record, image URL and entries
//   GET  /api/figures/{id}/image           raw image bytes
//   POST /api/figures/{id}/missed          {"box":[x0,y0,x1,y1],"name","actor"?}
//   GET  /api/queue                        entries with status auto, by id
//   GET  /api/entries?status=&figure=      filtered entries
//   GET  /api/entries/{id}
//   POST /api/entries/{id}/decision        {"decision":"accepted"|"rejected","actor"?}
//   PUT  /api/entries/{id}/attributes      AttributeSet JSON (+ "actor"?)
//   GET  /api/reports/{figure}             stored integrity reports
//   GET  /api/export                       dataset JSON-Lines
//   POST /api/jobs                         {"kind":"verify","figure","text","blind"?}
//                                          or {"kind":"build","manifest"?}
//   GET  /api/jobs, GET /api/jobs/{id}     job status and result
//   GET  /api/audit                        audit log
//
// Errors are {"error": message} with 400 (bad request), 404 (unknown id) or
// 409 (state conflict). Everything else under / is served from the UI
// directory when one is configured.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "figver/config.hpp"
#include "figver/store.hpp"

namespace figver::app {

struct ServiceOptions {
    std::optional<std::filesystem::path> ui_dir;
    std::string default_actor = "reviewer";
};

class Service {
  public:
    Service(store::Project &project, RunConfig config, std::shared_ptr<backends::Gateway> gateway,
            ServiceOptions options = {});
    ~Service();
    Service(const Service &) = delete;
    Service &operator=(const Service &) = delete;

    /// Binds to host:port (port 0 picks a free one) and returns the port.
    int bind(const std::string &host, int port);
    /// Serves until stop(); call after bind().
    void run();
    /// run() on a background thread.
    void start();
    void stop();
    /// Blocks until every queued job has finished.
    void drain_jobs();

  private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace figver::app
