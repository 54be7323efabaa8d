#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "figver/alignment.hpp"
#include "figver/backends.hpp"
#include "figver/dataset.hpp"

namespace figver::app {

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct BackendSpec {
    std::string endpoint = "fixture:fixtures";
    double timeout_seconds = 60.0;
    int max_in_flight = 4;

    friend bool operator==(const BackendSpec &, const BackendSpec &) = default;
};

/// Config file keys:
///   backends    {"default": spec, "<capability>": spec, ...}; spec =
///               {"endpoint", "timeout", "max_in_flight"}, overrides merge
///               over "default"
///   thresholds  {"min_pixel","min_iou","consistency_iou","match_iou","dedup_iou"}
///   sampling    {"alpha","beta","seed"}
///   filter      {"categories": [labels]}
///   mode        "full" | "simplified"
///   concurrency int >= 1
///   inline_images  bool (remote backends receive base64 image bytes)
struct RunConfig {
    std::map<backends::Capability, BackendSpec> backends;
    dataset::Thresholds thresholds;
    dataset::Sampling sampling;
    std::vector<std::string> categories = backends::default_kept_categories();
    alignment::Mode mode = alignment::Mode::full;
    int concurrency = 4;
    bool inline_images = false;

    RunConfig();
    void validate() const;
};

RunConfig parse_config(const nlohmann::json &j);
nlohmann::json to_json(const RunConfig &c);

/// Reads `path`, else $FIGVER_CONFIG, else returns the defaults.
RunConfig load_config(const std::optional<std::filesystem::path> &path);

/// Digest of the canonical JSON form; keys report snapshots.
std::string config_digest(const RunConfig &c);

/// Fixture endpoints are resolved against `root`; one transport per
/// distinct endpoint.
std::shared_ptr<backends::Gateway> make_gateway(const RunConfig &c, const std::filesystem::path &root);

} // namespace figver::app
