#include "figver/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "figver/digest.hpp"

namespace figver::app {

namespace fs = std::filesystem;
using nlohmann::json;
using backends::Capability;

RunConfig::RunConfig() {
    for (auto c : backends::kAllCapabilities) backends[c] = BackendSpec{};
}

void RunConfig::validate() const {
    try {
        thresholds.validate();
        sampling.validate();
    } catch (const std::exception &e) {
        throw ConfigError(e.what());
    }
    if (concurrency < 1) throw ConfigError("concurrency must be >= 1");
    for (const auto &label : categories)
        if (!backends::is_taxonomy_label(label)) throw ConfigError("filter category '" + label + "' is not a taxonomy label");
    for (const auto &[cap, spec] : backends) {
        backends::BackendDescriptor d{cap, spec.endpoint, spec.timeout_seconds, spec.max_in_flight};
        try {
            d.validate();
        } catch (const std::exception &e) {
            throw ConfigError("backend " + std::string(to_string(cap)) + ": " + e.what());
        }
        if (spec.endpoint.rfind("fixture:", 0) != 0 && spec.endpoint.rfind("http://", 0) != 0 &&
            spec.endpoint.rfind("https://", 0) != 0)
            throw ConfigError("backend " + std::string(to_string(cap)) + ": endpoint must start with fixture:, http:// or https://");
    }
}

namespace {

void reject_unknown(const json &j, std::initializer_list<const char *> known, const std::string &where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    std::set<std::string> k(known.begin(), known.end());
    for (const auto &[key, _] : j.items())
        if (!k.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

BackendSpec merge_spec(BackendSpec base, const json &j, const std::string &where) {
    reject_unknown(j, {"endpoint", "timeout", "max_in_flight"}, where);
    if (j.contains("endpoint")) base.endpoint = j["endpoint"].get<std::string>();
    if (j.contains("timeout")) base.timeout_seconds = j["timeout"].get<double>();
    if (j.contains("max_in_flight")) base.max_in_flight = j["max_in_flight"].get<int>();
    return base;
}

} // namespace

RunConfig parse_config(const json &j) {
    RunConfig c;
    try {
        reject_unknown(j, {"backends", "thresholds", "sampling", "filter", "mode", "concurrency", "inline_images"},
                       "config");
        if (const auto b = j.find("backends"); b != j.end()) {
            if (!b->is_object()) throw ConfigError("backends must be an object");
            BackendSpec base;
            if (b->contains("default")) base = merge_spec(base, (*b)["default"], "backends.default");
            for (auto cap : backends::kAllCapabilities) c.backends[cap] = base;
            for (const auto &[key, value] : b->items()) {
                if (key == "default") continue;
                const auto cap = backends::parse_capability(key);
                if (!cap) throw ConfigError("unknown capability '" + key + "' in backends");
                c.backends[*cap] = merge_spec(base, value, "backends." + key);
            }
        }
        if (const auto t = j.find("thresholds"); t != j.end()) {
            reject_unknown(*t, {"min_pixel", "min_iou", "consistency_iou", "match_iou", "dedup_iou"}, "thresholds");
            c.thresholds.min_pixel = t->value("min_pixel", c.thresholds.min_pixel);
            c.thresholds.min_iou = t->value("min_iou", c.thresholds.min_iou);
            c.thresholds.consistency_iou = t->value("consistency_iou", c.thresholds.consistency_iou);
            c.thresholds.match_iou = t->value("match_iou", c.thresholds.match_iou);
            c.thresholds.dedup_iou = t->value("dedup_iou", c.thresholds.dedup_iou);
        }
        if (const auto s = j.find("sampling"); s != j.end()) {
            reject_unknown(*s, {"alpha", "beta", "seed"}, "sampling");
            c.sampling.alpha = s->value("alpha", c.sampling.alpha);
            c.sampling.beta = s->value("beta", c.sampling.beta);
            c.sampling.seed = s->value("seed", c.sampling.seed);
        }
        if (const auto f = j.find("filter"); f != j.end()) {
            reject_unknown(*f, {"categories"}, "filter");
            if (f->contains("categories")) c.categories = (*f)["categories"].get<std::vector<std::string>>();
        }
        if (j.contains("mode")) c.mode = alignment::parse_mode(j["mode"].get<std::string>());
        c.concurrency = j.value("concurrency", c.concurrency);
        c.inline_images = j.value("inline_images", c.inline_images);
    } catch (const ConfigError &) {
        throw;
    } catch (const std::exception &e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    c.validate();
    return c;
}

json to_json(const RunConfig &c) {
    json b = json::object();
    for (const auto &[cap, spec] : c.backends)
        b[std::string(to_string(cap))] = {
            {"endpoint", spec.endpoint}, {"timeout", spec.timeout_seconds}, {"max_in_flight", spec.max_in_flight}};
    return json{{"backends", b},
                {"thresholds",
                 {{"min_pixel", c.thresholds.min_pixel},
                  {"min_iou", c.thresholds.min_iou},
                  {"consistency_iou", c.thresholds.consistency_iou},
                  {"match_iou", c.thresholds.match_iou},
                  {"dedup_iou", c.thresholds.dedup_iou}}},
                {"sampling", {{"alpha", c.sampling.alpha}, {"beta", c.sampling.beta}, {"seed", c.sampling.seed}}},
                {"filter", {{"categories", c.categories}}},
                {"mode", to_string(c.mode)},
                {"concurrency", c.concurrency},
                {"inline_images", c.inline_images}};
}

RunConfig load_config(const std::optional<fs::path> &path) {
    std::optional<fs::path> p = path;
    if (!p) {
        if (const char *env = std::getenv("FIGVER_CONFIG"); env && *env) p = fs::path(env);
    }
    if (!p) return RunConfig{};
    std::ifstream in(*p);
    if (!in) throw ConfigError("cannot read config file " + p->string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception &e) {
        throw ConfigError("config file " + p->string() + " is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

std::string config_digest(const RunConfig &c) { return hex_digest(to_json(c).dump()); }

std::shared_ptr<backends::Gateway> make_gateway(const RunConfig &c, const fs::path &root) {
    std::map<std::string, std::shared_ptr<backends::Transport>> transports;
    std::map<Capability, backends::Route> routes;
    for (const auto &[cap, spec] : c.backends) {
        auto &t = transports[spec.endpoint + "|" + std::to_string(spec.timeout_seconds)];
        if (!t) {
            if (spec.endpoint.rfind("fixture:", 0) == 0) {
                fs::path dir = spec.endpoint.substr(8);
                if (dir.is_relative()) dir = root / dir;
                t = std::make_shared<backends::FixtureTransport>(dir);
            } else {
                backends::RemoteOptions opts;
                opts.timeout_seconds = spec.timeout_seconds;
                opts.inline_images = c.inline_images;
                opts.image_root = root;
                t = std::make_shared<backends::RemoteTransport>(spec.endpoint, opts);
            }
        }
        routes.emplace(cap, backends::Route{t, {cap, spec.endpoint, spec.timeout_seconds, spec.max_in_flight}});
    }
    return std::make_shared<backends::Gateway>(std::move(routes));
}

} // namespace figver::app
