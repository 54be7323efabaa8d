#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include "figver/backends.hpp"
#include "figver/geometry.hpp"

namespace testing {

namespace fs = std::filesystem;

inline fs::path fixtures_root() { return fs::path(FIGVER_FIXTURES); }
inline fs::path fixture_project() { return fixtures_root() / "project"; }

class TempDir {
  public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                ("figver-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir &) = delete;
    TempDir &operator=(const TempDir &) = delete;

    [[nodiscard]] const fs::path &path() const { return path_; }
    fs::path operator/(const std::string &rel) const { return path_ / rel; }

  private:
    fs::path path_;
};

/// Copy of the committed fixture project in a scratch directory.
inline fs::path copy_project(const TempDir &tmp, const std::string &name = "project") {
    const auto dest = tmp / name;
    fs::copy(fixture_project(), dest, fs::copy_options::recursive);
    return dest;
}

struct Grid {
    int w = 0;
    int h = 0;
    std::vector<std::uint8_t> px;

    [[nodiscard]] figver::BinaryMask mask() const { return figver::BinaryMask::encode(w, h, px); }
};

/// Random grid mixing speckle and rectangles, so runs of every length occur.
inline Grid random_grid(std::mt19937_64 &rng, int w, int h) {
    Grid g{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h, 0)};
    const int style = static_cast<int>(rng() % 4);
    if (style == 0) return g;
    if (style == 1) {
        const double p = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        std::bernoulli_distribution bit(p);
        for (auto &v : g.px) v = bit(rng) ? 1 : 0;
        return g;
    }
    const int rects = 1 + static_cast<int>(rng() % 4);
    for (int r = 0; r < rects; ++r) {
        const int x0 = static_cast<int>(rng() % w), y0 = static_cast<int>(rng() % h);
        const int x1 = x0 + 1 + static_cast<int>(rng() % (w - x0)), y1 = y0 + 1 + static_cast<int>(rng() % (h - y0));
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) g.px[static_cast<std::size_t>(y) * w + x] = 1;
    }
    if (style == 3) g.px.assign(g.px.size(), 1);
    return g;
}

/// Pass-through transport that counts calls per capability, tracks peak
/// concurrency and can stall each call.
class CountingTransport final : public figver::backends::Transport {
  public:
    explicit CountingTransport(std::shared_ptr<figver::backends::Transport> inner,
                               std::chrono::milliseconds delay = std::chrono::milliseconds(0))
        : inner_(std::move(inner)), delay_(delay) {}

    nlohmann::json call(figver::backends::Capability c, const nlohmann::json &request) override {
        const int now = ++active_;
        int peak = peak_.load();
        while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
        }
        {
            std::lock_guard lock(mutex_);
            ++counts_[c];
            requests_[c].push_back(request);
        }
        if (delay_.count() > 0) std::this_thread::sleep_for(delay_);
        struct Leave {
            std::atomic<int> &a;
            ~Leave() { --a; }
        } leave{active_};
        return inner_ ? inner_->call(c, request) : nlohmann::json::object();
    }
    [[nodiscard]] std::string endpoint(figver::backends::Capability c) const override {
        return inner_ ? inner_->endpoint(c) : "counting";
    }

    int count(figver::backends::Capability c) const {
        std::lock_guard lock(mutex_);
        auto it = counts_.find(c);
        return it == counts_.end() ? 0 : it->second;
    }
    std::vector<nlohmann::json> requests(figver::backends::Capability c) const {
        std::lock_guard lock(mutex_);
        auto it = requests_.find(c);
        return it == requests_.end() ? std::vector<nlohmann::json>{} : it->second;
    }
    int peak() const { return peak_.load(); }

  private:
    std::shared_ptr<figver::backends::Transport> inner_;
    std::chrono::milliseconds delay_;
    mutable std::mutex mutex_;
    std::map<figver::backends::Capability, int> counts_;
    std::map<figver::backends::Capability, std::vector<nlohmann::json>> requests_;
    std::atomic<int> active_{0};
    std::atomic<int> peak_{0};
};

inline std::shared_ptr<figver::backends::FixtureTransport> fixture_transport() {
    return std::make_shared<figver::backends::FixtureTransport>(fixture_project() / "fixtures");
}

} // namespace testing
