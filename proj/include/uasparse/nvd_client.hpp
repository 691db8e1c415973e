#pragma once

#include <chrono>
#include <cstdlib>
#include <deque>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "uasparse/errors.hpp"
#include "uasparse/vulnscore.hpp"

namespace uasparse {

/// Sliding-window limiter: at most `limit` acquisitions per `window`.
class RateGate {
public:
    using Clock = std::chrono::steady_clock;

    RateGate(std::size_t limit, std::chrono::milliseconds window) : limit_(limit), window_(window) {
        if (limit_ == 0) throw std::invalid_argument("RateGate: limit must be positive");
    }

    void acquire() {
        std::unique_lock lock(mutex_);
        for (;;) {
            const auto now = Clock::now();
            while (!stamps_.empty() && now - stamps_.front() >= window_) stamps_.pop_front();
            if (stamps_.size() < limit_) {
                stamps_.push_back(now);
                return;
            }
            const auto wake = stamps_.front() + window_;
            lock.unlock();
            std::this_thread::sleep_until(wake);
            lock.lock();
        }
    }

    /// Treats the whole window as consumed; used after the server reports throttling.
    void saturate() {
        std::unique_lock lock(mutex_);
        const auto now = Clock::now();
        stamps_.clear();
        for (std::size_t i = 0; i < limit_; ++i) stamps_.push_back(now);
    }

private:
    std::size_t limit_;
    std::chrono::milliseconds window_;
    std::mutex mutex_;
    std::deque<Clock::time_point> stamps_;
};

inline std::string url_encode(std::string_view s) {
    static const char* hex = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : s) {
        if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
            out.push_back(static_cast<char>(c));
        } else {
            out.push_back('%');
            out.push_back(hex[c >> 4]);
            out.push_back(hex[c & 15]);
        }
    }
    return out;
}

/// Reads NVD_API_KEY; an empty value counts as unset.
inline NvdClientConfig nvd_config_from_env(NvdClientConfig cfg = {}) {
    if (const char* key = std::getenv("NVD_API_KEY"); key && *key) cfg.api_key = key;
    return cfg;
}

/// Live CVE listing client for the NVD 2.0 REST API. Requests go through the
/// rate gate one at a time; pages are fetched until totalResults is covered.
class NvdClient : public CveSource {
public:
    explicit NvdClient(NvdClientConfig cfg) : cfg_(std::move(cfg)), gate_(cfg_.effective_rate_limit(), cfg_.rate_window) {
        const auto scheme_end = cfg_.base_url.find("://");
        const auto path_start = cfg_.base_url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
        origin_ = path_start == std::string::npos ? cfg_.base_url : cfg_.base_url.substr(0, path_start);
        path_ = path_start == std::string::npos ? "/" : cfg_.base_url.substr(path_start);
    }

    std::vector<CveRecord> fetch(const CpeName& cpe) override {
        std::vector<CveRecord> all;
        std::size_t start = 0;
        for (;;) {
            const NvdPage page = fetch_page(cpe.to_string(), start);
            all.insert(all.end(), page.records.begin(), page.records.end());
            start += page.vulnerabilities_in_page;
            if (page.vulnerabilities_in_page == 0 || start >= page.total_results) break;
        }
        return prefer_latest(all);
    }

    std::size_t requests_made() const { return requests_; }

private:
    NvdPage fetch_page(const std::string& cpe, std::size_t start) {
        const std::string target = path_ + "?virtualMatchString=" + url_encode(cpe) +
                                   "&startIndex=" + std::to_string(start) +
                                   "&resultsPerPage=" + std::to_string(cfg_.results_per_page);
        httplib::Headers headers;
        if (cfg_.api_key) headers.emplace("apiKey", *cfg_.api_key);

        std::string last_error;
        bool throttled = false;
        for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
            if (attempt > 0 && !throttled) std::this_thread::sleep_for(cfg_.retry_backoff * (1 << (attempt - 1)));
            gate_.acquire();
            ++requests_;
            httplib::Client client(origin_);
            client.set_connection_timeout(cfg_.timeout);
            client.set_read_timeout(cfg_.timeout);
            auto res = client.Get(target, headers);
            throttled = false;
            if (!res) {
                last_error = "request to " + origin_ + " failed: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status == 403 || res->status == 429) {
                throttled = true;
                last_error = "HTTP " + std::to_string(res->status);
                gate_.saturate();
                continue;
            }
            if (res->status >= 500) {
                last_error = "HTTP " + std::to_string(res->status);
                continue;
            }
            if (res->status != 200) throw NetworkError("NVD returned HTTP " + std::to_string(res->status) + " for " + cpe);
            auto j = nlohmann::json::parse(res->body, nullptr, false);
            if (j.is_discarded()) throw MalformedResponse("NVD body is not JSON for " + cpe);
            return parse_nvd_page(j);
        }
        if (throttled) throw RateLimited("NVD kept throttling " + cpe + " (" + last_error + ")");
        throw NetworkError(last_error + " after " + std::to_string(cfg_.max_retries) + " retries");
    }

    NvdClientConfig cfg_;
    RateGate gate_;
    std::string origin_;
    std::string path_;
    std::size_t requests_ = 0;
};

} // namespace uasparse
