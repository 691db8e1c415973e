#include <gtest/gtest.h>

#include <atomic>
#include <functional>
#include <thread>

#include "uasparse/nvd_client.hpp"

using namespace uasparse;
using nlohmann::json;
using namespace std::chrono_literals;

namespace {

/// Local HTTP server on an ephemeral port, stopped on destruction.
class FakeNvd {
public:
    explicit FakeNvd(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server_.Get("/rest/json/cves/2.0", [this, handler](const httplib::Request& req, httplib::Response& res) {
            ++hits_;
            handler(req, res);
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~FakeNvd() {
        server_.stop();
        thread_.join();
    }

    NvdClientConfig config() const {
        NvdClientConfig c;
        c.base_url = "http://127.0.0.1:" + std::to_string(port_) + "/rest/json/cves/2.0";
        c.max_requests_per_window = 100;
        c.rate_window = 1000ms;
        c.retry_backoff = 5ms;
        c.timeout = 5s;
        return c;
    }
    int hits() const { return hits_; }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
    std::atomic<int> hits_{0};
};

json vuln(const std::string& id, double base) {
    return {{"cve",
             {{"id", id},
              {"metrics",
               {{"cvssMetricV31",
                 {{{"type", "Primary"},
                   {"cvssData", {{"baseScore", base}}},
                   {"exploitabilityScore", 1.0},
                   {"impactScore", 2.0}}}}}}}}};
}

const CpeName kChrome{'a', "google", "chrome", "105.0.0.0"};

} // namespace

TEST(UrlEncode, ReservedCharacters) {
    EXPECT_EQ(url_encode("cpe:2.3:a:x:y:*"), "cpe%3A2.3%3Aa%3Ax%3Ay%3A%2A");
    EXPECT_EQ(url_encode("a b/c~d"), "a%20b%2Fc~d");
}

TEST(NvdClient, PaginatesUntilTotalCovered) {
    std::vector<std::string> seen_start;
    std::string seen_match, seen_key;
    FakeNvd nvd([&](const httplib::Request& req, httplib::Response& res) {
        seen_start.push_back(req.get_param_value("startIndex"));
        seen_match = req.get_param_value("virtualMatchString");
        seen_key = req.get_header_value("apiKey");
        const int start = std::stoi(req.get_param_value("startIndex"));
        json vulns = json::array();
        for (int i = start; i < std::min(start + 2, 5); ++i) vulns.push_back(vuln("CVE-" + std::to_string(i), i));
        res.set_content(json{{"totalResults", 5}, {"startIndex", start}, {"vulnerabilities", vulns}}.dump(),
                        "application/json");
    });
    auto cfg = nvd.config();
    cfg.api_key = "secret";
    cfg.results_per_page = 2;
    NvdClient client(cfg);
    const auto recs = client.fetch(kChrome);
    ASSERT_EQ(recs.size(), 5u);
    EXPECT_EQ(recs[4].base_score, 4.0);
    EXPECT_EQ(seen_start, (std::vector<std::string>{"0", "2", "4"}));
    EXPECT_EQ(seen_match, kChrome.to_string());
    EXPECT_EQ(seen_key, "secret");
    EXPECT_EQ(client.requests_made(), 3u);
}

TEST(NvdClient, NoKeyHeaderWithoutKey) {
    bool had_key = true;
    FakeNvd nvd([&](const httplib::Request& req, httplib::Response& res) {
        had_key = req.has_header("apiKey");
        res.set_content(R"({"totalResults":0,"vulnerabilities":[]})", "application/json");
    });
    NvdClient client(nvd.config());
    EXPECT_TRUE(client.fetch(kChrome).empty());
    EXPECT_FALSE(had_key);
}

TEST(NvdClient, ThrottlingEndsInRateLimited) {
    FakeNvd nvd([](const httplib::Request&, httplib::Response& res) { res.status = 429; });
    auto cfg = nvd.config();
    cfg.max_retries = 2;
    cfg.max_requests_per_window = 1;
    cfg.rate_window = 20ms;
    NvdClient client(cfg);
    EXPECT_THROW(client.fetch(kChrome), RateLimited);
    EXPECT_EQ(nvd.hits(), 3);
}

TEST(NvdClient, ServerErrorsRetriedThenNetworkError) {
    FakeNvd nvd([](const httplib::Request&, httplib::Response& res) { res.status = 503; });
    auto cfg = nvd.config();
    cfg.max_retries = 3;
    NvdClient client(cfg);
    EXPECT_THROW(client.fetch(kChrome), NetworkError);
    EXPECT_EQ(nvd.hits(), 4);
}

TEST(NvdClient, TransientFailureRecovers) {
    std::atomic<int> calls{0};
    FakeNvd nvd([&](const httplib::Request&, httplib::Response& res) {
        if (calls++ == 0) {
            res.status = 500;
            return;
        }
        res.set_content(json{{"totalResults", 1}, {"vulnerabilities", {vuln("CVE-1", 7.5)}}}.dump(), "application/json");
    });
    NvdClient client(nvd.config());
    const auto recs = client.fetch(kChrome);
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_EQ(recs[0].base_score, 7.5);
}

TEST(NvdClient, ClientErrorIsNotRetried) {
    FakeNvd nvd([](const httplib::Request&, httplib::Response& res) { res.status = 404; });
    NvdClient client(nvd.config());
    EXPECT_THROW(client.fetch(kChrome), NetworkError);
    EXPECT_EQ(nvd.hits(), 1);
}

TEST(NvdClient, BadBodyIsMalformed) {
    FakeNvd nvd([](const httplib::Request&, httplib::Response& res) { res.set_content("<html>", "text/html"); });
    NvdClient client(nvd.config());
    EXPECT_THROW(client.fetch(kChrome), MalformedResponse);

    FakeNvd shape([](const httplib::Request&, httplib::Response& res) { res.set_content("{}", "application/json"); });
    NvdClient client2(shape.config());
    EXPECT_THROW(client2.fetch(kChrome), MalformedResponse);
}

TEST(NvdClient, UnreachableHostIsNetworkError) {
    NvdClientConfig cfg;
    cfg.base_url = "http://127.0.0.1:1/rest";
    cfg.max_retries = 1;
    cfg.retry_backoff = 1ms;
    cfg.timeout = 1s;
    NvdClient client(cfg);
    EXPECT_THROW(client.fetch(kChrome), NetworkError);
}

TEST(RateGate, BlocksBeyondLimitWithinWindow) {
    RateGate gate(3, 150ms);
    const auto t0 = RateGate::Clock::now();
    for (int i = 0; i < 3; ++i) gate.acquire();
    EXPECT_LT(RateGate::Clock::now() - t0, 100ms);
    gate.acquire();
    EXPECT_GE(RateGate::Clock::now() - t0, 150ms);
    EXPECT_THROW(RateGate(0, 1s), std::invalid_argument);
}

TEST(RateGate, SaturateForcesWait) {
    RateGate gate(5, 100ms);
    gate.saturate();
    const auto t0 = RateGate::Clock::now();
    gate.acquire();
    EXPECT_GE(RateGate::Clock::now() - t0, 90ms);
}

TEST(NvdConfig, EnvironmentKey) {
    ::setenv("NVD_API_KEY", "abc", 1);
    EXPECT_EQ(nvd_config_from_env().api_key, std::optional<std::string>("abc"));
    EXPECT_EQ(nvd_config_from_env().effective_rate_limit(), 50u);
    ::setenv("NVD_API_KEY", "", 1);
    EXPECT_FALSE(nvd_config_from_env().api_key.has_value());
    ::unsetenv("NVD_API_KEY");
}
