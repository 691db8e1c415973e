#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "uasparse/errors.hpp"

namespace uasparse {

/// Parsed fields in (OS name, OS version, software name, software version) order.
struct ParsedUas {
    std::optional<std::string> os_name;
    std::optional<std::string> os_version;
    std::optional<std::string> software_name;
    std::optional<std::string> software_version;
    std::optional<std::string> source_cidr;

    bool empty_tuple() const { return !os_name && !os_version && !software_name && !software_version; }
    bool operator==(const ParsedUas&) const = default;
};

// ---------------------------------------------------------------------------
// CPE names

struct CpeName {
    char part = 'a'; ///< 'a' application, 'o' operating system
    std::string vendor;
    std::string product;
    std::optional<std::string> version; ///< nullopt renders as the "*" wildcard

    /// CPE 2.3 formatted string binding with the trailing attributes wildcarded.
    std::string to_string() const {
        return "cpe:2.3:" + std::string(1, part) + ":" + escape(vendor) + ":" + escape(product) + ":" +
               (version ? escape(*version) : std::string("*")) + ":*:*:*:*:*:*:*";
    }

    bool operator==(const CpeName&) const = default;

    static std::string escape(std::string_view v) {
        std::string out;
        for (char c : v) {
            const auto u = static_cast<unsigned char>(c);
            if (std::isalnum(u) || c == '_' || c == '.' || c == '-') {
                out.push_back(static_cast<char>(std::tolower(u)));
            } else if (c == ' ') {
                out.push_back('_');
            } else {
                out.push_back('\\');
                out.push_back(c);
            }
        }
        return out;
    }
};

struct AliasEntry {
    char part = 'a';
    std::string vendor;
    std::string product;
};

/// Class name -> CPE vendor/product. File format, one mapping per line:
///   Internet Explorer = a:microsoft:internet_explorer
/// Blank lines and lines starting with '#' are ignored.
class AliasTable {
public:
    AliasTable() = default;

    static AliasTable defaults() {
        AliasTable t;
        t.set("Android", {'o', "google", "android"});
        t.set("iOS", {'o', "apple", "iphone_os"});
        t.set("iPad", {'o', "apple", "ipados"});
        t.set("Linux", {'o', "linux", "linux_kernel"});
        t.set("Macintosh", {'o', "apple", "macos"});
        t.set("Windows", {'o', "microsoft", "windows"});
        t.set("Android WebView", {'a', "google", "android_webview"});
        t.set("Chrome", {'a', "google", "chrome"});
        t.set("Facebook App", {'a', "facebook", "facebook"});
        t.set("Instagram", {'a', "instagram", "instagram"});
        t.set("Internet Explorer", {'a', "microsoft", "internet_explorer"});
        t.set("Opera", {'a', "opera", "opera_browser"});
        return t;
    }

    static AliasTable parse(std::istream& in) {
        AliasTable t;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos || line[first] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw FormatError("alias table line " + std::to_string(line_no) + ": missing '='");
            const std::string name = trim(line.substr(0, eq));
            const std::string rhs = trim(line.substr(eq + 1));
            const auto c1 = rhs.find(':');
            const auto c2 = c1 == std::string::npos ? std::string::npos : rhs.find(':', c1 + 1);
            if (name.empty() || c1 != 1 || c2 == std::string::npos || (rhs[0] != 'a' && rhs[0] != 'o') ||
                c2 == c1 + 1 || c2 + 1 >= rhs.size()) {
                throw FormatError("alias table line " + std::to_string(line_no) + ": expected 'Name = a|o:vendor:product'");
            }
            t.set(name, {rhs[0], rhs.substr(c1 + 1, c2 - c1 - 1), rhs.substr(c2 + 1)});
        }
        return t;
    }

    static AliasTable load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw FileNotFound("alias table '" + path + "' not found");
        return parse(in);
    }

    void set(const std::string& name, AliasEntry e) { entries_[name] = std::move(e); }

    const AliasEntry* find(const std::string& name) const {
        auto it = entries_.find(name);
        return it == entries_.end() ? nullptr : &it->second;
    }

    std::size_t size() const { return entries_.size(); }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, AliasEntry> entries_;
};

/// OS name -> part "o" candidate, software name -> part "a" candidate, with the
/// version slot filled when known. Names missing from the alias table are
/// appended to `unmapped` instead.
inline std::vector<CpeName> to_cpe_candidates(const ParsedUas& parsed, const AliasTable& aliases,
                                              std::vector<std::string>* unmapped = nullptr) {
    if (parsed.empty_tuple()) throw EmptyTuple("to_cpe_candidates: all four fields are absent");
    std::vector<CpeName> out;
    auto add = [&](const std::optional<std::string>& name, const std::optional<std::string>& version) {
        if (!name) return;
        const AliasEntry* e = aliases.find(*name);
        if (!e) {
            if (unmapped) unmapped->push_back(*name);
            return;
        }
        out.push_back({e->part, e->vendor, e->product, version});
    };
    add(parsed.os_name, parsed.os_version);
    add(parsed.software_name, parsed.software_version);
    return out;
}

// ---------------------------------------------------------------------------
// CVE records

enum class CvssVersion : std::uint8_t { V2_0 = 20, V3_0 = 30, V3_1 = 31 };

inline std::string cvss_version_string(CvssVersion v) {
    switch (v) {
    case CvssVersion::V2_0: return "2.0";
    case CvssVersion::V3_0: return "3.0";
    case CvssVersion::V3_1: return "3.1";
    }
    return "?";
}

inline std::optional<CvssVersion> parse_cvss_version(const nlohmann::json& j) {
    std::string s;
    if (j.is_string()) {
        s = j.get<std::string>();
    } else if (j.is_number()) {
        const double d = j.get<double>();
        if (std::abs(d - 2.0) < 1e-9) return CvssVersion::V2_0;
        if (std::abs(d - 3.0) < 1e-9) return CvssVersion::V3_0;
        if (std::abs(d - 3.1) < 1e-9) return CvssVersion::V3_1;
        return std::nullopt;
    } else {
        return std::nullopt;
    }
    if (s == "2.0" || s == "2") return CvssVersion::V2_0;
    if (s == "3.0" || s == "3") return CvssVersion::V3_0;
    if (s == "3.1") return CvssVersion::V3_1;
    return std::nullopt;
}

struct CveRecord {
    std::string cve_id;
    double base_score = 0.0;
    double exploitability_score = 0.0;
    double impact_score = 0.0;
    CvssVersion cvss_version = CvssVersion::V3_1;

    bool operator==(const CveRecord&) const = default;
};

inline nlohmann::json cve_to_json(const CveRecord& r) {
    return {{"cve_id", r.cve_id},
            {"base", r.base_score},
            {"exploitability", r.exploitability_score},
            {"impact", r.impact_score},
            {"cvss_version", cvss_version_string(r.cvss_version)}};
}

inline CveRecord cve_from_json(const nlohmann::json& j) {
    try {
        CveRecord r;
        r.cve_id = j.at("cve_id").get<std::string>();
        r.base_score = j.at("base").get<double>();
        r.exploitability_score = j.at("exploitability").get<double>();
        r.impact_score = j.at("impact").get<double>();
        auto v = parse_cvss_version(j.at("cvss_version"));
        if (!v) throw MalformedResponse("unsupported cvss_version for " + r.cve_id);
        r.cvss_version = *v;
        for (double s : {r.base_score, r.exploitability_score, r.impact_score}) {
            if (!(s >= 0.0 && s <= 10.0)) throw MalformedResponse("CVSS score outside [0,10] for " + r.cve_id);
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw MalformedResponse(std::string("bad CVE record: ") + e.what());
    }
}

/// Keeps, per CVE id, the record with the newest CVSS version; first-seen order.
inline std::vector<CveRecord> prefer_latest(const std::vector<CveRecord>& in) {
    std::vector<CveRecord> out;
    std::unordered_map<std::string, std::size_t> pos;
    for (const auto& r : in) {
        auto [it, fresh] = pos.emplace(r.cve_id, out.size());
        if (fresh) {
            out.push_back(r);
        } else if (static_cast<int>(r.cvss_version) > static_cast<int>(out[it->second].cvss_version)) {
            out[it->second] = r;
        }
    }
    return out;
}

struct NvdPage {
    std::vector<CveRecord> records;
    std::size_t vulnerabilities_in_page = 0;
    std::size_t total_results = 0;
    std::size_t start_index = 0;
};

/// Parses one page of the NVD CVE API 2.0 response. CVEs without any CVSS
/// metric are skipped; v3.1 beats v3.0 beats v2.0, Primary source preferred.
inline NvdPage parse_nvd_page(const nlohmann::json& j) {
    NvdPage page;
    try {
        if (!j.is_object() || !j.contains("vulnerabilities")) throw MalformedResponse("NVD response lacks 'vulnerabilities'");
        page.total_results = j.value("totalResults", std::size_t{0});
        page.start_index = j.value("startIndex", std::size_t{0});
        const auto& vulns = j.at("vulnerabilities");
        page.vulnerabilities_in_page = vulns.size();
        for (const auto& v : vulns) {
            const auto& cve = v.at("cve");
            const std::string id = cve.at("id").get<std::string>();
            if (!cve.contains("metrics")) continue;
            const auto& metrics = cve.at("metrics");
            static const std::pair<const char*, CvssVersion> order[] = {
                {"cvssMetricV31", CvssVersion::V3_1}, {"cvssMetricV30", CvssVersion::V3_0}, {"cvssMetricV2", CvssVersion::V2_0}};
            for (const auto& [key, version] : order) {
                if (!metrics.contains(key) || metrics.at(key).empty()) continue;
                const auto& list = metrics.at(key);
                const nlohmann::json* chosen = &list.at(0);
                for (const auto& m : list)
                    if (m.value("type", "") == "Primary") {
                        chosen = &m;
                        break;
                    }
                CveRecord r;
                r.cve_id = id;
                r.base_score = chosen->at("cvssData").at("baseScore").get<double>();
                r.exploitability_score = chosen->at("exploitabilityScore").get<double>();
                r.impact_score = chosen->at("impactScore").get<double>();
                r.cvss_version = version;
                page.records.push_back(r);
                break;
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw MalformedResponse(std::string("NVD response: ") + e.what());
    }
    return page;
}

/// Anything that can list the CVEs matching one CPE name.
class CveSource {
public:
    virtual ~CveSource() = default;
    virtual std::vector<CveRecord> fetch(const CpeName& cpe) = 0;
};

/// Offline fixture: JSON object mapping canonical CPE strings either to a list
/// of {cve_id, base, exploitability, impact, cvss_version} or to an NVD
/// response page. Unknown CPEs yield no CVEs.
class FixtureSource : public CveSource {
public:
    explicit FixtureSource(const nlohmann::json& fixture) {
        if (!fixture.is_object()) throw FormatError("fixture must be a JSON object keyed by CPE string");
        for (const auto& [cpe, value] : fixture.items()) {
            std::vector<CveRecord> recs;
            if (value.is_array()) {
                for (const auto& r : value) recs.push_back(cve_from_json(r));
            } else {
                recs = parse_nvd_page(value).records;
            }
            table_[cpe] = prefer_latest(recs);
        }
    }

    static FixtureSource load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw FileNotFound("fixture '" + path + "' not found");
        auto j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) throw FormatError("fixture '" + path + "' is not valid JSON");
        return FixtureSource(j);
    }

    std::vector<CveRecord> fetch(const CpeName& cpe) override {
        auto it = table_.find(cpe.to_string());
        return it == table_.end() ? std::vector<CveRecord>{} : it->second;
    }

private:
    std::map<std::string, std::vector<CveRecord>> table_;
};

/// Persistent CPE -> CVE list cache stored as line-delimited JSON
/// ({"cpe", "fetched_at", "cves"}); later lines for the same CPE win.
class CveCache {
public:
    CveCache() = default;

    explicit CveCache(std::string path) : path_(std::move(path)) {
        std::ifstream in(path_);
        if (!in) return; // cold cache
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.contains("cpe") || !j.contains("cves")) continue;
            std::vector<CveRecord> recs;
            try {
                for (const auto& r : j.at("cves")) recs.push_back(cve_from_json(r));
            } catch (const Error&) {
                continue;
            }
            entries_[j.at("cpe").get<std::string>()] = std::move(recs);
        }
    }

    std::optional<std::vector<CveRecord>> get(const std::string& cpe) const {
        std::shared_lock lock(mutex_);
        auto it = entries_.find(cpe);
        if (it == entries_.end()) return std::nullopt;
        return it->second;
    }

    void put(const std::string& cpe, const std::vector<CveRecord>& records) {
        std::unique_lock lock(mutex_);
        entries_[cpe] = records;
        if (path_.empty()) return;
        nlohmann::json j;
        j["cpe"] = cpe;
        j["fetched_at"] = std::chrono::duration_cast<std::chrono::seconds>(
                              std::chrono::system_clock::now().time_since_epoch())
                              .count();
        j["cves"] = nlohmann::json::array();
        for (const auto& r : records) j["cves"].push_back(cve_to_json(r));
        std::ofstream out(path_, std::ios::app);
        if (!out) throw IoError("cannot append to cache '" + path_ + "'");
        out << j.dump() << '\n';
    }

    std::size_t size() const {
        std::shared_lock lock(mutex_);
        return entries_.size();
    }

private:
    std::string path_;
    mutable std::shared_mutex mutex_;
    std::map<std::string, std::vector<CveRecord>> entries_;
};

/// Consults the cache first; misses go to `inner` and are written back.
class CachingSource : public CveSource {
public:
    CachingSource(CveSource& inner, CveCache& cache) : inner_(inner), cache_(cache) {}

    std::vector<CveRecord> fetch(const CpeName& cpe) override {
        const auto key = cpe.to_string();
        if (auto hit = cache_.get(key)) {
            ++hits_;
            return *hit;
        }
        ++misses_;
        auto recs = inner_.fetch(cpe);
        cache_.put(key, recs);
        return recs;
    }

    std::size_t hits() const { return hits_; }
    std::size_t misses() const { return misses_; }

private:
    CveSource& inner_;
    CveCache& cache_;
    std::size_t hits_ = 0;
    std::size_t misses_ = 0;
};

struct NvdClientConfig {
    std::string base_url = "https://services.nvd.nist.gov/rest/json/cves/2.0";
    std::optional<std::string> api_key;
    std::optional<std::size_t> max_requests_per_window; ///< default 5 without key, 50 with
    std::chrono::milliseconds rate_window{30'000};
    std::string cache_path;
    std::optional<std::string> offline_fixture;
    std::size_t results_per_page = 2000;
    int max_retries = 3;
    std::chrono::milliseconds retry_backoff{1'000};
    std::chrono::seconds timeout{30};

    std::size_t effective_rate_limit() const {
        if (max_requests_per_window) return *max_requests_per_window;
        return api_key ? 50 : 5;
    }
};

inline std::vector<CveRecord> fetch_cves(const CpeName& cpe, CveSource& source) { return source.fetch(cpe); }

// ---------------------------------------------------------------------------
// Scoring

struct UasVulnerability {
    std::size_t cpe_count = 0;
    std::optional<double> avg_base;
    std::optional<double> avg_exploitability;
    std::optional<double> avg_impact;
    std::vector<std::string> contributing_cves;

    bool scored() const { return avg_base.has_value(); }
    bool operator==(const UasVulnerability&) const = default;
};

/// Arithmetic mean of each CVSS score over the distinct CVEs matched by all CPE
/// candidates of the UAS. No match leaves the averages absent.
inline UasVulnerability score_uas(const ParsedUas& parsed, CveSource& source, const AliasTable& aliases,
                                  std::vector<std::string>* unmapped = nullptr) {
    const auto cpes = to_cpe_candidates(parsed, aliases, unmapped);
    UasVulnerability v;
    v.cpe_count = cpes.size();
    std::vector<CveRecord> all;
    for (const auto& cpe : cpes) {
        auto recs = source.fetch(cpe);
        all.insert(all.end(), recs.begin(), recs.end());
    }
    const auto distinct = prefer_latest(all);
    if (distinct.empty()) return v;
    double b = 0.0, e = 0.0, i = 0.0;
    for (const auto& r : distinct) {
        b += r.base_score;
        e += r.exploitability_score;
        i += r.impact_score;
        v.contributing_cves.push_back(r.cve_id);
    }
    const auto n = static_cast<double>(distinct.size());
    v.avg_base = b / n;
    v.avg_exploitability = e / n;
    v.avg_impact = i / n;
    return v;
}

// ---------------------------------------------------------------------------
// CIDR aggregation

struct CidrAggregate {
    std::string cidr;
    std::size_t uas_count = 0; ///< members with present scores
    double avg_base = 0.0;
    double avg_exploitability = 0.0;
    double avg_impact = 0.0;
    std::array<std::size_t, 10> base_score_histogram{}; ///< [0,1) ... [9,10]

    bool operator==(const CidrAggregate&) const = default;
};

inline std::size_t histogram_bucket(double score) {
    if (!(score >= 0.0)) return 0;
    return std::min<std::size_t>(9, static_cast<std::size_t>(std::floor(score)));
}

/// Groups by exact CIDR string (sorted); members without a CIDR or without
/// scores are left out of every mean and count.
inline std::vector<CidrAggregate> aggregate_cidr(const std::vector<std::pair<ParsedUas, UasVulnerability>>& scores) {
    struct Acc {
        std::size_t n = 0;
        double b = 0.0, e = 0.0, i = 0.0;
        std::array<std::size_t, 10> hist{};
    };
    std::map<std::string, Acc> groups;
    for (const auto& [parsed, vuln] : scores) {
        if (!parsed.source_cidr || !vuln.scored()) continue;
        auto& a = groups[*parsed.source_cidr];
        ++a.n;
        a.b += *vuln.avg_base;
        a.e += vuln.avg_exploitability.value_or(0.0);
        a.i += vuln.avg_impact.value_or(0.0);
        ++a.hist[histogram_bucket(*vuln.avg_base)];
    }
    if (groups.empty()) throw NoScorableEntries("aggregate_cidr: no entry has both a CIDR and scores");
    std::vector<CidrAggregate> out;
    for (const auto& [cidr, a] : groups) {
        const auto n = static_cast<double>(a.n);
        out.push_back({cidr, a.n, a.b / n, a.e / n, a.i / n, a.hist});
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSONL records for the parse -> score -> aggregate pipe

inline nlohmann::json parsed_to_json(const ParsedUas& p, const std::optional<std::string>& ua = std::nullopt) {
    nlohmann::json j = nlohmann::json::object();
    if (ua) j["ua"] = *ua;
    auto put = [&](const char* k, const std::optional<std::string>& v) {
        if (v) j[k] = *v;
    };
    put("os_name", p.os_name);
    put("os_version", p.os_version);
    put("software_name", p.software_name);
    put("software_version", p.software_version);
    put("source_cidr", p.source_cidr);
    return j;
}

inline ParsedUas parsed_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw FormatError("parsed record must be a JSON object");
    ParsedUas p;
    auto get = [&](const char* k, std::optional<std::string>& out) {
        auto it = j.find(k);
        if (it == j.end() || it->is_null()) return;
        if (!it->is_string()) throw FormatError(std::string("field '") + k + "' must be a string");
        out = it->get<std::string>();
    };
    get("os_name", p.os_name);
    get("os_version", p.os_version);
    get("software_name", p.software_name);
    get("software_version", p.software_version);
    get("source_cidr", p.source_cidr);
    return p;
}

inline void vulnerability_to_json(const UasVulnerability& v, nlohmann::json& j) {
    j["cpe_count"] = v.cpe_count;
    auto put = [&](const char* k, const std::optional<double>& x) {
        if (x) {
            j[k] = *x;
        } else {
            j[k] = nullptr;
        }
    };
    put("avg_base", v.avg_base);
    put("avg_exploitability", v.avg_exploitability);
    put("avg_impact", v.avg_impact);
    j["contributing_cves"] = v.contributing_cves;
}

inline UasVulnerability vulnerability_from_json(const nlohmann::json& j) {
    UasVulnerability v;
    try {
        v.cpe_count = j.value("cpe_count", std::size_t{0});
        auto get = [&](const char* k, std::optional<double>& out) {
            auto it = j.find(k);
            if (it != j.end() && !it->is_null()) out = it->get<double>();
        };
        get("avg_base", v.avg_base);
        get("avg_exploitability", v.avg_exploitability);
        get("avg_impact", v.avg_impact);
        if (j.contains("contributing_cves")) v.contributing_cves = j.at("contributing_cves").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("scored record: ") + e.what());
    }
    return v;
}

// ---------------------------------------------------------------------------
// Reports

inline const char* kReportCsvHeader =
    "cidr,uas_count,avg_base,avg_exploitability,avg_impact,hist_0,hist_1,hist_2,hist_3,hist_4,hist_5,hist_6,hist_7,"
    "hist_8,hist_9";

namespace detail {

inline std::string exact_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    cells.push_back(cur);
    return cells;
}

} // namespace detail

inline void write_report_csv(const std::vector<CidrAggregate>& aggs, std::ostream& out) {
    if (aggs.empty()) throw NoScorableEntries("report: no aggregates");
    out << kReportCsvHeader << '\n';
    for (const auto& a : aggs) {
        out << a.cidr << ',' << a.uas_count << ',' << detail::exact_double(a.avg_base) << ','
            << detail::exact_double(a.avg_exploitability) << ',' << detail::exact_double(a.avg_impact);
        for (auto h : a.base_score_histogram) out << ',' << h;
        out << '\n';
    }
}

inline std::vector<CidrAggregate> parse_report_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("report CSV is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kReportCsvHeader) throw FormatError("report CSV header mismatch");
    std::vector<CidrAggregate> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = detail::split_csv(line);
        if (cells.size() != 15) throw FormatError("report CSV row has " + std::to_string(cells.size()) + " cells");
        try {
            CidrAggregate a;
            a.cidr = cells[0];
            a.uas_count = std::stoull(cells[1]);
            a.avg_base = std::stod(cells[2]);
            a.avg_exploitability = std::stod(cells[3]);
            a.avg_impact = std::stod(cells[4]);
            for (std::size_t h = 0; h < 10; ++h) a.base_score_histogram[h] = std::stoull(cells[5 + h]);
            out.push_back(std::move(a));
        } catch (const std::logic_error&) {
            throw FormatError("report CSV row is not numeric: " + line);
        }
    }
    return out;
}

struct GeoPoint {
    double lat = 0.0;
    double lon = 0.0;
};

using GeoTable = std::map<std::string, GeoPoint>;

/// CSV "cidr,lat,lon" with an optional header line.
inline GeoTable load_geo_table(std::istream& in) {
    GeoTable t;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto cells = detail::split_csv(line);
        if (cells.size() != 3) throw FormatError("geo table line " + std::to_string(line_no) + ": expected cidr,lat,lon");
        if (line_no == 1 && cells[0] == "cidr") continue;
        try {
            t[cells[0]] = {std::stod(cells[1]), std::stod(cells[2])};
        } catch (const std::logic_error&) {
            throw FormatError("geo table line " + std::to_string(line_no) + ": non-numeric coordinate");
        }
    }
    return t;
}

inline GeoTable load_geo_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FileNotFound("geo table '" + path + "' not found");
    return load_geo_table(in);
}

struct GeoJsonResult {
    nlohmann::json collection;
    std::size_t written = 0;
    std::size_t skipped = 0; ///< CIDRs absent from the geo table
};

inline GeoJsonResult build_geojson(const std::vector<CidrAggregate>& aggs, const GeoTable* geo) {
    if (!geo) throw MissingGeoTable("GeoJSON output requires a geo table");
    if (aggs.empty()) throw NoScorableEntries("report: no aggregates");
    GeoJsonResult r;
    r.collection = {{"type", "FeatureCollection"}, {"features", nlohmann::json::array()}};
    for (const auto& a : aggs) {
        auto it = geo->find(a.cidr);
        if (it == geo->end()) {
            ++r.skipped;
            continue;
        }
        nlohmann::json props = {{"cidr", a.cidr},
                                {"uas_count", a.uas_count},
                                {"avg_base", a.avg_base},
                                {"avg_exploitability", a.avg_exploitability},
                                {"avg_impact", a.avg_impact}};
        for (std::size_t h = 0; h < 10; ++h) props["hist_" + std::to_string(h)] = a.base_score_histogram[h];
        r.collection["features"].push_back({{"type", "Feature"},
                                            {"geometry", {{"type", "Point"}, {"coordinates", {it->second.lon, it->second.lat}}}},
                                            {"properties", props}});
        ++r.written;
    }
    return r;
}

} // namespace uasparse
