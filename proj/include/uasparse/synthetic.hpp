#pragma once

// Seeded generator of labelled user agent strings for self-contained
// training and acceptance runs. Templates follow real-world UAS layouts
// (Android WebView / in-app browsers, desktop Chromium, Trident, Gecko,
// WebKit on iOS) with randomised devices, builds and versions.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "uasparse/pipeline.hpp"
#include "uasparse/random.hpp"

namespace uasparse::synthetic {

enum class Os { Android, IOS, IPad, Linux, Macintosh, Windows, Other };
enum class Software { AndroidWebView, Chrome, FacebookApp, Instagram, InternetExplorer, Opera, Other };

inline constexpr std::array kOsClasses = {Os::Android, Os::IOS,     Os::IPad,  Os::Linux,
                                          Os::Macintosh, Os::Windows, Os::Other};
inline constexpr std::array kSoftwareClasses = {Software::AndroidWebView, Software::Chrome, Software::FacebookApp,
                                                Software::Instagram,      Software::InternetExplorer,
                                                Software::Opera,          Software::Other};

inline bool compatible(Os os, Software sw) {
    switch (sw) {
    case Software::Chrome: return true;
    case Software::AndroidWebView: return os == Os::Android;
    case Software::FacebookApp:
    case Software::Instagram: return os == Os::Android || os == Os::IOS || os == Os::IPad;
    case Software::InternetExplorer: return os == Os::Windows;
    case Software::Opera: return os == Os::Android || os == Os::Linux || os == Os::Macintosh || os == Os::Windows;
    case Software::Other: return true;
    }
    return false;
}

namespace detail {

inline std::string digits(Rng& rng, int n) {
    std::string s;
    for (int i = 0; i < n; ++i) s.push_back(static_cast<char>('0' + rng.below(10)));
    return s;
}

inline std::string num(Rng& rng, int lo, int hi) {
    return std::to_string(lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))));
}

inline std::string chrome_version(Rng& rng) {
    const std::string major = num(rng, 80, 118);
    if (rng.bernoulli(0.3)) return major + ".0.0.0";
    return major + ".0." + num(rng, 4000, 5999) + "." + num(rng, 0, 199);
}

inline std::string app_version(Rng& rng, int lo, int hi) {
    return num(rng, lo, hi) + "." + num(rng, 0, 9) + ".0." + num(rng, 10, 59) + "." + num(rng, 100, 199);
}

inline std::string gecko_version(Rng& rng) { return num(rng, 68, 118) + ".0"; }

inline std::string android_version(Rng& rng) {
    static const std::vector<std::string> v = {"8.1.0", "9", "10", "11", "12", "13", "14"};
    return rng.pick(v);
}

inline std::string android_device(Rng& rng) {
    static const std::vector<std::string> v = {"SM-G986B",  "SM-G988B",      "SM-A515F",       "SM-N960F",
                                               "M2101K9AG", "Pixel 6",       "Pixel 7 Pro",    "Redmi Note 9 Pro",
                                               "CPH2127",   "BRAVIA 4K VH2", "moto g power",   "K",
                                               "SM-T870",   "LM-Q720",       "ONEPLUS A6013", "V2111"};
    return rng.pick(v);
}

inline std::string build_id(Rng& rng) {
    static const std::vector<std::string> prefixes = {"SKQ1", "SP1A", "PPR1", "RKQ1", "TP1A", "QP1A", "UP1A"};
    return rng.pick(prefixes) + "." + digits(rng, 6) + "." + digits(rng, 3);
}

/// Underscore-separated Apple version, e.g. 15_4 or 16_1_1.
inline std::string apple_version(Rng& rng, int lo, int hi, bool three_parts) {
    std::string v = num(rng, lo, hi) + "_" + num(rng, 0, 7);
    if (three_parts) v += "_" + num(rng, 1, 9);
    return v;
}

inline std::string dotted(std::string v) {
    for (auto& c : v)
        if (c == '_') c = '.';
    return v;
}

inline std::string android_segment(Rng& rng, const std::string& version, bool webview, bool allow_extras = true) {
    std::string s = "Linux; ";
    if (allow_extras && rng.bernoulli(0.15)) s += "U; ";
    s += "Android " + version + "; ";
    if (allow_extras && rng.bernoulli(0.15)) s += "en-us; ";
    s += android_device(rng);
    if (webview || rng.bernoulli(0.4)) s += " Build/" + build_id(rng);
    if (webview) s += "; wv";
    return s;
}

inline std::string windows_nt(Rng& rng) {
    static const std::vector<std::string> v = {"10.0", "10.0", "6.1", "6.3", "6.2"};
    return rng.pick(v);
}

inline std::string windows_arch(Rng& rng) {
    static const std::vector<std::string> v = {"; Win64; x64", "; WOW64", ""};
    return rng.pick(v);
}

inline const char* kChromeTail = "AppleWebKit/537.36 (KHTML, like Gecko) Chrome/";
inline const char* kIosWebKit = "AppleWebKit/605.1.15 (KHTML, like Gecko)";

} // namespace detail

struct Sample {
    LabeledExample example;
    Os os = Os::Other;
    Software software = Software::Other;
};

/// One labelled UAS for an (OS class, software class) pair; the pair must be compatible().
inline Sample make_sample(Os os, Software sw, Rng& rng) {
    using namespace detail;
    Sample s;
    s.os = os;
    s.software = sw;
    auto& ex = s.example;
    std::string ua;

    // Platform-specific fields, shared by most software branches.
    std::string segment;
    switch (os) {
    case Os::Android: {
        const auto av = android_version(rng);
        ex.os_name = "Android";
        ex.os_version = av;
        const bool wv = sw == Software::AndroidWebView || sw == Software::FacebookApp || sw == Software::Instagram;
        segment = android_segment(rng, av, wv);
        break;
    }
    case Os::IOS: {
        const auto iv = apple_version(rng, 12, 17, sw == Software::Other || rng.bernoulli(0.3));
        ex.os_name = "iOS";
        ex.os_version = iv;
        segment = "iPhone; CPU iPhone OS " + iv + " like Mac OS X";
        break;
    }
    case Os::IPad: {
        const auto iv = apple_version(rng, 12, 17, sw == Software::Other || rng.bernoulli(0.3));
        ex.os_name = "iPad";
        ex.os_version = iv;
        segment = "iPad; CPU OS " + iv + " like Mac OS X";
        break;
    }
    case Os::Linux: {
        ex.os_name = "Linux";
        static const std::vector<std::string> v = {"X11; Linux x86_64", "X11; Ubuntu; Linux x86_64",
                                                   "X11; Linux i686", "X11; Fedora; Linux x86_64"};
        segment = rng.pick(v);
        break;
    }
    case Os::Macintosh: {
        const auto mv = apple_version(rng, 10, 13, rng.bernoulli(0.5));
        ex.os_name = "Macintosh";
        ex.os_version = mv;
        segment = "Macintosh; Intel Mac OS X " + mv;
        break;
    }
    case Os::Windows: {
        const auto nt = windows_nt(rng);
        ex.os_name = "Windows";
        ex.os_version = nt;
        segment = "Windows NT " + nt + windows_arch(rng);
        break;
    }
    case Os::Other: break;
    }

    const bool apple_mobile = os == Os::IOS || os == Os::IPad;
    switch (sw) {
    case Software::Chrome: {
        const auto cv = chrome_version(rng);
        ex.software_name = "Chrome";
        ex.software_version = cv;
        if (os == Os::Other) {
            const auto cros = num(rng, 13000, 15999) + "." + num(rng, 0, 199) + ".0";
            ex.os_name = "Chrome OS";
            ex.os_version = cros;
            ua = "Mozilla/5.0 (X11; CrOS x86_64 " + cros + ") " + kChromeTail + cv + " Safari/537.36";
        } else if (apple_mobile) {
            ua = "Mozilla/5.0 (" + segment + ") " + kIosWebKit + " CriOS/" + cv + " Mobile/15E148 Safari/604.1";
        } else {
            ua = "Mozilla/5.0 (" + segment + ") " + kChromeTail + cv + (os == Os::Android ? " Mobile" : "") +
                 " Safari/537.36";
        }
        break;
    }
    case Software::AndroidWebView: {
        const auto cv = chrome_version(rng);
        ex.software_name = "Android WebView";
        ex.software_version = cv;
        ua = "Mozilla/5.0 (" + segment + ") AppleWebKit/537.36 (KHTML, like Gecko) Version/4.0 Chrome/" + cv +
             " Mobile Safari/537.36";
        break;
    }
    case Software::FacebookApp: {
        const auto fv = app_version(rng, 300, 440);
        ex.software_name = "Facebook App";
        ex.software_version = fv;
        if (os == Os::Android) {
            const auto cv = chrome_version(rng);
            ua = "Mozilla/5.0 (" + segment + ") AppleWebKit/537.36 (KHTML, like Gecko) Version/4.0 Chrome/" + cv +
                 " Mobile Safari/537.36 %5bFB_IAB/" + (rng.bernoulli(0.5) ? "FB4A" : "Orca-Android") + ";FBAV/" + fv +
                 ";%5d";
        } else {
            const std::string dev = os == Os::IOS ? "iPhone" + num(rng, 10, 15) + "," + num(rng, 1, 5) : "iPad" + num(rng, 7, 13) + "," + num(rng, 1, 9);
            ua = "Mozilla/5.0 (" + segment + ") " + kIosWebKit + " Mobile/15E148 %5bFBAN/FBIOS;FBDV/" + dev +
                 ";FBMD/" + (os == Os::IOS ? "iPhone" : "iPad") + ";FBSN/iOS;FBSV/" + dotted(*ex.os_version) +
                 ";FBSS/3;FBID/phone;FBLC/en_US;FBOP/5;FBAV/" + fv + "%5d";
        }
        break;
    }
    case Software::Instagram: {
        const auto iv = app_version(rng, 200, 300);
        ex.software_name = "Instagram";
        ex.software_version = iv;
        if (os == Os::Android) {
            const auto cv = chrome_version(rng);
            ua = "Mozilla/5.0 (" + segment + ") AppleWebKit/537.36 (KHTML, like Gecko) Version/4.0 Chrome/" + cv +
                 " Mobile Safari/537.36 Instagram " + iv + " Android (" + num(rng, 26, 33) + "/" + *ex.os_version +
                 "; " + num(rng, 3, 6) + "20dpi; 1080x" + num(rng, 2200, 2400) + "; samsung; SM-G986B; y2s; exynos990; en_US; " +
                 digits(rng, 9) + ")";
        } else {
            ua = "Mozilla/5.0 (" + segment + ") " + kIosWebKit + " Mobile/15E148 Instagram " + iv + " (" +
                 (os == Os::IOS ? "iPhone13,2" : "iPad8,1") + "; iOS " + *ex.os_version + "; en_US; en-US; scale=3.00; 1170x2532; " +
                 digits(rng, 9) + ")";
        }
        break;
    }
    case Software::InternetExplorer: {
        ex.software_name = "Internet Explorer";
        const double r = rng.uniform();
        if (r < 0.55) {
            ex.software_version = "11.0";
            ua = "Mozilla/5.0 (" + segment + "; Trident/7.0; " + (rng.bernoulli(0.3) ? "NMTE; " : "") +
                 "rv:11.0) like Gecko";
        } else if (r < 0.8) {
            static const std::vector<std::string> nts = {"6.1", "6.2"};
            const auto nt = rng.pick(nts);
            const std::string msie = nt == "6.1" ? "9.0" : "10.0";
            ex.os_version = nt;
            ex.software_version = msie;
            ua = "Mozilla/5.0 (compatible; MSIE " + msie + "; Windows NT " + nt + "; Trident/" +
                 (msie == "9.0" ? "5.0" : "6.0") + ")";
        } else {
            ex.os_version = "8.1";
            ex.software_version = "11.0";
            static const std::vector<std::string> phones = {"NOKIA; Lumia 930", "NOKIA; Lumia 635", "Microsoft; Lumia 640 LTE"};
            ua = "Mozilla/5.0 (Windows Phone 8.1; ARM; Trident/7.0; Touch; rv:11.0; IEMobile/11.0; " + rng.pick(phones) +
                 ") like Gecko";
        }
        break;
    }
    case Software::Opera: {
        const auto cv = chrome_version(rng);
        const auto ov = num(rng, 60, 102) + ".0." + num(rng, 3000, 4999) + "." + num(rng, 10, 99);
        ex.software_name = "Opera";
        ex.software_version = ov;
        ua = "Mozilla/5.0 (" + segment + ") " + kChromeTail + cv + (os == Os::Android ? " Mobile" : "") +
             " Safari/537.36 OPR/" + ov;
        break;
    }
    case Software::Other: {
        switch (os) {
        case Os::Android:
            if (rng.bernoulli(0.5)) {
                const auto fv = gecko_version(rng);
                ex.software_name = "Firefox";
                ex.software_version = fv;
                ua = "Mozilla/5.0 (Android " + *ex.os_version + "; Mobile; rv:" + fv + ") Gecko/" + fv + " Firefox/" + fv;
            } else {
                const auto sv = num(rng, 10, 23) + ".0";
                ex.software_name = "Samsung Internet";
                ex.software_version = sv;
                ua = "Mozilla/5.0 (" + segment + ") AppleWebKit/537.36 (KHTML, like Gecko) SamsungBrowser/" + sv +
                     " Chrome/" + chrome_version(rng) + " Mobile Safari/537.36";
            }
            break;
        case Os::IOS:
        case Os::IPad: {
            const auto parts = dotted(*ex.os_version);
            const auto safari = parts.substr(0, parts.rfind('.'));
            ex.software_name = "Safari";
            ex.software_version = safari;
            ua = "Mozilla/5.0 (" + segment + ") " + kIosWebKit + " Version/" + safari + " Mobile/15E148 Safari/604.1";
            break;
        }
        case Os::Linux:
        case Os::Windows: {
            if (os == Os::Windows && rng.bernoulli(0.5)) {
                const auto ev = num(rng, 90, 118) + ".0." + num(rng, 1000, 2100) + "." + num(rng, 10, 99);
                ex.software_name = "Edge";
                ex.software_version = ev;
                ua = "Mozilla/5.0 (" + segment + ") " + kChromeTail + chrome_version(rng) + " Safari/537.36 Edg/" + ev;
            } else {
                const auto fv = gecko_version(rng);
                ex.software_name = "Firefox";
                ex.software_version = fv;
                ua = "Mozilla/5.0 (" + segment + "; rv:" + fv + ") Gecko/20100101 Firefox/" + fv;
            }
            break;
        }
        case Os::Macintosh: {
            if (rng.bernoulli(0.5)) {
                const auto sv = num(rng, 13, 17) + "." + num(rng, 0, 6);
                ex.software_name = "Safari";
                ex.software_version = sv;
                ua = "Mozilla/5.0 (" + segment + ") " + kIosWebKit + " Version/" + sv + " Safari/605.1.15";
            } else {
                const auto fv = gecko_version(rng);
                ex.software_name = "Firefox";
                ex.software_version = fv;
                ua = "Mozilla/5.0 (Macintosh; Intel Mac OS X " + dotted(*ex.os_version) + "; rv:" + fv +
                     ") Gecko/20100101 Firefox/" + fv;
            }
            break;
        }
        case Os::Other: {
            const auto pick = rng.below(4);
            if (pick == 0) {
                const auto pv = num(rng, 5, 11) + "." + digits(rng, 2);
                ex.os_name = "PlayStation";
                ex.os_version = pv;
                ex.software_name = "PlayStation Browser";
                ua = "Mozilla/5.0 (PlayStation " + num(rng, 4, 5) + " " + pv + ") " + kIosWebKit;
            } else if (pick == 1) {
                const auto fv = gecko_version(rng);
                ex.os_name = "FreeBSD";
                ex.software_name = "Firefox";
                ex.software_version = fv;
                ua = "Mozilla/5.0 (X11; FreeBSD amd64; rv:" + fv + ") Gecko/20100101 Firefox/" + fv;
            } else if (pick == 2) {
                const auto tv = num(rng, 4, 7) + ".0";
                const auto sv = num(rng, 2, 6) + ".0";
                ex.os_name = "Tizen";
                ex.os_version = tv;
                ex.software_name = "Samsung Internet";
                ex.software_version = sv;
                ua = "Mozilla/5.0 (SMART-TV; Linux; Tizen " + tv + ") AppleWebKit/537.36 (KHTML, like Gecko) SamsungBrowser/" +
                     sv + " Chrome/" + chrome_version(rng) + " TV Safari/537.36";
            } else {
                const auto kv = "2." + num(rng, 0, 5);
                ex.os_name = "KaiOS";
                ex.os_version = kv;
                ex.software_name = "Firefox";
                ex.software_version = "48.0";
                ua = "Mozilla/5.0 (Mobile; LYF/F300B/LYF-F300B-001-01-15-130718-i; Android 4.4; rv:48.0) Gecko/48.0 "
                     "Firefox/48.0 KAIOS/" + kv;
            }
            break;
        }
        }
        break;
    }
    }
    ex.raw.text = std::move(ua);
    return s;
}

inline const std::vector<std::string>& default_cidrs() {
    static const std::vector<std::string> v = {"1.123.0.0/24", "101.127.0.0/24", "203.0.113.0/24"};
    return v;
}

/// `n` records alternating between a uniformly drawn software class and a
/// uniformly drawn OS class, the other field chosen among compatible classes.
/// Every class of both name tasks receives at least n/14 records.
inline std::vector<LabeledExample> generate_corpus(std::size_t n, std::uint64_t seed, bool with_cidr = false) {
    Rng rng(seed);
    std::vector<LabeledExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Os os;
        Software sw;
        if (i % 2 == 0) {
            sw = kSoftwareClasses[rng.below(kSoftwareClasses.size())];
            std::vector<Os> ok;
            for (auto o : kOsClasses)
                if (compatible(o, sw)) ok.push_back(o);
            os = rng.pick(ok);
        } else {
            os = kOsClasses[rng.below(kOsClasses.size())];
            std::vector<Software> ok;
            for (auto s : kSoftwareClasses)
                if (compatible(os, s)) ok.push_back(s);
            sw = rng.pick(ok);
        }
        auto sample = make_sample(os, sw, rng);
        if (with_cidr) sample.example.source_cidr = rng.pick(default_cidrs());
        out.push_back(std::move(sample.example));
    }
    return out;
}

} // namespace uasparse::synthetic
