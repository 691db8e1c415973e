#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "uasparse/errors.hpp"

namespace uasparse {

/// A user agent string exactly as received.
struct RawUas {
    std::string text;
};

struct Substitution {
    std::string pattern;
    std::string replacement;
};

/// The character edits applied before tokenization, in application order.
/// ")" is padded on both sides so a closing parenthesis always stands alone.
inline std::vector<Substitution> default_substitutions() {
    return {
        {"%20", " "}, {"_", "."}, {"(", "( "}, {")", " ) "},
        {"/", " "},   {";", ""},  {":", " : "}, {"%", " "},
    };
}

struct PreprocessConfig {
    std::size_t max_tokens = 50;
    std::vector<Substitution> substitutions = default_substitutions();

    void validate() const {
        if (max_tokens < 1) throw Error("PreprocessConfig: max_tokens must be >= 1");
        for (const auto& s : substitutions) {
            if (s.pattern.empty()) throw Error("PreprocessConfig: empty substitution pattern");
        }
    }
};

struct TokenizedUas {
    std::vector<std::string> tokens;
    std::size_t original_token_count = 0;
    bool truncated = false;

    bool operator==(const TokenizedUas&) const = default;
};

namespace detail {

inline bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

inline std::string replace_all(std::string_view text, std::string_view pattern,
                               std::string_view replacement) {
    std::string out;
    out.reserve(text.size());
    std::size_t pos = 0;
    while (true) {
        const std::size_t hit = text.find(pattern, pos);
        if (hit == std::string_view::npos) break;
        out.append(text.substr(pos, hit - pos));
        out.append(replacement);
        pos = hit + pattern.size();
    }
    out.append(text.substr(pos));
    return out;
}

inline std::string collapse_whitespace(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char c : text) {
        if (is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(c);
    }
    return out;
}

} // namespace detail

/// Applies every substitution globally in configured order, then collapses
/// whitespace runs to one space and trims both ends.
inline std::string apply_substitutions(std::string_view text, const PreprocessConfig& config = {}) {
    std::string current(text);
    for (const auto& rule : config.substitutions) {
        current = detail::replace_all(current, rule.pattern, rule.replacement);
    }
    return detail::collapse_whitespace(current);
}

inline std::string apply_substitutions(const RawUas& raw, const PreprocessConfig& config = {}) {
    return apply_substitutions(std::string_view(raw.text), config);
}

inline TokenizedUas tokenize(std::string_view text, const PreprocessConfig& config = {}) {
    config.validate();
    const std::string normalized = apply_substitutions(text, config);
    TokenizedUas out;
    std::size_t start = 0;
    while (start < normalized.size()) {
        std::size_t end = normalized.find(' ', start);
        if (end == std::string::npos) end = normalized.size();
        ++out.original_token_count;
        if (out.tokens.size() < config.max_tokens) {
            out.tokens.emplace_back(normalized.substr(start, end - start));
        }
        start = end + 1;
    }
    out.truncated = out.original_token_count > config.max_tokens;
    return out;
}

inline TokenizedUas tokenize(const RawUas& raw, const PreprocessConfig& config = {}) {
    return tokenize(std::string_view(raw.text), config);
}

} // namespace uasparse
