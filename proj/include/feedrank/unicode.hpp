#pragma once

// UTF-8 helpers backed by ICU: validation, NFC normalization and the
// whitespace collapsing applied to every ingested text.

#include <cstdint>
#include <string>
#include <string_view>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include "feedrank/error.hpp"

namespace feedrank::unicode {

inline bool is_valid_utf8(std::string_view s) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(s.data());
    const auto len = static_cast<std::int32_t>(s.size());
    std::int32_t i = 0;
    while (i < len) {
        UChar32 c;
        U8_NEXT(p, i, len, c);
        if (c < 0) return false;
    }
    return true;
}

/// NFC-normalizes valid UTF-8. Throws ParseError on ill-formed input.
inline std::string nfc(std::string_view s) {
    if (!is_valid_utf8(s)) throw ParseError("text is not valid UTF-8");
    UErrorCode status = U_ZERO_ERROR;
    const icu::Normalizer2* norm = icu::Normalizer2::getNFCInstance(status);
    if (U_FAILURE(status)) throw Error("ICU NFC normalizer unavailable");
    const auto src = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<std::int32_t>(s.size())));
    if (norm->isNormalized(src, status) && U_SUCCESS(status)) return std::string(s);
    status = U_ZERO_ERROR;
    const icu::UnicodeString out = norm->normalize(src, status);
    if (U_FAILURE(status)) throw Error("ICU NFC normalization failed");
    std::string result;
    out.toUTF8String(result);
    return result;
}

/// Trims and collapses every run of Unicode whitespace to one ASCII space.
inline std::string collapse_whitespace(std::string_view s) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(s.data());
    const auto len = static_cast<std::int32_t>(s.size());
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    std::int32_t i = 0;
    while (i < len) {
        const std::int32_t start = i;
        UChar32 c;
        U8_NEXT(p, i, len, c);
        if (c >= 0 && u_isUWhiteSpace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.append(s.substr(static_cast<std::size_t>(start), static_cast<std::size_t>(i - start)));
    }
    return out;
}

/// NFC followed by whitespace collapsing; the canonical form of stored text.
inline std::string normalize_text(std::string_view s) { return collapse_whitespace(nfc(s)); }

}  // namespace feedrank::unicode
