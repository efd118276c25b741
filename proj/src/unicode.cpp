#include "bidiseq/unicode.hpp"

#include "bidiseq/error.hpp"

namespace bidiseq::utf8 {
namespace {

std::size_t sequence_length(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead & 0xE0) == 0xC0) return 2;
    if ((lead & 0xF0) == 0xE0) return 3;
    if ((lead & 0xF8) == 0xF0) return 4;
    return 0;
}

}  // namespace

std::vector<std::string> split_chars(std::string_view text) {
    std::vector<std::string> out;
    out.reserve(text.size());
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t len = sequence_length(static_cast<unsigned char>(text[pos]));
        if (len == 0 || pos + len > text.size()) {
            throw Error("invalid UTF-8 at byte " + std::to_string(pos));
        }
        for (std::size_t k = 1; k < len; ++k) {
            if ((static_cast<unsigned char>(text[pos + k]) & 0xC0) != 0x80) {
                throw Error("invalid UTF-8 continuation at byte " + std::to_string(pos + k));
            }
        }
        out.emplace_back(text.substr(pos, len));
        pos += len;
    }
    return out;
}

std::size_t length(std::string_view text) { return split_chars(text).size(); }

std::string reverse(std::string_view text) {
    auto chars = split_chars(text);
    std::string out;
    out.reserve(text.size());
    for (auto it = chars.rbegin(); it != chars.rend(); ++it) out += *it;
    return out;
}

}  // namespace bidiseq::utf8
