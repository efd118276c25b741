#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace bidiseq::utf8 {

// Splits a UTF-8 string into one std::string per Unicode scalar value.
// Malformed sequences throw bidiseq::Error.
std::vector<std::string> split_chars(std::string_view text);

// Number of scalar values in a UTF-8 string.
std::size_t length(std::string_view text);

std::string reverse(std::string_view text);

}  // namespace bidiseq::utf8
