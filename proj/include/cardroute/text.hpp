#pragma once

#include <string>
#include <string_view>

namespace cardroute {

std::string trim(std::string_view s);
std::string to_lower_ascii(std::string_view s);

// Trimmed, ASCII case-folded key used for every case-insensitive comparison.
std::string fold_key(std::string_view s);

bool iequals_trimmed(std::string_view a, std::string_view b);

// Canonical form of a decoded answer: trims, strips trailing .,;:! and
// collapses internal whitespace runs to a single space. Casing is kept.
std::string normalize_answer(std::string_view raw);

bool starts_with(std::string_view s, std::string_view prefix);

}  // namespace cardroute
