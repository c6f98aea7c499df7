#pragma once

#include <cstdint>
#include <optional>
#include <string_view>

namespace raidx {

enum class Label : std::uint8_t { kReal = 0, kFake = 1 };

inline constexpr std::string_view to_string(Label l) {
  return l == Label::kReal ? "REAL" : "FAKE";
}

inline constexpr std::optional<Label> parse_label(std::string_view s) {
  if (s == "REAL") return Label::kReal;
  if (s == "FAKE") return Label::kFake;
  return std::nullopt;
}

}  // namespace raidx
