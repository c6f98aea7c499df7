#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "raidx/label.hpp"

namespace raidx {

struct StructuredOutput {
  std::string think_text;
  Label answer = Label::kReal;

  friend bool operator==(const StructuredOutput&, const StructuredOutput&) = default;
};

enum class FormatFailure {
  kMissingThink,
  kMissingAnswer,
  kBadVerdict,
  kTrailingContent,
  kDuplicatedBlock,
};

inline constexpr std::string_view to_string(FormatFailure f) {
  switch (f) {
    case FormatFailure::kMissingThink: return "missing-think";
    case FormatFailure::kMissingAnswer: return "missing-answer";
    case FormatFailure::kBadVerdict: return "bad-verdict";
    case FormatFailure::kTrailingContent: return "trailing-content";
    case FormatFailure::kDuplicatedBlock: return "duplicated-block";
  }
  return "unknown";
}

struct FormatVerdict {
  std::optional<StructuredOutput> parsed;
  std::optional<FormatFailure> failure;

  bool well_formed() const { return parsed.has_value(); }

  static FormatVerdict ok(StructuredOutput s) { return {std::move(s), std::nullopt}; }
  static FormatVerdict fail(FormatFailure f) { return {std::nullopt, f}; }
};

namespace detail {

inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline std::size_t skip_space(std::string_view s, std::size_t pos) {
  while (pos < s.size() && is_space(s[pos])) ++pos;
  return pos;
}

inline bool at(std::string_view s, std::size_t pos, std::string_view tag) {
  return s.substr(pos, tag.size()) == tag;
}

}  // namespace detail

/// Strict parser for `<think>…</think><answer>REAL|FAKE</answer>`.
///
/// Whitespace is allowed before, between and after the two blocks and around
/// the verdict. Tags and verdicts are case-sensitive. Never throws.
inline FormatVerdict parse_output(std::string_view raw) {
  using detail::at;
  using detail::skip_space;
  constexpr std::string_view kThinkOpen = "<think>";
  constexpr std::string_view kThinkClose = "</think>";
  constexpr std::string_view kAnswerOpen = "<answer>";
  constexpr std::string_view kAnswerClose = "</answer>";

  std::size_t pos = skip_space(raw, 0);
  if (!at(raw, pos, kThinkOpen)) return FormatVerdict::fail(FormatFailure::kMissingThink);
  pos += kThinkOpen.size();
  const std::size_t think_end = raw.find(kThinkClose, pos);
  if (think_end == std::string_view::npos)
    return FormatVerdict::fail(FormatFailure::kMissingThink);
  std::string think(raw.substr(pos, think_end - pos));
  pos = skip_space(raw, think_end + kThinkClose.size());

  if (at(raw, pos, kThinkOpen)) return FormatVerdict::fail(FormatFailure::kDuplicatedBlock);
  if (!at(raw, pos, kAnswerOpen)) return FormatVerdict::fail(FormatFailure::kMissingAnswer);
  pos += kAnswerOpen.size();
  const std::size_t answer_end = raw.find(kAnswerClose, pos);
  if (answer_end == std::string_view::npos)
    return FormatVerdict::fail(FormatFailure::kMissingAnswer);

  std::string_view verdict = raw.substr(pos, answer_end - pos);
  while (!verdict.empty() && detail::is_space(verdict.front())) verdict.remove_prefix(1);
  while (!verdict.empty() && detail::is_space(verdict.back())) verdict.remove_suffix(1);
  const auto label = parse_label(verdict);
  if (!label) return FormatVerdict::fail(FormatFailure::kBadVerdict);

  pos = skip_space(raw, answer_end + kAnswerClose.size());
  if (pos != raw.size()) {
    if (at(raw, pos, kAnswerOpen) || at(raw, pos, kThinkOpen))
      return FormatVerdict::fail(FormatFailure::kDuplicatedBlock);
    return FormatVerdict::fail(FormatFailure::kTrailingContent);
  }
  return FormatVerdict::ok({std::move(think), *label});
}

inline std::string render_output(const StructuredOutput& s) {
  return "<think>" + s.think_text + "</think><answer>" + std::string(to_string(s.answer)) +
         "</answer>";
}

inline int format_reward(std::string_view raw) { return parse_output(raw).well_formed() ? 1 : 0; }

/// Malformed outputs earn no accuracy reward.
inline int accuracy_reward(const FormatVerdict& v, Label gold) {
  return v.well_formed() && v.parsed->answer == gold ? 1 : 0;
}

}  // namespace raidx
