#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "raidx/grpo.hpp"
#include "raidx/harness/dataset.hpp"
#include "raidx/policy/policy.hpp"

namespace raidx {

enum class Arm { kNoRag, kStatic, kFullRag };

inline std::string_view to_string(Arm a) {
  switch (a) {
    case Arm::kNoRag: return "no-rag";
    case Arm::kStatic: return "static";
    case Arm::kFullRag: return "full-rag";
  }
  return "?";
}

inline Arm parse_arm(std::string_view s) {
  if (s == "no-rag") return Arm::kNoRag;
  if (s == "static") return Arm::kStatic;
  if (s == "full-rag") return Arm::kFullRag;
  throw ConfigError("unknown arm '" + std::string(s) + "' (expected no-rag, static, full-rag)");
}

inline constexpr std::string_view kDefaultInstruction =
    "Is this image REAL or FAKE? Inspect the edges, lighting and texture, then answer.";

/// Everything a run depends on. The arm only selects the prompt builder.
struct RunConfig {
  SyntheticSpec data;
  PolicyConfig policy;
  GrpoConfig grpo = [] {
    GrpoConfig g;
    g.learning_rate = 0.05;
    return g;
  }();
  std::size_t k = 10;
  Arm arm = Arm::kFullRag;
  std::size_t steps = 2000;
  std::size_t eval_every = 500;  // 0: only at the end
  std::uint64_t seed = 1;
  std::string instruction{kDefaultInstruction};

  /// Propagates the run seed and image size into the sub-configs.
  RunConfig& finalize() {
    policy.seed = seed;
    grpo.seed = seed;
    policy.image_height = data.height;
    policy.image_width = data.width;
    return *this;
  }

  void validate() const {
    try {
      data.validate();
      policy.validate();
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    grpo.validate();
    if (k == 0) throw ConfigError("k must be >= 1");
    if (k > data.n_train) throw ConfigError("k exceeds the training set size");
    if (k > static_cast<std::size_t>(PromptTokenizer::kMaxNumber))
      throw ConfigError("k exceeds the largest prompt number token");
    if (instruction.empty()) throw ConfigError("instruction must not be empty");
  }
};

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    // from_chars for double is missing from older libstdc++; stod is fine here.
    std::size_t used = 0;
    try {
      out = static_cast<T>(std::stod(v, &used));
    } catch (const std::exception&) {
      throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
    if (used != v.size()) throw ConfigError(key + ": trailing characters in '" + v + "'");
    return out;
  } else {
    const char* end = v.data() + v.size();
    const auto r = std::from_chars(v.data(), end, out);
    if (r.ec != std::errc() || r.ptr != end)
      throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& v)>;

template <class T>
Setter num(T RunConfig::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) {
    c.*field = parse_number<T>(k, v);
  };
}
template <class S, class T>
Setter num(S RunConfig::*sub, T S::*field) {
  return [sub, field](RunConfig& c, const std::string& k, const std::string& v) {
    (c.*sub).*field = parse_number<T>(k, v);
  };
}

inline const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"seed", num(&RunConfig::seed)},
      {"k", num(&RunConfig::k)},
      {"steps", num(&RunConfig::steps)},
      {"eval_every", num(&RunConfig::eval_every)},
      {"arm", [](RunConfig& c, const std::string&, const std::string& v) { c.arm = parse_arm(v); }},
      {"instruction",
       [](RunConfig& c, const std::string&, const std::string& v) { c.instruction = v; }},

      {"data.height", num(&RunConfig::data, &SyntheticSpec::height)},
      {"data.width", num(&RunConfig::data, &SyntheticSpec::width)},
      {"data.n_train", num(&RunConfig::data, &SyntheticSpec::n_train)},
      {"data.n_test", num(&RunConfig::data, &SyntheticSpec::n_test)},
      {"data.fake_fraction", num(&RunConfig::data, &SyntheticSpec::fake_fraction)},
      {"data.artifact",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         try {
           c.data.artifact = parse_artifact_kind(v);
         } catch (const DataError& e) {
           throw ConfigError(k + ": " + e.what());
         }
       }},
      {"data.box_min", num(&RunConfig::data, &SyntheticSpec::box_min)},
      {"data.box_max", num(&RunConfig::data, &SyntheticSpec::box_max)},
      {"data.amp_min", num(&RunConfig::data, &SyntheticSpec::artifact_amp_min)},
      {"data.amp_max", num(&RunConfig::data, &SyntheticSpec::artifact_amp_max)},
      {"data.base_noise", num(&RunConfig::data, &SyntheticSpec::base_noise)},
      {"data.textured_real_fraction",
       num(&RunConfig::data, &SyntheticSpec::textured_real_fraction)},
      {"data.recirculated_fraction",
       num(&RunConfig::data, &SyntheticSpec::recirculated_fraction)},
      {"data.recirculated_sources", num(&RunConfig::data, &SyntheticSpec::recirculated_sources)},
      {"data.faint_amp", num(&RunConfig::data, &SyntheticSpec::faint_amp)},

      {"policy.patch", num(&RunConfig::policy, &PolicyConfig::patch)},
      {"policy.embed_dim", num(&RunConfig::policy, &PolicyConfig::embed_dim)},
      {"policy.layers", num(&RunConfig::policy, &PolicyConfig::layers)},
      {"policy.heads", num(&RunConfig::policy, &PolicyConfig::heads)},
      {"policy.hidden", num(&RunConfig::policy, &PolicyConfig::hidden)},
      {"policy.prompt_dim", num(&RunConfig::policy, &PolicyConfig::prompt_dim)},
      {"policy.lora_rank", num(&RunConfig::policy, &PolicyConfig::lora_rank)},
      {"policy.lora_alpha", num(&RunConfig::policy, &PolicyConfig::lora_alpha)},
      {"policy.max_len", num(&RunConfig::policy, &PolicyConfig::max_len)},
      {"policy.pretrain_format",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.policy.pretrain_format = parse_bool(k, v);
       }},
      {"policy.highpass_prior",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.policy.highpass_prior = parse_bool(k, v);
       }},
      {"policy.pretrain_iters", num(&RunConfig::policy, &PolicyConfig::pretrain_iters)},
      {"policy.pretrain_lr", num(&RunConfig::policy, &PolicyConfig::pretrain_lr)},
      {"policy.format_noise", num(&RunConfig::policy, &PolicyConfig::format_noise)},

      {"grpo.group", num(&RunConfig::grpo, &GrpoConfig::group)},
      {"grpo.epsilon", num(&RunConfig::grpo, &GrpoConfig::epsilon)},
      {"grpo.beta", num(&RunConfig::grpo, &GrpoConfig::beta)},
      {"grpo.learning_rate", num(&RunConfig::grpo, &GrpoConfig::learning_rate)},
      {"grpo.sigma_floor", num(&RunConfig::grpo, &GrpoConfig::sigma_floor)},
      {"grpo.max_grad_norm", num(&RunConfig::grpo, &GrpoConfig::max_grad_norm)},
      {"grpo.steps_per_old_refresh", num(&RunConfig::grpo, &GrpoConfig::steps_per_old_refresh)},
      {"grpo.temperature", num(&RunConfig::grpo, &GrpoConfig::temperature)},
      {"grpo.batch_size", num(&RunConfig::grpo, &GrpoConfig::batch_size)},
  };
  return table;
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, std::string_view key, const std::string& value) {
  const auto& t = detail::setters();
  auto it = t.find(key);
  if (it == t.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second(cfg, std::string(key), value);
}

/// key = value lines; '#' starts a comment; blank lines are ignored. Later
/// keys override earlier ones. The result is finalized and validated.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    set_config_value(base, key, value);
  }
  base.finalize().validate();
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace raidx
