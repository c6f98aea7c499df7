#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "raidx/grpo.hpp"
#include "raidx/harness/dataset.hpp"

namespace raidx {

/// One JSON object per line, keys in a fixed order.
inline std::string runlog_line(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["mean_reward"] = m.mean_reward;
  j["mean_abs_adv"] = m.mean_abs_adv;
  j["clip_fraction"] = m.clip_fraction;
  j["mean_kl"] = m.mean_kl;
  j["loss"] = m.loss;
  j["grad_norm"] = m.grad_norm;
  j["update_norm"] = m.update_norm;
  j["format_rate"] = m.format_rate;
  j["accuracy_rate"] = m.accuracy_rate;
  j["aborted"] = m.aborted;
  return j.dump();
}

class RunLog {
 public:
  explicit RunLog(const std::filesystem::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw DataError("cannot write run log " + path.string());
  }

  void write(const StepMetrics& m) { out_ << runlog_line(m) << '\n'; }
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

}  // namespace raidx
