#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "raidx/format.hpp"
#include "raidx/label.hpp"

namespace raidx {

/// Binary confusion counts with FAKE as the positive class. A malformed
/// prediction counts as wrong: FN for a FAKE item, FP for a REAL one.
struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::size_t total() const { return tp + fp + fn + tn; }

  void add(Label gold, std::optional<Label> predicted) {
    const bool gold_fake = gold == Label::kFake;
    const bool right = predicted && *predicted == gold;
    if (gold_fake)
      ++(right ? tp : fn);
    else
      ++(right ? tn : fp);
  }
};

/// F1 = 2PR/(P+R); 0 when both precision and recall are 0.
inline double f1_score(std::size_t tp, std::size_t fp, std::size_t fn) {
  const double p = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  const double r = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

struct ClassScores {
  double accuracy = 0.0;  // share of this class's items classified correctly
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline ClassScores fake_scores(const Confusion& c) {
  ClassScores s;
  s.precision = c.tp + c.fp ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
  s.recall = c.tp + c.fn ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  s.accuracy = s.recall;
  s.f1 = f1_score(c.tp, c.fp, c.fn);
  return s;
}

/// REAL as the positive class: the roles of the counts swap.
inline ClassScores real_scores(const Confusion& c) {
  return fake_scores(Confusion{c.tn, c.fn, c.fp, c.tp});
}

struct EvalReport {
  std::string arm;
  std::size_t step = 0;
  std::size_t n = 0;
  double accuracy = 0.0;
  ClassScores real;
  ClassScores fake;
  Confusion confusion;
  std::size_t malformed = 0;
  double format_rate = 0.0;
  double saliency_mass = 0.0;       // mean top-decile mass inside the box, FAKE items
  double localized_fraction = 0.0;  // FAKE items with that mass >= 0.5
};

/// Accumulates per-item outcomes into an EvalReport.
class EvalAccumulator {
 public:
  void add(Label gold, const FormatVerdict& verdict, std::optional<double> box_mass) {
    std::optional<Label> pred;
    if (verdict.well_formed()) pred = verdict.parsed->answer;
    confusion_.add(gold, pred);
    if (!verdict.well_formed()) ++malformed_;
    if (box_mass) {
      mass_sum_ += *box_mass;
      if (*box_mass >= 0.5) ++localized_;
      ++fakes_with_map_;
    }
  }

  EvalReport finish(std::string arm, std::size_t step) const {
    EvalReport r;
    r.arm = std::move(arm);
    r.step = step;
    r.n = confusion_.total();
    r.confusion = confusion_;
    r.malformed = malformed_;
    if (r.n) {
      r.accuracy = static_cast<double>(confusion_.tp + confusion_.tn) / static_cast<double>(r.n);
      r.format_rate = 1.0 - static_cast<double>(malformed_) / static_cast<double>(r.n);
    }
    r.fake = fake_scores(confusion_);
    r.real = real_scores(confusion_);
    if (fakes_with_map_) {
      r.saliency_mass = mass_sum_ / static_cast<double>(fakes_with_map_);
      r.localized_fraction =
          static_cast<double>(localized_) / static_cast<double>(fakes_with_map_);
    }
    return r;
  }

 private:
  Confusion confusion_;
  std::size_t malformed_ = 0;
  double mass_sum_ = 0.0;
  std::size_t localized_ = 0;
  std::size_t fakes_with_map_ = 0;
};

inline nlohmann::ordered_json to_json(const ClassScores& s) {
  nlohmann::ordered_json j;
  j["accuracy"] = s.accuracy;
  j["precision"] = s.precision;
  j["recall"] = s.recall;
  j["f1"] = s.f1;
  return j;
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["arm"] = r.arm;
  j["step"] = r.step;
  j["n"] = r.n;
  j["accuracy"] = r.accuracy;
  j["real"] = to_json(r.real);
  j["fake"] = to_json(r.fake);
  j["confusion"] = {{"tp", r.confusion.tp},
                    {"fp", r.confusion.fp},
                    {"fn", r.confusion.fn},
                    {"tn", r.confusion.tn}};
  j["malformed"] = r.malformed;
  j["format_rate"] = r.format_rate;
  j["saliency_mass"] = r.saliency_mass;
  j["localized_fraction"] = r.localized_fraction;
  return j;
}

}  // namespace raidx
