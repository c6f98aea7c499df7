// raidx command-line driver: gen-data, build-index, train, eval, infer, ablate.
//
// Exit codes: 0 success, 2 config error, 3 data error, 1 anything else.

#include <cstdio>
#include <exception>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "raidx/harness/pipeline.hpp"

namespace {

using namespace raidx;

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::string arm;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "key = value config file");
  cmd->add_option("--seed", a.seed, "run seed (overrides the config)");
  cmd->add_option("--out-dir", a.out_dir, "artifact directory")->capture_default_str();
  cmd->add_option("--arm", a.arm, "prompt arm: no-rag, static, full-rag");
}

RunConfig resolve(const CommonArgs& a) {
  RunConfig cfg = a.config_path.empty() ? RunConfig{} : load_config(a.config_path);
  if (a.seed) cfg.seed = *a.seed;
  if (!a.arm.empty()) cfg.arm = parse_arm(a.arm);
  cfg.finalize().validate();
  return cfg;
}

std::string pct(double x) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(1) << 100.0 * x;
  return o.str();
}

void print_eval(const EvalReport& r) {
  std::cout << "[" << r.arm << " step " << r.step << "] acc " << pct(r.accuracy) << "%  real acc "
            << pct(r.real.accuracy) << "% f1 " << std::setprecision(4) << r.real.f1
            << "  fake acc " << pct(r.fake.accuracy) << "% f1 " << r.fake.f1 << "  format "
            << pct(r.format_rate) << "%  localized " << pct(r.localized_fraction) << "%\n"
            << std::flush;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"raidx: retrieval-augmented real/fake image detection at desk scale"};
  app.require_subcommand(1);

  CommonArgs gen_a, idx_a, train_a, eval_a, infer_a, ablate_a;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset into OUT/dataset");
  add_common(gen, gen_a);
  auto* idx = app.add_subcommand("build-index", "embed the training split into OUT/index.rdxi");
  add_common(idx, idx_a);
  auto* tr = app.add_subcommand("train", "GRPO training; writes ckpt/, runlog.jsonl, report.json");
  add_common(tr, train_a);
  auto* ev = app.add_subcommand("eval", "greedy evaluation of OUT/ckpt on the test split");
  add_common(ev, eval_a);
  auto* inf = app.add_subcommand("infer", "classify one image (.pgm or raw float32)");
  add_common(inf, infer_a);
  std::string image_path, saliency_path;
  inf->add_option("image", image_path, "input image")->required();
  inf->add_option("--saliency", saliency_path, "write a rollout overlay (binary PPM)");
  auto* abl = app.add_subcommand("ablate", "train and evaluate every arm, with and without GRPO");
  add_common(abl, ablate_a);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = resolve(gen_a);
      const Workspace ws{gen_a.out_dir};
      const auto ds = cmd_gen_data(cfg, ws);
      std::cout << "wrote " << ds.items.size() << " images to " << ws.dataset_dir().string()
                << "\n";
    } else if (idx->parsed()) {
      const auto cfg = resolve(idx_a);
      const Workspace ws{idx_a.out_dir};
      const auto index = cmd_build_index(cfg, ws);
      std::cout << "indexed " << index.size() << " vectors of dim " << index.dim() << " into "
                << ws.index_path().string() << "\n";
    } else if (tr->parsed()) {
      const auto cfg = resolve(train_a);
      const Workspace ws{train_a.out_dir};
      const auto result = cmd_train(cfg, ws, print_eval);
      std::cout << "checkpoint " << ws.checkpoint_path().string() << " ("
                << checkpoint_hash(result.policy) << ")\n";
    } else if (ev->parsed()) {
      const auto cfg = resolve(eval_a);
      print_eval(cmd_eval(cfg, Workspace{eval_a.out_dir}));
    } else if (inf->parsed()) {
      const auto cfg = resolve(infer_a);
      std::optional<std::filesystem::path> sal;
      if (!saliency_path.empty()) sal = saliency_path;
      const auto r = cmd_infer(cfg, Workspace{infer_a.out_dir}, image_path, sal);
      if (r.reference) std::cout << "reference: " << r.reference->text << "\n";
      std::cout << "output: " << r.prediction.text << "\n";
      const auto& v = r.prediction.verdict;
      if (v.well_formed()) {
        std::cout << "verdict: " << to_string(v.parsed->answer) << "\n"
                  << "think: " << v.parsed->think_text << "\n";
      } else {
        std::cout << "verdict: UNPARSEABLE\nfailure_reason: " << to_string(*v.failure) << "\n";
      }
      if (r.overlay) std::cout << "saliency: " << r.overlay->string() << "\n";
    } else if (abl->parsed()) {
      const auto cfg = resolve(ablate_a);
      const auto rows = cmd_ablate(cfg, Workspace{ablate_a.out_dir});
      std::cout << "\n" << std::left << std::setw(10) << "arm" << std::setw(8) << "grpo"
                << std::setw(10) << "acc" << std::setw(10) << "real acc" << std::setw(10)
                << "real f1" << std::setw(10) << "fake acc" << std::setw(10) << "fake f1"
                << "format\n";
      for (const auto& row : rows) {
        const auto& r = row.report;
        std::cout << std::left << std::setw(10) << to_string(row.arm) << std::setw(8)
                  << (row.grpo ? "on" : "off") << std::setw(10) << pct(r.accuracy)
                  << std::setw(10) << pct(r.real.accuracy) << std::setw(10)
                  << std::setprecision(4) << r.real.f1 << std::setw(10) << pct(r.fake.accuracy)
                  << std::setw(10) << r.fake.f1 << pct(r.format_rate) << "\n";
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const ImageError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const IndexFormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
