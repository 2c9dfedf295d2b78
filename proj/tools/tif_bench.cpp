// tif_bench: gen-world | pretrain | run | curves | ablate
//
// Every subcommand takes --config <path> (defaults when omitted) and
// --out <dir>. Failures print one line to stderr:
//   tif_bench: error kind=<kind> msg="<message>"
// and exit with 2 (bad usage/config), 3 (missing artifact) or 1 (anything else).

#include "tif/bench.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <string>

namespace {

std::string escape(std::string s) {
  std::string out;
  for (const char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += (c == '\n') ? ' ' : c;
  }
  return out;
}

int fail(const char* kind, const std::string& msg, int code) {
  std::cerr << "tif_bench: error kind=" << kind << " msg=\"" << escape(msg) << "\"\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TiF learner lab"};
  app.require_subcommand(1);

  std::string config_path, out_dir, which, axis;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory")->required();
  };
  auto* gen = app.add_subcommand("gen-world", "generate the world and persist tasks");
  auto* pre = app.add_subcommand("pretrain", "pretrain the base denoiser");
  auto* run = app.add_subcommand("run", "train adapters, evaluate TiF and baselines");
  auto* curves = app.add_subcommand("curves", "emit attribute-loss or weight curves");
  auto* ablate = app.add_subcommand("ablate", "sweep one axis");
  for (auto* sub : {gen, pre, run, curves, ablate}) add_common(sub);
  curves->add_option("--which", which, "err | weights")->required();
  ablate->add_option("--axis", axis, "weights | rank | subset")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  tif::ExperimentConfig cfg;
  try {
    if (!config_path.empty()) cfg = tif::load_config(config_path);
    cfg.validate();
  } catch (const std::exception& e) {
    return fail("config", e.what(), 2);
  }

  try {
    namespace b = tif::bench;
    if (*gen) b::cmd_gen_world(cfg, out_dir, std::cout);
    if (*pre) b::cmd_pretrain(cfg, out_dir, std::cout);
    if (*run) b::cmd_run(cfg, out_dir, std::cout);
    if (*curves) {
      const auto kind = [&] {
        try {
          return b::parse_curve_kind(which);
        } catch (const std::invalid_argument& e) {
          throw CLI::ValidationError(e.what());
        }
      }();
      b::cmd_curves(cfg, out_dir, kind, std::cout);
    }
    if (*ablate) {
      const auto a = [&] {
        try {
          return b::parse_axis(axis);
        } catch (const std::invalid_argument& e) {
          throw CLI::ValidationError(e.what());
        }
      }();
      b::cmd_ablate(cfg, out_dir, a, std::cout);
    }
  } catch (const CLI::ValidationError& e) {
    return fail("usage", e.what(), 2);
  } catch (const tif::bench::MissingArtifact& e) {
    return fail("missing_artifact", e.what(), 3);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
  return 0;
}
