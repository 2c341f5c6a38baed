// Command-line runner: `run` executes an experiment bundle, `render` redraws
// SVGs from bundle CSVs, `verify` recomputes manifest digests and invariants.

#include <algorithm>
#include <cstdio>
#include <exception>
#include <fstream>
#include <string>

#include "CLI11.hpp"

#include "coinlab/experiment.hpp"

namespace {

int do_run(const std::string& experiment, const std::string& arch, uint64_t seed,
           const std::string& out, const std::string& config_file, int prefix_len, int embed_dim,
           bool large, int pool, int reps) {
  using namespace coinlab;
  ExperimentSpec spec;
  if (!config_file.empty()) {
    std::ifstream in(config_file);
    if (!in) {
      std::fprintf(stderr, "cannot read config file: %s\n", config_file.c_str());
      return 1;
    }
    detail::apply_config_json(nlohmann::json::parse(in), spec);
  }
  // Command-line flags override the config file, which overrides defaults.
  if (!experiment.empty()) {
    std::string upper = experiment;
    std::transform(upper.begin(), upper.end(), upper.begin(),
                   [](unsigned char c) { return std::toupper(c); });
    spec.name = experiment_from_name(upper);
  }
  if (!arch.empty()) spec.arch = detail::arch_from_str(arch);
  if (seed != static_cast<uint64_t>(-1)) spec.seed = seed;
  if (!out.empty()) spec.out_dir = out;
  if (prefix_len >= 0) {
    spec.tune.prefix_len = prefix_len;
    spec.prefix_len_25 = prefix_len == 25;
  }
  if (embed_dim > 0) {
    if (embed_dim == 4)
      spec.embed_dim_4 = true;
    else
      spec.override_embed = embed_dim;
  }
  if (large) spec.large_nets = true;
  if (pool > 0) spec.pool_size = pool;
  if (reps > 0) spec.repetitions = reps;

  const ExperimentResult res = run_experiment(spec);
  int ok = 0, failed = 0, unsupported = 0;
  for (const auto& r : res.records) {
    if (r.status == "ok") ++ok;
    if (r.status == "failed") {
      ++failed;
      std::fprintf(stderr, "failed: %s rep %d: %s\n", r.method.c_str(), r.repetition,
                   r.detail.c_str());
    }
    if (r.status == "unsupported")
      std::fprintf(stderr, "unsupported: %s: %s\n", r.method.c_str(), r.detail.c_str());
    if (r.status == "unsupported") ++unsupported;
  }
  for (const auto& w : res.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::printf("bundle: %s\n", res.dir.string().c_str());
  std::printf("runs: %d ok, %d failed, %d unsupported\n", ok, failed, unsupported);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meta-learning and prompt-tuning laboratory"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run an experiment");
  std::string experiment, arch, out, config_file;
  uint64_t seed = static_cast<uint64_t>(-1);
  int prefix_len = -1, embed_dim = 0, pool = 0, reps = 0;
  bool large = false;
  run->add_option("--experiment", experiment, "one of r2s, r2m, u2m, u2r")
      ->check(CLI::IsMember({"r2s", "r2m", "u2m", "u2r"}));
  run->add_option("--arch", arch, "lstm or transformer")
      ->check(CLI::IsMember({"lstm", "transformer"}));
  run->add_option("--seed", seed, "experiment seed");
  run->add_option("--out", out, "bundle output directory");
  run->add_option("--config", config_file, "JSON config file");
  run->add_option("--prefix-len", prefix_len, "prefix length (e.g. 25 for the control run)");
  run->add_option("--embed-dim", embed_dim, "embedding dimensionality (e.g. 4)");
  run->add_flag("--large", large, "doubled embed/width, two layers");
  run->add_option("--pool", pool, "worker pool size");
  run->add_option("--reps", reps, "tuning repetitions per method");

  auto* render = app.add_subcommand("render", "re-render plots from a bundle");
  std::string bundle;
  render->add_option("--bundle", bundle, "bundle directory")->required();

  auto* verify = app.add_subcommand("verify", "check bundle digests and invariants");
  std::string vbundle;
  verify->add_option("--bundle", vbundle, "bundle directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (run->parsed())
      return do_run(experiment, arch, seed, out, config_file, prefix_len, embed_dim, large, pool,
                    reps);
    if (render->parsed()) {
      const coinlab::RenderReport rep = coinlab::render_charts(bundle);
      for (const auto& w : rep.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      for (const auto& e : rep.errors) std::fprintf(stderr, "error: %s\n", e.c_str());
      for (const auto& f : rep.written) std::printf("wrote %s\n", f.c_str());
      return rep.written.empty() ? 1 : 0;
    }
    const coinlab::VerifyReport rep = coinlab::verify_bundle(vbundle);
    for (const auto& p : rep.problems) std::fprintf(stderr, "problem: %s\n", p.c_str());
    std::printf("%s\n", rep.ok ? "bundle OK" : "bundle FAILED verification");
    return rep.ok ? 0 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
