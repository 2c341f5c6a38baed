#pragma once

// Experiment orchestration: pretrain (when applicable), tune every applicable
// method over repeated runs on a worker pool, evaluate on a shared eval set,
// and persist a self-describing bundle (CSVs, checkpoints, charts, manifest).

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"

#include "coinlab/analysis.hpp"
#include "coinlab/bayes.hpp"
#include "coinlab/checkpoint.hpp"
#include "coinlab/csv.hpp"
#include "coinlab/data.hpp"
#include "coinlab/errors.hpp"
#include "coinlab/evaluate.hpp"
#include "coinlab/model.hpp"
#include "coinlab/pretrain.hpp"
#include "coinlab/svg.hpp"
#include "coinlab/tune.hpp"

namespace coinlab {

enum class ExperimentName { R2S, R2M, U2M, U2R };

inline std::string experiment_name_str(ExperimentName n) {
  switch (n) {
    case ExperimentName::R2S: return "R2S";
    case ExperimentName::R2M: return "R2M";
    case ExperimentName::U2M: return "U2M";
    case ExperimentName::U2R: return "U2R";
  }
  throw InvalidConfig("bad experiment name");
}

inline ExperimentName experiment_from_name(const std::string& s) {
  for (auto n : {ExperimentName::R2S, ExperimentName::R2M, ExperimentName::U2M,
                 ExperimentName::U2R})
    if (experiment_name_str(n) == s) return n;
  throw InvalidConfig("unknown experiment: " + s);
}

inline bool experiment_pretrains(ExperimentName n) {
  return n == ExperimentName::R2S || n == ExperimentName::R2M;
}

struct ExperimentSpec {
  ExperimentName name = ExperimentName::R2S;
  PredictorConfig::Arch arch = PredictorConfig::Arch::Transformer;
  bool prefix_len_25 = false;
  bool embed_dim_4 = false;
  bool large_nets = false;
  uint64_t seed = 0;
  std::string out_dir;

  PretrainConfig pretrain;               // paper defaults
  TuneConfig tune;                       // template; method/seed set per run
  int64_t eval_count = 2048;
  int64_t n_eval = 200;
  int64_t repetitions = 10;
  int pool_size = 1;
  std::vector<Method> methods;           // empty means all applicable
  int64_t override_width = 0;            // 0 keeps the flag-derived default
  int64_t override_embed = 0;

  void validate() const {
    if (out_dir.empty()) throw InvalidConfig("experiment: output directory required");
    if (eval_count <= 0 || n_eval <= 0 || repetitions <= 0)
      throw InvalidConfig("experiment: nonpositive size");
    if (pool_size <= 0) throw InvalidConfig("experiment: pool_size must be positive");
    pretrain.validate();
  }

  PredictorConfig model_config() const {
    PredictorConfig mc;
    mc.arch = arch;
    mc.embed_dim = embed_dim_4 ? 4 : (large_nets ? 256 : 128);
    mc.width = large_nets ? 256 : 128;
    mc.heads = embed_dim_4 ? 2 : 4;
    mc.layers = large_nets ? 2 : 1;
    if (override_embed > 0) mc.embed_dim = override_embed;
    if (override_width > 0) mc.width = override_width;
    while (mc.heads > 1 && mc.embed_dim % mc.heads != 0) mc.heads /= 2;
    mc.validate();
    return mc;
  }

  TuneConfig tune_template() const {
    TuneConfig tc = tune;
    if (prefix_len_25) tc.prefix_len = 25;
    return tc;
  }

  TaskDistribution pretrain_distribution() const {
    return TaskDistribution::random_coins(1.0, 1.0);
  }

  TaskDistribution target_distribution() const {
    switch (name) {
      case ExperimentName::R2S: return TaskDistribution::single_coin(0.2);
      case ExperimentName::R2M:
      case ExperimentName::U2M:
        return TaskDistribution::two_coin_mixture({0.2, 0.8}, {0.5, 0.5});
      case ExperimentName::U2R: return TaskDistribution::random_coins(1.0, 1.0);
    }
    throw InvalidConfig("bad experiment name");
  }
};

struct RunRecord {
  std::string method;
  int repetition = 0;
  uint64_t seed = 0;
  std::string status;  // "ok", "failed", "unsupported", "exact"
  std::string detail;
};

struct ExperimentResult {
  std::filesystem::path dir;
  std::vector<RunRecord> records;
  std::vector<std::string> warnings;
  uint64_t eval_digest = 0;
};

namespace detail {

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c = 0) {
  uint64_t h = 0xCBF29CE484222325ull;
  auto step = [&](uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 0x100000001B3ull;
    }
  };
  step(a);
  step(b);
  step(c);
  return h;
}

inline std::string arch_str(PredictorConfig::Arch a) {
  return a == PredictorConfig::Arch::LSTM ? "lstm" : "transformer";
}

inline PredictorConfig::Arch arch_from_str(const std::string& s) {
  if (s == "lstm") return PredictorConfig::Arch::LSTM;
  if (s == "transformer") return PredictorConfig::Arch::Transformer;
  throw InvalidConfig("unknown arch: " + s);
}

inline std::string method_dir_name(Method m) {
  std::string s = method_name(m);
  for (char& c : s)
    if (c == '+') c = '_';
  return s;
}

inline std::vector<Method> all_methods() {
  return {Method::NoTuning, Method::RandomPF,   Method::HardPT,  Method::SimplexPT,
          Method::RealPT,   Method::SoftPT,     Method::EmbedWT, Method::UnembedWT,
          Method::UnAndEmbedWT, Method::FullWT, Method::LoRAWT};
}

inline nlohmann::json effective_config_json(const ExperimentSpec& spec) {
  const PredictorConfig mc = spec.model_config();
  const TuneConfig tc = spec.tune_template();
  nlohmann::json j;
  j["experiment"] = experiment_name_str(spec.name);
  j["arch"] = arch_str(spec.arch);
  j["seed"] = spec.seed;
  j["prefix_len_25"] = spec.prefix_len_25;
  j["embed_dim_4"] = spec.embed_dim_4;
  j["large_nets"] = spec.large_nets;
  j["repetitions"] = spec.repetitions;
  j["eval_count"] = spec.eval_count;
  j["n_eval"] = spec.n_eval;
  j["pool_size"] = spec.pool_size;
  j["model"] = {{"embed_dim", mc.embed_dim}, {"width", mc.width},     {"heads", mc.heads},
                {"layers", mc.layers},       {"mlp_widening", mc.mlp_widening}};
  j["pretrain"] = {{"steps", spec.pretrain.steps},   {"batch", spec.pretrain.batch},
                   {"seq_len", spec.pretrain.seq_len}, {"lr", spec.pretrain.lr},
                   {"clip", spec.pretrain.clip},     {"holdout_size", spec.pretrain.holdout_size},
                   {"holdout_every", spec.pretrain.holdout_every}};
  j["tune"] = {{"steps", tc.steps},           {"batch", tc.batch},
               {"n_tune", tc.n_tune},         {"lr", tc.lr},
               {"clip", tc.clip},             {"prefix_len", tc.prefix_len},
               {"lora_rank", tc.lora_rank},   {"hard_samples", tc.hard_samples}};
  std::vector<std::string> names;
  for (Method m : spec.methods) names.push_back(method_name(m));
  j["methods"] = names;  // empty means all applicable
  return j;
}

inline void apply_config_json(const nlohmann::json& j, ExperimentSpec& spec) {
  if (j.contains("experiment")) spec.name = experiment_from_name(j.at("experiment"));
  if (j.contains("arch")) spec.arch = arch_from_str(j.at("arch"));
  if (j.contains("seed")) spec.seed = j.at("seed").get<uint64_t>();
  if (j.contains("prefix_len_25")) spec.prefix_len_25 = j.at("prefix_len_25").get<bool>();
  if (j.contains("embed_dim_4")) spec.embed_dim_4 = j.at("embed_dim_4").get<bool>();
  if (j.contains("large_nets")) spec.large_nets = j.at("large_nets").get<bool>();
  if (j.contains("repetitions")) spec.repetitions = j.at("repetitions").get<int64_t>();
  if (j.contains("eval_count")) spec.eval_count = j.at("eval_count").get<int64_t>();
  if (j.contains("n_eval")) spec.n_eval = j.at("n_eval").get<int64_t>();
  if (j.contains("pool_size")) spec.pool_size = j.at("pool_size").get<int>();
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (m.contains("width")) spec.override_width = m.at("width").get<int64_t>();
    if (m.contains("embed_dim")) spec.override_embed = m.at("embed_dim").get<int64_t>();
  }
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    if (p.contains("steps")) spec.pretrain.steps = p.at("steps").get<int64_t>();
    if (p.contains("batch")) spec.pretrain.batch = p.at("batch").get<int64_t>();
    if (p.contains("seq_len")) spec.pretrain.seq_len = p.at("seq_len").get<int64_t>();
    if (p.contains("lr")) spec.pretrain.lr = p.at("lr").get<double>();
    if (p.contains("clip")) spec.pretrain.clip = p.at("clip").get<double>();
    if (p.contains("holdout_size")) spec.pretrain.holdout_size = p.at("holdout_size").get<int64_t>();
    if (p.contains("holdout_every"))
      spec.pretrain.holdout_every = p.at("holdout_every").get<int64_t>();
  }
  if (j.contains("tune")) {
    const auto& t = j.at("tune");
    if (t.contains("steps")) spec.tune.steps = t.at("steps").get<int64_t>();
    if (t.contains("batch")) spec.tune.batch = t.at("batch").get<int64_t>();
    if (t.contains("n_tune")) spec.tune.n_tune = t.at("n_tune").get<int64_t>();
    if (t.contains("lr")) spec.tune.lr = t.at("lr").get<double>();
    if (t.contains("clip")) spec.tune.clip = t.at("clip").get<double>();
    if (t.contains("prefix_len")) spec.tune.prefix_len = t.at("prefix_len").get<int64_t>();
    if (t.contains("lora_rank")) spec.tune.lora_rank = t.at("lora_rank").get<int64_t>();
    if (t.contains("hard_samples")) spec.tune.hard_samples = t.at("hard_samples").get<int64_t>();
  }
  if (j.contains("methods")) {
    spec.methods.clear();
    for (const auto& name : j.at("methods")) spec.methods.push_back(method_from_name(name));
  }
}

struct TuneJob {
  Method method = Method::NoTuning;
  int repetition = 0;
  uint64_t seed = 0;
};

struct TuneJobResult {
  bool ok = false;
  std::string error;
  TuneResult tuned;
  RegretCurve regret;
};

inline uint64_t file_digest(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InvalidConfig("cannot read file for digest: " + p.string());
  uint64_t h = 0xCBF29CE484222325ull;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001B3ull;
    }
  }
  return h;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw InvalidConfig("cannot read csv: " + p.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(split_csv_line(line));
  return rows;
}

}  // namespace detail

// Chart rendering over a bundle directory; reads the persisted CSVs so that
// `render` can be re-run on an existing bundle.
struct RenderReport {
  std::vector<std::string> written;
  std::vector<std::string> warnings;
  std::vector<std::string> errors;
};

inline RenderReport render_charts(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  RenderReport rep;
  std::string title = dir.filename().string();
  if (fs::exists(dir / "config.json")) {
    std::ifstream in(dir / "config.json");
    nlohmann::json j = nlohmann::json::parse(in);
    title = j.at("experiment").get<std::string>() + " / " + j.at("arch").get<std::string>();
  }
  fs::create_directories(dir / "charts");

  auto note = [&rep](const RenderOutcome& out, const std::string& path) {
    for (const auto& w : out.warnings) rep.warnings.push_back(w);
    if (out.written)
      rep.written.push_back(path);
    else
      rep.errors.push_back("not written: " + path);
  };

  // Regret curves with quantile bands, plus detail bars, from summary.csv.
  std::vector<ChartSeries> lines;
  std::vector<BarSeries> bars;
  std::vector<int64_t> bar_steps;
  if (fs::exists(dir / "curves" / "summary.csv")) {
    auto rows = detail::read_csv(dir / "curves" / "summary.csv");
    std::vector<std::string> order;
    std::map<std::string, ChartSeries> by_method;
    for (size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r.size() != 7) continue;
      const std::string& method = r[2];
      if (!by_method.count(method)) {
        order.push_back(method);
        by_method[method].label = method;
      }
      auto& s = by_method[method];
      s.y.push_back(std::stod(r[4]));
      s.lo.push_back(std::stod(r[5]));
      s.hi.push_back(std::stod(r[6]));
    }
    int64_t n = 0;
    for (const auto& m : order) {
      lines.push_back(by_method[m]);
      n = std::max<int64_t>(n, static_cast<int64_t>(by_method[m].y.size()));
    }
    if (n > 0) {
      bar_steps = {std::min<int64_t>(49, n - 1), std::min<int64_t>(199, n - 1)};
      for (const auto& m : order) {
        const auto& s = by_method[m];
        BarSeries b{m, {}, {}, {}};
        for (int64_t t : bar_steps) {
          if (t < static_cast<int64_t>(s.y.size())) {
            b.values.push_back(s.y[t]);
            b.lo.push_back(s.lo[t]);
            b.hi.push_back(s.hi[t]);
          }
        }
        bars.push_back(std::move(b));
      }
    }
  }
  note(render_line_chart((dir / "charts" / "regret_curves.svg").string(),
                         "Cumulative regret: " + title, "step", "cumulative regret (nats)", lines),
       "charts/regret_curves.svg");
  std::vector<std::string> groups;
  for (int64_t t : bar_steps) groups.push_back("step " + std::to_string(t));
  note(render_bar_chart((dir / "charts" / "detail_bars.svg").string(),
                        "Regret detail: " + title, "cumulative regret (nats)", groups, bars),
       "charts/detail_bars.svg");

  // Tuning losses: pointwise median over repetitions per method.
  std::vector<ChartSeries> tuning;
  if (fs::exists(dir / "runs.csv")) {
    auto rows = detail::read_csv(dir / "runs.csv");
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::vector<double>>> curves;
    for (size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r.size() != 7 || r[5] != "ok") continue;
      const fs::path f = dir / "methods" / detail::method_dir_name(method_from_name(r[2])) /
                         ("rep" + r[3]) / "tuning_loss.csv";
      if (!fs::exists(f)) continue;
      auto c = detail::read_csv(f);
      std::vector<double> curve;
      for (size_t k = 1; k < c.size(); ++k) curve.push_back(std::stod(c[k][1]));
      if (curve.empty()) continue;
      if (!curves.count(r[2])) order.push_back(r[2]);
      curves[r[2]].push_back(std::move(curve));
    }
    for (const auto& m : order) {
      const auto& reps = curves[m];
      size_t n = reps[0].size();
      for (const auto& c : reps) n = std::min(n, c.size());
      ChartSeries s{m, {}, {}, {}};
      for (size_t t = 0; t < n; ++t) {
        std::vector<double> col;
        for (const auto& c : reps) col.push_back(c[t]);
        std::sort(col.begin(), col.end());
        s.y.push_back(quantile_sorted(col, 0.5));
      }
      tuning.push_back(std::move(s));
    }
  }
  note(render_line_chart((dir / "charts" / "tuning_losses.svg").string(),
                         "Tuning loss: " + title, "tuning step", "mean sequence loss (nats)",
                         tuning),
       "charts/tuning_losses.svg");

  // PCA scatter by source.
  std::vector<ScatterSeries> scatter;
  if (fs::exists(dir / "analysis" / "pca.csv")) {
    auto rows = detail::read_csv(dir / "analysis" / "pca.csv");
    std::vector<std::string> order;
    std::map<std::string, ScatterSeries> by_source;
    for (size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (r.size() != 5) continue;
      if (!by_source.count(r[4])) {
        order.push_back(r[4]);
        by_source[r[4]].label = r[4];
      }
      by_source[r[4]].points.push_back({std::stod(r[2]), std::stod(r[3])});
    }
    for (const auto& s : order) scatter.push_back(by_source[s]);
  }
  note(render_scatter((dir / "charts" / "pca.svg").string(), "Internal states PCA: " + title,
                      "pc1", "pc2", scatter),
       "charts/pca.svg");
  return rep;
}

inline void write_manifest(const std::filesystem::path& dir, const ExperimentResult& res) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "manifest.json")
      files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());

  nlohmann::json j;
  j["eval_digest"] = hex64(res.eval_digest);
  nlohmann::json flist = nlohmann::json::array();
  for (const auto& f : files)
    flist.push_back({{"path", f.generic_string()}, {"digest", hex64(detail::file_digest(dir / f))}});
  j["files"] = std::move(flist);
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : res.records)
    recs.push_back({{"method", r.method},
                    {"repetition", r.repetition},
                    {"seed", r.seed},
                    {"status", r.status},
                    {"detail", r.detail}});
  j["records"] = std::move(recs);
  j["warnings"] = res.warnings;
  std::ofstream out(dir / "manifest.json");
  out << j.dump(2) << "\n";
}

inline ExperimentResult run_experiment(const ExperimentSpec& spec) {
  namespace fs = std::filesystem;
  spec.validate();
  const fs::path dir = spec.out_dir;
  fs::create_directories(dir);
  fs::create_directories(dir / "curves");
  fs::create_directories(dir / "analysis");

  ExperimentResult res;
  res.dir = dir;
  const std::string exp_name = experiment_name_str(spec.name);
  const std::string arch = detail::arch_str(spec.arch);
  const PredictorConfig mc = spec.model_config();
  const TuneConfig tc_base = spec.tune_template();
  const TaskDistribution target = spec.target_distribution();
  const bool pretrains = experiment_pretrains(spec.name);

  {
    std::ofstream out(dir / "config.json");
    out << detail::effective_config_json(spec).dump(2) << "\n";
  }

  // Base parameters: meta-trained for R2S/R2M, random initialization otherwise.
  ParameterSet base = [&] {
    if (pretrains) {
      PretrainConfig pc = spec.pretrain;
      pc.seed = detail::mix_seed(spec.seed, 0);
      PretrainResult pr = meta_train(pc, mc, spec.pretrain_distribution());
      write_loss_curve((dir / "pretrain_loss.csv").string(), pr);
      return std::move(pr.params);
    }
    RandomStream init(detail::mix_seed(spec.seed, 0));
    return init_params(mc, init);
  }();
  save_checkpoint((dir / "base_checkpoint.ckpt").string(), base.to_named_tensors());

  const auto eval_set =
      sample_eval_set(target, spec.eval_count, spec.n_eval, detail::mix_seed(spec.seed, 1));
  res.eval_digest = eval_set_digest(eval_set);
  EvalOptions eopt;
  eopt.n_eval = spec.n_eval;

  // Method x repetition jobs; seeds depend only on (experiment seed, method,
  // repetition), never on scheduling.
  std::vector<Method> methods = spec.methods.empty() ? detail::all_methods() : spec.methods;
  std::vector<detail::TuneJob> jobs;
  for (Method m : methods) {
    if (m == Method::LoRAWT && spec.arch == PredictorConfig::Arch::LSTM) {
      res.records.push_back({method_name(m), 0, 0, "unsupported",
                             "LoRAWT requires the transformer architecture"});
      continue;
    }
    for (int rep = 0; rep < spec.repetitions; ++rep)
      jobs.push_back({m, rep,
                      detail::mix_seed(spec.seed, 2 + static_cast<uint64_t>(m),
                                       static_cast<uint64_t>(rep))});
  }

  std::vector<detail::TuneJobResult> outs(jobs.size());
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      auto& out = outs[i];
      try {
        TuneConfig tc = tc_base;
        tc.method = jobs[i].method;
        tc.seed = jobs[i].seed;
        out.tuned = tune(base, tc, target);
        out.regret = regret_curve_net(base, out.tuned.artifact, eval_set, eopt);
        out.regret.method = method_name(jobs[i].method);
        out.regret.repetition = jobs[i].repetition;
        out.ok = true;
      } catch (const std::exception& e) {
        out.ok = false;
        out.error = e.what();
      }
    }
  };
  const int pool = std::max(1, std::min<int>(spec.pool_size, static_cast<int>(jobs.size())));
  if (pool <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < pool; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  // Single writer: all persistence happens here, in job order.
  std::vector<RegretCurve> all_curves;
  std::map<std::string, std::vector<RegretCurve>> ok_by_method;
  std::vector<std::string> method_order;
  for (size_t i = 0; i < jobs.size(); ++i) {
    const auto& job = jobs[i];
    const std::string mname = method_name(job.method);
    if (std::find(method_order.begin(), method_order.end(), mname) == method_order.end())
      method_order.push_back(mname);
    if (!outs[i].ok) {
      res.records.push_back({mname, job.repetition, job.seed, "failed", outs[i].error});
      continue;
    }
    res.records.push_back({mname, job.repetition, job.seed, "ok", ""});
    const fs::path rdir =
        dir / "methods" / detail::method_dir_name(job.method) / ("rep" + std::to_string(job.repetition));
    fs::create_directories(rdir);
    save_artifact((rdir / "artifact").string(), outs[i].tuned.artifact);
    if (!outs[i].tuned.loss_curve.empty())
      write_tuning_curve((rdir / "tuning_loss.csv").string(), outs[i].tuned.loss_curve);
    all_curves.push_back(outs[i].regret);
    ok_by_method[mname].push_back(outs[i].regret);
  }

  // Exact baselines, each computed once.
  std::vector<std::pair<std::string, ExactPredictor>> baselines;
  baselines.emplace_back("TargetBayes", bayes_for(target));
  if (pretrains) {
    const ExactPredictor pre = bayes_for(spec.pretrain_distribution());
    baselines.emplace_back("PreBayes", pre);
    if (tc_base.prefix_len <= 20) {
      const PrefixSearchResult sr =
          exhaustive_prefix_search(pre, target, tc_base.prefix_len, tc_base.n_tune);
      baselines.emplace_back("PreBayesPT", pre.condition_on_prefix(sr.prefix));
    } else {
      res.warnings.push_back("PreBayesPT skipped: exact prefix search infeasible at length " +
                             std::to_string(tc_base.prefix_len));
    }
  }
  for (const auto& [name, pred] : baselines) {
    RegretCurve c = regret_curve_exact(pred, eval_set, eopt);
    c.method = name;
    c.repetition = 0;
    res.records.push_back({name, 0, 0, "exact", ""});
    all_curves.push_back(std::move(c));
    method_order.push_back(name);
    ok_by_method[name].push_back(all_curves.back());
  }

  write_regret_csv((dir / "curves" / "regret.csv").string(), exp_name, arch, all_curves);
  std::vector<std::pair<std::string, MethodSummary>> summaries;
  for (const auto& m : method_order) {
    auto it = ok_by_method.find(m);
    if (it == ok_by_method.end() || it->second.empty()) {
      res.warnings.push_back("no successful repetitions for " + m + "; summary omitted");
      continue;
    }
    summaries.emplace_back(m, summarize(it->second));
  }
  write_summary_csv((dir / "curves" / "summary.csv").string(), exp_name, arch, summaries);

  {
    CsvWriter runs((dir / "runs.csv").string(),
                   {"experiment", "arch", "method", "repetition", "seed", "status", "detail"});
    for (const auto& r : res.records)
      runs.row(exp_name, arch, r.method, r.repetition, hex64(r.seed), r.status, r.detail);
  }

  // Internal-state PCA over pooled target (and pretrain, when applicable)
  // sequences pushed through the base network.
  {
    const int64_t pca_len = std::min<int64_t>(100, spec.n_eval);
    const int64_t pca_count = std::min<int64_t>(64, spec.eval_count);
    std::vector<TokenSequence> seqs;
    std::vector<std::string> sources;
    for (int64_t i = 0; i < pca_count; ++i) {
      seqs.emplace_back(eval_set[i].tokens.begin(), eval_set[i].tokens.begin() + pca_len);
      sources.push_back("target");
    }
    if (pretrains) {
      RandomStream pr(detail::mix_seed(spec.seed, 3));
      const TaskDistribution pdist = spec.pretrain_distribution();
      for (int64_t i = 0; i < pca_count; ++i) {
        RandomStream sr = pr.fork(static_cast<uint64_t>(i));
        const TaskParam tau = sample_task(pdist, sr);
        seqs.push_back(sample_sequence(tau, pca_len, sr));
        sources.push_back("pretrain");
      }
    }
    Mat pooled;
    std::vector<Mat> states;
    for (auto& s : seqs) states.push_back(internal_states(base, {}, s));
    pooled = Mat(static_cast<int64_t>(states.size()) * states[0].rows, states[0].cols);
    for (size_t i = 0; i < states.size(); ++i)
      std::copy(states[i].a.begin(), states[i].a.end(),
                pooled.a.begin() + static_cast<int64_t>(i) * states[i].rows * states[i].cols);
    try {
      const PCAProjection proj = pca_2d(pooled);
      std::vector<PcaCsvRow> rows;
      const int64_t per_seq = states[0].rows;
      for (size_t i = 0; i < seqs.size(); ++i)
        for (int64_t t = 0; t < per_seq; ++t) {
          const int64_t r = static_cast<int64_t>(i) * per_seq + t;
          rows.push_back({static_cast<int64_t>(i), t, proj.projected.at(r, 0),
                          proj.projected.at(r, 1), sources[i]});
        }
      write_pca_csv((dir / "analysis" / "pca.csv").string(), rows);
    } catch (const std::exception& e) {
      res.warnings.push_back(std::string("pca skipped: ") + e.what());
    }
  }

  const RenderReport rr = render_charts(dir);
  for (const auto& w : rr.warnings) res.warnings.push_back("render: " + w);
  for (const auto& e : rr.errors) res.warnings.push_back("render: " + e);

  write_manifest(dir, res);
  return res;
}

// Invariant checks over a persisted bundle.
struct VerifyReport {
  bool ok = true;
  std::vector<std::string> problems;
  void fail(const std::string& p) {
    ok = false;
    problems.push_back(p);
  }
};

inline VerifyReport verify_bundle(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  VerifyReport rep;
  if (!fs::exists(dir / "manifest.json")) {
    rep.fail("manifest.json missing");
    return rep;
  }
  nlohmann::json manifest;
  {
    std::ifstream in(dir / "manifest.json");
    manifest = nlohmann::json::parse(in);
  }

  // Every listed file present with matching digest; no unlisted files.
  std::map<std::string, std::string> listed;
  for (const auto& f : manifest.at("files"))
    listed[f.at("path").get<std::string>()] = f.at("digest").get<std::string>();
  for (const auto& [path, digest] : listed) {
    if (!fs::exists(dir / path)) {
      rep.fail("listed file missing: " + path);
      continue;
    }
    if (hex64(detail::file_digest(dir / path)) != digest)
      rep.fail("digest mismatch: " + path);
  }
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "manifest.json" &&
        !listed.count(fs::relative(e.path(), dir).generic_string()))
      rep.fail("file not in manifest: " + fs::relative(e.path(), dir).generic_string());

  // Eval set digest re-derivable from the persisted config.
  ExperimentSpec spec;
  if (!fs::exists(dir / "config.json")) {
    rep.fail("config.json missing");
    return rep;
  }
  {
    std::ifstream in(dir / "config.json");
    detail::apply_config_json(nlohmann::json::parse(in), spec);
  }
  const auto eval_set = sample_eval_set(spec.target_distribution(), spec.eval_count, spec.n_eval,
                                        detail::mix_seed(spec.seed, 1));
  if (hex64(eval_set_digest(eval_set)) != manifest.at("eval_digest").get<std::string>())
    rep.fail("eval set digest does not match config");

  // Summary quantile ordering and row attribution against runs.csv.
  if (fs::exists(dir / "curves" / "summary.csv")) {
    for (size_t i = 1; const auto& r : detail::read_csv(dir / "curves" / "summary.csv")) {
      if (r.size() == 7 && r[0] != "experiment") {
        const double med = std::stod(r[4]), q25 = std::stod(r[5]), q75 = std::stod(r[6]);
        if (!(q25 <= med && med <= q75))
          rep.fail("summary quantiles out of order at line " + std::to_string(i));
      }
      ++i;
    }
  } else {
    rep.fail("curves/summary.csv missing");
  }
  if (fs::exists(dir / "curves" / "regret.csv") && fs::exists(dir / "runs.csv")) {
    std::map<std::pair<std::string, std::string>, std::string> status;
    for (const auto& r : detail::read_csv(dir / "runs.csv"))
      if (r.size() == 7 && r[0] != "experiment") status[{r[2], r[3]}] = r[5];
    for (const auto& r : detail::read_csv(dir / "curves" / "regret.csv")) {
      if (r.size() != 6 || r[0] == "experiment") continue;
      auto it = status.find({r[2], r[3]});
      if (it == status.end() || (it->second != "ok" && it->second != "exact")) {
        rep.fail("regret row not attributable to a successful run: " + r[2] + " rep " + r[3]);
        break;
      }
    }
  } else {
    rep.fail("curves/regret.csv or runs.csv missing");
  }
  return rep;
}

}  // namespace coinlab
