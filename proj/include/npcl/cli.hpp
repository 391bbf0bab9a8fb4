#pragma once
// Command-line front end: train, eval, ablate and report.
//
// Exit codes: 0 success, 2 configuration error, 3 non-finite loss,
// 4 missing inference context.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "npcl/config.hpp"
#include "npcl/inference.hpp"
#include "npcl/memory.hpp"
#include "npcl/metrics.hpp"
#include "npcl/params.hpp"
#include "npcl/trainer.hpp"

namespace npcl::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kNumericAbort = 3, kMissingContext = 4 };

struct MissingFile : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw MissingFile("missing " + p.string());
  return nlohmann::json::parse(is);
}

template <class F>
void write_file(const fs::path& p, F&& body) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  body(os);
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');) {
    try {
      std::size_t used = 0;
      long long v = std::stoll(part, &used);
      if (used != part.size() || v < 0) throw std::invalid_argument(part);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("context size '" + part + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw ConfigError("empty --context-size list");
  return out;
}

inline nlohmann::json ood_json(const OodScores& s) {
  return {{"var_softmax", s.var_softmax}, {"var_entropy", s.var_entropy}};
}

// Test predictions of every task of a stream against one prepared context.
inline std::vector<Prediction> predict_stream(const NpclModel& model, const InferenceContext& ctx,
                                              const TaskStream& s, InferenceMode mode, std::size_t batch) {
  std::vector<Prediction> all;
  for (auto& t : s.tasks)
    for (std::size_t b = 0; b < t.test.size(); b += batch) {
      SampleSet chunk(t.test.begin() + static_cast<std::ptrdiff_t>(b),
                      t.test.begin() + static_cast<std::ptrdiff_t>(std::min(t.test.size(), b + batch)));
      auto p = predict_batch(model, ctx, chunk, mode, all.size());
      all.insert(all.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
    }
  return all;
}

inline void renumber(std::vector<Prediction>& preds) {
  for (std::size_t i = 0; i < preds.size(); ++i) preds[i].sample_id = i;
}

// Writes the per-prediction artifacts shared by train and eval.
// The confidence table reads each target through its own task's head.
inline void write_prediction_files(const fs::path& dir, const std::vector<Prediction>& preds,
                                   const std::vector<Prediction>& task_head_preds, bool dump) {
  auto cal = calibration_input(preds);
  write_file(dir / "calibration.tsv", [&](std::ostream& os) { write_calibration_tsv(os, cal); });
  write_file(dir / "confidence_table.tsv",
             [&](std::ostream& os) { write_confidence_table_tsv(os, confidence_report(task_head_preds)); });
  write_file(dir / "qq_raw.tsv", [&](std::ostream& os) { write_qq_raw_tsv(os, preds); });
  if (dump) write_file(dir / "predictions.jsonl", [&](std::ostream& os) { write_jsonl(os, preds); });
}

}  // namespace detail

/// Summary scores of one finished stream run.
inline nlohmann::json summarize(const RunConfig& cfg, const StreamResult& r,
                                const std::vector<Prediction>& id_preds,
                                const std::optional<OodScores>& ood) {
  auto cal = calibration_input(id_preds);
  nlohmann::json j;
  j["variant"] = to_string(cfg.model.variant);
  j["mode"] = to_string(cfg.eval.mode);
  j["tasks"] = r.matrix.tasks();
  j["final_average_accuracy"] = final_average_accuracy(r.matrix);
  if (r.matrix.tasks() >= 2) {
    j["bwt_acc"] = bwt(r.matrix, Channel::acc);
    j["bwt_unc"] = bwt(r.matrix, Channel::unc);
  }
  j["ece"] = ece(cal);
  j["ace"] = ace(cal);
  if (cfg.model.n_eval >= 2) j["id"] = detail::ood_json(ood_variances(id_preds));
  if (ood) j["ood"] = detail::ood_json(*ood);
  j["storage_footprint"] = storage_footprint(cfg.model.hidden_dim, r.matrix.tasks(), cfg.train.buffer_size);
  j["steps"] = r.state.step;
  return j;
}

/// Full training run into `out`. Returns the metrics document.
inline nlohmann::json cmd_train(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  detail::write_json(out / "config.json", to_json(cfg));
  auto stream = build_stream(cfg.data);
  auto tcfg = cfg.resolved_train();
  auto r = run_stream(stream, cfg.model, tcfg, out);

  auto& preds = r.final_predictions;
  detail::renumber(preds);
  auto rng = eval_rng(cfg.seed, stream.tasks.size());
  auto ctx = r.model.prepare_inference(evaluation_context(r.state.memory, cfg.eval.context_size, rng),
                                       stream.tasks.size(), rng);
  auto task_head_preds = detail::predict_stream(r.model, ctx, stream, InferenceMode::task_head, cfg.eval.batch);
  std::optional<OodScores> ood;
  if (cfg.eval.ood && cfg.model.n_eval >= 2) {
    auto ood_stream = build_stream(cfg.data, cfg.data.ood_offset);
    ood = ood_variances(detail::predict_stream(r.model, ctx, ood_stream, cfg.eval.mode, cfg.eval.batch));
  }
  auto metrics = summarize(cfg, r, preds, ood);

  detail::write_json(out / "run_matrix.json", r.matrix.to_json());
  detail::write_file(out / "run_matrix.tsv", [&](std::ostream& os) { write_run_matrix_tsv(os, r.matrix); });
  detail::write_json(out / "dist_memory.json", r.state.dist_memory.to_json(cfg.model.hidden_dim));
  r.state.memory.save(out / "buffer.bin");
  detail::write_prediction_files(out, preds, task_head_preds, cfg.eval.dump_predictions);
  detail::write_json(out / "metrics.json", metrics);
  return metrics;
}

struct EvalOptions {
  std::vector<std::size_t> context_sizes{0};  // 0: whole buffer
  std::size_t export_attention = 0;           // targets whose attention weights are exported
};

/// Re-evaluates a finished run from its directory.
inline nlohmann::json cmd_eval(const fs::path& run, const RunConfig& cfg, const EvalOptions& opt,
                               const fs::path& out) {
  auto stream = build_stream(cfg.data);
  const std::size_t tasks = stream.tasks.size();
  auto ckpt = run / "checkpoints" / ("task_" + std::to_string(tasks - 1) + ".ckpt");
  if (!fs::exists(ckpt)) throw MissingFile("missing checkpoint " + ckpt.string());
  if (!fs::exists(run / "buffer.bin"))
    throw NoContextError("missing " + (run / "buffer.bin").string() + "; inference requires a context");
  auto mcfg = fit_to_stream(cfg.model, stream);
  mcfg.init_seed = cfg.seed;
  NpclModel model(mcfg);
  load_checkpoint(model.params(), ckpt);
  auto mem = EpisodicMemory::load(run / "buffer.bin");
  if (mem.empty()) throw NoContextError("the stored buffer is empty; inference requires a context");

  fs::create_directories(out);
  nlohmann::json rows = nlohmann::json::array();
  std::ofstream sweep(out / "context_sweep.tsv");
  sweep << "context_size\taccuracy\tece\tace\n";
  for (std::size_t i = 0; i < opt.context_sizes.size(); ++i) {
    std::size_t size = opt.context_sizes[i];
    if (size > mem.size()) {
      std::cerr << "warning: context size " << size << " exceeds the buffer (" << mem.size()
                << "); using " << mem.size() << "\n";
      size = mem.size();
    }
    auto rng = eval_rng(cfg.seed, 1000 + size);
    auto ctx_set = evaluation_context(mem, size, rng);
    auto ctx = model.prepare_inference(ctx_set, tasks, rng);
    auto preds = detail::predict_stream(model, ctx, stream, cfg.eval.mode, cfg.eval.batch);
    auto cal = calibration_input(preds);
    double acc = accuracy_percent(preds), e = ece(cal), a = ace(cal);
    rows.push_back({{"context_size", ctx_set.size()}, {"accuracy", acc}, {"ece", e}, {"ace", a}});
    sweep << ctx_set.size() << '\t' << ::npcl::detail::num(acc) << '\t' << ::npcl::detail::num(e) << '\t'
          << ::npcl::detail::num(a) << '\n';
    if (i == 0) {
      detail::write_prediction_files(
          out, preds, detail::predict_stream(model, ctx, stream, InferenceMode::task_head, cfg.eval.batch),
          cfg.eval.dump_predictions);
      if (opt.export_attention > 0 && model.has_deterministic()) {
        SampleSet targets;
        for (auto& t : stream.tasks)
          for (auto& s : t.test)
            if (targets.size() < opt.export_attention) targets.push_back(s);
        auto w = model.attention_weights(ctx_set, targets);
        nlohmann::json triples = nlohmann::json::array();
        for (std::size_t q = 0; q < w.queries; ++q)
          for (std::size_t k = 0; k < w.keys; ++k) triples.push_back({q, k, w.w[q * w.keys + k]});
        detail::write_json(out / "attention.json", triples);
      }
    }
  }
  nlohmann::json metrics{{"mode", to_string(cfg.eval.mode)}, {"rows", rows}};
  detail::write_json(out / "metrics.json", metrics);
  return metrics;
}

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"regularizers", "mc_samples", "variants", "noisy_prior",
                                              "fewshot"};
  return names;
}

/// Configuration cells of an ablation, in table order.
inline std::vector<std::pair<std::string, RunConfig>> ablation_cells(const RunConfig& base,
                                                                     const std::string& which) {
  std::vector<std::pair<std::string, RunConfig>> cells;
  auto cell = [&](std::string name, auto&& edit) {
    RunConfig c = base;
    edit(c);
    cells.emplace_back(std::move(name), std::move(c));
  };
  if (which == "regularizers") {
    cell("baseline", [](RunConfig& c) { c.train.no_gr = c.train.no_tr = true; });
    cell("+GR", [](RunConfig& c) { c.train.no_gr = false, c.train.no_tr = true; });
    cell("+TR", [](RunConfig& c) { c.train.no_gr = true, c.train.no_tr = false; });
    cell("+GR+TR", [](RunConfig& c) { c.train.no_gr = c.train.no_tr = false; });
  } else if (which == "mc_samples") {
    for (auto [m, n] : std::vector<std::pair<std::size_t, std::size_t>>{
             {1, 10}, {1, 20}, {1, 50}, {5, 20}, {10, 20}})
      cell("M=" + std::to_string(m) + ",N=" + std::to_string(n), [m, n](RunConfig& c) {
        c.model.m_task = m;
        c.model.n_train = n;
      });
  } else if (which == "variants") {
    for (auto v : {Variant::np, Variant::anp, Variant::st_npcl, Variant::npcl})
      cell(to_string(v), [v](RunConfig& c) { c.model.variant = v; });
  } else if (which == "noisy_prior") {
    cell("standard", [](RunConfig& c) { c.train.noisy_prior = false; });
    cell("noisy", [](RunConfig& c) { c.train.noisy_prior = true; });
  } else if (which == "fewshot") {
    for (std::size_t b : {5, 10})
      cell("buffer=" + std::to_string(b), [b](RunConfig& c) { c.train.buffer_size = b; });
  } else {
    std::string valid;
    for (auto& n : ablation_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown ablation '" + which + "'; valid: " + valid);
  }
  return cells;
}

/// Runs every cell of an ablation; one TSV row per cell.
inline void cmd_ablate(const RunConfig& base, const std::string& which, const fs::path& out) {
  auto cells = ablation_cells(base, which);
  fs::create_directories(out);
  std::ofstream tsv(out / ("ablation_" + which + ".tsv"));
  tsv << "cell\tfinal_accuracy\tbwt_acc\tece\tace\n";
  for (auto& [name, cfg] : cells) {
    auto stream = build_stream(cfg.data);
    auto r = run_stream(stream, cfg.model, cfg.resolved_train());
    auto cal = calibration_input(r.final_predictions);
    double acc = final_average_accuracy(r.matrix);
    std::string b = r.matrix.tasks() >= 2 ? ::npcl::detail::num(bwt(r.matrix, Channel::acc)) : "";
    tsv << name << '\t' << ::npcl::detail::num(acc) << '\t' << b << '\t' << ::npcl::detail::num(ece(cal))
        << '\t' << ::npcl::detail::num(ace(cal)) << '\n';
    std::cout << name << "\tacc " << acc << "\n";
  }
}

/// Aggregates metrics across run directories (mean and population std).
inline nlohmann::json cmd_report(const std::vector<fs::path>& runs, const fs::path& out) {
  if (runs.empty()) throw ConfigError("report needs at least one run directory");
  std::map<std::string, std::vector<double>> scalars;
  std::vector<RunMatrix> matrices;
  std::optional<nlohmann::json> ref_cfg;
  std::vector<CalibrationBin> cal;
  for (auto& run : runs) {
    auto m = detail::read_json(run / "metrics.json");
    for (auto& [k, v] : m.items())
      if (v.is_number() && k != "tasks" && k != "steps" && k != "storage_footprint")
        scalars[k].push_back(v.get<double>());
    for (const char* group : {"id", "ood"})
      if (m.contains(group))
        for (auto& [k, v] : m[group].items()) scalars[std::string(group) + "." + k].push_back(v.get<double>());
    matrices.push_back(RunMatrix::from_json(detail::read_json(run / "run_matrix.json")));
    if (fs::exists(run / "config.json")) {
      auto c = detail::read_json(run / "config.json");
      c.erase("seed");
      if (!ref_cfg)
        ref_cfg = c;
      else if (c != *ref_cfg)
        std::cerr << "warning: " << run.string() << " was run with a different configuration\n";
    }
    std::ifstream ct(run / "calibration.tsv");
    std::string line;
    std::getline(ct, line);
    for (std::size_t b = 0; std::getline(ct, line); ++b) {
      std::stringstream ls(line);
      std::size_t idx, count;
      double lo, hi, acc, conf;
      ls >> idx >> lo >> hi >> count >> acc >> conf;
      if (cal.size() <= b) cal.push_back({lo, hi, 0, 0.0, 0.0});
      cal[b].count += count;
      cal[b].accuracy += acc * static_cast<double>(count);
      cal[b].confidence += conf * static_cast<double>(count);
    }
  }
  fs::create_directories(out);
  nlohmann::json summary;
  std::ofstream tsv(out / "summary.tsv"), md(out / "summary.md");
  tsv << "metric\tmean\tstd\truns\n";
  md << "| metric | mean | std | runs |\n|---|---|---|---|\n";
  for (auto& [k, v] : scalars) {
    double mean = 0.0, var = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    for (double x : v) var += (x - mean) * (x - mean);
    double sd = std::sqrt(var / static_cast<double>(v.size()));
    summary[k] = {{"mean", mean}, {"std", sd}, {"runs", v.size()}};
    tsv << k << '\t' << ::npcl::detail::num(mean) << '\t' << ::npcl::detail::num(sd) << '\t' << v.size() << '\n';
    md << "| " << k << " | " << mean << " | " << sd << " | " << v.size() << " |\n";
  }

  const std::size_t t = matrices.front().tasks();
  std::ofstream heat(out / "heatmap.csv");
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      if (j > 0) heat << ',';
      if (j > i) continue;
      double s = 0.0;
      std::size_t n = 0;
      for (auto& m : matrices)
        if (m.tasks() == t) {
          s += m.acc(i, j);
          ++n;
        }
      heat << ::npcl::detail::num(s / static_cast<double>(n));
    }
    heat << '\n';
  }
  std::ofstream bw(out / "bwt.csv");
  bw << "run,bwt_acc,bwt_unc\n";
  for (std::size_t i = 0; i < matrices.size(); ++i)
    if (matrices[i].tasks() >= 2)
      bw << runs[i].filename().string() << ',' << ::npcl::detail::num(bwt(matrices[i], Channel::acc)) << ','
         << ::npcl::detail::num(bwt(matrices[i], Channel::unc)) << '\n';
  std::ofstream cc(out / "calibration.csv");
  cc << "lo,hi,count,accuracy,confidence\n";
  for (auto& b : cal) {
    double n = static_cast<double>(b.count);
    cc << ::npcl::detail::num(b.lo) << ',' << ::npcl::detail::num(b.hi) << ',' << b.count << ','
       << (b.count ? ::npcl::detail::num(b.accuracy / n) : "") << ','
       << (b.count ? ::npcl::detail::num(b.confidence / n) : "") << '\n';
  }
  return summary;
}

/// Parses arguments and dispatches; returns the process exit code.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"Neural-process continual learning experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "runs/latest", variant, mode, context_sizes, ablate, run_dir;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::size_t export_attention = 0;
  std::vector<std::string> report_runs;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--set", overrides, "override key=value (repeatable)");
    sub->add_option("--seed", seed, "run seed");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--variant", variant, "npcl, st_npcl, np or anp");
    sub->add_option("--mode", mode, "inference mode: uqm or naive");
  };
  auto* train = app.add_subcommand("train", "train on a task stream");
  common(train);
  auto* eval = app.add_subcommand("eval", "evaluate a finished run");
  common(eval);
  eval->add_option("--run", run_dir, "run directory produced by train")->required();
  eval->add_option("--context-size", context_sizes, "buffer subsample size(s), comma separated");
  eval->add_option("--export-attention", export_attention, "export attention weights for this many targets");
  auto* abl = app.add_subcommand("ablate", "run an ablation table");
  common(abl);
  abl->add_option("--ablate", ablate, "regularizers, mc_samples, variants, noisy_prior or fewshot")->required();
  auto* rep = app.add_subcommand("report", "aggregate run directories");
  rep->add_option("runs", report_runs, "run directories")->required();
  rep->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  auto resolve = [&](const RunConfig& start) {
    RunConfig c = config_path.empty() ? start : load_config(config_path);
    c = apply_overrides(c, overrides);
    if (seed) c.seed = *seed;
    if (!variant.empty()) c.model.variant = parse_variant(variant);
    if (!mode.empty()) c.eval.mode = parse_mode(mode);
    return c;
  };

  try {
    if (*train) {
      auto m = cmd_train(resolve(RunConfig::desk()), out_dir);
      std::cout << "final average accuracy " << m["final_average_accuracy"].get<double>() << "\n";
    } else if (*eval) {
      auto base = from_json(detail::read_json(fs::path(run_dir) / "config.json"));
      EvalOptions opt;
      if (!context_sizes.empty()) opt.context_sizes = detail::parse_sizes(context_sizes);
      opt.export_attention = export_attention;
      auto out = out_dir == "runs/latest" ? fs::path(run_dir) / ("eval_" + to_string(resolve(base).eval.mode))
                                          : fs::path(out_dir);
      auto m = cmd_eval(run_dir, resolve(base), opt, out);
      for (auto& r : m["rows"])
        std::cout << "context " << r["context_size"] << " accuracy " << r["accuracy"] << "\n";
    } else if (*abl) {
      cmd_ablate(resolve(RunConfig::desk()), ablate, out_dir);
    } else if (*rep) {
      std::vector<fs::path> runs(report_runs.begin(), report_runs.end());
      cmd_report(runs, out_dir);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const MissingFile& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericError& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return kNumericAbort;
  } catch (const NoContextError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissingContext;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}

}  // namespace npcl::cli
