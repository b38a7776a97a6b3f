#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dplx/config.hpp"
#include "dplx/evaluation.hpp"
#include "dplx/selftest.hpp"
#include "dplx/training.hpp"

namespace dplx::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return "usage";
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const DataError*>(&e)) return "data";
  if (dynamic_cast<const FormatError*>(&e)) return "format";
  if (dynamic_cast<const CheckpointError*>(&e)) return "checkpoint";
  if (dynamic_cast<const DimensionError*>(&e)) return "dimension";
  if (dynamic_cast<const TrainingDiverged*>(&e)) return "diverged";
  if (dynamic_cast<const InfeasibleAlignment*>(&e)) return "infeasible";
  if (dynamic_cast<const StepError*>(&e)) return "step";
  return "runtime";
}

inline void emit(std::ostream& os, const ojson& j) { os << j.dump() << std::endl; }

inline void write_json(const std::string& path, const ojson& j) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write '" + path + "'");
  os << j.dump(2) << '\n';
}

/// Settings shared by the subcommands that build a RunConfig.
struct Common {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  std::string data_path;
  std::uint64_t seed = 0;
  bool seed_given = false;

  RunConfig resolve() const {
    RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::from_ini(config_path);
    for (auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!data_path.empty()) cfg.data_path = data_path;
    if (seed_given) cfg.set("run.seed", std::to_string(seed));
    cfg.resolve_seed();
    return cfg;
  }
};

inline std::vector<ParallelPair> load_pairs(const RunConfig& cfg) {
  if (cfg.data_path.empty()) return generate_corpus(cfg.data);
  auto pairs = read_corpus(cfg.data_path);
  for (auto& p : pairs) {
    for (const auto* side : {&p.src, &p.tgt}) {
      if (side->empty() || side->size() > cfg.data.max_len)
        throw DataError("corpus pair length outside [1, data.max_len = " + std::to_string(cfg.data.max_len) + "]");
      for (int u : *side)
        if (u < 0 || u >= cfg.data.vocab)
          throw DataError("corpus unit " + std::to_string(u) + " outside data.vocab = " + std::to_string(cfg.data.vocab));
    }
  }
  return pairs;
}

template <class S>
DuplexModel<S> fresh_model(const RunConfig& cfg) {
  Rng rng(RngStreams::derive_seed(cfg.seed, "init"));
  return DuplexModel<S>(cfg.resolved_model(), rng);
}

/// A checkpoint directory carries its own resolved config next to the tensors.
inline RunConfig checkpoint_config(const std::string& dir) {
  const auto path = fs::path(dir) / "config.ini";
  if (!fs::exists(path)) throw CheckpointError("no config.ini in checkpoint '" + dir + "'");
  auto cfg = RunConfig::from_ini(path.string());
  cfg.seed_set = true;
  return cfg;
}

template <class S>
DuplexModel<S> load_model(const std::string& dir, const RunConfig& cfg) {
  auto m = fresh_model<S>(cfg);
  m.load_state(load_tensors<S>((fs::path(dir) / "model.dplx").string()));
  return m;
}

// ---------------------------------------------------------------------------
// subcommands

struct GenDataOpts {
  Common common;
  std::string out;
};

inline int gen_data(const GenDataOpts& o) {
  const auto cfg = o.common.resolve();
  auto spec = cfg.data;
  const auto pairs = generate_corpus(spec);
  write_corpus(o.out, pairs);
  const auto splits = split_by_hash(pairs);
  emit(std::cout, ojson{{"pairs", pairs.size()},
                        {"train", splits.train.size()},
                        {"dev", splits.dev.size()},
                        {"test", splits.test.size()},
                        {"difficulty", to_string(spec.difficulty)},
                        {"mapping_violations", count_mapping_violations(pairs, spec.difficulty, spec.vocab, spec.shift)},
                        {"path", o.out}});
  return 0;
}

struct TrainOpts {
  Common common;
  std::string out_dir = "run";
  std::string stage = "all";
  std::string resume;
};

/// Column order of metrics.csv; absent values are left empty.
inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols = {
      "kind",    "step",  "stage", "loss",  "ctc_fwd", "ctc_rev", "mse_fwd", "mse_rev", "fba_fwd",
      "fba_rev", "cc_y",  "cc_x",  "ddm",   "ddm_x",   "ddm_y",   "lr",      "grad_norm", "wallclock",
      "acc_fwd", "acc_rev", "heldout_composite"};
  return cols;
}

template <class S>
int train(const TrainOpts& o) {
  auto cfg = o.common.resolve();
  std::vector<int> stages;
  if (o.stage == "all")
    stages = {1, 2, 3};
  else if (o.stage == "1" || o.stage == "2" || o.stage == "3")
    stages = {o.stage[0] - '0'};
  else
    throw UsageError("--stage must be 1, 2, 3, or all");

  const auto splits = split_by_hash(load_pairs(cfg));
  auto model = fresh_model<S>(cfg);
  Trainer<S> trainer(model, cfg.resolved_train(), splits, cfg.hash());
  if (!o.resume.empty()) trainer.load_checkpoint(o.resume);

  fs::create_directories(o.out_dir);
  const auto out = fs::path(o.out_dir);
  cfg.save((out / "config.ini").string());

  const auto mode = o.resume.empty() ? std::ios::trunc : std::ios::app;
  std::ofstream jsonl(out / "metrics.jsonl", std::ios::out | mode);
  const bool fresh_csv = o.resume.empty() || !fs::exists(out / "metrics.csv");
  std::ofstream csv(out / "metrics.csv", std::ios::out | mode);
  if (!jsonl || !csv) throw DataError("cannot open metrics files in '" + o.out_dir + "'");
  if (fresh_csv) {
    for (std::size_t i = 0; i < csv_columns().size(); ++i) csv << (i ? "," : "") << csv_columns()[i];
    csv << '\n';
  }
  trainer.on_metrics = [&](const ojson& j) {
    jsonl << j.dump() << '\n';
    jsonl.flush();
    for (std::size_t i = 0; i < csv_columns().size(); ++i) {
      if (i) csv << ',';
      auto it = j.find(csv_columns()[i]);
      if (it == j.end()) continue;
      if (it->is_string())
        csv << it->get<std::string>();
      else
        csv << it->dump();
    }
    csv << '\n';
    csv.flush();
  };
  auto checkpoint = [&](const std::string& tag) {
    trainer.save_checkpoint(out / tag);
    cfg.save((out / tag / "config.ini").string());
  };
  if (cfg.train.save_checkpoints) trainer.on_checkpoint = checkpoint;

  for (int s : stages) trainer.run_stage(s);
  checkpoint("final");

  const auto test = splits.test.empty() ? splits.dev : splits.test;
  ojson summary{{"out_dir", o.out_dir},
                {"steps", trainer.global_step()},
                {"stage_steps", {trainer.stage_done(1), trainer.stage_done(2), trainer.stage_done(3)}},
                {"checkpoint", (out / "final").string()}};
  if (!test.empty()) {
    summary["acc_fwd"] = heldout_accuracy(model, test, Direction::forward);
    summary["acc_rev"] = heldout_accuracy(model, test, Direction::reverse);
  }
  emit(std::cout, summary);
  return 0;
}

struct EvalOpts {
  std::string checkpoint;
  std::string data_path;
  std::string direction = "both";
  std::size_t beam = 10;
  std::string report;
};

template <class S>
int eval(const EvalOpts& o, RunConfig cfg) {
  if (o.direction != "fwd" && o.direction != "rev" && o.direction != "both")
    throw UsageError("--direction must be fwd, rev, or both");
  if (!o.data_path.empty()) cfg.data_path = o.data_path;
  auto model = load_model<S>(o.checkpoint, cfg);
  const auto splits = split_by_hash(load_pairs(cfg));
  const auto& test = splits.test.empty() ? splits.dev : splits.test;
  if (test.empty()) throw DataError("no held-out pairs to evaluate");

  ojson report{{"checkpoint", o.checkpoint}, {"pairs", test.size()}, {"beam", o.beam}};
  for (auto dir : {Direction::forward, Direction::reverse}) {
    if (o.direction != "both" && o.direction != to_string(dir)) continue;
    const auto beam = evaluate_direction(model, test, dir, o.beam);
    const auto greedy = evaluate_direction(model, test, dir, 1);
    report[to_string(dir)] = {{"bleu", beam.bleu},
                              {"exact_match", beam.exact_match},
                              {"accuracy", beam.accuracy},
                              {"greedy_bleu", greedy.bleu},
                              {"greedy_accuracy", greedy.accuracy}};
  }
  for (auto order : {RoundTrip::xyx, RoundTrip::yxy}) {
    const auto rt = roundtrip_eval(model, test, order);
    report[order == RoundTrip::xyx ? "roundtrip_xyx" : "roundtrip_yxy"] = {
        {"representation_error", rt.representation_error}, {"exact_match", rt.exact_match}, {"bleu", rt.bleu}};
  }
  if (!o.report.empty()) write_json(o.report, report);
  emit(std::cout, report);
  return 0;
}

struct RoundtripOpts {
  std::string checkpoint;
  std::string data_path;
  std::string order = "xyx";
  std::string report;
};

template <class S>
int roundtrip(const RoundtripOpts& o, RunConfig cfg) {
  const auto order = parse_roundtrip(o.order);
  if (!o.data_path.empty()) cfg.data_path = o.data_path;
  auto model = load_model<S>(o.checkpoint, cfg);
  const auto splits = split_by_hash(load_pairs(cfg));
  const auto& test = splits.test.empty() ? splits.dev : splits.test;
  const auto rt = roundtrip_eval(model, test, order);
  ojson report{{"order", o.order},
               {"pairs", test.size()},
               {"representation_error", rt.representation_error},
               {"exact_match", rt.exact_match},
               {"bleu", rt.bleu}};
  if (!o.report.empty()) write_json(o.report, report);
  emit(std::cout, report);
  return 0;
}

struct SampleOpts {
  std::string checkpoint;
  std::string data_path;
  std::string direction = "fwd";
  std::size_t count = 4;
  std::uint64_t seed = 0;
  std::size_t steps = 0;  // 0 keeps the checkpoint's T
  std::string schedule;   // empty keeps the checkpoint's kind
};

/// Ancestral sampling of the target-end representation conditioned on the
/// clean source-end encoding, decoded to units by nearest encoder row.
/// One JSON line per sample, then a summary line.
template <class S>
int sample(const SampleOpts& o, RunConfig cfg, std::ostream& out = std::cout) {
  if (o.direction != "fwd" && o.direction != "rev") throw UsageError("--direction must be fwd or rev");
  if (!o.data_path.empty()) cfg.data_path = o.data_path;
  if (o.steps) cfg.train.diffusion.steps = o.steps;
  if (!o.schedule.empty()) cfg.train.diffusion.kind = parse_schedule_kind(o.schedule);
  auto model = load_model<S>(o.checkpoint, cfg);
  const auto splits = split_by_hash(load_pairs(cfg));
  const auto& test = splits.test.empty() ? splits.dev : splits.test;
  const bool fwd = o.direction == "fwd";
  const auto sched = fwd ? cfg.train.diffusion.schedule_y() : cfg.train.diffusion.schedule_x();
  Rng rng(RngStreams::derive_seed(o.seed ? o.seed : cfg.seed, "sample"));
  RunContext<S> eval;
  const auto dir = fwd ? Direction::forward : Direction::reverse;
  double acc = 0;
  const std::size_t n = std::min(o.count, test.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& src = fwd ? test[i].src : test[i].tgt;
    const auto& ref = fwd ? test[i].tgt : test[i].src;
    Tensor<S> memory;
    {
      NoGradGuard ng;
      memory = model.embed(src, fwd ? Direction::forward : Direction::reverse);
    }
    const auto rep = ancestral_sample(memory, ref.size(), model.width(), model.predictor(dir, eval), sched, rng);
    const auto units = nearest_units(model, rep, fwd ? Direction::reverse : Direction::forward);
    const double a = token_accuracy(units, ref);
    acc += a;
    std::vector<std::vector<double>> rows(ref.size(), std::vector<double>(model.width()));
    for (std::size_t r = 0; r < ref.size(); ++r)
      for (std::size_t c = 0; c < model.width(); ++c) rows[r][c] = static_cast<double>(rep[r * model.width() + c]);
    emit(out, ojson{{"index", i},
                    {"source", src},
                    {"reference", ref},
                    {"units", units},
                    {"accuracy", a},
                    {"representation", rows}});
  }
  emit(out, ojson{{"direction", o.direction},
                  {"schedule", to_string(cfg.train.diffusion.kind)},
                  {"steps", sched.steps()},
                  {"count", n},
                  {"mean_accuracy", n ? acc / static_cast<double>(n) : 0.0}});
  return 0;
}

struct InspectOpts {
  Common common;
  std::string checkpoint;
  bool chain = false;
  std::size_t layers = 0;
  std::string preset;
};

template <class S>
int inspect(const InspectOpts& o) {
  RunConfig cfg = o.checkpoint.empty() ? o.common.resolve() : checkpoint_config(o.checkpoint);
  if (o.preset == "paper-large")
    apply_paper_preset(cfg);
  else if (!o.preset.empty() && o.preset != "desk")
    throw UsageError("--preset must be desk or paper-large");
  if (o.layers) cfg.model.layers = o.layers;
  const auto mc = cfg.resolved_model();
  mc.validate();

  ojson j{{"layers", mc.layers},
          {"width", mc.width},
          {"heads", mc.heads},
          {"kernel", mc.kernel},
          {"parameter_count", mc.parameter_count()}};
  if (o.preset == "paper-large") {
    emit(std::cout, j);
    return 0;
  }
  auto model = o.checkpoint.empty() ? fresh_model<S>(cfg) : load_model<S>(o.checkpoint, cfg);
  NoGradGuard ng;
  Rng rng(RngStreams::derive_seed(cfg.seed, "inspect"));
  const auto x = SplitState<S>::split(randn<S>({2 * mc.max_units, mc.width}, rng));
  if (o.chain) {
    std::string fwd, rev;
    RunContext<S> a, b;
    a.trace = &fwd;
    b.trace = &rev;
    model.run_stack(x, Direction::forward, a);
    model.run_stack(x, Direction::reverse, b);
    j["chain_forward"] = fwd;
    j["chain_reverse"] = rev;
    j["palindrome"] = fwd == std::string(rev.rbegin(), rev.rend());
  }
  RunContext<S> eval;
  ojson per_layer = ojson::array();
  for (std::size_t l = 0; l < model.stack.layers.size(); ++l) {
    auto& layer = model.stack.layers[l];
    const auto back = block_reverse(block_forward(x, layer, eval), layer, eval).merge();
    const auto in = x.merge();
    double err = 0;
    for (std::size_t i = 0; i < in.size(); ++i)
      err = std::max(err, std::abs(static_cast<double>(back[i]) - static_cast<double>(in[i])));
    per_layer.push_back(err);
  }
  j["layer_roundtrip_error"] = per_layer;
  emit(std::cout, j);
  return 0;
}

inline int run_selftest(std::size_t draws) {
  const auto checks = selftest::run_all(draws);
  bool all = true;
  std::printf("%-18s %-6s %s\n", "suite", "result", "detail");
  for (auto& c : checks) {
    std::printf("%-18s %-6s %s\n", c.name.c_str(), c.passed ? "PASS" : "FAIL", c.detail.c_str());
    all = all && c.passed;
  }
  return all ? 0 : 1;
}

// ---------------------------------------------------------------------------

template <class F>
int with_precision(const std::string& precision, F&& f) {
  if (precision == "double") return f(double{});
  return f(float{});
}

/// Parses argv and runs one subcommand. Usage errors return 2; failures print
/// a JSON error object on stderr and return 1.
inline int dispatch(int argc, const char* const* argv) {
  CLI::App app{"Duplex reversible translation toolkit"};
  app.require_subcommand(1);

  auto add_common = [](CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config_path, "INI config file")->check(CLI::ExistingFile);
    sub->add_option("--set", c.overrides, "override a config key (section.key=value)");
    sub->add_option_function<std::uint64_t>(
        "--seed", [&c](std::uint64_t s) { c.seed = s, c.seed_given = true; }, "master seed");
  };

  GenDataOpts gd;
  auto* s_gen = app.add_subcommand("gen-data", "generate a synthetic parallel unit corpus");
  add_common(s_gen, gd.common);
  s_gen->add_option("--out", gd.out, "output JSONL path")->required();
  std::size_t pairs = 0, max_len = 0;
  int vocab = 0;
  std::string difficulty;
  s_gen->add_option("--pairs", pairs);
  s_gen->add_option("--vocab", vocab);
  s_gen->add_option("--max-len", max_len);
  s_gen->add_option("--difficulty", difficulty);

  TrainOpts tr;
  auto* s_train = app.add_subcommand("train", "run the staged training procedure");
  add_common(s_train, tr.common);
  s_train->add_option("--data", tr.common.data_path, "JSONL corpus (generated from [data] when omitted)");
  s_train->add_option("--out-dir", tr.out_dir);
  s_train->add_option("--stage", tr.stage)->check(CLI::IsMember({"1", "2", "3", "all"}));
  s_train->add_option("--resume", tr.resume, "checkpoint directory to continue from");

  EvalOpts ev;
  auto* s_eval = app.add_subcommand("eval", "decode held-out pairs and score them");
  s_eval->add_option("--checkpoint", ev.checkpoint)->required();
  s_eval->add_option("--data", ev.data_path);
  s_eval->add_option("--direction", ev.direction)->check(CLI::IsMember({"fwd", "rev", "both"}));
  s_eval->add_option("--beam", ev.beam)->check(CLI::PositiveNumber);
  s_eval->add_option("--report", ev.report);

  SampleOpts sp;
  auto* s_sample = app.add_subcommand("sample", "ancestral diffusion sampling conditioned on held-out sources");
  s_sample->add_option("--checkpoint", sp.checkpoint)->required();
  s_sample->add_option("--data", sp.data_path);
  s_sample->add_option("--direction", sp.direction)->check(CLI::IsMember({"fwd", "rev"}));
  s_sample->add_option("--count", sp.count);
  s_sample->add_option("--seed", sp.seed);
  s_sample->add_option("--steps", sp.steps, "diffusion steps T (default: the checkpoint's)")->check(CLI::PositiveNumber);
  s_sample->add_option("--schedule", sp.schedule)->check(CLI::IsMember({"linear", "scaled_linear"}));

  RoundtripOpts rt;
  auto* s_rt = app.add_subcommand("roundtrip", "translate there and back");
  s_rt->add_option("--checkpoint", rt.checkpoint)->required();
  s_rt->add_option("--data", rt.data_path);
  s_rt->add_option("--order", rt.order)->check(CLI::IsMember({"xyx", "yxy"}));
  s_rt->add_option("--report", rt.report);

  InspectOpts in;
  auto* s_inspect = app.add_subcommand("inspect", "print structure, parameter count and layer round-trip errors");
  add_common(s_inspect, in.common);
  s_inspect->add_option("--checkpoint", in.checkpoint);
  s_inspect->add_flag("--chain", in.chain, "print the sub-module trace of both directions");
  s_inspect->add_option("--layers", in.layers);
  s_inspect->add_option("--preset", in.preset)->check(CLI::IsMember({"desk", "paper-large"}));

  std::size_t draws = 100;
  auto* s_self = app.add_subcommand("selftest", "invertibility, schedule identity and CTC oracle suites");
  s_self->add_option("--draws", draws, "invertibility draws");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit(std::cerr, ojson{{"error", "usage"}, {"message", e.what()}});
    std::cerr << app.help();
    return 2;
  }

  try {
    if (s_gen->parsed()) {
      if (pairs) gd.common.overrides.push_back("data.pairs=" + std::to_string(pairs));
      if (vocab) gd.common.overrides.push_back("data.vocab=" + std::to_string(vocab));
      if (max_len) gd.common.overrides.push_back("data.max_len=" + std::to_string(max_len));
      if (!difficulty.empty()) gd.common.overrides.push_back("data.difficulty=" + difficulty);
      if (gd.common.seed_given) gd.common.overrides.push_back("data.seed=" + std::to_string(gd.common.seed));
      return gen_data(gd);
    }
    if (s_train->parsed()) {
      const auto precision = tr.common.resolve().precision;
      return with_precision(precision, [&](auto s) { return train<decltype(s)>(tr); });
    }
    if (s_eval->parsed()) {
      auto cfg = checkpoint_config(ev.checkpoint);
      return with_precision(cfg.precision, [&](auto s) { return eval<decltype(s)>(ev, cfg); });
    }
    if (s_sample->parsed()) {
      auto cfg = checkpoint_config(sp.checkpoint);
      return with_precision(cfg.precision, [&](auto s) { return sample<decltype(s)>(sp, cfg); });
    }
    if (s_rt->parsed()) {
      auto cfg = checkpoint_config(rt.checkpoint);
      return with_precision(cfg.precision, [&](auto s) { return roundtrip<decltype(s)>(rt, cfg); });
    }
    if (s_inspect->parsed()) return inspect<double>(in);
    if (s_self->parsed()) return run_selftest(draws);
  } catch (const UsageError& e) {
    emit(std::cerr, ojson{{"error", "usage"}, {"message", e.what()}});
    return 2;
  } catch (const std::exception& e) {
    emit(std::cerr, ojson{{"error", error_kind(e)}, {"message", e.what()}});
    return 1;
  }
  return 2;
}

}  // namespace dplx::cli
