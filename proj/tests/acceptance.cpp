// Acceptance gate: one PASS/FAIL line per criterion.
//
//   acceptance            run every criterion
//   acceptance 1 3 9      run a subset
//
// Exit status is 0 only when every selected criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dplx/cli.hpp"
#include "dplx/composite.hpp"
#include "dplx/selftest.hpp"
#include "gradcheck.hpp"

using namespace dplx;
using namespace dplx::testing;
namespace fs = std::filesystem;

namespace tol {
constexpr double kInvertDouble = 1e-8;
constexpr double kInvertSingle = 1e-4;
constexpr double kInvertSeconds = 60;
constexpr std::size_t kInvertDraws = 100;
constexpr double kCtcOracle = 1e-10;
constexpr double kGrad = 1e-5;
constexpr double kGradSeconds = 300;
constexpr double kScheduleIdentity = 1e-12;
constexpr double kTrajectory = 1e-6;
constexpr double kMonteCarlo = 0.02;
constexpr double kStage1Accuracy = 0.90;
constexpr double kDdmReduction = 0.50;
constexpr double kStage3Drop = 0.01;
constexpr double kCycle = 1e-4;
constexpr double kCopyExactMatch = 0.95;
}  // namespace tol

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Verdict {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const Verdict& v) {
  std::printf("criterion %d %-22s %s  %s\n", id, name, v.pass ? "PASS" : "FAIL", v.detail.c_str());
  std::fflush(stdout);
  failures += !v.pass;
}

// ---------------------------------------------------------------------------
// 1-3: structure

Verdict invertibility() {
  const auto t0 = Clock::now();
  const auto [d, f] = selftest::invertibility_sweep(tol::kInvertDraws);
  const double secs = seconds_since(t0);
  return {d <= tol::kInvertDouble && f <= tol::kInvertSingle && secs < tol::kInvertSeconds,
          fmt("%zu draws: double %.2e (<= %.0e), single %.2e (<= %.0e), %.1f s (< %.0f)", tol::kInvertDraws, d,
              tol::kInvertDouble, f, tol::kInvertSingle, secs, tol::kInvertSeconds)};
}

Verdict palindrome() {
  bool ok = true;
  std::string bad;
  for (std::size_t L : {2, 4, 6, 8, 10, 12, 16}) {
    const auto [f, r] = selftest::chain_traces(L);
    const bool good = f == std::string(r.rbegin(), r.rend()) && f.size() == 4 * L &&
                      f.find_first_not_of("fmc") == std::string::npos;
    if (!good) bad += " L=" + std::to_string(L);
    ok = ok && good;
  }
  const auto [f4, r4] = selftest::chain_traces(4);
  return {ok, "L in {2,4,6,8,10,12,16}; L=4 forward " + f4 + (bad.empty() ? "" : "; mismatched" + bad)};
}

Verdict ctc_oracle() {
  const double gap = selftest::ctc_oracle_gap(6, 3, 3);
  const Tensor<double> two({1, 2}, {std::log(0.5), std::log(0.5)});
  const UnitSequence y0{0};
  const double ln2 = ctc_loss(two, std::span<const int>(y0), 1, 1).item();
  const Tensor<double> four({2, 2}, std::vector<double>(4, std::log(0.5)));
  const double l75 = ctc_loss(four, std::span<const int>(y0), 2, 1).item();
  // "exact to print precision": the default six significant digits
  const bool hand = fmt("%g", ln2) == fmt("%g", std::log(2.0)) && fmt("%g", l75) == fmt("%g", -std::log(0.75));
  return {gap <= tol::kCtcOracle && hand,
          fmt("grid T<=6 |V|<=3 |y|<=3 max gap %.2e (<= %.0e); ln2 %s, -ln0.75 %s", gap, tol::kCtcOracle,
              fmt("%g", ln2).c_str(), fmt("%g", l75).c_str())};
}

// ---------------------------------------------------------------------------
// 4: gradients

DuplexModel<double> tiny_model(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.width = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.kernel = 3;
  cfg.vocab = 5;
  cfg.max_units = 8;
  Rng rng(seed);
  return DuplexModel<double>(cfg, rng);
}

std::vector<std::vector<double>> bn_buffers(DuplexModel<double>& m) {
  std::vector<std::vector<double>> out;
  ParamVisitor<double> v{[](const std::string&, T&) {},
                         [&](const std::string&, std::vector<double>& b, std::size_t) { out.push_back(b); }};
  m.visit(v);
  return out;
}

void restore_bn_buffers(DuplexModel<double>& m, const std::vector<std::vector<double>>& saved) {
  std::size_t i = 0;
  ParamVisitor<double> v{[](const std::string&, T&) {},
                         [&](const std::string&, std::vector<double>& b, std::size_t) { b = saved[i++]; }};
  m.visit(v);
}

Verdict gradients() {
  const auto t0 = Clock::now();
  const RunContext<double> ev{};
  RunContext<double> tr;
  tr.training = true;
  std::vector<std::pair<std::string, std::function<double()>>> checks;
  auto check = [&](std::string name, std::function<double()> f) { checks.emplace_back(std::move(name), std::move(f)); };

  check("add", [] { return gradcheck([](auto& v) { return project(add(v[0], v[1])); }, {rnd({2, 3}, 1), rnd({2, 3}, 2)}); });
  check("sub", [] { return gradcheck([](auto& v) { return project(sub(v[0], v[1])); }, {rnd({2, 3}, 3), rnd({2, 3}, 4)}); });
  check("mul", [] { return gradcheck([](auto& v) { return project(mul(v[0], v[1])); }, {rnd({2, 3}, 5), rnd({2, 3}, 6)}); });
  check("scale", [] { return gradcheck([](auto& v) { return project(scale(v[0], -1.7)); }, {rnd({2, 3}, 7)}); });
  check("add_rowvec", [] { return gradcheck([](auto& v) { return project(add_rowvec(v[0], v[1])); }, {rnd({2, 3}, 8), rnd({3}, 9)}); });
  check("mul_rowvec", [] { return gradcheck([](auto& v) { return project(mul_rowvec(v[0], v[1])); }, {rnd({2, 3}, 10), rnd({3}, 11)}); });
  check("linear", [] {
    return gradcheck([](auto& v) { return project(linear(v[0], v[1], v[2])); }, {rnd({2, 3}, 12), rnd({3, 4}, 13), rnd({4}, 14)});
  });
  check("matmul", [] { return gradcheck([](auto& v) { return project(matmul(v[0], v[1])); }, {rnd({4, 5}, 1), rnd({5, 2}, 2)}); });
  check("matmul_nt", [] { return gradcheck([](auto& v) { return project(matmul_nt(v[0], v[1])); }, {rnd({4, 5}, 3), rnd({3, 5}, 4)}); });
  check("sigmoid", [] { return gradcheck([](auto& v) { return project(sigmoid(v[0])); }, {rnd({4, 3}, 2)}); });
  check("silu", [] { return gradcheck([](auto& v) { return project(silu(v[0])); }, {rnd({4, 3}, 1)}); });
  check("glu", [] { return gradcheck([](auto& v) { return project(glu(v[0])); }, {rnd({4, 6}, 3)}); });
  check("layer_norm", [] {
    return gradcheck([](auto& v) { return project(layer_norm(v[0], v[1], v[2])); }, {rnd({3, 6}, 1), rnd({6}, 2), rnd({6}, 3)});
  });
  check("batch_norm/train", [] {
    BatchNormStats<double> st(3);
    return gradcheck([&](auto& v) { return project(batch_norm(v[0], v[1], v[2], st, true)); },
                     {rnd({5, 3}, 1), rnd({3}, 2), rnd({3}, 3)});
  });
  check("batch_norm/eval", [] {
    BatchNormStats<double> st(3);
    st.var = {0.5, 2.0, 1.5};
    return gradcheck([&](auto& v) { return project(batch_norm(v[0], v[1], v[2], st, false)); },
                     {rnd({5, 3}, 4), rnd({3}, 5), rnd({3}, 6)});
  });
  check("dropout", [] {
    return gradcheck(
        [](auto& v) {
          Rng rng(5);
          return project(dropout(v[0], 0.3, true, rng));
        },
        {rnd({4, 4}, 1)});
  });
  check("softmax_rows", [] { return gradcheck([](auto& v) { return project(softmax_rows(v[0])); }, {rnd({3, 4}, 1)}); });
  check("softmax_rows/masked", [] {
    static const bool mask[4] = {true, false, true, true};
    return gradcheck([](auto& v) { return project(softmax_rows(v[0], std::span<const bool>(mask, 4))); }, {rnd({3, 4}, 2)});
  });
  check("log_softmax_rows", [] { return gradcheck([](auto& v) { return project(log_softmax_rows(v[0])); }, {rnd({3, 4}, 3)}); });
  check("slice_cols", [] { return gradcheck([](auto& v) { return project(slice_cols(v[0], 1, 3)); }, {rnd({3, 4}, 1)}); });
  check("slice_rows", [] { return gradcheck([](auto& v) { return project(slice_rows(v[0], 1, 3)); }, {rnd({4, 2}, 2)}); });
  check("slice_block", [] { return gradcheck([](auto& v) { return project(slice_block(v[0], 1, 3, 0, 2)); }, {rnd({4, 3}, 3)}); });
  check("concat_cols", [] { return gradcheck([](auto& v) { return project(concat_cols(v[0], v[1])); }, {rnd({3, 2}, 4), rnd({3, 1}, 5)}); });
  check("concat_rows", [] {
    return gradcheck([](auto& v) { return project(concat_rows(std::vector<T>{v[0], v[1]})); }, {rnd({2, 3}, 6), rnd({1, 3}, 7)});
  });
  check("transpose", [] { return gradcheck([](auto& v) { return project(transpose(v[0])); }, {rnd({2, 3}, 8)}); });
  check("interleave_rows", [] {
    return gradcheck([](auto& v) { return project(interleave_rows(v[0], v[1])); }, {rnd({2, 3}, 9), rnd({2, 3}, 10)});
  });
  check("gather_rows", [] {
    static const int ids[4] = {2, 0, 2, 1};
    return gradcheck([](auto& v) { return project(gather_rows(v[0], std::span<const int>(ids, 4))); }, {rnd({3, 2}, 11)});
  });
  check("relative_bias", [] { return gradcheck([](auto& v) { return project(relative_bias(v[0], 1, 3, 5, 3)); }, {rnd({2, 5}, 12)}); });
  check("conv1d_depthwise", [] {
    return gradcheck([](auto& v) { return project(conv1d_depthwise(v[0], v[1])); }, {rnd({6, 3}, 1), rnd({3, 5}, 2)});
  });
  check("conv1d_depthwise/packed", [] {
    const std::vector<std::size_t> lens{2, 4};
    return gradcheck([&](auto& v) { return project(conv1d_depthwise(v[0], v[1], lens)); }, {rnd({6, 3}, 3), rnd({3, 3}, 4)});
  });
  check("conv1d_pointwise", [] {
    return gradcheck([](auto& v) { return project(conv1d_pointwise(v[0], v[1])); }, {rnd({5, 3}, 5), rnd({3, 4}, 6)});
  });
  check("sum/mean", [] { return gradcheck([](auto& v) { return add(sum(v[0]), mean(v[1])); }, {rnd({3, 3}, 1), rnd({2, 2}, 2)}); });
  check("weighted_sum", [] {
    return gradcheck([](auto& v) { return weighted_sum<double>({sum(v[0]), mean(v[1])}, {0.3, -2.0}); },
                     {rnd({2, 2}, 6), rnd({2, 2}, 7)});
  });
  check("mse", [] { return gradcheck([](auto& v) { return mse(v[0], v[1]); }, {rnd({3, 3}, 2), rnd({3, 3}, 3)}); });
  check("cosine_similarity", [] {
    return gradcheck([](auto& v) { return cosine_similarity(v[0], v[1]); }, {rnd({3, 3}, 4), rnd({3, 3}, 5)});
  });

  check("ffn", [&] {
    Rng rng(7);
    FfnParams<double> p(4, 4, 0.0, rng);
    return std::max(gradcheck([&](auto& v) { return project(ffn(v[0], p, ev)); }, {rnd({3, 4}, 8)}),
                    gradcheck(
                        [&](auto& v) {
                          p.w1.w = v[0];
                          p.ln.gain = v[1];
                          return project(ffn(rnd({3, 4}, 9, 1.0, false), p, ev));
                        },
                        {p.w1.w, p.ln.gain}));
  });
  check("mhsa/self", [&] {
    Rng rng(10);
    MhsaParams<double> p(4, 2, 6, 0.0, rng);
    return gradcheck(
        [&](auto& v) {
          p.rel = v[1];
          return project(mhsa(v[0], v[0], p, ev));
        },
        {rnd({5, 4}, 11), p.rel});
  });
  check("mhsa/cross", [&] {
    Rng rng(10);
    auto p = MhsaParams<double>::cross(4, 6, 2, 0.0, rng);
    return gradcheck([&](auto& v) { return project(mhsa(v[0], v[1], p, ev)); }, {rnd({3, 4}, 12), rnd({5, 6}, 13)});
  });
  check("cnn", [&] {
    Rng rng(7);
    CnnParams<double> p(4, 3, 0.0, rng);
    return std::max(gradcheck([&](auto& v) { return project(cnn(v[0], p, tr)); }, {rnd({5, 4}, 8)}),
                    gradcheck([&](auto& v) { return project(cnn(v[0], p, ev)); }, {rnd({5, 4}, 9)}));
  });
  check("stack_forward/reverse", [&] {
    Rng rng(8);
    StackShape sh;
    sh.width = 8;
    sh.layers = 2;
    sh.heads = 2;
    sh.kernel = 3;
    sh.max_len = 16;
    DuplexStack<double> st(sh, rng);
    return std::max(
        gradcheck([&](auto& v) { return project(stack_forward(SplitState<double>::split(v[0]), st, ev).merge()); },
                  {rnd({4, 8}, 9)}),
        gradcheck([&](auto& v) { return project(stack_reverse(SplitState<double>::split(v[0]), st, ev).merge()); },
                  {rnd({4, 8}, 10)}));
  });
  check("upsample_source", [] {
    Rng rng(3);
    Upsampler<double> up(3, rng);
    return gradcheck(
        [&](auto& v) {
          up.w0 = v[1];
          return project(upsample_source(v[0], up));
        },
        {rnd({4, 3}, 4), up.w0});
  });
  check("encode", [] {
    Rng rng(2);
    StandInEncoder<double> enc(6, 4, true, rng);
    return gradcheck([&](auto&) { return project(encode({1, 4, 1, 0}, enc)); }, {enc.table});
  });
  check("denoise", [&] {
    auto m = tiny_model(3);
    return std::max(
        gradcheck([&](auto& v) { return project(m.denoise(v[0], 4, v[1], Direction::forward, ev)); },
                  {rnd({3, 8}, 1), rnd({4, 8}, 2)}),
        gradcheck(
            [&](auto& v) {
              m.cross[0].k.w = v[0];
              m.time_proj.w = v[1];
              return project(
                  m.denoise(rnd({3, 8}, 3, 1.0, false), 9, rnd({2, 8}, 4, 1.0, false), Direction::reverse, ev));
            },
            {m.cross[0].k.w, m.time_proj.w}));
  });
  check("ctc_loss", [] {
    static const UnitSequence y{2, 0, 2};
    return gradcheck([](auto& v) { return ctc_loss(log_softmax_rows(v[0]), std::span<const int>(y), 8, 3); },
                     {rnd({8, 4}, 3)});
  });
  check("mse_loss", [] {
    const auto r = rnd({3, 4}, 2, 1.0, false);
    return gradcheck([&](auto& v) { return mse_loss(v[0], r); }, {rnd({3, 4}, 1)});
  });
  check("fba_loss", [] {
    const auto r = rnd({4, 3}, 2, 1.0, false);
    return gradcheck([&](auto& v) { return fba_loss<double>({v[0]}, {r}); }, {rnd({4, 3}, 1)});
  });
  check("cc_loss", [] {
    const auto r = rnd({4, 3}, 2, 1.0, false);
    return gradcheck(
        [&](auto& v) { return cc_loss(CcOperand<double>::dense(v[0]), CcOperand<double>::dense(r)); }, {rnd({4, 3}, 1)});
  });
  for (auto mode : {LossMode::unit, LossMode::mel})
    for (bool training : {false, true})
      check("composite_loss/" + to_string(mode) + (training ? "/train" : "/eval"), [mode, training] {
        auto m = tiny_model(9);
        Rng drop(1);
        RunContext<double> ctx{training, &drop};
        const auto buffers = bn_buffers(m);
        // fba and the dense mel targets carry no gradient by construction
        LossWeights w;
        w.w[2] = w.w[3] = 0.0;
        const std::vector<ParallelPair> b{{{1, 2, 3}, {2, 1, 3}}, {{4, 0}, {0, 4}}};
        std::vector<T> params{m.head_y.w, m.stack.layers[0].ffn_a.w1.w, m.stack.layers[1].cnn.dw, m.mel_x.w};
        if (mode == LossMode::unit) params.push_back(m.enc_x.table);
        double worst = 0;
        for (auto& p : params)
          worst = std::max(worst, gradcheck(
                                      [&](auto&) {
                                        restore_bn_buffers(m, buffers);
                                        return composite_loss(m, b, w, mode, ctx).total;
                                      },
                                      {p}));
        return worst;
      });

  double worst = 0;
  std::string worst_name, failed;
  for (auto& [name, f] : checks) {
    const double e = f();
    if (!(e <= tol::kGrad)) failed += " " + name;
    if (!(e <= worst)) worst = e, worst_name = name;
  }
  const double secs = seconds_since(t0);
  return {failed.empty() && secs < tol::kGradSeconds,
          fmt("%zu checks, worst %.2e at %s (<= %.0e), %.1f s (< %.0f)%s", checks.size(), worst, worst_name.c_str(),
              tol::kGrad, secs, tol::kGradSeconds, failed.empty() ? "" : ("; failed:" + failed).c_str())};
}

// ---------------------------------------------------------------------------
// 5: diffusion

Verdict diffusion_identities() {
  std::vector<DiffusionSchedule> presets{DiffusionSchedule::reference_preset()};
  for (auto kind : {ScheduleKind::linear, ScheduleKind::scaled_linear})
    for (std::size_t steps : {1, 50, 1000}) presets.push_back(DiffusionSchedule::build(kind, steps, 8.5e-4, 1.2e-2));
  double ident = 0;
  bool first_zero = true;
  for (auto& s : presets) {
    ident = std::max(ident, selftest::schedule_identity_error(s));
    first_zero = first_zero && s.beta_tilde(1) == 0.0;
  }

  double traj = 0;
  for (auto kind : {ScheduleKind::linear, ScheduleKind::scaled_linear})
    for (std::size_t steps : {50, 1000}) {
      const auto s = DiffusionSchedule::build(kind, steps, 8.5e-4, 1.2e-2);
      const auto x0 = rnd({6, 4}, 7, 1.0, false);
      // ε̂ = the noise that produced x_t from x0
      NoisePredictor<double> exact = [&](const T& xt, std::size_t t, const T&) {
        const double ab = s.alpha_bar(t);
        std::vector<double> e(xt.size());
        for (std::size_t i = 0; i < e.size(); ++i) e[i] = (xt[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1 - ab);
        return T(xt.shape(), e);
      };
      Rng rng(8);
      traj = std::max(traj, max_abs_diff(ancestral_sample(T::zeros({1, 4}), 6, 4, exact, s, rng), x0));
    }

  double mc = 0;
  const auto ref = DiffusionSchedule::reference_preset();
  Rng rng(3);
  constexpr std::size_t n = 100000;
  for (std::size_t t : {1, 10, 100, 500, 1000}) {
    const auto xt = q_sample(T::zeros({n}), t, randn<double>({n}, rng), ref);
    double m2 = 0;
    for (double v : xt.data()) m2 += v * v;
    mc = std::max(mc, std::abs(m2 / static_cast<double>(n) / (1 - ref.alpha_bar(t)) - 1));
  }
  return {ident <= tol::kScheduleIdentity && first_zero && traj <= tol::kTrajectory && mc <= tol::kMonteCarlo,
          fmt("identity %.2e (<= %.0e) over %zu presets, beta~_1 = 0 %s, trajectory %.2e (<= %.0e), q_sample var "
              "%.2f%% (<= %.0f%%)",
              ident, tol::kScheduleIdentity, presets.size(), first_zero ? "yes" : "no", traj, tol::kTrajectory,
              100 * mc, 100 * tol::kMonteCarlo)};
}

// ---------------------------------------------------------------------------
// 6-8: trained toy models

RunConfig toy_config(Difficulty d) {
  RunConfig c;
  c.seed = 1;
  c.seed_set = true;
  c.data.difficulty = d;
  c.data.vocab = 12;
  c.data.max_len = 24;
  c.data.pairs = 20000;
  c.data.seed = 7;
  c.train.adam.lr = 1e-3;
  c.train.k1 = 3000;
  c.train.k2 = 2000;
  c.train.k3 = 1000;
  c.train.log_interval = 0;
  c.train.eval_interval = 0;
  c.train.record_wallclock = false;
  return c;
}

struct ToyRun {
  RunConfig cfg;
  CorpusSplits splits;
  std::unique_ptr<DuplexModel<float>> model;
  std::unique_ptr<Trainer<float>> trainer;

  explicit ToyRun(RunConfig c) : cfg(std::move(c)), splits(split_by_hash(generate_corpus(cfg.data))) {
    Rng rng(RngStreams::derive_seed(cfg.seed, "init"));
    model = std::make_unique<DuplexModel<float>>(cfg.resolved_model(), rng);
    trainer = std::make_unique<Trainer<float>>(*model, cfg.resolved_train(), splits, cfg.hash());
  }

  const std::vector<ParallelPair>& test() const { return splits.test; }

  std::pair<double, double> accuracy() {
    return {heldout_accuracy(*model, test(), Direction::forward), heldout_accuracy(*model, test(), Direction::reverse)};
  }

  /// L_DDM on fixed held-out batches with fixed t and noise.
  double heldout_ddm() {
    NoGradGuard ng;
    RunContext<float> ev;
    Rng rng(4242);
    const auto sx = cfg.train.diffusion.schedule_x(), sy = cfg.train.diffusion.schedule_y();
    const auto batches = make_packed_batches(splits.dev, cfg.train.batch_tokens, 17);
    double total = 0;
    std::size_t n = 0;
    for (std::size_t b = 0; b < std::min<std::size_t>(batches.size(), 40); ++b) {
      std::vector<ParallelPair> pairs;
      for (auto i : batches[b]) pairs.push_back(splits.dev[i]);
      const auto srcs = sources(pairs), tgts = targets(pairs);
      std::vector<std::size_t> lx, ly;
      for (auto& u : srcs) lx.push_back(u.size());
      for (auto& u : tgts) ly.push_back(u.size());
      const auto x0 = model->embed_batch(srcs, Direction::forward);
      const auto y0 = model->embed_batch(tgts, Direction::reverse);
      const auto d = ddm_train_step<float>(x0, y0, sx, sy, model->predictor(Direction::reverse, ev, lx, ly),
                                           model->predictor(Direction::forward, ev, ly, lx),
                                           static_cast<float>(cfg.train.diffusion.lambda1),
                                           static_cast<float>(cfg.train.diffusion.lambda2), rng);
      total += d.loss.item();
      ++n;
    }
    return total / static_cast<double>(n);
  }
};

struct Trained {
  bool done = false;
  double acc1_fwd = 0, acc1_rev = 0, acc3_fwd = 0, acc3_rev = 0;
  double ddm_before = 0, ddm_after = 0, curve_head = 0, curve_tail = 0;
  double secs[3] = {0, 0, 0};
  std::unique_ptr<ToyRun> run;
};

Trained& reverse_shift_run() {
  static Trained t;
  if (t.done) return t;
  t.run = std::make_unique<ToyRun>(toy_config(Difficulty::reverse_shift));
  auto& r = *t.run;
  auto t0 = Clock::now();
  r.trainer->run_stage(1);
  t.secs[0] = seconds_since(t0);
  std::tie(t.acc1_fwd, t.acc1_rev) = r.accuracy();
  t.ddm_before = r.heldout_ddm();

  t0 = Clock::now();
  r.trainer->run_stage(2);
  t.secs[1] = seconds_since(t0);
  t.ddm_after = r.heldout_ddm();
  std::vector<double> ddm;
  for (auto& h : r.trainer->history())
    if (h.stage == 2) ddm.push_back(h.ddm);
  const std::size_t head = std::min<std::size_t>(20, ddm.size()), tail = std::min<std::size_t>(100, ddm.size());
  for (std::size_t i = 0; i < head; ++i) t.curve_head += ddm[i] / static_cast<double>(head);
  for (std::size_t i = ddm.size() - tail; i < ddm.size(); ++i) t.curve_tail += ddm[i] / static_cast<double>(tail);

  t0 = Clock::now();
  r.trainer->run_stage(3);
  t.secs[2] = seconds_since(t0);
  std::tie(t.acc3_fwd, t.acc3_rev) = r.accuracy();
  t.done = true;
  return t;
}

Verdict training_sanity() {
  auto& t = reverse_shift_run();
  const double reduction = 1 - t.ddm_after / t.ddm_before;
  const double drop = std::max(t.acc1_fwd - t.acc3_fwd, t.acc1_rev - t.acc3_rev);
  const bool ok = t.acc1_fwd >= tol::kStage1Accuracy && t.acc1_rev >= tol::kStage1Accuracy &&
                  reduction >= tol::kDdmReduction && drop <= tol::kStage3Drop;
  return {ok, fmt("stage1 acc fwd %.4f rev %.4f (>= %.2f); held-out L_DDM %.4f -> %.4f, -%.1f%% (>= %.0f%%; train curve "
                  "%.4f -> %.4f); stage3 acc fwd %.4f rev %.4f, drop %.4f (<= %.2f); %.0f/%.0f/%.0f s",
                  t.acc1_fwd, t.acc1_rev, tol::kStage1Accuracy, t.ddm_before, t.ddm_after, 100 * reduction,
                  100 * tol::kDdmReduction, t.curve_head, t.curve_tail, t.acc3_fwd, t.acc3_rev, drop, tol::kStage3Drop,
                  t.secs[0], t.secs[1], t.secs[2])};
}

Verdict beam_ordering() {
  auto& r = *reverse_shift_run().run;
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  for (auto dir : {Direction::forward, Direction::reverse}) {
    const auto greedy = evaluate_direction(*r.model, r.test(), dir, 1);
    const auto beam = evaluate_direction(*r.model, r.test(), dir, 10);
    ok = ok && beam.bleu >= greedy.bleu;
    detail += fmt("%s beam-10 %.4f vs greedy %.4f; ", to_string(dir).c_str(), beam.bleu, greedy.bleu);
  }
  return {ok, detail + fmt("%zu pairs, %.0f s", r.test().size(), seconds_since(t0))};
}

Verdict roundtrip() {
  // architectural: an untrained model and the trained one
  ToyRun fresh(toy_config(Difficulty::reverse_shift));
  const double cyc_fresh = cycle_error(*fresh.model, fresh.test());
  auto& trained = *reverse_shift_run().run;
  const double cyc_trained = cycle_error(*trained.model, trained.test());

  auto cfg = toy_config(Difficulty::copy);
  cfg.train.k2 = 0;
  cfg.train.k3 = 0;
  ToyRun copy(cfg);
  const auto t0 = Clock::now();
  copy.trainer->run_stage(1);
  const double secs = seconds_since(t0);
  const auto xyx = roundtrip_eval(*copy.model, copy.test(), RoundTrip::xyx);
  const auto yxy = roundtrip_eval(*copy.model, copy.test(), RoundTrip::yxy);
  const bool ok = cyc_fresh <= tol::kCycle && cyc_trained <= tol::kCycle && xyx.exact_match >= tol::kCopyExactMatch &&
                  yxy.exact_match >= tol::kCopyExactMatch;
  return {ok, fmt("single-precision cycle error untrained %.2e, trained %.2e (<= %.0e); copy task (K1=%zu, %.0f s) "
                  "round-trip exact match xyx %.4f yxy %.4f (>= %.2f)",
                  cyc_fresh, cyc_trained, tol::kCycle, cfg.train.k1, secs, xyx.exact_match, yxy.exact_match,
                  tol::kCopyExactMatch)};
}

// ---------------------------------------------------------------------------
// 9: determinism

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

int quiet_dispatch(std::vector<std::string> args) {
  args.insert(args.begin(), "dplx");
  std::vector<const char*> argv;
  for (auto& a : args) argv.push_back(a.c_str());
  std::ostringstream sink;
  auto* old = std::cout.rdbuf(sink.rdbuf());
  const int code = cli::dispatch(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old);
  return code;
}

Verdict determinism() {
  const auto root = fs::temp_directory_path() / "dplx_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::vector<std::string> common = {
      "--seed", "11", "--set", "data.pairs=400", "--set", "data.max_len=10", "--set", "model.width=32",
      "--set", "model.layers=2", "--set", "model.heads=2", "--set", "train.k1=12", "--set", "train.k2=8",
      "--set", "train.k3=6", "--set", "train.batch_tokens=64", "--set", "train.log_interval=1",
      "--set", "train.eval_interval=5", "--set", "train.eval_pairs=20", "--set", "diffusion.steps=50",
      "--set", "train.record_wallclock=false"};
  auto train = [&](const std::string& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> a{"train", "--out-dir", (root / out).string()};
    a.insert(a.end(), common.begin(), common.end());
    a.insert(a.end(), extra.begin(), extra.end());
    return quiet_dispatch(a);
  };
  if (train("a") || train("b")) return {false, "training run failed"};
  const auto ma = slurp(root / "a" / "metrics.jsonl"), mb = slurp(root / "b" / "metrics.jsonl");
  const bool same_runs = !ma.empty() && ma == mb && slurp(root / "a" / "metrics.csv") == slurp(root / "b" / "metrics.csv") &&
                         slurp(root / "a" / "final" / "model.dplx") == slurp(root / "b" / "final" / "model.dplx");

  // resume from the step-15 checkpoint, which falls inside stage 2
  if (train("c", {"--resume", (root / "a" / "ckpt-15").string()})) return {false, "resumed run failed"};
  const auto la = lines_of(ma), lc = lines_of(slurp(root / "c" / "metrics.jsonl"));
  std::size_t cut = 0;
  while (cut < la.size() && la[cut].find("\"step\":15,") == std::string::npos) ++cut;
  while (cut < la.size() && la[cut].find("\"step\":15,") != std::string::npos) ++cut;
  const std::vector<std::string> tail(la.begin() + static_cast<std::ptrdiff_t>(cut), la.end());
  const bool resumed = cut < la.size() && tail == lc &&
                       slurp(root / "a" / "final" / "model.dplx") == slurp(root / "c" / "final" / "model.dplx");
  return {same_runs && resumed,
          fmt("two runs: metrics.jsonl %zu lines %s, final weights %s; resume at step 15 (stage 2): %zu trailing lines %s",
              la.size(), ma == mb ? "identical" : "DIFFER",
              slurp(root / "a" / "final" / "model.dplx") == slurp(root / "b" / "final" / "model.dplx") ? "identical" : "DIFFER",
              lc.size(), resumed ? "and final weights identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> want;
  for (int i = 1; i < argc; ++i) want.insert(std::atoi(argv[i]));
  auto on = [&](int id) { return want.empty() || want.count(id); };
  const auto t0 = Clock::now();
  auto guarded = [&](int id, const char* name, Verdict (*f)()) {
    if (!on(id)) return;
    try {
      report(id, name, f());
    } catch (const std::exception& e) {
      report(id, name, {false, std::string("threw: ") + e.what()});
    }
  };
  guarded(1, "invertibility", invertibility);
  guarded(2, "palindrome", palindrome);
  guarded(3, "ctc-oracle", ctc_oracle);
  guarded(4, "gradients", gradients);
  guarded(5, "diffusion-identities", diffusion_identities);
  guarded(6, "training-sanity", training_sanity);
  guarded(7, "beam-ordering", beam_ordering);
  guarded(8, "duplex-roundtrip", roundtrip);
  guarded(9, "determinism", determinism);
  std::printf("%d failed, %.0f s total\n", failures, seconds_since(t0));
  return failures ? 1 : 0;
}
