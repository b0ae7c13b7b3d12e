// SPDX-License-Identifier: Apache-2.0
// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//   acceptance <anop binary> <default config> <scratch dir>
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "anop/app/checkpoint.hpp"
#include "anop/app/config.hpp"
#include "anop/app/runner.hpp"
#include "anop/autodiff/gradcheck.hpp"
#include "anop/autodiff/ops.hpp"
#include "anop/util/rng.hpp"

namespace fs = std::filesystem;
using namespace anop;
using namespace anop::ad;
using app::Paradigm;
using world::ClassId;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, a, b, c, d);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

int shell(const std::string& cmd) {
  const int raw = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

Tensor random_probs(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (t.at(r, c) = 0.05 + rng.uniform());
    for (std::size_t c = 0; c < cols; ++c) t.at(r, c) /= s;
  }
  return t;
}

Var weighted_sum(Graph& g, Var y) {
  Tensor w(y.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3) + 1.5;
  return scale(mean(mul(y, g.constant(w))), static_cast<double>(w.size()));
}

// Shared state of the default-world criteria.
struct Shared {
  std::string anop, config_path, scratch;
  std::unique_ptr<app::Experiment> ex;
  std::string encoder_hash;
  std::vector<app::RunOutcome> two_stage;  // coop then anchoropt, seeds 0..4
};

Verdict metric_fidelity() {
  Verdict v;
  const double a = eval::harmonic_mean(82.69, 63.22), b = eval::harmonic_mean(81.24, 76.27);
  v.require(std::abs(a - 71.66) <= 0.01, fmt("HM(82.69, 63.22) = %.4f", a));
  v.require(std::abs(b - 78.68) <= 0.01, fmt("HM(81.24, 76.27) = %.4f", b));
  if (v.pass) v.detail = fmt("71.66 -> %.4f, 78.68 -> %.4f", a, b);
  return v;
}

Verdict gradient_suite(Shared& s) {
  Verdict v;
  using Build = std::function<Var(Graph&, Var, Rng&)>;
  const std::vector<std::tuple<std::string, Shape, Build>> ops{
      {"matmul", {3, 4}, [](Graph& g, Var x, Rng& r) { return matmul(x, g.constant(random_tensor({4, 2}, r))); }},
      {"add", {4}, [](Graph& g, Var x, Rng& r) { return add(g.constant(random_tensor({3, 4}, r)), x); }},
      {"mul", {3, 4}, [](Graph& g, Var x, Rng& r) { return mul(x, g.constant(random_tensor({3, 4}, r))); }},
      {"scale", {2, 3}, [](Graph&, Var x, Rng&) { return scale(x, -1.7); }},
      {"concat", {2, 3}, [](Graph& g, Var x, Rng& r) { return concat({x, g.constant(random_tensor({1, 3}, r))}, 0); }},
      {"slice", {4, 3}, [](Graph&, Var x, Rng&) { return slice(x, 1, 1, 3); }},
      {"gather_rows", {5, 3}, [](Graph&, Var x, Rng&) { return gather_rows(x, {4, 0, 4, 2}); }},
      {"layer_norm", {3, 6},
       [](Graph& g, Var x, Rng& r) {
         return layer_norm(x, g.constant(random_tensor({6}, r)), g.constant(random_tensor({6}, r)));
       }},
      {"softmax", {3, 5}, [](Graph&, Var x, Rng&) { return softmax(x, 0.7); }},
      {"log_softmax", {3, 5}, [](Graph&, Var x, Rng&) { return log_softmax(x); }},
      {"gelu", {3, 5}, [](Graph&, Var x, Rng&) { return gelu(x); }},
      {"l2_normalize", {3, 5}, [](Graph&, Var x, Rng&) { return l2_normalize(x); }},
      {"mean", {3, 5}, [](Graph&, Var x, Rng&) { return mean(x, 0); }},
      {"mse", {3, 5}, [](Graph& g, Var x, Rng& r) { return mse(x, g.constant(random_tensor({3, 5}, r))); }},
      {"cross_entropy", {4, 5}, [](Graph&, Var x, Rng&) { return cross_entropy(x, {0, 3, 4, 1}); }},
      {"kl_divergence", {3, 4},
       [](Graph& g, Var x, Rng& r) { return kl_divergence(g.constant(random_probs(3, 4, r)), softmax(x)); }},
      {"gumbel_softmax", {4, 4},
       [](Graph& g, Var x, Rng& r) {
         Tensor noise({4, 4});
         for (double& n : noise.values()) n = r.gumbel();
         return gumbel_softmax(x, g.constant(noise), 0.8, GumbelMode::soft);
       }},
      {"transpose", {3, 5}, [](Graph&, Var x, Rng&) { return transpose(x); }},
      {"reshape", {3, 4}, [](Graph&, Var x, Rng&) { return reshape(x, {2, 6}); }},
  };
  std::size_t cases = 0;
  double worst = 0.0;
  for (const auto& [name, shape, build] : ops) {
    for (int trial = 0; trial < 2; ++trial) {
      Rng pr(derive_seed(derive_seed(7, name), static_cast<std::uint64_t>(trial)));
      const Tensor point = random_tensor(shape, pr);
      const std::uint64_t cs = derive_seed(derive_seed(8, name), static_cast<std::uint64_t>(trial));
      const ScalarFn fn = [&](Graph& g, Var x) {
        Rng r(cs);
        return weighted_sum(g, build(g, x, r));
      };
      const double err = check_gradients(fn, point);
      worst = std::max(worst, err);
      v.require(err < 1e-4, name + fmt(" rel err %.2e", err));
      ++cases;
    }
  }

  // Full composed loss: CE + lambda KL through the normal prompt, soft Gumbel
  // path with frozen noise, frozen encoder. The detached target is taken at
  // the base point.
  const app::Experiment& ex = *s.ex;
  const encoder::EncoderStack& stack = ex.stack();
  train::TrainConfig cfg = ex.config().train;
  cfg.position_forward = prompt::PositionForward::soft;
  const std::vector<ClassId> classes(ex.split().base_classes.begin(), ex.split().base_classes.begin() + 4);
  const auto images =
      train::ImageBank::build(world::sample_dataset(ex.world(), classes, 2, 17), stack);
  std::vector<std::size_t> labels;
  for (ClassId c : images.labels) labels.push_back(std::find(classes.begin(), classes.end(), c) - classes.begin());

  for (int trial = 0; trial < 3; ++trial) {
    const train::TrainState st = train::TrainState::initialize(cfg, stack.dims(), 100 + trial);
    Rng nr(derive_seed(55, static_cast<std::uint64_t>(trial)));
    Tensor noise(st.position.logits.shape());
    for (double& n : noise.values()) n = nr.gumbel();
    Tensor q_anc;
    {
      Graph g;
      train::PromptModel m(g, stack, ex.world(), st, cfg, {});
      q_anc = train::class_probabilities(images.features, m.anchor_features(classes).value(), stack.logit_scale());
    }
    enum Wrt { soft, position, anchors };
    for (Wrt wrt : {soft, position, anchors}) {
      Tensor target;
      auto loss = [&](bool record) {
        return [&, record](Graph& g, Var x) {
          Var soft_v = wrt == soft ? x : g.constant(st.soft);
          Var logits_v = wrt == position ? x : g.constant(st.position.logits);
          Var anchors_v = wrt == anchors ? x : g.constant(st.anchors);
          encoder::BoundEncoder enc(g, stack);
          prompt::PromptContext ctx(g, stack);
          Var pm = gumbel_softmax(logits_v, g.constant(noise), cfg.gumbel_temperature, GumbelMode::soft);
          std::vector<prompt::GraphPrompt> ps;
          for (ClassId c : classes) {
            ps.push_back(prompt::normal_prompt(ctx, pm, soft_v, anchors_v, ctx.words(ex.world().class_name_tokens[c])));
          }
          const prompt::PromptBatch b = prompt::pack(ps);
          Var text = enc.encode_text(b.rows, b.layout, b.pool_rows);
          Var lg = scale(matmul(g.constant(images.features), transpose(text)), stack.logit_scale());
          Var qn = softmax(lg);
          if (record) target = scale(add(qn, g.constant(q_anc)), 0.5).value();
          return add(scale(cross_entropy(lg, labels), cfg.lambda_ce),
                     scale(kl_divergence(g.constant(target), qn), cfg.lambda_kd));
        };
      };
      const Tensor& point = wrt == soft ? st.soft : wrt == position ? st.position.logits : st.anchors;
      Graph g0;
      loss(true)(g0, g0.constant(point));
      const double err = check_gradients(loss(false), point);
      worst = std::max(worst, err);
      v.require(err < 1e-4, fmt("composed loss trial %.0f wrt %.0f rel err %.2e", trial, wrt, err));
      ++cases;
    }
  }
  v.require(cases >= 25, fmt("only %.0f cases", static_cast<double>(cases)));
  if (v.pass) v.detail = fmt("%.0f cases, worst rel err %.2e", static_cast<double>(cases), worst);
  return v;
}

Verdict position_matrix_properties() {
  Verdict v;
  const std::vector<double> taus{0.1, 0.5, 1.0, 2.0, 4.0};
  std::size_t sampled = 0, near_rows = 0, rows_total = 0;
  double worst_sum = 0.0, worst_dev = 0.0, worst_gap = 0.0;
  bool one_hot = true, st_bitwise = true;
  for (std::size_t k = 0; k < taus.size(); ++k) {
    for (int i = 0; i < 200; ++i) {
      const std::uint64_t seed = derive_seed(derive_seed(31, k), static_cast<std::uint64_t>(i));
      Rng rng(seed);
      const std::size_t n = 2 + rng.index(8);
      const Tensor logits = random_tensor({n, n}, rng, 2.0);
      Graph g;
      const prompt::Realization hard =
          prompt::sample_position_matrix(g, g.constant(logits), taus[k], prompt::PositionForward::hard_st, seed, true);
      const prompt::Realization soft =
          prompt::sample_position_matrix(g, g.constant(logits), taus[k], prompt::PositionForward::soft, seed, true);
      // Same noise, near-zero temperature.
      const prompt::Realization cold =
          prompt::sample_position_matrix(g, g.constant(logits), 1e-4, prompt::PositionForward::soft, seed, true);
      ++sampled;
      for (std::size_t r = 0; r < n; ++r) {
        double ones = 0.0, zeros = 0.0, sum = 0.0, dev = 0.0;
        std::size_t best = 0;
        for (std::size_t c = 0; c < n; ++c) {
          const double h = hard.matrix.value().at(r, c);
          ones += h == 1.0;
          zeros += h == 0.0;
          sum += soft.matrix.value().at(r, c);
          dev = std::max(dev, std::abs(h - cold.matrix.value().at(r, c)));
          const double y = logits.at(r, c) + hard.noise.at(r, c);
          if (y > logits.at(r, best) + hard.noise.at(r, best)) best = c;
        }
        one_hot &= ones == 1.0 && zeros == static_cast<double>(n - 1);
        worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
        // Pure hard forward: one-hot of argmax(logits + noise).
        for (std::size_t c = 0; c < n; ++c) st_bitwise &= hard.matrix.value().at(r, c) == (c == best ? 1.0 : 0.0);
        ++rows_total;
        if (dev >= 1e-6) {
          ++near_rows;
          double second = -std::numeric_limits<double>::infinity();
          const double top = logits.at(r, best) + hard.noise.at(r, best);
          for (std::size_t c = 0; c < n; ++c) {
            if (c != best) second = std::max(second, logits.at(r, c) + hard.noise.at(r, c));
          }
          if (dev > worst_dev) worst_gap = top - second;
        }
        worst_dev = std::max(worst_dev, dev);
      }
    }
  }
  v.require(sampled == 1000, "sample count");
  v.require(one_hot, "hard rows not one-hot");
  v.require(worst_sum < 1e-9, fmt("soft row sum off by %.2e", worst_sum));
  v.require(st_bitwise, "straight-through forward differs from pure hard");
  v.require(worst_dev < 1e-6, fmt("tau=1e-4 deviation %.2e in %.0f of %.0f rows (worst row top-2 gap %.2e)", worst_dev,
                                  double(near_rows), double(rows_total), worst_gap));
  if (v.pass) v.detail = fmt("%.0f matrices, max |row sum - 1| %.1e, tau=1e-4 deviation %.1e", double(sampled), worst_sum, worst_dev);
  return v;
}

Verdict stage_isolation(Shared& s, train::TrainState* trained) {
  Verdict v;
  app::Experiment& ex = *s.ex;
  const app::RunSpec spec = ex.spec(train::Method::anchoropt, Paradigm::two_stage, 0);
  train::TrainState st = ex.init_state(spec);
  const std::string adapt0 = st.adaptation_hash(), anchor0 = st.anchor_hash();
  ex.stage1(spec, st);
  v.require(st.adaptation_hash() == adapt0, "stage I moved soft tokens or position logits");
  v.require(st.anchor_hash() != anchor0, "stage I left anchors unchanged");
  const std::string anchor1 = st.anchor_hash();
  ex.stage2(spec, st);
  v.require(st.anchor_hash() == anchor1, "stage II moved anchors");
  v.require(st.adaptation_hash() != adapt0, "stage II left soft tokens unchanged");
  v.require(ex.stack().parameter_hash() == s.encoder_hash, "encoder changed during training");
  *trained = std::move(st);
  if (v.pass) v.detail = "anchor hash fixed through stage II, adaptation hash fixed through stage I, encoder hash fixed";
  return v;
}

Verdict ensemble_and_routing(Shared& s, const train::TrainState& trained) {
  Verdict v;
  Rng rng(404);
  bool idem = true, mean_exact = true;
  for (int i = 0; i < 200; ++i) {
    const std::size_t k = 2 + rng.index(9);
    encoder::PredictionDistribution p, q;
    const Tensor a = random_probs(1, k, rng), b = random_probs(1, k, rng);
    p.probs.assign(a.values().begin(), a.values().end());
    q.probs.assign(b.values().begin(), b.values().end());
    for (std::size_t j = 0; j < k; ++j) p.class_ids.push_back(j);
    q.class_ids = p.class_ids;
    idem &= train::ensemble_predict(p, p).probs == p.probs;
    const auto e = train::ensemble_predict(p, q);
    for (std::size_t j = 0; j < k; ++j) mean_exact &= e.probs[j] == (p.probs[j] + q.probs[j]) / 2.0;
  }
  v.require(idem, "ensemble(q, q) != q");
  v.require(mean_exact, "ensemble is not the exact mean");

  const app::Experiment& ex = *s.ex;
  const app::RunSpec spec = ex.spec(train::Method::anchoropt, Paradigm::two_stage, 0);
  eval::EvalOptions o;
  o.n_eval = ex.config().n_eval;
  o.seed = 0;
  eval::EvalDetail plain, corrupt;
  eval::evaluate_base_to_novel(trained, ex.split(), ex.world(), ex.stack(), spec.train, o, &plain);
  Rng noise(9);
  o.corrupt_anchor = [&](Tensor& q) { q = random_probs(q.rows(), q.cols(), noise); };
  eval::evaluate_base_to_novel(trained, ex.split(), ex.world(), ex.stack(), spec.train, o, &corrupt);
  v.require(plain.base_predictions == corrupt.base_predictions, "base predictions depend on the anchor prompt");

  // Routing: base = argmax q_norm, novel = argmax of the equal-weight ensemble.
  auto argmax = [](std::span<const double> row) {
    std::size_t b = 0;
    for (std::size_t j = 1; j < row.size(); ++j) {
      if (row[j] > row[b]) b = j;
    }
    return b;
  };
  bool routed = true;
  for (const eval::EvalDetail* d : {&plain, &corrupt}) {
    for (std::size_t i = 0; i < d->base_predictions.size(); ++i) {
      routed &= d->base_predictions[i] == ex.split().base_classes[argmax(d->base_q_norm.row(i))];
    }
    for (std::size_t i = 0; i < d->novel_predictions.size(); ++i) {
      std::vector<double> e(d->novel_q_norm.cols());
      for (std::size_t j = 0; j < e.size(); ++j) e[j] = (d->novel_q_norm.at(i, j) + d->novel_q_anc.at(i, j)) / 2.0;
      routed &= d->novel_predictions[i] == ex.split().novel_classes[argmax(e)];
    }
  }
  v.require(routed, "logged predictions do not follow the routing rule");
  if (v.pass) {
    v.detail = fmt("200 ensemble draws exact; %.0f base predictions unchanged under anchor corruption",
                   static_cast<double>(plain.base_predictions.size()));
  }
  return v;
}

Verdict end_to_end(Shared& s) {
  Verdict v;
  for (train::Method m : {train::Method::coop, train::Method::anchoropt}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) s.two_stage.push_back(s.ex->run(s.ex->spec(m, Paradigm::two_stage, seed)));
  }
  const auto rows = app::summarize_by(s.two_stage, false);
  const auto& coop = rows[0];
  const auto& anc = rows[1];
  std::cout << app::markdown_table(rows);
  v.require(anc.novel.mean > coop.novel.mean, fmt("novel %.2f vs CoOp %.2f", anc.novel.mean, coop.novel.mean));
  v.require(anc.hm.mean >= coop.hm.mean - 0.5, fmt("HM %.2f vs CoOp %.2f", anc.hm.mean, coop.hm.mean));
  v.detail = fmt("novel %.2f vs %.2f, HM %.2f vs %.2f (anchored vs CoOp, 5 seeds)", anc.novel.mean, coop.novel.mean,
                 anc.hm.mean, coop.hm.mean);
  return v;
}

Verdict paradigms(Shared& s) {
  Verdict v;
  std::vector<app::RunOutcome> runs;
  for (const auto& r : s.two_stage) {
    if (r.spec.method == train::Method::anchoropt) runs.push_back(r);
  }
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    runs.push_back(s.ex->run(s.ex->spec(train::Method::anchoropt, Paradigm::one_stage, seed)));
    v.require(runs.back().kd_final == 0.0, "one-stage used distillation");
  }
  std::vector<app::RunOutcome> two(runs.begin(), runs.begin() + 5), one(runs.begin() + 5, runs.end());
  const auto t = app::summarize_by(two, false)[0], o = app::summarize_by(one, false)[0];
  std::cout << "| Paradigm | Base | Novel | HM |\n|---|---|---|---|\n"
            << fmt("| two_stage | %.2f | %.2f | %.2f |\n", t.base.mean, t.novel.mean, t.hm.mean)
            << fmt("| one_stage | %.2f | %.2f | %.2f |\n", o.base.mean, o.novel.mean, o.hm.mean);
  v.require(t.hm.mean >= o.hm.mean - 0.5, fmt("two-stage HM %.2f vs one-stage %.2f", t.hm.mean, o.hm.mean));
  v.detail = fmt("two-stage HM %.2f, one-stage HM %.2f", t.hm.mean, o.hm.mean) + (v.detail.empty() ? "" : "; " + v.detail);
  return v;
}

// Small pretraining budget: these checks are about plumbing, not accuracy.
std::string quick(const std::string& anop, const std::string& config, const std::string& out) {
  return anop + " --config " + config + " --out " + out +
         " --override pretrain.min_steps=40 --override pretrain.max_steps=40 --override pretrain.eval_every=20"
         " --override pretrain.target=0 --override stage1.steps=15 --override stage2.steps=15"
         " --override eval.n_eval=10";
}

Verdict ablation_machinery(Shared& s) {
  Verdict v;
  const fs::path root = fs::path(s.scratch) / "ablate";
  fs::remove_all(root);
  std::size_t cells = 0;
  for (const std::string& axis : app::ablation_axes()) {
    const fs::path out = root / axis;
    const int code = shell(quick(s.anop, s.config_path, out.string()) + " --seed 0 ablate --axis " + axis);
    v.require(code == 0, axis + fmt(": exit %.0f", code));
    if (code != 0) continue;
    const auto grid = app::ablation_values(axis);
    const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
    const auto& runs = manifest["runs"];
    v.require(runs.size() == grid.size(), axis + ": cell count");
    std::istringstream csv(slurp(out / ("ablate_" + axis + ".csv")));
    std::size_t lines = 0;
    for (std::string line; std::getline(csv, line);) ++lines;
    v.require(lines == grid.size() + 1, axis + ": csv rows");
    for (std::size_t i = 0; i < std::min<std::size_t>(runs.size(), grid.size()); ++i) {
      const auto& r = runs[i];
      const std::string value = grid[i];
      ++cells;
      v.require(r["axis"] == axis && r["value"] == value, axis + ": cell order");
      if (axis == "preposition") v.require(r["preposition"] == value, "preposition wiring");
      if (axis == "anchor_length") v.require(r["anchor_length"] == std::stoul(value), "anchor_length wiring");
      if (axis == "kd") {
        v.require(r["lambda_kd"].get<double>() == (value == "off" ? 0.0 : s.ex->config().train.lambda_kd), "kd wiring");
      }
      if (axis == "gumbel_tau") v.require(r["gumbel_temperature"].get<double>() == std::stod(value), "tau wiring");
      if (axis == "ensemble") v.require(r["ensemble"] == (value == "on"), "ensemble wiring");
      if (axis == "paradigm") v.require(r["paradigm"] == value, "paradigm wiring");
      if (axis == "arrangement") {
        v.require(r["arrangement"] == value && r["position_matrix"] == (value == "matrix"), "arrangement wiring");
        // Fixed arrangements never touch the position logits.
        const auto data = app::load_checkpoint((out / "runs" / r["run_id"].get<std::string>() / "state.ckpt").string());
        const train::TrainState st = app::state_from_checkpoint(data);
        train::TrainConfig tc = s.ex->config().train;
        const train::TrainState init = train::TrainState::initialize(tc, s.ex->stack().dims(), 0);
        const bool untouched = st.position.logits.bitwise_equal(init.position.logits);
        v.require(untouched == (value != "matrix"), value + ": position logits " + (untouched ? "untouched" : "trained"));
      }
    }
  }
  const std::string base = quick(s.anop, s.config_path, (root / "multi").string()) + " --seed 0 ablate";
  v.require(shell(base + " --axis kd --axis arrangement") == 2, "multi-axis grid not rejected with exit 2");
  v.require(shell(base + " --axis colour") == 2, "unknown axis not rejected with exit 2");
  if (v.pass) v.detail = fmt("7 axes, %.0f cells, wiring matches the manifest, multi-axis grids rejected", cells);
  return v;
}

Verdict determinism(Shared& s) {
  Verdict v;
  const fs::path a = fs::path(s.scratch) / "det_a", b = fs::path(s.scratch) / "det_b";
  fs::remove_all(a);
  fs::remove_all(b);
  for (const fs::path& out : {a, b}) {
    const int code = shell(quick(s.anop, s.config_path, out.string()) +
                           " --override experiment.seeds=0,1 --override experiment.methods=coop,atprompt,anchoropt run");
    v.require(code == 0, fmt("run exit %.0f", code));
  }
  if (!v.pass) return v;
  auto strip_runtime = [](const std::string& csv) {
    std::istringstream in(csv);
    std::string out;
    for (std::string line; std::getline(in, line);) out += line.substr(0, line.rfind(',')) + "\n";
    return out;
  };
  const std::string csv_a = slurp(a / "metrics.csv");
  v.require(!csv_a.empty() && strip_runtime(csv_a) == strip_runtime(slurp(b / "metrics.csv")), "metrics CSV differs");
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    const std::string ext = entry.path().extension().string();
    if (!entry.is_regular_file() || (ext != ".ckpt" && ext != ".csv") || entry.path().filename() == "metrics.csv") continue;
    const fs::path twin = b / fs::relative(entry.path(), a);
    v.require(fs::exists(twin) && slurp(entry.path()) == slurp(twin), "differs: " + fs::relative(entry.path(), a).string());
    compared += ext == ".ckpt";
  }
  v.require(compared >= 7, fmt("only %.0f checkpoints compared", static_cast<double>(compared)));
  if (v.pass) v.detail = fmt("CSV identical without runtime column, %.0f checkpoints byte-identical", compared);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 4) {
    std::cerr << "usage: acceptance <anop binary> <default config> <scratch dir>\n";
    return 2;
  }
  Shared s{argv[1], argv[2], argv[3], nullptr, {}, {}};
  fs::create_directories(s.scratch);

  app::ExperimentConfig config = app::load_config(s.config_path);
  config.output_dir = (fs::path(s.scratch) / "default").string();
  std::ofstream log(fs::path(s.scratch) / "acceptance.log");
  s.ex = std::make_unique<app::Experiment>(config, log);
  s.encoder_hash = s.ex->stack().parameter_hash();

  int failed = 0;
  auto report = [&](int n, const char* name, const std::function<Verdict()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << name << "): " << v.detail
              << fmt(" [%.1fs]", secs) << std::endl;
  };

  train::TrainState trained;
  report(1, "metric fidelity", metric_fidelity);
  report(2, "gradient suite", [&] { return gradient_suite(s); });
  report(3, "position-matrix properties", position_matrix_properties);
  report(4, "stage isolation", [&] { return stage_isolation(s, &trained); });
  report(5, "ensemble and routing", [&] { return ensemble_and_routing(s, trained); });
  report(6, "end-to-end directional check", [&] { return end_to_end(s); });
  report(7, "paradigm comparison", [&] { return paradigms(s); });
  report(8, "ablation machinery", [&] { return ablation_machinery(s); });
  report(9, "determinism", [&] { return determinism(s); });

  // Nothing after pretraining may touch the encoder.
  if (s.ex->stack().parameter_hash() != s.encoder_hash) {
    std::cout << "FAIL criterion 4 (stage isolation): encoder hash changed by later runs" << std::endl;
    ++failed;
  }
  return failed == 0 ? 0 : 1;
}
