// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only when
// every selected criterion passes. Thresholds are fixed; nothing is retried.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "ase/captioner.hpp"
#include "ase/encoder.hpp"
#include "ase/gradcheck.hpp"
#include "ase/iasm.hpp"
#include "ase/metrics.hpp"
#include "ase/nn.hpp"
#include "ase/scorer.hpp"
#include "ase/tokenizer.hpp"
#include "json.hpp"
#include "metric_fixture.hpp"

namespace {

using namespace ase;
using D = double;
using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& note) {
    pass = pass && ok;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + note);
  }
};

struct Options {
  fs::path work_dir = "acceptance_work";
  std::string cli = ASE_CLI_PATH;
  std::string python = ASE_PYTHON;
  std::string oracle_script = ASE_ORACLE_SCRIPT;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

MatrixX<D> gaussian(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  MatrixX<D> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

Image random_image(Index w, Index h, std::mt19937_64& rng) {
  Image im = Image::filled(w, h, 3, 0.0f);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& p : im.pixels) p = u(rng);
  return im;
}

// ---------------------------------------------------------------------------

struct TwoBlockStack {
  TwoBlockStack(Index dim, Index heads, Rng& rng)
      : first("b0", dim, heads, 4 * dim, rng), second("b1", dim, heads, 4 * dim, rng) {}

  Tensor<D> forward(Tape<D>& tape, const Tensor<D>& x) const { return second.forward(tape, first.forward(tape, x)); }

  template <typename F>
  void visit(F&& f) {
    first.visit(f);
    second.visit(f);
  }

  TransformerBlock<D> first, second;
};

// Relative error is |a - b| / max(|a|, |b|, floor). Central differences at
// h = 1e-5 on an O(10) loss carry ~1e-9 absolute round-off, so entries below
// kFdFloor (key biases have an exactly zero gradient) are compared absolutely.
constexpr double kFdFloor = 1e-5;

Outcome gradient_oracle(const Options&) {
  Outcome out;
  const auto t0 = Clock::now();
  double worst = 0.0, worst_strict = 0.0;
  auto record = [&](const MatrixX<D>& analytic, const MatrixX<D>& estimate) {
    worst = std::max(worst, max_relative_error(analytic, estimate, kFdFloor));
    worst_strict = std::max(worst_strict, max_relative_error(analytic, estimate, 1e-6));
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    TwoBlockStack net(16, 4, rng);
    const Tensor<D> x(gaussian(5, 16, rng));
    const Tensor<D> probe(gaussian(5, 16, rng));
    auto loss = [&](Tape<D>& tape, const Tensor<D>& in) { return sum(mul(net.forward(tape, in), probe)); };

    auto params = collect_parameters<D>(net);
    params.zero_grad();
    Tape<D> tape;
    const Tensor<D> leaf = tape.leaf(x);
    const auto grads = tape.backward(loss(tape, leaf));
    params.accumulate(tape, grads);

    const auto fd_input = finite_diff_gradient<D>(
        [&](const Tensor<D>& in) {
          Tape<D> t;
          return loss(t, in);
        },
        x, 1e-5);
    record(grads.at(leaf).value(), fd_input.value());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const MatrixX<D> fd = finite_diff_parameter<D>(
          [&] {
            Tape<D> t;
            return loss(t, x).item();
          },
          params[i], 1e-5);
      record(params[i].grad, fd);
    }
  }
  const double elapsed = seconds_since(t0);
  out.check(worst < 1e-4, "max relative error " + fmt("%.3g", worst) + " over 20 seeds, denominator floor 1e-5 (< 1e-4)");
  out.notes.push_back("     with denominator floor 1e-6 the maximum is " + fmt("%.3g", worst_strict) +
                      " (finite-difference round-off on near-zero entries)");
  out.check(elapsed < 60.0, "runtime " + fmt("%.1f", elapsed) + " s (< 60 s)");
  return out;
}

Outcome saliency_exactness(const Options&) {
  Outcome out;
  MatrixX<D> a(2, 2), g(2, 2), expected(2, 2);
  a << 1, -2, 3, 4;
  g << 0.5, -1, 2, 0;
  expected << 0.5, 0, 6, 0;
  const auto m = fuse_channels(weighted_features(saliency_weights(Tensor<D>(Shape{1, 2, 2}, g)),
                                                 Tensor<D>(Shape{1, 2, 2}, a)));
  const double err = (m.values - expected).cwiseAbs().maxCoeff();
  out.check(err <= 1e-9, "hand fixture max error " + fmt("%.3g", err) + " (<= 1e-9)");

  std::mt19937_64 rng(2);
  std::uniform_int_distribution<Index> ext(1, 6);
  int zero = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index k = ext(rng), h = ext(rng), w = ext(rng);
    MatrixX<D> gm = gaussian(k * h, w, rng).cwiseAbs() * -1.0;
    if (trial % 10 == 0) gm.setZero();
    const MatrixX<D> am = gaussian(k * h, w, rng, 3.0);
    const auto map = fuse_channels(weighted_features(saliency_weights(Tensor<D>(Shape{k, h, w}, gm)),
                                                     Tensor<D>(Shape{k, h, w}, am)));
    zero += map.values.cwiseAbs().maxCoeff() == 0.0;
  }
  out.check(zero == 100, std::to_string(zero) + "/100 non-positive-gradient draws give M == 0");
  return out;
}

Outcome saliency_nonnegativity(const Options&) {
  Outcome out;
  std::mt19937_64 rng(3);
  int nonneg = 0;
  double min_value = 0.0;
  for (int draw = 0; draw < 200; ++draw) {
    ScorerConfig c;
    c.num_blocks = 2 + draw % 3;
    AestheticScorer<D> scorer(c, 1000 + static_cast<std::uint64_t>(draw));
    const auto map = aesthetic_saliency(scorer, random_image(32, 32, rng));
    min_value = std::min(min_value, map.values.minCoeff());
    nonneg += map.values.minCoeff() >= 0.0;
  }
  out.check(nonneg == 200, std::to_string(nonneg) + "/200 scorer/image draws give M >= 0 (min " +
                               fmt("%.3g", min_value) + ")");

  AestheticScorer<D> scorer(ScorerConfig{}, 77);
  std::vector<Image> images;
  for (int i = 0; i < 10; ++i) images.push_back(random_image(32, 32, rng));
  std::vector<Index> base;
  for (const auto& im : images) base.push_back(scorer.predict(im).c);
  const MatrixX<D> w0 = scorer.head.weight.value, b0 = scorer.head.bias.value;
  std::uniform_real_distribution<double> u(0.0, 10.0);
  int stable = 0;
  for (int trial = 0; trial < 50; ++trial) {
    double lambda = 0.0;
    while (lambda <= 0.0) lambda = 10.0 - u(rng);  // (0, 10]
    scorer.head.weight.value = lambda * w0;
    scorer.head.bias.value = lambda * b0;
    bool same = true;
    for (std::size_t i = 0; i < images.size(); ++i) same = same && scorer.predict(images[i]).c == base[i];
    stable += same;
  }
  out.check(stable == 50, std::to_string(stable) + "/50 logit scalings keep the argmax class on 10 images");
  return out;
}

Outcome cross_attention_symmetry(const Options&) {
  Outcome out;
  EncoderConfig c;
  c.zero_init_fusion = false;
  IasVitEncoder<D> enc(c, 5);
  const Index n = c.grid() * c.grid();
  std::mt19937_64 rng(4);
  double perm_err = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor<D> q(gaussian(n, c.embed_dim, rng));
    const Tensor<D> kv(gaussian(n, c.embed_dim, rng));
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto& block = enc.blocks()[static_cast<std::size_t>(trial) % enc.blocks().size()];
    Tape<D> tape;
    const Tensor<D> a = block.forward(tape, q, kv);
    const Tensor<D> b = block.forward(tape, q, gather_rows(kv, std::span<const Index>(perm)));
    perm_err = std::max(perm_err, (a.value() - b.value()).cwiseAbs().maxCoeff());
  }
  out.check(perm_err < 1e-6, "joint K/V permutation max change " + fmt("%.3g", perm_err) + " over 20 permutations (< 1e-6)");

  double single_err = 0.0;
  for (const auto& block : enc.blocks()) {
    const auto& cross = *block.cross;
    const Tensor<D> kv(gaussian(1, c.embed_dim, rng));
    const Tensor<D> q(gaussian(7, c.embed_dim, rng));
    Tape<D> tape;
    const Tensor<D> expected = cross.output.forward(tape, cross.value.forward(tape, kv));
    const Tensor<D> got = cross.forward(tape, q, kv);
    for (Index r = 0; r < got.rows(); ++r)
      single_err = std::max(single_err, (got.value().row(r) - expected.value().row(0)).cwiseAbs().maxCoeff());
  }
  out.check(single_err <= 1e-7, "single key equals value projection, max error " + fmt("%.3g", single_err) + " (<= 1e-7)");

  double init_err = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    IasVitEncoder<D> fresh(EncoderConfig{}, seed);
    const Index g = fresh.config().grid();
    const Image im = random_image(32, 32, rng);
    const auto map = normalize_resize(SaliencyMap<D>{gaussian(g, g, rng).cwiseAbs()}, g, g);
    Tape<D> tape;
    const Tensor<D> fused = fresh.encode_tile(tape, im, &map);
    const Tensor<D> q_stream = fresh.build_saliency_stream(tape, fresh.patchify(tape, im), map);
    const Tensor<D> plain = pixel_shuffle(fresh.forward_plain(tape, q_stream), g, g);
    init_err = std::max(init_err, (fused.value() - plain.value()).cwiseAbs().maxCoeff());
  }
  out.check(init_err <= 1e-7, "zero-initialised fusion equals plain ViT forward on the saliency stream, max error " + fmt("%.3g", init_err) +
                                  " (<= 1e-7)");
  return out;
}

Outcome pixel_shuffle_and_tiling(const Options&) {
  Outcome out;
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<Index> half(1, 16), dim(1, 8);
  int quartered = 0, identity = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index h = 2 * half(rng), w = 2 * half(rng), d = dim(rng);
    const Tensor<D> x(gaussian(h * w, d, rng));
    const Tensor<D> y = pixel_shuffle(x, h, w);
    quartered += y.rows() * 4 == x.rows() && y.numel() == x.numel();
    identity += pixel_unshuffle(y, h, w).value() == x.value();
  }
  out.check(quartered == 100, std::to_string(quartered) + "/100 shuffles give exactly a quarter of the tokens");
  out.check(identity == 100, std::to_string(identity) + "/100 unshuffle(shuffle(x)) == x exactly");

  const EncoderConfig full = EncoderConfig::full_scale();
  std::uniform_int_distribution<Index> ext(1, 30000);
  int bounded = 0, thumb = 0;
  const int plans = 5000;
  for (int trial = 0; trial < plans; ++trial) {
    const Index w = trial < 50 ? 448 * (1 + trial) : ext(rng);
    const Index h = trial < 50 ? 448 : ext(rng);
    const TilePlan p = plan_tiles(w, h, full);
    bounded += p.tiles() >= 1 && p.tiles() <= 40;
    thumb += p.includes_thumbnail == (p.tiles() > 1);
  }
  out.check(bounded == plans, std::to_string(bounded) + "/" + std::to_string(plans) + " full-scale tile plans within [1, 40]");
  out.check(thumb == plans, std::to_string(thumb) + "/" + std::to_string(plans) + " include a thumbnail iff tiles > 1");

  IasVitEncoder<D> enc(EncoderConfig{}, 1);
  const Index g = enc.config().grid();
  Tape<D> tape;
  const Index tokens = enc.encode(tape, random_image(96, 32, rng)).rows();
  out.check(tokens == 4 * g * g / 4, "96x32 image: 3 tiles + thumbnail give " + std::to_string(tokens) + " tokens");
  return out;
}

Outcome lr_schedule(const Options&) {
  Outcome out;
  bool all = true;
  double worst = 0.0;
  for (Index total : {100, 300, 1000, 4321}) {
    TrainConfig tc = TrainConfig::full_scale();
    tc.total_steps = total;
    const Schedule s = tc.schedule();
    const Index w = s.warmup_steps();
    const double at_peak = lr_at(w, s);
    const double junction = std::abs(schedule_detail::warmup_branch(double(w), double(w), s.peak) -
                                     schedule_detail::cosine_branch(double(w), double(w), double(total), s.peak));
    worst = std::max({worst, std::abs(at_peak - 4e-5), junction});
    all = all && lr_at(0, s) == 0.0 && std::abs(at_peak - 4e-5) <= 1e-12 && std::abs(lr_at(total, s)) <= 1e-12 &&
          junction <= 1e-12;
  }
  out.check(all, "lr(0) = 0, lr(warmup end) = 4e-5, lr(total) = 0, junction continuous; worst deviation " +
                     fmt("%.3g", worst) + " (<= 1e-12) for 4 step budgets");
  return out;
}

bool run_capture(const std::string& cmd, std::string& output) {
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return false;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), pipe)) > 0) output.append(buf, n);
  const int status = ::pclose(pipe);
  return WIFEXITED(status) && WEXITSTATUS(status) == 0;
}

Outcome metric_suite(const Options& opts) {
  Outcome out;
  std::vector<CandidateCaption> identity;
  for (const auto& [img, refs] : kFixtureReferences) identity.push_back({img, refs.front()});
  const auto id = evaluate_corpus(identity, kFixtureReferences);
  bool exact = true;
  for (const auto& s : id.per_image) {
    for (double b : s.bleu) exact = exact && b == 1.0;
    exact = exact && s.rouge == 1.0 && s.precision == 1.0 && s.recall == 1.0;
  }
  out.check(exact, "identity candidates: BLEU-1..4 = ROUGE-L = Pre = Re = 1.0 exactly");

  const Tokens cat[] = {split_words("the cat")};
  const double clipped = bleu(split_words("the the the"), cat, 1);
  out.check(clipped == 1.0 / 3.0, "BLEU-1 clipping 'the the the' vs 'the cat' = " + fmt("%.17g", clipped));

  // Independent scorer: run live when an interpreter is available, else use its frozen output.
  json oracle;
  std::string raw;
  const bool live = !opts.python.empty() && run_capture(opts.python + " " + opts.oracle_script + " 2>/dev/null", raw);
  if (live) {
    oracle = json::parse(raw);
  } else {
    for (const auto& e : kOracle)
      oracle.push_back({{"image", e.image}, {"bleu", e.bleu}, {"rouge_l", e.rouge}, {"cider", e.cider}});
  }
  const auto report = evaluate_corpus(kFixtureCandidates, kFixtureReferences);
  double worst = 0.0;
  bool aligned = oracle.size() == report.per_image.size();
  for (std::size_t i = 0; aligned && i < oracle.size(); ++i) {
    const auto& got = report.per_image[i];
    aligned = aligned && oracle[i].at("image") == got.image;
    for (std::size_t n = 0; n < 4; ++n) worst = std::max(worst, std::abs(got.bleu[n] - oracle[i].at("bleu")[n].get<double>()));
    worst = std::max(worst, std::abs(got.rouge - oracle[i].at("rouge_l").get<double>()));
    worst = std::max(worst, std::abs(got.cider - oracle[i].at("cider").get<double>()));
  }
  out.check(aligned && worst <= 1e-6, std::string("5-image fixture vs brute-force script (") +
                                          (live ? "run live" : "frozen output, interpreter unavailable") +
                                          "): max |diff| on BLEU/ROUGE-L/CIDEr " + fmt("%.3g", worst) + " (<= 1e-6)");

  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> word(0, 7), len(1, 7);
  const std::vector<std::string> lexicon = {"warm", "light", "soft", "focus", "the", "frame", "blue", "."};
  auto sentence = [&] {
    Tokens t;
    for (int i = len(rng); i > 0; --i) t.push_back(lexicon[static_cast<std::size_t>(word(rng))]);
    return t;
  };
  const PairwiseScorer scorers[] = {
      [](const Tokens& c, const Tokens& r) { return unigram_pre_re(c, r).precision; },
      [](const Tokens& c, const Tokens& r) { return unigram_pre_re(c, r).recall; },
      [](const Tokens& c, const Tokens& r) {
        const Tokens rs[] = {r};
        return bleu(c, rs, 2);
      },
      [](const Tokens& c, const Tokens& r) { return meteor_exact(c, r); }};
  int monotone = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Tokens cand = sentence();
    std::vector<Tokens> refs = {sentence()};
    const auto& scorer = scorers[trial % 4];
    bool ok = true;
    double prev = max_over_references(scorer, cand, refs);
    for (int k = 0; k < 4; ++k) {
      refs.push_back(sentence());
      const double next = max_over_references(scorer, cand, refs);
      ok = ok && next >= prev;
      prev = next;
    }
    monotone += ok;
  }
  out.check(monotone == 200, std::to_string(monotone) + "/200 random cases: max_over_references monotone in reference count");
  return out;
}

// ---------------------------------------------------------------------------

int run_cli(const Options& opts, const std::string& args, const fs::path& log) {
  const std::string cmd = opts.cli + " " + args + " >>" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::map<std::string, double> bleu4_by_mode(const fs::path& csv) {
  std::map<std::string, double> out;
  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() > 4) out[cells[0]] = std::stod(cells[4]);
  }
  return out;
}

Outcome end_to_end(const Options& opts) {
  Outcome out;
  const fs::path work = fs::absolute(opts.work_dir) / "end_to_end";
  fs::remove_all(work);
  fs::create_directories(work);
  const fs::path log = work / "cli.log";
  const std::string corpus = (work / "corpus").string();
  if (run_cli(opts, "gen-data --out " + corpus + " --size 64 --seed 0", log) != 0) {
    out.check(false, "gen-data failed, see " + log.string());
    return out;
  }

  int iasc_wins = 0;
  double slowest = 0.0;
  bool losses_ok = true, all_ran = true;
  for (int seed = 0; seed < 5; ++seed) {
    const fs::path dir = work / ("ablate_seed" + std::to_string(seed));
    const auto t0 = Clock::now();
    const int rc = run_cli(opts, "ablate --data " + corpus + " --out " + dir.string() + " --seed " + std::to_string(seed), log);
    const double elapsed = seconds_since(t0);
    slowest = std::max(slowest, elapsed);
    if (rc != 0) {
      all_ran = false;
      out.notes.push_back("FAIL seed " + std::to_string(seed) + ": ablate exited " + std::to_string(rc));
      continue;
    }
    std::string line = "     seed " + std::to_string(seed) + ": " + fmt("%.0f s", elapsed);
    for (const char* mode : {"finetune", "finetune+IASC"}) {
      const json m = json::parse(slurp(dir / mode / "manifest.json"));
      const double first = m.at("initial_loss"), last = m.at("final_loss");
      losses_ok = losses_ok && last < 0.2 * first;
      line += std::string(", ") + mode + " loss " + fmt("%.3f", first) + " -> " + fmt("%.3f", last) + " (" +
              fmt("%.1f%%", 100.0 * last / first) + ")";
    }
    const auto b4 = bleu4_by_mode(dir / "ablation.csv");
    const double ft = b4.at("finetune"), ia = b4.at("finetune+IASC");
    iasc_wins += ia >= ft;
    line += ", BLEU-4 no-finetune " + fmt("%.4f", b4.at("no-finetune")) + " finetune " + fmt("%.4f", ft) +
            " finetune+IASC " + fmt("%.4f", ia);
    out.notes.push_back(line);
  }
  out.check(all_ran, "five ablate runs on a 64-image synthetic corpus completed");
  out.check(slowest < 600.0, "slowest ablate run " + fmt("%.0f", slowest) + " s (< 600 s)");
  out.check(losses_ok, "final training loss < 20% of initial in both fine-tune modes for every seed");
  out.check(iasc_wins >= 3, "finetune+IASC BLEU-4 >= finetune in " + std::to_string(iasc_wins) + "/5 seeds (>= 3)");

  bool identical = all_ran;
  for (const char* mode : {"no-finetune", "finetune", "finetune+IASC"}) {
    if (!all_ran) break;
    const fs::path rerun = work / ("rerun_" + std::string(mode == std::string("finetune+IASC") ? "iasc" : mode));
    const fs::path original = work / "ablate_seed0" / mode;
    if (run_cli(opts, "train --data " + corpus + " --out " + rerun.string() + " --seed 0 --mode " + mode, log) != 0) {
      identical = false;
      continue;
    }
    for (const auto& entry : fs::directory_iterator(original)) {
      if (!entry.is_regular_file() || entry.path().filename() == "config.json") continue;
      const bool same = slurp(entry.path()) == slurp(rerun / entry.path().filename());
      if (!same) out.notes.push_back("FAIL " + std::string(mode) + "/" + entry.path().filename().string() + " differs");
      identical = identical && same;
    }
  }
  out.check(identical, "same-seed rerun of every mode reproduces all outputs byte-for-byte");
  return out;
}

struct Criterion {
  int id;
  const char* title;
  std::function<Outcome(const Options&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  Options opts;
  std::vector<int> only;
  app.add_option("--only", only, "Criterion numbers to run (default: all)");
  app.add_option("--work-dir", opts.work_dir, "Scratch directory for end-to-end runs");
  app.add_option("--cli", opts.cli, "Path to the ase command-line binary");
  app.add_option("--python", opts.python, "Python interpreter for the metric oracle (empty to use frozen values)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria = {
      {1, "gradient oracle", gradient_oracle},
      {2, "saliency equations exactness", saliency_exactness},
      {3, "saliency non-negativity and routing", saliency_nonnegativity},
      {4, "cross-attention symmetry", cross_attention_symmetry},
      {5, "pixel shuffle and tiling", pixel_shuffle_and_tiling},
      {6, "learning-rate schedule", lr_schedule},
      {7, "metric identities and oracle", metric_suite},
      {8, "end-to-end desk-scale ablation", end_to_end},
  };

  int passed = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    ++ran;
    const auto t0 = Clock::now();
    Outcome result;
    try {
      result = c.run(opts);
    } catch (const std::exception& e) {
      result.check(false, std::string("exception: ") + e.what());
    }
    passed += result.pass;
    std::printf("criterion %d %s: %s (%.1f s)\n", c.id, result.pass ? "PASS" : "FAIL", c.title, seconds_since(t0));
    for (const auto& n : result.notes) std::printf("    %s\n", n.c_str());
    std::fflush(stdout);
  }
  std::printf("acceptance: %d/%d criteria passed\n", passed, ran);
  return passed == ran ? 0 : 1;
}
