// Acceptance suite: one PASS/FAIL/SKIP line per criterion, exit 1 on any FAIL.
//
//   acceptance [--cli PATH] [--only P<n>]
//
// P11 reads EMBEDLENS_GPT2_MEDIUM and P12 reads EMBEDLENS_MULTIBERT_A and
// EMBEDLENS_MULTIBERT_B (exported model directories); unset means SKIP.

#include "../support.hpp"
#include "embedlens/algebra.hpp"
#include "embedlens/alignment.hpp"
#include "embedlens/checkpoint.hpp"
#include "embedlens/io.hpp"
#include "embedlens/metrics.hpp"
#include "embedlens/projection.hpp"
#include "embedlens/random.hpp"
#include "embedlens/synthetic.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace embedlens;

namespace {

struct Outcome {
  enum Status { pass, fail, skip } status = pass;
  std::string detail;
};

Outcome verdict(bool ok, const std::string& detail) { return {ok ? Outcome::pass : Outcome::fail, detail}; }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

template <typename T>
LayerWeights<T> random_layer(std::mt19937_64& rng, int d, int dff, int heads) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  LayerWeights<T> w;
  w.W_Q = testing::random_matrix<T>(rng, d, d, s);
  w.W_K = testing::random_matrix<T>(rng, d, d, s);
  w.W_V = testing::random_matrix<T>(rng, d, d, s);
  w.W_O = testing::random_matrix<T>(rng, d, d, s);
  w.K = testing::random_matrix<T>(rng, dff, d, s);
  w.V = testing::random_matrix<T>(rng, dff, d, s);
  w.num_heads = heads;
  return w;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- P1-P3

Outcome p1() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  double worst_f = 0, worst_d = 0;
  for (int t = 0; t < 20; ++t) {
    auto lf = random_layer<float>(rng, 32, 64, 4);
    auto ld = random_layer<double>(rng, 32, 64, 4);
    const MatF xf = testing::random_matrix<float>(rng, 8, 32);
    const MatD xd = testing::random_matrix<double>(rng, 8, 32);
    auto f = attention_oracle(xf, lf, causal_mask<float>(8));
    auto g = attention_oracle(xd, ld, causal_mask<double>(8));
    worst_f = std::max(worst_f, relative_frobenius<float>(f.concat, f.interaction));
    worst_d = std::max(worst_d, relative_frobenius<double>(g.concat, g.interaction));
  }
  const double secs = seconds_since(t0);
  return verdict(worst_f <= 1e-5 && worst_d <= 1e-10 && secs < 1.0,
                 "attention forms agree: f32 " + fmt(worst_f) + " f64 " + fmt(worst_d) + " in " + fmt(secs) + " s");
}

Outcome p2() {
  std::mt19937_64 rng(101);
  double worst_f = 0, worst_d = 0;
  for (int t = 0; t < 20; ++t) {
    auto lf = random_layer<float>(rng, 32, 64, 4);
    auto ld = random_layer<double>(rng, 32, 64, 4);
    const MatF xf = testing::random_matrix<float>(rng, 8, 32);
    const MatD xd = testing::random_matrix<double>(rng, 8, 32);
    for (const auto& h : split_heads(lf, 4))
      worst_f = std::max(worst_f, relative_frobenius<float>(head_scores_direct(xf, h), head_scores_interaction(xf, h)));
    for (const auto& h : split_heads(ld, 4))
      worst_d =
          std::max(worst_d, relative_frobenius<double>(head_scores_direct(xd, h), head_scores_interaction(xd, h)));
  }
  return verdict(worst_f <= 1e-5 && worst_d <= 1e-10,
                 "query-key scores agree: f32 " + fmt(worst_f) + " f64 " + fmt(worst_d));
}

Outcome p3() {
  std::mt19937_64 rng(103);
  double worst = 0;
  int heads_checked = 0;
  while (heads_checked < 20) {
    auto layer = random_layer<double>(rng, 32, 64, 4);
    for (const auto& h : split_heads(layer, 4)) {
      MatD svo = MatD::Zero(32, 32), sqk = MatD::Zero(32, 32);
      for (const auto& s : subheads(h, SubheadKind::vo)) svo += s.outer();
      for (const auto& s : subheads(h, SubheadKind::qk)) sqk += s.outer();
      // Oracle: the interaction matrices by a plain triple loop.
      worst = std::max(worst, relative_frobenius<double>(svo, testing::naive_matmul<double>(h.W_V, h.W_O)));
      worst = std::max(worst, relative_frobenius<double>(
                                  sqk, testing::naive_matmul<double>(h.W_Q, MatD(h.W_K.transpose()))));
      ++heads_checked;
    }
  }
  return verdict(worst <= 1e-6, "subhead sums over " + std::to_string(heads_checked) + " heads: " + fmt(worst));
}

// ---------------------------------------------------------------- P4-P6

template <typename T>
double penrose_worst(const Mat<T>& a, const Mat<T>& p) {
  const Mat<T> ap = a * p, pa = p * a;
  double w = relative_frobenius<T>(a * p * a, a);
  w = std::max(w, relative_frobenius<T>(p * a * p, p));
  w = std::max(w, relative_frobenius<T>(ap.transpose(), ap));
  w = std::max(w, relative_frobenius<T>(pa.transpose(), pa));
  return std::max(w, static_cast<double>((ap - Mat<T>::Identity(a.rows(), a.rows())).cwiseAbs().maxCoeff()));
}

Outcome p4() {
  std::mt19937_64 rng(104);
  double worst_f = 0, worst_d = 0;
  for (int d : {4, 8, 16})
    for (int e : {32, 64}) {
      const MatF f = testing::random_matrix<float>(rng, d, e);
      const MatD g = testing::random_matrix<double>(rng, d, e);
      worst_f = std::max(worst_f, penrose_worst<float>(f, pseudo_inverse<float>(f).matrix));
      worst_d = std::max(worst_d, penrose_worst<double>(g, pseudo_inverse<double>(g).matrix));
    }
  return verdict(worst_f <= 1e-4 && worst_d <= 1e-9,
                 "Penrose conditions and E E+ = I: f32 " + fmt(worst_f) + " f64 " + fmt(worst_d));
}

Outcome p5() {
  std::mt19937_64 rng(105);
  double worst = 1;
  for (int d : {4, 16})
    for (int e : {32, 64}) {
      const MatD E = testing::random_matrix<double>(rng, d, e);
      const Projector<double> proj(E, {InverseKind::pseudo_inverse, false, false});
      std::vector<std::pair<VecD, VecD>> pairs;
      for (int i = 0; i < 50; ++i)
        pairs.emplace_back(testing::random_vector<double>(rng, d), testing::random_vector<double>(rng, d));
      worst = std::min(worst, keep_k_inverse_score<double>(pairs, proj, e));
    }
  return verdict(worst >= 0.999, "keep-k score at k=e with pseudo-inverse: min " + fmt(worst));
}

Outcome p6() {
  std::mt19937_64 rng(106);
  std::size_t cases = 0, mismatches = 0;
  for (int e : {1, 2, 3, 7, 16, 33, 64})
    for (int d : {1, 2, 5, 16}) {
      MatF a = testing::random_matrix<float>(rng, e, d), b = testing::random_matrix<float>(rng, d, e);
      if (e >= 3) {  // quantized rows force exact ties
        a.row(1) = a.row(0);
        for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = std::round(a.data()[i] * 2) / 2;
      }
      const FactoredMatrix<float> fm(a, b);
      const auto full = testing::naive_matmul<float>(a, b);
      for (int k : {1, 5, 25}) {
        if (k > e * e) continue;
        const auto oracle = testing::brute_force_top_pairs<float>(full, static_cast<std::size_t>(k));
        for (int block : {1, 3, e})
          for (int threads : {1, 4}) {
            ++cases;
            if (top_pairs(fm, k, block, threads) != oracle) ++mismatches;
          }
      }
    }
  return verdict(mismatches == 0, std::to_string(cases) + " streaming configurations, " + std::to_string(mismatches) +
                                      " mismatches against brute force");
}

// ---------------------------------------------------------------- P7-P9

Outcome p7() {
  std::mt19937_64 rng(107);
  int bad = 0;
  for (int t = 0; t < 50; ++t) {
    const MatD S = testing::random_matrix<double>(rng, 6, 6);
    std::vector<int> perm = {0, 1, 2, 3, 4, 5};
    double best = -1e300;
    do {
      double s = 0;
      for (int i = 0; i < 6; ++i) s += S(i, perm[i]);
      best = std::max(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    const auto r = hungarian(S);
    double got = 0;
    for (int i = 0; i < 6; ++i) got += S(i, r.permutation[i]);
    if (std::abs(got - best) > 1e-12 || std::abs(r.objective - best) > 1e-12) ++bad;
  }
  const auto id = hungarian(MatD::Identity(6, 6));
  const bool identity = id.permutation == std::vector<int>{0, 1, 2, 3, 4, 5};
  return verdict(bad == 0 && identity, std::to_string(50 - bad) + "/50 optimal against exhaustive search, identity " +
                                           (identity ? "maps to itself" : "does not map to itself"));
}

Outcome p8() {
  bool ok = true;
  std::string failed;
  for (std::uint64_t seed : {81, 82}) {
    const auto store = synthetic_store({6, 2, 16, 32, 64, seed, DType::f64});
    const Projector<double> proj(store.embedding<double>(), {});
    for (auto g : all_groups()) {
      AlignOptions opt;
      opt.sample = store.group_vectors<double>(0, g).rows();  // every vector
      opt.seed = seed;
      const auto r = align_models(store, store, {g}, proj, proj, opt).per_group.front();
      for (std::size_t l = 0; l < r.permutation.size(); ++l)
        if (r.permutation[l] != static_cast<int>(l)) {
          ok = false;
          failed += " " + r.group;
          break;
        }
    }
  }
  return verdict(ok, ok ? "identity layer permutation for all six groups on two 6-layer models"
                        : "non-identity groups:" + failed);
}

std::vector<Eigen::Index> plain_top(const VecD& v, Eigen::Index k) {
  return testing::sort_oracle_top_k<double>(v, static_cast<std::size_t>(k));
}

double set_jaccard(const std::vector<Eigen::Index>& a, const std::vector<Eigen::Index>& b) {
  const auto sa = testing::as_set(a), sb = testing::as_set(b);
  std::size_t inter = 0;
  for (auto x : sa) inter += sb.count(x);
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

Outcome p9() {
  std::mt19937_64 rng(109);
  int mismatches = 0, range_violations = 0;
  // Oracles on e <= 64 fixtures.
  for (int t = 0; t < 200; ++t) {
    const int e = 8 + static_cast<int>(rng() % 57), k = 1 + static_cast<int>(rng() % 8);
    const VecD x = testing::random_vector<double>(rng, e), y = testing::random_vector<double>(rng, e);
    if (std::abs(sim_k<double>(x, y, k) - set_jaccard(plain_top(x, k), plain_top(y, k))) > 1e-15) ++mismatches;

    std::vector<VecD> active;
    std::set<Eigen::Index> uni;
    for (int i = 0; i < 3; ++i) {
      active.push_back(testing::random_vector<double>(rng, e));
      for (auto id : plain_top(active.back(), k)) uni.insert(id);
    }
    std::size_t hit = 0;
    for (auto id : plain_top(x, k)) hit += uni.count(id);
    if (std::abs(r_k<double>(x, active, k) - static_cast<double>(hit) / k) > 1e-15) ++mismatches;

    const std::vector<double> u(x.data(), x.data() + e), v(y.data(), y.data() + e);
    if (std::abs(pearson<double>(x, y).r - testing::plain_pearson(u, v)) > 1e-12) ++mismatches;
  }
  {
    const auto store = synthetic_store({2, 2, 8, 16, 48, 34, DType::f64});
    const Projector<double> proj(store.embedding<double>(), {});
    const MatD E = store.embedding<double>();
    const auto shuffle = seeded_shuffler(9);
    const std::pair<ParamGroup, ParamGroup> groups[] = {
        {ParamGroup::K_ff, ParamGroup::V_ff}, {ParamGroup::W_V, ParamGroup::W_O}, {ParamGroup::W_Q, ParamGroup::W_K}};
    const Pairing pairings[] = {Pairing::ff_kv, Pairing::attn_vo, Pairing::attn_qk};
    for (int p = 0; p < 3; ++p) {
      const auto reports = related_pairs_report(store, pairings[p], 10, proj, shuffle, 3);
      for (int l = 0; l < 2; ++l) {
        const MatD xs = store.group_vectors<double>(l, groups[p].first),
                   ys = store.group_vectors<double>(l, groups[p].second);
        const auto perm = shuffle(l, static_cast<std::size_t>(xs.rows()));
        double aligned = 0, baseline = 0;
        for (Eigen::Index j = 0; j < xs.rows(); ++j) {
          const auto tx = plain_top(E.transpose() * xs.row(j).transpose(), 10);
          aligned += set_jaccard(tx, plain_top(E.transpose() * ys.row(j).transpose(), 10));
          baseline += set_jaccard(tx, plain_top(E.transpose() * ys.row(perm[j]).transpose(), 10));
        }
        if (std::abs(reports[l].aligned - aligned / xs.rows()) > 1e-12 ||
            std::abs(reports[l].baseline - baseline / xs.rows()) > 1e-12)
          ++mismatches;
      }
    }
  }
  // Documented ranges and symmetries on 1000 random inputs.
  for (int t = 0; t < 1000; ++t) {
    const int e = 2 + static_cast<int>(rng() % 63), k = 1 + static_cast<int>(rng() % e);
    const VecD x = testing::random_vector<double>(rng, e), y = testing::random_vector<double>(rng, e);
    const double s = sim_k<double>(x, y, k), r = r_k<double>(x, {y}, k), c = pearson<double>(x, y).r;
    if (s < 0 || s > 1 || s != sim_k<double>(y, x, k) || sim_k<double>(x, x, k) != 1) ++range_violations;
    if (r < 0 || r > 1 || r_k<double>(x, {x}, k) != 1) ++range_violations;
    if (c < -1 || c > 1 || std::abs(c - pearson<double>(y, x).r) > 1e-15) ++range_violations;
  }
  return verdict(mismatches == 0 && range_violations == 0,
                 std::to_string(mismatches) + " oracle mismatches, " + std::to_string(range_violations) +
                     " range violations over 1000 random inputs");
}

// ---------------------------------------------------------------- P10

int run(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

// Concatenated contents of a file or of every file in a directory.
std::string snapshot(const fs::path& p) {
  if (!fs::exists(p)) return "<missing>";
  if (fs::is_regular_file(p)) return read_file(p);
  std::vector<fs::path> files;
  for (const auto& f : fs::recursive_directory_iterator(p))
    if (f.is_regular_file()) files.push_back(f.path());
  std::sort(files.begin(), files.end());
  std::string s;
  for (const auto& f : files) s += fs::relative(f, p).string() + "\n" + read_file(f) + "\n";
  return s;
}

Outcome p10(const std::string& cli) {
  if (cli.empty()) return {Outcome::skip, "no --cli given"};
  const fs::path dir = testing::temp_dir("acceptance_p10");
  const fs::path a = dir / "a", b = dir / "b";
  const std::string exe = quote(cli);
  if (run(exe + " synth --out " + quote(a) + " --seed 1 --layers 3 --heads 2 --hidden-dim 16 --ff-dim 32 "
                                               "--vocab-size 96 --tokens 12 2>/dev/null") != 0 ||
      run(exe + " synth --out " + quote(b) + " --seed 2 --layers 3 --heads 2 --hidden-dim 16 --ff-dim 32 "
                                               "--vocab-size 96 2>/dev/null") != 0)
    return {Outcome::fail, "synth failed"};

  const std::string ma = " --model " + quote(a);
  struct Case {
    std::string name, args;
    bool threaded;  // accepts --threads
  };
  const std::vector<Case> cases = {
      {"inspect", "inspect" + ma, false},
      {"project", "project" + ma + " --layer 1 --group K_ff --k 7", true},
      {"project-hidden", "project" + ma + " --hidden " + quote(a / "hidden.safetensors") + " --layer 2 --fold-ln", true},
      {"top-pairs", "top-pairs" + ma + " --layer 2 --k 20 --block-rows 5", true},
      {"top-pairs-qk", "top-pairs" + ma + " --layer 0 --kind qk --inverse pinv --k 20", true},
      {"simk", "simk" + ma + " --pairing attn-vo --k 10 --seed 5", true},
      {"rk", "rk" + ma + " --m 4 --k 10 --seed 5", true},
      {"keepk-score", "keepk-score" + ma + " --sample 40 --k 5,20 --inverses transpose,pinv --seed 5", true},
      {"keepk-ff", "keepk-score" + ma + " --distribution ff-values --sample 30 --k 10 --seed 5", true},
      {"align", "align --a " + quote(a) + " --b " + quote(b) + " --sample 16 --seed 5", true},
      {"stitch-kernel", "stitch-kernel --a " + quote(a) + " --b " + quote(b), true},
      {"diff", "diff --base " + quote(a) + " --tuned " + quote(b) + " --select 'ff\\.V' --index 0,1 --k 5", true},
      {"lookup", "lookup" + ma + " --tokens t1,t2 --k 5", true},
      {"self-test", "self-test --seed 5", true},
      {"synth", "synth --seed 9 --tokens 4", false},
  };
  std::vector<std::string> failures;
  for (const auto& c : cases) {
    std::vector<std::string> outputs;
    const std::vector<std::string> variants =
        c.threaded ? std::vector<std::string>{" --threads 1", " --threads 1", " --threads 4"}
                   : std::vector<std::string>{"", ""};
    int n = 0;
    bool ran = true;
    for (const auto& v : variants) {
      const fs::path out = dir / (c.name + "." + std::to_string(n++));
      std::string cmd = exe + " " + c.args + v + " --out " + quote(out);
      if (c.name == "stitch-kernel") cmd = exe + " " + c.args + " --out " + quote(out / "k.safetensors");
      if (c.name == "stitch-kernel") fs::create_directories(out);
      if (run(cmd + " 2>/dev/null") != 0) ran = false;
      outputs.push_back(snapshot(out));
    }
    if (!ran) failures.push_back(c.name + " (exit)");
    else if (std::adjacent_find(outputs.begin(), outputs.end(), std::not_equal_to<>()) != outputs.end())
      failures.push_back(c.name);
  }
  std::string detail = std::to_string(cases.size()) + " invocations byte-identical across reruns and threads";
  if (!failures.empty()) {
    detail = "differing:";
    for (const auto& f : failures) detail += " " + f;
  }
  return verdict(failures.empty(), detail);
}

// ---------------------------------------------------------------- P11-P12

const char* env(const char* name) {
  const char* v = std::getenv(name);
  return v && *v ? v : nullptr;
}

WeightStore load_dir(const fs::path& dir) {
  return load_checkpoint(dir / "weights.safetensors", load_config(dir / "config.json"));
}

Outcome p11() {
  const char* dir = env("EMBEDLENS_GPT2_MEDIUM");
  if (!dir) return {Outcome::skip, "EMBEDLENS_GPT2_MEDIUM not set"};
  const auto store = load_dir(dir);
  const auto& cfg = store.config();
  MatF samples(300, cfg.hidden_dim);
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    auto rng = stream_rng(0, static_cast<std::uint64_t>(i));
    for (Eigen::Index j = 0; j < samples.cols(); ++j) samples(i, j) = static_cast<float>(standard_normal(rng));
  }
  const MatF E = store.embedding<float>();
  const Projector<float> transpose(E, {});
  const double st = keep_k_inverse_score_all_pairs<float>(samples, transpose, 1000, 4);
  const Projector<float> pinv(E, {InverseKind::pseudo_inverse, false, false});
  const double sp = keep_k_inverse_score_all_pairs<float>(samples, pinv, 1000, 4);
  const bool ok = std::abs(st - 0.83) <= 0.10 && std::abs(sp - 0.10) <= 0.10;
  return verdict(ok, "keep-k score at k=1000: transpose " + fmt(st) + " (paper 0.83), pinv " + fmt(sp) +
                         " (paper 0.10)");
}

Outcome p12() {
  const char* da = env("EMBEDLENS_MULTIBERT_A");
  const char* db = env("EMBEDLENS_MULTIBERT_B");
  if (!da || !db) return {Outcome::skip, "EMBEDLENS_MULTIBERT_A/EMBEDLENS_MULTIBERT_B not set"};
  const auto a = load_dir(da), b = load_dir(db);
  const Projector<float> pa(a.embedding<float>(), {}), pb(b.embedding<float>(), {});
  auto diagonal = [&](bool projected) {
    AlignOptions opt;
    opt.projected = projected;
    opt.threads = 4;
    const auto r = align_models(a, b, {ParamGroup::K_ff}, pa, pb, opt).per_group.front();
    int n = 0;
    for (std::size_t l = 0; l < r.permutation.size(); ++l) n += r.permutation[l] == static_cast<int>(l);
    return n;
  };
  const int projected = diagonal(true), raw = diagonal(false);
  return verdict(projected >= 8 && raw < projected, "FF keys diagonal matches: projected " +
                                                        std::to_string(projected) + "/" +
                                                        std::to_string(a.config().num_layers) + ", unprojected " +
                                                        std::to_string(raw));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string cli, only;
  app.add_option("--cli", cli, "embedlens executable for the determinism check");
  app.add_option("--only", only, "Run a single criterion, e.g. P6");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"P1", p1},  {"P2", p2},  {"P3", p3},  {"P4", p4},
      {"P5", p5},  {"P6", p6},  {"P7", p7},  {"P8", p8},
      {"P9", p9},  {"P10", [&] { return p10(cli); }},
      {"P11", p11}, {"P12", p12},
  };
  int failed = 0;
  for (const auto& [id, check] : criteria) {
    if (!only.empty() && only != id) continue;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {Outcome::fail, std::string("exception: ") + e.what()};
    }
    const char* word = o.status == Outcome::pass ? "PASS" : o.status == Outcome::fail ? "FAIL" : "SKIP";
    std::cout << id << " " << word << " " << o.detail << std::endl;
    failed += o.status == Outcome::fail;
  }
  return failed == 0 ? 0 : 1;
}
