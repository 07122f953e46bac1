#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "radcorrect/errors.hpp"
#include "radcorrect/metrics.hpp"
#include "radcorrect/rng.hpp"

using namespace radcorrect;

namespace {

using Seq = std::vector<TokenId>;

// Independent LCS oracle: enumerate all subsequences of the shorter sequence
// and test membership in the longer one.
std::size_t brute_force_lcs(const Seq& a, const Seq& b) {
  const Seq& small = a.size() <= b.size() ? a : b;
  const Seq& large = a.size() <= b.size() ? b : a;
  std::size_t best = 0;
  const std::size_t n = small.size();
  for (std::size_t mask = 0; mask < (std::size_t(1) << n); ++mask) {
    Seq sub;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (std::size_t(1) << i)) sub.push_back(small[i]);
    if (sub.size() <= best) continue;
    std::size_t j = 0;
    for (std::size_t i = 0; i < large.size() && j < sub.size(); ++i)
      if (large[i] == sub[j]) ++j;
    if (j == sub.size()) best = sub.size();
  }
  return best;
}

}  // namespace

TEST_CASE("bleu identity and disjoint cases are exact") {
  const Seq ref{1, 2, 3, 4, 5};
  for (int n = 1; n <= 4; ++n) {
    CHECK(bleu_n(ref, {ref}, n) == doctest::Approx(1.0).epsilon(1e-12));
  }
  // identity shorter than the order: vacuous orders are skipped, still 1.0
  const Seq two{7, 8};
  CHECK(bleu_n(two, {two}, 4) == doctest::Approx(1.0).epsilon(1e-12));

  const Seq other{9, 10, 11};
  for (int n = 1; n <= 4; ++n) CHECK(bleu_n(ref, {other}, n) == 0.0);
  CHECK(bleu_n({}, {ref}, 2) == 0.0);
  CHECK_THROWS_AS(bleu_n(ref, {ref}, 0), ConfigError);
  CHECK_THROWS_AS(bleu_n(ref, {ref}, 5), ConfigError);
  CHECK_THROWS_AS(bleu_n(ref, {}, 1), ConfigError);
}

TEST_CASE("bleu hand-evaluated brevity penalty") {
  // candidate "a b c" vs reference "a b c d": p1 = 1, BP = exp(1 - 4/3)
  const Seq cand{1, 2, 3};
  const Seq ref{1, 2, 3, 4};
  const double expected = std::exp(1.0 - 4.0 / 3.0);
  CHECK(bleu_n(cand, {ref}, 1) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(bleu_n(cand, {ref}, 1) == doctest::Approx(0.71653131057378927).epsilon(1e-12));
}

TEST_CASE("bleu higher orders and add-one smoothing") {
  // cand "a b x", ref "a b y": p1 = 2/3, p2 = 1/2, p3 smoothed to 1/2
  const Seq cand{1, 2, 30};
  const Seq ref{1, 2, 31};
  CHECK(bleu_n(cand, {ref}, 2) ==
        doctest::Approx(std::sqrt(2.0 / 3.0 * 0.5)).epsilon(1e-12));
  CHECK(bleu_n(cand, {ref}, 3) ==
        doctest::Approx(std::cbrt(2.0 / 3.0 * 0.5 * 0.5)).epsilon(1e-12));
  CHECK(bleu_n(cand, {ref}, 3) == doctest::Approx(0.55032120814910444).epsilon(1e-12));
}

TEST_CASE("bleu clips candidate n-gram counts against the references") {
  const Seq cand{1, 1, 1, 1};
  const Seq ref{1, 1};
  CHECK(bleu_n(cand, {ref}, 1) == doctest::Approx(0.5).epsilon(1e-12));
  // two references: the clip uses the per-reference maximum
  const Seq ref3{1, 1, 1};
  CHECK(bleu_n(cand, {ref, ref3}, 1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("rouge_l identity, emptiness conventions and hand value") {
  const Seq a{1, 2, 3};
  CHECK(rouge_l_f1(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rouge_l_f1({}, {}) == 1.0);
  CHECK(rouge_l_f1(a, {}) == 0.0);
  CHECK(rouge_l_f1({}, a) == 0.0);
  // "a c d" vs "a b c d": LCS 3, P = 1, R = 0.75, F1 = 6/7
  CHECK(rouge_l_f1({1, 3, 4}, {1, 2, 3, 4}) == doctest::Approx(6.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("rouge_l DP equals brute-force LCS on 200 random pairs") {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    Seq a(static_cast<std::size_t>(rng.uniform_int(0, 8)));
    Seq b(static_cast<std::size_t>(rng.uniform_int(0, 8)));
    for (auto& t : a) t = static_cast<TokenId>(rng.uniform_int(0, 3));
    for (auto& t : b) t = static_cast<TokenId>(rng.uniform_int(0, 3));
    CHECK(lcs_length(a, b) == brute_force_lcs(a, b));
  }
}

TEST_CASE("meteor identity formula, disjoint zero and fragmentation") {
  const std::vector<std::string> four{"alpha", "beta", "gamma", "delta"};
  MeteorStats id = meteor_lite_stats(four, four);
  CHECK(id.matches == 4);
  CHECK(id.chunks == 1);
  CHECK(id.score == doctest::Approx(1.0 - 0.5 / 64.0).epsilon(1e-12));
  CHECK(id.score == doctest::Approx(0.9921875).epsilon(1e-12));

  CHECK(meteor_lite({"a", "b"}, {"c", "d"}) == 0.0);
  CHECK(meteor_lite({}, four) == 0.0);

  // single shared token among 4 on each side: m=1, chunks=1, penalty=0.5
  MeteorStats one = meteor_lite_stats({"alpha", "x", "y", "z"}, {"alpha", "p", "q", "r"});
  CHECK(one.matches == 1);
  CHECK(one.chunks == 1);
  const double f_mean = 10.0 * 0.25 * 0.25 / (0.25 + 9.0 * 0.25);
  CHECK(one.score == doctest::Approx(f_mean * 0.5).epsilon(1e-12));
  CHECK(one.score == doctest::Approx(0.125).epsilon(1e-12));

  // two chunks: cand "a b c d" vs ref "a b x c d"
  MeteorStats two = meteor_lite_stats({"a", "b", "c", "d"}, {"a", "b", "x", "c", "d"});
  CHECK(two.matches == 4);
  CHECK(two.chunks == 2);
  CHECK(two.score == doctest::Approx((8.0 / 9.8) * (1.0 - 0.0625)).epsilon(1e-12));
}

TEST_CASE("meteor stem stage aligns inflected forms") {
  CHECK(stem("opacities") == "opacity");
  CHECK(stem("effusions") == "effusion");
  CHECK(stem("worsening") == "worsen");
  CHECK(stem("the") == "the");  // too short to strip
  MeteorStats s = meteor_lite_stats({"opacities"}, {"opacity"});
  CHECK(s.matches == 1);
  CHECK(s.score > 0.0);
}

TEST_CASE("ce metrics hand counts and conventions") {
  using L = std::vector<std::uint8_t>;
  const std::vector<L> truth{{1, 0, 1}, {0, 1, 0}};
  CHECK(ce_from_labels(truth, truth).f1 == doctest::Approx(1.0));
  CHECK(ce_from_labels(truth, truth).precision == doctest::Approx(1.0));

  const std::vector<L> none{{0, 0, 0}, {0, 0, 0}};
  const CeScores silent = ce_from_labels(none, truth);
  CHECK(silent.precision == 0.0);
  CHECK(silent.recall == 0.0);
  CHECK(silent.f1 == 0.0);

  // TP=2, FP=1, FN=1 -> 2/3 everywhere
  const std::vector<L> pred{{1, 1, 0}, {0, 1, 0}};
  const CeScores s = ce_from_labels(pred, truth);
  CHECK(s.precision == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(s.recall == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(s.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  // micro-F1 equals the harmonic mean of its own P and R
  const double harm = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  CHECK(s.f1 == doctest::Approx(harm).epsilon(1e-12));

  CHECK_THROWS_AS(ce_from_labels({{1}}, truth), DataError);
  CHECK_THROWS_AS(ce_from_labels({{1}, {1, 0}}, truth), DataError);
}

TEST_CASE("ce metrics through label extraction") {
  World w{WorldConfig{}};
  const LatentState st = w.sample_state(404);
  const ReportText rt = w.render_report(st);
  const CeScores s = ce_metrics(w, {rt.tokens}, {rt.tokens});
  const auto labels = w.state_labels(st);
  const bool any_positive = std::any_of(labels.begin(), labels.end(),
                                        [](std::uint8_t v) { return v != 0; });
  if (any_positive) {
    CHECK(s.precision == doctest::Approx(1.0));
    CHECK(s.recall == doctest::Approx(1.0));
    CHECK(s.f1 == doctest::Approx(1.0));
  }
}

TEST_CASE("bootstrap interval collapses on constants and is deterministic") {
  const std::vector<double> constant(10, 0.375);
  const CiEstimate c = bootstrap_ci(constant, 500, 42);
  CHECK(c.point == doctest::Approx(0.375).epsilon(1e-12));
  CHECK(c.lower == doctest::Approx(0.375).epsilon(1e-12));
  CHECK(c.upper == doctest::Approx(0.375).epsilon(1e-12));

  std::vector<double> varied{0.1, 0.9, 0.3, 0.7, 0.5, 0.2, 0.8};
  const CiEstimate a = bootstrap_ci(varied, 1000, 7);
  const CiEstimate b = bootstrap_ci(varied, 1000, 7);
  CHECK(a.lower == b.lower);
  CHECK(a.upper == b.upper);
  CHECK(a.lower <= a.point);
  CHECK(a.point <= a.upper);
  CHECK(a.resamples == 1000);

  CHECK_THROWS_AS(bootstrap_ci({0.5}, 100, 1), DataError);
  CHECK_THROWS_AS(bootstrap_ci(varied, 0, 1), ConfigError);
}

TEST_CASE("bootstrap width on gaussian scores matches the analytic scale") {
  Rng rng(555);
  std::vector<double> scores(1000);
  for (double& v : scores) v = rng.normal();
  const CiEstimate est = bootstrap_ci(scores, 1000, 99);
  const double width = est.upper - est.lower;
  const double analytic = 2.0 * 1.96 / std::sqrt(1000.0);
  CHECK(width >= 0.8 * analytic);
  CHECK(width <= 1.2 * analytic);
}

TEST_CASE("all scores stay within [0,1] on random token sequences") {
  Rng rng(31337);
  for (int trial = 0; trial < 100; ++trial) {
    Seq a(static_cast<std::size_t>(rng.uniform_int(1, 12)));
    Seq b(static_cast<std::size_t>(rng.uniform_int(1, 12)));
    for (auto& t : a) t = static_cast<TokenId>(rng.uniform_int(0, 5));
    for (auto& t : b) t = static_cast<TokenId>(rng.uniform_int(0, 5));
    for (int n = 1; n <= 4; ++n) {
      const double v = bleu_n(a, {b}, n);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    const double r = rouge_l_f1(a, b);
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
    std::vector<std::string> aw, bw;
    for (auto t : a) aw.push_back("w" + std::to_string(t));
    for (auto t : b) bw.push_back("w" + std::to_string(t));
    const double m = meteor_lite(aw, bw);
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);
  }
}
