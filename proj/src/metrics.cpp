#include "radcorrect/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>

#include "radcorrect/errors.hpp"
#include "radcorrect/rng.hpp"

namespace radcorrect {

namespace {

using Ngram = std::vector<TokenId>;

std::map<Ngram, int> ngram_counts(const std::vector<TokenId>& seq, int k) {
  std::map<Ngram, int> counts;
  if (static_cast<int>(seq.size()) < k) return counts;
  for (std::size_t i = 0; i + k <= seq.size(); ++i)
    ++counts[Ngram(seq.begin() + i, seq.begin() + i + k)];
  return counts;
}

}  // namespace

double bleu_n(const std::vector<TokenId>& candidate,
              const std::vector<std::vector<TokenId>>& references, int n) {
  if (n < 1 || n > 4) throw ConfigError("bleu order must lie in 1..4");
  if (references.empty()) throw ConfigError("bleu requires at least one reference");
  if (candidate.empty()) return 0.0;

  double log_sum = 0.0;
  int used_orders = 0;
  for (int k = 1; k <= n; ++k) {
    const std::size_t c_k = candidate.size() >= static_cast<std::size_t>(k)
                                ? candidate.size() - k + 1
                                : 0;
    if (c_k == 0) continue;  // candidate too short for this order
    const std::map<Ngram, int> cand_counts = ngram_counts(candidate, k);
    std::map<Ngram, int> max_ref;
    for (const auto& ref : references) {
      for (const auto& [gram, count] : ngram_counts(ref, k)) {
        int& slot = max_ref[gram];
        slot = std::max(slot, count);
      }
    }
    std::size_t clipped = 0;
    for (const auto& [gram, count] : cand_counts) {
      const auto it = max_ref.find(gram);
      if (it != max_ref.end()) clipped += std::min(count, it->second);
    }
    double p;
    if (clipped == 0) {
      if (k == 1) return 0.0;  // zero unigram overlap
      p = 1.0 / static_cast<double>(c_k + 1);  // add-one smoothing
    } else {
      p = static_cast<double>(clipped) / static_cast<double>(c_k);
    }
    log_sum += std::log(p);
    ++used_orders;
  }
  const double geo = std::exp(log_sum / used_orders);

  // Brevity penalty against the closest reference length (ties -> shorter).
  const std::size_t c = candidate.size();
  std::size_t r = references[0].size();
  for (const auto& ref : references) {
    const auto diff = [&](std::size_t len) {
      return len > c ? len - c : c - len;
    };
    if (diff(ref.size()) < diff(r) || (diff(ref.size()) == diff(r) && ref.size() < r))
      r = ref.size();
  }
  const double bp = c >= r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return bp * geo;
}

std::size_t lcs_length(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
  const std::size_t n = a.size();
  const std::size_t m = b.size();
  std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double rouge_l_f1(const std::vector<TokenId>& candidate, const std::vector<TokenId>& reference) {
  if (candidate.empty() && reference.empty()) return 1.0;
  if (candidate.empty() || reference.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

std::string stem(const std::string& word) {
  if (word.size() >= 6 && word.compare(word.size() - 3, 3, "ies") == 0)
    return word.substr(0, word.size() - 3) + "y";
  static const char* kSuffixes[] = {"ing", "ed", "es", "s"};
  for (const char* suf : kSuffixes) {
    const std::size_t len = std::char_traits<char>::length(suf);
    if (word.size() >= len + 3 && word.compare(word.size() - len, len, suf) == 0)
      return word.substr(0, word.size() - len);
  }
  return word;
}

MeteorStats meteor_lite_stats(const std::vector<std::string>& candidate,
                              const std::vector<std::string>& reference) {
  MeteorStats stats;
  if (candidate.empty() || reference.empty()) return stats;

  constexpr std::size_t kUnmatched = static_cast<std::size_t>(-1);
  std::vector<std::size_t> match_of(candidate.size(), kUnmatched);  // cand idx -> ref idx
  std::vector<bool> ref_taken(reference.size(), false);

  // Stage 1: exact surface matches, first unmatched reference slot.
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    for (std::size_t j = 0; j < reference.size(); ++j) {
      if (!ref_taken[j] && candidate[i] == reference[j]) {
        match_of[i] = j;
        ref_taken[j] = true;
        break;
      }
    }
  }
  // Stage 2: stem matches for what remains.
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    if (match_of[i] != kUnmatched) continue;
    const std::string cs = stem(candidate[i]);
    for (std::size_t j = 0; j < reference.size(); ++j) {
      if (!ref_taken[j] && cs == stem(reference[j])) {
        match_of[i] = j;
        ref_taken[j] = true;
        break;
      }
    }
  }

  std::size_t matches = 0;
  std::size_t chunks = 0;
  std::size_t prev_i = kUnmatched, prev_j = kUnmatched;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    if (match_of[i] == kUnmatched) continue;
    ++matches;
    const bool contiguous = prev_i != kUnmatched && i == prev_i + 1 && match_of[i] == prev_j + 1;
    if (!contiguous) ++chunks;
    prev_i = i;
    prev_j = match_of[i];
  }
  stats.matches = matches;
  stats.chunks = chunks;
  if (matches == 0) return stats;

  const double m = static_cast<double>(matches);
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double f_mean = 10.0 * p * r / (r + 9.0 * p);
  const double frag = static_cast<double>(chunks) / m;
  const double penalty = 0.5 * frag * frag * frag;
  stats.score = f_mean * (1.0 - penalty);
  return stats;
}

double meteor_lite(const std::vector<std::string>& candidate,
                   const std::vector<std::string>& reference) {
  return meteor_lite_stats(candidate, reference).score;
}

CeScores ce_from_labels(const std::vector<std::vector<std::uint8_t>>& predicted,
                        const std::vector<std::vector<std::uint8_t>>& truth) {
  if (predicted.size() != truth.size())
    throw DataError("ce_metrics: prediction/truth report counts differ");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i].size() != truth[i].size())
      throw DataError("ce_metrics: label vector length mismatch at report " + std::to_string(i));
    for (std::size_t c = 0; c < predicted[i].size(); ++c) {
      const bool p = predicted[i][c] != 0;
      const bool t = truth[i][c] != 0;
      if (p && t) ++tp;
      if (p && !t) ++fp;
      if (!p && t) ++fn;
    }
  }
  CeScores s;
  s.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  s.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  s.f1 = s.precision + s.recall == 0.0 ? 0.0
                                       : 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

CeScores ce_metrics(const World& world, const std::vector<std::vector<TokenId>>& predicted,
                    const std::vector<std::vector<TokenId>>& truth) {
  if (predicted.size() != truth.size())
    throw DataError("ce_metrics: prediction/truth report counts differ");
  std::vector<std::vector<std::uint8_t>> pl, tl;
  pl.reserve(predicted.size());
  tl.reserve(truth.size());
  for (const auto& tokens : predicted) pl.push_back(world.extract_labels(tokens));
  for (const auto& tokens : truth) tl.push_back(world.extract_labels(tokens));
  return ce_from_labels(pl, tl);
}

CiEstimate bootstrap_ci(const std::vector<double>& per_report_scores, int resamples,
                        std::uint64_t seed) {
  if (per_report_scores.size() < 2)
    throw DataError("bootstrap_ci needs at least 2 report-level scores");
  if (resamples < 1) throw ConfigError("bootstrap resample count must be >= 1");
  const std::size_t n = per_report_scores.size();
  double total = 0.0;
  for (double v : per_report_scores) total += v;

  Rng rng(seed);
  std::vector<double> means;
  means.reserve(static_cast<std::size_t>(resamples));
  for (int r = 0; r < resamples; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      acc += per_report_scores[rng.uniform_int(0, static_cast<std::int64_t>(n) - 1)];
    means.push_back(acc / static_cast<double>(n));
  }
  std::sort(means.begin(), means.end());
  const auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(means.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, means.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return means[lo] * (1.0 - frac) + means[hi] * frac;
  };
  CiEstimate est;
  est.point = total / static_cast<double>(n);
  est.lower = quantile(0.025);
  est.upper = quantile(0.975);
  est.resamples = resamples;
  return est;
}

NlgScores nlg_scores(const std::vector<TokenId>& candidate, const std::vector<TokenId>& reference,
                     const Vocabulary& vocab) {
  NlgScores s;
  const std::vector<std::vector<TokenId>> refs{reference};
  for (int n = 1; n <= 4; ++n) s.bleu[static_cast<std::size_t>(n - 1)] = bleu_n(candidate, refs, n);
  s.rouge_l_f1 = rouge_l_f1(candidate, reference);
  std::vector<std::string> cw, rw;
  cw.reserve(candidate.size());
  rw.reserve(reference.size());
  for (TokenId t : candidate) cw.push_back(vocab.text(t));
  for (TokenId t : reference) rw.push_back(vocab.text(t));
  s.meteor = meteor_lite(cw, rw);
  return s;
}

}  // namespace radcorrect
