#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "radcorrect/vocab.hpp"
#include "radcorrect/world.hpp"

namespace radcorrect {

struct NlgScores {
  std::array<double, 4> bleu{};  // BLEU-1..4
  double rouge_l_f1 = 0.0;
  double meteor = 0.0;
};

struct CeScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct CiEstimate {
  double point = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  int resamples = 0;
};

// Modified n-gram precision with geometric mean over orders 1..n, brevity
// penalty, and add-one smoothing on zero counts for orders >= 2. Orders the
// candidate is too short to instantiate are skipped. Empty candidate -> 0.
double bleu_n(const std::vector<TokenId>& candidate,
              const std::vector<std::vector<TokenId>>& references, int n);

std::size_t lcs_length(const std::vector<TokenId>& a, const std::vector<TokenId>& b);

// P = LCS/|cand|, R = LCS/|ref|, F1 = 2PR/(P+R). Both empty -> 1, one empty -> 0.
double rouge_l_f1(const std::vector<TokenId>& candidate, const std::vector<TokenId>& reference);

// Light suffix stemmer used by the METEOR alignment stage.
std::string stem(const std::string& word);

struct MeteorStats {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  double score = 0.0;
};

// Unigram alignment by exact match then stem match; F_mean = 10PR/(R+9P);
// fragmentation penalty 0.5*(chunks/matches)^3. No matches -> 0.
MeteorStats meteor_lite_stats(const std::vector<std::string>& candidate,
                              const std::vector<std::string>& reference);
double meteor_lite(const std::vector<std::string>& candidate,
                   const std::vector<std::string>& reference);

// Micro-averaged P/R/F1 over (report, class) positives.
CeScores ce_from_labels(const std::vector<std::vector<std::uint8_t>>& predicted,
                        const std::vector<std::vector<std::uint8_t>>& truth);
// Convenience: both sides run through world.extract_labels first.
CeScores ce_metrics(const World& world, const std::vector<std::vector<TokenId>>& predicted,
                    const std::vector<std::vector<TokenId>>& truth);

// Percentile bootstrap of the mean over report-level resampling.
CiEstimate bootstrap_ci(const std::vector<double>& per_report_scores, int resamples,
                        std::uint64_t seed);

// BLEU-1..4 + ROUGE-L + METEOR against a single reference; METEOR sees the
// detokenized words.
NlgScores nlg_scores(const std::vector<TokenId>& candidate, const std::vector<TokenId>& reference,
                     const Vocabulary& vocab);

}  // namespace radcorrect
