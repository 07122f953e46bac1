#include "radcorrect/errorgen.hpp"

#include <algorithm>

namespace radcorrect {

namespace {

// One planned rewrite in source-report coordinates; [begin, end) is replaced
// by tokens (begin == end inserts).
struct Edit {
  std::size_t begin = 0;
  std::size_t end = 0;
  ErrorType etype = ErrorType::kFalseFinding;
  std::vector<TokenId> tokens;
};

struct SentenceInfo {
  const SentenceSpan* span = nullptr;
  std::size_t index = 0;
};

SentenceInfo sentence_of_finding(const ReportText& report, int finding_index) {
  for (std::size_t i = 0; i < report.sentence_map.size(); ++i) {
    if (report.sentence_map[i].finding_index == finding_index) {
      return {&report.sentence_map[i], i};
    }
  }
  throw DataError("no sentence mapped to finding " + std::to_string(finding_index));
}

// Locates the adjacent [side, vertical] pair of a positive sentence.
std::size_t location_phrase_at(const World& w, const ReportText& report, const SentenceSpan& s,
                               const Finding& f) {
  const TokenId side = w.side_token(f.location.side);
  const TokenId vert = w.vertical_token(f.location.vertical);
  for (std::size_t i = s.begin; i + 1 < s.end; ++i) {
    if (report.tokens[i] == side && report.tokens[i + 1] == vert) return i;
  }
  throw DataError("location phrase not found in mapped sentence");
}

std::size_t severity_word_at(const World& w, const ReportText& report, const SentenceSpan& s,
                             const Finding& f) {
  const TokenId sev = w.severity_token(f.severity);
  for (std::size_t i = s.begin; i < s.end; ++i) {
    if (report.tokens[i] == sev) return i;
  }
  throw DataError("severity word not found in mapped sentence");
}

std::vector<int> positive_indices(const LatentState& state) {
  std::vector<int> out;
  for (std::size_t i = 0; i < state.findings.size(); ++i) {
    if (state.findings[i].positive()) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<int> absent_classes(const World& w, const LatentState& state) {
  std::vector<char> present(static_cast<std::size_t>(w.config().num_classes), 0);
  for (const Finding& f : state.findings) present[static_cast<std::size_t>(f.condition)] = 1;
  std::vector<int> out;
  for (int c = 0; c < w.config().num_classes; ++c) {
    if (!present[static_cast<std::size_t>(c)]) out.push_back(c);
  }
  return out;
}

// Normal statements are replaceable; the orientation line and the impression
// are not.
std::vector<std::size_t> replaceable_normal_sentences(const World& w, const ReportText& report) {
  const TokenId impression = w.vocab().id("impression");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < report.sentence_map.size(); ++i) {
    const SentenceSpan& s = report.sentence_map[i];
    if (s.finding_index >= 0) continue;
    if (report.tokens[s.begin] == impression) continue;
    if (w.grammar().orientation_line && i == 0) continue;
    out.push_back(i);
  }
  return out;
}

std::size_t impression_start(const World& w, const ReportText& report) {
  const TokenId impression = w.vocab().id("impression");
  for (const SentenceSpan& s : report.sentence_map) {
    if (s.finding_index < 0 && report.tokens[s.begin] == impression) return s.begin;
  }
  return report.tokens.size();
}

Edit plan_false_finding(const World& w, const ReportText& report, const LatentState& state,
                        Rng& rng) {
  const auto classes = absent_classes(w, state);
  if (classes.empty()) throw FeasibilityError("no absent class available for FalseFinding");
  Finding f;
  f.condition = classes[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(classes.size()) - 1))];
  f.severity = static_cast<Severity>(1 + rng.uniform_int(0, 2));
  f.location.side = static_cast<Side>(rng.uniform_int(0, 2));
  f.location.vertical = static_cast<Vertical>(rng.uniform_int(0, 3));
  f.comparison = rng.bernoulli(w.config().comparison_prob)
                     ? static_cast<Comparison>(1 + rng.uniform_int(0, 2))
                     : Comparison::kAbsent;
  const std::uint64_t variant = rng.next_u64();
  Edit e;
  e.etype = ErrorType::kFalseFinding;
  e.tokens = w.positive_sentence(f, variant);
  const auto replaceable = replaceable_normal_sentences(w, report);
  if (!replaceable.empty()) {
    const std::size_t pick = replaceable[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(replaceable.size()) - 1))];
    e.begin = report.sentence_map[pick].begin;
    e.end = report.sentence_map[pick].end;
  } else {
    e.begin = e.end = impression_start(w, report);
  }
  return e;
}

Edit plan_mislocation(const World& w, const ReportText& report, const LatentState& state, Rng& rng) {
  const auto positives = positive_indices(state);
  if (positives.empty()) throw FeasibilityError("no positive finding for Mislocation");
  const int idx = positives[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(positives.size()) - 1))];
  const Finding& f = state.findings[static_cast<std::size_t>(idx)];
  const SentenceInfo si = sentence_of_finding(report, idx);
  const std::size_t at = location_phrase_at(w, report, *si.span, f);
  std::vector<Location> alternatives;
  for (int s = 0; s < 3; ++s) {
    for (int v = 0; v < 4; ++v) {
      Location cand{static_cast<Side>(s), static_cast<Vertical>(v)};
      if (!(cand == f.location)) alternatives.push_back(cand);
    }
  }
  const Location pick = alternatives[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(alternatives.size()) - 1))];
  Edit e;
  e.etype = ErrorType::kMislocation;
  e.begin = at;
  e.end = at + 2;
  e.tokens = {w.side_token(pick.side), w.vertical_token(pick.vertical)};
  return e;
}

Edit plan_severity_shift(const World& w, const ReportText& report, const LatentState& state,
                         Rng& rng) {
  const auto positives = positive_indices(state);
  if (positives.empty()) throw FeasibilityError("no positive finding for SeverityShift");
  const int idx = positives[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(positives.size()) - 1))];
  const Finding& f = state.findings[static_cast<std::size_t>(idx)];
  const SentenceInfo si = sentence_of_finding(report, idx);
  const std::size_t at = severity_word_at(w, report, *si.span, f);
  // shift 1..2 ordinal steps, staying a positive severity
  std::vector<Severity> targets;
  const int cur = static_cast<int>(f.severity);
  for (int step : {-2, -1, 1, 2}) {
    const int cand = cur + step;
    if (cand >= 1 && cand <= 3) targets.push_back(static_cast<Severity>(cand));
  }
  const Severity pick = targets[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(targets.size()) - 1))];
  Edit e;
  e.etype = ErrorType::kSeverityShift;
  e.begin = at;
  e.end = at + 1;
  e.tokens = {w.severity_token(pick)};
  return e;
}

Edit plan_false_comparison(const World& w, const ReportText& report, const LatentState& state,
                           Rng& rng) {
  std::vector<int> eligible;
  for (std::size_t i = 0; i < state.findings.size(); ++i) {
    const Finding& f = state.findings[i];
    if (f.positive() && f.comparison == Comparison::kAbsent) eligible.push_back(static_cast<int>(i));
  }
  if (eligible.empty()) {
    throw FeasibilityError("no comparison-free positive finding for FalseComparison");
  }
  const int idx = eligible[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(eligible.size()) - 1))];
  const SentenceInfo si = sentence_of_finding(report, idx);
  const Comparison pick = static_cast<Comparison>(1 + rng.uniform_int(0, 2));
  Edit e;
  e.etype = ErrorType::kFalseComparison;
  e.begin = e.end = si.span->end - 1;  // just before the sentence period
  e.tokens = w.comparison_clause(pick);
  return e;
}

bool type_feasible(const World& w, const ReportText& report, const LatentState& state, ErrorType t) {
  switch (t) {
    case ErrorType::kFalseFinding:
      return !absent_classes(w, state).empty() &&
             report.tokens.size() + 14 <= static_cast<std::size_t>(w.config().max_tokens);
    case ErrorType::kMislocation:
    case ErrorType::kSeverityShift:
      return !positive_indices(state).empty();
    case ErrorType::kFalseComparison:
      for (const Finding& f : state.findings) {
        if (f.positive() && f.comparison == Comparison::kAbsent &&
            report.tokens.size() + 5 <= static_cast<std::size_t>(w.config().max_tokens)) {
          return true;
        }
      }
      return false;
  }
  return false;
}

std::string feasible_list_message(const std::vector<ErrorType>& feasible) {
  std::string msg = "feasible types:";
  if (feasible.empty()) msg += " none";
  for (ErrorType t : feasible) {
    msg += ' ';
    msg += etype_name(t);
  }
  return msg;
}

}  // namespace

const char* etype_name(ErrorType t) {
  switch (t) {
    case ErrorType::kFalseFinding: return "false_finding";
    case ErrorType::kMislocation: return "mislocation";
    case ErrorType::kSeverityShift: return "severity_shift";
    case ErrorType::kFalseComparison: return "false_comparison";
  }
  throw DataError("bad error type value");
}

ErrorType etype_from_name(const std::string& name) {
  for (int i = 0; i < kNumErrorTypes; ++i) {
    const ErrorType t = static_cast<ErrorType>(i);
    if (name == etype_name(t)) return t;
  }
  throw ConfigError("unknown error type: " + name);
}

std::vector<ErrorType> feasible_types(const World& world, const ReportText& report,
                                      const LatentState& state) {
  std::vector<ErrorType> out;
  for (int i = 0; i < kNumErrorTypes; ++i) {
    const ErrorType t = static_cast<ErrorType>(i);
    if (type_feasible(world, report, state, t)) out.push_back(t);
  }
  return out;
}

ErroneousReport inject(const World& world, const ReportText& report, const LatentState& state,
                       const std::vector<ErrorType>& spec, std::uint64_t rng_seed) {
  if (spec.empty()) throw ConfigError("error spec must not be empty");
  std::vector<ErrorType> ordered = spec;
  std::sort(ordered.begin(), ordered.end());
  if (std::adjacent_find(ordered.begin(), ordered.end()) != ordered.end()) {
    throw ConfigError("error spec contains a duplicate type");
  }
  for (ErrorType t : ordered) {
    if (!type_feasible(world, report, state, t)) {
      throw FeasibilityError(std::string(etype_name(t)) + " infeasible for this report; " +
                             feasible_list_message(feasible_types(world, report, state)));
    }
  }

  Rng rng(derive_seed(rng_seed, 0xE2201));
  std::vector<Edit> edits;
  for (ErrorType t : ordered) {
    switch (t) {
      case ErrorType::kFalseFinding: edits.push_back(plan_false_finding(world, report, state, rng)); break;
      case ErrorType::kMislocation: edits.push_back(plan_mislocation(world, report, state, rng)); break;
      case ErrorType::kSeverityShift: edits.push_back(plan_severity_shift(world, report, state, rng)); break;
      case ErrorType::kFalseComparison:
        edits.push_back(plan_false_comparison(world, report, state, rng));
        break;
    }
  }
  std::sort(edits.begin(), edits.end(), [](const Edit& a, const Edit& b) {
    if (a.begin != b.begin) return a.begin < b.begin;
    return a.end < b.end;
  });
  for (std::size_t i = 1; i < edits.size(); ++i) {
    if (edits[i].begin < edits[i - 1].end) throw DataError("planned edits overlap");
  }

  ErroneousReport err;
  err.source_report_id = report.report_id;
  std::size_t cursor = 0;
  for (const Edit& e : edits) {
    err.tokens.insert(err.tokens.end(), report.tokens.begin() + static_cast<std::ptrdiff_t>(cursor),
                      report.tokens.begin() + static_cast<std::ptrdiff_t>(e.begin));
    ErrorSpan span;
    span.start = err.tokens.size();
    span.end = span.start + e.tokens.size();
    span.etype = e.etype;
    span.original_tokens.assign(report.tokens.begin() + static_cast<std::ptrdiff_t>(e.begin),
                                report.tokens.begin() + static_cast<std::ptrdiff_t>(e.end));
    err.tokens.insert(err.tokens.end(), e.tokens.begin(), e.tokens.end());
    err.spans.push_back(std::move(span));
    cursor = e.end;
  }
  err.tokens.insert(err.tokens.end(), report.tokens.begin() + static_cast<std::ptrdiff_t>(cursor),
                    report.tokens.end());
  err.error_token_mask.assign(err.tokens.size(), 0);
  for (const ErrorSpan& s : err.spans) {
    for (std::size_t i = s.start; i < s.end; ++i) err.error_token_mask[i] = 1;
  }
  if (err.tokens.size() > static_cast<std::size_t>(world.config().max_tokens)) {
    throw DataError("erroneous report exceeds max_tokens");
  }
  return err;
}

std::pair<ErroneousReport, ErroneousReport> make_pair(const World& world, const ReportText& report,
                                                      const LatentState& state,
                                                      std::uint64_t rng_seed) {
  const auto feasible = feasible_types(world, report, state);
  if (feasible.empty()) {
    throw FeasibilityError("no feasible error types for report " +
                           std::to_string(report.report_id));
  }
  Rng rng(derive_seed(rng_seed, 0xFA12));
  auto sample_combo = [&]() {
    const int max_k = std::min<int>(3, static_cast<int>(feasible.size()));
    const int k = static_cast<int>(rng.uniform_int(1, max_k));
    std::vector<ErrorType> pool = feasible;
    rng.shuffle(pool);
    pool.resize(static_cast<std::size_t>(k));
    std::sort(pool.begin(), pool.end());
    return pool;
  };

  const ErroneousReport first = inject(world, report, state, sample_combo(), derive_seed(rng_seed, 1));
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    const ErroneousReport second =
        inject(world, report, state, sample_combo(), derive_seed(rng_seed, 2 + attempt));
    if (second.tokens != first.tokens || second.spans != first.spans) return {first, second};
  }
  throw DataError("could not produce two distinct erroneous versions");
}

std::string validate(const ErroneousReport& err, const ReportText& source) {
  if (err.error_token_mask.size() != err.tokens.size()) return "mask length mismatch";
  std::size_t prev_start = 0;
  std::size_t prev_end = 0;
  bool first = true;
  for (const ErrorSpan& s : err.spans) {
    if (s.start >= s.end) return "empty or inverted span";
    if (s.end > err.tokens.size()) return "span out of range";
    if (!first) {
      if (s.start < prev_start) return "unsorted spans";
      if (s.start < prev_end) return "overlap";
    }
    first = false;
    prev_start = s.start;
    prev_end = s.end;
  }
  std::vector<std::uint8_t> expect(err.tokens.size(), 0);
  for (const ErrorSpan& s : err.spans) {
    for (std::size_t i = s.start; i < s.end; ++i) expect[i] = 1;
  }
  if (expect != err.error_token_mask) return "mask mismatch";
  if (splice_back(err) != source.tokens) return "reconstruction mismatch";
  return "";
}

std::vector<TokenId> splice_back(const ErroneousReport& err) {
  std::vector<TokenId> out;
  std::size_t cursor = 0;
  for (const ErrorSpan& s : err.spans) {
    if (s.start < cursor || s.end > err.tokens.size()) {
      throw DataError("spans are not sorted and in range");
    }
    out.insert(out.end(), err.tokens.begin() + static_cast<std::ptrdiff_t>(cursor),
               err.tokens.begin() + static_cast<std::ptrdiff_t>(s.start));
    out.insert(out.end(), s.original_tokens.begin(), s.original_tokens.end());
    cursor = s.end;
  }
  out.insert(out.end(), err.tokens.begin() + static_cast<std::ptrdiff_t>(cursor), err.tokens.end());
  return out;
}

}  // namespace radcorrect
