#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "radcorrect/world.hpp"

namespace radcorrect {

// The four injected error categories. Order is the canonical application
// order inside one report.
enum class ErrorType : std::uint8_t {
  kFalseFinding = 0,
  kMislocation = 1,
  kSeverityShift = 2,
  kFalseComparison = 3,
};

inline constexpr int kNumErrorTypes = 4;

const char* etype_name(ErrorType t);
ErrorType etype_from_name(const std::string& name);

// Half-open token span into the erroneous sequence. original_tokens is what
// the span replaced; empty for pure insertions.
struct ErrorSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  ErrorType etype = ErrorType::kFalseFinding;
  std::vector<TokenId> original_tokens;
  bool operator==(const ErrorSpan&) const = default;
};

struct ErroneousReport {
  std::uint64_t source_report_id = 0;
  std::vector<TokenId> tokens;
  std::vector<ErrorSpan> spans;              // sorted, non-overlapping
  std::vector<std::uint8_t> error_token_mask;  // 1 inside spans
  bool operator==(const ErroneousReport&) const = default;
};

// Error types injectable into this particular report, in enum order.
std::vector<ErrorType> feasible_types(const World& world, const ReportText& report,
                                      const LatentState& state);

// Applies each requested type once. Throws ConfigError on an empty or
// duplicated spec and FeasibilityError (listing feasible types) when a
// requested type has no slot in this report.
ErroneousReport inject(const World& world, const ReportText& report, const LatentState& state,
                       const std::vector<ErrorType>& spec, std::uint64_t rng_seed);

// Two independently corrupted versions of one report, guaranteed to differ.
std::pair<ErroneousReport, ErroneousReport> make_pair(const World& world, const ReportText& report,
                                                      const LatentState& state,
                                                      std::uint64_t rng_seed);

// Empty string when err is internally consistent and splices back onto
// source; otherwise the first violation found.
std::string validate(const ErroneousReport& err, const ReportText& source);

// Replaces every span with its original_tokens; inverse of injection.
std::vector<TokenId> splice_back(const ErroneousReport& err);

}  // namespace radcorrect
