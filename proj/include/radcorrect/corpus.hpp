#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "radcorrect/errorgen.hpp"
#include "radcorrect/world.hpp"

namespace radcorrect {

// One fully materialized example: latent state, rendered report, pseudo-image
// and the deterministic split it belongs to.
struct CorpusRecord {
  LatentState state;
  std::vector<TokenId> tokens;
  std::vector<SentenceSpan> sentence_map;
  PseudoImage image;
  Split split = Split::kTrain;
};

// Samples n states with ids derive_seed(seed, i), renders reports and images,
// and assigns 80/10/10 splits by id hash. Throws DataError on a duplicate id.
std::vector<CorpusRecord> generate_corpus(const World& world, std::size_t n, std::uint64_t seed);

// JSONL, one record per line with fields
// {state_id, findings[], orientation, tokens[], sentence_map[], patches[[..]], pooled[], split}.
void write_corpus(const std::string& path, const std::vector<CorpusRecord>& records,
                  const World& world);
std::vector<CorpusRecord> load_corpus(const std::string& path, const World& world);

// generate_corpus + write_corpus in one step.
std::vector<CorpusRecord> build_corpus(const World& world, std::size_t n, std::uint64_t seed,
                                       const std::string& path);

// Erroneous-report JSONL: {source_report_id, tokens[], spans[{start,end,etype,original[]}], mask[]}.
void write_erroneous(const std::string& path, const std::vector<ErroneousReport>& records);
std::vector<ErroneousReport> load_erroneous(const std::string& path, const World& world);

// Reverse lookups for the serialized enum names.
Severity severity_from_name(const std::string& name);
Comparison comparison_from_name(const std::string& name);
Side side_from_name(const std::string& name);
Vertical vertical_from_name(const std::string& name);
Orientation orientation_from_name(const std::string& name);
Split split_from_name(const std::string& name);

}  // namespace radcorrect
