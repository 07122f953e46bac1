#include "radcorrect/corpus.hpp"

#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

#include "radcorrect/errors.hpp"
#include "radcorrect/rng.hpp"

namespace radcorrect {

using nlohmann::json;

namespace {

template <typename Enum>
Enum enum_from_name(const std::string& name, const char* what, const char* (*to_name)(Enum),
                    int count) {
  for (int i = 0; i < count; ++i) {
    const Enum e = static_cast<Enum>(i);
    if (name == to_name(e)) return e;
  }
  throw DataError(std::string("unknown ") + what + " name: " + name);
}

json finding_to_json(const World& world, const Finding& f) {
  if (f.condition < 0 || f.condition >= static_cast<int>(world.class_names().size()))
    throw DataError("finding condition index out of range");
  return json{{"condition", world.class_names()[static_cast<std::size_t>(f.condition)]},
              {"severity", severity_name(f.severity)},
              {"side", side_name(f.location.side)},
              {"vertical", vertical_name(f.location.vertical)},
              {"comparison", comparison_name(f.comparison)}};
}

Finding finding_from_json(const World& world, const json& j) {
  Finding f;
  const std::string cond = j.at("condition").get<std::string>();
  int index = -1;
  for (std::size_t i = 0; i < world.class_names().size(); ++i) {
    if (world.class_names()[i] == cond) index = static_cast<int>(i);
  }
  if (index < 0) throw DataError("unknown condition name: " + cond);
  f.condition = index;
  f.severity = severity_from_name(j.at("severity").get<std::string>());
  f.location.side = side_from_name(j.at("side").get<std::string>());
  f.location.vertical = vertical_from_name(j.at("vertical").get<std::string>());
  f.comparison = comparison_from_name(j.at("comparison").get<std::string>());
  return f;
}

std::vector<TokenId> tokens_from_json(const json& arr, const World& world, const char* what) {
  std::vector<TokenId> out;
  out.reserve(arr.size());
  for (const auto& t : arr) {
    const std::int64_t id = t.get<std::int64_t>();
    if (id < 0 || id >= static_cast<std::int64_t>(world.vocab().size()))
      throw DataError(std::string(what) + ": token id out of vocabulary range");
    out.push_back(static_cast<TokenId>(id));
  }
  return out;
}

json line_parse(const std::string& line, const std::string& path, std::size_t line_no) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded())
    throw DataError(path + ": malformed JSON on line " + std::to_string(line_no));
  return j;
}

}  // namespace

Severity severity_from_name(const std::string& name) {
  return enum_from_name<Severity>(name, "severity", &severity_name, 4);
}
Comparison comparison_from_name(const std::string& name) {
  return enum_from_name<Comparison>(name, "comparison", &comparison_name, 4);
}
Side side_from_name(const std::string& name) {
  return enum_from_name<Side>(name, "side", &side_name, 3);
}
Vertical vertical_from_name(const std::string& name) {
  return enum_from_name<Vertical>(name, "vertical", &vertical_name, 4);
}
Orientation orientation_from_name(const std::string& name) {
  return enum_from_name<Orientation>(name, "orientation", &orientation_name, 2);
}
Split split_from_name(const std::string& name) {
  return enum_from_name<Split>(name, "split", &split_name, 3);
}

std::vector<CorpusRecord> generate_corpus(const World& world, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ConfigError("generate_corpus: n must be >= 1");
  std::vector<CorpusRecord> records;
  records.reserve(n);
  std::vector<std::uint64_t> ids;
  ids.reserve(n);
  std::unordered_set<std::uint64_t> seen;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t sid = derive_seed(seed, i);
    if (!seen.insert(sid).second)
      throw DataError("duplicate report_id " + std::to_string(sid) + " in generated corpus");
    CorpusRecord rec;
    rec.state = world.sample_state(sid);
    ReportText rt = world.render_report(rec.state);
    rec.tokens = std::move(rt.tokens);
    rec.sentence_map = std::move(rt.sentence_map);
    rec.image = world.render_image(rec.state, sid);
    records.push_back(std::move(rec));
    ids.push_back(sid);
  }
  const std::vector<Split> splits = World::assign_splits(ids);
  for (std::size_t i = 0; i < n; ++i) records[i].split = splits[i];
  return records;
}

void write_corpus(const std::string& path, const std::vector<CorpusRecord>& records,
                  const World& world) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  std::unordered_set<std::uint64_t> seen;
  for (const CorpusRecord& rec : records) {
    if (!seen.insert(rec.state.state_id).second)
      throw DataError("duplicate report_id " + std::to_string(rec.state.state_id));
    json j;
    j["state_id"] = rec.state.state_id;
    j["orientation"] = orientation_name(rec.state.orientation);
    json findings = json::array();
    for (const Finding& f : rec.state.findings) findings.push_back(finding_to_json(world, f));
    j["findings"] = std::move(findings);
    j["tokens"] = rec.tokens;
    json smap = json::array();
    for (const SentenceSpan& s : rec.sentence_map)
      smap.push_back(json::array({s.begin, s.end, s.finding_index}));
    j["sentence_map"] = std::move(smap);
    json patches = json::array();
    for (int c = 0; c < rec.image.patch_count(); ++c) {
      const double* p = rec.image.patch(c);
      patches.push_back(std::vector<double>(p, p + rec.image.dim));
    }
    j["patches"] = std::move(patches);
    j["pooled"] = rec.image.pooled;
    j["split"] = split_name(rec.split);
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("write failure on " + path);
}

std::vector<CorpusRecord> build_corpus(const World& world, std::size_t n, std::uint64_t seed,
                                       const std::string& path) {
  std::vector<CorpusRecord> records = generate_corpus(world, n, seed);
  write_corpus(path, records, world);
  return records;
}

std::vector<CorpusRecord> load_corpus(const std::string& path, const World& world) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<CorpusRecord> records;
  std::unordered_set<std::uint64_t> seen;
  std::string line;
  std::size_t line_no = 0;
  const int d = world.config().image_dim;
  const int cells = world.config().grid * world.config().grid;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const json j = line_parse(line, path, line_no);
    CorpusRecord rec;
    rec.state.state_id = j.at("state_id").get<std::uint64_t>();
    if (!seen.insert(rec.state.state_id).second)
      throw DataError(path + ": duplicate report_id " + std::to_string(rec.state.state_id));
    rec.state.orientation = orientation_from_name(j.at("orientation").get<std::string>());
    for (const auto& f : j.at("findings")) rec.state.findings.push_back(finding_from_json(world, f));
    rec.tokens = tokens_from_json(j.at("tokens"), world, "corpus tokens");
    for (const auto& s : j.at("sentence_map")) {
      if (!s.is_array() || s.size() != 3)
        throw DataError(path + ": sentence_map entries must be [begin, end, finding_index]");
      SentenceSpan span;
      span.begin = s[0].get<std::size_t>();
      span.end = s[1].get<std::size_t>();
      span.finding_index = s[2].get<int>();
      rec.sentence_map.push_back(span);
    }
    rec.image.grid = world.config().grid;
    rec.image.dim = d;
    rec.image.patches.reserve(static_cast<std::size_t>(cells) * d);
    const auto& patches = j.at("patches");
    if (static_cast<int>(patches.size()) != cells)
      throw DataError(path + ": patch grid size mismatch on line " + std::to_string(line_no));
    for (const auto& row : patches) {
      if (static_cast<int>(row.size()) != d)
        throw DataError(path + ": patch dim mismatch on line " + std::to_string(line_no));
      for (const auto& v : row) rec.image.patches.push_back(v.get<double>());
    }
    rec.image.pooled = j.at("pooled").get<std::vector<double>>();
    if (static_cast<int>(rec.image.pooled.size()) != d)
      throw DataError(path + ": pooled dim mismatch on line " + std::to_string(line_no));
    rec.split = split_from_name(j.at("split").get<std::string>());
    records.push_back(std::move(rec));
  }
  return records;
}

void write_erroneous(const std::string& path, const std::vector<ErroneousReport>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  for (const ErroneousReport& err : records) {
    json j;
    j["source_report_id"] = err.source_report_id;
    j["tokens"] = err.tokens;
    json spans = json::array();
    for (const ErrorSpan& s : err.spans) {
      spans.push_back(json{{"start", s.start},
                           {"end", s.end},
                           {"etype", etype_name(s.etype)},
                           {"original", s.original_tokens}});
    }
    j["spans"] = std::move(spans);
    json mask = json::array();
    for (std::uint8_t m : err.error_token_mask) mask.push_back(static_cast<int>(m));
    j["mask"] = std::move(mask);
    out << j.dump() << '\n';
  }
  if (!out) throw DataError("write failure on " + path);
}

std::vector<ErroneousReport> load_erroneous(const std::string& path, const World& world) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<ErroneousReport> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const json j = line_parse(line, path, line_no);
    ErroneousReport err;
    err.source_report_id = j.at("source_report_id").get<std::uint64_t>();
    err.tokens = tokens_from_json(j.at("tokens"), world, "erroneous tokens");
    for (const auto& s : j.at("spans")) {
      ErrorSpan span;
      span.start = s.at("start").get<std::size_t>();
      span.end = s.at("end").get<std::size_t>();
      span.etype = etype_from_name(s.at("etype").get<std::string>());
      span.original_tokens = tokens_from_json(s.at("original"), world, "span original tokens");
      err.spans.push_back(std::move(span));
    }
    for (const auto& m : j.at("mask")) {
      const int v = m.get<int>();
      if (v != 0 && v != 1) throw DataError(path + ": mask entries must be 0/1");
      err.error_token_mask.push_back(static_cast<std::uint8_t>(v));
    }
    if (err.error_token_mask.size() != err.tokens.size())
      throw DataError(path + ": mask length mismatch on line " + std::to_string(line_no));
    records.push_back(std::move(err));
  }
  return records;
}

}  // namespace radcorrect
