#include "radcorrect/world.hpp"

#include <algorithm>
#include <cstdio>
#include <unordered_set>

namespace radcorrect {

namespace {

const char* kBuiltinClassNames[] = {
    "atelectasis", "cardiomegaly", "consolidation", "edema",         "effusion", "emphysema",
    "fibrosis",    "hernia",       "infiltrate",    "mass",          "nodule",   "pneumonia",
    "pneumothorax", "opacity",     "fracture",      "thickening",
};

const char* kTemplateWords[] = {
    "there", "is",    "at",           "the",    "seen",           "shows",   "compared",
    "to",    "prior", "no",           "evidence", "of",           "view",    "chest",
    "lungs", "are",   "clear",        "acute",  "cardiopulmonary", "process", "heart",
    "size",  "normal", "mediastinal", "silhouette", "unremarkable", "impression", ":",
    "abnormal", "study", "abnormality", ",", ".",
};

std::uint64_t variant_key_for(std::uint64_t state_id, std::uint64_t tag) {
  return mix_u64(state_id ^ mix_u64(tag));
}

void append_double(std::string& s, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  s += buf;
  s += ';';
}

}  // namespace

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  throw DataError("bad split value");
}

const char* severity_name(Severity s) {
  switch (s) {
    case Severity::kNone: return "none";
    case Severity::kMild: return "mild";
    case Severity::kModerate: return "moderate";
    case Severity::kSevere: return "severe";
  }
  throw DataError("bad severity value");
}

const char* comparison_name(Comparison c) {
  switch (c) {
    case Comparison::kAbsent: return "absent";
    case Comparison::kImproved: return "improved";
    case Comparison::kWorsened: return "worsened";
    case Comparison::kUnchanged: return "unchanged";
  }
  throw DataError("bad comparison value");
}

const char* side_name(Side s) {
  switch (s) {
    case Side::kLeft: return "left";
    case Side::kRight: return "right";
    case Side::kBilateral: return "bilateral";
  }
  throw DataError("bad side value");
}

const char* vertical_name(Vertical v) {
  switch (v) {
    case Vertical::kUpper: return "upper";
    case Vertical::kLower: return "lower";
    case Vertical::kBase: return "base";
    case Vertical::kApex: return "apex";
  }
  throw DataError("bad vertical value");
}

const char* orientation_name(Orientation o) {
  switch (o) {
    case Orientation::kFrontal: return "frontal";
    case Orientation::kLateral: return "lateral";
  }
  throw DataError("bad orientation value");
}

void WorldConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (max_findings < 1) throw ConfigError("max_findings must be >= 1");
  if (prevalence < 0.0 || prevalence > 1.0) throw ConfigError("prevalence must lie in [0, 1]");
  if (negative_mention_prob < 0.0 || negative_mention_prob > 1.0) {
    throw ConfigError("negative_mention_prob must lie in [0, 1]");
  }
  if (comparison_prob < 0.0 || comparison_prob > 1.0) throw ConfigError("comparison_prob must lie in [0, 1]");
  if (grid < 4 || grid % 4 != 0) throw ConfigError("grid must be a positive multiple of 4");
  if (image_dim < 1) throw ConfigError("image_dim must be >= 1");
  if (sigma < 0.0) throw ConfigError("sigma must be >= 0");
  // Worst case: orientation line (6) + max_findings comparison-bearing positive
  // sentences (14 each) + impression (6).
  const int worst = 12 + 14 * max_findings;
  if (max_tokens < worst) {
    throw ConfigError("max_tokens too small: need at least " + std::to_string(worst));
  }
  if (!class_names.empty()) {
    if (static_cast<int>(class_names.size()) != num_classes) {
      throw ConfigError("class_names must be empty or have num_classes entries");
    }
    for (const auto& name : class_names) {
      if (name.empty() || name.find(' ') != std::string::npos) {
        throw ConfigError("class names must be non-empty single tokens");
      }
    }
    std::unordered_set<std::string> seen(class_names.begin(), class_names.end());
    if (seen.size() != class_names.size()) throw ConfigError("class names must be unique");
  }
}

World::World(WorldConfig cfg) : config_(std::move(cfg)) {
  config_.validate();
  const int k = config_.num_classes;

  class_names_ = config_.class_names;
  if (class_names_.empty()) {
    for (int c = 0; c < k; ++c) {
      if (c < static_cast<int>(std::size(kBuiltinClassNames))) {
        class_names_.emplace_back(kBuiltinClassNames[c]);
      } else {
        class_names_.push_back("cond" + std::to_string(c));
      }
    }
  }

  std::unordered_set<std::string> reserved_words;
  for (const auto& g : grammar_.severity_words) reserved_words.insert(g);
  for (const auto& g : grammar_.side_words) reserved_words.insert(g);
  for (const auto& g : grammar_.vertical_words) reserved_words.insert(g);
  for (const auto& g : grammar_.comparison_words) reserved_words.insert(g);
  for (const auto& g : grammar_.orientation_words) reserved_words.insert(g);
  for (const char* w : kTemplateWords) reserved_words.insert(w);
  for (const auto& name : class_names_) {
    if (reserved_words.count(name)) throw ConfigError("class name collides with grammar word: " + name);
  }

  for (const auto& name : class_names_) vocab_.intern(name);
  for (const auto& w : grammar_.severity_words) {
    if (!w.empty()) vocab_.intern(w);
  }
  for (const auto& w : grammar_.side_words) vocab_.intern(w);
  for (const auto& w : grammar_.vertical_words) vocab_.intern(w);
  for (const auto& w : grammar_.comparison_words) {
    if (!w.empty()) vocab_.intern(w);
  }
  for (const auto& w : grammar_.orientation_words) vocab_.intern(w);
  for (const char* w : kTemplateWords) vocab_.intern(w);

  period_ = vocab_.id(".");
  negation_ = vocab_.id("no");
  class_of_token_.assign(vocab_.size(), -1);
  for (int c = 0; c < k; ++c) class_of_token_[static_cast<std::size_t>(vocab_.id(class_names_[c]))] = c;

  const int d = config_.image_dim;
  Rng code_rng(derive_seed(config_.code_seed, 0xC0DE));
  auto fill = [&](std::vector<double>& v, std::size_t n) {
    v.resize(n * static_cast<std::size_t>(d));
    for (auto& x : v) x = code_rng.normal();
  };
  fill(base_codes_, 2);
  fill(condition_codes_, static_cast<std::size_t>(k));
  fill(severity_codes_, static_cast<std::size_t>(k) * 3);
  fill(comparison_codes_, static_cast<std::size_t>(k) * 4);

  std::string canon = "world;v1;";
  canon += std::to_string(config_.num_classes) + ";";
  canon += std::to_string(config_.max_findings) + ";";
  append_double(canon, config_.prevalence);
  append_double(canon, config_.negative_mention_prob);
  append_double(canon, config_.comparison_prob);
  canon += std::to_string(config_.grid) + ";";
  canon += std::to_string(config_.image_dim) + ";";
  append_double(canon, config_.sigma);
  canon += std::to_string(config_.max_tokens) + ";";
  canon += std::to_string(config_.code_seed) + ";";
  canon += grammar_.orientation_line ? "1;" : "0;";
  for (TokenId t = 0; t < static_cast<TokenId>(vocab_.size()); ++t) {
    canon += vocab_.text(t);
    canon += '\x1f';
  }
  fingerprint_ = fnv1a(canon);
}

LatentState World::sample_state(std::uint64_t seed) const {
  LatentState st;
  st.state_id = seed;
  Rng rng(derive_seed(seed, 0x57A7E));
  st.orientation = rng.bernoulli(0.5) ? Orientation::kLateral : Orientation::kFrontal;

  const int k = config_.num_classes;
  std::vector<char> positive(static_cast<std::size_t>(k), 0);
  for (int c = 0; c < k; ++c) positive[static_cast<std::size_t>(c)] = rng.bernoulli(config_.prevalence) ? 1 : 0;
  std::vector<Finding> found;
  for (int c = 0; c < k; ++c) {
    if (!positive[static_cast<std::size_t>(c)]) continue;
    Finding f;
    f.condition = c;
    f.severity = static_cast<Severity>(1 + rng.uniform_int(0, 2));
    f.location.side = static_cast<Side>(rng.uniform_int(0, 2));
    f.location.vertical = static_cast<Vertical>(rng.uniform_int(0, 3));
    f.comparison = rng.bernoulli(config_.comparison_prob)
                       ? static_cast<Comparison>(1 + rng.uniform_int(0, 2))
                       : Comparison::kAbsent;
    found.push_back(f);
  }
  if (found.size() > static_cast<std::size_t>(config_.max_findings)) {
    rng.shuffle(found);
    found.resize(static_cast<std::size_t>(config_.max_findings));
  }
  st.findings = std::move(found);
  // Negative mentions ride along with positive studies only, which keeps
  // "zero prevalence implies an empty findings list" literally true.
  if (!st.findings.empty()) {
    for (int c = 0; c < k; ++c) {
      if (st.findings.size() >= static_cast<std::size_t>(config_.max_findings)) break;
      if (positive[static_cast<std::size_t>(c)]) continue;
      if (!rng.bernoulli(config_.negative_mention_prob)) continue;
      Finding f;
      f.condition = c;
      f.severity = Severity::kNone;
      st.findings.push_back(f);
    }
  }
  std::sort(st.findings.begin(), st.findings.end(),
            [](const Finding& a, const Finding& b) { return a.condition < b.condition; });
  return st;
}

namespace {
void need(const std::string& word, const char* slot) {
  if (word.empty()) throw DataError(std::string("grammar gap: no word for ") + slot);
}
}  // namespace

std::vector<TokenId> World::positive_sentence(const Finding& f, std::uint64_t variant_key,
                                              const Grammar& g) const {
  if (!f.positive()) throw DataError("positive_sentence requires a positive finding");
  const auto& sev = g.severity_words[static_cast<std::size_t>(f.severity)];
  const auto& side = g.side_words[static_cast<std::size_t>(f.location.side)];
  const auto& vert = g.vertical_words[static_cast<std::size_t>(f.location.vertical)];
  need(sev, severity_name(f.severity));
  need(side, side_name(f.location.side));
  need(vert, vertical_name(f.location.vertical));
  const auto id = [&](const char* w) { return vocab_.id(w); };
  const TokenId cond = class_token(f.condition);
  std::vector<TokenId> s;
  switch (variant_key % 3) {
    case 0:
      s = {id("there"), id("is"), vocab_.id(sev), cond, id("at"), id("the"), vocab_.id(side), vocab_.id(vert)};
      break;
    case 1:
      s = {vocab_.id(sev), cond, id("is"), id("seen"), id("at"), id("the"), vocab_.id(side), vocab_.id(vert)};
      break;
    default:
      s = {id("the"), vocab_.id(side), vocab_.id(vert), id("shows"), vocab_.id(sev), cond};
      break;
  }
  if (f.comparison != Comparison::kAbsent) {
    const auto clause = comparison_clause(f.comparison, g);
    s.insert(s.end(), clause.begin(), clause.end());
  }
  s.push_back(period_);
  return s;
}

std::vector<TokenId> World::negative_sentence(int condition, std::uint64_t variant_key,
                                              const Grammar&) const {
  const auto id = [&](const char* w) { return vocab_.id(w); };
  const TokenId cond = class_token(condition);
  std::vector<TokenId> s;
  if (variant_key % 2 == 0) {
    s = {id("no"), id("evidence"), id("of"), cond};
  } else {
    s = {id("there"), id("is"), id("no"), cond};
  }
  s.push_back(period_);
  return s;
}

std::vector<TokenId> World::comparison_clause(Comparison c, const Grammar& g) const {
  if (c == Comparison::kAbsent) throw DataError("comparison_clause requires a non-absent comparison");
  const auto& word = g.comparison_words[static_cast<std::size_t>(c)];
  need(word, comparison_name(c));
  return {vocab_.id(","), vocab_.id(word), vocab_.id("compared"), vocab_.id("to"), vocab_.id("prior")};
}

ReportText World::render_report(const LatentState& state, const Grammar& g) const {
  ReportText rt;
  rt.report_id = state.state_id;
  auto add = [&](std::vector<TokenId> s, int ref) {
    SentenceSpan span;
    span.begin = rt.tokens.size();
    span.end = span.begin + s.size();
    span.finding_index = ref;
    rt.sentence_map.push_back(span);
    rt.tokens.insert(rt.tokens.end(), s.begin(), s.end());
  };
  const auto id = [&](const char* w) { return vocab_.id(w); };

  if (g.orientation_line) {
    const auto& ow = g.orientation_words[static_cast<std::size_t>(state.orientation)];
    need(ow, orientation_name(state.orientation));
    add({vocab_.id(ow), id("view"), id("of"), id("the"), id("chest"), period_}, -1);
  }

  bool any_positive = false;
  for (std::size_t i = 0; i < state.findings.size(); ++i) {
    const Finding& f = state.findings[i];
    const std::uint64_t key = variant_key_for(state.state_id, 0x5E17 + i);
    if (f.positive()) {
      any_positive = true;
      add(positive_sentence(f, key, g), static_cast<int>(i));
    } else {
      add(negative_sentence(f.condition, key, g), static_cast<int>(i));
    }
  }

  if (!any_positive) {
    static const char* kNormals[4][5] = {
        {"the", "lungs", "are", "clear", nullptr},
        {"no", "acute", "cardiopulmonary", "process", nullptr},
        {"the", "heart", "size", "is", "normal"},
        {"the", "mediastinal", "silhouette", "is", "unremarkable"},
    };
    const std::uint64_t h = variant_key_for(state.state_id, 0x40A);
    const int n0 = static_cast<int>(h % 4);
    const int n1 = static_cast<int>((static_cast<std::uint64_t>(n0) + 1 + (h >> 2) % 3) % 4);
    for (int n : {n0, n1}) {
      std::vector<TokenId> s;
      for (const char* w : kNormals[n]) {
        if (w != nullptr) s.push_back(id(w));
      }
      s.push_back(period_);
      add(std::move(s), -1);
    }
  }

  if (any_positive) {
    add({id("impression"), id(":"), id("abnormal"), id("study"), period_}, -1);
  } else {
    add({id("impression"), id(":"), id("no"), id("acute"), id("abnormality"), period_}, -1);
  }

  if (rt.tokens.size() > static_cast<std::size_t>(config_.max_tokens)) {
    throw DataError("rendered report exceeds max_tokens");
  }
  return rt;
}

PseudoImage World::render_image(const LatentState& state, std::uint64_t seed, double sigma) const {
  if (sigma < 0.0) throw ConfigError("sigma must be >= 0");
  const int g = config_.grid;
  const int d = config_.image_dim;
  PseudoImage img;
  img.grid = g;
  img.dim = d;
  img.patches.assign(static_cast<std::size_t>(g) * g * d, 0.0);
  img.pooled.assign(static_cast<std::size_t>(d), 0.0);

  const double* base = base_codes_.data() + static_cast<std::size_t>(state.orientation) * d;
  for (int cell = 0; cell < g * g; ++cell) {
    double* p = img.patches.data() + static_cast<std::size_t>(cell) * d;
    for (int j = 0; j < d; ++j) p[j] = base[j];
  }
  for (const Finding& f : state.findings) {
    if (!f.positive()) continue;
    const std::vector<double> code = finding_code(f);
    for (int cell : cells_for(f.location)) {
      double* p = img.patches.data() + static_cast<std::size_t>(cell) * d;
      for (int j = 0; j < d; ++j) p[j] += code[static_cast<std::size_t>(j)];
    }
  }
  if (sigma > 0.0) {
    Rng rng(derive_seed(seed, 0x1A6E));
    for (auto& x : img.patches) x += sigma * rng.normal();
  }
  const double inv = 1.0 / static_cast<double>(g * g);
  for (int cell = 0; cell < g * g; ++cell) {
    const double* p = img.patches.data() + static_cast<std::size_t>(cell) * d;
    for (int j = 0; j < d; ++j) img.pooled[static_cast<std::size_t>(j)] += p[j] * inv;
  }
  return img;
}

std::vector<double> World::finding_code(const Finding& f) const {
  const int d = config_.image_dim;
  std::vector<double> code(static_cast<std::size_t>(d), 0.0);
  if (!f.positive()) return code;
  const int c = f.condition;
  if (c < 0 || c >= config_.num_classes) throw DataError("finding condition out of range");
  const double* cond = condition_codes_.data() + static_cast<std::size_t>(c) * d;
  const double* sev = severity_codes_.data() +
                      (static_cast<std::size_t>(c) * 3 + (static_cast<std::size_t>(f.severity) - 1)) * d;
  const double* cmp = comparison_codes_.data() +
                      (static_cast<std::size_t>(c) * 4 + static_cast<std::size_t>(f.comparison)) * d;
  for (int j = 0; j < d; ++j) code[static_cast<std::size_t>(j)] = cond[j] + sev[j] + cmp[j];
  return code;
}

std::vector<int> World::cells_for(const Location& loc) const {
  const int g = config_.grid;
  int zone_row = 0;
  switch (loc.vertical) {
    case Vertical::kApex: zone_row = 0; break;
    case Vertical::kUpper: zone_row = 1; break;
    case Vertical::kLower: zone_row = 2; break;
    case Vertical::kBase: zone_row = 3; break;
  }
  const int r0 = zone_row * g / 4;
  const int r1 = (zone_row + 1) * g / 4;
  int c0 = 0;
  int c1 = g;
  if (loc.side == Side::kLeft) c1 = g / 2;
  if (loc.side == Side::kRight) c0 = g / 2;
  std::vector<int> cells;
  for (int r = r0; r < r1; ++r) {
    for (int c = c0; c < c1; ++c) cells.push_back(r * g + c);
  }
  return cells;
}

std::vector<double> World::base_patch(Orientation o) const {
  const int d = config_.image_dim;
  const double* base = base_codes_.data() + static_cast<std::size_t>(o) * d;
  return std::vector<double>(base, base + d);
}

std::vector<std::uint8_t> World::extract_labels(const std::vector<TokenId>& tokens) const {
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(config_.num_classes), 0);
  std::size_t start = 0;
  auto scan = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const TokenId t = tokens[i];
      if (t < 0 || static_cast<std::size_t>(t) >= class_of_token_.size()) continue;
      const int cls = class_of_token_[static_cast<std::size_t>(t)];
      if (cls < 0) continue;
      bool negated = false;
      for (std::size_t j = begin; j < i; ++j) {
        if (tokens[j] == negation_) {
          negated = true;
          break;
        }
      }
      if (!negated) labels[static_cast<std::size_t>(cls)] = 1;
    }
  };
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == period_) {
      scan(start, i);
      start = i + 1;
    }
  }
  scan(start, tokens.size());
  return labels;
}

std::vector<std::uint8_t> World::state_labels(const LatentState& state) const {
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(config_.num_classes), 0);
  for (const Finding& f : state.findings) {
    if (f.positive()) labels[static_cast<std::size_t>(f.condition)] = 1;
  }
  return labels;
}

std::vector<Split> World::assign_splits(const std::vector<std::uint64_t>& report_ids) {
  const std::size_t n = report_ids.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const std::uint64_t ha = mix_u64(report_ids[a] + 0x5A5A17B0C4E55EEDULL);
    const std::uint64_t hb = mix_u64(report_ids[b] + 0x5A5A17B0C4E55EEDULL);
    if (ha != hb) return ha < hb;
    return report_ids[a] < report_ids[b];
  });
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_val = n / 10;
  std::vector<Split> splits(n, Split::kTest);
  for (std::size_t rank = 0; rank < n; ++rank) {
    Split s = Split::kTest;
    if (rank < n_train) {
      s = Split::kTrain;
    } else if (rank < n_train + n_val) {
      s = Split::kVal;
    }
    splits[order[rank]] = s;
  }
  return splits;
}

TokenId World::severity_token(Severity s) const {
  const auto& w = grammar_.severity_words[static_cast<std::size_t>(s)];
  need(w, severity_name(s));
  return vocab_.id(w);
}

TokenId World::side_token(Side s) const { return vocab_.id(grammar_.side_words[static_cast<std::size_t>(s)]); }

TokenId World::vertical_token(Vertical v) const {
  return vocab_.id(grammar_.vertical_words[static_cast<std::size_t>(v)]);
}

TokenId World::comparison_token(Comparison c) const {
  const auto& w = grammar_.comparison_words[static_cast<std::size_t>(c)];
  need(w, comparison_name(c));
  return vocab_.id(w);
}

TokenId World::class_token(int condition) const {
  if (condition < 0 || condition >= config_.num_classes) throw DataError("condition out of range");
  return vocab_.id(class_names_[static_cast<std::size_t>(condition)]);
}

}  // namespace radcorrect
