#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "radcorrect/world.hpp"

using namespace radcorrect;

namespace {

World default_world() { return World(WorldConfig{}); }

int class_index(const World& w, const std::string& name) {
  const auto& names = w.class_names();
  const auto it = std::find(names.begin(), names.end(), name);
  REQUIRE(it != names.end());
  return static_cast<int>(it - names.begin());
}

}  // namespace

TEST_CASE("vocabulary reserves fixed ids") {
  Vocabulary v;
  CHECK(v.text(Vocabulary::kPad) == "[PAD]");
  CHECK(v.text(Vocabulary::kError) == "[ERROR]");
  CHECK(v.text(Vocabulary::kBos) == "[BOS]");
  CHECK(v.text(Vocabulary::kEos) == "[EOS]");
  CHECK(v.text(Vocabulary::kEndSpan) == "[END_SPAN]");
  CHECK(v.size() == static_cast<std::size_t>(Vocabulary::kReservedCount));
  const TokenId t = v.intern("effusion");
  CHECK(t == Vocabulary::kReservedCount);
  CHECK(v.intern("effusion") == t);
  CHECK(v.id("effusion") == t);
  CHECK_THROWS_AS(v.id("unseen"), DataError);
  CHECK_THROWS_AS(v.text(-1), DataError);
  CHECK(v.detokenize({t, t}) == "effusion effusion");
}

TEST_CASE("world vocabulary stays small") {
  World w = default_world();
  CHECK(w.vocab().size() <= 512);
  CHECK(w.vocab().size() > 40);
}

TEST_CASE("config validation rejects bad worlds") {
  WorldConfig cfg;
  cfg.num_classes = 1;
  CHECK_THROWS_AS(World{cfg}, ConfigError);
  cfg = WorldConfig{};
  cfg.max_findings = 0;
  CHECK_THROWS_AS(World{cfg}, ConfigError);
  cfg = WorldConfig{};
  cfg.prevalence = 1.5;
  CHECK_THROWS_AS(World{cfg}, ConfigError);
  cfg = WorldConfig{};
  cfg.grid = 5;
  CHECK_THROWS_AS(World{cfg}, ConfigError);
  cfg = WorldConfig{};
  cfg.sigma = -0.1;
  CHECK_THROWS_AS(World{cfg}, ConfigError);
  cfg = WorldConfig{};
  cfg.max_tokens = 20;
  CHECK_THROWS_AS(World{cfg}, ConfigError);
  cfg = WorldConfig{};
  cfg.class_names = {"a", "b"};
  CHECK_THROWS_AS(World{cfg}, ConfigError);  // wrong count
  cfg = WorldConfig{};
  cfg.num_classes = 2;
  cfg.class_names = {"normal", "effusion"};
  CHECK_THROWS_AS(World{cfg}, ConfigError);  // collides with grammar word
}

TEST_CASE("zero prevalence forces empty findings") {
  WorldConfig cfg;
  cfg.prevalence = 0.0;
  World w{cfg};
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    CHECK(w.sample_state(seed).findings.empty());
  }
}

TEST_CASE("sampling is deterministic and seed-sensitive") {
  World w = default_world();
  const LatentState a = w.sample_state(1);
  const LatentState b = w.sample_state(1);
  CHECK(a.state_id == b.state_id);
  CHECK(a.orientation == b.orientation);
  CHECK(a.findings == b.findings);
  bool any_difference = false;
  for (std::uint64_t seed = 2; seed <= 100 && !any_difference; ++seed) {
    any_difference = w.sample_state(seed).findings != a.findings;
  }
  CHECK(any_difference);
}

TEST_CASE("state invariants hold across seeds") {
  World w = default_world();
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const LatentState st = w.sample_state(seed);
    CHECK(st.findings.size() <= static_cast<std::size_t>(w.config().max_findings));
    std::set<int> classes;
    for (const Finding& f : st.findings) {
      CHECK(f.condition >= 0);
      CHECK(f.condition < w.config().num_classes);
      CHECK(classes.insert(f.condition).second);  // at most one per class
    }
  }
}

// Monte-Carlo oracle: with the cap disabled (F_max = K) the per-class positive
// rate is an iid Bernoulli(0.3) count over 10000 draws.
TEST_CASE("per-class positive rate matches prevalence") {
  WorldConfig cfg;
  cfg.max_findings = cfg.num_classes;
  cfg.max_tokens = 200;
  World w{cfg};
  std::vector<int> hits(static_cast<std::size_t>(cfg.num_classes), 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const LatentState st = w.sample_state(static_cast<std::uint64_t>(i) + 1);
    for (const Finding& f : st.findings) {
      if (f.positive()) ++hits[static_cast<std::size_t>(f.condition)];
    }
  }
  for (int c = 0; c < cfg.num_classes; ++c) {
    const double rate = static_cast<double>(hits[static_cast<std::size_t>(c)]) / n;
    CHECK(std::abs(rate - 0.3) <= 0.02);
  }
}

TEST_CASE("empty state renders only normal statements") {
  WorldConfig cfg;
  cfg.prevalence = 0.0;
  World w{cfg};
  const LatentState st = w.sample_state(9);
  const ReportText rt = w.render_report(st);
  CHECK(!rt.tokens.empty());
  for (const SentenceSpan& s : rt.sentence_map) CHECK(s.finding_index == -1);
  const auto labels = w.extract_labels(rt.tokens);
  for (auto v : labels) CHECK(v == 0);
  // the "lungs are clear" template family plus impression only
  CHECK(rt.sentence_map.size() == 4);  // orientation + 2 normals + impression
}

TEST_CASE("single finding maps to exactly one positive sentence") {
  World w = default_world();
  LatentState st;
  st.state_id = 77;
  st.orientation = Orientation::kFrontal;
  Finding f;
  f.condition = class_index(w, "effusion");
  f.location = {Side::kLeft, Vertical::kBase};
  f.severity = Severity::kMild;
  f.comparison = Comparison::kAbsent;
  st.findings = {f};
  const ReportText rt = w.render_report(st);
  int mapped = 0;
  for (const SentenceSpan& s : rt.sentence_map) {
    if (s.finding_index >= 0) {
      ++mapped;
      CHECK(s.finding_index == 0);
      bool has_class = false;
      for (std::size_t i = s.begin; i < s.end; ++i) {
        if (rt.tokens[i] == w.class_token(f.condition)) has_class = true;
      }
      CHECK(has_class);
    }
  }
  CHECK(mapped == 1);
}

TEST_CASE("rendering is deterministic and bounded") {
  World w = default_world();
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const LatentState st = w.sample_state(seed);
    const ReportText a = w.render_report(st);
    const ReportText b = w.render_report(st);
    CHECK(a.tokens == b.tokens);
    CHECK(a.tokens.size() <= 200);
    // spans partition the token stream
    std::size_t cursor = 0;
    for (const SentenceSpan& s : a.sentence_map) {
      CHECK(s.begin == cursor);
      CHECK(s.end > s.begin);
      cursor = s.end;
    }
    CHECK(cursor == a.tokens.size());
    // every positive finding has a mapped sentence
    for (std::size_t i = 0; i < st.findings.size(); ++i) {
      if (!st.findings[i].positive()) continue;
      bool mapped = false;
      for (const SentenceSpan& s : a.sentence_map) {
        if (s.finding_index == static_cast<int>(i)) mapped = true;
      }
      CHECK(mapped);
    }
  }
}

TEST_CASE("grammar gap raises an error naming the slot") {
  World w = default_world();
  LatentState st;
  st.state_id = 3;
  Finding f;
  f.condition = 0;
  f.severity = Severity::kModerate;
  st.findings = {f};
  Grammar broken = w.grammar();
  broken.severity_words[static_cast<std::size_t>(Severity::kModerate)].clear();
  try {
    w.render_report(st, broken);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("moderate") != std::string::npos);
  }
}

TEST_CASE("negation rule marks mentioned class negative") {
  World w = default_world();
  const int effusion = class_index(w, "effusion");
  const auto& v = w.vocab();
  const std::vector<TokenId> tokens = {v.id("no"), v.id("evidence"), v.id("of"),
                                       v.id("effusion"), w.period_token()};
  const auto labels = w.extract_labels(tokens);
  for (int c = 0; c < w.config().num_classes; ++c) CHECK(labels[static_cast<std::size_t>(c)] == 0);
  // without the negation the same sentence is positive
  const std::vector<TokenId> pos_tokens = {v.id("evidence"), v.id("of"), v.id("effusion"),
                                           w.period_token()};
  const auto pos_labels = w.extract_labels(pos_tokens);
  CHECK(pos_labels[static_cast<std::size_t>(effusion)] == 1);
}

TEST_CASE("empty token list yields all-negative labels") {
  World w = default_world();
  const auto labels = w.extract_labels({});
  CHECK(labels.size() == static_cast<std::size_t>(w.config().num_classes));
  for (auto v : labels) CHECK(v == 0);
}

TEST_CASE("negation is sentence-scoped") {
  World w = default_world();
  const auto& v = w.vocab();
  // "no evidence of effusion . mild pneumonia is seen at the left base ."
  const std::vector<TokenId> tokens = {
      v.id("no"),   v.id("evidence"), v.id("of"),  v.id("effusion"), w.period_token(),
      v.id("mild"), v.id("pneumonia"), v.id("is"), v.id("seen"),     v.id("at"),
      v.id("the"),  v.id("left"),      v.id("base"), w.period_token()};
  const auto labels = w.extract_labels(tokens);
  CHECK(labels[static_cast<std::size_t>(class_index(w, "effusion"))] == 0);
  CHECK(labels[static_cast<std::size_t>(class_index(w, "pneumonia"))] == 1);
}

// The universal round-trip oracle: rendered text carries exactly the positive
// classes of the state.
TEST_CASE("label round trip over 1000 states") {
  World w = default_world();
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const LatentState st = w.sample_state(seed);
    const ReportText rt = w.render_report(st);
    CHECK(w.extract_labels(rt.tokens) == w.state_labels(st));
  }
}

TEST_CASE("noiseless empty image equals the normal code everywhere") {
  World w = default_world();
  WorldConfig cfg;
  cfg.prevalence = 0.0;
  World empty_world{cfg};
  const LatentState st = empty_world.sample_state(4);
  const PseudoImage img = empty_world.render_image(st, 11, 0.0);
  const auto base = empty_world.base_patch(st.orientation);
  for (int cell = 0; cell < img.patch_count(); ++cell) {
    for (int j = 0; j < img.dim; ++j) {
      CHECK(img.patch(cell)[j] == base[static_cast<std::size_t>(j)]);
    }
  }
}

TEST_CASE("noiseless rendering is deterministic") {
  World w = default_world();
  const LatentState st = w.sample_state(21);
  const PseudoImage a = w.render_image(st, 5, 0.0);
  const PseudoImage b = w.render_image(st, 5, 0.0);
  CHECK(a.patches == b.patches);
  CHECK(a.pooled == b.pooled);
  const PseudoImage c = w.render_image(st, 5);
  const PseudoImage d = w.render_image(st, 5);
  CHECK(c.patches == d.patches);
  const PseudoImage e = w.render_image(st, 6);
  CHECK(c.patches != e.patches);
}

TEST_CASE("pooling identity holds to 1e-12") {
  World w = default_world();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const LatentState st = w.sample_state(seed);
    const PseudoImage img = w.render_image(st, seed + 1000);
    for (int j = 0; j < img.dim; ++j) {
      double mean = 0.0;
      for (int cell = 0; cell < img.patch_count(); ++cell) mean += img.patch(cell)[j];
      mean /= img.patch_count();
      CHECK(std::abs(mean - img.pooled[static_cast<std::size_t>(j)]) <= 1e-12);
    }
  }
}

// Monte-Carlo oracle: noisy renders average back to the noiseless code.
TEST_CASE("noise averages out over 1000 renders") {
  WorldConfig cfg;
  cfg.image_dim = 8;
  World w{cfg};
  const LatentState st = w.sample_state(33);
  const PseudoImage clean = w.render_image(st, 0, 0.0);
  const double sigma = 0.1;
  const int n = 1000;
  std::vector<double> acc(clean.patches.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    const PseudoImage img = w.render_image(st, static_cast<std::uint64_t>(i) + 100000, sigma);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += img.patches[j];
  }
  const double bound = 3.0 * sigma / std::sqrt(static_cast<double>(n));
  for (std::size_t j = 0; j < acc.size(); ++j) {
    CHECK(std::abs(acc[j] / n - clean.patches[j]) <= bound);
  }
}

// Spatial code property: side-assigned columns carry exactly that side's code.
TEST_CASE("spatial code algebra localizes findings") {
  World w = default_world();
  LatentState st;
  st.state_id = 8;
  st.orientation = Orientation::kFrontal;
  Finding left;
  left.condition = 0;
  left.location = {Side::kLeft, Vertical::kApex};
  left.severity = Severity::kSevere;
  Finding right;
  right.condition = 1;
  right.location = {Side::kRight, Vertical::kBase};
  right.severity = Severity::kMild;
  right.comparison = Comparison::kWorsened;
  st.findings = {left, right};

  const PseudoImage img = w.render_image(st, 0, 0.0);
  const auto base = w.base_patch(st.orientation);
  const auto code_left = w.finding_code(left);
  const auto code_right = w.finding_code(right);
  const auto cells_left = w.cells_for(left.location);
  const auto cells_right = w.cells_for(right.location);
  const int g = img.grid;
  CHECK(cells_left.size() == static_cast<std::size_t>(g / 4 * g / 2));
  for (int cell = 0; cell < img.patch_count(); ++cell) {
    const bool in_left = std::find(cells_left.begin(), cells_left.end(), cell) != cells_left.end();
    const bool in_right = std::find(cells_right.begin(), cells_right.end(), cell) != cells_right.end();
    CHECK(!(in_left && in_right));
    for (int j = 0; j < img.dim; ++j) {
      double expect = base[static_cast<std::size_t>(j)];
      if (in_left) expect += code_left[static_cast<std::size_t>(j)];
      if (in_right) expect += code_right[static_cast<std::size_t>(j)];
      CHECK(std::abs(img.patch(cell)[j] - expect) <= 1e-12);
    }
  }
  // removing the left columns removes exactly the left finding's contribution
  LatentState right_only = st;
  right_only.findings = {right};
  const PseudoImage img_r = w.render_image(right_only, 0, 0.0);
  for (int cell : cells_left) {
    for (int j = 0; j < img.dim; ++j) {
      CHECK(std::abs(img.patch(cell)[j] - code_left[static_cast<std::size_t>(j)] -
                     img_r.patch(cell)[j]) <= 1e-12);
    }
  }
}

TEST_CASE("bilateral findings span both column blocks") {
  World w = default_world();
  Location loc{Side::kBilateral, Vertical::kLower};
  const auto cells = w.cells_for(loc);
  const int g = w.config().grid;
  CHECK(cells.size() == static_cast<std::size_t>(g));  // one row band, all columns
  const auto left_cells = w.cells_for({Side::kLeft, Vertical::kLower});
  const auto right_cells = w.cells_for({Side::kRight, Vertical::kLower});
  std::vector<int> joined = left_cells;
  joined.insert(joined.end(), right_cells.begin(), right_cells.end());
  std::sort(joined.begin(), joined.end());
  CHECK(joined == cells);
}

TEST_CASE("splits are exact, deterministic, and id-keyed") {
  std::vector<std::uint64_t> ids(1000);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::uint64_t>(i);
  const auto splits = World::assign_splits(ids);
  int n_train = 0, n_val = 0, n_test = 0;
  for (Split s : splits) {
    if (s == Split::kTrain) ++n_train;
    if (s == Split::kVal) ++n_val;
    if (s == Split::kTest) ++n_test;
  }
  CHECK(n_train == 800);
  CHECK(n_val == 100);
  CHECK(n_test == 100);
  CHECK(World::assign_splits(ids) == splits);
  // split follows the id, not the position
  std::vector<std::uint64_t> reversed(ids.rbegin(), ids.rend());
  const auto rev_splits = World::assign_splits(reversed);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    CHECK(rev_splits[ids.size() - 1 - i] == splits[i]);
  }
}

TEST_CASE("fingerprint tracks config and grammar") {
  World a = default_world();
  World b = default_world();
  CHECK(a.fingerprint() == b.fingerprint());
  WorldConfig cfg;
  cfg.code_seed = 999;
  World c{cfg};
  CHECK(c.fingerprint() != a.fingerprint());
  WorldConfig cfg2;
  cfg2.prevalence = 0.31;
  World d{cfg2};
  CHECK(d.fingerprint() != a.fingerprint());
}
