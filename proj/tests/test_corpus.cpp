#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "radcorrect/checkpoint.hpp"
#include "radcorrect/corpus.hpp"
#include "radcorrect/errorgen.hpp"
#include "radcorrect/errors.hpp"

using namespace radcorrect;

namespace {

World make_world() {
  WorldConfig cfg;
  return World(cfg);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string tmp_path(const char* name) { return std::string("/tmp/rc_corpus_") + name; }

}  // namespace

TEST_CASE("build_corpus writes byte-identical files for the same seed") {
  World w = make_world();
  const std::string p1 = tmp_path("det_a.jsonl");
  const std::string p2 = tmp_path("det_b.jsonl");
  build_corpus(w, 10, 3, p1);
  build_corpus(w, 10, 3, p2);
  CHECK(slurp(p1) == slurp(p2));
  const std::string p3 = tmp_path("det_c.jsonl");
  build_corpus(w, 10, 4, p3);
  CHECK(slurp(p1) != slurp(p3));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
  std::remove(p3.c_str());
}

TEST_CASE("corpus of 1000 records splits 800/100/100") {
  World w = make_world();
  const std::vector<CorpusRecord> records = generate_corpus(w, 1000, 11);
  std::size_t train = 0, val = 0, test = 0;
  for (const CorpusRecord& r : records) {
    if (r.split == Split::kTrain) ++train;
    if (r.split == Split::kVal) ++val;
    if (r.split == Split::kTest) ++test;
  }
  CHECK(train == 800);
  CHECK(val == 100);
  CHECK(test == 100);
}

TEST_CASE("every generated record satisfies the label round trip") {
  World w = make_world();
  const std::vector<CorpusRecord> records = generate_corpus(w, 300, 5);
  for (const CorpusRecord& r : records) {
    CHECK(w.extract_labels(r.tokens) == w.state_labels(r.state));
  }
}

TEST_CASE("corpus JSONL round-trips exactly") {
  World w = make_world();
  const std::string path = tmp_path("roundtrip.jsonl");
  const std::vector<CorpusRecord> written = build_corpus(w, 40, 21, path);
  const std::vector<CorpusRecord> loaded = load_corpus(path, w);
  REQUIRE(loaded.size() == written.size());
  for (std::size_t i = 0; i < written.size(); ++i) {
    CHECK(loaded[i].state.state_id == written[i].state.state_id);
    CHECK(loaded[i].state.orientation == written[i].state.orientation);
    CHECK(loaded[i].state.findings == written[i].state.findings);
    CHECK(loaded[i].tokens == written[i].tokens);
    REQUIRE(loaded[i].sentence_map.size() == written[i].sentence_map.size());
    for (std::size_t s = 0; s < written[i].sentence_map.size(); ++s) {
      CHECK(loaded[i].sentence_map[s].begin == written[i].sentence_map[s].begin);
      CHECK(loaded[i].sentence_map[s].end == written[i].sentence_map[s].end);
      CHECK(loaded[i].sentence_map[s].finding_index == written[i].sentence_map[s].finding_index);
    }
    CHECK(loaded[i].image.patches == written[i].image.patches);  // exact double round trip
    CHECK(loaded[i].image.pooled == written[i].image.pooled);
    CHECK(loaded[i].split == written[i].split);
  }
  std::remove(path.c_str());
}

TEST_CASE("loading a corpus with duplicate ids fails") {
  World w = make_world();
  const std::string path = tmp_path("dup.jsonl");
  build_corpus(w, 2, 7, path);
  std::string contents = slurp(path);
  std::ofstream out(path, std::ios::binary);
  const std::string first = contents.substr(0, contents.find('\n') + 1);
  out << first << first;
  out.close();
  CHECK_THROWS_AS(load_corpus(path, w), DataError);
  std::remove(path.c_str());
}

TEST_CASE("malformed JSON lines are rejected with a line number") {
  World w = make_world();
  const std::string path = tmp_path("bad.jsonl");
  std::ofstream out(path, std::ios::binary);
  out << "{not json}\n";
  out.close();
  try {
    load_corpus(path, w);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("erroneous JSONL round-trips and validates against its source") {
  World w = make_world();
  const std::vector<CorpusRecord> records = generate_corpus(w, 50, 33);
  std::vector<ErroneousReport> errs;
  for (const CorpusRecord& r : records) {
    ReportText rt;
    rt.report_id = r.state.state_id;
    rt.tokens = r.tokens;
    rt.sentence_map = r.sentence_map;
    auto [a, b] = make_pair(w, rt, r.state, derive_seed(99, r.state.state_id));
    errs.push_back(std::move(a));
    errs.push_back(std::move(b));
  }
  const std::string path = tmp_path("errs.jsonl");
  write_erroneous(path, errs);
  const std::vector<ErroneousReport> loaded = load_erroneous(path, w);
  REQUIRE(loaded.size() == errs.size());
  for (std::size_t i = 0; i < errs.size(); ++i) CHECK(loaded[i] == errs[i]);

  // validate against sources after the round trip
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    const CorpusRecord& src = records[i / 2];
    ReportText rt;
    rt.report_id = src.state.state_id;
    rt.tokens = src.tokens;
    rt.sentence_map = src.sentence_map;
    CHECK(validate(loaded[i], rt) == "");
  }
  const std::string p2 = tmp_path("errs2.jsonl");
  write_erroneous(p2, errs);
  CHECK(slurp(path) == slurp(p2));
  std::remove(path.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoint container round-trips named tensors") {
  ParamSet params;
  Rng rng(4);
  params.add("enc.w", Tensor::randn({3, 4}, rng, 1.0, true));
  params.add("enc.b", Tensor::randn({4}, rng, 1.0, true));
  params.add("head.w", Tensor::randn({4, 2}, rng, 1.0, true));

  Checkpoint ckpt;
  ckpt.kind = "detector";
  ckpt.world_fingerprint = 0xDEADBEEFCAFEF00DULL;
  ckpt.config_json = "{\"d_model\":4}";
  ckpt.tensors = snapshot(params);
  const std::string path = tmp_path("model.ckpt");
  save_checkpoint(path, ckpt);

  const Checkpoint back = load_checkpoint(path);
  CHECK(back.kind == "detector");
  CHECK(back.world_fingerprint == ckpt.world_fingerprint);
  CHECK(back.config_json == ckpt.config_json);
  REQUIRE(back.tensors.size() == 3);
  CHECK(back.tensors[0].name == "enc.w");
  CHECK(back.tensors[0].shape == std::vector<std::size_t>{3, 4});
  CHECK(back.tensors[0].data == params.find("enc.w").value());

  // restoring into a freshly initialized set reproduces the values
  ParamSet other;
  Rng rng2(9);
  other.add("enc.w", Tensor::randn({3, 4}, rng2, 1.0, true));
  other.add("enc.b", Tensor::randn({4}, rng2, 1.0, true));
  other.add("head.w", Tensor::randn({4, 2}, rng2, 1.0, true));
  restore_into(back.tensors, other);
  CHECK(other.find("enc.w").value() == params.find("enc.w").value());
  CHECK(other.find("head.w").value() == params.find("head.w").value());

  // shape mismatch and missing names are rejected
  ParamSet wrong;
  wrong.add("enc.w", Tensor::zeros({4, 3}, true));
  wrong.add("enc.b", Tensor::zeros({4}, true));
  wrong.add("head.w", Tensor::zeros({4, 2}, true));
  CHECK_THROWS_AS(restore_into(back.tensors, wrong), DataError);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects foreign files") {
  const std::string path = tmp_path("not_a.ckpt");
  std::ofstream out(path, std::ios::binary);
  out << "definitely not a checkpoint";
  out.close();
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/nope.ckpt"), DataError);
  std::remove(path.c_str());
}

TEST_CASE("enum name lookups reject unknown strings") {
  CHECK(severity_from_name("mild") == Severity::kMild);
  CHECK(split_from_name("val") == Split::kVal);
  CHECK(orientation_from_name("lateral") == Orientation::kLateral);
  CHECK_THROWS_AS(severity_from_name("extreme"), DataError);
  CHECK_THROWS_AS(split_from_name("holdout"), DataError);
}
