#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "doctest.h"

#include "radcorrect/checkpoint.hpp"
#include "radcorrect/corpus.hpp"
#include "radcorrect/detector.hpp"
#include "radcorrect/errorgen.hpp"
#include "radcorrect/errors.hpp"
#include "radcorrect/fdcheck.hpp"
#include "radcorrect/world.hpp"

using namespace radcorrect;

namespace {

std::vector<ErroneousReport> inject_all(const World& w, const std::vector<CorpusRecord>& corpus,
                                        std::uint64_t seed) {
  std::vector<ErroneousReport> errs;
  errs.reserve(corpus.size() * 2);
  for (const auto& rec : corpus) {
    ReportText rt;
    rt.report_id = rec.state.state_id;
    rt.tokens = rec.tokens;
    rt.sentence_map = rec.sentence_map;
    auto [a, b] = make_pair(w, rt, rec.state, derive_seed(seed, rec.state.state_id));
    errs.push_back(std::move(a));
    errs.push_back(std::move(b));
  }
  return errs;
}

CorpusRecord make_record(const World& w, std::uint64_t seed, Split split) {
  CorpusRecord rec;
  rec.state = w.sample_state(seed);
  const ReportText rt = w.render_report(rec.state);
  rec.tokens = rt.tokens;
  rec.sentence_map = rt.sentence_map;
  rec.image = w.render_image(rec.state, seed);
  rec.split = split;
  return rec;
}

// One modest training run shared by the behavioural tests.
struct SmallRun {
  World world;
  std::vector<CorpusRecord> corpus;
  std::vector<ErroneousReport> errs;
  TrainedDetector trained;
};

const SmallRun& small_run() {
  static const SmallRun* run = [] {
    WorldConfig wc;
    World world(wc);
    std::vector<CorpusRecord> corpus = generate_corpus(world, 260, 11);
    std::vector<ErroneousReport> errs = inject_all(world, corpus, 31);
    DetectorConfig cfg;
    cfg.d_model = 32;
    cfg.ffn_hidden = 64;
    cfg.batch_size = 32;
    cfg.phase1_epochs = 5;
    cfg.phase2_epochs = 1;
    cfg.optim.base_lr = 1e-3;
    TrainedDetector trained = train_detector(world, corpus, errs, cfg, 5);
    return new SmallRun{std::move(world), std::move(corpus), std::move(errs), std::move(trained)};
  }();
  return *run;
}

}  // namespace

TEST_CASE("strategy names round trip and reject unknowns") {
  CHECK(strategy_name(ConditioningStrategy::kPatch) == std::string("patch"));
  CHECK(strategy_name(ConditioningStrategy::kPool) == std::string("pool"));
  CHECK(strategy_name(ConditioningStrategy::kConcatenate) == std::string("concatenate"));
  CHECK(strategy_from_name("patch") == ConditioningStrategy::kPatch);
  CHECK(strategy_from_name("pool") == ConditioningStrategy::kPool);
  CHECK(strategy_from_name("concatenate") == ConditioningStrategy::kConcatenate);
  CHECK_THROWS_AS(strategy_from_name("cross-attend"), ConfigError);
}

TEST_CASE("detector config validation rejects out-of-range values") {
  DetectorConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  auto bad = cfg;
  bad.tau = -0.01;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.tau = 1.01;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.d_model = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.d_model = 10;  // not divisible by the default four heads
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.focal.alpha = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.focal.gamma = -0.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.max_seq_tokens = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("build_sequence produces the documented shapes for all strategies") {
  WorldConfig wc;
  World world(wc);  // grid 4 -> 16 patches of dim 32
  const CorpusRecord rec = make_record(world, 42, Split::kTrain);
  const std::size_t n_real = rec.tokens.size();
  REQUIRE(n_real > 0);
  REQUIRE(n_real < 200);

  DetectorConfig cfg;
  cfg.pad_to = 200;

  SUBCASE("patch: all patch rows are prepended") {
    DetectorModel m(world, cfg, 1);
    const ConditioningSequence cs = m.build_sequence(rec.image, rec.tokens);
    CHECK(cs.seq.rows() == 216);
    CHECK(cs.seq.cols() == 64);
    CHECK(cs.token_offset == 16);
    CHECK(cs.n_tokens == n_real);
  }
  SUBCASE("pool: one pooled row is prepended") {
    cfg.strategy = ConditioningStrategy::kPool;
    DetectorModel m(world, cfg, 1);
    const ConditioningSequence cs = m.build_sequence(rec.image, rec.tokens);
    CHECK(cs.seq.rows() == 201);
    CHECK(cs.seq.cols() == 64);
    CHECK(cs.token_offset == 1);
    CHECK(cs.n_tokens == n_real);
  }
  SUBCASE("concatenate: the pooled vector widens every token row") {
    cfg.strategy = ConditioningStrategy::kConcatenate;
    DetectorModel m(world, cfg, 1);
    const ConditioningSequence cs = m.build_sequence(rec.image, rec.tokens);
    CHECK(cs.seq.rows() == 200);
    CHECK(cs.seq.cols() == 128);
    CHECK(cs.token_offset == 0);
    CHECK(cs.n_tokens == n_real);
  }
  SUBCASE("token segments longer than the cap are truncated") {
    DetectorModel m(world, cfg, 1);
    std::vector<TokenId> long_tokens;
    while (long_tokens.size() < 250) {
      long_tokens.insert(long_tokens.end(), rec.tokens.begin(), rec.tokens.end());
    }
    long_tokens.resize(250);
    const ConditioningSequence cs = m.build_sequence(rec.image, long_tokens);
    CHECK(cs.seq.rows() == 216);
    CHECK(cs.n_tokens == 200);
  }
  SUBCASE("without pad_to the sequence keeps its natural length") {
    cfg.pad_to = 0;
    DetectorModel m(world, cfg, 1);
    const ConditioningSequence cs = m.build_sequence(rec.image, rec.tokens);
    CHECK(cs.seq.rows() == 16 + n_real);
    CHECK(cs.n_tokens == n_real);
  }
  SUBCASE("foreign image geometry is rejected") {
    DetectorModel m(world, cfg, 1);
    PseudoImage bad = rec.image;
    bad.grid = 2;
    bad.patches.resize(static_cast<std::size_t>(4) * 32);
    CHECK_THROWS_AS(m.build_sequence(bad, rec.tokens), DataError);
  }
}

TEST_CASE("forward yields strict probabilities at token positions only") {
  WorldConfig wc;
  World world(wc);
  const CorpusRecord rec = make_record(world, 43, Split::kTrain);
  DetectorConfig cfg;
  cfg.d_model = 32;
  cfg.ffn_hidden = 64;
  for (const auto strategy : {ConditioningStrategy::kPatch, ConditioningStrategy::kPool,
                              ConditioningStrategy::kConcatenate}) {
    cfg.strategy = strategy;
    DetectorModel m(world, cfg, 2);
    const Tensor p = m.forward(rec.image, rec.tokens);
    CHECK(p.rows() == rec.tokens.size());
    CHECK(p.cols() == 1);
    for (const double v : p.value()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("pooled conditioning is invariant to patch order") {
  WorldConfig wc;
  World world(wc);
  const CorpusRecord rec = make_record(world, 44, Split::kTrain);

  PseudoImage permuted = rec.image;
  const int cells = permuted.patch_count();
  const int d = permuted.dim;
  for (int cell = 0; cell < cells; ++cell) {
    const double* src = rec.image.patch(cells - 1 - cell);
    std::copy(src, src + d, permuted.patches.begin() + static_cast<std::ptrdiff_t>(cell) * d);
  }
  std::fill(permuted.pooled.begin(), permuted.pooled.end(), 0.0);
  for (int cell = 0; cell < cells; ++cell) {
    for (int j = 0; j < d; ++j) {
      permuted.pooled[static_cast<std::size_t>(j)] +=
          permuted.patch(cell)[j] / static_cast<double>(cells);
    }
  }

  DetectorConfig cfg;
  cfg.d_model = 32;
  cfg.ffn_hidden = 64;
  cfg.strategy = ConditioningStrategy::kPool;
  DetectorModel pool_model(world, cfg, 3);
  const std::vector<double> a = probabilities(pool_model.forward(rec.image, rec.tokens));
  const std::vector<double> b = probabilities(pool_model.forward(permuted, rec.tokens));
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));

  cfg.strategy = ConditioningStrategy::kPatch;
  DetectorModel patch_model(world, cfg, 3);
  const std::vector<double> c = probabilities(patch_model.forward(rec.image, rec.tokens));
  const std::vector<double> e = probabilities(patch_model.forward(permuted, rec.tokens));
  double max_diff = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) max_diff = std::max(max_diff, std::abs(c[i] - e[i]));
  CHECK(max_diff > 1e-6);  // patch rows carry positions, so order matters here
}

TEST_CASE("flag_tokens applies the 1 - tau cut and validates tau") {
  const std::vector<double> p = {0.1, 0.31, 0.35, 0.9};
  CHECK(flag_tokens(p, 0.7) == std::vector<std::uint8_t>{0, 1, 1, 1});
  CHECK(flag_tokens(p, 0.0) == std::vector<std::uint8_t>{0, 0, 0, 0});
  CHECK(flag_tokens(p, 1.0) == std::vector<std::uint8_t>{1, 1, 1, 1});
  CHECK(flag_tokens(p, 0.6) == std::vector<std::uint8_t>{0, 0, 0, 1});
  // The cut is inclusive: p_error exactly at 1 - tau is flagged.
  CHECK(flag_tokens({0.5, 0.4999}, 0.5) == std::vector<std::uint8_t>{1, 0});
  CHECK_THROWS_AS(flag_tokens(p, -0.001), ConfigError);
  CHECK_THROWS_AS(flag_tokens(p, 1.001), ConfigError);
  CHECK_THROWS_AS(flag_tokens(p, std::nan("")), ConfigError);
}

TEST_CASE("flagged sets nest as tau grows") {
  WorldConfig wc;
  World world(wc);
  const CorpusRecord rec = make_record(world, 45, Split::kTrain);
  DetectorConfig cfg;
  cfg.d_model = 32;
  cfg.ffn_hidden = 64;
  DetectorModel m(world, cfg, 4);
  const std::vector<double> p = probabilities(m.forward(rec.image, rec.tokens));

  std::vector<std::uint8_t> prev(p.size(), 0);
  for (int k = 0; k <= 10; ++k) {
    const std::vector<std::uint8_t> cur = flag_tokens(p, 0.1 * k);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (prev[i]) CHECK(cur[i]);  // once flagged, stays flagged at looser tau
    }
    prev = cur;
  }
  CHECK(std::count(prev.begin(), prev.end(), 1) == static_cast<std::ptrdiff_t>(p.size()));
}

TEST_CASE("full detector gradient matches finite differences at tiny dims") {
  WorldConfig wc;
  wc.image_dim = 8;
  World world(wc);
  const LatentState st = world.sample_state(9);
  const ReportText rt = world.render_report(st);
  const PseudoImage img = world.render_image(st, 9);
  std::vector<TokenId> tokens(rt.tokens.begin(), rt.tokens.begin() + 10);

  std::vector<double> label_values(10, 0.0);
  label_values[2] = 1.0;
  label_values[3] = 1.0;
  label_values[7] = 1.0;
  const Tensor y = Tensor::from({10, 1}, label_values);
  const Tensor ones = Tensor::from({10, 1}, std::vector<double>(10, 1.0));

  for (const auto strategy : {ConditioningStrategy::kPatch, ConditioningStrategy::kPool,
                              ConditioningStrategy::kConcatenate}) {
    DetectorConfig cfg;
    cfg.strategy = strategy;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.ffn_hidden = 12;
    DetectorModel m(world, cfg, 6);
    const auto build = [&] {
      return focal_loss(m.forward(img, tokens), y, ones, cfg.focal);
    };
    const double worst = finite_diff_check(build, m.trainable().tensors());
    INFO("strategy ", strategy_name(strategy));
    CHECK(worst <= 1e-3);
  }
}

TEST_CASE("a single erroneous report can be overfit in two hundred steps") {
  WorldConfig wc;
  World world(wc);
  std::vector<CorpusRecord> corpus = {make_record(world, 123, Split::kTrain)};
  ReportText rt;
  rt.report_id = corpus[0].state.state_id;
  rt.tokens = corpus[0].tokens;
  rt.sentence_map = corpus[0].sentence_map;
  auto [first, second] = make_pair(world, rt, corpus[0].state, 77);
  (void)second;
  std::vector<ErroneousReport> errs = {first};

  DetectorConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.ffn_hidden = 32;
  cfg.batch_size = 1;
  cfg.phase1_epochs = 200;
  cfg.phase2_epochs = 0;
  cfg.optim.base_lr = 1e-2;
  const TrainedDetector trained = train_detector(world, corpus, errs, cfg, 1);

  const Tensor p = trained.model.forward(corpus[0].image, errs[0].tokens);
  std::vector<double> yv(p.rows(), 0.0);
  for (std::size_t i = 0; i < p.rows(); ++i) yv[i] = errs[0].error_token_mask[i] ? 1.0 : 0.0;
  const Tensor y = Tensor::from({p.rows(), 1}, std::move(yv));
  const Tensor ones = Tensor::from({p.rows(), 1}, std::vector<double>(p.rows(), 1.0));
  const double final_loss = focal_loss(p, y, ones, cfg.focal).item();
  CHECK(final_loss < 0.01);
}

TEST_CASE("phase-one loss decreases monotonically within tolerance") {
  const auto& log = small_run().trained.log;
  REQUIRE(log.phase1_loss.size() >= 3);
  for (std::size_t i = 1; i < log.phase1_loss.size(); ++i) {
    CHECK(log.phase1_loss[i] <= log.phase1_loss[i - 1] * 1.05);
  }
  CHECK(log.phase1_loss.back() < log.phase1_loss.front());
  // One validation entry per epoch across both phases.
  CHECK(log.val_f1.size() == log.phase1_loss.size() + log.phase2_loss.size());
}

TEST_CASE("mismatched images degrade detection of false findings") {
  const SmallRun& run = small_run();
  std::map<std::uint64_t, const CorpusRecord*> by_id;
  for (const auto& rec : run.corpus) by_id.emplace(rec.state.state_id, &rec);

  // Validation examples that contain at least one false-finding span, each
  // paired first with its own image and then with a different record's image.
  std::vector<DetectorExample> honest;
  std::vector<const CorpusRecord*> sources;
  for (const auto& err : run.errs) {
    const CorpusRecord* src = by_id.at(err.source_report_id);
    if (src->split != Split::kVal) continue;
    const bool has_ff = std::any_of(err.spans.begin(), err.spans.end(), [](const ErrorSpan& s) {
      return s.etype == ErrorType::kFalseFinding;
    });
    if (!has_ff) continue;
    honest.push_back({&src->image, &err.tokens, &err.error_token_mask});
    sources.push_back(src);
  }
  REQUIRE(honest.size() >= 4);

  std::vector<DetectorExample> mismatched = honest;
  for (std::size_t i = 0; i < mismatched.size(); ++i) {
    for (std::size_t off = 1; off < sources.size(); ++off) {
      const CorpusRecord* other = sources[(i + off) % sources.size()];
      if (other->state.state_id != sources[i]->state.state_id) {
        mismatched[i].image = &other->image;
        break;
      }
    }
  }

  const double tau = run.trained.model.config().tau;
  const double f1_honest = evaluate_detection(run.trained.model, honest, tau).error_class.f1;
  const double f1_mismatched =
      evaluate_detection(run.trained.model, mismatched, tau).error_class.f1;
  INFO("honest ", f1_honest, " mismatched ", f1_mismatched);
  CHECK(f1_honest > f1_mismatched);
}

TEST_CASE("evaluate_detection reproduces hand-computed counts") {
  const std::vector<std::uint8_t> labels1 = {1, 0, 1, 0};
  const std::vector<std::uint8_t> labels2 = {0, 0};
  const std::vector<TokenId> toks1 = {5, 6, 7, 8};
  const std::vector<TokenId> toks2 = {5, 6};
  std::vector<DetectorExample> examples = {{nullptr, &toks1, &labels1}, {nullptr, &toks2, &labels2}};
  const std::vector<std::vector<double>> probs = {{0.9, 0.8, 0.1, 0.2}, {0.9, 0.1}};

  const DetectionReport r = report_from_probabilities(examples, probs, 0.5);
  CHECK(r.n_tokens == 6);
  CHECK(r.error_class.precision == doctest::Approx(1.0 / 3.0));
  CHECK(r.error_class.recall == doctest::Approx(0.5));
  CHECK(r.error_class.f1 == doctest::Approx(0.4));
  CHECK(r.error_class.support == 2);
  CHECK(r.clean_class.precision == doctest::Approx(2.0 / 3.0));
  CHECK(r.clean_class.recall == doctest::Approx(0.5));
  CHECK(r.clean_class.f1 == doctest::Approx(4.0 / 7.0));
  CHECK(r.clean_class.support == 4);
  CHECK(r.accuracy == doctest::Approx(0.5));
  CHECK(r.macro_precision == doctest::Approx(0.5));
  CHECK(r.macro_recall == doctest::Approx(0.5));
  CHECK(r.macro_f1 == doctest::Approx(0.5 * (0.4 + 4.0 / 7.0)));
  CHECK(r.weighted_precision == doctest::Approx((2.0 * (1.0 / 3.0) + 4.0 * (2.0 / 3.0)) / 6.0));
  CHECK(r.weighted_f1 == doctest::Approx((2.0 * 0.4 + 4.0 * 4.0 / 7.0) / 6.0));

  SUBCASE("perfect predictions score one everywhere") {
    const std::vector<std::vector<double>> exact = {{0.99, 0.01, 0.99, 0.01}, {0.01, 0.01}};
    const DetectionReport perfect = report_from_probabilities(examples, exact, 0.5);
    CHECK(perfect.error_class.f1 == doctest::Approx(1.0));
    CHECK(perfect.clean_class.f1 == doctest::Approx(1.0));
    CHECK(perfect.accuracy == doctest::Approx(1.0));
    CHECK(perfect.macro_f1 == doctest::Approx(1.0));
    CHECK(perfect.weighted_f1 == doctest::Approx(1.0));
  }
  SUBCASE("all-clean labels leave the error class at zero") {
    std::vector<DetectorExample> clean = {{nullptr, &toks1, nullptr}};
    const std::vector<std::vector<double>> low = {{0.01, 0.01, 0.01, 0.01}};
    const DetectionReport quiet = report_from_probabilities(clean, low, 0.5);
    CHECK(quiet.error_class.support == 0);
    CHECK(quiet.error_class.f1 == 0.0);
    CHECK(quiet.clean_class.recall == doctest::Approx(1.0));
    CHECK(quiet.accuracy == doctest::Approx(1.0));
  }
  SUBCASE("count mismatches are rejected") {
    CHECK_THROWS_AS(report_from_probabilities(examples, {{0.5}}, 0.5), DataError);
  }
}

TEST_CASE("threshold sweep shares probabilities and keeps recall monotone") {
  const SmallRun& run = small_run();
  const std::vector<DetectorExample> val = erroneous_examples(run.corpus, run.errs, Split::kVal);
  REQUIRE(!val.empty());

  SUBCASE("duplicate thresholds produce identical rows") {
    const std::vector<DetectorExample> few(val.begin(), val.begin() + 2);
    const auto rows = sweep_threshold(run.trained.model, few, {0.5, 0.5, 0.7});
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].precision_error == rows[1].precision_error);
    CHECK(rows[0].recall_error == rows[1].recall_error);
    CHECK(rows[0].f1_error == rows[1].f1_error);
    CHECK(rows[0].accuracy == rows[1].accuracy);
  }
  SUBCASE("unsorted thresholds are rejected") {
    CHECK_THROWS_AS(sweep_threshold(run.trained.model, val, {0.7, 0.5}), ConfigError);
  }
  SUBCASE("recall of the error class never decreases in tau") {
    std::vector<double> taus;
    for (int k = 0; k <= 10; ++k) taus.push_back(0.1 * k);
    const auto rows = sweep_threshold(run.trained.model, val, taus);
    REQUIRE(rows.size() == taus.size());
    for (std::size_t i = 1; i < rows.size(); ++i) {
      CHECK(rows[i].recall_error >= rows[i - 1].recall_error);
    }
    CHECK(rows.front().recall_error == 0.0);  // tau = 0 flags nothing
    CHECK(rows.back().recall_error == doctest::Approx(1.0));
  }
  SUBCASE("csv rendering has the documented header and one line per row") {
    const std::vector<DetectorExample> few(val.begin(), val.begin() + 2);
    const auto rows = sweep_threshold(run.trained.model, few, {0.5, 0.7});
    const std::string csv = sweep_csv(rows);
    std::istringstream in(csv);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line ==
          "tau,precision_error,recall_error,f1_error,precision_clean,recall_clean,f1_clean,"
          "accuracy");
    std::size_t n_lines = 0;
    while (std::getline(in, line)) ++n_lines;
    CHECK(n_lines == rows.size());
  }
}

TEST_CASE("detector checkpoints round trip and reject mismatches") {
  WorldConfig wc;
  World world(wc);
  const CorpusRecord rec = make_record(world, 50, Split::kTrain);
  DetectorConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.ffn_hidden = 24;
  DetectorModel m(world, cfg, 8);
  const std::string path = "/tmp/rc_detector_ckpt.bin";
  save_detector(path, m);

  SUBCASE("round trip preserves forward behaviour bitwise") {
    const DetectorModel loaded = load_detector(path, world);
    CHECK(loaded.config().d_model == 16);
    CHECK(loaded.config().strategy == ConditioningStrategy::kPatch);
    const std::vector<double> a = probabilities(m.forward(rec.image, rec.tokens));
    const std::vector<double> b = probabilities(loaded.forward(rec.image, rec.tokens));
    CHECK(a == b);
  }
  SUBCASE("a different world fingerprint is rejected") {
    WorldConfig other = wc;
    other.num_classes = 11;
    World other_world(other);
    CHECK_THROWS_AS(load_detector(path, other_world), FingerprintMismatch);
    try {
      load_detector(path, other_world);
    } catch (const FingerprintMismatch& e) {
      CHECK(std::string(e.what()).find("does not match") != std::string::npos);
    }
  }
  SUBCASE("foreign checkpoint kinds are rejected") {
    Checkpoint ckpt = load_checkpoint(path);
    ckpt.kind = "retrieval";
    const std::string other_path = "/tmp/rc_detector_ckpt_kind.bin";
    save_checkpoint(other_path, ckpt);
    CHECK_THROWS_AS(load_detector(other_path, world), DataError);
  }
}

TEST_CASE("training is deterministic for a fixed seed") {
  WorldConfig wc;
  World world(wc);
  std::vector<CorpusRecord> corpus = generate_corpus(world, 40, 21);
  std::vector<ErroneousReport> errs = inject_all(world, corpus, 22);
  DetectorConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.ffn_hidden = 24;
  cfg.batch_size = 16;
  cfg.phase1_epochs = 1;
  cfg.phase2_epochs = 1;

  const TrainedDetector a = train_detector(world, corpus, errs, cfg, 9);
  const TrainedDetector b = train_detector(world, corpus, errs, cfg, 9);
  const TrainedDetector c = train_detector(world, corpus, errs, cfg, 10);

  const std::vector<DetectorExample> probe = erroneous_examples(corpus, errs, Split::kTrain);
  REQUIRE(!probe.empty());
  bool any_diff = false;
  for (std::size_t i = 0; i < std::min<std::size_t>(3, probe.size()); ++i) {
    const auto pa = probabilities(a.model.forward(*probe[i].image, *probe[i].tokens));
    const auto pb = probabilities(b.model.forward(*probe[i].image, *probe[i].tokens));
    const auto pc = probabilities(c.model.forward(*probe[i].image, *probe[i].tokens));
    CHECK(pa == pb);
    if (pa != pc) any_diff = true;
  }
  CHECK(any_diff);
  CHECK(a.log.phase1_loss == b.log.phase1_loss);
}

TEST_CASE("example assembly validates sources and honours splits") {
  WorldConfig wc;
  World world(wc);
  std::vector<CorpusRecord> corpus = generate_corpus(world, 60, 33);
  std::vector<ErroneousReport> errs = inject_all(world, corpus, 34);

  const auto train = erroneous_examples(corpus, errs, Split::kTrain);
  const auto val = erroneous_examples(corpus, errs, Split::kVal);
  const auto test = erroneous_examples(corpus, errs, Split::kTest);
  CHECK(train.size() + val.size() + test.size() == errs.size());

  std::size_t n_train_records = 0;
  for (const auto& rec : corpus) {
    if (rec.split == Split::kTrain) ++n_train_records;
  }
  CHECK(train.size() == 2 * n_train_records);
  CHECK(clean_examples(corpus, Split::kTrain).size() == n_train_records);

  std::vector<ErroneousReport> orphan = {errs[0]};
  orphan[0].source_report_id = 0xDEADBEEFULL;
  CHECK_THROWS_AS(erroneous_examples(corpus, orphan, Split::kTrain), DataError);
}

TEST_CASE("attention captures expose per-layer per-head weights") {
  WorldConfig wc;
  World world(wc);
  const CorpusRecord rec = make_record(world, 51, Split::kTrain);
  DetectorConfig cfg;
  cfg.d_model = 32;
  cfg.ffn_hidden = 64;
  DetectorModel m(world, cfg, 12);
  std::vector<AttentionCapture> captures;
  const Tensor p = m.forward(rec.image, rec.tokens, captures);
  CHECK(p.rows() == rec.tokens.size());
  REQUIRE(captures.size() == 2);
  const std::size_t seq_len = 16 + rec.tokens.size();
  for (const auto& cap : captures) {
    REQUIRE(cap.head_weights.size() == 4);
    for (const auto& w : cap.head_weights) {
      REQUIRE(w.rows() == seq_len);
      REQUIRE(w.cols() == seq_len);
      for (std::size_t r = 0; r < w.rows(); ++r) {
        double row_sum = 0.0;
        for (std::size_t ccol = 0; ccol < w.cols(); ++ccol) {
          row_sum += w.value()[r * w.cols() + ccol];
        }
        CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("an unusable corpus raises errors instead of silently training") {
  WorldConfig wc;
  World world(wc);
  std::vector<CorpusRecord> corpus = generate_corpus(world, 10, 60);
  for (auto& rec : corpus) rec.split = Split::kTest;  // leaves the train split empty
  std::vector<ErroneousReport> errs = inject_all(world, corpus, 61);
  DetectorConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  CHECK_THROWS_AS(train_detector(world, corpus, errs, cfg, 1), DataError);
}
