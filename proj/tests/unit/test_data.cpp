#include "optrace/data.hpp"
#include "optrace/errors.hpp"
#include "optrace/synthetic.hpp"

#include <doctest.h>

#include <set>
#include <sstream>

using namespace ot;
using namespace ot::data;

namespace {

Dataset from_csv(const std::string& text) {
  std::istringstream in(text);
  return parse_csv(in);
}

const char* kHeader = "student_id,timestamp,question_id,subject_ids,chosen_option,correct_option\n";

Dataset small_synthetic(int students = 40, std::uint64_t seed = 1) {
  synth::GenConfig cfg;
  cfg.num_students = students;
  cfg.num_questions = 20;
  cfg.num_subjects = 4;
  cfg.min_length = 8;
  cfg.max_length = 15;
  cfg.seed = seed;
  return synth::generate(cfg).dataset;
}

}  // namespace

TEST_CASE("loading sorts by timestamp and derives correctness") {
  const Dataset ds = from_csv(std::string(kHeader) +
                              "5,30,1,2,B,B\n"
                              "5,10,2,1;3,A,C\n"
                              "5,20,3,,D,D\n");
  REQUIRE(ds.students.size() == 1);
  const auto& ev = ds.students[0].events;
  REQUIRE(ev.size() == 3);
  CHECK(ev[0].timestamp == 10);
  CHECK(ev[1].timestamp == 20);
  CHECK(ev[2].timestamp == 30);
  CHECK(ev[2].correctness == 1);
  CHECK(ev[0].correctness == 0);
  CHECK(ev[0].subject_ids == std::vector<int>{1, 3});
  for (const auto& e : ev) CHECK(e.mask == 1);
  // Untagged question maps to the reserved subject.
  CHECK(ev[1].subject_ids == std::vector<int>{kUntaggedSubject});
  CHECK(ds.question_subjects.at(3) == std::vector<int>{kUntaggedSubject});
  CHECK(ds.num_options == 4);
}

TEST_CASE("timestamp ties keep file order") {
  const Dataset ds = from_csv(std::string(kHeader) + "1,5,1,1,A,A\n1,5,2,1,B,A\n1,5,3,1,C,A\n");
  const auto& ev = ds.students[0].events;
  CHECK(ev[0].question_id == 1);
  CHECK(ev[1].question_id == 2);
  CHECK(ev[2].question_id == 3);
}

TEST_CASE("malformed input names the row") {
  try {
    (void)from_csv(std::string(kHeader) + "1,1,1,1,A,A\n1,2,x,1,A,A\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("3") != std::string::npos);
  }
  CHECK_THROWS_AS((void)from_csv(std::string(kHeader) + "1,1,1,1,E,A\n"), ParseError);
  CHECK_THROWS_AS((void)from_csv(std::string(kHeader) + "1,1,1,1,A\n"), ParseError);
  CHECK_THROWS_AS((void)from_csv("student_id,question_id\n1,2\n"), ParseError);
}

TEST_CASE("inconsistent correct option is an integrity error") {
  CHECK_THROWS_AS((void)from_csv(std::string(kHeader) + "1,1,7,1,A,B\n2,1,7,1,A,C\n"), IntegrityError);
}

TEST_CASE("CSV and JSONL round trips are lossless") {
  const Dataset ds = small_synthetic();
  std::stringstream csv, jsonl;
  write_csv(ds, csv);
  CHECK(parse_csv(csv) == ds);
  write_jsonl(ds, jsonl);
  CHECK(parse_jsonl(jsonl) == ds);
  std::stringstream again;
  write_csv(ds, again);
  CHECK(dataset_hash(parse_csv(again)) == dataset_hash(ds));
}

TEST_CASE("CF split") {
  const Dataset ten = from_csv([] {
    std::string s = kHeader;
    for (int t = 0; t < 10; ++t) s += "1," + std::to_string(t) + "," + std::to_string(t + 1) + ",1,A,A\n";
    return s;
  }());
  SplitSpec spec{SplitMode::CF, 0.6, 0.2, 0.2, 42};

  SUBCASE("10 events at 60/20/20 give 6/2/2") {
    const CfSplit sp = make_cf_split(ten, spec);
    CHECK(sp.indices(Role::Train).size() == 6);
    CHECK(sp.indices(Role::Val).size() == 2);
    CHECK(sp.indices(Role::Test).size() == 2);
    const Dataset masked = sp.apply_masks(ten);
    int observed = 0;
    for (const auto& e : masked.students[0].events) observed += e.mask;
    CHECK(observed == 6);
  }
  SUBCASE("partition, determinism and a kept training step") {
    const Dataset ds = small_synthetic();
    const CfSplit a = make_cf_split(ds, spec);
    CHECK(a == make_cf_split(ds, spec));
    std::size_t total = 0;
    for (const auto& s : ds.students) total += s.events.size();
    std::set<StepRef> all;
    for (Role r : {Role::Train, Role::Val, Role::Test})
      for (const auto& ref : a.indices(r)) CHECK(all.insert(ref).second);
    CHECK(all.size() == total);
    for (const auto& roles : a.roles) CHECK(std::count(roles.begin(), roles.end(), Role::Train) >= 1);
    spec.seed = 43;
    CHECK_FALSE(a == make_cf_split(ds, spec));
  }
  SUBCASE("short students stay in training with a warning") {
    const Dataset ds = from_csv(std::string(kHeader) + "1,1,1,1,A,A\n1,2,2,1,A,A\n");
    const CfSplit sp = make_cf_split(ds, spec);
    CHECK(sp.indices(Role::Train).size() == 2);
    CHECK(sp.warnings.size() == 1);
  }
  SUBCASE("bad fractions") {
    CHECK_THROWS_AS(make_cf_split(ten, SplitSpec{SplitMode::CF, 0.5, 0.2, 0.2, 0}), ConfigError);
    CHECK_THROWS_AS(make_cf_split(ten, SplitSpec{SplitMode::CF, 1.0, 0.0, 0.0, 0}), ConfigError);
    CHECK_THROWS_AS(make_cf_split(ten, SplitSpec{SplitMode::KT, 0.6, 0.2, 0.2, 0}), ConfigError);
  }
}

TEST_CASE("KT split") {
  const Dataset ds = small_synthetic(100);
  const SplitSpec spec{SplitMode::KT, 0.6, 0.2, 0.2, 7};
  const KtSplit sp = make_kt_split(ds, spec);
  CHECK(sp.train.size() == 60);
  CHECK(sp.val.size() == 20);
  CHECK(sp.test.size() == 20);
  CHECK(sp == make_kt_split(ds, spec));
  std::set<std::size_t> seen;
  for (const auto* v : {&sp.train, &sp.val, &sp.test})
    for (std::size_t s : *v) CHECK(seen.insert(s).second);
  CHECK(seen.size() == 100);
  CHECK_THROWS_AS(make_kt_split(small_synthetic(2), spec), ConfigError);
}

TEST_CASE("k-fold") {
  const Dataset ds = small_synthetic(30);
  SUBCASE("KT: k=5 test sets are disjoint and covering") {
    const auto folds = kfold(ds, 5, SplitMode::KT, 3);
    REQUIRE(folds.size() == 5);
    std::multiset<std::size_t> tested;
    for (const auto& f : folds) {
      const auto& kt = std::get<KtSplit>(f);
      for (std::size_t s : kt.test) tested.insert(s);
      std::set<std::size_t> all(kt.train.begin(), kt.train.end());
      all.insert(kt.val.begin(), kt.val.end());
      all.insert(kt.test.begin(), kt.test.end());
      CHECK(all.size() == ds.students.size());
      CHECK_FALSE(kt.train.empty());
    }
    CHECK(tested.size() == ds.students.size());
    for (std::size_t s = 0; s < ds.students.size(); ++s) CHECK(tested.count(s) == 1);
  }
  SUBCASE("KT: k=2 on 4 students tests each once") {
    const auto folds = kfold(small_synthetic(4), 2, SplitMode::KT, 0);
    std::multiset<std::size_t> tested;
    for (const auto& f : folds)
      for (std::size_t s : std::get<KtSplit>(f).test) tested.insert(s);
    CHECK(tested == std::multiset<std::size_t>{0, 1, 2, 3});
  }
  SUBCASE("CF: every step tested exactly once") {
    const auto folds = kfold(ds, 5, SplitMode::CF, 9);
    std::map<StepRef, int> count;
    std::size_t per_fold_total = 0;
    for (const auto& f : folds) {
      const auto& cf = std::get<CfSplit>(f);
      for (const auto& ref : cf.indices(Role::Test)) ++count[ref];
      per_fold_total += cf.indices(Role::Test).size();
      for (const auto& roles : cf.roles) CHECK(std::count(roles.begin(), roles.end(), Role::Train) >= 1);
    }
    CHECK(per_fold_total == ds.num_events());
    for (const auto& [_, c] : count) CHECK(c == 1);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(kfold(ds, 1, SplitMode::KT, 0), ConfigError);
    CHECK_THROWS_AS(kfold(small_synthetic(4), 5, SplitMode::KT, 0), ConfigError);
  }
}

TEST_CASE("split artifacts round-trip through JSON") {
  const Dataset ds = small_synthetic();
  for (SplitMode mode : {SplitMode::CF, SplitMode::KT}) {
    SplitArtifact art;
    art.spec = {mode, 0.6, 0.2, 0.2, 5};
    art.k = 3;
    art.folds = kfold(ds, 3, mode, 5);
    const auto j = to_json(art, ds);
    const SplitArtifact back = split_from_json(nlohmann::json::parse(j.dump()), ds);
    CHECK(back.k == 3);
    CHECK(back.spec.seed == 5);
    REQUIRE(back.folds.size() == 3);
    for (std::size_t f = 0; f < 3; ++f) CHECK(back.folds[f] == art.folds[f]);
    CHECK(to_json(back, ds).dump() == j.dump());
  }
}

TEST_CASE("chunking into windows") {
  CHECK(chunk_ranges(5, 200) == std::vector<std::pair<std::size_t, std::size_t>>{{0, 5}});
  CHECK(chunk_ranges(450, 200) ==
        std::vector<std::pair<std::size_t, std::size_t>>{{0, 200}, {200, 400}, {400, 450}});
  CHECK(chunk_ranges(400, 200).size() == 2);
}
