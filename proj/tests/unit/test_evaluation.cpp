#include "optrace/errors.hpp"
#include "optrace/evaluation.hpp"
#include "optrace/gradcheck.hpp"
#include "optrace/random.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

using namespace ot;
using namespace ot::eval;

namespace {

// One question whose truth follows the given per-option counts.
std::vector<int> with_counts(std::initializer_list<int> counts) {
  std::vector<int> out;
  int option = 0;
  for (int c : counts) {
    out.insert(out.end(), static_cast<std::size_t>(c), option);
    ++option;
  }
  return out;
}

models::Example example_for(int question, std::initializer_list<int> chosen, std::size_t student = 0) {
  models::Example ex;
  ex.student_index = student;
  std::int64_t t = 0;
  for (int o : chosen) {
    data::ResponseEvent e;
    e.timestamp = t++;
    e.question_id = question;
    e.subject_ids = {1};
    e.chosen_option = data::option_from_index(o);
    e.correct_option = data::Option::A;
    e.correctness = o == 0;
    ex.events.push_back(e);
  }
  ex.target.assign(ex.events.size(), 1);
  return ex;
}

}  // namespace

TEST_CASE("option accuracy") {
  const std::vector<int> a = {0, 1}, b = {0, 2}, one = {0}, none;
  CHECK(option_accuracy(a, a) == 1.0);
  CHECK(option_accuracy(a, b) == 0.5);
  CHECK_THROWS_AS(option_accuracy(a, one), ShapeError);
  CHECK_THROWS_AS(option_accuracy(none, none), ShapeError);
}

TEST_CASE("macro F1 hand-computed case") {
  const std::vector<int> truth = {0, 0, 1}, pred = {0, 1, 1}, q = {7, 7, 7};
  CHECK(macro_f1(pred, truth, q) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("macro F1 of a constant majority predictor") {
  const std::vector<int> truth = with_counts({57, 25, 11, 7});
  const std::vector<int> pred(truth.size(), 0), q(truth.size(), 3);
  // Only option A has non-zero F1: precision 0.57, recall 1.
  const double expected = (2 * 0.57 * 1.0 / (0.57 + 1.0)) / 4;
  CHECK(expected == doctest::Approx(0.18153).epsilon(1e-4));
  CHECK(macro_f1(pred, truth, q) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(std::abs(macro_f1(pred, truth, q) - 0.1815) < 0.005);
}

TEST_CASE("macro F1 conventions") {
  SUBCASE("perfect predictions with every option present") {
    const std::vector<int> t = {0, 1, 2, 3, 3}, q(5, 1);
    CHECK(macro_f1(t, t, q) == 1.0);
  }
  SUBCASE("options never predicted nor chosen count as zero") {
    const std::vector<int> t = {0, 1, 1}, q(3, 1);
    CHECK(macro_f1(t, t, q) == 0.5);
  }
  SUBCASE("every question contributes four pairs") {
    const std::vector<int> t = {0, 1, 2, 3, 0}, p = {0, 1, 2, 3, 1}, q = {1, 1, 1, 1, 2};
    // Question 1 is perfect (4 pairs of 1); question 2 has no match (4 pairs of 0).
    CHECK(macro_f1(p, t, q) == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("event order does not matter") {
    Rng rng(4);
    std::uniform_int_distribution<int> opt(0, 3), qu(1, 5);
    std::vector<int> t(200), p(200), q(200);
    for (std::size_t i = 0; i < 200; ++i) {
      t[i] = opt(rng);
      p[i] = opt(rng);
      q[i] = qu(rng);
    }
    const double base = macro_f1(p, t, q);
    std::vector<std::size_t> perm(200);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> t2(200), p2(200), q2(200);
    for (std::size_t i = 0; i < 200; ++i) {
      t2[i] = t[perm[i]];
      p2[i] = p[perm[i]];
      q2[i] = q[perm[i]];
    }
    CHECK(macro_f1(p2, t2, q2) == doctest::Approx(base).epsilon(1e-14));
  }
}

TEST_CASE("random predictions: accuracy near 1/4, macro F1 at its closed form") {
  const std::vector<int> truth = with_counts({5700, 2500, 1100, 700});
  const std::vector<int> q(truth.size(), 1);
  Rng rng(5);
  std::uniform_int_distribution<int> opt(0, 3);
  std::vector<int> pred(truth.size());
  for (auto& p : pred) p = opt(rng);
  CHECK(std::abs(option_accuracy(pred, truth) - 0.25) < 0.02);
  // Uniform guessing: precision = prevalence, recall = 1/4 for every option.
  double expected = 0;
  for (double prevalence : {0.57, 0.25, 0.11, 0.07}) expected += 2 * prevalence * 0.25 / (prevalence + 0.25) / 4;
  CHECK(std::abs(macro_f1(pred, truth, q) - expected) < 0.01);
  CHECK(expected < 0.25);
}

TEST_CASE("correctness accuracy") {
  const std::vector<double> exact = {1, 0, 1}, half = {0.5, 0.5, 0.5, 0.5};
  const std::vector<int> truth = {1, 0, 1}, truth4 = {1, 0, 1, 1};
  CHECK(correctness_accuracy(exact, truth) == 1.0);
  CHECK(correctness_accuracy(half, truth4) == 0.75);
  const std::vector<double> low = {0.49, 0.51};
  const std::vector<int> t2 = {0, 1};
  CHECK(correctness_accuracy(low, t2) == 1.0);
  CHECK_THROWS_AS(correctness_accuracy(half, truth), ShapeError);
}

TEST_CASE("baselines") {
  SUBCASE("majority is perfect when each question has a single chosen option") {
    const std::vector<models::Example> train = {example_for(1, {2, 2, 2}), example_for(2, {0, 0})};
    const std::vector<models::Example> test = {example_for(1, {2, 2}), example_for(2, {0})};
    const auto r = baselines(train, test, 0);
    CHECK(*r.majority.option_accuracy == 1.0);
    CHECK(r.majority.count == 3);
  }
  SUBCASE("unseen questions fall back to the global majority") {
    const std::vector<models::Example> train = {example_for(1, {3, 3, 3, 1}), example_for(2, {0})};
    const std::vector<models::Example> test = {example_for(9, {3, 3, 0})};
    CHECK(*baselines(train, test, 0).majority.option_accuracy == doctest::Approx(2.0 / 3.0));
  }
  SUBCASE("random baseline is seeded and near 1/4") {
    std::vector<models::Example> test;
    Rng rng(6);
    std::uniform_int_distribution<int> opt(0, 3);
    for (int s = 0; s < 50; ++s) {
      models::Example ex = example_for(1 + s % 7, {});
      for (int k = 0; k < 100; ++k) {
        auto e = example_for(1 + s % 7, {opt(rng)}).events[0];
        e.timestamp = k;
        ex.events.push_back(e);
      }
      ex.target.assign(ex.events.size(), 1);
      test.push_back(ex);
    }
    const auto a = baselines(test, test, 3), b = baselines(test, test, 3);
    CHECK(std::abs(*a.random.option_accuracy - 0.25) < 0.02);
    CHECK(*a.random.option_accuracy == *b.random.option_accuracy);
    CHECK(*a.random.macro_f1 == *b.random.macro_f1);
  }
}

TEST_CASE("predictions and reports") {
  const data::Dataset ds = check::toy_dataset(2, 6);
  const auto cfg = models::make_config(models::ModelKind::Dkt, models::Task::Option, ds, 4, 8);
  const auto ck = models::init_checkpoint(cfg, 2);
  auto examples = check::toy_examples(data::SplitMode::KT, 2, 6);
  examples[0].target[1] = 0;
  const Predictions p = predict(ck, examples, 1);
  REQUIRE(p.size() == 11);
  CHECK(p.question[0] == examples[0].events[0].question_id);
  CHECK(p.question[1] == examples[0].events[2].question_id);
  CHECK(p.question[5] == examples[1].events[0].question_id);
  CHECK(p.predicted_option.size() == 11);

  const Predictions same = predict(ck, examples, 64);
  CHECK(same.predicted_option == p.predicted_option);
  REQUIRE(same.correct_probability.size() == p.correct_probability.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    CHECK(same.correct_probability[i] == doctest::Approx(p.correct_probability[i]).epsilon(1e-12));

  const EvalReport r = make_report("dkt", p);
  CHECK(r.count == 11);
  CHECK(r.option_accuracy.has_value());
  std::size_t counted = 0;
  for (const auto& q : r.per_question) counted += q.count;
  CHECK(counted == 11);
  const auto j = to_json(r);
  CHECK(j["name"] == "dkt");
  CHECK(j["count"] == 11);
  std::ostringstream csv;
  write_breakdown_csv(r, csv);
  const std::string text = csv.str();
  CHECK(text.rfind("question_id,", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(r.per_question.size()) + 1);

  const auto corr = models::make_config(models::ModelKind::Dkt, models::Task::Correctness, ds, 4, 8);
  const Predictions pc = predict(models::init_checkpoint(corr, 2), examples, 4);
  CHECK(pc.predicted_option.empty());
  const EvalReport rc = make_report("dkt", pc);
  CHECK_FALSE(rc.option_accuracy.has_value());
  CHECK(rc.correctness_accuracy >= 0.0);
  CHECK(rc.correctness_accuracy <= 1.0);
}
