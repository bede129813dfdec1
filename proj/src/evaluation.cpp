#include "optrace/evaluation.hpp"

#include "optrace/errors.hpp"
#include "optrace/random.hpp"

#include <array>
#include <map>
#include <ostream>

namespace ot::eval {

namespace {

void check_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": length mismatch " + std::to_string(a) + " vs " + std::to_string(b));
  if (a == 0) throw ShapeError(std::string(what) + ": empty input");
}

}  // namespace

double option_accuracy(std::span<const int> predicted, std::span<const int> truth) {
  check_lengths(predicted.size(), truth.size(), "option_accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double macro_f1(std::span<const int> predicted, std::span<const int> truth, std::span<const int> question_ids) {
  check_lengths(predicted.size(), truth.size(), "macro_f1");
  check_lengths(question_ids.size(), truth.size(), "macro_f1");
  struct Counts {
    std::array<long, data::kNumOptions> tp{}, fp{}, fn{};
  };
  std::map<int, Counts> per_question;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    Counts& c = per_question[question_ids[i]];
    if (predicted[i] == truth[i]) {
      ++c.tp[static_cast<std::size_t>(truth[i])];
    } else {
      ++c.fp[static_cast<std::size_t>(predicted[i])];
      ++c.fn[static_cast<std::size_t>(truth[i])];
    }
  }
  double sum = 0.0;
  for (const auto& [q, c] : per_question) {
    for (std::size_t o = 0; o < data::kNumOptions; ++o) {
      const long denom = 2 * c.tp[o] + c.fp[o] + c.fn[o];
      sum += denom == 0 ? 0.0 : 2.0 * static_cast<double>(c.tp[o]) / static_cast<double>(denom);
    }
  }
  return sum / static_cast<double>(per_question.size() * data::kNumOptions);
}

double correctness_accuracy(std::span<const double> probability, std::span<const int> truth, double threshold) {
  check_lengths(probability.size(), truth.size(), "correctness_accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += (probability[i] >= threshold ? 1 : 0) == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

// ---------------------------------------------------------------------------

Predictions truth_only(const std::vector<models::Example>& examples) {
  Predictions p;
  for (const auto& ex : examples) {
    for (std::size_t t = 0; t < ex.events.size(); ++t) {
      if (!ex.target[t]) continue;
      const auto& e = ex.events[t];
      p.question.push_back(e.question_id);
      p.truth_option.push_back(data::index(e.chosen_option));
      p.correct_option.push_back(data::index(e.correct_option));
      p.truth_correctness.push_back(e.correctness);
    }
  }
  return p;
}

Predictions predict(const models::ModelCheckpoint& ck, const std::vector<models::Example>& examples, int batch_size) {
  Predictions p = truth_only(examples);
  const bool option_task = ck.config.task == models::Task::Option;
  std::vector<const models::Example*> all;
  for (const auto& e : examples) all.push_back(&e);
  for (std::size_t i = 0; i < all.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(all.size(), i + static_cast<std::size_t>(batch_size));
    std::vector<const models::Example*> part(all.begin() + static_cast<std::ptrdiff_t>(i),
                                             all.begin() + static_cast<std::ptrdiff_t>(end));
    const models::Batch batch = models::make_batch(part);
    const models::Matrix logits = models::forward_logits(ck, batch);
    const models::Matrix probs = option_task ? models::option_probabilities(logits) : models::Matrix();
    const Eigen::VectorXd pc = option_task ? Eigen::VectorXd() : models::correctness_probabilities(logits);
    // Emit in example order to line up with truth_only().
    for (models::Index b = 0; b < batch.size; ++b) {
      for (models::Index t = 0; t < batch.lengths[static_cast<std::size_t>(b)]; ++t) {
        const auto r = static_cast<std::size_t>(batch.row(t, b));
        if (batch.target[r] == 0.0) continue;
        if (option_task) {
          p.predicted_option.push_back(models::predict_option(logits.row(static_cast<models::Index>(r))));
          p.correct_probability.push_back(probs(static_cast<models::Index>(r), batch.correct[r]));
        } else {
          p.correct_probability.push_back(pc(static_cast<models::Index>(r)));
        }
      }
    }
  }
  return p;
}

EvalReport make_report(std::string name, const Predictions& p) {
  EvalReport r;
  r.name = std::move(name);
  r.count = p.size();
  if (p.size() == 0) return r;
  const bool options = !p.predicted_option.empty();
  if (options) {
    r.option_accuracy = option_accuracy(p.predicted_option, p.truth_option);
    r.macro_f1 = macro_f1(p.predicted_option, p.truth_option, p.question);
  }
  r.correctness_accuracy = correctness_accuracy(p.correct_probability, p.truth_correctness);

  std::map<int, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < p.size(); ++i) rows[p.question[i]].push_back(i);
  for (const auto& [q, idx] : rows) {
    QuestionBreakdown qb;
    qb.question_id = q;
    qb.count = idx.size();
    std::vector<int> pred, truth, qs, tc;
    std::vector<double> prob;
    for (std::size_t i : idx) {
      if (options) pred.push_back(p.predicted_option[i]);
      truth.push_back(p.truth_option[i]);
      qs.push_back(q);
      tc.push_back(p.truth_correctness[i]);
      prob.push_back(p.correct_probability[i]);
    }
    if (options) {
      qb.option_accuracy = option_accuracy(pred, truth);
      qb.macro_f1 = macro_f1(pred, truth, qs);
    }
    qb.correctness_accuracy = correctness_accuracy(prob, tc);
    r.per_question.push_back(qb);
  }
  return r;
}

BaselineReports baselines(const std::vector<models::Example>& train, const std::vector<models::Example>& test,
                          std::uint64_t seed) {
  const Predictions fit = truth_only(train);
  if (fit.size() == 0) throw ConfigError("baselines need non-empty training data");
  std::map<int, std::array<long, data::kNumOptions>> counts;
  std::array<long, data::kNumOptions> global{};
  for (std::size_t i = 0; i < fit.size(); ++i) {
    ++counts[fit.question[i]][static_cast<std::size_t>(fit.truth_option[i])];
    ++global[static_cast<std::size_t>(fit.truth_option[i])];
  }
  auto argmax = [](const std::array<long, data::kNumOptions>& c) {
    int best = 0;
    for (int o = 1; o < data::kNumOptions; ++o)
      if (c[static_cast<std::size_t>(o)] > c[static_cast<std::size_t>(best)]) best = o;
    return best;
  };
  const int global_best = argmax(global);

  Predictions random = truth_only(test);
  Predictions majority = random;
  Rng rng(derive_seed(seed, "random-baseline"));
  std::uniform_int_distribution<int> pick(0, data::kNumOptions - 1);
  for (std::size_t i = 0; i < random.size(); ++i) {
    const int guess = pick(rng);
    random.predicted_option.push_back(guess);
    random.correct_probability.push_back(guess == random.correct_option[i] ? 1.0 : 0.0);
    auto it = counts.find(majority.question[i]);
    const int m = it == counts.end() ? global_best : argmax(it->second);
    majority.predicted_option.push_back(m);
    majority.correct_probability.push_back(m == majority.correct_option[i] ? 1.0 : 0.0);
  }
  return {make_report("random", random), make_report("majority", majority)};
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = {{"name", r.name}, {"count", r.count}, {"correctness_accuracy", r.correctness_accuracy}};
  j["option_accuracy"] = r.option_accuracy ? nlohmann::json(*r.option_accuracy) : nlohmann::json(nullptr);
  j["macro_f1"] = r.macro_f1 ? nlohmann::json(*r.macro_f1) : nlohmann::json(nullptr);
  return j;
}

void write_breakdown_csv(const EvalReport& r, std::ostream& out) {
  out << "question_id,count,option_accuracy,macro_f1,correctness_accuracy\n";
  auto opt = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string(); };
  for (const auto& q : r.per_question) {
    out << q.question_id << ',' << q.count << ',' << opt(q.option_accuracy) << ',' << opt(q.macro_f1) << ','
        << std::to_string(q.correctness_accuracy) << '\n';
  }
}

}  // namespace ot::eval
