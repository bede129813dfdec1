#pragma once

#include "optrace/models.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ot::eval {

/// Fraction of exact matches. Throws ShapeError on length mismatch or empty input.
double option_accuracy(std::span<const int> predicted, std::span<const int> truth);

/// Unweighted mean of per-(question, option) F1 over all four options of every
/// question present, with 0/0 taken as 0.
double macro_f1(std::span<const int> predicted, std::span<const int> truth, std::span<const int> question_ids);

/// Fraction of rows where (probability >= threshold) equals the 0/1 truth.
double correctness_accuracy(std::span<const double> probability, std::span<const int> truth, double threshold = 0.5);

/// Targeted steps of a prediction run, in example order.
struct Predictions {
  std::vector<int> question;
  std::vector<int> truth_option;
  std::vector<int> correct_option;
  std::vector<int> truth_correctness;
  /// Empty for correctness-task models.
  std::vector<int> predicted_option;
  std::vector<double> correct_probability;

  [[nodiscard]] std::size_t size() const { return question.size(); }
};

Predictions predict(const models::ModelCheckpoint& ck, const std::vector<models::Example>& examples, int batch_size = 64);

struct QuestionBreakdown {
  int question_id = 0;
  std::size_t count = 0;
  std::optional<double> option_accuracy;
  std::optional<double> macro_f1;
  double correctness_accuracy = 0.0;
};

struct EvalReport {
  std::string name;
  std::size_t count = 0;
  std::optional<double> option_accuracy;
  std::optional<double> macro_f1;
  double correctness_accuracy = 0.0;
  std::vector<QuestionBreakdown> per_question;
};

EvalReport make_report(std::string name, const Predictions& p);

struct BaselineReports {
  EvalReport random;
  EvalReport majority;
};

/// Uniform-random predictor (seeded) and per-question majority predictor fit
/// on the targeted steps of `train` (global majority for unseen questions).
BaselineReports baselines(const std::vector<models::Example>& train, const std::vector<models::Example>& test,
                          std::uint64_t seed);

/// Targeted ground truth of `examples` with empty predictions filled in by caller.
Predictions truth_only(const std::vector<models::Example>& examples);

nlohmann::json to_json(const EvalReport& report);
void write_breakdown_csv(const EvalReport& report, std::ostream& out);

}  // namespace ot::eval
