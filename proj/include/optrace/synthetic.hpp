#pragma once

// Simulated multiple-choice responses with planted error modes: every
// distractor expresses one error mode, and students hold a few of them.

#include "optrace/data.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <vector>

namespace ot::synth {

struct GenConfig {
  int num_students = 500;
  int num_questions = 100;
  int num_subjects = 10;
  int num_error_modes = 8;
  int min_length = 60;
  int max_length = 100;
  /// Steepness of the per-subject logistic learning curve (per practice opportunity).
  double learning_rate = 0.15;
  /// Mastery gained in the limit of unlimited practice.
  double mastery_gain = 1.5;
  double ability_mean = -1.0;
  double ability_sd = 1.0;
  double difficulty_sd = 1.0;
  double slip = 0.05;
  double guess = 0.1;
  int min_misconceptions = 1;
  int max_misconceptions = 2;
  /// Probability that a held misconception drives an incorrect choice.
  double persistence = 0.8;
  std::uint64_t seed = 0;

  /// Throws ConfigError on non-positive counts, bad ranges or probabilities
  /// outside [0,1], and when there are more error modes than distractor slots.
  void validate() const;
};

struct QuestionTruth {
  int question_id = 0;
  std::vector<int> subjects;
  data::Option correct = data::Option::A;
  /// Error mode per option; -1 for the correct option.
  std::array<int, data::kNumOptions> mode{};
  double difficulty = 0.0;
};

struct StudentTruth {
  std::int64_t student_id = 0;
  double ability = 0.0;
  std::vector<int> misconceptions;  // sorted
};

struct ModeLabel {
  int question_id = 0;
  int option = 0;
  int error_mode = 0;
};

struct Generated {
  data::Dataset dataset;
  std::vector<ModeLabel> labels;  // every incorrect (question, option) pair
  std::vector<QuestionTruth> questions;
  std::vector<StudentTruth> students;
};

/// Ids: students 1..N, questions 1..Q, subjects 1..S (0 stays the untagged id).
Generated generate(const GenConfig& cfg);

/// Probability of a correct answer at a given mastery level.
double correct_probability(const GenConfig& cfg, double mastery, double difficulty);
/// Mastery after `practice` opportunities on a subject.
double mastery(const GenConfig& cfg, double ability, int practice);

void write_ground_truth_csv(const std::vector<ModeLabel>& labels, std::ostream& out);

}  // namespace ot::synth
