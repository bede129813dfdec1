#pragma once

// Finite-difference verification of every differentiable primitive and every
// model end to end.

#include "optrace/models.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ot::check {

struct CheckOutcome {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t points = 0;
  std::size_t entries = 0;
  [[nodiscard]] bool passed() const { return max_rel_error < tolerance; }
};

/// Each primitive (and the fused losses) at `points` random inputs.
std::vector<CheckOutcome> primitive_checks(std::uint64_t seed, int points = 100, double tolerance = 1e-4);

/// Toy batch used by the model checks: two students, `steps` events each.
std::vector<models::Example> toy_examples(data::SplitMode mode, std::uint64_t seed, int steps = 5);
/// Dataset the toy examples are drawn from (6 questions, 3 subjects).
data::Dataset toy_dataset(std::uint64_t seed, int steps = 5);

/// Gradient of the task loss with respect to every parameter of `ck`.
CheckOutcome model_check(const models::ModelCheckpoint& ck, const std::vector<models::Example>& examples,
                         double tolerance = 1e-3, double eps = 1e-5);

/// Every architecture on the toy config (d=4, hidden=8, T=5), option task,
/// plus the correctness head.
std::vector<CheckOutcome> model_checks(std::uint64_t seed, double tolerance = 1e-3);

}  // namespace ot::check
