#include "optrace/errors.hpp"
#include "optrace/models.hpp"

#include <algorithm>

namespace ot::models {

Batch make_batch(std::span<const Example* const> examples) {
  if (examples.empty()) throw ConfigError("cannot build an empty batch");
  Batch b;
  b.size = static_cast<Index>(examples.size());
  for (const Example* ex : examples) {
    if (ex->events.empty()) throw ConfigError("example without events");
    if (ex->target.size() != ex->events.size()) throw ConfigError("example target length mismatch");
    b.lengths.push_back(static_cast<int>(ex->events.size()));
    b.steps = std::max<Index>(b.steps, static_cast<Index>(ex->events.size()));
  }
  const auto n = static_cast<std::size_t>(b.rows());
  b.question.assign(n, 0);
  b.subjects.assign(n, std::vector<int>{data::kUntaggedSubject});
  b.correct.assign(n, 0);
  b.chosen.assign(n, 0);
  b.correctness.assign(n, 0);
  b.student.assign(n, 0);
  b.observed.assign(n, 0);
  b.valid.assign(n, 0);
  b.target.assign(n, 0.0);
  for (Index s = 0; s < b.size; ++s) {
    const Example& ex = *examples[static_cast<std::size_t>(s)];
    for (std::size_t t = 0; t < ex.events.size(); ++t) {
      const auto r = static_cast<std::size_t>(b.row(static_cast<Index>(t), s));
      const auto& e = ex.events[t];
      b.question[r] = e.question_id;
      b.subjects[r] = e.subject_ids;
      b.correct[r] = data::index(e.correct_option);
      b.chosen[r] = data::index(e.chosen_option);
      b.correctness[r] = e.correctness;
      b.student[r] = static_cast<int>(ex.student_index);
      b.observed[r] = e.mask;
      b.valid[r] = 1;
      b.target[r] = ex.target[t] ? 1.0 : 0.0;
    }
  }
  return b;
}

Batch make_batch(const Example& example) {
  const Example* one[] = {&example};
  return make_batch(std::span<const Example* const>(one, 1));
}

Example example_from_sequence(const data::StudentSequence& seq, std::size_t student_index) {
  Example ex;
  ex.student_index = student_index;
  ex.events = seq.events;
  ex.target.assign(seq.events.size(), 1);
  return ex;
}

}  // namespace ot::models
