#include "optrace/synthetic.hpp"

#include "optrace/errors.hpp"
#include "optrace/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace ot::synth {

void GenConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
  };
  positive(num_students, "num_students");
  positive(num_questions, "num_questions");
  positive(num_subjects, "num_subjects");
  positive(num_error_modes, "num_error_modes");
  positive(min_length, "min_length");
  positive(min_misconceptions, "min_misconceptions");
  if (max_length < min_length) throw ConfigError("max_length < min_length");
  if (max_misconceptions < min_misconceptions) throw ConfigError("max_misconceptions < min_misconceptions");
  if (max_misconceptions > num_error_modes) throw ConfigError("max_misconceptions exceeds num_error_modes");
  for (auto [v, name] : {std::pair{slip, "slip"}, {guess, "guess"}, {persistence, "persistence"}})
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must be in [0,1]");
  if (!(ability_sd >= 0.0) || !(difficulty_sd >= 0.0) || !(learning_rate >= 0.0))
    throw ConfigError("spreads and learning rate must be non-negative");
  if (num_error_modes > 3 * num_questions)
    throw ConfigError("num_error_modes (" + std::to_string(num_error_modes) + ") exceeds the " +
                      std::to_string(3 * num_questions) + " available distractors");
}

double mastery(const GenConfig& cfg, double ability, int practice) {
  const double growth = 2.0 / (1.0 + std::exp(-cfg.learning_rate * practice)) - 1.0;
  return ability + cfg.mastery_gain * growth;
}

double correct_probability(const GenConfig& cfg, double m, double difficulty) {
  const double skill = 1.0 / (1.0 + std::exp(-(m - difficulty)));
  return (1.0 - cfg.slip) * skill + cfg.guess * (1.0 - skill);
}

namespace {

std::vector<int> sample_distinct(Rng& rng, int population, int count) {
  std::vector<int> all(static_cast<std::size_t>(population));
  std::iota(all.begin(), all.end(), 0);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(count));
  std::sort(all.begin(), all.end());
  return all;
}

std::vector<QuestionTruth> make_questions(const GenConfig& cfg, Rng& rng) {
  std::vector<QuestionTruth> qs(static_cast<std::size_t>(cfg.num_questions));
  std::normal_distribution<double> difficulty(0.0, cfg.difficulty_sd);
  std::uniform_int_distribution<int> option(0, data::kNumOptions - 1);
  std::uniform_int_distribution<int> tags(1, std::min(3, cfg.num_subjects));
  const int per_question = std::min(3, cfg.num_error_modes);
  for (int i = 0; i < cfg.num_questions; ++i) {
    QuestionTruth& q = qs[static_cast<std::size_t>(i)];
    q.question_id = i + 1;
    for (int s : sample_distinct(rng, cfg.num_subjects, tags(rng))) q.subjects.push_back(s + 1);
    q.correct = data::option_from_index(option(rng));
    q.difficulty = difficulty(rng);
    std::vector<int> modes = sample_distinct(rng, cfg.num_error_modes, per_question);
    std::shuffle(modes.begin(), modes.end(), rng);
    std::size_t next = 0;
    for (int o = 0; o < data::kNumOptions; ++o) {
      if (o == data::index(q.correct)) {
        q.mode[static_cast<std::size_t>(o)] = -1;
      } else {
        // Fewer than three modes: repeat within the question.
        q.mode[static_cast<std::size_t>(o)] = modes[next % modes.size()];
        ++next;
      }
    }
  }

  // Every mode must label at least one distractor: move a duplicate-mode slot
  // of an over-represented mode onto each missing mode.
  std::vector<int> uses(static_cast<std::size_t>(cfg.num_error_modes), 0);
  for (const auto& q : qs)
    for (int m : q.mode)
      if (m >= 0) ++uses[static_cast<std::size_t>(m)];
  for (int missing = 0; missing < cfg.num_error_modes; ++missing) {
    if (uses[static_cast<std::size_t>(missing)] > 0) continue;
    bool placed = false;
    for (auto& q : qs) {
      for (int& m : q.mode) {
        if (m < 0 || uses[static_cast<std::size_t>(m)] < 2) continue;
        if (std::find(q.mode.begin(), q.mode.end(), missing) != q.mode.end()) continue;
        --uses[static_cast<std::size_t>(m)];
        m = missing;
        ++uses[static_cast<std::size_t>(missing)];
        placed = true;
        break;
      }
      if (placed) break;
    }
  }
  return qs;
}

}  // namespace

Generated generate(const GenConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, "generate"));
  Generated out;
  out.questions = make_questions(cfg, rng);

  std::normal_distribution<double> ability(cfg.ability_mean, cfg.ability_sd);
  std::uniform_int_distribution<int> held_count(cfg.min_misconceptions, cfg.max_misconceptions);
  std::uniform_int_distribution<int> length(cfg.min_length, cfg.max_length);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<std::pair<std::int64_t, data::ResponseEvent>> rows;
  for (int i = 0; i < cfg.num_students; ++i) {
    StudentTruth st;
    st.student_id = i + 1;
    // Per-student stream keeps students independent of each other's draws.
    Rng srng(derive_seed(derive_seed(cfg.seed, "generate"), static_cast<std::uint64_t>(st.student_id)));
    st.ability = ability(srng);
    st.misconceptions = sample_distinct(srng, cfg.num_error_modes, held_count(srng));
    std::vector<int> practice(static_cast<std::size_t>(cfg.num_subjects + 1), 0);

    // Questions in random order; repeats only when the sequence outgrows the bank.
    const int len = length(srng);
    std::vector<int> order;
    while (static_cast<int>(order.size()) < len) {
      std::vector<int> bank(static_cast<std::size_t>(cfg.num_questions));
      std::iota(bank.begin(), bank.end(), 0);
      std::shuffle(bank.begin(), bank.end(), srng);
      order.insert(order.end(), bank.begin(), bank.end());
    }
    order.resize(static_cast<std::size_t>(len));

    for (int t = 0; t < len; ++t) {
      const QuestionTruth& q = out.questions[static_cast<std::size_t>(order[static_cast<std::size_t>(t)])];
      double m = 0.0;
      for (int s : q.subjects) m += mastery(cfg, st.ability, practice[static_cast<std::size_t>(s)]);
      m /= static_cast<double>(q.subjects.size());
      const double p = correct_probability(cfg, m, q.difficulty);

      data::Option chosen = q.correct;
      if (unit(srng) >= p) {
        std::vector<int> distractors, held;
        for (int o = 0; o < data::kNumOptions; ++o) {
          const int mode = q.mode[static_cast<std::size_t>(o)];
          if (mode < 0) continue;
          distractors.push_back(o);
          if (std::binary_search(st.misconceptions.begin(), st.misconceptions.end(), mode)) held.push_back(o);
        }
        const bool express = !held.empty() && unit(srng) < cfg.persistence;
        const std::vector<int>& pool = express ? held : distractors;
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        chosen = data::option_from_index(pool[pick(srng)]);
      }
      for (int s : q.subjects) ++practice[static_cast<std::size_t>(s)];

      data::ResponseEvent e;
      e.timestamp = t + 1;
      e.question_id = q.question_id;
      e.subject_ids = q.subjects;
      e.chosen_option = chosen;
      e.correct_option = q.correct;
      rows.emplace_back(st.student_id, std::move(e));
    }
    out.students.push_back(std::move(st));
  }
  out.dataset = data::build_dataset(std::move(rows));

  for (const auto& q : out.questions)
    for (int o = 0; o < data::kNumOptions; ++o)
      if (q.mode[static_cast<std::size_t>(o)] >= 0)
        out.labels.push_back({q.question_id, o, q.mode[static_cast<std::size_t>(o)]});
  return out;
}

void write_ground_truth_csv(const std::vector<ModeLabel>& labels, std::ostream& out) {
  out << "question_id,option,error_mode\n";
  for (const auto& l : labels)
    out << l.question_id << ',' << data::to_char(data::option_from_index(l.option)) << ',' << l.error_mode << '\n';
}

}  // namespace ot::synth
