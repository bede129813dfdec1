#pragma once

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace ot::data {

inline constexpr int kNumOptions = 4;

/// Multiple-choice option; always the four-letter alphabet.
enum class Option : std::uint8_t { A = 0, B = 1, C = 2, D = 3 };

constexpr int index(Option o) { return static_cast<int>(o); }
constexpr Option option_from_index(int i) { return static_cast<Option>(i); }
char to_char(Option o);
/// Parses "A".."D" (case-insensitive). Throws ParseError.
Option parse_option(std::string_view text);

/// Subject id reserved for questions without subject tags.
inline constexpr int kUntaggedSubject = 0;

struct ResponseEvent {
  std::int64_t timestamp = 0;
  int question_id = 0;
  std::vector<int> subject_ids;
  std::uint8_t correctness = 0;
  Option chosen_option = Option::A;
  Option correct_option = Option::A;
  /// 1 = observed (training) step.
  std::uint8_t mask = 1;

  bool operator==(const ResponseEvent&) const = default;
};

struct StudentSequence {
  std::int64_t student_id = 0;
  std::vector<ResponseEvent> events;

  bool operator==(const StudentSequence&) const = default;
};

struct Dataset {
  /// Ordered by ascending student_id.
  std::vector<StudentSequence> students;
  /// Question id -> sorted subject ids (never empty).
  std::map<int, std::vector<int>> question_subjects;
  /// Question id -> correct option.
  std::map<int, Option> correct_options;
  /// Table sizes: max id + 1 (ids index embedding rows directly).
  int num_questions = 0;
  int num_subjects = 0;
  int num_options = kNumOptions;

  [[nodiscard]] std::size_t num_events() const;
  /// Subject id -> question ids tagged with it.
  [[nodiscard]] std::map<int, std::vector<int>> subject_questions() const;

  bool operator==(const Dataset&) const = default;
};

enum class Format { Csv, Jsonl };

/// Builds a Dataset from raw events: groups per student, stable-sorts by
/// timestamp, derives correctness, resets masks and builds the question graph.
/// Throws IntegrityError on inconsistent correct options.
Dataset build_dataset(std::vector<std::pair<std::int64_t, ResponseEvent>> rows);

Dataset load_dataset(const std::filesystem::path& path, Format format);
Dataset load_dataset(const std::filesystem::path& path);  // format from extension
Dataset parse_csv(std::istream& in);
Dataset parse_jsonl(std::istream& in);

void write_csv(const Dataset& ds, std::ostream& out);
void write_jsonl(const Dataset& ds, std::ostream& out);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);

/// Stable 64-bit content hash of the CSV serialisation.
std::uint64_t dataset_hash(const Dataset& ds);

// ---------------------------------------------------------------------------
// Splits

enum class SplitMode { CF, KT };
enum class Role : std::uint8_t { Train, Val, Test };

std::string to_string(SplitMode m);
SplitMode parse_split_mode(std::string_view text);

struct SplitSpec {
  SplitMode mode = SplitMode::CF;
  double train_frac = 0.6;
  double val_frac = 0.2;
  double test_frac = 0.2;
  std::uint64_t seed = 0;

  /// Throws ConfigError unless each fraction is in (0,1) and they sum to 1.
  void validate() const;
};

struct StepRef {
  std::size_t student = 0;  // index into Dataset::students
  std::size_t step = 0;
  auto operator<=>(const StepRef&) const = default;
};

/// Per-student, per-step roles for the collaborative-filtering setup.
struct CfSplit {
  std::vector<std::vector<Role>> roles;
  std::vector<std::string> warnings;

  [[nodiscard]] std::vector<StepRef> indices(Role role) const;
  /// Copy of `ds` with mask = 1 exactly on training steps.
  [[nodiscard]] Dataset apply_masks(const Dataset& ds) const;
  bool operator==(const CfSplit&) const = default;
};

/// Student-level partition (indices into Dataset::students) for the KT setup.
struct KtSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  bool operator==(const KtSplit&) const = default;
};

using SplitAssignment = std::variant<CfSplit, KtSplit>;

CfSplit make_cf_split(const Dataset& ds, const SplitSpec& spec);
KtSplit make_kt_split(const Dataset& ds, const SplitSpec& spec);
SplitAssignment make_split(const Dataset& ds, const SplitSpec& spec);

/// k folds; fold i tests the i-th block of a seeded permutation of units
/// (time steps per student under CF, students under KT). Validation units are
/// drawn from the remaining units at `val_frac`.
std::vector<SplitAssignment> kfold(const Dataset& ds, int k, SplitMode mode, std::uint64_t seed,
                                   double val_frac = 0.2);

/// Serialised split: spec, fold count and per-unit assignments keyed by student id.
struct SplitArtifact {
  SplitSpec spec;
  int k = 1;
  std::vector<SplitAssignment> folds;
};

nlohmann::json to_json(const SplitArtifact& art, const Dataset& ds);
SplitArtifact split_from_json(const nlohmann::json& j, const Dataset& ds);

/// Splits sequences longer than max_len into consecutive windows.
std::vector<std::pair<std::size_t, std::size_t>> chunk_ranges(std::size_t length, std::size_t max_len);

}  // namespace ot::data
