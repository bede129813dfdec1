#include "optrace/data.hpp"

#include "optrace/errors.hpp"
#include "optrace/random.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace ot::data {

char to_char(Option o) { return static_cast<char>('A' + index(o)); }

Option parse_option(std::string_view text) {
  if (text.size() == 1) {
    const char c = static_cast<char>(text[0] & ~0x20);
    if (c >= 'A' && c <= 'D') return option_from_index(c - 'A');
  }
  throw ParseError("invalid option '" + std::string(text) + "' (expected A, B, C or D)");
}

std::size_t Dataset::num_events() const {
  std::size_t n = 0;
  for (const auto& s : students) n += s.events.size();
  return n;
}

std::map<int, std::vector<int>> Dataset::subject_questions() const {
  std::map<int, std::vector<int>> out;
  for (const auto& [q, subjects] : question_subjects)
    for (int s : subjects) out[s].push_back(q);
  return out;
}

Dataset build_dataset(std::vector<std::pair<std::int64_t, ResponseEvent>> rows) {
  Dataset ds;
  std::map<std::int64_t, std::vector<ResponseEvent>> per_student;
  std::map<int, std::set<int>> subjects;
  int max_q = 0;
  int max_s = kUntaggedSubject;
  for (auto& [student, ev] : rows) {
    if (ev.subject_ids.empty()) ev.subject_ids.push_back(kUntaggedSubject);
    std::sort(ev.subject_ids.begin(), ev.subject_ids.end());
    ev.subject_ids.erase(std::unique(ev.subject_ids.begin(), ev.subject_ids.end()), ev.subject_ids.end());
    ev.correctness = ev.chosen_option == ev.correct_option ? 1 : 0;
    ev.mask = 1;
    auto [it, inserted] = ds.correct_options.emplace(ev.question_id, ev.correct_option);
    if (!inserted && it->second != ev.correct_option) {
      throw IntegrityError("question " + std::to_string(ev.question_id) + " has inconsistent correct options " +
                           to_char(it->second) + " and " + to_char(ev.correct_option));
    }
    subjects[ev.question_id].insert(ev.subject_ids.begin(), ev.subject_ids.end());
    max_q = std::max(max_q, ev.question_id);
    max_s = std::max(max_s, ev.subject_ids.back());
    per_student[student].push_back(std::move(ev));
  }
  for (auto& [q, s] : subjects) ds.question_subjects[q] = std::vector<int>(s.begin(), s.end());
  for (auto& [id, events] : per_student) {
    std::stable_sort(events.begin(), events.end(),
                     [](const ResponseEvent& a, const ResponseEvent& b) { return a.timestamp < b.timestamp; });
    ds.students.push_back(StudentSequence{id, std::move(events)});
  }
  ds.num_questions = max_q + 1;
  ds.num_subjects = max_s + 1;
  return ds;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == sep && !quoted) {
      out.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  out.push_back(trim(line.substr(start)));
  return out;
}

template <typename Int>
Int parse_int(std::string_view text, const char* field) {
  Int v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ParseError(std::string("invalid ") + field + " '" + std::string(text) + "'");
  }
  return v;
}

std::vector<int> parse_subjects(std::string_view text) {
  std::vector<int> out;
  if (text.empty()) return out;
  for (auto part : split(text, ';')) {
    if (part.empty()) continue;
    const int s = parse_int<int>(part, "subject id");
    if (s < 0) throw ParseError("negative subject id");
    out.push_back(s);
  }
  return out;
}

ResponseEvent make_event(std::int64_t ts, int question, std::vector<int> subjects, Option chosen, Option correct) {
  if (question <= 0) throw ParseError("question_id must be positive, got " + std::to_string(question));
  ResponseEvent ev;
  ev.timestamp = ts;
  ev.question_id = question;
  ev.subject_ids = std::move(subjects);
  ev.chosen_option = chosen;
  ev.correct_option = correct;
  return ev;
}

constexpr std::array<std::string_view, 6> kColumns = {"student_id",    "timestamp",      "question_id",
                                                      "subject_ids",   "chosen_option", "correct_option"};

}  // namespace

Dataset parse_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::array<std::size_t, kColumns.size()> col{};
  bool have_header = false;
  std::vector<std::pair<std::int64_t, ResponseEvent>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split(line, ',');
    if (!have_header) {
      for (std::size_t c = 0; c < kColumns.size(); ++c) {
        auto it = std::find(fields.begin(), fields.end(), kColumns[c]);
        if (it == fields.end()) {
          throw ParseError("row " + std::to_string(line_no) + ": header is missing column '" +
                           std::string(kColumns[c]) + "'");
        }
        col[c] = static_cast<std::size_t>(it - fields.begin());
      }
      have_header = true;
      continue;
    }
    try {
      const std::size_t need = *std::max_element(col.begin(), col.end()) + 1;
      if (fields.size() < need) {
        throw ParseError("expected " + std::to_string(need) + " fields, got " + std::to_string(fields.size()));
      }
      const auto student = parse_int<std::int64_t>(fields[col[0]], "student_id");
      auto ev = make_event(parse_int<std::int64_t>(fields[col[1]], "timestamp"),
                           parse_int<int>(fields[col[2]], "question_id"), parse_subjects(fields[col[3]]),
                           parse_option(fields[col[4]]), parse_option(fields[col[5]]));
      rows.emplace_back(student, std::move(ev));
    } catch (const ParseError& e) {
      throw ParseError("row " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw ParseError("row 1: empty file, expected a header");
  return build_dataset(std::move(rows));
}

Dataset parse_jsonl(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::pair<std::int64_t, ResponseEvent>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      std::vector<int> subjects;
      const auto& sj = j.at("subject_ids");
      if (sj.is_string()) subjects = parse_subjects(sj.get<std::string>());
      else subjects = sj.get<std::vector<int>>();
      auto ev = make_event(j.at("timestamp").get<std::int64_t>(), j.at("question_id").get<int>(), std::move(subjects),
                           parse_option(j.at("chosen_option").get<std::string>()),
                           parse_option(j.at("correct_option").get<std::string>()));
      rows.emplace_back(j.at("student_id").get<std::int64_t>(), std::move(ev));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("row " + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("row " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return build_dataset(std::move(rows));
}

Dataset load_dataset(const std::filesystem::path& path, Format format) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  return format == Format::Csv ? parse_csv(in) : parse_jsonl(in);
}

Dataset load_dataset(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  return load_dataset(path, ext == ".jsonl" || ext == ".json" ? Format::Jsonl : Format::Csv);
}

namespace {
std::string join_subjects(const std::vector<int>& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ';';
    out += std::to_string(s[i]);
  }
  return out;
}
}  // namespace

void write_csv(const Dataset& ds, std::ostream& out) {
  out << "student_id,timestamp,question_id,subject_ids,chosen_option,correct_option\n";
  for (const auto& s : ds.students) {
    for (const auto& e : s.events) {
      out << s.student_id << ',' << e.timestamp << ',' << e.question_id << ',' << join_subjects(e.subject_ids) << ','
          << to_char(e.chosen_option) << ',' << to_char(e.correct_option) << '\n';
    }
  }
}

void write_jsonl(const Dataset& ds, std::ostream& out) {
  for (const auto& s : ds.students) {
    for (const auto& e : s.events) {
      nlohmann::json j = {{"student_id", s.student_id},
                          {"timestamp", e.timestamp},
                          {"question_id", e.question_id},
                          {"subject_ids", e.subject_ids},
                          {"chosen_option", std::string(1, to_char(e.chosen_option))},
                          {"correct_option", std::string(1, to_char(e.correct_option))}};
      out << j.dump() << '\n';
    }
  }
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path.string());
  if (path.extension() == ".jsonl") write_jsonl(ds, out);
  else write_csv(ds, out);
}

std::uint64_t dataset_hash(const Dataset& ds) {
  std::ostringstream os;
  write_csv(ds, os);
  return fnv1a(os.str());
}

// ---------------------------------------------------------------------------

std::string to_string(SplitMode m) { return m == SplitMode::CF ? "cf" : "kt"; }

SplitMode parse_split_mode(std::string_view text) {
  if (text == "cf" || text == "CF") return SplitMode::CF;
  if (text == "kt" || text == "KT") return SplitMode::KT;
  throw ConfigError("unknown split mode '" + std::string(text) + "' (expected cf or kt)");
}

void SplitSpec::validate() const {
  for (double f : {train_frac, val_frac, test_frac}) {
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("split fractions must lie in (0,1)");
  }
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
}

std::vector<StepRef> CfSplit::indices(Role role) const {
  std::vector<StepRef> out;
  for (std::size_t s = 0; s < roles.size(); ++s)
    for (std::size_t t = 0; t < roles[s].size(); ++t)
      if (roles[s][t] == role) out.push_back({s, t});
  return out;
}

Dataset CfSplit::apply_masks(const Dataset& ds) const {
  if (roles.size() != ds.students.size()) throw ConfigError("CF split does not match dataset (student count)");
  Dataset out = ds;
  for (std::size_t s = 0; s < out.students.size(); ++s) {
    auto& events = out.students[s].events;
    if (roles[s].size() != events.size()) throw ConfigError("CF split does not match dataset (sequence length)");
    for (std::size_t t = 0; t < events.size(); ++t) events[t].mask = roles[s][t] == Role::Train ? 1 : 0;
  }
  return out;
}

namespace {

std::size_t round_count(double frac, std::size_t n) {
  return static_cast<std::size_t>(std::llround(frac * static_cast<double>(n)));
}

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

constexpr std::size_t kMinCfEvents = 3;

}  // namespace

CfSplit make_cf_split(const Dataset& ds, const SplitSpec& spec) {
  spec.validate();
  if (spec.mode != SplitMode::CF) throw ConfigError("make_cf_split requires a CF split spec");
  CfSplit out;
  out.roles.resize(ds.students.size());
  for (std::size_t s = 0; s < ds.students.size(); ++s) {
    const std::size_t n = ds.students[s].events.size();
    auto& roles = out.roles[s];
    roles.assign(n, Role::Train);
    if (n < kMinCfEvents) {
      out.warnings.push_back("student " + std::to_string(ds.students[s].student_id) + " has " + std::to_string(n) +
                             " events; kept entirely in training");
      continue;
    }
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(ds.students[s].student_id)));
    const auto perm = permutation(n, rng);
    std::size_t n_test = std::max<std::size_t>(1, round_count(spec.test_frac, n));
    std::size_t n_val = std::max<std::size_t>(1, round_count(spec.val_frac, n));
    while (n_test + n_val >= n) {
      if (n_val >= n_test && n_val > 1) --n_val;
      else if (n_test > 1) --n_test;
      else break;
    }
    for (std::size_t i = 0; i < n_test; ++i) roles[perm[i]] = Role::Test;
    for (std::size_t i = n_test; i < n_test + n_val; ++i) roles[perm[i]] = Role::Val;
  }
  return out;
}

KtSplit make_kt_split(const Dataset& ds, const SplitSpec& spec) {
  spec.validate();
  if (spec.mode != SplitMode::KT) throw ConfigError("make_kt_split requires a KT split spec");
  const std::size_t n = ds.students.size();
  const std::size_t n_test = round_count(spec.test_frac, n);
  const std::size_t n_val = round_count(spec.val_frac, n);
  if (n_test < 1 || n_val < 1 || n_test + n_val >= n) {
    throw ConfigError("KT split of " + std::to_string(n) + " students leaves an empty bucket");
  }
  Rng rng(derive_seed(spec.seed, "kt-split"));
  const auto perm = permutation(n, rng);
  KtSplit out;
  out.test.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  out.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test),
                 perm.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
  out.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), perm.end());
  for (auto* v : {&out.train, &out.val, &out.test}) std::sort(v->begin(), v->end());
  return out;
}

SplitAssignment make_split(const Dataset& ds, const SplitSpec& spec) {
  if (spec.mode == SplitMode::CF) return make_cf_split(ds, spec);
  return make_kt_split(ds, spec);
}

std::vector<SplitAssignment> kfold(const Dataset& ds, int k, SplitMode mode, std::uint64_t seed, double val_frac) {
  if (k < 2) throw ConfigError("kfold requires k >= 2");
  if (!(val_frac > 0.0 && val_frac < 1.0)) throw ConfigError("val_frac must lie in (0,1)");
  const auto uk = static_cast<std::size_t>(k);
  std::vector<SplitAssignment> folds;

  // Fold of each unit: block index of its position in a seeded permutation.
  auto fold_of = [uk](std::size_t n, Rng& rng) {
    const auto perm = permutation(n, rng);
    std::vector<std::size_t> fold(n);
    for (std::size_t pos = 0; pos < n; ++pos) fold[perm[pos]] = pos * uk / n;
    return std::pair{perm, fold};
  };

  if (mode == SplitMode::KT) {
    const std::size_t n = ds.students.size();
    if (uk > n) throw ConfigError("k = " + std::to_string(k) + " exceeds the " + std::to_string(n) + " students");
    Rng rng(derive_seed(seed, "kt-kfold"));
    auto [perm, fold] = fold_of(n, rng);
    for (std::size_t f = 0; f < uk; ++f) {
      KtSplit sp;
      std::vector<std::size_t> rest;
      for (std::size_t u : perm) {
        if (fold[u] == f) sp.test.push_back(u);
        else rest.push_back(u);
      }
      std::size_t n_val = std::min(std::max<std::size_t>(1, round_count(val_frac, n)), rest.size() - 1);
      sp.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
      sp.train.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
      for (auto* v : {&sp.train, &sp.val, &sp.test}) std::sort(v->begin(), v->end());
      folds.emplace_back(std::move(sp));
    }
    return folds;
  }

  std::size_t eligible = 0;
  for (const auto& s : ds.students) eligible += s.events.size() >= kMinCfEvents ? s.events.size() : 0;
  if (uk > eligible) throw ConfigError("k = " + std::to_string(k) + " exceeds the " + std::to_string(eligible) + " time steps");

  std::vector<CfSplit> cf(uk);
  for (auto& sp : cf) sp.roles.resize(ds.students.size());
  for (std::size_t s = 0; s < ds.students.size(); ++s) {
    const std::size_t n = ds.students[s].events.size();
    if (n < kMinCfEvents) {
      for (auto& sp : cf) {
        sp.roles[s].assign(n, Role::Train);
        sp.warnings.push_back("student " + std::to_string(ds.students[s].student_id) + " has " + std::to_string(n) +
                              " events; kept entirely in training");
      }
      continue;
    }
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(ds.students[s].student_id)));
    auto [perm, fold] = fold_of(n, rng);
    for (std::size_t f = 0; f < uk; ++f) {
      auto& roles = cf[f].roles[s];
      roles.assign(n, Role::Train);
      std::vector<std::size_t> rest;
      for (std::size_t u : perm) {
        if (fold[u] == f) roles[u] = Role::Test;
        else rest.push_back(u);
      }
      const std::size_t n_val = std::min(round_count(val_frac, n), rest.size() - 1);
      for (std::size_t i = 0; i < n_val; ++i) roles[rest[i]] = Role::Val;
    }
  }
  for (auto& sp : cf) folds.emplace_back(std::move(sp));
  return folds;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json assignment_json(const SplitAssignment& a, const Dataset& ds) {
  using nlohmann::json;
  if (const auto* cf = std::get_if<CfSplit>(&a)) {
    json students = json::array();
    for (std::size_t s = 0; s < cf->roles.size(); ++s) {
      json tr = json::array(), va = json::array(), te = json::array();
      for (std::size_t t = 0; t < cf->roles[s].size(); ++t) {
        switch (cf->roles[s][t]) {
          case Role::Train: tr.push_back(t); break;
          case Role::Val: va.push_back(t); break;
          case Role::Test: te.push_back(t); break;
        }
      }
      students.push_back({{"student_id", ds.students[s].student_id}, {"train", tr}, {"val", va}, {"test", te}});
    }
    return {{"students", students}, {"warnings", cf->warnings}};
  }
  const auto& kt = std::get<KtSplit>(a);
  auto ids = [&](const std::vector<std::size_t>& v) {
    json out = json::array();
    for (std::size_t i : v) out.push_back(ds.students[i].student_id);
    return out;
  };
  return {{"train", ids(kt.train)}, {"val", ids(kt.val)}, {"test", ids(kt.test)}};
}

}  // namespace

nlohmann::json to_json(const SplitArtifact& art, const Dataset& ds) {
  nlohmann::json folds = nlohmann::json::array();
  for (std::size_t f = 0; f < art.folds.size(); ++f) {
    auto j = assignment_json(art.folds[f], ds);
    j["fold"] = f;
    folds.push_back(std::move(j));
  }
  return {{"format", "optrace-split"},
          {"version", 1},
          {"mode", to_string(art.spec.mode)},
          {"seed", art.spec.seed},
          {"spec",
           {{"train_frac", art.spec.train_frac}, {"val_frac", art.spec.val_frac}, {"test_frac", art.spec.test_frac}}},
          {"k", art.k},
          {"dataset_hash", dataset_hash(ds)},
          {"folds", folds}};
}

SplitArtifact split_from_json(const nlohmann::json& j, const Dataset& ds) {
  try {
    SplitArtifact art;
    art.spec.mode = parse_split_mode(j.at("mode").get<std::string>());
    art.spec.seed = j.at("seed").get<std::uint64_t>();
    art.spec.train_frac = j.at("spec").at("train_frac").get<double>();
    art.spec.val_frac = j.at("spec").at("val_frac").get<double>();
    art.spec.test_frac = j.at("spec").at("test_frac").get<double>();
    art.k = j.at("k").get<int>();
    std::map<std::int64_t, std::size_t> by_id;
    for (std::size_t s = 0; s < ds.students.size(); ++s) by_id[ds.students[s].student_id] = s;
    auto lookup = [&](std::int64_t id) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw LookupError("split references unknown student " + std::to_string(id));
      return it->second;
    };
    for (const auto& fj : j.at("folds")) {
      if (art.spec.mode == SplitMode::KT) {
        KtSplit kt;
        for (auto [key, vec] : {std::pair{"train", &kt.train}, {"val", &kt.val}, {"test", &kt.test}})
          for (const auto& id : fj.at(key)) vec->push_back(lookup(id.get<std::int64_t>()));
        art.folds.emplace_back(std::move(kt));
      } else {
        CfSplit cf;
        cf.roles.resize(ds.students.size());
        for (std::size_t s = 0; s < ds.students.size(); ++s) cf.roles[s].assign(ds.students[s].events.size(), Role::Train);
        for (const auto& sj : fj.at("students")) {
          const std::size_t s = lookup(sj.at("student_id").get<std::int64_t>());
          for (auto [key, role] : {std::pair{"train", Role::Train}, {"val", Role::Val}, {"test", Role::Test}}) {
            for (const auto& t : sj.at(key)) {
              const auto step = t.get<std::size_t>();
              if (step >= cf.roles[s].size()) throw LookupError("split step index out of range");
              cf.roles[s][step] = role;
            }
          }
        }
        if (fj.contains("warnings")) cf.warnings = fj.at("warnings").get<std::vector<std::string>>();
        art.folds.emplace_back(std::move(cf));
      }
    }
    return art;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed split artifact: ") + e.what());
  }
}

std::vector<std::pair<std::size_t, std::size_t>> chunk_ranges(std::size_t length, std::size_t max_len) {
  if (max_len == 0) throw ConfigError("max_len must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t start = 0; start < length; start += max_len) out.emplace_back(start, std::min(length, start + max_len));
  return out;
}

}  // namespace ot::data
