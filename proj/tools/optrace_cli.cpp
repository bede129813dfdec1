// optrace: command-line driver for data generation, splitting, training,
// evaluation, clustering and gradient checking.

#include "optrace/clustering.hpp"
#include "optrace/data.hpp"
#include "optrace/errors.hpp"
#include "optrace/evaluation.hpp"
#include "optrace/gradcheck.hpp"
#include "optrace/random.hpp"
#include "optrace/synthetic.hpp"
#include "optrace/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

class IoError : public ot::Error {
 public:
  using ot::Error::Error;
};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Writes via a sibling temporary file and rename, so readers never see a partial file.
void write_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int thread_cap() {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const char* env = std::getenv("OT_THREADS");
  if (env == nullptr || *env == '\0') return static_cast<int>(hw);
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ot::ConfigError("OT_THREADS must be a positive integer");
  return static_cast<int>(v);
}

/// Records inputs and outputs of one run; written last, atomically.
class Manifest {
 public:
  Manifest(std::string command, json config) : command_(std::move(command)), config_(std::move(config)) {}

  void dataset(const ot::data::Dataset& ds) { dataset_hash_ = hex64(ot::data::dataset_hash(ds)); }
  void seed(std::uint64_t s) { seed_ = s; }

  void output(const fs::path& path, const std::string& bytes) {
    write_atomic(path, bytes);
    outputs_.push_back({{"path", path.generic_string()}, {"hash", hex64(ot::fnv1a(bytes))}});
  }

  void write(const fs::path& path) const {
    json j;
    j["command"] = command_;
    j["config"] = config_;
    j["config_hash"] = hex64(ot::fnv1a(config_.dump()));
    j["dataset_hash"] = dataset_hash_.empty() ? json(nullptr) : json(dataset_hash_);
    j["seed"] = seed_;
    j["versions"] = {{"optrace", kVersion},
                     {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                   std::to_string(EIGEN_MINOR_VERSION)},
                     {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                     {"cli11", CLI11_VERSION}};
    j["outputs"] = outputs_;
    write_atomic(path, j.dump(2) + "\n");
  }

 private:
  std::string command_;
  json config_;
  std::string dataset_hash_;
  std::uint64_t seed_ = 0;
  json outputs_ = json::array();
};

fs::path manifest_path(const std::string& flag, const fs::path& primary) {
  return flag.empty() ? fs::path(primary.string() + ".manifest.json") : fs::path(flag);
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Option structs, one per subcommand.

struct GenerateOpts {
  ot::synth::GenConfig gen;
  std::string out = "synthetic";
  std::string format = "csv";
};

struct SplitOpts {
  std::string data, out = "split.json", setup = "cf", manifest;
  std::uint64_t seed = 0;
  int k = 1;
  double train_frac = 0.6, val_frac = 0.2, test_frac = 0.2;
};

struct TrainOpts {
  std::string data, split, setup, model = "pobidkt", task = "option", out = "model.ckpt", history, manifest;
  int fold = 0;
  bool timing = false;
  double train_frac = 0.6, val_frac = 0.2, test_frac = 0.2;
  ot::train::TrainConfig cfg;
  std::size_t max_len = 200;
};

struct EvaluateOpts {
  std::string data, split, setup, checkpoint, out = "report.json", breakdown, manifest;
  int fold = 0;
  std::uint64_t seed = 0;
  int batch_size = 64;
  std::size_t max_len = 200;
  double train_frac = 0.6, val_frac = 0.2, test_frac = 0.2;
};

struct ClusterOpts {
  std::string data, checkpoint, truth, out = "clusters.csv", metrics, manifest, features = "embeddings";
  int k = 8, restarts = 10, subject = -1;
  std::uint64_t seed = 0;
  bool no_normalize = false;
  bool no_center = false;
};

struct GradcheckOpts {
  std::string out = "gradcheck.json", manifest;
  std::uint64_t seed = 0;
  int points = 100;
};

void add_split_fracs(CLI::App* app, double& train, double& val, double& test) {
  app->add_option("--train-frac", train, "Training fraction")->capture_default_str();
  app->add_option("--val-frac", val, "Validation fraction")->capture_default_str();
  app->add_option("--test-frac", test, "Test fraction")->capture_default_str();
}

ot::data::SplitMode parse_mode(const std::string& s) { return ot::data::parse_split_mode(s); }

/// Split from an artifact, or a fresh single split seeded from the root seed.
ot::data::SplitAssignment resolve_split(const ot::data::Dataset& ds, const std::string& split_path, int fold,
                                        ot::data::SplitMode mode, std::uint64_t seed, double tr, double va,
                                        double te) {
  if (!split_path.empty()) {
    json j;
    try {
      j = json::parse(read_file(split_path));
    } catch (const json::parse_error& e) {
      throw ot::ParseError("split artifact " + split_path + ": " + e.what());
    }
    auto art = ot::data::split_from_json(j, ds);
    if (art.spec.mode != mode)
      throw ot::ConfigError("split artifact is " + ot::data::to_string(art.spec.mode) + " but the run needs " +
                            ot::data::to_string(mode));
    if (fold < 0 || static_cast<std::size_t>(fold) >= art.folds.size())
      throw ot::ConfigError("fold " + std::to_string(fold) + " outside the " + std::to_string(art.folds.size()) +
                            " folds of the artifact");
    return art.folds[static_cast<std::size_t>(fold)];
  }
  if (fold != 0) throw ot::ConfigError("--fold needs --split");
  ot::data::SplitSpec spec{mode, tr, va, te, ot::derive_seed(seed, "split")};
  spec.validate();
  return ot::data::make_split(ds, spec);
}

// ---------------------------------------------------------------------------

int run_generate(const GenerateOpts& o) {
  const auto& g = o.gen;
  json cfg = {{"students", g.num_students},   {"questions", g.num_questions}, {"subjects", g.num_subjects},
              {"modes", g.num_error_modes},   {"min_len", g.min_length},      {"max_len", g.max_length},
              {"learning_rate", g.learning_rate}, {"mastery_gain", g.mastery_gain}, {"ability_mean", g.ability_mean},
              {"ability_sd", g.ability_sd},   {"difficulty_sd", g.difficulty_sd}, {"slip", g.slip},
              {"guess", g.guess},             {"min_misconceptions", g.min_misconceptions},
              {"max_misconceptions", g.max_misconceptions}, {"persistence", g.persistence},
              {"format", o.format}};
  if (o.format != "csv" && o.format != "jsonl") throw ot::ConfigError("--format must be csv or jsonl");
  const auto gen = ot::synth::generate(g);
  Manifest m("generate", cfg);
  m.seed(g.seed);
  m.dataset(gen.dataset);
  const fs::path dir(o.out);
  std::ostringstream data_out, truth_out;
  if (o.format == "csv") {
    ot::data::write_csv(gen.dataset, data_out);
  } else {
    ot::data::write_jsonl(gen.dataset, data_out);
  }
  ot::synth::write_ground_truth_csv(gen.labels, truth_out);
  m.output(dir / ("responses." + o.format), data_out.str());
  m.output(dir / "ground_truth_clusters.csv", truth_out.str());
  m.write(dir / "manifest.json");
  std::cerr << "generated " << gen.dataset.num_events() << " responses from " << gen.dataset.students.size()
            << " students into " << dir.string() << "\n";
  return 0;
}

int run_split(const SplitOpts& o) {
  const auto ds = ot::data::load_dataset(o.data);
  ot::data::SplitArtifact art;
  art.spec = {parse_mode(o.setup), o.train_frac, o.val_frac, o.test_frac, ot::derive_seed(o.seed, "split")};
  art.spec.validate();
  art.k = o.k;
  if (o.k < 1) throw ot::ConfigError("--k must be >= 1");
  if (o.k == 1) {
    art.folds.push_back(ot::data::make_split(ds, art.spec));
  } else {
    art.folds = ot::data::kfold(ds, o.k, art.spec.mode, art.spec.seed, o.val_frac);
  }
  for (const auto& f : art.folds)
    if (const auto* cf = std::get_if<ot::data::CfSplit>(&f))
      for (const auto& w : cf->warnings) std::cerr << "warning: " << w << "\n";

  json cfg = {{"data", o.data}, {"setup", o.setup}, {"k", o.k}, {"train_frac", o.train_frac},
              {"val_frac", o.val_frac}, {"test_frac", o.test_frac}};
  Manifest m("split", cfg);
  m.seed(o.seed);
  m.dataset(ds);
  m.output(o.out, dump(ot::data::to_json(art, ds)));
  m.write(manifest_path(o.manifest, o.out));
  return 0;
}

int run_train(TrainOpts o) {
  const auto kind = ot::models::parse_model_kind(o.model);
  const auto natural = ot::models::setup_of(kind);
  if (!o.setup.empty() && parse_mode(o.setup) != natural)
    throw ot::ConfigError("model " + o.model + " runs under the " + ot::data::to_string(natural) + " setup, not " +
                          o.setup);
  o.cfg.task = ot::models::parse_task(o.task);
  if (kind == ot::models::ModelKind::PairEmbedding && o.cfg.task != ot::models::Task::Option)
    throw ot::ConfigError("the pair model only predicts options");
  o.cfg.max_len = o.max_len;
  o.cfg.validate();

  const auto ds = ot::data::load_dataset(o.data);
  const auto split = resolve_split(ds, o.split, o.fold, natural, o.cfg.seed, o.train_frac, o.val_frac, o.test_frac);
  const auto result = ot::train::train(kind, ds, split, o.cfg);
  for (const auto& r : result.history)
    std::cerr << "epoch " << r.epoch << " train " << r.train_loss << " val " << r.val_loss << "\n";
  std::cerr << "best epoch " << result.best_epoch << " val loss " << result.best_val_loss << "\n";

  const auto& c = o.cfg;
  json cfg = {{"data", o.data},       {"split", o.split},           {"fold", o.fold},
              {"model", o.model},     {"setup", ot::data::to_string(natural)},
              {"task", o.task},       {"lr", c.learning_rate},      {"batch_size", c.batch_size},
              {"epochs", c.max_epochs}, {"patience", c.patience},   {"dim", c.dim},
              {"hidden", c.hidden},   {"heads", c.heads},           {"memory_slots", c.memory_slots},
              {"max_len", o.max_len}, {"clip_norm", c.clip_norm},   {"train_frac", o.train_frac},
              {"val_frac", o.val_frac}, {"test_frac", o.test_frac}, {"timing", o.timing}};
  Manifest m("train", cfg);
  m.seed(c.seed);
  m.dataset(ds);
  m.output(o.out, ot::models::serialize_checkpoint(result.checkpoint));
  const std::string history = o.history.empty() ? o.out + ".history.json" : o.history;
  m.output(history, dump(ot::train::history_json(result, o.timing)));
  m.write(manifest_path(o.manifest, o.out));
  return 0;
}

int run_evaluate(const EvaluateOpts& o) {
  const auto ds = ot::data::load_dataset(o.data);
  std::optional<ot::models::ModelCheckpoint> ck;
  ot::data::SplitMode mode;
  if (!o.checkpoint.empty()) {
    ck = ot::models::load_checkpoint(o.checkpoint);
    mode = ot::models::setup_of(ck->config.kind);
    if (!o.setup.empty() && parse_mode(o.setup) != mode)
      throw ot::ConfigError("checkpoint model runs under the " + ot::data::to_string(mode) + " setup");
  } else {
    if (o.setup.empty()) throw ot::ConfigError("evaluate without --checkpoint needs --setup");
    mode = parse_mode(o.setup);
  }
  const auto split = resolve_split(ds, o.split, o.fold, mode, o.seed, o.train_frac, o.val_frac, o.test_frac);
  const auto train_ex = ot::train::role_examples(ds, split, ot::data::Role::Train, o.max_len);
  const auto test_ex = ot::train::role_examples(ds, split, ot::data::Role::Test, o.max_len);
  const auto base = ot::eval::baselines(train_ex, test_ex, o.seed);

  json report = {{"setup", ot::data::to_string(mode)}, {"fold", o.fold}, {"test_events", base.majority.count}};
  const ot::eval::EvalReport* detailed = &base.majority;
  std::optional<ot::eval::EvalReport> model_report;
  if (ck) {
    model_report = ot::eval::make_report(ot::models::to_string(ck->config.kind),
                                         ot::eval::predict(*ck, test_ex, o.batch_size));
    report["model"] = ot::eval::to_json(*model_report);
    detailed = &*model_report;
  } else {
    report["model"] = nullptr;
  }
  report["baselines"] = {{"random", ot::eval::to_json(base.random)}, {"majority", ot::eval::to_json(base.majority)}};

  json cfg = {{"data", o.data}, {"split", o.split}, {"fold", o.fold}, {"setup", ot::data::to_string(mode)},
              {"checkpoint", o.checkpoint}, {"max_len", o.max_len}, {"train_frac", o.train_frac},
              {"val_frac", o.val_frac}, {"test_frac", o.test_frac}};
  Manifest m("evaluate", cfg);
  m.seed(o.seed);
  m.dataset(ds);
  m.output(o.out, dump(report));
  std::ostringstream csv;
  ot::eval::write_breakdown_csv(*detailed, csv);
  m.output(o.breakdown.empty() ? o.out + ".per_question.csv" : o.breakdown, csv.str());
  m.write(manifest_path(o.manifest, o.out));
  std::cout << report.dump(2) << "\n";
  return 0;
}

int run_cluster(const ClusterOpts& o) {
  const auto ds = ot::data::load_dataset(o.data);
  const ot::cluster::QuestionFilter filter =
      o.subject >= 0 ? ot::cluster::subject_filter(ds, o.subject) : ot::cluster::QuestionFilter{};

  std::vector<ot::cluster::PairId> ids;
  ot::cluster::Matrix points;
  if (o.features == "embeddings") {
    if (o.checkpoint.empty()) throw ot::ConfigError("--features embeddings needs --checkpoint");
    auto emb = ot::cluster::extract_incorrect_embeddings(ot::models::load_checkpoint(o.checkpoint), ds, filter,
                                                          !o.no_center);
    ids = std::move(emb.ids);
    points = std::move(emb.vectors);
  } else if (o.features == "co-selection") {
    for (const auto& [q, correct] : ds.correct_options) {
      if (filter && !filter(q)) continue;
      for (int opt = 0; opt < ot::data::kNumOptions; ++opt)
        if (opt != ot::data::index(correct)) ids.push_back({q, opt});
    }
    if (ids.empty()) throw ot::ConfigError("question filter selected no incorrect options");
    points = ot::cluster::co_selection_features(ds, ids);
  } else {
    throw ot::ConfigError("--features must be embeddings or co-selection");
  }
  if (!o.no_normalize) points = ot::cluster::normalize_rows(points);

  ot::cluster::KMeansOptions km;
  km.k = o.k;
  km.seed = o.seed;
  km.restarts = o.restarts;
  km.threads = thread_cap();
  const auto assignment = ot::cluster::kmeans(points, km);

  json metrics = {{"items", ids.size()},         {"k", o.k},
                  {"inertia", assignment.inertia}, {"iterations", assignment.iterations},
                  {"normalized", !o.no_normalize}, {"centered", !o.no_center}, {"features", o.features}};
  if (!o.truth.empty()) {
    std::istringstream in(read_file(o.truth));
    const auto truth = ot::cluster::align_labels(ids, ot::cluster::read_label_csv(in));
    metrics["ari"] = ot::cluster::adjusted_rand_index(assignment.labels, truth);
    metrics["fmi"] = ot::cluster::fowlkes_mallows(assignment.labels, truth);
  }

  json cfg = {{"data", o.data},         {"checkpoint", o.checkpoint}, {"truth", o.truth},
              {"k", o.k},               {"restarts", o.restarts},     {"subject", o.subject},
              {"normalize", !o.no_normalize}, {"center", !o.no_center}, {"features", o.features}};
  Manifest m("cluster", cfg);
  m.seed(o.seed);
  m.dataset(ds);
  std::ostringstream csv;
  ot::cluster::write_assignment_csv(ids, assignment.labels, csv);
  m.output(o.out, csv.str());
  m.output(o.metrics.empty() ? o.out + ".metrics.json" : o.metrics, dump(metrics));
  m.write(manifest_path(o.manifest, o.out));
  std::cout << metrics.dump(2) << "\n";
  return 0;
}

int run_gradcheck(const GradcheckOpts& o) {
  if (o.points < 1) throw ot::ConfigError("--points must be >= 1");
  json checks = json::array();
  bool ok = true;
  auto record = [&](const std::vector<ot::check::CheckOutcome>& outcomes, const char* group) {
    for (const auto& c : outcomes) {
      ok = ok && c.passed();
      checks.push_back({{"group", group},
                        {"name", c.name},
                        {"max_rel_error", c.max_rel_error},
                        {"tolerance", c.tolerance},
                        {"points", c.points},
                        {"entries", c.entries},
                        {"passed", c.passed()}});
      std::cout << (c.passed() ? "PASS " : "FAIL ") << c.name << " max_rel_error=" << c.max_rel_error
                << " tol=" << c.tolerance << "\n";
    }
  };
  record(ot::check::primitive_checks(o.seed, o.points), "primitive");
  record(ot::check::model_checks(o.seed), "model");

  Manifest m("gradcheck", {{"points", o.points}});
  m.seed(o.seed);
  m.output(o.out, dump({{"passed", ok}, {"checks", checks}}));
  m.write(manifest_path(o.manifest, o.out));
  return ok ? 0 : 4;
}

/// Expands `--config file.json` into flags placed right after the subcommand,
/// so explicit flags (which come later) take precedence.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::string path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (path.empty()) return rest;
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ot::ConfigError("config file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ot::ConfigError("config file " + path + " must hold a JSON object");
  std::vector<std::string> injected;
  for (const auto& [key, value] : j.items()) {
    const std::string flag = "--" + key;
    if (value.is_boolean()) {
      if (value.get<bool>()) injected.push_back(flag);
    } else if (value.is_string()) {
      injected.push_back(flag);
      injected.push_back(value.get<std::string>());
    } else if (value.is_number()) {
      injected.push_back(flag);
      injected.push_back(value.dump());
    } else {
      throw ot::ConfigError("config key '" + key + "' must be a string, number or boolean");
    }
  }
  if (rest.size() < 2) throw ot::ConfigError("--config needs a subcommand");
  rest.insert(rest.begin() + 2, injected.begin(), injected.end());
  return rest;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Option-level knowledge tracing: data, training, evaluation and clustering"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_version_flag("--version", kVersion);
  app.add_option("--config", "JSON file of flag values; explicit flags override it");

  GenerateOpts gen;
  auto* g = app.add_subcommand("generate", "Write a synthetic dataset with planted error modes");
  g->add_option("--out", gen.out, "Output directory")->capture_default_str();
  g->add_option("--format", gen.format, "csv or jsonl")->capture_default_str();
  g->add_option("--seed", gen.gen.seed)->capture_default_str();
  g->add_option("--students", gen.gen.num_students)->capture_default_str();
  g->add_option("--questions", gen.gen.num_questions)->capture_default_str();
  g->add_option("--subjects", gen.gen.num_subjects)->capture_default_str();
  g->add_option("--modes", gen.gen.num_error_modes, "Planted error modes")->capture_default_str();
  g->add_option("--min-len", gen.gen.min_length)->capture_default_str();
  g->add_option("--max-len", gen.gen.max_length)->capture_default_str();
  g->add_option("--learning-rate", gen.gen.learning_rate, "Mastery growth per practice")->capture_default_str();
  g->add_option("--mastery-gain", gen.gen.mastery_gain)->capture_default_str();
  g->add_option("--ability-mean", gen.gen.ability_mean)->capture_default_str();
  g->add_option("--ability-sd", gen.gen.ability_sd)->capture_default_str();
  g->add_option("--difficulty-sd", gen.gen.difficulty_sd)->capture_default_str();
  g->add_option("--slip", gen.gen.slip)->capture_default_str();
  g->add_option("--guess", gen.gen.guess)->capture_default_str();
  g->add_option("--min-misconceptions", gen.gen.min_misconceptions)->capture_default_str();
  g->add_option("--max-misconceptions", gen.gen.max_misconceptions)->capture_default_str();
  g->add_option("--persistence", gen.gen.persistence)->capture_default_str();

  SplitOpts sp;
  auto* s = app.add_subcommand("split", "Write a CF or KT split artifact (optionally k-fold)");
  s->add_option("--data", sp.data, "Dataset (.csv or .jsonl)")->required();
  s->add_option("--setup", sp.setup, "cf or kt")->capture_default_str();
  s->add_option("--k", sp.k, "Fold count")->capture_default_str();
  s->add_option("--seed", sp.seed)->capture_default_str();
  s->add_option("--out", sp.out)->capture_default_str();
  s->add_option("--manifest", sp.manifest);
  add_split_fracs(s, sp.train_frac, sp.val_frac, sp.test_frac);

  TrainOpts tr;
  auto* t = app.add_subcommand("train", "Train a model and write its checkpoint and history");
  t->add_option("--data", tr.data)->required();
  t->add_option("--split", tr.split, "Split artifact; a fresh split is drawn when absent");
  t->add_option("--fold", tr.fold)->capture_default_str();
  t->add_option("--model", tr.model, "ncf, pobidkt, bigikt, dkt, dkvmn, akt or pair")->capture_default_str();
  t->add_option("--setup", tr.setup, "cf or kt (must match the model)");
  t->add_option("--task", tr.task, "option or correctness")->capture_default_str();
  t->add_option("--seed", tr.cfg.seed)->capture_default_str();
  t->add_option("--lr", tr.cfg.learning_rate)->capture_default_str();
  t->add_option("--batch-size", tr.cfg.batch_size)->capture_default_str();
  t->add_option("--epochs", tr.cfg.max_epochs)->capture_default_str();
  t->add_option("--patience", tr.cfg.patience)->capture_default_str();
  t->add_option("--dim", tr.cfg.dim)->capture_default_str();
  t->add_option("--hidden", tr.cfg.hidden)->capture_default_str();
  t->add_option("--heads", tr.cfg.heads)->capture_default_str();
  t->add_option("--memory-slots", tr.cfg.memory_slots)->capture_default_str();
  t->add_option("--max-len", tr.max_len, "Chunk length for long sequences")->capture_default_str();
  t->add_option("--clip-norm", tr.cfg.clip_norm)->capture_default_str();
  t->add_option("--out", tr.out)->capture_default_str();
  t->add_option("--history", tr.history, "History JSON (default <out>.history.json)");
  t->add_option("--manifest", tr.manifest);
  t->add_flag("--timing", tr.timing, "Record per-epoch wall time in the history");
  add_split_fracs(t, tr.train_frac, tr.val_frac, tr.test_frac);

  EvaluateOpts ev;
  auto* e = app.add_subcommand("evaluate", "Score a checkpoint and the reference baselines on the test part");
  e->add_option("--data", ev.data)->required();
  e->add_option("--checkpoint", ev.checkpoint, "Model to score; baselines only when absent");
  e->add_option("--split", ev.split);
  e->add_option("--fold", ev.fold)->capture_default_str();
  e->add_option("--setup", ev.setup, "cf or kt");
  e->add_option("--seed", ev.seed)->capture_default_str();
  e->add_option("--max-len", ev.max_len)->capture_default_str();
  e->add_option("--batch-size", ev.batch_size)->capture_default_str();
  e->add_option("--out", ev.out)->capture_default_str();
  e->add_option("--breakdown", ev.breakdown, "Per-question CSV (default <out>.per_question.csv)");
  e->add_option("--manifest", ev.manifest);
  add_split_fracs(e, ev.train_frac, ev.val_frac, ev.test_frac);

  ClusterOpts cl;
  auto* c = app.add_subcommand("cluster", "k-means over incorrect-option embeddings");
  c->add_option("--data", cl.data)->required();
  c->add_option("--checkpoint", cl.checkpoint, "Trained pair model");
  c->add_option("--features", cl.features, "embeddings or co-selection")->capture_default_str();
  c->add_option("--truth", cl.truth, "Reference labels CSV (question_id, option, label)");
  c->add_option("--k", cl.k)->capture_default_str();
  c->add_option("--restarts", cl.restarts)->capture_default_str();
  c->add_option("--seed", cl.seed)->capture_default_str();
  c->add_option("--subject", cl.subject, "Only questions tagged with this subject");
  c->add_flag("--no-normalize", cl.no_normalize, "Cluster raw vectors instead of unit-normalised ones");
  c->add_flag("--no-center", cl.no_center, "Keep each question's shared embedding component");
  c->add_option("--out", cl.out)->capture_default_str();
  c->add_option("--metrics", cl.metrics, "Metrics JSON (default <out>.metrics.json)");
  c->add_option("--manifest", cl.manifest);

  GradcheckOpts gc;
  auto* gr = app.add_subcommand("gradcheck", "Finite-difference check of every primitive and model");
  gr->add_option("--seed", gc.seed)->capture_default_str();
  gr->add_option("--points", gc.points, "Random points per primitive")->capture_default_str();
  gr->add_option("--out", gc.out)->capture_default_str();
  gr->add_option("--manifest", gc.manifest);

  try {
    std::vector<std::string> args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    args.pop_back();  // program name
    try {
      app.parse(args);
    } catch (const CLI::ParseError& pe) {
      const int code = app.exit(pe);
      return code == 0 ? 0 : 2;
    }
    if (g->parsed()) return run_generate(gen);
    if (s->parsed()) return run_split(sp);
    if (t->parsed()) return run_train(tr);
    if (e->parsed()) return run_evaluate(ev);
    if (c->parsed()) return run_cluster(cl);
    if (gr->parsed()) return run_gradcheck(gc);
    return 2;
  } catch (const ot::ConfigError& ex) {
    std::cerr << "usage error: " << ex.what() << "\n";
    return 2;
  } catch (const ot::NumericError& ex) {
    std::cerr << "numeric failure: " << ex.what() << "\n";
    return 4;
  } catch (const ot::Error& ex) {
    std::cerr << "data error: " << ex.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& ex) {
    std::cerr << "data error: " << ex.what() << "\n";
    return 3;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
}
