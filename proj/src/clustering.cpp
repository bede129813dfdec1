#include "optrace/clustering.hpp"

#include "optrace/errors.hpp"
#include "optrace/random.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

namespace ot::cluster {

PairEmbeddings extract_incorrect_embeddings(const models::ModelCheckpoint& ck, const data::Dataset& ds,
                                            const QuestionFilter& filter, bool center) {
  if (ck.config.kind != models::ModelKind::PairEmbedding)
    throw ConfigError("extract_incorrect_embeddings needs a pair-embedding checkpoint, got " +
                      models::to_string(ck.config.kind));
  const Matrix& table = ck.params.get("pair_embedding");
  PairEmbeddings out;
  std::vector<Eigen::RowVectorXd> rows;
  for (const auto& [q, correct] : ds.correct_options) {
    if (filter && !filter(q)) continue;
    const Eigen::Index base = static_cast<Eigen::Index>(q) * data::kNumOptions;
    if (base + data::kNumOptions > table.rows())
      throw LookupError("question " + std::to_string(q) + " outside the pair table");
    const Eigen::RowVectorXd mean =
        center ? Eigen::RowVectorXd(table.middleRows(base, data::kNumOptions).colwise().mean())
               : Eigen::RowVectorXd::Zero(table.cols());
    for (int o = 0; o < data::kNumOptions; ++o) {
      if (o == data::index(correct)) continue;
      out.ids.push_back({q, o});
      rows.push_back(table.row(base + o) - mean);
    }
  }
  if (out.ids.empty()) throw ConfigError("question filter selected no incorrect options");
  out.vectors.resize(static_cast<Eigen::Index>(rows.size()), table.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.vectors.row(static_cast<Eigen::Index>(i)) = rows[i];
  return out;
}

QuestionFilter subject_filter(const data::Dataset& ds, int subject_id) {
  auto subjects = ds.question_subjects;
  return [subjects = std::move(subjects), subject_id](int q) {
    auto it = subjects.find(q);
    return it != subjects.end() && std::binary_search(it->second.begin(), it->second.end(), subject_id);
  };
}

// ---------------------------------------------------------------------------

namespace {

struct Run {
  std::vector<int> labels;
  Matrix centroids;
  double inertia = std::numeric_limits<double>::infinity();
  int iterations = 0;
  std::vector<double> history;
};

Matrix plus_plus_init(const Matrix& x, int k, Rng& rng) {
  const Eigen::Index n = x.rows();
  Matrix c(k, x.cols());
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  c.row(0) = x.row(first(rng));
  Eigen::VectorXd d2 = (x.rowwise() - c.row(0)).rowwise().squaredNorm();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int j = 1; j < k; ++j) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total <= 0.0) {
      pick = first(rng);  // every point coincides with a centre
    } else {
      double u = unit(rng) * total;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        u -= d2(i);
        if (u < 0.0) {
          pick = i;
          break;
        }
      }
    }
    c.row(j) = x.row(pick);
    d2 = d2.cwiseMin((x.rowwise() - c.row(j)).rowwise().squaredNorm());
  }
  return c;
}

/// Assigns each point to its nearest centre (lowest index on ties); returns the objective.
double assign(const Matrix& x, const Matrix& c, std::vector<int>& labels, Eigen::VectorXd& dist) {
  double obj = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < c.rows(); ++j) {
      const double d = (x.row(i) - c.row(j)).squaredNorm();
      if (d < bd) {
        bd = d;
        best = static_cast<int>(j);
      }
    }
    labels[static_cast<std::size_t>(i)] = best;
    dist(i) = bd;
    obj += bd;
  }
  return obj;
}

Run lloyd(const Matrix& x, const KMeansOptions& opt, std::uint64_t seed) {
  Rng rng(seed);
  const Eigen::Index n = x.rows();
  Run run;
  run.centroids = plus_plus_init(x, opt.k, rng);
  run.labels.assign(static_cast<std::size_t>(n), 0);
  Eigen::VectorXd dist(n);
  double obj = assign(x, run.centroids, run.labels, dist);
  run.history.push_back(obj);
  for (int it = 1; it <= opt.max_iterations; ++it) {
    run.iterations = it;
    Matrix sums = Matrix::Zero(opt.k, x.cols());
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(opt.k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto l = static_cast<std::size_t>(run.labels[static_cast<std::size_t>(i)]);
      sums.row(static_cast<Eigen::Index>(l)) += x.row(i);
      ++counts[l];
    }
    for (int j = 0; j < opt.k; ++j) {
      if (counts[static_cast<std::size_t>(j)] > 0) {
        run.centroids.row(j) = sums.row(j) / static_cast<double>(counts[static_cast<std::size_t>(j)]);
      } else {
        // Empty cluster: move the centre onto the point farthest from its own centre.
        Eigen::Index far = 0;
        dist.maxCoeff(&far);
        run.centroids.row(j) = x.row(far);
        dist(far) = 0.0;
      }
    }
    const std::vector<int> previous = run.labels;
    const double next = assign(x, run.centroids, run.labels, dist);
    run.history.push_back(next);
    const bool stable = previous == run.labels;
    const double change = obj - next;
    obj = next;
    if (stable || change <= opt.tolerance * std::max(1.0, obj)) break;
  }
  run.inertia = obj;
  return run;
}

}  // namespace

ClusterAssignment kmeans(const Matrix& points, const KMeansOptions& opt) {
  if (opt.k < 1) throw ConfigError("kmeans: k must be >= 1");
  if (points.rows() < opt.k)
    throw ConfigError("kmeans: " + std::to_string(points.rows()) + " points < k = " + std::to_string(opt.k));
  if (opt.restarts < 1) throw ConfigError("kmeans: restarts must be >= 1");
  if (!points.allFinite()) throw NumericError("kmeans: non-finite input");

  std::vector<Run> runs(static_cast<std::size_t>(opt.restarts));
  const int workers = std::clamp(opt.threads, 1, opt.restarts);
  if (workers == 1) {
    for (int r = 0; r < opt.restarts; ++r)
      runs[static_cast<std::size_t>(r)] = lloyd(points, opt, derive_seed(opt.seed, static_cast<std::uint64_t>(r)));
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (int r = next++; r < opt.restarts; r = next++)
          runs[static_cast<std::size_t>(r)] = lloyd(points, opt, derive_seed(opt.seed, static_cast<std::uint64_t>(r)));
      });
    }
    for (auto& t : pool) t.join();
  }
  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r)
    if (runs[r].inertia < runs[best].inertia) best = r;

  Run& b = runs[best];
  return {std::move(b.labels), opt.k, std::move(b.centroids), b.inertia, b.iterations, std::move(b.history)};
}

// ---------------------------------------------------------------------------

namespace {

struct PairCounts {
  double same_both = 0;  // Σ C(n_ij, 2)
  double same_a = 0;     // Σ C(a_i, 2)
  double same_b = 0;     // Σ C(b_j, 2)
  double total = 0;      // C(n, 2)
};

double choose2(double n) { return n * (n - 1) / 2.0; }

PairCounts pair_counts(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size())
    throw ShapeError("label length mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  if (a.size() < 2) throw ShapeError("pair-counting metrics need at least 2 items");
  std::map<std::pair<int, int>, long> joint;
  std::map<int, long> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++joint[{a[i], b[i]}];
    ++ra[a[i]];
    ++rb[b[i]];
  }
  PairCounts c;
  for (const auto& [_, n] : joint) c.same_both += choose2(static_cast<double>(n));
  for (const auto& [_, n] : ra) c.same_a += choose2(static_cast<double>(n));
  for (const auto& [_, n] : rb) c.same_b += choose2(static_cast<double>(n));
  c.total = choose2(static_cast<double>(a.size()));
  return c;
}

}  // namespace

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  const PairCounts c = pair_counts(a, b);
  const double expected = c.same_a * c.same_b / c.total;
  const double max_index = 0.5 * (c.same_a + c.same_b);
  // Both labelings trivial in the same way (all singletons or one cluster).
  if (max_index == expected) return 1.0;
  return (c.same_both - expected) / (max_index - expected);
}

double fowlkes_mallows(std::span<const int> a, std::span<const int> b) {
  const PairCounts c = pair_counts(a, b);
  if (c.same_a == 0.0 || c.same_b == 0.0) return 0.0;
  return c.same_both / std::sqrt(c.same_a * c.same_b);
}

// ---------------------------------------------------------------------------

Matrix co_selection_features(const data::Dataset& ds, const std::vector<PairId>& ids) {
  std::map<PairId, Eigen::Index> column;
  for (std::size_t i = 0; i < ids.size(); ++i) column.emplace(ids[i], static_cast<Eigen::Index>(i));
  const auto n = static_cast<Eigen::Index>(ids.size());
  Matrix counts = Matrix::Zero(n, n);
  for (const auto& s : ds.students) {
    std::vector<Eigen::Index> chosen;
    for (const auto& e : s.events) {
      auto it = column.find({e.question_id, data::index(e.chosen_option)});
      if (it != column.end()) chosen.push_back(it->second);
    }
    std::sort(chosen.begin(), chosen.end());
    chosen.erase(std::unique(chosen.begin(), chosen.end()), chosen.end());
    for (Eigen::Index i : chosen)
      for (Eigen::Index j : chosen)
        if (i != j) counts(i, j) += 1.0;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const double total = counts.row(i).sum();
    if (total > 0.0) counts.row(i) /= total;
  }
  return counts;
}

void write_assignment_csv(const std::vector<PairId>& ids, std::span<const int> labels, std::ostream& out) {
  if (ids.size() != labels.size()) throw ShapeError("assignment ids and labels differ in length");
  out << "question_id,option,cluster_label\n";
  for (std::size_t i = 0; i < ids.size(); ++i)
    out << ids[i].question_id << ',' << data::to_char(data::option_from_index(ids[i].option)) << ',' << labels[i]
        << '\n';
}

std::vector<std::pair<PairId, int>> read_label_csv(std::istream& in) {
  std::vector<std::pair<PairId, int>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (line_no == 1 && !cells.empty() && cells[0] == "question_id") continue;
    if (cells.size() != 3) throw ParseError("label CSV line " + std::to_string(line_no) + ": expected 3 fields");
    if (cells[1].empty()) throw ParseError("label CSV line " + std::to_string(line_no) + ": empty option");
    try {
      PairId id;
      id.question_id = std::stoi(cells[0]);
      id.option = std::isdigit(static_cast<unsigned char>(cells[1].front())) ? std::stoi(cells[1])
                                                                              : data::index(data::parse_option(cells[1]));
      if (id.option < 0 || id.option >= data::kNumOptions) throw ParseError("option out of range");
      rows.emplace_back(id, std::stoi(cells[2]));
    } catch (const std::logic_error&) {
      throw ParseError("label CSV line " + std::to_string(line_no) + ": malformed number");
    } catch (const ParseError& e) {
      throw ParseError("label CSV line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

std::vector<int> align_labels(const std::vector<PairId>& ids, const std::vector<std::pair<PairId, int>>& reference) {
  std::map<PairId, int> lookup(reference.begin(), reference.end());
  std::vector<int> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = lookup.find(id);
    if (it == lookup.end())
      throw LookupError("no reference label for question " + std::to_string(id.question_id) + " option " +
                        std::to_string(id.option));
    out.push_back(it->second);
  }
  return out;
}

}  // namespace ot::cluster
