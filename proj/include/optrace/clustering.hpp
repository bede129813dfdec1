#pragma once

// Clustering of learned question-option pair embeddings and pair-counting
// agreement metrics.

#include "optrace/models.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

namespace ot::cluster {

using Matrix = Eigen::MatrixXd;

struct PairId {
  int question_id = 0;
  int option = 0;
  auto operator<=>(const PairId&) const = default;
};

struct PairEmbeddings {
  std::vector<PairId> ids;
  Matrix vectors;  // ids.size() x d
};

using QuestionFilter = std::function<bool(int question_id)>;

/// Pair-table rows of every incorrect option of the questions accepted by
/// `filter` (all questions when empty), ordered by (question, option).
/// With `center`, each question's four rows first have their mean removed:
/// softmax scores are unchanged by a shift common to a question's options, so
/// that component never trains and only carries initialisation noise.
/// Throws ConfigError when nothing is selected.
PairEmbeddings extract_incorrect_embeddings(const models::ModelCheckpoint& ck, const data::Dataset& ds,
                                            const QuestionFilter& filter = {}, bool center = true);

/// Questions tagged with `subject_id`.
QuestionFilter subject_filter(const data::Dataset& ds, int subject_id);

/// Copy with every row scaled to unit L2 norm (zero rows are left as is).
template <typename Derived>
Matrix normalize_rows(const Eigen::MatrixBase<Derived>& points) {
  Matrix out = points;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0.0) out.row(i) /= n;
  }
  return out;
}

struct KMeansOptions {
  int k = 8;
  std::uint64_t seed = 0;
  int restarts = 10;
  int max_iterations = 300;
  double tolerance = 1e-8;
  /// Worker cap for concurrent restarts (1 = sequential).
  int threads = 1;
};

struct ClusterAssignment {
  std::vector<int> labels;
  int k = 0;
  Matrix centroids;
  double inertia = 0.0;
  int iterations = 0;
  /// Within-cluster sum of squares after every assignment step of the chosen run.
  std::vector<double> objective_history;
};

/// Best-of-restarts Lloyd k-means with k-means++ seeding. Restart r draws from
/// derive_seed(seed, r), so results do not depend on the thread count.
ClusterAssignment kmeans(const Matrix& points, const KMeansOptions& options);

template <typename Derived>
ClusterAssignment kmeans(const Eigen::MatrixBase<Derived>& points, const KMeansOptions& options) {
  return kmeans(Matrix(points), options);
}

double adjusted_rand_index(std::span<const int> a, std::span<const int> b);
double fowlkes_mallows(std::span<const int> a, std::span<const int> b);

/// Per incorrect pair, how often students who chose it chose each other pair:
/// row i is the normalised co-selection profile of ids[i] over all ids.
Matrix co_selection_features(const data::Dataset& ds, const std::vector<PairId>& ids);

void write_assignment_csv(const std::vector<PairId>& ids, std::span<const int> labels, std::ostream& out);
/// Reads (question_id, option, label) rows; option as a letter or index.
std::vector<std::pair<PairId, int>> read_label_csv(std::istream& in);

/// Labels of `reference` aligned to `ids`; throws LookupError on missing pairs.
std::vector<int> align_labels(const std::vector<PairId>& ids, const std::vector<std::pair<PairId, int>>& reference);

}  // namespace ot::cluster
