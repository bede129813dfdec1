#include "optrace/clustering.hpp"
#include "optrace/errors.hpp"
#include "optrace/gradcheck.hpp"
#include "optrace/random.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace ot;
using namespace ot::cluster;

namespace {

struct PairCounts {
  double tp = 0, fp = 0, fn = 0, tn = 0;
};

// Brute-force enumeration of all item pairs (a: predicted, b: reference).
PairCounts enumerate_pairs(const std::vector<int>& a, const std::vector<int>& b) {
  PairCounts c;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      if (sa && sb) c.tp += 1;
      else if (sa) c.fp += 1;
      else if (sb) c.fn += 1;
      else c.tn += 1;
    }
  return c;
}

double ari_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  const PairCounts c = enumerate_pairs(a, b);
  return 2 * (c.tp * c.tn - c.fn * c.fp) / ((c.tp + c.fn) * (c.fn + c.tn) + (c.tp + c.fp) * (c.fp + c.tn));
}

double fmi_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  const PairCounts c = enumerate_pairs(a, b);
  return c.tp / std::sqrt((c.tp + c.fp) * (c.tp + c.fn));
}

Matrix blobs(Rng& rng, const std::vector<Eigen::RowVector2d>& centres, int per, double spread) {
  std::normal_distribution<double> n(0.0, spread);
  Matrix m(static_cast<Eigen::Index>(centres.size()) * per, 2);
  Eigen::Index r = 0;
  for (const auto& c : centres)
    for (int i = 0; i < per; ++i, ++r) m.row(r) = c + Eigen::RowVector2d(n(rng), n(rng));
  return m;
}

}  // namespace

TEST_CASE("pair-counting metrics on the crossing example") {
  const std::vector<int> a = {0, 0, 1, 1}, b = {0, 1, 0, 1};
  CHECK(adjusted_rand_index(a, b) == doctest::Approx(-0.5).epsilon(1e-15));
  CHECK(fowlkes_mallows(a, b) == 0.0);
  CHECK(adjusted_rand_index(a, a) == 1.0);
  CHECK(fowlkes_mallows(a, a) == 1.0);
  CHECK(ari_oracle(a, b) == doctest::Approx(-0.5));
}

TEST_CASE("pair-counting metrics agree with pair enumeration") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> ka(2, 6), kb(2, 6), n(5, 40);
    const int size = n(rng);
    std::uniform_int_distribution<int> la(0, ka(rng) - 1), lb(0, kb(rng) - 1);
    std::vector<int> a(static_cast<std::size_t>(size)), b(a.size());
    for (auto& v : a) v = la(rng);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = trial % 3 == 0 && i % 2 ? a[i] : lb(rng);
    const PairCounts c = enumerate_pairs(a, b);
    const bool degenerate = (c.tp + c.fn) * (c.fn + c.tn) + (c.tp + c.fp) * (c.fp + c.tn) == 0;
    if (!degenerate) CHECK(adjusted_rand_index(a, b) == doctest::Approx(ari_oracle(a, b)).epsilon(1e-12));
    if (c.tp + c.fp > 0 && c.tp + c.fn > 0)
      CHECK(fowlkes_mallows(a, b) == doctest::Approx(fmi_oracle(a, b)).epsilon(1e-12));
    CHECK(adjusted_rand_index(a, b) == doctest::Approx(adjusted_rand_index(b, a)).epsilon(1e-12));
    CHECK(fowlkes_mallows(a, b) == doctest::Approx(fowlkes_mallows(b, a)).epsilon(1e-12));
  }
}

TEST_CASE("metrics ignore label names") {
  const std::vector<int> a = {0, 0, 1, 2, 2, 1, 0}, b = {1, 0, 1, 2, 2, 2, 0};
  std::vector<int> renamed = a;
  for (auto& v : renamed) v = (v + 1) * 7;
  CHECK(adjusted_rand_index(renamed, b) == adjusted_rand_index(a, b));
  CHECK(fowlkes_mallows(renamed, b) == fowlkes_mallows(a, b));
  CHECK(adjusted_rand_index(renamed, a) == 1.0);
}

TEST_CASE("random labelings score near zero ARI on average") {
  Rng rng(2);
  std::uniform_int_distribution<int> label(0, 7);
  double total = 0;
  for (int seed = 0; seed < 100; ++seed) {
    std::vector<int> a(200), b(200);
    for (auto& v : a) v = label(rng);
    for (auto& v : b) v = label(rng);
    total += adjusted_rand_index(a, b);
  }
  CHECK(std::abs(total / 100) < 0.01);
}

TEST_CASE("metric edge cases") {
  const std::vector<int> singletons = {0, 1, 2}, one = {0, 0, 0}, shorter = {0, 1};
  CHECK(fowlkes_mallows(singletons, singletons) == 0.0);
  CHECK(adjusted_rand_index(one, one) == 1.0);
  CHECK_THROWS_AS(adjusted_rand_index(singletons, shorter), ShapeError);
}

TEST_CASE("k-means recovers separated groups") {
  Rng rng(3);
  const Matrix pts = blobs(rng, {{0, 0}, {100, 0}, {0, 100}}, 20, 1.0);
  KMeansOptions opt;
  opt.k = 3;
  opt.seed = 4;
  const ClusterAssignment a = kmeans(pts, opt);
  std::vector<int> truth;
  for (int g = 0; g < 3; ++g) truth.insert(truth.end(), 20, g);
  CHECK(adjusted_rand_index(a.labels, truth) == 1.0);
  CHECK(a.k == 3);
  for (int c = 0; c < 3; ++c) {
    Eigen::RowVector2d mean = Eigen::RowVector2d::Zero();
    int n = 0;
    for (std::size_t i = 0; i < a.labels.size(); ++i)
      if (a.labels[i] == c) {
        mean += pts.row(static_cast<Eigen::Index>(i));
        ++n;
      }
    CHECK((a.centroids.row(c) - mean / n).norm() < 1e-9);
  }
}

TEST_CASE("k-means properties") {
  Rng rng(5);
  Matrix pts = blobs(rng, {{0, 0}, {3, 0}, {0, 3}, {3, 3}, {1.5, 1.5}}, 30, 1.2);
  pts.row(7) = pts.row(70);
  KMeansOptions opt;
  opt.k = 5;
  opt.seed = 6;

  SUBCASE("duplicates share a cluster and labels are in range") {
    const auto a = kmeans(pts, opt);
    CHECK(a.labels[7] == a.labels[70]);
    for (int l : a.labels) CHECK((l >= 0 && l < 5));
  }
  SUBCASE("objective never increases") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      opt.seed = s;
      opt.restarts = 1;
      const auto a = kmeans(pts, opt);
      REQUIRE_FALSE(a.objective_history.empty());
      for (std::size_t i = 1; i < a.objective_history.size(); ++i)
        CHECK(a.objective_history[i] <= a.objective_history[i - 1] * (1 + 1e-12));
      CHECK(a.inertia == doctest::Approx(a.objective_history.back()));
    }
  }
  SUBCASE("more restarts are never worse") {
    for (std::uint64_t s = 0; s < 10; ++s) {
      opt.seed = s;
      opt.restarts = 1;
      const double single = kmeans(pts, opt).inertia;
      opt.restarts = 10;
      CHECK(kmeans(pts, opt).inertia <= single);
    }
  }
  SUBCASE("thread count does not change the result") {
    opt.restarts = 6;
    opt.threads = 1;
    const auto a = kmeans(pts, opt);
    opt.threads = 3;
    const auto b = kmeans(pts, opt);
    CHECK(a.labels == b.labels);
    CHECK(a.inertia == b.inertia);
  }
  SUBCASE("too few points") {
    opt.k = 200;
    CHECK_THROWS_AS(kmeans(pts, opt), ConfigError);
  }
}

TEST_CASE("row normalisation") {
  const Matrix m = (Matrix(3, 2) << 3, 4, 0, 0, -2, 0).finished();
  const Matrix n = normalize_rows(m);
  CHECK(n(0, 0) == doctest::Approx(0.6));
  CHECK(n(0, 1) == doctest::Approx(0.8));
  CHECK(n.row(1).isZero(0));
  CHECK(n(2, 0) == -1.0);
}

TEST_CASE("incorrect-option embeddings") {
  const data::Dataset ds = check::toy_dataset(1, 12);
  auto cfg = models::make_config(models::ModelKind::PairEmbedding, models::Task::Option, ds, 4, 8);
  const auto ck = models::init_checkpoint(cfg, 1);
  const Matrix& table = ck.params.get("pair_embedding");

  SUBCASE("raw rows of every distractor") {
    const PairEmbeddings e = extract_incorrect_embeddings(ck, ds, {}, false);
    CHECK(e.ids.size() == 3 * ds.correct_options.size());
    CHECK(e.vectors.cols() == 4);
    for (std::size_t i = 0; i < e.ids.size(); ++i) {
      CHECK(e.ids[i].option != data::index(ds.correct_options.at(e.ids[i].question_id)));
      CHECK(e.vectors.row(static_cast<Eigen::Index>(i)) == table.row(e.ids[i].question_id * 4 + e.ids[i].option));
    }
    CHECK(std::is_sorted(e.ids.begin(), e.ids.end()));
  }
  SUBCASE("centering removes each question's four-row mean") {
    const PairEmbeddings e = extract_incorrect_embeddings(ck, ds);
    for (std::size_t i = 0; i < e.ids.size(); ++i) {
      const int q = e.ids[i].question_id;
      const Eigen::RowVectorXd mean = table.middleRows(q * 4, 4).colwise().mean();
      CHECK((e.vectors.row(static_cast<Eigen::Index>(i)) - (table.row(q * 4 + e.ids[i].option) - mean)).norm() <
            1e-15);
    }
  }
  SUBCASE("question filters") {
    const PairEmbeddings e = extract_incorrect_embeddings(ck, ds, subject_filter(ds, 3));
    for (const auto& id : e.ids) {
      const auto& subjects = ds.question_subjects.at(id.question_id);
      CHECK(std::find(subjects.begin(), subjects.end(), 3) != subjects.end());
    }
    CHECK_THROWS_AS(extract_incorrect_embeddings(ck, ds, subject_filter(ds, 42)), ConfigError);
    CHECK_THROWS_AS(extract_incorrect_embeddings(ck, ds, [](int) { return false; }), ConfigError);
  }
  SUBCASE("other model kinds have no pair table") {
    auto other = models::make_config(models::ModelKind::PoBiDkt, models::Task::Option, ds, 4, 8);
    CHECK_THROWS_AS(extract_incorrect_embeddings(models::init_checkpoint(other, 1), ds), ConfigError);
  }
}

TEST_CASE("co-selection features") {
  std::vector<std::pair<std::int64_t, data::ResponseEvent>> rows;
  auto add = [&](std::int64_t student, int question, int chosen) {
    data::ResponseEvent e;
    e.timestamp = static_cast<std::int64_t>(rows.size());
    e.question_id = question;
    e.subject_ids = {1};
    e.correct_option = data::Option::A;
    e.chosen_option = data::option_from_index(chosen);
    rows.emplace_back(student, e);
  };
  // Students 1 and 2 both pick (1,B) and (2,C); student 3 picks (1,B) and (2,D).
  add(1, 1, 1), add(1, 2, 2), add(1, 2, 2);
  add(2, 1, 1), add(2, 2, 2);
  add(3, 1, 1), add(3, 2, 3);
  const data::Dataset ds = data::build_dataset(rows);
  const std::vector<PairId> ids = {{1, 1}, {2, 2}, {2, 3}};
  const Matrix f = co_selection_features(ds, ids);
  CHECK(f(0, 1) == doctest::Approx(2.0 / 3.0));
  CHECK(f(0, 2) == doctest::Approx(1.0 / 3.0));
  CHECK(f(1, 0) == 1.0);
  CHECK(f(2, 0) == 1.0);
  CHECK(f(0, 0) == 0.0);
}

TEST_CASE("assignment and label CSVs") {
  const std::vector<PairId> ids = {{1, 1}, {1, 3}, {4, 0}};
  const std::vector<int> labels = {2, 0, 2};
  std::ostringstream out;
  write_assignment_csv(ids, labels, out);
  CHECK(out.str() == "question_id,option,cluster_label\n1,B,2\n1,D,0\n4,A,2\n");
  std::istringstream in(out.str());
  const auto read = read_label_csv(in);
  REQUIRE(read.size() == 3);
  CHECK(read[1].first == PairId{1, 3});
  CHECK(align_labels(ids, read) == labels);
  std::istringstream numeric("1,1,5\n1,3,6\n4,0,7\n");
  CHECK(align_labels(ids, read_label_csv(numeric)) == std::vector<int>{5, 6, 7});
  const std::vector<PairId> missing = {{9, 1}};
  CHECK_THROWS_AS(align_labels(missing, read), LookupError);
  std::istringstream bad("question_id,option,cluster_label\n1,,3\n");
  CHECK_THROWS_AS(read_label_csv(bad), ParseError);
}
