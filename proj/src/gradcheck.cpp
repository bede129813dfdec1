#include "optrace/gradcheck.hpp"

#include "optrace/random.hpp"
#include "optrace/training.hpp"

#include <algorithm>
#include <functional>

namespace ot::check {

using ad::Graph;
using ad::Index;
using ad::Matrix;
using ad::Var;

namespace {

Matrix uniform(Rng& rng, Index rows, Index cols, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// Scalar probe ⟨out, W⟩ with a fixed random W, so every output entry matters.
Var probe(Graph& g, const Var& out, const Matrix& w) { return ad::sum(ad::mul(out, g.constant(w))); }

struct PrimitiveCase {
  std::string name;
  std::vector<std::pair<Index, Index>> shapes;
  /// Builds the primitive's output; may draw fixed auxiliary data from rng.
  std::function<std::function<Var(Graph&, std::span<const Var>)>(Rng&)> make;
};

std::vector<PrimitiveCase> cases() {
  using Fn = std::function<Var(Graph&, std::span<const Var>)>;
  std::vector<PrimitiveCase> cs;
  auto simple = [&](std::string name, std::vector<std::pair<Index, Index>> shapes, Fn fn) {
    cs.push_back({std::move(name), std::move(shapes), [fn](Rng&) { return fn; }});
  };
  simple("matmul", {{3, 4}, {4, 2}}, [](Graph&, std::span<const Var> v) { return ad::matmul(v[0], v[1]); });
  simple("add", {{3, 4}, {3, 4}}, [](Graph&, std::span<const Var> v) { return ad::add(v[0], v[1]); });
  simple("add_row_broadcast", {{3, 4}, {1, 4}}, [](Graph&, std::span<const Var> v) { return ad::add(v[0], v[1]); });
  simple("sub", {{3, 4}, {3, 4}}, [](Graph&, std::span<const Var> v) { return ad::sub(v[0], v[1]); });
  simple("mul", {{3, 4}, {3, 4}}, [](Graph&, std::span<const Var> v) { return ad::mul(v[0], v[1]); });
  simple("scale", {{3, 4}}, [](Graph&, std::span<const Var> v) { return ad::scale(v[0], -1.7); });
  simple("concat_cols", {{3, 2}, {3, 3}},
         [](Graph&, std::span<const Var> v) { return ad::concat({v[0], v[1]}, ad::Axis::Cols); });
  simple("concat_rows", {{2, 3}, {1, 3}},
         [](Graph&, std::span<const Var> v) { return ad::concat({v[0], v[1]}, ad::Axis::Rows); });
  simple("slice_rows", {{5, 3}}, [](Graph&, std::span<const Var> v) { return ad::slice(v[0], 1, 3, ad::Axis::Rows); });
  simple("slice_cols", {{3, 5}}, [](Graph&, std::span<const Var> v) { return ad::slice(v[0], 2, 2, ad::Axis::Cols); });
  simple("transpose", {{3, 4}}, [](Graph&, std::span<const Var> v) { return ad::transpose(v[0]); });
  simple("tanh", {{3, 4}}, [](Graph&, std::span<const Var> v) { return ad::tanh(v[0]); });
  simple("sigmoid", {{3, 4}}, [](Graph&, std::span<const Var> v) { return ad::sigmoid(v[0]); });
  simple("exp", {{3, 4}}, [](Graph&, std::span<const Var> v) { return ad::exp(v[0]); });
  simple("row_sum", {{3, 4}}, [](Graph&, std::span<const Var> v) { return ad::row_sum(v[0]); });
  simple("sum", {{3, 4}}, [](Graph&, std::span<const Var> v) { return ad::sum(v[0]); });
  simple("softmax", {{3, 4}}, [](Graph&, std::span<const Var> v) { return ad::softmax(v[0]); });

  cs.push_back({"gather", {{5, 3}}, [](Rng& rng) -> Fn {
                  std::uniform_int_distribution<int> pick(0, 4);
                  std::vector<int> idx(6);
                  for (int& i : idx) i = pick(rng);
                  return [idx](Graph&, std::span<const Var> v) { return ad::gather(v[0], idx); };
                }});
  cs.push_back({"gather_sum", {{5, 3}}, [](Rng& rng) -> Fn {
                  std::uniform_int_distribution<int> pick(0, 4), len(1, 3);
                  std::vector<std::vector<int>> bags(4);
                  for (auto& b : bags) {
                    b.resize(static_cast<std::size_t>(len(rng)));
                    for (int& i : b) i = pick(rng);
                  }
                  return [bags](Graph&, std::span<const Var> v) { return ad::gather_sum(v[0], bags); };
                }});
  auto random_mask = [](Rng& rng, Index rows, Index cols) {
    std::bernoulli_distribution coin(0.4);
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> mask(rows, cols);
    for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = coin(rng);
    return mask;
  };
  cs.push_back({"masked_fill", {{3, 4}}, [random_mask](Rng& rng) -> Fn {
                  auto mask = random_mask(rng, 3, 4);
                  return [mask](Graph&, std::span<const Var> v) { return ad::masked_fill(v[0], mask, 0.5); };
                }});
  cs.push_back({"softmax_masked", {{4, 4}}, [random_mask](Rng& rng) -> Fn {
                  auto mask = random_mask(rng, 4, 4);
                  mask.row(0).setConstant(true);  // fully masked row
                  return [mask](Graph&, std::span<const Var> v) {
                    return ad::softmax(ad::masked_fill(v[0], mask, ad::kNegInf));
                  };
                }});
  cs.push_back({"nll_loss", {{5, 4}}, [](Rng& rng) -> Fn {
                  std::uniform_int_distribution<int> opt(0, 3);
                  std::vector<int> y(5);
                  std::vector<double> w(5);
                  for (std::size_t i = 0; i < 5; ++i) {
                    y[i] = opt(rng);
                    w[i] = i % 2 == 0 ? 1.0 : static_cast<double>(opt(rng) % 2);
                  }
                  return [y, w](Graph&, std::span<const Var> v) { return train::nll_loss(v[0], y, w); };
                }});
  cs.push_back({"bce_loss", {{5, 1}}, [](Rng& rng) -> Fn {
                  std::bernoulli_distribution coin(0.5);
                  std::vector<int> y(5);
                  std::vector<double> w(5);
                  for (std::size_t i = 0; i < 5; ++i) {
                    y[i] = coin(rng) ? 1 : 0;
                    w[i] = i % 2 == 0 ? 1.0 : (coin(rng) ? 1.0 : 0.0);
                  }
                  return [y, w](Graph&, std::span<const Var> v) { return train::bce_loss(v[0], y, w); };
                }});
  return cs;
}

}  // namespace

std::vector<CheckOutcome> primitive_checks(std::uint64_t seed, int points, double tolerance) {
  std::vector<CheckOutcome> out;
  for (const auto& c : cases()) {
    Rng rng(derive_seed(seed, c.name));
    CheckOutcome o{c.name, 0.0, tolerance, 0, 0};
    for (int p = 0; p < points; ++p) {
      std::vector<Matrix> inputs;
      for (auto [r, k] : c.shapes) inputs.push_back(uniform(rng, r, k));
      auto fn = c.make(rng);
      // Probe weights shaped like the output, drawn once per point.
      Graph shape_graph;
      std::vector<Var> vs;
      for (const auto& m : inputs) vs.push_back(shape_graph.constant(m));
      const Var sample = fn(shape_graph, vs);
      const Matrix w = uniform(rng, sample.rows(), sample.cols());
      const auto res = ad::finite_difference_check(
          [&](Graph& g, std::span<const Var> v) { return probe(g, fn(g, v), w); }, inputs);
      o.max_rel_error = std::max(o.max_rel_error, res.max_rel_error);
      o.entries += res.entries_checked;
      ++o.points;
    }
    out.push_back(o);
  }
  return out;
}

// ---------------------------------------------------------------------------

data::Dataset toy_dataset(std::uint64_t seed, int steps) {
  Rng rng(derive_seed(seed, "toy"));
  std::uniform_int_distribution<int> question(1, 6), option(0, 3);
  std::vector<std::vector<int>> subjects = {{}, {1}, {2}, {1, 3}, {3}, {2, 3}, {1, 2}};
  std::vector<data::Option> correct = {data::Option::A, data::Option::B, data::Option::C, data::Option::D,
                                       data::Option::A, data::Option::B, data::Option::C};
  std::vector<std::pair<std::int64_t, data::ResponseEvent>> rows;
  for (std::int64_t s = 1; s <= 2; ++s) {
    for (int t = 0; t < steps; ++t) {
      data::ResponseEvent e;
      e.timestamp = t;
      e.question_id = question(rng);
      e.subject_ids = subjects[static_cast<std::size_t>(e.question_id)];
      e.correct_option = correct[static_cast<std::size_t>(e.question_id)];
      e.chosen_option = data::option_from_index(option(rng));
      rows.emplace_back(s, e);
    }
  }
  return data::build_dataset(std::move(rows));
}

std::vector<models::Example> toy_examples(data::SplitMode mode, std::uint64_t seed, int steps) {
  const data::Dataset ds = toy_dataset(seed, steps);
  std::vector<models::Example> out;
  for (std::size_t s = 0; s < ds.students.size(); ++s) {
    models::Example ex;
    ex.student_index = s;
    ex.events = ds.students[s].events;
    ex.target.assign(ex.events.size(), 1);
    if (mode == data::SplitMode::CF) {
      // Alternate observed / held-out steps; the loss scores held-out ones.
      for (std::size_t t = 0; t < ex.events.size(); ++t) {
        const bool held = t % 2 == 1;
        ex.events[t].mask = held ? 0 : 1;
        ex.target[t] = held ? 1 : 0;
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

CheckOutcome model_check(const models::ModelCheckpoint& ck, const std::vector<models::Example>& examples,
                         double tolerance, double eps) {
  std::vector<const models::Example*> ptrs;
  for (const auto& e : examples) ptrs.push_back(&e);
  const models::Batch batch = models::make_batch(ptrs);

  std::vector<Matrix> analytic;
  {
    Graph g;
    models::Bound p(g, ck);
    const Var loss = train::task_loss(models::forward(p, batch), batch, ck.config.task);
    analytic = p.gradients(g.backward(loss));
  }
  auto loss_at = [&](const models::ModelCheckpoint& c) {
    Graph g;
    models::Bound p(g, c);
    return train::task_loss(models::forward(p, batch), batch, c.config.task).value()(0, 0);
  };

  CheckOutcome o{"model:" + models::to_string(ck.config.kind) + ":" + models::to_string(ck.config.task), 0.0,
                 tolerance, 1, 0};
  models::ModelCheckpoint work = ck;
  for (std::size_t k = 0; k < work.params.size(); ++k) {
    Matrix& m = work.params[k];
    for (Index i = 0; i < m.size(); ++i) {
      const double orig = m.data()[i];
      m.data()[i] = orig + eps;
      const double fp = loss_at(work);
      m.data()[i] = orig - eps;
      const double fm = loss_at(work);
      m.data()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      o.max_rel_error = std::max(o.max_rel_error, ad::relative_error(analytic[k].data()[i], numeric));
      ++o.entries;
    }
  }
  return o;
}

std::vector<CheckOutcome> model_checks(std::uint64_t seed, double tolerance) {
  using models::ModelKind;
  std::vector<CheckOutcome> out;
  const std::vector<std::pair<ModelKind, models::Task>> runs = {
      {ModelKind::Ncf, models::Task::Option},         {ModelKind::PoBiDkt, models::Task::Option},
      {ModelKind::BiGikt, models::Task::Option},      {ModelKind::Dkt, models::Task::Option},
      {ModelKind::Dkvmn, models::Task::Option},       {ModelKind::Akt, models::Task::Option},
      {ModelKind::PairEmbedding, models::Task::Option}, {ModelKind::PoBiDkt, models::Task::Correctness},
      {ModelKind::Dkt, models::Task::Correctness},
  };
  const data::Dataset ds = toy_dataset(seed);
  for (const auto& [kind, task] : runs) {
    auto cfg = models::make_config(kind, task, ds, 4, 8);
    cfg.memory_slots = 3;
    cfg.heads = kind == ModelKind::Akt ? 2 : 1;
    auto ck = models::init_checkpoint(cfg, derive_seed(seed, models::to_string(kind)));
    // Keep the decay rate away from its zero clamp so the derivative is two-sided.
    if (ck.params.contains("attention.decay")) ck.params.get("attention.decay").setConstant(0.3);
    out.push_back(model_check(ck, toy_examples(models::setup_of(kind), seed), tolerance));
  }
  return out;
}

}  // namespace ot::check
