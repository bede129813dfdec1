#include "optrace/errors.hpp"
#include "optrace/models.hpp"

#include <algorithm>
#include <cmath>

namespace ot::models {

Bound::Bound(ad::Graph& graph, const ModelCheckpoint& ck)
    : graph_(&graph), ck_(&ck), bound_(ck.params.size()) {}

Var Bound::operator()(std::string_view name) {
  const std::size_t i = ck_->params.index_of(name);
  if (!bound_[i]) bound_[i] = graph_->leaf(ck_->params[i]);
  return *bound_[i];
}

std::vector<Matrix> Bound::gradients(const ad::Gradients& grads) const {
  std::vector<Matrix> out;
  out.reserve(bound_.size());
  for (std::size_t i = 0; i < bound_.size(); ++i) {
    if (bound_[i]) out.push_back(grads.of(*bound_[i]));
    else out.push_back(Matrix::Zero(ck_->params[i].rows(), ck_->params[i].cols()));
  }
  return out;
}

Var constant_rows(ad::Graph& g, const std::vector<std::uint8_t>& flags, Index cols) {
  Matrix m(static_cast<Index>(flags.size()), cols);
  for (std::size_t r = 0; r < flags.size(); ++r) m.row(static_cast<Index>(r)).setConstant(flags[r] ? 1.0 : 0.0);
  return g.constant(std::move(m));
}

Var embed_subject_set(const Var& table, std::span<const int> subject_ids) {
  return ad::gather_sum(table, {std::vector<int>(subject_ids.begin(), subject_ids.end())});
}

ad::BoolMatrix unobserved_mask(const Batch& batch, Index cols) {
  ad::BoolMatrix m(batch.rows(), cols);
  for (Index r = 0; r < batch.rows(); ++r) m.row(r).setConstant(batch.observed[static_cast<std::size_t>(r)] == 0);
  return m;
}

InputEmbeddings embed_inputs(Bound& p, const Batch& batch, const Var& question_table, const Var& subject_table) {
  InputEmbeddings e;
  const Var options = p("option_embedding");
  e.question = ad::gather(question_table, batch.question);
  e.subjects = ad::gather_sum(subject_table, batch.subjects);
  e.correct = ad::gather(options, batch.correct);
  const auto hidden = unobserved_mask(batch, options.cols());
  e.chosen = ad::masked_fill(ad::gather(options, batch.chosen), hidden, 0.0);
  e.correctness = ad::masked_fill(ad::gather(p("correctness_embedding"), batch.correctness), hidden, 0.0);
  return e;
}

InputEmbeddings embed_inputs(Bound& p, const Batch& batch) {
  return embed_inputs(p, batch, p("question_embedding"), p("subject_embedding"));
}

Var feed_forward(Bound& p, std::string_view prefix, const Var& x) {
  const std::string pre(prefix);
  const Var hidden = ad::tanh(ad::add(ad::matmul(x, p(pre + ".w1")), p(pre + ".b1")));
  return ad::add(ad::matmul(hidden, p(pre + ".w2")), p(pre + ".b2"));
}

Var output_head(Bound& p, const Var& features) {
  const Index expected = p.checkpoint().params.get("head.w1").rows();
  if (features.cols() != expected) {
    throw ConfigError("output head expects " + std::to_string(expected) + " features, got " +
                      std::to_string(features.cols()));
  }
  return feed_forward(p, "head", features);
}

// ---------------------------------------------------------------------------

LstmLayer bind_lstm(Bound& p, std::string_view prefix) {
  const std::string pre(prefix);
  LstmLayer l{p(pre + ".input_weight"), p(pre + ".hidden_weight"), p(pre + ".bias"), 0};
  l.hidden = l.hidden_weight.rows();
  return l;
}

LstmState zero_state(ad::Graph& g, Index batch, Index hidden) {
  return {g.constant(Matrix::Zero(batch, hidden)), g.constant(Matrix::Zero(batch, hidden))};
}

namespace {

LstmState lstm_step_projected(const LstmLayer& layer, const LstmState& state, const Var& projected) {
  const Index h = layer.hidden;
  const Var gates = ad::add(projected, ad::matmul(state.h, layer.hidden_weight));
  const Var in = ad::sigmoid(ad::slice(gates, 0, h, ad::Axis::Cols));
  const Var forget = ad::sigmoid(ad::slice(gates, h, h, ad::Axis::Cols));
  const Var cell = ad::tanh(ad::slice(gates, 2 * h, h, ad::Axis::Cols));
  const Var out = ad::sigmoid(ad::slice(gates, 3 * h, h, ad::Axis::Cols));
  const Var c = ad::add(ad::mul(forget, state.c), ad::mul(in, cell));
  return {ad::mul(out, ad::tanh(c)), c};
}

}  // namespace

LstmState lstm_step(const LstmLayer& layer, const LstmState& state, const Var& x) {
  return lstm_step_projected(layer, state, ad::add(ad::matmul(x, layer.input_weight), layer.bias));
}

Var lstm_states(const LstmLayer& layer, const Var& inputs, const Batch& batch, bool reverse) {
  ad::Graph& g = *inputs.graph();
  const Index bsz = batch.size, steps = batch.steps, h = layer.hidden;
  const Var projected = ad::add(ad::matmul(inputs, layer.input_weight), layer.bias);
  LstmState state = zero_state(g, bsz, h);
  std::vector<Var> per_step(static_cast<std::size_t>(steps));
  for (Index k = 0; k < steps; ++k) {
    const Index t = reverse ? steps - 1 - k : k;
    per_step[static_cast<std::size_t>(t)] = state.h;
    if (k + 1 == steps) break;
    state = lstm_step_projected(layer, state, ad::slice(projected, t * bsz, bsz));
    if (reverse) {
      // Steps past a sequence's end must leave its state at zero.
      std::vector<std::uint8_t> valid(static_cast<std::size_t>(bsz));
      bool all = true;
      for (Index b = 0; b < bsz; ++b) {
        valid[static_cast<std::size_t>(b)] = batch.valid[static_cast<std::size_t>(batch.row(t, b))];
        all = all && valid[static_cast<std::size_t>(b)];
      }
      if (!all) {
        const Var keep = constant_rows(g, valid, h);
        state = {ad::mul(state.h, keep), ad::mul(state.c, keep)};
      }
    }
  }
  return ad::concat(std::span<const Var>(per_step), ad::Axis::Rows);
}

// ---------------------------------------------------------------------------

GcnEmbeddings gcn_embed(Bound& p, const std::map<int, std::vector<int>>& question_subjects) {
  ad::Graph& g = p.graph();
  const Var eq = p("question_embedding");
  const Var es = p("subject_embedding");
  const Index nq = eq.rows(), ns = es.rows();

  Matrix subject_mean = Matrix::Zero(ns, nq);   // row j: mean over N_j^s
  Matrix question_mean = Matrix::Zero(nq, ns);  // row i: mean over N_i^q
  for (const auto& [q, subjects] : question_subjects) {
    if (q < 0 || q >= nq) throw LookupError("GCN graph references unknown question " + std::to_string(q));
    for (int s : subjects) {
      if (s < 0 || s >= ns) throw LookupError("GCN graph references unknown subject " + std::to_string(s));
      subject_mean(s, q) = 1.0;
      question_mean(q, s) = 1.0;
    }
  }
  GcnEmbeddings out;
  std::vector<int> isolated;
  for (Index j = 0; j < ns; ++j) {
    const double n = subject_mean.row(j).sum();
    if (n > 0) subject_mean.row(j) /= n;
    else if (j != data::kUntaggedSubject) isolated.push_back(static_cast<int>(j));
  }
  for (Index i = 0; i < nq; ++i) {
    const double n = question_mean.row(i).sum();
    if (n > 0) question_mean.row(i) /= n;
  }
  if (!isolated.empty()) {
    std::string ids;
    for (int j : isolated) ids += (ids.empty() ? "" : ",") + std::to_string(j);
    out.warnings.push_back("subjects without tagged questions use a zero neighbour mean: " + ids);
  }

  const Var sm = g.constant(std::move(subject_mean));
  const Var qm = g.constant(std::move(question_mean));
  out.subjects = ad::tanh(ad::add(ad::matmul(es, p("gcn.subject_self")),
                                  ad::matmul(sm, ad::matmul(eq, p("gcn.subject_from_question")))));
  out.questions = ad::tanh(ad::add(ad::matmul(eq, p("gcn.question_self")),
                                   ad::matmul(qm, ad::matmul(out.subjects, p("gcn.question_from_subject")))));
  return out;
}

}  // namespace ot::models
