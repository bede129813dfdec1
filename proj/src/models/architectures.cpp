#include "optrace/errors.hpp"
#include "optrace/models.hpp"

#include <cmath>

namespace ot::models {

namespace {

Var question_features(const InputEmbeddings& e) { return ad::concat({e.question, e.correct, e.subjects}); }

Var step_inputs(const InputEmbeddings& e) {
  return ad::concat({e.question, e.correct, e.subjects, e.chosen, e.correctness});
}

void require(const Bound& p, ModelKind kind) {
  if (p.config().kind != kind) {
    throw ConfigError("checkpoint of kind " + to_string(p.config().kind) + " used as " + to_string(kind));
  }
}

}  // namespace

Var ncf_forward(Bound& p, const Batch& batch) {
  require(p, ModelKind::Ncf);
  const InputEmbeddings e = embed_inputs(p, batch);
  const Var student = ad::gather(p("student_embedding"), batch.student);
  return output_head(p, ad::concat({e.question, student, e.subjects}));
}

Var bilstm_states(Bound& p, const Batch& batch, const InputEmbeddings& emb) {
  const Var x = step_inputs(emb);
  const Var fwd = lstm_states(bind_lstm(p, "lstm_forward"), x, batch, false);
  const Var bwd = lstm_states(bind_lstm(p, "lstm_backward"), x, batch, true);
  return ad::concat({fwd, bwd});
}

Var pobidkt_forward(Bound& p, const Batch& batch) {
  require(p, ModelKind::PoBiDkt);
  const InputEmbeddings e = embed_inputs(p, batch);
  return output_head(p, ad::concat({bilstm_states(p, batch, e), question_features(e)}));
}

Var bigikt_forward(Bound& p, const Batch& batch) {
  require(p, ModelKind::BiGikt);
  const GcnEmbeddings gcn = gcn_embed(p, p.config().question_subjects);
  const InputEmbeddings e = embed_inputs(p, batch, gcn.questions, gcn.subjects);
  return output_head(p, ad::concat({bilstm_states(p, batch, e), question_features(e)}));
}

Var dkt_forward(Bound& p, const Batch& batch) {
  require(p, ModelKind::Dkt);
  const InputEmbeddings e = embed_inputs(p, batch);
  const Var h = lstm_states(bind_lstm(p, "lstm"), step_inputs(e), batch, false);
  return output_head(p, ad::concat({h, question_features(e)}));
}

Var dkvmn_forward(Bound& p, const Batch& batch, DkvmnTrace* trace) {
  require(p, ModelKind::Dkvmn);
  ad::Graph& g = p.graph();
  const InputEmbeddings e = embed_inputs(p, batch);
  const Var qf = question_features(e);
  const Var x = step_inputs(e);

  const Var keys = p("memory.keys");
  const Var init_values = p("memory.values");
  const Index slots = keys.rows(), h = init_values.cols(), bsz = batch.size, wide = slots * h;

  // Value memory of each student is one row of width slots*h (slot-major).
  // Constant 0/1 maps expand slot weights and per-unit vectors to that width
  // and fold it back.
  Matrix slot_expand = Matrix::Zero(slots, wide);
  Matrix unit_tile = Matrix::Zero(h, wide);
  Matrix fold = Matrix::Zero(wide, h);
  for (Index m = 0; m < slots; ++m) {
    for (Index j = 0; j < h; ++j) {
      slot_expand(m, m * h + j) = 1.0;
      unit_tile(j, m * h + j) = 1.0;
      fold(m * h + j, j) = 1.0;
    }
  }
  const Var expand_v = g.constant(std::move(slot_expand));
  const Var tile_v = g.constant(std::move(unit_tile));
  const Var fold_v = g.constant(std::move(fold));

  std::vector<Var> rows;
  for (Index m = 0; m < slots; ++m) rows.push_back(ad::slice(init_values, m, 1));
  const Var flat = ad::concat(std::span<const Var>(rows), ad::Axis::Cols);
  Var memory = ad::matmul(g.constant(Matrix::Ones(bsz, 1)), flat);

  const Var query = ad::matmul(qf, p("memory.query"));
  const Var weights_all = ad::softmax(ad::matmul(query, ad::transpose(keys)));
  const Var erase_all = ad::sigmoid(ad::add(ad::matmul(x, p("memory.erase_weight")), p("memory.erase_bias")));
  const Var add_all = ad::tanh(ad::add(ad::matmul(x, p("memory.add_weight")), p("memory.add_bias")));

  std::vector<Var> reads(static_cast<std::size_t>(batch.steps));
  for (Index t = 0; t < batch.steps; ++t) {
    const Var w = ad::slice(weights_all, t * bsz, bsz);
    const Var w_wide = ad::matmul(w, expand_v);
    reads[static_cast<std::size_t>(t)] = ad::matmul(ad::mul(w_wide, memory), fold_v);
    if (trace) {
      trace->weights.push_back(w.value());
      trace->reads.push_back(reads[static_cast<std::size_t>(t)].value());
    }
    if (t + 1 == batch.steps) break;
    const Var erase = ad::mul(w_wide, ad::matmul(ad::slice(erase_all, t * bsz, bsz), tile_v));
    const Var add = ad::mul(w_wide, ad::matmul(ad::slice(add_all, t * bsz, bsz), tile_v));
    memory = ad::add(ad::sub(memory, ad::mul(memory, erase)), add);
  }
  const Var read = ad::concat(std::span<const Var>(reads), ad::Axis::Rows);
  return output_head(p, ad::concat({read, qf}));
}

Var akt_forward(Bound& p, const Batch& batch, AktTrace* trace) {
  require(p, ModelKind::Akt);
  ad::Graph& g = p.graph();
  const InputEmbeddings e = embed_inputs(p, batch);
  const Var n = ad::concat({e.question, e.subjects, e.correct});
  const Var queries = ad::matmul(n, p("attention.query"));
  const Var keys = ad::matmul(n, p("attention.key"));
  const Var values =
      ad::matmul(ad::concat({e.correctness, e.question, e.chosen, e.correct}), p("attention.value"));
  const Var decay = p("attention.decay");
  const Index heads = decay.cols();
  const Index h = queries.cols(), dh = h / heads, bsz = batch.size, steps = batch.steps;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Var> blocks;
  for (Index b = 0; b < bsz; ++b) {
    const Index len = batch.lengths[static_cast<std::size_t>(b)];
    std::vector<int> idx(static_cast<std::size_t>(len));
    for (Index t = 0; t < len; ++t) idx[static_cast<std::size_t>(t)] = static_cast<int>(batch.row(t, b));
    const Var qb = ad::gather(queries, idx);
    const Var kb = ad::gather(keys, idx);
    const Var vb = ad::gather(values, idx);

    Matrix distance(len, len);
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> future(len, len);
    for (Index t = 0; t < len; ++t) {
      for (Index tau = 0; tau < len; ++tau) {
        distance(t, tau) = static_cast<double>(t - tau);
        future(t, tau) = tau >= t;
      }
    }
    const Var dist = g.constant(std::move(distance));
    const Var col_ones = g.constant(Matrix::Ones(len, 1));
    const Var row_ones = g.constant(Matrix::Ones(1, len));

    std::vector<Var> head_reads;
    if (trace) trace->attention.emplace_back();
    for (Index k = 0; k < heads; ++k) {
      const Var qh = ad::slice(qb, k * dh, dh, ad::Axis::Cols);
      const Var kh = ad::slice(kb, k * dh, dh, ad::Axis::Cols);
      const Var vh = ad::slice(vb, k * dh, dh, ad::Axis::Cols);
      const Var theta = ad::slice(decay, k, 1, ad::Axis::Cols);
      const Var penalty = ad::mul(ad::matmul(ad::matmul(col_ones, theta), row_ones), dist);
      const Var scores = ad::sub(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt), penalty);
      const Var alpha = ad::softmax(ad::masked_fill(scores, future, ad::kNegInf));
      if (trace) trace->attention.back().push_back(alpha.value());
      head_reads.push_back(ad::matmul(alpha, vh));
    }
    blocks.push_back(ad::concat(std::span<const Var>(head_reads), ad::Axis::Cols));
    if (len < steps) blocks.push_back(g.constant(Matrix::Zero(steps - len, h)));
  }
  // Student-major blocks back to time-major rows.
  const Var student_major = ad::concat(std::span<const Var>(blocks), ad::Axis::Rows);
  std::vector<int> order(static_cast<std::size_t>(batch.rows()));
  for (Index t = 0; t < steps; ++t)
    for (Index b = 0; b < bsz; ++b) order[static_cast<std::size_t>(batch.row(t, b))] = static_cast<int>(b * steps + t);
  const Var retrieved = ad::gather(student_major, order);
  const Var knowledge = feed_forward(p, "knowledge", retrieved);
  return output_head(p, ad::concat({knowledge, question_features(e)}));
}

Var pair_model_forward(Bound& p, const Batch& batch) {
  require(p, ModelKind::PairEmbedding);
  // The observed response enters the backbone through its pair embedding,
  // so the same table carries both the input and the output side.
  const Var pairs = p("pair_embedding");
  InputEmbeddings e = embed_inputs(p, batch);
  std::vector<int> rows(batch.question.size());
  for (std::size_t r = 0; r < rows.size(); ++r) rows[r] = batch.question[r] * data::kNumOptions + batch.chosen[r];
  e.chosen = ad::masked_fill(ad::gather(pairs, rows), unobserved_mask(batch, pairs.cols()), 0.0);
  const Var projected = output_head(p, bilstm_states(p, batch, e));
  std::vector<Var> scores;
  for (int o = 0; o < data::kNumOptions; ++o) {
    for (std::size_t r = 0; r < rows.size(); ++r) rows[r] = batch.question[r] * data::kNumOptions + o;
    scores.push_back(ad::row_sum(ad::mul(projected, ad::gather(pairs, rows))));
  }
  return ad::concat(std::span<const Var>(scores), ad::Axis::Cols);
}

Var forward(Bound& p, const Batch& batch) {
  switch (p.config().kind) {
    case ModelKind::Ncf: return ncf_forward(p, batch);
    case ModelKind::PoBiDkt: return pobidkt_forward(p, batch);
    case ModelKind::BiGikt: return bigikt_forward(p, batch);
    case ModelKind::Dkt: return dkt_forward(p, batch);
    case ModelKind::Dkvmn: return dkvmn_forward(p, batch);
    case ModelKind::Akt: return akt_forward(p, batch);
    case ModelKind::PairEmbedding: return pair_model_forward(p, batch);
  }
  throw ConfigError("unknown model kind");
}

Matrix forward_logits(const ModelCheckpoint& ck, const Batch& batch) {
  ad::Graph g;
  Bound p(g, ck);
  return forward(p, batch).value();
}

Matrix forward_logits(const ModelCheckpoint& ck, const data::StudentSequence& seq) {
  return forward_logits(ck, make_batch(example_from_sequence(seq)));
}

Matrix option_probabilities(const Matrix& logits) {
  if (logits.cols() != data::kNumOptions) throw ConfigError("option probabilities need 4 logits per row");
  return ad::softmax_rows(logits);
}

Eigen::VectorXd correctness_probabilities(const Matrix& logits) {
  if (logits.cols() != 1) throw ConfigError("correctness probabilities need one logit per row");
  return (1.0 / (1.0 + (-logits.col(0).array()).exp())).matrix();
}

int predict_option(const Eigen::Ref<const Eigen::RowVectorXd>& logits) {
  int best = 0;
  for (int o = 1; o < logits.size(); ++o)
    if (logits(o) > logits(best)) best = o;
  return best;
}

}  // namespace ot::models
