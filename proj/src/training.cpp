#include "optrace/training.hpp"

#include "optrace/errors.hpp"
#include "optrace/random.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace ot::train {

using models::Index;

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (dim < 1 || hidden < 1) throw ConfigError("dim and hidden must be positive");
  if (max_len < 1) throw ConfigError("max_len must be positive");
}

namespace {

double weight_total(std::span<const double> weights) {
  double w = 0.0;
  for (double x : weights) w += x;
  if (!(w > 0.0)) throw ConfigError("loss over zero unmasked steps");
  return w;
}

}  // namespace

Var nll_loss(const Var& logits, std::span<const int> chosen, std::span<const double> weights) {
  const Matrix& z = logits.value();
  if (z.cols() != data::kNumOptions || static_cast<std::size_t>(z.rows()) != chosen.size() ||
      chosen.size() != weights.size()) {
    throw ShapeError("nll_loss: logits " + std::to_string(z.rows()) + "x" + std::to_string(z.cols()) + " vs " +
                     std::to_string(chosen.size()) + " targets");
  }
  const double total = weight_total(weights);
  Matrix probs = ad::softmax_rows(z);
  double loss = 0.0;
  for (Index r = 0; r < z.rows(); ++r) {
    const double w = weights[static_cast<std::size_t>(r)];
    if (w == 0.0) continue;
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    loss -= w * (z(r, chosen[static_cast<std::size_t>(r)]) - lse);
  }
  Matrix out(1, 1);
  out(0, 0) = loss / total;
  const ad::NodeId id = logits.id();
  std::vector<int> y(chosen.begin(), chosen.end());
  std::vector<double> wv(weights.begin(), weights.end());
  return logits.graph()->record(
      std::move(out), {id},
      [id, probs = std::move(probs), y = std::move(y), wv = std::move(wv), total](const Matrix& go,
                                                                                  ad::GradientAccumulator& acc) {
        if (!acc.wants(id)) return;
        Matrix& buf = acc.buffer(id);
        for (Index r = 0; r < probs.rows(); ++r) {
          const double w = wv[static_cast<std::size_t>(r)];
          if (w == 0.0) continue;
          const double s = go(0, 0) * w / total;
          buf.row(r) += s * probs.row(r);
          buf(r, y[static_cast<std::size_t>(r)]) -= s;
        }
      },
      "nll_loss");
}

Var bce_loss(const Var& logits, std::span<const int> labels, std::span<const double> weights) {
  const Matrix& z = logits.value();
  if (z.cols() != 1 || static_cast<std::size_t>(z.rows()) != labels.size() || labels.size() != weights.size()) {
    throw ShapeError("bce_loss: logits " + std::to_string(z.rows()) + "x" + std::to_string(z.cols()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const double total = weight_total(weights);
  double loss = 0.0;
  Eigen::VectorXd residual(z.rows());
  for (Index r = 0; r < z.rows(); ++r) {
    const double x = z(r, 0);
    const double y = labels[static_cast<std::size_t>(r)];
    const double w = weights[static_cast<std::size_t>(r)];
    residual(r) = w * (1.0 / (1.0 + std::exp(-x)) - y);
    if (w == 0.0) continue;
    loss += w * (std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))));
  }
  Matrix out(1, 1);
  out(0, 0) = loss / total;
  const ad::NodeId id = logits.id();
  return logits.graph()->record(
      std::move(out), {id},
      [id, residual = std::move(residual), total](const Matrix& go, ad::GradientAccumulator& acc) {
        acc.add(id, residual * (go(0, 0) / total));
      },
      "bce_loss");
}

Var task_loss(const Var& logits, const models::Batch& batch, models::Task task) {
  if (task == models::Task::Option) return nll_loss(logits, batch.chosen, batch.target);
  return bce_loss(logits, batch.correctness, batch.target);
}

// ---------------------------------------------------------------------------

AdamState::AdamState(const models::ParameterSet& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    first_moment.push_back(Matrix::Zero(params[i].rows(), params[i].cols()));
    second_moment.push_back(Matrix::Zero(params[i].rows(), params[i].cols()));
  }
}

void adam_step(AdamState& state, models::ParameterSet& params, const std::vector<Matrix>& grads,
               double learning_rate) {
  if (grads.size() != params.size() || state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: gradient/parameter count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params[i].rows() || grads[i].cols() != params[i].cols()) {
      throw ShapeError("adam_step: gradient shape mismatch for " + params.name(i));
    }
    if (!grads[i].allFinite()) throw NumericError("non-finite gradient for parameter " + params.name(i));
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * grads[i];
    v = state.beta2 * v + (1.0 - state.beta2) * grads[i].cwiseProduct(grads[i]);
    params[i].array() -= learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + state.epsilon);
    if (params.nonnegative(i)) params[i] = params[i].cwiseMax(0.0);
  }
}

double clip_global_norm(std::vector<Matrix>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& g : grads) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------

std::vector<Example> cf_examples(const data::Dataset& ds, const data::CfSplit& split, data::Role target,
                                 std::size_t max_len) {
  if (split.roles.size() != ds.students.size()) throw ConfigError("CF split does not match dataset");
  std::vector<Example> out;
  for (std::size_t s = 0; s < ds.students.size(); ++s) {
    const auto& events = ds.students[s].events;
    const auto& roles = split.roles[s];
    if (roles.size() != events.size()) throw ConfigError("CF split does not match dataset sequence lengths");
    for (auto [lo, hi] : data::chunk_ranges(events.size(), max_len)) {
      Example ex;
      ex.student_index = s;
      bool any = false;
      for (std::size_t t = lo; t < hi; ++t) {
        auto e = events[t];
        e.mask = roles[t] == data::Role::Train ? 1 : 0;
        ex.events.push_back(std::move(e));
        ex.target.push_back(roles[t] == target ? 1 : 0);
        any = any || roles[t] == target;
      }
      if (any) out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<Example> kt_examples(const data::Dataset& ds, std::span<const std::size_t> students, std::size_t max_len) {
  std::vector<Example> out;
  for (std::size_t s : students) {
    if (s >= ds.students.size()) throw LookupError("student index out of range");
    const auto& events = ds.students[s].events;
    for (auto [lo, hi] : data::chunk_ranges(events.size(), max_len)) {
      Example ex;
      ex.student_index = s;
      for (std::size_t t = lo; t < hi; ++t) {
        auto e = events[t];
        e.mask = 1;
        ex.events.push_back(std::move(e));
        ex.target.push_back(1);
      }
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<Example> role_examples(const data::Dataset& ds, const data::SplitAssignment& split, data::Role role,
                                   std::size_t max_len) {
  if (const auto* cf = std::get_if<data::CfSplit>(&split)) return cf_examples(ds, *cf, role, max_len);
  const auto& kt = std::get<data::KtSplit>(split);
  const auto& students = role == data::Role::Train ? kt.train : role == data::Role::Val ? kt.val : kt.test;
  return kt_examples(ds, students, max_len);
}

TrainingData training_data(const data::Dataset& ds, const data::SplitAssignment& split, std::size_t max_len) {
  TrainingData td;
  if (const auto* cf = std::get_if<data::CfSplit>(&split)) {
    td.train = cf_examples(ds, *cf, data::Role::Train, max_len);
    td.val = cf_examples(ds, *cf, data::Role::Val, max_len);
  } else {
    const auto& kt = std::get<data::KtSplit>(split);
    td.train = kt_examples(ds, kt.train, max_len);
    td.val = kt_examples(ds, kt.val, max_len);
  }
  return td;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<const Example*> slice_batch(const std::vector<const Example*>& order, std::size_t start, std::size_t size) {
  const std::size_t end = std::min(order.size(), start + size);
  return {order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

double target_count(const models::Batch& b) { return std::accumulate(b.target.begin(), b.target.end(), 0.0); }

}  // namespace

double evaluate_loss(const models::ModelCheckpoint& ck, const std::vector<Example>& examples, int batch_size) {
  std::vector<const Example*> all;
  for (const auto& e : examples) all.push_back(&e);
  double sum = 0.0, count = 0.0;
  for (std::size_t i = 0; i < all.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto part = slice_batch(all, i, static_cast<std::size_t>(batch_size));
    const models::Batch batch = models::make_batch(part);
    const double n = target_count(batch);
    if (n == 0.0) continue;
    ad::Graph g;
    models::Bound p(g, ck);
    const Var loss = task_loss(models::forward(p, batch), batch, ck.config.task);
    sum += loss.value()(0, 0) * n;
    count += n;
  }
  if (count == 0.0) throw ConfigError("evaluate_loss: no targeted steps");
  return sum / count;
}

TrainResult train(models::ModelCheckpoint initial, const std::vector<Example>& train_set,
                  const std::vector<Example>& val_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("empty training set");
  if (initial.config.task != cfg.task) throw ConfigError("checkpoint task does not match the training task");

  bool have_val = false;
  for (const auto& e : val_set)
    for (auto t : e.target) have_val = have_val || t;

  TrainResult result;
  result.checkpoint = initial;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  models::ModelCheckpoint current = std::move(initial);
  AdamState adam(current.params);
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<const Example*> order;
  for (const auto& e : train_set) order.push_back(&e);

  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double sum = 0.0, count = 0.0;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg.batch_size)) {
      const models::Batch batch = models::make_batch(slice_batch(order, i, static_cast<std::size_t>(cfg.batch_size)));
      const double n = target_count(batch);
      if (n == 0.0) continue;
      ad::Graph g;
      models::Bound p(g, current);
      const Var loss = task_loss(models::forward(p, batch), batch, cfg.task);
      if (!std::isfinite(loss.value()(0, 0))) throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
      auto grads = p.gradients(g.backward(loss));
      for (std::size_t k = 0; k < grads.size(); ++k)
        if (!grads[k].allFinite()) throw NumericError("non-finite gradient for parameter " + current.params.name(k));
      clip_global_norm(grads, cfg.clip_norm);
      adam_step(adam, current.params, grads, cfg.learning_rate);
      sum += loss.value()(0, 0) * n;
      count += n;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = count > 0 ? sum / count : 0.0;
    rec.val_loss = have_val ? evaluate_loss(current, val_set, cfg.batch_size) : rec.train_loss;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
    if (rec.val_loss < result.best_val_loss) {
      result.best_val_loss = rec.val_loss;
      result.best_epoch = epoch;
      result.checkpoint = current;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  return result;
}

TrainResult train(models::ModelKind kind, const data::Dataset& ds, const data::SplitAssignment& split,
                  const TrainConfig& cfg) {
  const data::SplitMode mode = std::holds_alternative<data::CfSplit>(split) ? data::SplitMode::CF : data::SplitMode::KT;
  if (mode != models::setup_of(kind)) {
    throw ConfigError("model " + models::to_string(kind) + " needs a " + data::to_string(models::setup_of(kind)) +
                      " split, got " + data::to_string(mode));
  }
  cfg.validate();
  auto mc = models::make_config(kind, cfg.task, ds, cfg.dim, cfg.hidden);
  mc.heads = cfg.heads;
  mc.memory_slots = cfg.memory_slots;
  mc.validate();
  auto td = training_data(ds, split, cfg.max_len);
  return train(models::init_checkpoint(mc, derive_seed(cfg.seed, "init")), td.train, td.val, cfg);
}

nlohmann::json history_json(const TrainResult& result, bool include_wall_time) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& r : result.history) {
    nlohmann::json e = {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}};
    if (include_wall_time) e["wall_seconds"] = r.wall_seconds;
    epochs.push_back(std::move(e));
  }
  return {{"best_epoch", result.best_epoch}, {"best_val_loss", result.best_val_loss}, {"epochs", epochs}};
}

}  // namespace ot::train
