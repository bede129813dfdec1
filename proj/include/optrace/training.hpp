#pragma once

#include "optrace/data.hpp"
#include "optrace/models.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <span>
#include <vector>

namespace ot::train {

using models::Example;
using models::Matrix;
using models::Var;

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 64;   // students per batch
  int max_epochs = 200;
  int patience = 10;
  int dim = 16;
  int hidden = 32;
  int heads = 1;
  int memory_slots = 16;
  std::size_t max_len = 200;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  models::Task task = models::Task::Option;

  void validate() const;
};

/// Mean over weighted rows of −log softmax(logits)[chosen]. Throws ConfigError
/// when no row carries weight.
Var nll_loss(const Var& logits, std::span<const int> chosen, std::span<const double> weights);
/// Mean binary cross-entropy of single-column logits against 0/1 labels.
Var bce_loss(const Var& logits, std::span<const int> labels, std::span<const double> weights);
/// nll_loss on chosen options or bce_loss on correctness, per the task.
Var task_loss(const Var& logits, const models::Batch& batch, models::Task task);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;

  AdamState() = default;
  explicit AdamState(const models::ParameterSet& params);
};

/// One bias-corrected Adam update. Parameters flagged non-negative are
/// projected back onto [0, inf). Throws NumericError naming the first
/// parameter with a non-finite gradient.
void adam_step(AdamState& state, models::ParameterSet& params, const std::vector<Matrix>& grads, double learning_rate);

/// Rescales grads so their global L2 norm is at most max_norm; returns the
/// norm before clipping.
double clip_global_norm(std::vector<Matrix>& grads, double max_norm);

/// CF examples: inputs observe training steps only; `target` selects the
/// steps scored by the loss.
std::vector<Example> cf_examples(const data::Dataset& ds, const data::CfSplit& split, data::Role target,
                                 std::size_t max_len);
/// KT examples: whole sequences of the given students, every step observed and scored.
std::vector<Example> kt_examples(const data::Dataset& ds, std::span<const std::size_t> students, std::size_t max_len);

struct TrainingData {
  std::vector<Example> train;
  std::vector<Example> val;
};
TrainingData training_data(const data::Dataset& ds, const data::SplitAssignment& split, std::size_t max_len);

/// Examples scoring the steps (CF) or students (KT) holding `role`.
std::vector<Example> role_examples(const data::Dataset& ds, const data::SplitAssignment& split, data::Role role,
                                   std::size_t max_len);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  models::ModelCheckpoint checkpoint;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_loss = 0.0;
};

/// Mean task loss over all targeted steps of `examples`.
double evaluate_loss(const models::ModelCheckpoint& ck, const std::vector<Example>& examples, int batch_size);

/// Core loop: shuffled mini-batches, gradient clipping, Adam, validation
/// after each epoch, best-validation checkpoint, patience-based stopping.
TrainResult train(models::ModelCheckpoint initial, const std::vector<Example>& train_set,
                  const std::vector<Example>& val_set, const TrainConfig& cfg);

/// Builds a checkpoint for `kind` and trains it on the split. The split mode
/// must match the model's setup.
TrainResult train(models::ModelKind kind, const data::Dataset& ds, const data::SplitAssignment& split,
                  const TrainConfig& cfg);

nlohmann::json history_json(const TrainResult& result, bool include_wall_time);

}  // namespace ot::train
