#pragma once

// Option-prediction architectures sharing one set of embedding modules and a
// feed-forward output head. All models consume a time-major Batch (row
// t * batch_size + b) and produce one row of logits per (step, student):
// four option logits, or a single correctness logit.

#include "optrace/autodiff.hpp"
#include "optrace/data.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ot::models {

using ad::Index;
using ad::Matrix;
using ad::Var;

enum class ModelKind { Ncf, PoBiDkt, BiGikt, Dkt, Dkvmn, Akt, PairEmbedding };
enum class Task { Option, Correctness };

std::string to_string(ModelKind kind);
std::string to_string(Task task);
ModelKind parse_model_kind(std::string_view name);
Task parse_task(std::string_view name);
/// Evaluation setup a model belongs to: CF for NCF / PO-BiDKT / BiGIKT / pair
/// embedding, KT for DKT / DKVMN / AKT.
data::SplitMode setup_of(ModelKind kind);

struct ModelConfig {
  ModelKind kind = ModelKind::PoBiDkt;
  Task task = Task::Option;
  int dim = 16;     // embedding dimension d
  int hidden = 32;  // latent state width
  int heads = 1;    // attention heads (AKT)
  int memory_slots = 16;  // DKVMN
  int num_questions = 0;
  int num_subjects = 0;
  int num_students = 0;
  /// Bipartite question -> subject graph (used by BiGIKT).
  std::map<int, std::vector<int>> question_subjects;

  void validate() const;
  /// Width of the output head: 4, 1, or d for the pair-embedding head.
  [[nodiscard]] int head_width() const;
  bool operator==(const ModelConfig&) const = default;
};

ModelConfig make_config(ModelKind kind, Task task, const data::Dataset& ds, int dim, int hidden);

struct ParamSpec {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  double init_bound = 0.0;  // uniform(-b, b); ignored when init_constant is set
  std::optional<double> init_constant;
  bool nonnegative = false;
};

/// Parameter names and shapes for a config, in payload order.
std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg);

/// Ordered named parameter matrices.
class ParameterSet {
 public:
  void add(std::string name, Matrix value, bool nonnegative = false);

  [[nodiscard]] std::size_t size() const { return values_.size(); }
  [[nodiscard]] std::size_t index_of(std::string_view name) const;
  [[nodiscard]] bool contains(std::string_view name) const;
  [[nodiscard]] const std::string& name(std::size_t i) const { return names_[i]; }
  [[nodiscard]] bool nonnegative(std::size_t i) const { return nonnegative_[i]; }
  [[nodiscard]] const Matrix& operator[](std::size_t i) const { return values_[i]; }
  Matrix& operator[](std::size_t i) { return values_[i]; }
  [[nodiscard]] const Matrix& get(std::string_view name) const { return values_[index_of(name)]; }
  Matrix& get(std::string_view name) { return values_[index_of(name)]; }
  [[nodiscard]] std::size_t total_size() const;

  bool operator==(const ParameterSet&) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::vector<bool> nonnegative_;
};

struct ModelCheckpoint {
  ModelConfig config;
  ParameterSet params;
  bool operator==(const ModelCheckpoint&) const = default;
};

/// Fresh parameters: uniform(-1/sqrt(fan), 1/sqrt(fan)).
ModelCheckpoint init_checkpoint(const ModelConfig& cfg, std::uint64_t seed);
/// Zero every parameter (useful for analytic checks).
void zero_parameters(ModelCheckpoint& ck);

/// Binary layout: 8-byte magic "OTCKPT1\n", u64 little-endian header length,
/// JSON header (kind, task, config, parameter table with offsets), then the
/// parameters as row-major little-endian float64 in header order.
std::string serialize_checkpoint(const ModelCheckpoint& ck);
ModelCheckpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const ModelCheckpoint& ck, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Model inputs

/// One (possibly chunked) student sequence with per-step loss targets.
struct Example {
  std::size_t student_index = 0;
  std::vector<data::ResponseEvent> events;
  std::vector<std::uint8_t> target;
};

/// Padded, time-major batch. Padding rows use question 0, subject {0},
/// option A and are invalid, unobserved and untargeted.
struct Batch {
  Index size = 0;
  Index steps = 0;
  std::vector<int> lengths;
  std::vector<int> question;
  std::vector<std::vector<int>> subjects;
  std::vector<int> correct;
  std::vector<int> chosen;
  std::vector<int> correctness;
  std::vector<int> student;
  std::vector<std::uint8_t> observed;
  std::vector<std::uint8_t> valid;
  std::vector<double> target;

  [[nodiscard]] Index rows() const { return size * steps; }
  [[nodiscard]] Index row(Index t, Index b) const { return t * size + b; }
};

Batch make_batch(std::span<const Example* const> examples);
Batch make_batch(const Example& example);
/// Single-sequence example with every step targeted.
Example example_from_sequence(const data::StudentSequence& seq, std::size_t student_index = 0);

// ---------------------------------------------------------------------------
// Graph binding

/// Checkpoint parameters bound as leaves of one graph (created on first use).
class Bound {
 public:
  Bound(ad::Graph& graph, const ModelCheckpoint& ck);

  Var operator()(std::string_view name);
  [[nodiscard]] ad::Graph& graph() const { return *graph_; }
  [[nodiscard]] const ModelCheckpoint& checkpoint() const { return *ck_; }
  [[nodiscard]] const ModelConfig& config() const { return ck_->config; }
  /// Per-parameter gradients (zeros for parameters never bound).
  [[nodiscard]] std::vector<Matrix> gradients(const ad::Gradients& grads) const;

 private:
  ad::Graph* graph_;
  const ModelCheckpoint* ck_;
  std::vector<std::optional<Var>> bound_;
};

/// True on every column of rows whose response is hidden from the model.
ad::BoolMatrix unobserved_mask(const Batch& batch, Index cols);
Var constant_rows(ad::Graph& g, const std::vector<std::uint8_t>& flags, Index cols);

/// Sum of subject embeddings of a set: Σ_j table[s_j].
Var embed_subject_set(const Var& table, std::span<const int> subject_ids);

/// Per-row embeddings shared by the sequence models. `chosen` and
/// `correctness` are zero on unobserved rows.
struct InputEmbeddings {
  Var question;
  Var subjects;
  Var correct;
  Var chosen;
  Var correctness;
};
InputEmbeddings embed_inputs(Bound& p, const Batch& batch, const Var& question_table, const Var& subject_table);
InputEmbeddings embed_inputs(Bound& p, const Batch& batch);

/// Two-layer tanh network: tanh(x W1 + b1) W2 + b2, parameters "<prefix>.w1" etc.
Var feed_forward(Bound& p, std::string_view prefix, const Var& x);
/// Output head f; throws ConfigError when the feature width does not match.
Var output_head(Bound& p, const Var& features);

struct LstmLayer {
  Var input_weight;   // in x 4H, gate blocks [input | forget | cell | output]
  Var hidden_weight;  // H x 4H
  Var bias;           // 1 x 4H
  Index hidden = 0;
};
struct LstmState {
  Var h;
  Var c;
};
LstmLayer bind_lstm(Bound& p, std::string_view prefix);
LstmState zero_state(ad::Graph& g, Index batch, Index hidden);
LstmState lstm_step(const LstmLayer& layer, const LstmState& state, const Var& x);
/// Hidden state used to predict each step, time-major (rows x H): forward runs
/// see steps before t; reverse runs see steps after t (within each sequence).
Var lstm_states(const LstmLayer& layer, const Var& inputs, const Batch& batch, bool reverse);

struct GcnEmbeddings {
  Var subjects;   // num_subjects x d, first-layer subject embeddings
  Var questions;  // num_questions x d, second-layer question embeddings
  std::vector<std::string> warnings;
};
GcnEmbeddings gcn_embed(Bound& p, const std::map<int, std::vector<int>>& question_subjects);

struct DkvmnTrace {
  std::vector<Matrix> weights;  // per step, batch x slots
  std::vector<Matrix> reads;    // per step, batch x H
};
struct AktTrace {
  std::vector<std::vector<Matrix>> attention;  // [student][head] L x L (row t over past τ)
};

Var ncf_forward(Bound& p, const Batch& batch);
Var pobidkt_forward(Bound& p, const Batch& batch);
Var bigikt_forward(Bound& p, const Batch& batch);
Var dkt_forward(Bound& p, const Batch& batch);
Var dkvmn_forward(Bound& p, const Batch& batch, DkvmnTrace* trace = nullptr);
Var akt_forward(Bound& p, const Batch& batch, AktTrace* trace = nullptr);
Var pair_model_forward(Bound& p, const Batch& batch);

/// Concatenated forward/backward Bi-LSTM states [fwd ⊕ bwd] of PO-BiDKT-style models.
Var bilstm_states(Bound& p, const Batch& batch, const InputEmbeddings& emb);

/// Dispatch on the checkpoint kind.
Var forward(Bound& p, const Batch& batch);
/// Inference convenience: logits as a plain matrix.
Matrix forward_logits(const ModelCheckpoint& ck, const Batch& batch);
Matrix forward_logits(const ModelCheckpoint& ck, const data::StudentSequence& seq);

/// Row-wise softmax of option logits.
Matrix option_probabilities(const Matrix& logits);
/// Sigmoid of single-column correctness logits.
Eigen::VectorXd correctness_probabilities(const Matrix& logits);
/// Argmax with ties resolved to the lowest option index.
int predict_option(const Eigen::Ref<const Eigen::RowVectorXd>& logits);

}  // namespace ot::models
