#include "optrace/errors.hpp"
#include "optrace/models.hpp"
#include "optrace/random.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ot::models {

namespace {

struct KindName {
  ModelKind kind;
  const char* name;
};
constexpr KindName kKindNames[] = {{ModelKind::Ncf, "ncf"},       {ModelKind::PoBiDkt, "pobidkt"},
                                   {ModelKind::BiGikt, "bigikt"}, {ModelKind::Dkt, "dkt"},
                                   {ModelKind::Dkvmn, "dkvmn"},   {ModelKind::Akt, "akt"},
                                   {ModelKind::PairEmbedding, "pair"}};

}  // namespace

std::string to_string(ModelKind kind) {
  for (const auto& kn : kKindNames)
    if (kn.kind == kind) return kn.name;
  return "unknown";
}

std::string to_string(Task task) { return task == Task::Option ? "option" : "correctness"; }

ModelKind parse_model_kind(std::string_view name) {
  for (const auto& kn : kKindNames)
    if (name == kn.name) return kn.kind;
  throw ConfigError("unknown model '" + std::string(name) + "' (ncf, pobidkt, bigikt, dkt, dkvmn, akt, pair)");
}

Task parse_task(std::string_view name) {
  if (name == "option") return Task::Option;
  if (name == "correctness") return Task::Correctness;
  throw ConfigError("unknown task '" + std::string(name) + "' (option, correctness)");
}

data::SplitMode setup_of(ModelKind kind) {
  switch (kind) {
    case ModelKind::Dkt:
    case ModelKind::Dkvmn:
    case ModelKind::Akt: return data::SplitMode::KT;
    default: return data::SplitMode::CF;
  }
}

void ModelConfig::validate() const {
  if (dim < 1 || hidden < 1) throw ConfigError("dim and hidden must be positive");
  if (num_questions < 1 || num_subjects < 1) throw ConfigError("question and subject registries must be non-empty");
  if (kind == ModelKind::Ncf && num_students < 1) throw ConfigError("NCF needs at least one student");
  if (kind == ModelKind::Akt && (heads < 1 || hidden % heads != 0))
    throw ConfigError("AKT hidden width must be divisible by the head count");
  if (kind == ModelKind::Dkvmn && memory_slots < 1) throw ConfigError("DKVMN needs at least one memory slot");
  if (kind == ModelKind::PairEmbedding && task != Task::Option)
    throw ConfigError("the pair-embedding model only supports the option task");
}

int ModelConfig::head_width() const {
  if (kind == ModelKind::PairEmbedding) return dim;
  return task == Task::Option ? data::kNumOptions : 1;
}

ModelConfig make_config(ModelKind kind, Task task, const data::Dataset& ds, int dim, int hidden) {
  ModelConfig cfg;
  cfg.kind = kind;
  cfg.task = task;
  cfg.dim = dim;
  cfg.hidden = hidden;
  cfg.num_questions = ds.num_questions;
  cfg.num_subjects = ds.num_subjects;
  cfg.num_students = static_cast<int>(ds.students.size());
  if (kind == ModelKind::BiGikt) cfg.question_subjects = ds.question_subjects;
  cfg.validate();
  return cfg;
}

std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const Index d = cfg.dim, h = cfg.hidden;
  const double ed = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<ParamSpec> out;
  auto emb = [&](const char* name, Index rows) { out.push_back({name, rows, d, ed, {}, false}); };
  auto weight = [&](std::string name, Index in, Index o) {
    out.push_back({std::move(name), in, o, 1.0 / std::sqrt(static_cast<double>(in)), {}, false});
  };
  auto bias = [&](std::string name, Index fan_in, Index o) {
    out.push_back({std::move(name), 1, o, 1.0 / std::sqrt(static_cast<double>(fan_in)), {}, false});
  };
  auto ffn = [&](const std::string& prefix, Index in, Index o) {
    weight(prefix + ".w1", in, h);
    bias(prefix + ".b1", in, h);
    weight(prefix + ".w2", h, o);
    bias(prefix + ".b2", h, o);
  };
  auto lstm = [&](const std::string& prefix, Index in) {
    weight(prefix + ".input_weight", in, 4 * h);
    weight(prefix + ".hidden_weight", h, 4 * h);
    bias(prefix + ".bias", h, 4 * h);
  };

  emb("question_embedding", cfg.num_questions);
  emb("subject_embedding", cfg.num_subjects);
  emb("option_embedding", data::kNumOptions);
  emb("correctness_embedding", 2);
  const Index step_in = 5 * d;
  const Index question_features = 3 * d;
  const Index out_width = cfg.head_width();
  switch (cfg.kind) {
    case ModelKind::Ncf:
      emb("student_embedding", cfg.num_students);
      ffn("head", 3 * d, out_width);
      break;
    case ModelKind::PoBiDkt:
      lstm("lstm_forward", step_in);
      lstm("lstm_backward", step_in);
      ffn("head", 2 * h + question_features, out_width);
      break;
    case ModelKind::BiGikt:
      weight("gcn.subject_self", d, d);
      weight("gcn.subject_from_question", d, d);
      weight("gcn.question_self", d, d);
      weight("gcn.question_from_subject", d, d);
      lstm("lstm_forward", step_in);
      lstm("lstm_backward", step_in);
      ffn("head", 2 * h + question_features, out_width);
      break;
    case ModelKind::Dkt:
      lstm("lstm", step_in);
      ffn("head", h + question_features, out_width);
      break;
    case ModelKind::Dkvmn:
      out.push_back({"memory.keys", cfg.memory_slots, d, ed, {}, false});
      out.push_back({"memory.values", cfg.memory_slots, h, 1.0 / std::sqrt(static_cast<double>(h)), {}, false});
      weight("memory.query", question_features, d);
      weight("memory.erase_weight", step_in, h);
      bias("memory.erase_bias", step_in, h);
      weight("memory.add_weight", step_in, h);
      bias("memory.add_bias", step_in, h);
      ffn("head", h + question_features, out_width);
      break;
    case ModelKind::Akt:
      weight("attention.query", question_features, h);
      weight("attention.key", question_features, h);
      weight("attention.value", 4 * d, h);
      out.push_back({"attention.decay", 1, cfg.heads, 0.0, 0.1, true});
      ffn("knowledge", h, h);
      ffn("head", h + question_features, out_width);
      break;
    case ModelKind::PairEmbedding:
      lstm("lstm_forward", step_in);
      lstm("lstm_backward", step_in);
      ffn("head", 2 * h, out_width);
      emb("pair_embedding", static_cast<Index>(cfg.num_questions) * data::kNumOptions);
      break;
  }
  return out;
}

void ParameterSet::add(std::string name, Matrix value, bool nonnegative) {
  if (contains(name)) throw ConfigError("duplicate parameter " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  nonnegative_.push_back(nonnegative);
}

std::size_t ParameterSet::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  throw LookupError("unknown parameter '" + std::string(name) + "'");
}

bool ParameterSet::contains(std::string_view name) const {
  for (const auto& n : names_)
    if (n == name) return true;
  return false;
}

std::size_t ParameterSet::total_size() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

ModelCheckpoint init_checkpoint(const ModelConfig& cfg, std::uint64_t seed) {
  ModelCheckpoint ck;
  ck.config = cfg;
  Rng rng(seed);
  for (const auto& spec : parameter_layout(cfg)) {
    Matrix m(spec.rows, spec.cols);
    if (spec.init_constant) {
      m.setConstant(*spec.init_constant);
    } else {
      std::uniform_real_distribution<double> u(-spec.init_bound, spec.init_bound);
      for (Index r = 0; r < m.rows(); ++r)
        for (Index c = 0; c < m.cols(); ++c) m(r, c) = u(rng);
    }
    ck.params.add(spec.name, std::move(m), spec.nonnegative);
  }
  return ck;
}

void zero_parameters(ModelCheckpoint& ck) {
  for (std::size_t i = 0; i < ck.params.size(); ++i) ck.params[i].setZero();
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'O', 'T', 'C', 'K', 'P', 'T', '1', '\n'};
constexpr const char* kLayoutDoc =
    "bytes [0,8): magic 'OTCKPT1\\n'; [8,16): header length N as unsigned 64-bit little-endian; "
    "[16,16+N): this JSON header; then payload_bytes of IEEE-754 float64 little-endian values, each "
    "parameter stored row-major at its byte offset relative to the payload start";

template <typename T>
T to_little_endian(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

void put_u64(std::string& out, std::uint64_t v) {
  v = to_little_endian(v);
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

void put_f64(std::string& out, double v) {
  auto bits = to_little_endian(std::bit_cast<std::uint64_t>(v));
  char buf[8];
  std::memcpy(buf, &bits, 8);
  out.append(buf, 8);
}

std::uint64_t get_u64(std::string_view in, std::size_t off) {
  std::uint64_t v;
  std::memcpy(&v, in.data() + off, 8);
  return to_little_endian(v);
}

nlohmann::json config_json(const ModelConfig& cfg) {
  nlohmann::json graph = nlohmann::json::array();
  for (const auto& [q, s] : cfg.question_subjects) graph.push_back({q, s});
  return {{"dim", cfg.dim},
          {"hidden", cfg.hidden},
          {"heads", cfg.heads},
          {"memory_slots", cfg.memory_slots},
          {"num_questions", cfg.num_questions},
          {"num_subjects", cfg.num_subjects},
          {"num_students", cfg.num_students},
          {"question_subjects", graph}};
}

}  // namespace

std::string serialize_checkpoint(const ModelCheckpoint& ck) {
  nlohmann::json params = nlohmann::json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const Matrix& m = ck.params[i];
    params.push_back({{"name", ck.params.name(i)}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::size_t>(m.size()) * 8;
  }
  const nlohmann::json header = {{"format", "optrace-checkpoint"},
                                 {"version", 1},
                                 {"kind", to_string(ck.config.kind)},
                                 {"task", to_string(ck.config.task)},
                                 {"config", config_json(ck.config)},
                                 {"parameters", params},
                                 {"payload_bytes", offset},
                                 {"byte_order", "little"},
                                 {"layout", kLayoutDoc}};
  const std::string hs = header.dump();
  std::string out(kMagic, 8);
  put_u64(out, hs.size());
  out += hs;
  out.reserve(out.size() + offset);
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const Matrix& m = ck.params[i];
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) put_f64(out, m(r, c));
  }
  return out;
}

ModelCheckpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw ParseError("not an optrace checkpoint");
  const std::uint64_t hlen = get_u64(bytes, 8);
  if (bytes.size() < 16 + hlen) throw ParseError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  if (header.value("version", 0) != 1) throw ParseError("unsupported checkpoint version");

  ModelCheckpoint ck;
  auto& cfg = ck.config;
  try {
    cfg.kind = parse_model_kind(header.at("kind").get<std::string>());
    cfg.task = parse_task(header.at("task").get<std::string>());
    const auto& cj = header.at("config");
    cfg.dim = cj.at("dim");
    cfg.hidden = cj.at("hidden");
    cfg.heads = cj.at("heads");
    cfg.memory_slots = cj.at("memory_slots");
    cfg.num_questions = cj.at("num_questions");
    cfg.num_subjects = cj.at("num_subjects");
    cfg.num_students = cj.at("num_students");
    for (const auto& e : cj.at("question_subjects")) cfg.question_subjects[e.at(0).get<int>()] = e.at(1).get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint config: ") + e.what());
  }

  const auto layout = parameter_layout(cfg);
  const auto& pj = header.at("parameters");
  if (pj.size() != layout.size()) throw ParseError("checkpoint parameter count does not match its config");
  const std::size_t payload = 16 + hlen;
  const auto payload_bytes = header.at("payload_bytes").get<std::size_t>();
  if (bytes.size() != payload + payload_bytes) throw ParseError("checkpoint payload size mismatch");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& spec = layout[i];
    const auto& e = pj[i];
    if (e.at("name").get<std::string>() != spec.name || e.at("rows").get<Index>() != spec.rows ||
        e.at("cols").get<Index>() != spec.cols) {
      throw ParseError("checkpoint parameter " + spec.name + " has an unexpected name or shape");
    }
    const auto off = e.at("offset").get<std::size_t>();
    if (off + static_cast<std::size_t>(spec.rows * spec.cols) * 8 > payload_bytes) throw ParseError("parameter out of range");
    Matrix m(spec.rows, spec.cols);
    std::size_t p = payload + off;
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) {
        m(r, c) = std::bit_cast<double>(get_u64(bytes, p));
        p += 8;
      }
    }
    ck.params.add(spec.name, std::move(m), spec.nonnegative);
  }
  return ck;
}

void save_checkpoint(const ModelCheckpoint& ck, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path.string());
  const std::string bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace ot::models
