#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gridlearn/acopf.hpp"
#include "gridlearn/autodiff.hpp"
#include "gridlearn/grid.hpp"
#include "gridlearn/scuc.hpp"

namespace gridlearn::model {

using ad::Shape;
using ad::Tensor;

enum class Task { Opf, Uc };
const char* task_name(Task t);

enum class NodeType : std::size_t { Bus, Gen, Load, Shunt };
inline constexpr std::size_t kNodeTypes = 4;
const char* node_type_name(NodeType t);

enum class Group : std::size_t { TaskEncoders, SharedProjection, SpatialEncoder, OpfDecoder, UcDecoder, Temporal };
inline constexpr std::size_t kGroups = 6;
const char* group_name(Group g);
std::optional<Group> parse_group(std::string_view name);

/// Groups that make up the shared encoder (everything upstream of the heads).
bool is_encoder_group(Group g);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ParamErrorKind { Parse, Version, Shape, Missing, Duplicate };

class ParamError : public std::runtime_error {
 public:
  ParamError(ParamErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ParamErrorKind kind() const noexcept { return kind_; }

 private:
  ParamErrorKind kind_;
};

struct ModelConfig {
  std::size_t hidden_dim = 64;
  std::size_t layers = 4;
  std::size_t heads = 8;
  /// Width of the raw UC time token [h | demand | time embedding].
  std::size_t temporal_dim = 128;
  std::size_t temporal_layers = 2;
  std::size_t temporal_heads = 4;
  std::size_t horizon = 36;
  double dropout = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t time_embedding_dim() const { return temporal_dim - hidden_dim - 1; }
  bool operator==(const ModelConfig&) const = default;
};

struct Param {
  std::string name;
  Group group;
  Tensor value;
};

class ParamStore {
 public:
  ParamStore() = default;
  explicit ParamStore(ModelConfig config) : config_(config) {}

  const ModelConfig& config() const noexcept { return config_; }
  void add(std::string name, Group group, Tensor value);
  const std::vector<Param>& params() const noexcept { return params_; }
  const Param* find(std::string_view name) const;
  const Tensor& value(std::string_view name) const;
  /// Replaces a value; the shape must not change.
  void set(std::string_view name, Tensor value);

  bool frozen(Group g) const { return frozen_[static_cast<std::size_t>(g)]; }
  void set_frozen(Group g, bool f) { frozen_[static_cast<std::size_t>(g)] = f; }
  void freeze_encoder(bool f = true);
  bool encoder_frozen() const;
  bool trainable(const Param& p) const { return !frozen(p.group); }

  /// Total number of scalars.
  std::size_t count() const;
  std::size_t count(Group g) const;

 private:
  ModelConfig config_;
  std::vector<Param> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::array<bool, kGroups> frozen_{};
};

/// Closed-form number of scalars init_params allocates for a config.
std::size_t expected_param_count(const ModelConfig& config);

/// Glorot-uniform weights, zero biases, unit layer-norm gains.
ParamStore init_params(const ModelConfig& config, std::uint64_t seed);
ParamStore init_params(const grid::GridCase& case_template, const ModelConfig& config, std::uint64_t seed);

bool identical(const ParamStore& a, const ParamStore& b);
std::uint64_t param_hash(const ParamStore& p);

// Feature tables. Columns are passed through sign(x)·log1p(|x|) before the
// encoders see them.
const std::vector<std::string>& bus_feature_names();
const std::vector<std::string>& gen_feature_names(Task task);
const std::vector<std::string>& load_feature_names();
const std::vector<std::string>& shunt_feature_names();

struct FeatureBlock {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // raw (untransformed) values, row-major
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

struct NodeFeatures {
  Task task = Task::Opf;
  std::array<FeatureBlock, kNodeTypes> blocks;
  const FeatureBlock& of(NodeType t) const { return blocks[static_cast<std::size_t>(t)]; }
};

NodeFeatures build_features(const grid::GridCase& c, Task task);
void validate_features(const grid::GridCase& c, const NodeFeatures& f);

/// Global node numbering: buses, then generators, loads, shunts.
struct NodeLayout {
  std::array<std::size_t, kNodeTypes> offset{};
  std::array<std::size_t, kNodeTypes> count{};
  std::size_t total = 0;
};
NodeLayout node_layout(const grid::GridCase& c);

enum class Relation : std::size_t { Line, Transformer, GenToBus, BusToGen, LoadToBus, BusToLoad, ShuntToBus, BusToShunt };
inline constexpr std::size_t kRelations = 8;
const char* relation_name(Relation r);

struct EdgeList {
  std::vector<std::size_t> src, dst;  // global node indices
};
std::array<EdgeList, kRelations> build_edges(const grid::GridCase& c);

/// Binds store entries to tape leaves. Trainable (unfrozen) parameters become
/// named inputs so backward() returns their gradients; the rest are constants.
class Binder {
 public:
  enum class Track { None, Trainable, All };
  Binder(ad::Tape& tape, const ParamStore& store, Track track = Track::Trainable);

  ad::Var operator()(const std::string& name);
  /// Routes a parameter through an existing tape value (same shape).
  void bind(const std::string& name, ad::Var v);
  ad::Tape& tape() noexcept { return tape_; }
  const ParamStore& store() const noexcept { return store_; }
  const ModelConfig& config() const noexcept { return store_.config(); }

  /// Training mode dropout keyed by (seed, site, step). Off by default.
  void enable_dropout(std::uint64_t seed, std::uint64_t step);
  ad::Var dropout(ad::Var x, std::uint64_t site);

 private:
  ad::Tape& tape_;
  const ParamStore& store_;
  Track track_;
  std::map<std::string, ad::Var> bound_;
  bool dropout_on_ = false;
  std::uint64_t dropout_seed_ = 0, dropout_step_ = 0;
};

/// Node embeddings, total-nodes x hidden_dim.
ad::Var encode(Binder& b, const grid::GridCase& c, const NodeFeatures& f);

acopf::PointVars decode_opf(Binder& b, const grid::GridCase& c, ad::Var h);

struct UcVars {
  ad::Var u;  // T x G
  ad::Var p;  // T x G, per-unit
};
UcVars decode_uc(Binder& b, const grid::GridCase& c, ad::Var h, const grid::DemandSeries& demand);

/// lo + (hi - lo)·sigmoid(x), evaluated so the result never leaves [lo, hi].
ad::Var squash(ad::Tape& t, ad::Var logits, const Tensor& lo, const Tensor& hi);

// Evaluation-mode conveniences.
acopf::OperatingPoint predict_opf(const grid::GridCase& c, const ParamStore& params);
scuc::Schedule predict_uc(const grid::GridCase& c, const grid::DemandSeries& demand, const ParamStore& params);
Tensor embed(const grid::GridCase& c, Task task, const ParamStore& params);

acopf::OperatingPoint to_point(const acopf::PointVars& x);
scuc::Schedule to_schedule(const UcVars& x);

/// Versioned JSON checkpoint. `provenance` is stored verbatim as an object.
std::string serialize_params(const ParamStore& p, std::string_view provenance_json = "");
/// Throws ParamError. When `expected` is given, every parameter must match
/// the shapes init_params would produce for it.
ParamStore parse_params(std::string_view text, const std::optional<ModelConfig>& expected = std::nullopt);
void save_params(const ParamStore& p, const std::filesystem::path& path, std::string_view provenance_json = "");
ParamStore load_params(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = std::nullopt);

inline constexpr int kCheckpointVersion = 1;

}  // namespace gridlearn::model
