#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "mematch/error.hpp"

namespace mematch {

// ------------------------- minimal structured-text (TOML-subset) documents

// Supported grammar: `[section]` headers, `key = value` lines with integer,
// float, boolean, or double-quoted string values, and `#` comments.
struct TomlValue {
  enum class Kind { integer, real, boolean, text };
  Kind kind = Kind::integer;
  std::int64_t i = 0;
  double d = 0.0;
  bool b = false;
  std::string s;

  static TomlValue of(std::int64_t v);
  static TomlValue of(double v);
  static TomlValue of(bool v);
  static TomlValue of(std::string v);

  std::int64_t as_int(const std::string& where) const;
  double as_real(const std::string& where) const;  // accepts integers
  bool as_bool(const std::string& where) const;
  const std::string& as_text(const std::string& where) const;
};

using TomlTable = std::map<std::string, TomlValue>;
using TomlDoc = std::map<std::string, TomlTable>;

TomlDoc parse_toml_text(const std::string& text);
std::string serialize_toml(const TomlDoc& doc);
TomlDoc read_toml_file(const std::string& path);

// ------------------------------------------------------------- run config

enum class StrategyKind { uniform, mixed_k, mixed_ck };

struct StrategyConfig {
  StrategyKind kind = StrategyKind::uniform;
  int ways = 5;
  int shots = 1;
  int ways_min = 2;
  int ways_max = 5;
  int shots_min = 1;
  int shots_max = 5;

  bool operator==(const StrategyConfig&) const = default;
};

struct RunConfig {
  // [dataset] — empty root selects the built-in synthetic glyph data
  std::string dataset_root;
  std::string train_split = "train";
  std::string eval_split = "test";
  bool rotations = true;       // rotation-augmented classes for training
  bool eval_rotations = true;  // same convention at evaluation time
  int synthetic_train_classes = 32;
  int synthetic_eval_classes = 8;
  int synthetic_per_class = 24;
  double synthetic_noise = 0.15;
  int synthetic_size = 8;
  int synthetic_block = 1;  // coarse-mask cell edge; must divide synthetic_size

  // [model]
  int filters = 64;
  int d_m = 512;
  int d_r = 512;
  int d_w = 64;
  int memory_capacity = 0;  // 0 = one slot per support sample

  // [train]
  std::uint64_t seed = 1;
  int steps = 30000;
  int batch_episodes = 16;
  int train_queries = 5;
  double lr = 1e-3;
  int decay_every = 20000;
  double decay = 0.5;
  int checkpoint_every = 1000;
  std::string checkpoint_path = "model.ckpt";
  std::string metrics_path = "metrics.csv";
  bool average_matches = false;  // divide each query's loss by its match count
  bool per_class_sum = false;    // argmax over per-class summed logits

  // [strategy]
  StrategyConfig strategy;

  // [eval]
  int eval_episodes = 500;
  int eval_queries = 15;
  int eval_ways = 5;
  int eval_shots = 1;
  int threads = 1;

  bool operator==(const RunConfig&) const = default;
};

// Throws ConfigError naming the offending field.
void validate(const RunConfig& cfg);

RunConfig parse_run_config(const TomlDoc& doc);
TomlDoc to_toml(const RunConfig& cfg);
RunConfig load_config_file(const std::string& path);
void save_config_file(const RunConfig& cfg, const std::string& path);

}  // namespace mematch
