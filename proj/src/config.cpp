#include "mematch/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace mematch {

TomlValue TomlValue::of(std::int64_t v) {
  TomlValue t;
  t.kind = Kind::integer;
  t.i = v;
  return t;
}

TomlValue TomlValue::of(double v) {
  TomlValue t;
  t.kind = Kind::real;
  t.d = v;
  return t;
}

TomlValue TomlValue::of(bool v) {
  TomlValue t;
  t.kind = Kind::boolean;
  t.b = v;
  return t;
}

TomlValue TomlValue::of(std::string v) {
  TomlValue t;
  t.kind = Kind::text;
  t.s = std::move(v);
  return t;
}

std::int64_t TomlValue::as_int(const std::string& where) const {
  if (kind != Kind::integer) throw ConfigError(concat(where, ": expected integer"));
  return i;
}

double TomlValue::as_real(const std::string& where) const {
  if (kind == Kind::real) return d;
  if (kind == Kind::integer) return static_cast<double>(i);
  throw ConfigError(concat(where, ": expected number"));
}

bool TomlValue::as_bool(const std::string& where) const {
  if (kind != Kind::boolean) throw ConfigError(concat(where, ": expected true/false"));
  return b;
}

const std::string& TomlValue::as_text(const std::string& where) const {
  if (kind != Kind::text) throw ConfigError(concat(where, ": expected quoted string"));
  return s;
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

// Strips a trailing comment that is not inside a quoted string.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

TomlValue parse_value(const std::string& raw, int line_no) {
  if (raw.size() >= 2 && raw.front() == '"' && raw.back() == '"') {
    return TomlValue::of(raw.substr(1, raw.size() - 2));
  }
  if (raw == "true") return TomlValue::of(true);
  if (raw == "false") return TomlValue::of(false);
  const bool looks_real = raw.find_first_of(".eE") != std::string::npos &&
                          raw.find_first_not_of("+-0123456789.eE") == std::string::npos;
  if (!looks_real) {
    std::int64_t iv = 0;
    auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), iv);
    if (ec == std::errc() && p == raw.data() + raw.size()) return TomlValue::of(iv);
  }
  try {
    std::size_t used = 0;
    const double dv = std::stod(raw, &used);
    if (used == raw.size()) return TomlValue::of(dv);
  } catch (const std::exception&) {
  }
  throw ConfigError(concat("line ", line_no, ": cannot parse value '", raw, "'"));
}

}  // namespace

TomlDoc parse_toml_text(const std::string& text) {
  TomlDoc doc;
  std::string section;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError(concat("line ", line_no, ": malformed section header '", line, "'"));
      }
      section = trim(line.substr(1, line.size() - 2));
      doc[section];
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(concat("line ", line_no, ": expected key = value, got '", line, "'"));
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string raw = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(concat("line ", line_no, ": empty key"));
    doc[section][key] = parse_value(raw, line_no);
  }
  return doc;
}

std::string serialize_toml(const TomlDoc& doc) {
  std::ostringstream out;
  bool first = true;
  for (const auto& [section, table] : doc) {
    if (!first) out << "\n";
    first = false;
    if (!section.empty()) out << "[" << section << "]\n";
    for (const auto& [key, v] : table) {
      out << key << " = ";
      switch (v.kind) {
        case TomlValue::Kind::integer: out << v.i; break;
        case TomlValue::Kind::real: {
          std::ostringstream num;
          num.precision(17);
          num << v.d;
          std::string repr = num.str();
          // keep reals distinguishable from integers on re-parse
          if (repr.find_first_of(".eEnif") == std::string::npos) repr += ".0";
          out << repr;
          break;
        }
        case TomlValue::Kind::boolean: out << (v.b ? "true" : "false"); break;
        case TomlValue::Kind::text: out << '"' << v.s << '"'; break;
      }
      out << "\n";
    }
  }
  return out.str();
}

TomlDoc read_toml_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(concat("cannot open config file: ", path));
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_toml_text(buf.str());
}

// --------------------------------------------------------------- run config

namespace {

const char* strategy_name(StrategyKind k) {
  switch (k) {
    case StrategyKind::uniform: return "uniform";
    case StrategyKind::mixed_k: return "mixed_k";
    case StrategyKind::mixed_ck: return "mixed_ck";
  }
  return "?";
}

StrategyKind strategy_from_name(const std::string& name) {
  if (name == "uniform") return StrategyKind::uniform;
  if (name == "mixed_k") return StrategyKind::mixed_k;
  if (name == "mixed_ck") return StrategyKind::mixed_ck;
  throw ConfigError(concat("strategy.kind: unknown value '", name,
                           "' (expected uniform|mixed_k|mixed_ck)"));
}

struct Reader {
  const TomlDoc& doc;

  const TomlValue* find(const std::string& section, const std::string& key) const {
    auto s = doc.find(section);
    if (s == doc.end()) return nullptr;
    auto k = s->second.find(key);
    return k == s->second.end() ? nullptr : &k->second;
  }

  void get(const std::string& sec, const std::string& key, int& out) const {
    if (const TomlValue* v = find(sec, key)) {
      out = static_cast<int>(v->as_int(sec + "." + key));
    }
  }
  void get(const std::string& sec, const std::string& key, std::uint64_t& out) const {
    if (const TomlValue* v = find(sec, key)) {
      out = static_cast<std::uint64_t>(v->as_int(sec + "." + key));
    }
  }
  void get(const std::string& sec, const std::string& key, double& out) const {
    if (const TomlValue* v = find(sec, key)) out = v->as_real(sec + "." + key);
  }
  void get(const std::string& sec, const std::string& key, bool& out) const {
    if (const TomlValue* v = find(sec, key)) out = v->as_bool(sec + "." + key);
  }
  void get(const std::string& sec, const std::string& key, std::string& out) const {
    if (const TomlValue* v = find(sec, key)) out = v->as_text(sec + "." + key);
  }
};

void require_positive(const char* field, long v) {
  if (v < 1) throw ConfigError(concat(field, ": must be >= 1, got ", v));
}

}  // namespace

void validate(const RunConfig& cfg) {
  require_positive("model.filters", cfg.filters);
  require_positive("model.d_m", cfg.d_m);
  require_positive("model.d_r", cfg.d_r);
  require_positive("model.d_w", cfg.d_w);
  if (cfg.memory_capacity < 0) {
    throw ConfigError(concat("model.memory_capacity: must be >= 0, got ", cfg.memory_capacity));
  }
  require_positive("train.steps", cfg.steps);
  require_positive("train.batch_episodes", cfg.batch_episodes);
  require_positive("train.queries", cfg.train_queries);
  require_positive("train.decay_every", cfg.decay_every);
  require_positive("train.checkpoint_every", cfg.checkpoint_every);
  if (!(cfg.lr > 0)) throw ConfigError(concat("train.lr: must be > 0, got ", cfg.lr));
  const StrategyConfig& st = cfg.strategy;
  require_positive("strategy.ways", st.ways);
  require_positive("strategy.shots", st.shots);
  if (st.kind != StrategyKind::uniform && st.shots_min > st.shots_max) {
    throw ConfigError(concat("strategy.shots_min/shots_max: empty range [", st.shots_min, ",",
                             st.shots_max, "]"));
  }
  if (st.kind == StrategyKind::mixed_ck && st.ways_min > st.ways_max) {
    throw ConfigError(concat("strategy.ways_min/ways_max: empty range [", st.ways_min, ",",
                             st.ways_max, "]"));
  }
  if (st.kind != StrategyKind::uniform) require_positive("strategy.shots_min", st.shots_min);
  if (st.kind == StrategyKind::mixed_ck && st.ways_min < 2) {
    throw ConfigError(concat("strategy.ways_min: must be >= 2, got ", st.ways_min));
  }
  require_positive("eval.episodes", cfg.eval_episodes);
  require_positive("eval.queries", cfg.eval_queries);
  require_positive("eval.ways", cfg.eval_ways);
  require_positive("eval.shots", cfg.eval_shots);
  require_positive("eval.threads", cfg.threads);
  if (cfg.dataset_root.empty()) {
    require_positive("dataset.synthetic_train_classes", cfg.synthetic_train_classes);
    require_positive("dataset.synthetic_eval_classes", cfg.synthetic_eval_classes);
    require_positive("dataset.synthetic_per_class", cfg.synthetic_per_class);
    require_positive("dataset.synthetic_size", cfg.synthetic_size);
    require_positive("dataset.synthetic_block", cfg.synthetic_block);
    if (cfg.synthetic_size % cfg.synthetic_block != 0) {
      throw ConfigError(concat("dataset.synthetic_block: ", cfg.synthetic_block,
                               " does not divide synthetic_size ", cfg.synthetic_size));
    }
  }
}

RunConfig parse_run_config(const TomlDoc& doc) {
  for (const auto& [section, table] : doc) {
    static const char* known[] = {"dataset", "model", "train", "strategy", "eval"};
    bool ok = false;
    for (const char* k : known) ok = ok || section == k;
    if (!ok) throw ConfigError(concat("unknown config section [", section, "]"));
  }
  RunConfig cfg;
  Reader r{doc};
  r.get("dataset", "root", cfg.dataset_root);
  r.get("dataset", "train_split", cfg.train_split);
  r.get("dataset", "eval_split", cfg.eval_split);
  r.get("dataset", "rotations", cfg.rotations);
  r.get("dataset", "eval_rotations", cfg.eval_rotations);
  r.get("dataset", "synthetic_train_classes", cfg.synthetic_train_classes);
  r.get("dataset", "synthetic_eval_classes", cfg.synthetic_eval_classes);
  r.get("dataset", "synthetic_per_class", cfg.synthetic_per_class);
  r.get("dataset", "synthetic_noise", cfg.synthetic_noise);
  r.get("dataset", "synthetic_size", cfg.synthetic_size);
  r.get("dataset", "synthetic_block", cfg.synthetic_block);
  r.get("model", "filters", cfg.filters);
  r.get("model", "d_m", cfg.d_m);
  r.get("model", "d_r", cfg.d_r);
  r.get("model", "d_w", cfg.d_w);
  r.get("model", "memory_capacity", cfg.memory_capacity);
  r.get("train", "seed", cfg.seed);
  r.get("train", "steps", cfg.steps);
  r.get("train", "batch_episodes", cfg.batch_episodes);
  r.get("train", "queries", cfg.train_queries);
  r.get("train", "lr", cfg.lr);
  r.get("train", "decay_every", cfg.decay_every);
  r.get("train", "decay", cfg.decay);
  r.get("train", "checkpoint_every", cfg.checkpoint_every);
  r.get("train", "checkpoint_path", cfg.checkpoint_path);
  r.get("train", "metrics_path", cfg.metrics_path);
  r.get("train", "average_matches", cfg.average_matches);
  r.get("train", "per_class_sum", cfg.per_class_sum);
  if (const TomlValue* v = r.find("strategy", "kind")) {
    cfg.strategy.kind = strategy_from_name(v->as_text("strategy.kind"));
  }
  r.get("strategy", "ways", cfg.strategy.ways);
  r.get("strategy", "shots", cfg.strategy.shots);
  r.get("strategy", "ways_min", cfg.strategy.ways_min);
  r.get("strategy", "ways_max", cfg.strategy.ways_max);
  r.get("strategy", "shots_min", cfg.strategy.shots_min);
  r.get("strategy", "shots_max", cfg.strategy.shots_max);
  r.get("eval", "episodes", cfg.eval_episodes);
  r.get("eval", "queries", cfg.eval_queries);
  r.get("eval", "ways", cfg.eval_ways);
  r.get("eval", "shots", cfg.eval_shots);
  r.get("eval", "threads", cfg.threads);
  validate(cfg);
  return cfg;
}

TomlDoc to_toml(const RunConfig& cfg) {
  TomlDoc doc;
  TomlTable& ds = doc["dataset"];
  ds["root"] = TomlValue::of(cfg.dataset_root);
  ds["train_split"] = TomlValue::of(cfg.train_split);
  ds["eval_split"] = TomlValue::of(cfg.eval_split);
  ds["rotations"] = TomlValue::of(cfg.rotations);
  ds["eval_rotations"] = TomlValue::of(cfg.eval_rotations);
  ds["synthetic_train_classes"] = TomlValue::of(std::int64_t{cfg.synthetic_train_classes});
  ds["synthetic_eval_classes"] = TomlValue::of(std::int64_t{cfg.synthetic_eval_classes});
  ds["synthetic_per_class"] = TomlValue::of(std::int64_t{cfg.synthetic_per_class});
  ds["synthetic_noise"] = TomlValue::of(cfg.synthetic_noise);
  ds["synthetic_size"] = TomlValue::of(std::int64_t{cfg.synthetic_size});
  ds["synthetic_block"] = TomlValue::of(std::int64_t{cfg.synthetic_block});
  TomlTable& mo = doc["model"];
  mo["filters"] = TomlValue::of(std::int64_t{cfg.filters});
  mo["d_m"] = TomlValue::of(std::int64_t{cfg.d_m});
  mo["d_r"] = TomlValue::of(std::int64_t{cfg.d_r});
  mo["d_w"] = TomlValue::of(std::int64_t{cfg.d_w});
  mo["memory_capacity"] = TomlValue::of(std::int64_t{cfg.memory_capacity});
  TomlTable& tr = doc["train"];
  tr["seed"] = TomlValue::of(static_cast<std::int64_t>(cfg.seed));
  tr["steps"] = TomlValue::of(std::int64_t{cfg.steps});
  tr["batch_episodes"] = TomlValue::of(std::int64_t{cfg.batch_episodes});
  tr["queries"] = TomlValue::of(std::int64_t{cfg.train_queries});
  tr["lr"] = TomlValue::of(cfg.lr);
  tr["decay_every"] = TomlValue::of(std::int64_t{cfg.decay_every});
  tr["decay"] = TomlValue::of(cfg.decay);
  tr["checkpoint_every"] = TomlValue::of(std::int64_t{cfg.checkpoint_every});
  tr["checkpoint_path"] = TomlValue::of(cfg.checkpoint_path);
  tr["metrics_path"] = TomlValue::of(cfg.metrics_path);
  tr["average_matches"] = TomlValue::of(cfg.average_matches);
  tr["per_class_sum"] = TomlValue::of(cfg.per_class_sum);
  TomlTable& st = doc["strategy"];
  st["kind"] = TomlValue::of(std::string(strategy_name(cfg.strategy.kind)));
  st["ways"] = TomlValue::of(std::int64_t{cfg.strategy.ways});
  st["shots"] = TomlValue::of(std::int64_t{cfg.strategy.shots});
  st["ways_min"] = TomlValue::of(std::int64_t{cfg.strategy.ways_min});
  st["ways_max"] = TomlValue::of(std::int64_t{cfg.strategy.ways_max});
  st["shots_min"] = TomlValue::of(std::int64_t{cfg.strategy.shots_min});
  st["shots_max"] = TomlValue::of(std::int64_t{cfg.strategy.shots_max});
  TomlTable& ev = doc["eval"];
  ev["episodes"] = TomlValue::of(std::int64_t{cfg.eval_episodes});
  ev["queries"] = TomlValue::of(std::int64_t{cfg.eval_queries});
  ev["ways"] = TomlValue::of(std::int64_t{cfg.eval_ways});
  ev["shots"] = TomlValue::of(std::int64_t{cfg.eval_shots});
  ev["threads"] = TomlValue::of(std::int64_t{cfg.threads});
  return doc;
}

RunConfig load_config_file(const std::string& path) {
  return parse_run_config(read_toml_file(path));
}

void save_config_file(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError(concat("cannot write config file: ", path));
  out << serialize_toml(to_toml(cfg));
}

}  // namespace mematch
