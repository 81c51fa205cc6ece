#include "cotvla/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <limits>
#include <sstream>

#include "cotvla/error.hpp"

namespace cotvla {

const std::vector<ConfigKey>& config_schema() {
  using K = ValueKind;
  static const std::vector<ConfigKey> schema = {
      {"config", "", "key = value configuration file", K::Text},
      {"seed", "0", "seed for every random choice", K::Int},
      {"out", "out", "output directory (or file for plot)", K::Text},
      {"workers", "4", "worker threads for annotation", K::Int},
      {"lambda_r", "0.3", "weight of the reasoning loss", K::Real},
      {"freeze", "2", "number of lower transformer blocks kept frozen", K::Int},
      {"bins", "32", "action bins per dimension", K::Int},
      {"reasoning_budget", "244", "maximum reasoning tokens per sample", K::Int},
      {"lr", "0.0002", "Adam learning rate", K::Real},
      {"batch", "32", "mini-batch size", K::Int},
      {"epochs", "1", "passes over the training set", K::Int},
      {"save_steps", "500", "checkpoint interval in optimizer steps", K::Int},
      {"shuffle_buffer", "0", "streaming shuffle buffer (0 shuffles the whole dataset)", K::Int},
      {"eval_steps", "0", "evaluation interval in optimizer steps (0: only at the end)", K::Int},
      {"early_stop_patience", "0", "evaluations without action-accuracy gain before stopping (0: off)", K::Int},
      {"k", "5", "top-k layer-head scores fused per patch", K::Int},
      {"method", "max", "top-k reduction: max or mean", K::Text},
      {"d_model", "64", "model width", K::Int},
      {"n_layers", "4", "transformer blocks", K::Int},
      {"n_heads", "4", "attention heads per block", K::Int},
      {"d_ff", "128", "feed-forward width", K::Int},
      {"max_seq_len", "640", "longest sequence the model accepts", K::Int},
      {"grid", "16", "image grid size P", K::Int},
      {"views", "1", "camera views per observation", K::Int},
      {"max_steps", "40", "step budget per episode", K::Int},
      {"families", "move_near,pick", "comma-separated task families", K::Text},
      {"n", "500", "episodes to generate", K::Int},
      {"data", "", "episode JSON-Lines file", K::Text},
      {"traces", "", "directory of per-episode trace files", K::Text},
      {"eval_data", "", "held-out episode file for periodic evaluation", K::Text},
      {"skip_unparsed", "false", "drop episodes whose traces failed to parse", K::Bool},
      {"ckpt", "", "checkpoint file", K::Text},
      {"vocab", "", "vocabulary JSON (default: vocab.json next to the checkpoint)", K::Text},
      {"episode", "e0", "episode id for viz-attn", K::Text},
      {"step", "0", "step index for viz-attn", K::Int},
      {"n_episodes", "100", "rollouts per task family", K::Int},
      {"teacher", "rule", "annotation backend: rule or remote", K::Text},
      {"policy", "model", "rollout policy: model, expert, random or zero", K::Text},
      {"metrics", "", "metrics.jsonl to plot", K::Text},
  };
  return schema;
}

std::string flag_for(std::string_view key) {
  std::string f = "--" + std::string(key);
  std::replace(f.begin(), f.end(), '_', '-');
  return f;
}

namespace {

std::string normalize_key(std::string_view key) {
  std::string k(key);
  std::replace(k.begin(), k.end(), '-', '_');
  return k;
}

const ConfigKey* find_key(std::string_view key) {
  const std::string k = normalize_key(key);
  for (const ConfigKey& c : config_schema()) {
    if (c.key == k) return &c;
  }
  return nullptr;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool parse_int(const std::string& v, long long& out) {
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  return ec == std::errc() && p == end;
}

bool parse_real(const std::string& v, double& out) {
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  return ec == std::errc() && p == end;
}

bool parse_bool(const std::string& v, bool& out) {
  if (v == "true" || v == "1" || v == "yes") {
    out = true;
    return true;
  }
  if (v == "false" || v == "0" || v == "no") {
    out = false;
    return true;
  }
  return false;
}

std::string kind_name(ValueKind k) {
  switch (k) {
    case ValueKind::Int: return "an integer";
    case ValueKind::Real: return "a number";
    case ValueKind::Bool: return "true or false";
    case ValueKind::Text: return "text";
  }
  return "?";
}

}  // namespace

RunConfig::RunConfig() {
  for (const ConfigKey& c : config_schema()) {
    values_[c.key] = c.default_value;
    sources_[c.key] = "default";
  }
}

void RunConfig::set(std::string_view key, const std::string& value, const std::string& source) {
  const ConfigKey* c = find_key(key);
  if (c == nullptr) throw Error("config", "unknown key '" + std::string(key) + "'");
  long long i = 0;
  double r = 0.0;
  bool b = false;
  const bool ok = c->kind == ValueKind::Text || (c->kind == ValueKind::Int && parse_int(value, i)) ||
                  (c->kind == ValueKind::Real && parse_real(value, r)) || (c->kind == ValueKind::Bool && parse_bool(value, b));
  if (!ok) throw Error("config", "key '" + c->key + "' expects " + kind_name(c->kind) + ", got '" + value + "'");
  values_[c->key] = value;
  sources_[c->key] = source;
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("config", "cannot open config file " + path.string());
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = path.string() + " line " + std::to_string(n);
    if (eq == std::string::npos) throw Error("config", where + ": expected key = value");
    const std::string key = trim(body.substr(0, eq));
    std::string value = trim(body.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (normalize_key(key) == "config") throw Error("config", where + ": config files cannot include other files");
    try {
      set(key, value, "file");
    } catch (const Error& e) {
      throw Error("config", where + ": " + e.what());
    }
  }
}

const std::string& RunConfig::text(std::string_view key) const {
  auto it = values_.find(normalize_key(key));
  if (it == values_.end()) throw Error("config", "unknown key '" + std::string(key) + "'");
  return it->second;
}

long long RunConfig::integer(std::string_view key) const {
  long long v = 0;
  if (!parse_int(text(key), v)) throw Error("config", "key '" + std::string(key) + "' is not an integer");
  return v;
}

std::uint64_t RunConfig::u64(std::string_view key) const {
  const long long v = integer(key);
  if (v < 0) throw Error("config", "key '" + std::string(key) + "' must be >= 0");
  return static_cast<std::uint64_t>(v);
}

double RunConfig::real(std::string_view key) const {
  double v = 0.0;
  if (!parse_real(text(key), v)) throw Error("config", "key '" + std::string(key) + "' is not a number");
  return v;
}

bool RunConfig::flag(std::string_view key) const {
  bool v = false;
  if (!parse_bool(text(key), v)) throw Error("config", "key '" + std::string(key) + "' is not true/false");
  return v;
}

const std::string& RunConfig::source(std::string_view key) const {
  auto it = sources_.find(normalize_key(key));
  if (it == sources_.end()) throw Error("config", "unknown key '" + std::string(key) + "'");
  return it->second;
}

std::string RunConfig::describe() const {
  std::ostringstream out;
  for (const ConfigKey& c : config_schema()) {
    out << c.key << " = " << values_.at(c.key) << "  # " << sources_.at(c.key) << "\n";
  }
  return out.str();
}

namespace {

int as_int(long long v, std::string_view key) {
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    throw Error("config", "key '" + std::string(key) + "' is out of range");
  }
  return static_cast<int>(v);
}

}  // namespace

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.lambda_r = real("lambda_r");
  t.learning_rate = real("lr");
  t.batch_size = as_int(integer("batch"), "batch");
  t.epochs = as_int(integer("epochs"), "epochs");
  t.freeze_layers = as_int(integer("freeze"), "freeze");
  t.seed = u64("seed");
  t.save_steps = as_int(integer("save_steps"), "save_steps");
  t.shuffle_buffer = as_int(integer("shuffle_buffer"), "shuffle_buffer");
  t.reasoning_budget = as_int(integer("reasoning_budget"), "reasoning_budget");
  t.eval_steps = as_int(integer("eval_steps"), "eval_steps");
  t.early_stop_patience = as_int(integer("early_stop_patience"), "early_stop_patience");
  t.out_dir = text("out");
  return t;
}

ModelConfig RunConfig::model_config(int vocab_size) const {
  ModelConfig m;
  m.d_model = as_int(integer("d_model"), "d_model");
  m.n_layers = as_int(integer("n_layers"), "n_layers");
  m.n_heads = as_int(integer("n_heads"), "n_heads");
  m.d_ff = as_int(integer("d_ff"), "d_ff");
  m.max_seq_len = as_int(integer("max_seq_len"), "max_seq_len");
  m.grid = as_int(integer("grid"), "grid");
  m.views = as_int(integer("views"), "views");
  m.vocab_size = vocab_size;
  m.seed = u64("seed");
  m.validate();
  return m;
}

}  // namespace cotvla
