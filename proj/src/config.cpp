#include "winlin/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "winlin/kv.hpp"

namespace winlin {

namespace {

// Seed keys fall back to WINLIN_SEED when neither the file nor the command
// line sets them; track assignments per parse.
thread_local bool g_train_seed_set = false;
thread_local bool g_data_seed_set = false;
thread_local bool g_bench_seed_set = false;

std::string format_bool(bool b) { return b ? "true" : "false"; }

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  if (apply_model_config_key(model, key, value)) return;

  if (key == "train.base_lr")
    train.base_lr = parse_double(value, key);
  else if (key == "train.min_lr")
    train.min_lr = parse_double(value, key);
  else if (key == "train.epochs")
    train.epochs = parse_int(value, key);
  else if (key == "train.batch_size")
    train.batch_size = parse_int(value, key);
  else if (key == "train.weight_decay")
    train.weight_decay = parse_double(value, key);
  else if (key == "train.beta1")
    train.beta1 = parse_double(value, key);
  else if (key == "train.beta2")
    train.beta2 = parse_double(value, key);
  else if (key == "train.adam_eps")
    train.adam_eps = parse_double(value, key);
  else if (key == "train.seed") {
    train.seed = static_cast<std::uint64_t>(parse_int(value, key));
    g_train_seed_set = true;
  } else if (key == "train.crop_size")
    train.crop_size = parse_int(value, key);
  else if (key == "train.eval_every")
    train.eval_every = parse_int(value, key);
  else if (key == "train.flip_prob")
    train.flip_prob = parse_double(value, key);
  else if (key == "train.grad_clip")
    train.grad_clip = parse_double(value, key);
  else if (key == "train.target_iou")
    train.target_train_iou = parse_double(value, key);

  else if (key == "data.root")
    data_root = value;
  else if (key == "data.train_count")
    data_train_count = parse_int(value, key);
  else if (key == "data.val_count")
    data_val_count = parse_int(value, key);
  else if (key == "data.test_count")
    data_test_count = parse_int(value, key);
  else if (key == "data.size")
    data_size = parse_int(value, key);
  else if (key == "data.seed") {
    data_seed = static_cast<std::uint64_t>(parse_int(value, key));
    g_data_seed_set = true;
  } else if (key == "data.min_buildings")
    synth.min_buildings = parse_int(value, key);
  else if (key == "data.max_buildings")
    synth.max_buildings = parse_int(value, key);
  else if (key == "data.min_fraction")
    synth.min_fraction = parse_double(value, key);
  else if (key == "data.max_fraction")
    synth.max_fraction = parse_double(value, key);

  else if (key == "eval.checkpoint")
    eval_checkpoint = value;
  else if (key == "eval.split")
    eval_split = value;
  else if (key == "eval.tta")
    eval_tta = parse_bool(value, key);
  else if (key == "eval.threshold")
    eval_threshold = parse_double(value, key);

  else if (key == "bench.dims") {
    bench.height = parse_int(value, key);
    bench.width = bench.height;
  } else if (key == "bench.dim")
    bench.dim = parse_int(value, key);
  else if (key == "bench.heads")
    bench.heads = parse_int(value, key);
  else if (key == "bench.windows") {
    bench.windows = parse_int_list(value, key);
    if (bench.windows.empty()) throw ConfigError("bench.windows: list must not be empty");
  } else if (key == "bench.repeats")
    bench.repeats = static_cast<int>(parse_int(value, key));
  else if (key == "bench.budget_mb")
    bench.budget_bytes = static_cast<std::size_t>(parse_int(value, key)) << 20;
  else if (key == "bench.seed") {
    bench.seed = static_cast<std::uint64_t>(parse_int(value, key));
    g_bench_seed_set = true;
  } else
    throw ConfigError("unknown config key '" + key + "'");
}

std::string RunConfig::echo() const {
  std::ostringstream os;
  for (const auto& [k, v] : model_config_kv(model)) os << k << '=' << v << '\n';
  os << "train.base_lr=" << format_double(train.base_lr) << '\n'
     << "train.min_lr=" << format_double(train.min_lr) << '\n'
     << "train.epochs=" << train.epochs << '\n'
     << "train.batch_size=" << train.batch_size << '\n'
     << "train.weight_decay=" << format_double(train.weight_decay) << '\n'
     << "train.beta1=" << format_double(train.beta1) << '\n'
     << "train.beta2=" << format_double(train.beta2) << '\n'
     << "train.adam_eps=" << format_double(train.adam_eps) << '\n'
     << "train.seed=" << train.seed << '\n'
     << "train.crop_size=" << train.crop_size << '\n'
     << "train.eval_every=" << train.eval_every << '\n'
     << "train.flip_prob=" << format_double(train.flip_prob) << '\n'
     << "train.grad_clip=" << format_double(train.grad_clip) << '\n'
     << "train.target_iou=" << format_double(train.target_train_iou) << '\n'
     << "data.root=" << data_root << '\n'
     << "data.train_count=" << data_train_count << '\n'
     << "data.val_count=" << data_val_count << '\n'
     << "data.test_count=" << data_test_count << '\n'
     << "data.size=" << data_size << '\n'
     << "data.seed=" << data_seed << '\n'
     << "data.min_buildings=" << synth.min_buildings << '\n'
     << "data.max_buildings=" << synth.max_buildings << '\n'
     << "data.min_fraction=" << format_double(synth.min_fraction) << '\n'
     << "data.max_fraction=" << format_double(synth.max_fraction) << '\n'
     << "eval.checkpoint=" << eval_checkpoint << '\n'
     << "eval.split=" << eval_split << '\n'
     << "eval.tta=" << format_bool(eval_tta) << '\n'
     << "eval.threshold=" << format_double(eval_threshold) << '\n'
     << "bench.dims=" << bench.height << '\n'
     << "bench.dim=" << bench.dim << '\n'
     << "bench.heads=" << bench.heads << '\n'
     << "bench.windows=" << format_int_list(bench.windows.data(), bench.windows.size()) << '\n'
     << "bench.repeats=" << bench.repeats << '\n'
     << "bench.budget_mb=" << (bench.budget_bytes >> 20) << '\n'
     << "bench.seed=" << bench.seed << '\n';
  return os.str();
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data_size < 1) throw ConfigError("data.size must be >= 1");
  if (data_train_count < 0 || data_val_count < 0 || data_test_count < 0)
    throw ConfigError("data split counts must be >= 0");
  if (synth.min_buildings < 1 || synth.max_buildings < synth.min_buildings)
    throw ConfigError("data building counts must satisfy 1 <= min <= max");
  if (!(synth.min_fraction >= 0.0 && synth.min_fraction < synth.max_fraction &&
        synth.max_fraction <= 1.0))
    throw ConfigError("data fractions must satisfy 0 <= min < max <= 1");
  if (eval_threshold <= 0.0 || eval_threshold >= 1.0)
    throw ConfigError("eval.threshold must lie in (0,1)");
  if (bench.dim % bench.heads != 0)
    throw ConfigError("bench.dim must divide by bench.heads");
  if (bench.repeats < 3) throw ConfigError("bench.repeats must be >= 3");
}

RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
  g_train_seed_set = g_data_seed_set = g_bench_seed_set = false;
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      // trim
      const auto begin = line.find_first_not_of(" \t\r");
      if (begin == std::string::npos) continue;
      const auto end = line.find_last_not_of(" \t\r");
      line = line.substr(begin, end - begin + 1);
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key=value, got '" +
                          line + "'");
      try {
        cfg.set(line.substr(0, eq), line.substr(eq + 1));
      } catch (const ConfigError& e) {
        throw ConfigError(path + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
  }
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("override '" + kv + "' is not of the form key=value");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (const char* env_seed = std::getenv("WINLIN_SEED")) {
    const auto seed = static_cast<std::uint64_t>(parse_int(env_seed, "WINLIN_SEED"));
    if (!g_train_seed_set) cfg.train.seed = seed;
    if (!g_data_seed_set) cfg.data_seed = seed;
    if (!g_bench_seed_set) cfg.bench.seed = seed;
  }
  cfg.validate();
  return cfg;
}

void echo_config(const RunConfig& cfg, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream out(fs::path(dir) / "config.effective.txt");
  if (!out) throw IoError("cannot write effective config under " + dir);
  out << cfg.echo();
}

}  // namespace winlin
