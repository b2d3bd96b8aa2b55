#pragma once

#include <string>
#include <vector>

#include "winlin/bench.hpp"
#include "winlin/data.hpp"
#include "winlin/model.hpp"
#include "winlin/train.hpp"

namespace winlin {

// Flat key=value configuration: defaults <- file <- command-line overrides.
// Unknown keys are rejected; the effective config is echoed into every output
// directory.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  std::string data_root = "data";
  std::int64_t data_train_count = 16;
  std::int64_t data_val_count = 4;
  std::int64_t data_test_count = 4;
  std::int64_t data_size = 64;
  std::uint64_t data_seed = 0;
  SynthParams synth;

  std::string eval_checkpoint;
  std::string eval_split = "val";
  bool eval_tta = true;
  double eval_threshold = 0.5;

  BenchConfig bench;

  // Applies one key=value pair; throws ConfigError on unknown keys or
  // malformed values.
  void set(const std::string& key, const std::string& value);

  // Ordered key=value echo of the full effective state.
  std::string echo() const;

  // Cross-field invariants (model.validate, train.validate, ranges).
  void validate() const;
};

// defaults <- file (optional, "" skips) <- overrides, then WINLIN_SEED
// fallback for any seed key no layer set, then validation.
RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides);

// Writes config.effective.txt under dir.
void echo_config(const RunConfig& cfg, const std::string& dir);

}  // namespace winlin
