#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "winlin/bench.hpp"
#include "winlin/checkpoint.hpp"
#include "winlin/config.hpp"
#include "winlin/data.hpp"
#include "winlin/gradcheck_suite.hpp"
#include "winlin/train.hpp"

namespace fs = std::filesystem;
using namespace winlin;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool out_required = true) {
  cmd->add_option("--config", args.config_path, "key=value config file");
  cmd->add_option("--set", args.sets, "override, e.g. --set model.window_side=8")
      ->take_all();
  auto* out = cmd->add_option("--out", args.out_dir, "output directory for artifacts");
  if (out_required) out->required();
}

std::uint64_t split_seed(std::uint64_t base, const std::string& split) {
  if (split == "train") return base;
  if (split == "val") return base + 1;
  if (split == "test") return base + 2;
  return base + 3;
}

int cmd_gen_data(const CommonArgs& args) {
  RunConfig cfg = parse_config(args.config_path, args.sets);
  const std::string root = args.out_dir;
  const std::vector<std::pair<std::string, std::int64_t>> splits = {
      {"train", cfg.data_train_count}, {"val", cfg.data_val_count}, {"test", cfg.data_test_count}};
  for (const auto& [split, count] : splits) {
    if (count <= 0) continue;
    synth_generate(split_seed(cfg.data_seed, split), count, cfg.data_size, cfg.synth, root, split);
    std::cout << "wrote " << count << " samples to " << (fs::path(root) / split).string() << "\n";
  }
  echo_config(cfg, root);
  return 0;
}

std::vector<SegSample> load_split(const RunConfig& cfg, const std::string& split) {
  return load_dataset(read_manifest(cfg.data_root, split));
}

int cmd_train(const CommonArgs& args) {
  RunConfig cfg = parse_config(args.config_path, args.sets);
  echo_config(cfg, args.out_dir);
  auto train_set = load_split(cfg, "train");
  std::vector<SegSample> val_set;
  bool have_val = false;
  try {
    val_set = load_split(cfg, "val");
    have_val = !val_set.empty();
  } catch (const IoError&) {
    // no val split; train without mid-run evaluation
  }

  BuildFormer<float> model = BuildFormer<float>::init(cfg.model, cfg.train.seed);
  if (!cfg.eval_checkpoint.empty()) {
    Checkpoint ckpt = load_checkpoint(cfg.eval_checkpoint);
    restore_model(model, ckpt);  // fine-tune from existing weights
    std::cout << "fine-tuning from " << cfg.eval_checkpoint << " (epoch " << ckpt.epoch << ")\n";
  }

  TrainResult result =
      train(model, train_set, have_val ? &val_set : nullptr, cfg.train, args.out_dir);
  if (result.aborted_non_finite) {
    std::cerr << "error: numeric: training loss became non-finite; last good checkpoint kept at "
              << result.checkpoint_path << "\n";
    return 4;
  }

  std::ofstream metrics(fs::path(args.out_dir) / "metrics.csv");
  metrics << "split,iou,precision,recall,f1\n";
  MetricReport train_report = evaluate_model(model, train_set, false);
  metrics << train_report.csv_row("train") << "\n";
  std::cout << train_report.csv_row("train") << "\n";
  if (have_val) {
    MetricReport val_report = evaluate_model(model, val_set, false);
    metrics << val_report.csv_row("val") << "\n";
    std::cout << val_report.csv_row("val") << "\n";
  }
  std::cout << "checkpoint: " << result.checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  RunConfig cfg = parse_config(args.config_path, args.sets);
  if (cfg.eval_checkpoint.empty())
    throw ConfigError("eval requires eval.checkpoint (or --checkpoint)");
  echo_config(cfg, args.out_dir);
  Checkpoint ckpt = load_checkpoint(cfg.eval_checkpoint);
  BuildFormer<float> model = model_from_checkpoint<float>(ckpt);
  auto samples = load_split(cfg, cfg.eval_split);

  std::ofstream metrics(fs::path(args.out_dir) / "metrics.csv");
  metrics << "split,iou,precision,recall,f1\n";
  MetricReport plain =
      evaluate_model(model, samples, false, static_cast<float>(cfg.eval_threshold));
  metrics << plain.csv_row(cfg.eval_split) << "\n";
  std::cout << plain.csv_row(cfg.eval_split) << "\n";
  if (cfg.eval_tta) {
    MetricReport tta =
        evaluate_model(model, samples, true, static_cast<float>(cfg.eval_threshold));
    metrics << tta.csv_row(cfg.eval_split + "+tta") << "\n";
    std::cout << tta.csv_row(cfg.eval_split + "+tta") << "\n";
  }
  return 0;
}

int cmd_predict(const CommonArgs& args) {
  RunConfig cfg = parse_config(args.config_path, args.sets);
  if (cfg.eval_checkpoint.empty())
    throw ConfigError("predict requires eval.checkpoint (or --checkpoint)");
  echo_config(cfg, args.out_dir);
  Checkpoint ckpt = load_checkpoint(cfg.eval_checkpoint);
  BuildFormer<float> model = model_from_checkpoint<float>(ckpt);
  model.set_training(false);

  const fs::path images_dir = fs::path(cfg.data_root) / cfg.eval_split / "images";
  if (!fs::is_directory(images_dir))
    throw IoError("predict: no image directory at " + images_dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(images_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ppm")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  const fs::path mask_dir = fs::path(args.out_dir) / "masks";
  fs::create_directories(mask_dir);
  NoGradGuard no_grad;
  for (const auto& file : files) {
    const PnmImage raw = read_pnm(file.string());
    SegSample s;
    const std::int64_t H = raw.height, W = raw.width, hw = H * W;
    s.image = TensorF::zeros({3, H, W});
    for (std::int64_t i = 0; i < hw; ++i)
      for (int c = 0; c < 3; ++c)
        s.image.data()[c * hw + i] = static_cast<float>(raw.pixels[i * 3 + c]) / 255.0f;
    s.mask = TensorF::zeros({1, H, W});
    s.valid = TensorF::full({1, H, W}, 1.0f);
    SegSample padded = pad_to_multiple(s, 32);
    TensorF img = reshape(padded.image, {1, 3, padded.height(), padded.width()});
    auto fwd = [&](const TensorF& x) { return model.forward(x); };
    TensorF probs = cfg.eval_tta ? tta_predict<float>(fwd, img) : sigmoid(model.forward(img));

    PnmImage out_mask;
    out_mask.width = W;
    out_mask.height = H;
    out_mask.channels = 1;
    out_mask.pixels.resize(static_cast<std::size_t>(hw));
    const std::int64_t Wp = padded.width();
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j)
        out_mask.pixels[i * W + j] =
            probs.data()[i * Wp + j] > cfg.eval_threshold ? 255 : 0;
    write_pnm((mask_dir / (file.stem().string() + ".pgm")).string(), out_mask);
  }
  std::cout << "wrote " << files.size() << " masks to " << mask_dir.string() << "\n";
  return 0;
}

int cmd_bench(const CommonArgs& args) {
  RunConfig cfg = parse_config(args.config_path, args.sets);
  echo_config(cfg, args.out_dir);
  BenchTable table = bench_sweep(cfg.bench);
  const std::string csv = bench_csv(table);
  std::ofstream out(fs::path(args.out_dir) / "bench.csv");
  out << csv;
  std::cout << csv;
  return 0;
}

int cmd_gradcheck(const CommonArgs& args) {
  RunConfig cfg = parse_config(args.config_path, args.sets);
  auto entries = run_gradcheck_suite();
  std::ostringstream report;
  int failures = 0;
  for (const auto& e : entries) {
    report << (e.pass ? "PASS" : "FAIL") << " " << e.op << " max_rel_err=" << e.max_rel_error
           << " tol=" << e.tolerance << "\n";
    failures += e.pass ? 0 : 1;
  }
  std::cout << report.str();
  if (!args.out_dir.empty()) {
    echo_config(cfg, args.out_dir);
    std::ofstream out(fs::path(args.out_dir) / "gradcheck.txt");
    out << report.str();
  }
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"window-based linear attention segmentation pipeline"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, predict_args, bench_args, gradcheck_args;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset tree");
  add_common(gen, gen_args);
  auto* tr = app.add_subcommand("train", "train on a generated dataset");
  add_common(tr, train_args);
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint (with/without TTA)");
  add_common(ev, eval_args);
  std::string eval_ckpt;
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint file (sets eval.checkpoint)");
  auto* pr = app.add_subcommand("predict", "write predicted masks for a split");
  add_common(pr, predict_args);
  std::string predict_ckpt;
  pr->add_option("--checkpoint", predict_ckpt, "checkpoint file (sets eval.checkpoint)");
  auto* be = app.add_subcommand("bench", "window-size complexity/memory/time sweep");
  add_common(be, bench_args);
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op");
  add_common(gc, gradcheck_args, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_args);
    if (tr->parsed()) return cmd_train(train_args);
    if (ev->parsed()) {
      if (!eval_ckpt.empty()) eval_args.sets.push_back("eval.checkpoint=" + eval_ckpt);
      return cmd_eval(eval_args);
    }
    if (pr->parsed()) {
      if (!predict_ckpt.empty()) predict_args.sets.push_back("eval.checkpoint=" + predict_ckpt);
      return cmd_predict(predict_args);
    }
    if (be->parsed()) return cmd_bench(bench_args);
    if (gc->parsed()) return cmd_gradcheck(gradcheck_args);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
