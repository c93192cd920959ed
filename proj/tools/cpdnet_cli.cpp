// Command-line entry point: train, predict, eval, check, info.
//
// Exit codes: 0 success, 1 configuration error, 2 data error, 3 training
// divergence, 4 checkpoint error, 5 verification-suite failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "cpdnet/checks.hpp"
#include "cpdnet/config.hpp"
#include "cpdnet/data.hpp"
#include "cpdnet/errors.hpp"
#include "cpdnet/eval.hpp"
#include "cpdnet/image_io.hpp"
#include "cpdnet/model.hpp"
#include "cpdnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace cpdnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitCheckpoint = 4;
constexpr int kExitCheckFailed = 5;

struct TrainArgs {
  std::string config_file;
  std::map<std::string, std::string> overrides;
  std::string resume_state;
};

int cmd_train(const TrainArgs& args) {
  std::map<std::string, std::string> file_values;
  if (!args.config_file.empty()) file_values = config::parse_kv_file(args.config_file);
  const config::RunConfig rc = config::build_run_config(file_values, args.overrides);
  if (rc.dataset_root.empty()) {
    throw ConfigError("train: no dataset root given (flag --dataset or key dataset=)");
  }

  const data::DatasetManifest manifest = data::load_manifest(rc.dataset_root, "train");
  std::vector<data::Sample> samples;
  for (const auto& entry : manifest.entries) {
    samples.push_back(data::load_sample(entry));
  }
  if (rc.augment) {
    data::AugmentationPlan plan;
    plan.fine_rotation_step = rc.augment_fine_step;
    plan.seed = rc.trainer.seed;
    plan.cap = rc.augment_cap;
    std::vector<data::Sample> augmented;
    int skipped = 0;
    for (const auto& s : samples) {
      data::AugmentResult ar = data::augment(s, plan);
      skipped += ar.skipped;
      for (auto& v : ar.samples) augmented.push_back(std::move(v));
    }
    std::cout << "augmented " << samples.size() << " -> " << augmented.size() << " samples ("
              << skipped << " skipped)\n";
    samples = std::move(augmented);
  }

  CpdNetModel model(rc.backbone, rc.trainer.seed);
  std::cout << "model C=" << rc.backbone.base_channels << " params=" << count_parameters(model)
            << " dataset=" << samples.size() << " images\n";

  const train::TrainResult result =
      train::train(model, samples, rc.trainer, rc.output_dir, args.resume_state);
  if (result.diverged) {
    std::cerr << "training diverged (loss " << result.final_loss
              << "); diagnostic checkpoint written to " << rc.output_dir << "/ckpt_diverged\n";
    return kExitDivergence;
  }
  double last_ods = -1.0;
  if (!result.probe_ods.empty()) last_ods = result.probe_ods.back().second;
  std::cout << "done: steps=" << (result.log.empty() ? 0 : result.log.back().step)
            << " final_loss=" << result.final_loss;
  if (last_ods >= 0.0) std::cout << " probe_ods=" << last_ods;
  std::cout << "\n";
  return kExitOk;
}

int cmd_predict(const std::string& checkpoint, const std::string& input_dir,
                const std::string& output_dir, int window, int stride) {
  CpdNetModel model = load_checkpoint(checkpoint);
  model.set_training(false);

  if (!fs::is_directory(input_dir)) {
    throw DataError("predict: input directory '" + input_dir + "' does not exist");
  }
  std::vector<fs::path> inputs;
  for (const auto& e : fs::directory_iterator(input_dir)) {
    if (e.is_regular_file() && io::has_image_extension(e.path().filename().string())) {
      inputs.push_back(e.path());
    }
  }
  std::sort(inputs.begin(), inputs.end());
  if (inputs.empty()) {
    std::cout << "0 images in " << input_dir << "\n";
    return kExitOk;
  }
  fs::create_directories(output_dir);
  for (const auto& path : inputs) {
    const io::ImageU8 img = io::read_image(path.string());
    const Tensor image = data::image_to_tensor(img);
    const eval::EdgeMap map = data::sliding_window_predict(model, image, window, stride);
    const fs::path out = fs::path(output_dir) / (path.stem().string() + ".png");
    io::write_gray_png(out.string(), map.h, map.w, data::edge_map_to_u8(map));
  }
  std::cout << inputs.size() << " images -> " << output_dir << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir, const std::string& mode,
             double tolerance, const std::string& report_path) {
  if (mode != "s" && mode != "c") {
    throw ConfigError("eval: --mode must be 's' or 'c'");
  }
  if (tolerance <= 0.0) throw ConfigError("eval: --tolerance must be positive");
  if (!fs::is_directory(pred_dir)) {
    throw DataError("eval: prediction directory '" + pred_dir + "' does not exist");
  }
  if (!fs::is_directory(gt_dir)) {
    throw DataError("eval: ground-truth directory '" + gt_dir + "' does not exist");
  }

  std::map<std::string, std::string> preds;  // stem -> path
  for (const auto& e : fs::directory_iterator(pred_dir)) {
    if (!e.is_regular_file() || !io::has_image_extension(e.path().filename().string())) continue;
    preds[e.path().stem().string()] = e.path().string();
  }
  if (preds.empty()) throw DataError("eval: no prediction images in '" + pred_dir + "'");

  // Ground-truth files may carry multi-annotator suffixes: stem.a0.png, ...
  std::map<std::string, std::vector<std::string>> gts;
  for (const auto& e : fs::directory_iterator(gt_dir)) {
    if (!e.is_regular_file() || !io::has_image_extension(e.path().filename().string())) continue;
    std::string stem = e.path().stem().string();
    const auto dot = stem.find_last_of('.');
    if (dot != std::string::npos && dot + 2 <= stem.size() && stem[dot + 1] == 'a') {
      const std::string digits = stem.substr(dot + 2);
      if (!digits.empty() &&
          std::all_of(digits.begin(), digits.end(), [](char c) { return std::isdigit(c); })) {
        stem = stem.substr(0, dot);
      }
    }
    gts[stem].push_back(e.path().string());
  }

  std::vector<eval::EdgeMap> pred_maps;
  std::vector<eval::GroundTruth> gt_list;
  for (const auto& [stem, path] : preds) {
    const auto it = gts.find(stem);
    if (it == gts.end()) {
      throw DataError("eval: prediction '" + stem + "' has no ground-truth counterpart");
    }
    const io::ImageU8 img = io::read_image(path);
    if (img.channels != 1) throw DataError("eval: prediction '" + stem + "' is not grayscale");
    eval::EdgeMap m;
    m.h = img.h;
    m.w = img.w;
    m.source_id = stem;
    m.values.resize(img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) m.values[i] = img.pixels[i] / 255.0f;
    pred_maps.push_back(std::move(m));

    eval::GroundTruth gt;
    std::vector<std::string> paths = it->second;
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) {
      const io::ImageU8 lab = io::read_image(p);
      if (gt.annotations.empty()) {
        gt.h = lab.h;
        gt.w = lab.w;
      }
      std::vector<std::uint8_t> ann(static_cast<std::size_t>(lab.h) * lab.w);
      for (std::size_t i = 0; i < ann.size(); ++i) {
        const float v = lab.channels == 1
                            ? lab.pixels[i] / 255.0f
                            : (lab.pixels[i * 3] + lab.pixels[i * 3 + 1] + lab.pixels[i * 3 + 2]) /
                                  (3.0f * 255.0f);
        ann[i] = v >= 0.5f ? 1 : 0;
      }
      gt.annotations.push_back(std::move(ann));
    }
    gt_list.push_back(std::move(gt));
  }

  const eval::EvalMode em = mode == "s" ? eval::EvalMode::SEval : eval::EvalMode::CEval;
  const eval::PrCurve curve = eval::compute_curve(pred_maps, gt_list, em, tolerance);
  const eval::OdsOis oo = eval::ods_ois(curve);
  const eval::ApResult ap = eval::average_precision(curve);

  double ac_sum = 0.0;
  int ac_count = 0;
  for (const auto& m : pred_maps) {
    if (const auto ac = eval::average_crispness(m)) {
      ac_sum += *ac;
      ++ac_count;
    }
  }

  eval::MetricsReport report;
  report.ods = oo.ods;
  report.ois = oo.ois;
  report.ap = ap.ap;
  report.ac_defined = ac_count > 0;
  report.ac = ac_count > 0 ? ac_sum / ac_count : 0.0;
  report.mode = mode;
  report.tolerance = tolerance;
  report.n_images = static_cast<int>(pred_maps.size());

  std::cout << eval::format_report_table(report);
  if (ap.degenerate) std::cout << "  warning: degenerate single-point PR curve, AP set to 0\n";
  std::ofstream os(report_path, std::ios::trunc);
  if (!os) throw DataError("eval: cannot write report to '" + report_path + "'");
  os << eval::format_report_kv(report);
  std::cout << "report written to " << report_path << "\n";
  return kExitOk;
}

int cmd_check(std::uint64_t seed, int trials, bool inject_fault) {
  if (trials < 1) throw ConfigError("check: --trials must be >= 1");
  const std::vector<checks::SuiteResult> results = checks::run_all(seed, trials, inject_fault);
  bool all_pass = true;
  for (const auto& r : results) {
    std::printf("%-22s max_error=%.3e tolerance=%.1e %s  (%s)\n", r.name.c_str(), r.max_error,
                r.tolerance, r.pass ? "PASS" : "FAIL", r.detail.c_str());
    all_pass = all_pass && r.pass;
  }
  if (!all_pass) {
    std::printf("replay with: cpdnet check --seed %llu --trials %d\n",
                static_cast<unsigned long long>(seed), trials);
    return kExitCheckFailed;
  }
  return kExitOk;
}

int cmd_info(const std::string& checkpoint) {
  CpdNetModel model = load_checkpoint(checkpoint);
  const auto& cfg = model.config();
  const auto ch = cfg.stage_channels();
  std::cout << "checkpoint    " << checkpoint << "\n";
  std::cout << "channels      " << cfg.base_channels << " ("
            << (cfg.base_channels == 16 ? "Tiny" : cfg.base_channels == 32 ? "Small" : "Normal")
            << ")\n";
  std::cout << "seed          " << model.seed() << "\n";
  std::cout << "parameters    " << count_parameters(model) << "\n";
  for (int s = 0; s < 4; ++s) {
    std::cout << "stage" << (s + 1) << "        " << ch[s] << " channels @ H/" << (1 << s)
              << " x W/" << (1 << s) << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CPD-Net edge detection toolkit"};
  app.require_subcommand(1);

  // train
  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--config", train_args.config_file, "key=value configuration file");
  train_cmd->add_option("--resume", train_args.resume_state, "optimizer state file to resume from");
  std::map<std::string, std::string> flag_keys;  // flag name -> config key
  std::map<std::string, std::string> flag_values;
  auto add_override = [&](const std::string& flag, const std::string& key) {
    train_cmd->add_option_function<std::string>(
        flag, [&flag_values, key](const std::string& v) { flag_values[key] = v; },
        "override config key " + key);
  };
  add_override("--dataset", "dataset");
  add_override("--output", "output");
  add_override("--channels", "channels");
  add_override("--seed", "seed");
  add_override("--epochs", "epochs");
  add_override("--lr0", "lr0");
  add_override("--batch", "batch");
  add_override("--patch", "patch");
  add_override("--steps-per-epoch", "steps_per_epoch");
  add_override("--loss", "loss");
  add_override("--augment", "augment");
  add_override("--probe-images", "probe_images");

  // predict
  std::string ckpt, input_dir, pred_out;
  int window = 320, stride = 240;
  auto* predict_cmd = app.add_subcommand("predict", "write edge-map PNGs for a directory");
  predict_cmd->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  predict_cmd->add_option("--input", input_dir, "input image directory")->required();
  predict_cmd->add_option("--output", pred_out, "output directory")->required();
  predict_cmd->add_option("--window", window, "sliding window size");
  predict_cmd->add_option("--stride", stride, "sliding window stride");

  // eval
  std::string pred_dir, gt_dir, mode = "s", report_path = "metrics.txt";
  double tolerance = 0.0075;
  auto* eval_cmd = app.add_subcommand("eval", "score predictions against ground truth");
  eval_cmd->add_option("--pred", pred_dir, "prediction directory")->required();
  eval_cmd->add_option("--gt", gt_dir, "ground-truth directory")->required();
  eval_cmd->add_option("--mode", mode, "s (with NMS) or c (raw)");
  eval_cmd->add_option("--tolerance", tolerance, "matching distance as a fraction of the diagonal");
  eval_cmd->add_option("--report", report_path, "key=value report file");

  // check
  std::uint64_t check_seed = 1;
  int trials = 100;
  bool inject_fault = false;
  auto* check_cmd = app.add_subcommand("check", "run the operator and gradient verification suites");
  check_cmd->add_option("--seed", check_seed, "base seed");
  check_cmd->add_option("--trials", trials, "trials per variant");
  check_cmd->add_flag("--inject-fault", inject_fault,
                      "flip one transformed weight to prove the harness notices");

  // info
  std::string info_ckpt;
  auto* info_cmd = app.add_subcommand("info", "print checkpoint configuration and size");
  info_cmd->add_option("--checkpoint", info_ckpt, "model checkpoint")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      train_args.overrides = flag_values;
      return cmd_train(train_args);
    }
    if (predict_cmd->parsed()) return cmd_predict(ckpt, input_dir, pred_out, window, stride);
    if (eval_cmd->parsed()) return cmd_eval(pred_dir, gt_dir, mode, tolerance, report_path);
    if (check_cmd->parsed()) return cmd_check(check_seed, trials, inject_fault);
    if (info_cmd->parsed()) return cmd_info(info_ckpt);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
