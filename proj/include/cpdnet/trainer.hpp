#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cpdnet/data.hpp"
#include "cpdnet/loss.hpp"
#include "cpdnet/model.hpp"

namespace cpdnet::train {

enum class LossKind { HFL, WCE };

struct TrainConfig {
  double lr0 = 1e-4;
  int epochs = 25;
  double lr_decay_factor = 0.1;
  int lr_decay_every = 5;  // epochs
  double weight_decay = 5e-4;
  int batch = 8;
  int patch = 320;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::HFL;
  HflConfig hfl;
  // 0 derives steps from the corpus size; a positive value pins the number
  // of optimizer steps per epoch.
  int steps_per_epoch = 0;
  // Per-epoch train-set ODS probe on at most this many images (0 disables).
  int probe_images = 8;
  double probe_tolerance = 0.0075;

  void validate() const;
};

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainState {
  long step = 0;
  int epoch = 0;
  std::vector<std::vector<float>> m;  // first moments, one buffer per parameter
  std::vector<std::vector<float>> v;  // second moments

  void init(const ParamRegistry& reg);
};

double lr_at(int epoch, const TrainConfig& config);

// One Adam update with decoupled weight decay applied before the Adam delta.
// Returns false and leaves parameters, moments and counters untouched when
// any gradient is non-finite.
bool adam_step(ParamRegistry& reg, TrainState& state, double lr, double weight_decay,
               const AdamParams& adam = {});

struct StepLog {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<StepLog> log;
  std::vector<std::pair<int, double>> probe_ods;  // (epoch, S-Eval ODS)
  bool diverged = false;
  double final_loss = 0.0;
};

// Runs the full recipe: per-step forward / loss / backward / adam_step,
// checkpoints every epoch as <out_dir>/ckpt_epoch<k> (plus an optimizer
// sidecar for bit-exact resume), and a line-oriented metrics log. Training
// halts with a diagnostic checkpoint when the loss exceeds 1e4.
TrainResult train(CpdNetModel& model, const std::vector<data::Sample>& dataset,
                  const TrainConfig& config, const std::string& out_dir,
                  const std::string& resume_state_path = "");

}  // namespace cpdnet::train
