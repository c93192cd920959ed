#include "cpdnet/trainer.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace cpdnet::train {

namespace {

constexpr double kDivergenceGuard = 1e4;

// u64 round-trips through two floats bit-for-bit.
void u64_to_floats(std::uint64_t v, float out[2]) {
  std::uint32_t lo = static_cast<std::uint32_t>(v & 0xffffffffULL);
  std::uint32_t hi = static_cast<std::uint32_t>(v >> 32);
  std::memcpy(&out[0], &lo, 4);
  std::memcpy(&out[1], &hi, 4);
}

std::uint64_t floats_to_u64(const float in[2]) {
  std::uint32_t lo, hi;
  std::memcpy(&lo, &in[0], 4);
  std::memcpy(&hi, &in[1], 4);
  return (static_cast<std::uint64_t>(hi) << 32) | lo;
}

void save_trainer_state(const std::string& path, const CpdNetModel& model,
                        const TrainState& state, const data::SamplerState& sampler) {
  Archive a;
  a.version = 1;
  a.base_channels = static_cast<std::uint32_t>(model.config().base_channels);
  a.seed = model.seed();
  const auto& params = model.registry().parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    a.entries.push_back({"adam.m." + params[i].name, params[i].value.shape(), state.m[i]});
    a.entries.push_back({"adam.v." + params[i].name, params[i].value.shape(), state.v[i]});
  }
  ArchiveEntry counters;
  counters.name = "__counters__";
  counters.shape = Shape{1, 1, 1, 6};
  counters.values.resize(6);
  counters.values[0] = static_cast<float>(state.step);
  counters.values[1] = static_cast<float>(state.epoch);
  u64_to_floats(sampler.rng_state, &counters.values[2]);
  u64_to_floats(sampler.cursor, &counters.values[4]);
  a.entries.push_back(std::move(counters));

  ArchiveEntry order;
  order.name = "__sampler_order__";
  order.shape = Shape{1, 1, 1, std::max(1, static_cast<int>(sampler.order.size()))};
  order.values.resize(order.shape.w);
  for (std::size_t i = 0; i < sampler.order.size(); ++i) {
    order.values[i] = static_cast<float>(sampler.order[i]);
  }
  a.entries.push_back(std::move(order));
  write_archive(path, a);
}

void load_trainer_state(const std::string& path, const CpdNetModel& model, TrainState& state,
                        data::SamplerState& sampler) {
  const Archive a = read_archive(path);
  const auto& params = model.registry().parameters();
  state.init(model.registry());
  for (std::size_t i = 0; i < params.size(); ++i) {
    bool found_m = false, found_v = false;
    for (const auto& e : a.entries) {
      if (e.name == "adam.m." + params[i].name) {
        state.m[i] = e.values;
        found_m = true;
      } else if (e.name == "adam.v." + params[i].name) {
        state.v[i] = e.values;
        found_v = true;
      }
    }
    if (!found_m || !found_v) {
      throw std::runtime_error("trainer state: missing moments for '" + params[i].name + "'");
    }
  }
  for (const auto& e : a.entries) {
    if (e.name == "__counters__") {
      state.step = static_cast<long>(e.values[0]);
      state.epoch = static_cast<int>(e.values[1]);
      sampler.rng_state = floats_to_u64(&e.values[2]);
      sampler.cursor = floats_to_u64(&e.values[4]);
    } else if (e.name == "__sampler_order__") {
      sampler.order.assign(e.values.size(), 0);
      for (std::size_t i = 0; i < e.values.size(); ++i) {
        sampler.order[i] = static_cast<int>(e.values[i]);
      }
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (lr0 <= 0) throw std::invalid_argument("TrainConfig: lr0 must be positive");
  if (lr_decay_factor <= 0) throw std::invalid_argument("TrainConfig: lr_decay_factor must be positive");
  if (lr_decay_every < 1) throw std::invalid_argument("TrainConfig: lr_decay_every must be >= 1");
  if (weight_decay < 0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (batch < 1) throw std::invalid_argument("TrainConfig: batch must be >= 1");
  if (patch < 8 || patch % 8 != 0) {
    throw std::invalid_argument("TrainConfig: patch must be a positive multiple of 8");
  }
  if (steps_per_epoch < 0) throw std::invalid_argument("TrainConfig: steps_per_epoch must be >= 0");
  hfl.validate();
}

void TrainState::init(const ParamRegistry& reg) {
  m.clear();
  v.clear();
  for (const auto& p : reg.parameters()) {
    m.emplace_back(p.value.data().size(), 0.0f);
    v.emplace_back(p.value.data().size(), 0.0f);
  }
  step = 0;
  epoch = 0;
}

double lr_at(int epoch, const TrainConfig& config) {
  if (epoch < 0 || epoch >= config.epochs) {
    throw std::invalid_argument("lr_at: epoch " + std::to_string(epoch) +
                                " outside [0, " + std::to_string(config.epochs) + ")");
  }
  return config.lr0 * std::pow(config.lr_decay_factor, epoch / config.lr_decay_every);
}

bool adam_step(ParamRegistry& reg, TrainState& state, double lr, double weight_decay,
               const AdamParams& adam) {
  auto& params = reg.parameters();
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: state not initialized for this registry");
  }
  for (auto& p : params) {
    if (!p.value.has_grad()) {
      throw std::invalid_argument("adam_step: parameter '" + p.name + "' has no gradient");
    }
    for (float g : p.value.grad()) {
      if (!std::isfinite(g)) return false;
    }
  }

  const long t = state.step + 1;
  const double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& data = params[i].value.data();
    const auto& grad = params[i].value.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      double x = data[j];
      x -= lr * weight_decay * x;
      const double mj = adam.beta1 * m[j] + (1.0 - adam.beta1) * g;
      const double vj = adam.beta2 * v[j] + (1.0 - adam.beta2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      x -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + adam.eps);
      data[j] = static_cast<float>(x);
    }
  }
  state.step = t;
  return true;
}

TrainResult train(CpdNetModel& model, const std::vector<data::Sample>& dataset,
                  const TrainConfig& config, const std::string& out_dir,
                  const std::string& resume_state_path) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");
  std::filesystem::create_directories(out_dir);

  data::PatchOptions popts;
  popts.patch = config.patch;
  popts.batch = config.batch;
  popts.seed = config.seed;
  data::PatchSampler sampler(dataset, popts);

  TrainState state;
  state.init(model.registry());
  if (!resume_state_path.empty()) {
    data::SamplerState ss;
    load_trainer_state(resume_state_path, model, state, ss);
    sampler.restore(ss);
  }

  const int steps_per_epoch =
      config.steps_per_epoch > 0
          ? config.steps_per_epoch
          : (static_cast<int>(dataset.size()) + config.batch - 1) / config.batch;

  std::ofstream log_file(out_dir + "/metrics.log",
                         resume_state_path.empty() ? std::ios::trunc : std::ios::app);

  TrainResult result;
  for (int epoch = state.epoch; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(epoch, config);
    for (int s = 0; s < steps_per_epoch; ++s) {
      const data::Batch batch = sampler.next();
      model.registry().zero_grads();
      Tape tape;
      double loss_value;
      {
        Tape::Scope scope(tape);
        Tensor pred = model.forward(batch.images, /*training=*/true);
        Tensor loss = config.loss == LossKind::HFL
                          ? hybrid_focal(pred, batch.labels, config.hfl)
                          : weighted_cross_entropy(pred, batch.labels);
        loss_value = loss.item();
        if (!std::isfinite(loss_value) || loss_value > kDivergenceGuard) {
          save_checkpoint(model, out_dir + "/ckpt_diverged");
          log_file << "# diverged at step " << state.step << " loss " << loss_value << "\n";
          result.diverged = true;
          result.final_loss = loss_value;
          return result;
        }
        tape.backward(loss);
      }
      if (!adam_step(model.registry(), state, lr, config.weight_decay)) {
        log_file << "# non-finite gradient, step skipped at step " << state.step << "\n";
        continue;
      }
      result.log.push_back({state.step, epoch, lr, loss_value});
      result.final_loss = loss_value;
      log_file << state.step << " " << epoch << " " << lr << " " << loss_value << "\n";
    }
    state.epoch = epoch + 1;
    const std::string ckpt = out_dir + "/ckpt_epoch" + std::to_string(epoch);
    save_checkpoint(model, ckpt);
    save_trainer_state(ckpt + ".state", model, state, sampler.state());

    if (config.probe_images > 0) {
      const int n = std::min<int>(config.probe_images, static_cast<int>(dataset.size()));
      std::vector<eval::EdgeMap> preds;
      std::vector<eval::GroundTruth> gts;
      for (int i = 0; i < n; ++i) {
        preds.push_back(data::sliding_window_predict(model, dataset[i].image, config.patch,
                                                     config.patch * 3 / 4));
        eval::GroundTruth gt;
        gt.h = dataset[i].label.shape().h;
        gt.w = dataset[i].label.shape().w;
        std::vector<std::uint8_t> ann(gt.h * static_cast<std::size_t>(gt.w));
        for (std::size_t k = 0; k < ann.size(); ++k) {
          ann[k] = dataset[i].label.data()[k] >= 0.5f ? 1 : 0;
        }
        gt.annotations.push_back(std::move(ann));
        gts.push_back(std::move(gt));
      }
      const eval::PrCurve curve =
          eval::compute_curve(preds, gts, eval::EvalMode::SEval, config.probe_tolerance);
      const eval::OdsOis oo = eval::ods_ois(curve);
      result.probe_ods.emplace_back(epoch, oo.ods);
      log_file << "# epoch " << epoch << " probe_ods " << oo.ods << "\n";
    }
  }
  return result;
}

}  // namespace cpdnet::train
