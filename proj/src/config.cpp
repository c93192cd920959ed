#include "cpdnet/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "cpdnet/errors.hpp"

namespace cpdnet::config {

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "channels",       "seed",           "epochs",         "lr0",
      "lr_decay_factor", "lr_decay_every", "weight_decay",   "batch",
      "patch",          "steps_per_epoch", "loss",           "probe_images",
      "probe_tolerance", "hfl.lambda",     "hfl.beta",       "hfl.gamma",
      "hfl.omega",      "hfl.delta",      "hfl.c_stab",     "hfl.square_of_sum",
      "dataset",        "output",         "augment",        "augment.fine_step",
      "augment.cap",
  };
  return keys;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return d;
  } catch (...) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

long to_long(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long d = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return d;
  } catch (...) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

}  // namespace

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path + "'");
  std::map<std::string, std::string> values;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(lineno) + " in '" + path +
                        "' is not key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config: empty key on line " + std::to_string(lineno));
    }
    values[key] = value;
  }
  return values;
}

RunConfig build_run_config(const std::map<std::string, std::string>& file_values,
                           const std::map<std::string, std::string>& overrides) {
  std::map<std::string, std::string> merged = file_values;
  for (const auto& [k, v] : overrides) merged[k] = v;

  for (const auto& [k, v] : merged) {
    if (!known_keys().count(k)) {
      throw ConfigError("config: unknown key '" + k + "'");
    }
  }

  RunConfig rc;
  auto get = [&](const std::string& key) -> const std::string* {
    const auto it = merged.find(key);
    return it == merged.end() ? nullptr : &it->second;
  };

  if (const auto* v = get("channels")) rc.backbone.base_channels = static_cast<int>(to_long("channels", *v));
  if (const auto* v = get("seed")) rc.trainer.seed = static_cast<std::uint64_t>(to_long("seed", *v));
  if (const auto* v = get("epochs")) rc.trainer.epochs = static_cast<int>(to_long("epochs", *v));
  if (const auto* v = get("lr0")) rc.trainer.lr0 = to_double("lr0", *v);
  if (const auto* v = get("lr_decay_factor")) rc.trainer.lr_decay_factor = to_double("lr_decay_factor", *v);
  if (const auto* v = get("lr_decay_every")) rc.trainer.lr_decay_every = static_cast<int>(to_long("lr_decay_every", *v));
  if (const auto* v = get("weight_decay")) rc.trainer.weight_decay = to_double("weight_decay", *v);
  if (const auto* v = get("batch")) rc.trainer.batch = static_cast<int>(to_long("batch", *v));
  if (const auto* v = get("patch")) rc.trainer.patch = static_cast<int>(to_long("patch", *v));
  if (const auto* v = get("steps_per_epoch")) rc.trainer.steps_per_epoch = static_cast<int>(to_long("steps_per_epoch", *v));
  if (const auto* v = get("probe_images")) rc.trainer.probe_images = static_cast<int>(to_long("probe_images", *v));
  if (const auto* v = get("probe_tolerance")) rc.trainer.probe_tolerance = to_double("probe_tolerance", *v);
  if (const auto* v = get("loss")) {
    if (*v == "hfl" || *v == "HFL") {
      rc.trainer.loss = train::LossKind::HFL;
    } else if (*v == "wce" || *v == "WCE") {
      rc.trainer.loss = train::LossKind::WCE;
    } else {
      throw ConfigError("config: loss must be 'hfl' or 'wce', got '" + *v + "'");
    }
  }
  if (const auto* v = get("hfl.lambda")) rc.trainer.hfl.lambda = static_cast<float>(to_double("hfl.lambda", *v));
  if (const auto* v = get("hfl.beta")) rc.trainer.hfl.beta = static_cast<float>(to_double("hfl.beta", *v));
  if (const auto* v = get("hfl.gamma")) rc.trainer.hfl.gamma = static_cast<float>(to_double("hfl.gamma", *v));
  if (const auto* v = get("hfl.omega")) rc.trainer.hfl.omega = static_cast<float>(to_double("hfl.omega", *v));
  if (const auto* v = get("hfl.delta")) rc.trainer.hfl.delta = static_cast<float>(to_double("hfl.delta", *v));
  if (const auto* v = get("hfl.c_stab")) rc.trainer.hfl.c_stab = static_cast<float>(to_double("hfl.c_stab", *v));
  if (const auto* v = get("hfl.square_of_sum")) rc.trainer.hfl.square_of_sum = to_bool("hfl.square_of_sum", *v);
  if (const auto* v = get("dataset")) rc.dataset_root = *v;
  if (const auto* v = get("output")) rc.output_dir = *v;
  if (const auto* v = get("augment")) rc.augment = to_bool("augment", *v);
  if (const auto* v = get("augment.fine_step")) rc.augment_fine_step = static_cast<int>(to_long("augment.fine_step", *v));
  if (const auto* v = get("augment.cap")) rc.augment_cap = static_cast<int>(to_long("augment.cap", *v));

  try {
    rc.backbone.validate();
    rc.trainer.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (rc.augment_fine_step < 0 || (rc.augment_fine_step > 0 && 360 % rc.augment_fine_step != 0)) {
    throw ConfigError("config: augment.fine_step must divide 360");
  }
  if (rc.augment_cap < 0) throw ConfigError("config: augment.cap must be >= 0");
  return rc;
}

}  // namespace cpdnet::config
