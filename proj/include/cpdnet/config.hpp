#pragma once

#include <map>
#include <string>
#include <vector>

#include "cpdnet/model.hpp"
#include "cpdnet/trainer.hpp"

namespace cpdnet::config {

// Flat key=value text; '#' starts a comment, blank lines ignored, nested
// concepts use dotted keys (hfl.beta=0.7).
std::map<std::string, std::string> parse_kv_file(const std::string& path);

struct RunConfig {
  BackboneConfig backbone;
  train::TrainConfig trainer;
  std::string dataset_root;
  std::string output_dir = "out";
  bool augment = false;
  int augment_fine_step = 15;
  int augment_cap = 0;
};

// Applies file values then overrides; rejects unknown keys and validates
// every value against its module's preconditions.
RunConfig build_run_config(const std::map<std::string, std::string>& file_values,
                           const std::map<std::string, std::string>& overrides);

}  // namespace cpdnet::config
