#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "cpdnet/cpdc.hpp"
#include "cpdnet/nn.hpp"
#include "cpdnet/tensor.hpp"

namespace cpdnet {

struct BackboneConfig {
  int base_channels = 16;  // 16 / 32 / 64 = Tiny / Small / Normal
  int blocks_per_stage = 4;
  // Branch groups of the CPDC block convolutions; 4 keeps the parameter
  // budget on the published curve.
  int branch_groups = 4;

  std::array<int, 4> stage_channels() const {
    return {base_channels, 2 * base_channels, 4 * base_channels, 4 * base_channels};
  }
  void validate() const;
};

// Four parallel dilated branches (1x1 compress -> ReLU -> 3x3 with dilation
// r in {1,2,3,4} -> ReLU), concatenated, fused by 1x1 conv, gated by an SE
// block and added back to the input.
struct MsemModule {
  int channels = 0;
  std::array<Conv2d, 4> compress;
  std::array<Conv2d, 4> dilated;
  Conv2d fuse;
  Conv2d se_squeeze;
  Conv2d se_expand;

  MsemModule() = default;
  MsemModule(ParamRegistry& reg, const std::string& name, int channels, Rng& rng);

  Tensor forward(const Tensor& x) const;
  // Single branch response, for receptive-field probing.
  Tensor branch_forward(int idx, const Tensor& x) const;
};

// Two sub-blocks of [3x3 -> BN -> ReLU -> 1x1 -> BN -> ReLU] with a residual
// around the first sub-block and a second residual spanning the whole
// decoder. The 3x3 bottlenecks to half width; the 1x1 restores it.
struct DrcDecoder {
  int channels = 0;
  Conv2d conv3_a, conv1_a, conv3_b, conv1_b;
  BatchNorm2d bn3_a, bn1_a, bn3_b, bn1_b;

  DrcDecoder() = default;
  DrcDecoder(ParamRegistry& reg, const std::string& name, int channels, Rng& rng);

  Tensor forward(const Tensor& x, bool training);
};

// 7x7 depthwise conv -> channel LayerNorm -> 1x1 expand (x4) -> GELU ->
// global response normalization -> 1x1 project -> residual.
struct ConvNextV2Block {
  int channels = 0;
  Conv2d dw;
  Tensor ln_gamma, ln_beta;
  Conv2d expand;
  Tensor grn_gamma, grn_beta;  // initialized to zero: block starts as identity
  Conv2d project;

  ConvNextV2Block() = default;
  ConvNextV2Block(ParamRegistry& reg, const std::string& name, int channels, Rng& rng);

  Tensor forward(const Tensor& x) const;
};

struct ForwardTrace {
  std::array<Shape, 4> stage_shapes{};
};

class CpdNetModel {
 public:
  CpdNetModel(const BackboneConfig& config, std::uint64_t seed);
  CpdNetModel(const CpdNetModel&) = delete;
  CpdNetModel& operator=(const CpdNetModel&) = delete;
  CpdNetModel(CpdNetModel&&) = default;
  CpdNetModel& operator=(CpdNetModel&&) = default;

  // image: Nx3xHxW with H, W divisible by 8; returns Nx1xHxW in (0,1).
  Tensor forward(const Tensor& image, bool training, ForwardTrace* trace = nullptr);

  void set_training(bool t) { training_ = t; }
  bool training() const { return training_; }

  ParamRegistry& registry() { return registry_; }
  const ParamRegistry& registry() const { return registry_; }
  const BackboneConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

 private:
  BackboneConfig config_;
  std::uint64_t seed_ = 0;
  bool training_ = true;
  ParamRegistry registry_;

  Conv2d stem_;
  BatchNorm2d stem_bn_;
  std::array<std::vector<CpdcBlock>, 4> stages_;
  std::array<Conv2d, 3> transitions_;
  std::array<BatchNorm2d, 3> transition_bn_;
  std::array<MsemModule, 4> msem_;
  std::array<DrcDecoder, 4> drc_;
  std::array<Conv2d, 3> merge_proj_;  // proj[i]: stage i+1 channels -> stage i channels
  Conv2d lateral_embed_;
  ConvNextV2Block lateral_block_;
  Conv2d head_;
};

CpdNetModel build_model(const BackboneConfig& config, std::uint64_t seed);

std::int64_t count_parameters(const CpdNetModel& model);

// Flat checkpoint archive: header (format version 1, base channels, seed)
// followed by (name, shape, raw little-endian float32 values) entries for
// every parameter and buffer. Round-trips bit-exactly.
struct ArchiveEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Archive {
  std::uint32_t version = 1;
  std::uint32_t base_channels = 0;
  std::uint64_t seed = 0;
  std::vector<ArchiveEntry> entries;
};

void write_archive(const std::string& path, const Archive& archive);
Archive read_archive(const std::string& path);

void save_checkpoint(const CpdNetModel& model, const std::string& path);
CpdNetModel load_checkpoint(const std::string& path);

}  // namespace cpdnet
