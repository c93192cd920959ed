#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpdnet/eval.hpp"
#include "cpdnet/image_io.hpp"
#include "cpdnet/model.hpp"
#include "cpdnet/rng.hpp"
#include "cpdnet/tensor.hpp"

namespace cpdnet::data {

struct Sample {
  Tensor image;  // 1x3xHxW, values in [0,1]
  Tensor label;  // 1x1xHxW, binary unless loaded in soft-label mode
  std::string id;
};

struct ManifestEntry {
  std::string id;  // file stem shared by image and label(s)
  std::string image_path;
  std::vector<std::string> label_paths;  // one per annotator, sorted
};

struct DatasetManifest {
  std::string root;
  std::string split;
  std::vector<ManifestEntry> entries;
};

// Expects root/images/<split>/ and root/labels/<split>/ with matching stems.
// Multi-annotator labels carry an extra ".a<k>" suffix before the extension.
// Entries come back in lexicographic stem order.
DatasetManifest load_manifest(const std::string& root, const std::string& split);

struct LoadOptions {
  bool soft_labels = false;  // keep the [0,1] consensus instead of binarizing at 0.5
};

Sample load_sample(const ManifestEntry& entry, const LoadOptions& opts = {});
eval::GroundTruth load_ground_truth(const ManifestEntry& entry);

Tensor image_to_tensor(const io::ImageU8& img);  // gray replicates to 3 channels
std::vector<std::uint8_t> edge_map_to_u8(const eval::EdgeMap& map);  // round(255*p)
eval::EdgeMap tensor_to_edge_map(const Tensor& t, const std::string& id);

struct AugmentationPlan {
  std::vector<int> base_rotations{0, 90, 180, 270};
  int fine_rotation_step = 15;  // degrees; 0 disables fine rotations
  std::uint64_t seed = 0;
  int cap = 0;  // keep at most this many variants per sample; 0 = all
};

struct AugmentResult {
  std::vector<Sample> samples;  // element 0 is always the identity transform
  int skipped = 0;
};

// Base right-angle rotations are exact index permutations; fine rotations
// resample (bilinear image, nearest label) and are followed by the minimal
// central resize plus a seeded random crop restoring the original HxW.
AugmentResult augment(const Sample& sample, const AugmentationPlan& plan);

struct PatchOptions {
  int patch = 320;
  int batch = 8;
  std::uint64_t seed = 0;
};

struct Batch {
  Tensor images;  // Bx3xPxP
  Tensor labels;  // Bx1xPxP
};

struct SamplerState {
  std::uint64_t rng_state = 0;
  std::uint64_t cursor = 0;
  std::vector<int> order;
};

// Seeded, reproducible stream of aligned image/label crops. Every epoch
// permutes the sample order; samples smaller than the patch are
// reflect-padded.
class PatchSampler {
 public:
  PatchSampler(std::vector<Sample> samples, const PatchOptions& opts);
  Batch next();
  int samples_per_epoch() const { return static_cast<int>(samples_.size()); }

  SamplerState state() const;
  void restore(const SamplerState& s);

 private:
  std::vector<Sample> samples_;
  PatchOptions opts_;
  Rng rng_;
  std::vector<int> order_;
  std::size_t cursor_ = 0;

  void reshuffle();
};

// Reflect-pads on the bottom/right so both dims are at least `min_size` and
// divisible by `multiple`.
Tensor reflect_pad(const Tensor& image, int min_h, int min_w, int multiple);

// Window origins at multiples of the stride, with the final origin clamped
// so the last window touches the image edge.
std::vector<int> window_origins(int size, int window, int stride);

// Sliding-window inference with overlap averaging; output matches the input
// resolution. The model runs in inference mode.
eval::EdgeMap sliding_window_predict(CpdNetModel& model, const Tensor& image,
                                     int window = 320, int stride = 240);

}  // namespace cpdnet::data
