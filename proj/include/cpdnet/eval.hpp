#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace cpdnet::eval {

struct EdgeMap {
  int h = 0;
  int w = 0;
  std::vector<float> values;  // row-major, in [0,1]
  std::string source_id;

  float at(int y, int x) const { return values[static_cast<std::size_t>(y) * w + x]; }
  float& at(int y, int x) { return values[static_cast<std::size_t>(y) * w + x]; }
  void validate() const;
};

struct GroundTruth {
  int h = 0;
  int w = 0;
  // One binary map per human annotator; at least one.
  std::vector<std::vector<std::uint8_t>> annotations;
  void validate() const;
};

struct MatchResult {
  long tp = 0;     // predicted pixels matched in at least one annotation
  long fp = 0;     // predicted pixels matched nowhere
  long fn = 0;     // annotation pixels left unmatched, pooled over annotations
  long tp_gt = 0;  // annotation pixels matched, pooled over annotations
};

enum class EvalMode { SEval, CEval };
enum class MatchAlgo { Auto, Exact, Greedy };

// Orientation-based non-maximum suppression followed by morphological
// thinning, iterated to a fixed point so the operation is idempotent.
// Surviving pixels keep their original values.
EdgeMap nms_thin(const EdgeMap& map);

// Tolerance-based one-to-one boundary correspondence. The matching radius is
// max_dist_frac times the image diagonal. Auto picks the exact assignment
// for images up to 64x64 and distance-sorted greedy assignment above.
MatchResult match_boundaries(const std::vector<std::uint8_t>& pred_binary, int h, int w,
                             const GroundTruth& gt, double max_dist_frac,
                             MatchAlgo algo = MatchAlgo::Auto);

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

struct PrCurve {
  std::vector<double> thresholds;            // 0.01 .. 0.99, step 0.01
  std::vector<PrPoint> corpus;               // pooled-count precision/recall/F per threshold
  std::vector<std::vector<double>> image_f;  // [image][threshold]
  int n_images = 0;
};

// S-Eval thins each prediction with nms_thin before thresholding; C-Eval
// scores the raw maps. Binarization is value >= threshold.
PrCurve compute_curve(const std::vector<EdgeMap>& preds,
                      const std::vector<GroundTruth>& gts, EvalMode mode,
                      double max_dist_frac);

struct OdsOis {
  double ods = 0.0;
  double ois = 0.0;
};
// ODS: best corpus-mean F over a shared threshold. OIS: mean of each image's
// best per-threshold F.
OdsOis ods_ois(const PrCurve& curve);

struct ApResult {
  double ap = 0.0;
  bool degenerate = false;  // single-point recall span
};
// Trapezoidal area under precision over the observed recall range.
ApResult average_precision(const PrCurve& curve);

// Ratio of post-NMS to pre-NMS mass; empty maps are undefined (nullopt).
std::optional<double> average_crispness(const EdgeMap& raw);

struct MetricsReport {
  double ods = 0.0;
  double ois = 0.0;
  double ap = 0.0;
  double ac = 0.0;
  bool ac_defined = false;
  std::string mode;  // "s" or "c"
  double tolerance = 0.0;
  int n_images = 0;
};

std::string format_report_table(const MetricsReport& r);
std::string format_report_kv(const MetricsReport& r);

// Shared by per-image scoring; honours CPD_NET_THREADS (default 1).
int worker_count();

}  // namespace cpdnet::eval
