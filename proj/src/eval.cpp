#include "cpdnet/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace cpdnet::eval {

namespace {

int reflect_index(int i, int n) {
  if (i < 0) return -i - 1;
  if (i >= n) return 2 * n - 1 - i;
  return i;
}

// Separable Gaussian, sigma=1, radius 3, reflected borders.
std::vector<float> gaussian_smooth(const std::vector<float>& src, int h, int w) {
  constexpr int kRadius = 3;
  float kernel[2 * kRadius + 1];
  float norm = 0.0f;
  for (int k = -kRadius; k <= kRadius; ++k) {
    kernel[k + kRadius] = std::exp(-0.5f * k * k);
    norm += kernel[k + kRadius];
  }
  for (float& v : kernel) v /= norm;

  std::vector<float> tmp(src.size()), out(src.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (int k = -kRadius; k <= kRadius; ++k) {
        acc += kernel[k + kRadius] * src[static_cast<std::size_t>(y) * w + reflect_index(x + k, w)];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (int k = -kRadius; k <= kRadius; ++k) {
        acc += kernel[k + kRadius] * tmp[static_cast<std::size_t>(reflect_index(y + k, h)) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  }
  return out;
}

void sobel(const std::vector<float>& src, int h, int w, std::vector<float>& gx,
           std::vector<float>& gy) {
  gx.assign(src.size(), 0.0f);
  gy.assign(src.size(), 0.0f);
  auto v = [&](int y, int x) {
    return src[static_cast<std::size_t>(reflect_index(y, h)) * w + reflect_index(x, w)];
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float tl = v(y - 1, x - 1), tc = v(y - 1, x), tr = v(y - 1, x + 1);
      const float ml = v(y, x - 1), mr = v(y, x + 1);
      const float bl = v(y + 1, x - 1), bc = v(y + 1, x), br = v(y + 1, x + 1);
      gx[static_cast<std::size_t>(y) * w + x] = (tr + 2.0f * mr + br) - (tl + 2.0f * ml + bl);
      gy[static_cast<std::size_t>(y) * w + x] = (bl + 2.0f * bc + br) - (tl + 2.0f * tc + tr);
    }
  }
}

float bilinear(const std::vector<float>& img, int h, int w, float x, float y) {
  x = std::clamp(x, 0.0f, static_cast<float>(w) - 1.001f);
  y = std::clamp(y, 0.0f, static_cast<float>(h) - 1.001f);
  const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const float fx = x - x0, fy = y - y0;
  return img[static_cast<std::size_t>(y0) * w + x0] * (1 - fx) * (1 - fy) +
         img[static_cast<std::size_t>(y0) * w + x1] * fx * (1 - fy) +
         img[static_cast<std::size_t>(y1) * w + x0] * (1 - fx) * fy +
         img[static_cast<std::size_t>(y1) * w + x1] * fx * fy;
}

// One suppression sweep: keep a positive pixel only if the smoothed map at
// the pixel is (within 1% slack) a maximum along the local gradient
// direction. Near-zero gradients count as flat ridgelines and are kept.
std::vector<std::uint8_t> directional_mask(const std::vector<float>& values, int h, int w) {
  std::vector<float> g = gaussian_smooth(values, h, w);
  std::vector<float> gx, gy;
  sobel(g, h, w, gx, gy);
  std::vector<std::uint8_t> mask(values.size(), 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (values[i] <= 0.0f) continue;
      const float mag2 = gx[i] * gx[i] + gy[i] * gy[i];
      if (mag2 <= 1e-12f) {
        mask[i] = 1;
        continue;
      }
      const float inv = 1.0f / std::sqrt(mag2);
      const float dx = gx[i] * inv, dy = gy[i] * inv;
      const float center = g[i] * 1.01f;
      if (center >= bilinear(g, h, w, x + dx, y + dy) &&
          center >= bilinear(g, h, w, x - dx, y - dy)) {
        mask[i] = 1;
      }
    }
  }
  return mask;
}

// Zhang-Suen thinning to convergence on a binary mask.
void thin_mask(std::vector<std::uint8_t>& mask, int h, int w) {
  auto at = [&](int y, int x) -> int {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0;
    return mask[static_cast<std::size_t>(y) * w + x] ? 1 : 0;
  };
  std::vector<std::size_t> kill;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      kill.clear();
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const std::size_t i = static_cast<std::size_t>(y) * w + x;
          if (!mask[i]) continue;
          const int p2 = at(y - 1, x), p3 = at(y - 1, x + 1), p4 = at(y, x + 1),
                    p5 = at(y + 1, x + 1), p6 = at(y + 1, x), p7 = at(y + 1, x - 1),
                    p8 = at(y, x - 1), p9 = at(y - 1, x - 1);
          const int b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9;
          if (b < 2 || b > 6) continue;
          const int seq[9] = {p2, p3, p4, p5, p6, p7, p8, p9, p2};
          int a = 0;
          for (int k = 0; k < 8; ++k) {
            if (seq[k] == 0 && seq[k + 1] == 1) ++a;
          }
          if (a != 1) continue;
          const bool cond = pass == 0 ? (p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0)
                                      : (p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0);
          if (cond) kill.push_back(i);
        }
      }
      if (!kill.empty()) changed = true;
      for (std::size_t i : kill) mask[i] = 0;
    }
  }
}

double sum_values(const EdgeMap& m) {
  double s = 0.0;
  for (float v : m.values) s += v;
  return s;
}

struct PixelList {
  std::vector<int> ys, xs;
  // Row index into ys/xs ranges for radius queries.
  std::vector<int> row_begin;  // size h+1
};

PixelList collect_positives(const std::vector<std::uint8_t>& map, int h, int w) {
  PixelList p;
  p.row_begin.assign(h + 1, 0);
  for (int y = 0; y < h; ++y) {
    p.row_begin[y] = static_cast<int>(p.ys.size());
    for (int x = 0; x < w; ++x) {
      if (map[static_cast<std::size_t>(y) * w + x]) {
        p.ys.push_back(y);
        p.xs.push_back(x);
      }
    }
  }
  p.row_begin[h] = static_cast<int>(p.ys.size());
  return p;
}

// Feasible candidate gt indices for one predicted pixel, within radius.
void candidates(const PixelList& gt, int h, int y, int x, double r2, int reach,
                std::vector<std::pair<double, int>>& out) {
  out.clear();
  for (int yy = std::max(0, y - reach); yy <= std::min(h - 1, y + reach); ++yy) {
    for (int k = gt.row_begin[yy]; k < gt.row_begin[yy + 1]; ++k) {
      const double dy = yy - y;
      const double dx = gt.xs[k] - x;
      const double d2 = dy * dy + dx * dx;
      if (d2 <= r2) out.emplace_back(d2, k);
    }
  }
}

// Min-cost augmentation via SPFA over the matching residual graph; yields a
// maximum-cardinality assignment. Edge costs are squared distances.
long match_exact(const PixelList& pred, const PixelList& gt, int h, double r2, int reach,
                 std::vector<std::uint8_t>& pred_matched, std::vector<std::uint8_t>& gt_matched) {
  const int np = static_cast<int>(pred.ys.size());
  const int ng = static_cast<int>(gt.ys.size());
  std::vector<std::vector<std::pair<double, int>>> adj(np);
  std::vector<std::pair<double, int>> cand;
  for (int u = 0; u < np; ++u) {
    candidates(gt, h, pred.ys[u], pred.xs[u], r2, reach, cand);
    adj[u] = cand;
  }
  std::vector<int> match_p(np, -1), match_g(ng, -1);

  std::vector<double> dist(ng);
  std::vector<int> prev_left(ng);
  std::vector<std::uint8_t> in_queue(ng);
  std::deque<int> queue;

  for (int s = 0; s < np; ++s) {
    if (adj[s].empty()) continue;
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    std::fill(prev_left.begin(), prev_left.end(), -1);
    std::fill(in_queue.begin(), in_queue.end(), 0);
    queue.clear();

    for (const auto& [c, v] : adj[s]) {
      if (c < dist[v]) {
        dist[v] = c;
        prev_left[v] = s;
        if (!in_queue[v]) {
          queue.push_back(v);
          in_queue[v] = 1;
        }
      }
    }
    while (!queue.empty()) {
      const int v = queue.front();
      queue.pop_front();
      in_queue[v] = 0;
      const int l = match_g[v];
      if (l < 0) continue;  // free gt pixel: terminal, no relaxation through it
      const double base = dist[v] - /* matched edge cost */ [&] {
        const double dy = gt.ys[v] - pred.ys[l];
        const double dx = gt.xs[v] - pred.xs[l];
        return dy * dy + dx * dx;
      }();
      for (const auto& [c, v2] : adj[l]) {
        if (v2 == v) continue;
        const double nd = base + c;
        if (nd < dist[v2] - 1e-12) {
          dist[v2] = nd;
          prev_left[v2] = l;
          if (!in_queue[v2]) {
            queue.push_back(v2);
            in_queue[v2] = 1;
          }
        }
      }
    }

    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int v = 0; v < ng; ++v) {
      if (match_g[v] < 0 && dist[v] < best_d) {
        best_d = dist[v];
        best = v;
      }
    }
    if (best < 0) continue;  // no augmenting path; s stays unmatched
    int v = best;
    while (v >= 0) {
      const int l = prev_left[v];
      const int next_v = match_p[l];
      match_g[v] = l;
      match_p[l] = v;
      v = next_v;
    }
  }

  long matched = 0;
  for (int u = 0; u < np; ++u) {
    if (match_p[u] >= 0) {
      pred_matched[u] = 1;
      ++matched;
    }
  }
  for (int v = 0; v < ng; ++v) {
    if (match_g[v] >= 0) gt_matched[v] = 1;
  }
  return matched;
}

long match_greedy(const PixelList& pred, const PixelList& gt, int h, double r2, int reach,
                  std::vector<std::uint8_t>& pred_matched, std::vector<std::uint8_t>& gt_matched) {
  struct Pair {
    double d2;
    int u, v;
  };
  std::vector<Pair> pairs;
  std::vector<std::pair<double, int>> cand;
  const int np = static_cast<int>(pred.ys.size());
  for (int u = 0; u < np; ++u) {
    candidates(gt, h, pred.ys[u], pred.xs[u], r2, reach, cand);
    for (const auto& [d2, v] : cand) pairs.push_back({d2, u, v});
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.d2 != b.d2) return a.d2 < b.d2;
    if (a.u != b.u) return a.u < b.u;
    return a.v < b.v;
  });
  std::vector<std::uint8_t> used_p(pred.ys.size(), 0), used_g(gt.ys.size(), 0);
  long matched = 0;
  for (const Pair& p : pairs) {
    if (used_p[p.u] || used_g[p.v]) continue;
    used_p[p.u] = 1;
    used_g[p.v] = 1;
    pred_matched[p.u] = 1;
    gt_matched[p.v] = 1;
    ++matched;
  }
  return matched;
}

void run_parallel(int n, const std::function<void(int)>& fn) {
  const int workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&]() {
      while (true) {
        const int i = next.fetch_add(1);
        if (i >= n) break;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

double precision_of(long tp, long fp) {
  return tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 1.0;
}
double recall_of(long tp_gt, long gt_total) {
  return gt_total > 0 ? static_cast<double>(tp_gt) / gt_total : 1.0;
}
double f_of(double p, double r) { return p + r > 0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

void EdgeMap::validate() const {
  if (h <= 0 || w <= 0 || values.size() != static_cast<std::size_t>(h) * w) {
    throw std::invalid_argument("EdgeMap: inconsistent dimensions");
  }
  for (float v : values) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw std::invalid_argument("EdgeMap: value " + std::to_string(v) + " outside [0,1]");
    }
  }
}

void GroundTruth::validate() const {
  if (annotations.empty()) {
    throw std::invalid_argument("GroundTruth: at least one annotation required");
  }
  for (const auto& a : annotations) {
    if (a.size() != static_cast<std::size_t>(h) * w) {
      throw std::invalid_argument("GroundTruth: annotation size mismatch");
    }
    for (std::uint8_t v : a) {
      if (v > 1) throw std::invalid_argument("GroundTruth: annotations must be binary");
    }
  }
}

int worker_count() {
  const char* env = std::getenv("CPD_NET_THREADS");
  if (env == nullptr) return 1;
  const int v = std::atoi(env);
  return std::clamp(v, 1, 64);
}

EdgeMap nms_thin(const EdgeMap& map) {
  map.validate();
  EdgeMap cur = map;
  // Suppression only removes pixels, so iterating to a fixed point
  // terminates and makes the whole operation idempotent by construction.
  while (true) {
    std::vector<std::uint8_t> mask = directional_mask(cur.values, cur.h, cur.w);
    thin_mask(mask, cur.h, cur.w);
    bool changed = false;
    for (std::size_t i = 0; i < cur.values.size(); ++i) {
      if (!mask[i] && cur.values[i] != 0.0f) {
        cur.values[i] = 0.0f;
        changed = true;
      }
    }
    if (!changed) return cur;
  }
}

MatchResult match_boundaries(const std::vector<std::uint8_t>& pred_binary, int h, int w,
                             const GroundTruth& gt, double max_dist_frac, MatchAlgo algo) {
  if (max_dist_frac <= 0.0) {
    throw std::invalid_argument("match_boundaries: max_dist_frac must be positive");
  }
  if (gt.h != h || gt.w != w) {
    throw std::invalid_argument("match_boundaries: prediction " + std::to_string(h) + "x" +
                                std::to_string(w) + " vs ground truth " + std::to_string(gt.h) +
                                "x" + std::to_string(gt.w));
  }
  if (pred_binary.size() != static_cast<std::size_t>(h) * w) {
    throw std::invalid_argument("match_boundaries: prediction size mismatch");
  }
  gt.validate();

  const double radius = max_dist_frac * std::sqrt(static_cast<double>(h) * h +
                                                  static_cast<double>(w) * w);
  const double r2 = radius * radius;
  const int reach = static_cast<int>(std::floor(radius)) + 1;
  const bool exact = algo == MatchAlgo::Exact || (algo == MatchAlgo::Auto && h <= 64 && w <= 64);

  const PixelList pred = collect_positives(pred_binary, h, w);
  const long np = static_cast<long>(pred.ys.size());

  MatchResult res;
  std::vector<std::uint8_t> pred_any(pred.ys.size(), 0);
  for (const auto& ann : gt.annotations) {
    const PixelList gtp = collect_positives(ann, h, w);
    std::vector<std::uint8_t> pm(pred.ys.size(), 0), gm(gtp.ys.size(), 0);
    long matched;
    if (exact) {
      matched = match_exact(pred, gtp, h, r2, reach, pm, gm);
    } else {
      matched = match_greedy(pred, gtp, h, r2, reach, pm, gm);
    }
    res.tp_gt += matched;
    res.fn += static_cast<long>(gtp.ys.size()) - matched;
    for (std::size_t i = 0; i < pm.size(); ++i) pred_any[i] |= pm[i];
  }
  for (std::uint8_t m : pred_any) res.tp += m;
  res.fp = np - res.tp;
  return res;
}

PrCurve compute_curve(const std::vector<EdgeMap>& preds, const std::vector<GroundTruth>& gts,
                      EvalMode mode, double max_dist_frac) {
  if (preds.size() != gts.size()) {
    throw std::invalid_argument("compute_curve: " + std::to_string(preds.size()) +
                                " predictions vs " + std::to_string(gts.size()) +
                                " ground truths");
  }
  if (preds.empty()) throw std::invalid_argument("compute_curve: empty corpus");
  if (max_dist_frac <= 0.0) {
    throw std::invalid_argument("compute_curve: max_dist_frac must be positive");
  }
  // Validate up front: the per-image loop below may run on worker threads,
  // where exceptions cannot propagate.
  for (std::size_t i = 0; i < preds.size(); ++i) {
    preds[i].validate();
    gts[i].validate();
    if (gts[i].h != preds[i].h || gts[i].w != preds[i].w) {
      throw std::invalid_argument("compute_curve: image " + std::to_string(i) +
                                  " prediction/ground-truth size mismatch");
    }
  }

  PrCurve curve;
  curve.n_images = static_cast<int>(preds.size());
  for (int t = 1; t <= 99; ++t) curve.thresholds.push_back(t / 100.0);
  const int nt = static_cast<int>(curve.thresholds.size());

  struct ImageCounts {
    std::vector<MatchResult> per_threshold;
    long gt_total = 0;
  };
  std::vector<ImageCounts> counts(preds.size());
  std::vector<std::vector<double>> image_f(preds.size());

  run_parallel(static_cast<int>(preds.size()), [&](int i) {
    const GroundTruth& gt = gts[i];
    EdgeMap scored = mode == EvalMode::SEval ? nms_thin(preds[i]) : preds[i];
    ImageCounts ic;
    ic.per_threshold.resize(nt);
    for (const auto& ann : gt.annotations) {
      for (std::uint8_t v : ann) ic.gt_total += v;
    }
    std::vector<std::uint8_t> binary(scored.values.size());
    std::vector<double> fs(nt);
    for (int t = 0; t < nt; ++t) {
      const float thr = static_cast<float>(curve.thresholds[t]);
      for (std::size_t k = 0; k < scored.values.size(); ++k) {
        binary[k] = scored.values[k] >= thr ? 1 : 0;
      }
      const MatchResult m = match_boundaries(binary, scored.h, scored.w, gt, max_dist_frac);
      ic.per_threshold[t] = m;
      const double p = precision_of(m.tp, m.fp);
      const double r = recall_of(m.tp_gt, ic.gt_total);
      fs[t] = f_of(p, r);
    }
    counts[i] = std::move(ic);
    image_f[i] = std::move(fs);
  });

  curve.image_f = std::move(image_f);
  curve.corpus.resize(nt);
  for (int t = 0; t < nt; ++t) {
    long tp = 0, fp = 0, tp_gt = 0, gt_total = 0;
    for (const auto& ic : counts) {
      tp += ic.per_threshold[t].tp;
      fp += ic.per_threshold[t].fp;
      tp_gt += ic.per_threshold[t].tp_gt;
      gt_total += ic.gt_total;
    }
    PrPoint& pt = curve.corpus[t];
    pt.threshold = curve.thresholds[t];
    pt.precision = precision_of(tp, fp);
    pt.recall = recall_of(tp_gt, gt_total);
    pt.f = f_of(pt.precision, pt.recall);
  }
  return curve;
}

OdsOis ods_ois(const PrCurve& curve) {
  if (curve.n_images <= 0 || curve.thresholds.empty()) {
    throw std::invalid_argument("ods_ois: empty curve");
  }
  OdsOis r;
  const int nt = static_cast<int>(curve.thresholds.size());
  for (int t = 0; t < nt; ++t) {
    double mean_f = 0.0;
    for (int i = 0; i < curve.n_images; ++i) mean_f += curve.image_f[i][t];
    mean_f /= curve.n_images;
    r.ods = std::max(r.ods, mean_f);
  }
  double sum_best = 0.0;
  for (int i = 0; i < curve.n_images; ++i) {
    double best = 0.0;
    for (int t = 0; t < nt; ++t) best = std::max(best, curve.image_f[i][t]);
    sum_best += best;
  }
  r.ois = sum_best / curve.n_images;
  return r;
}

ApResult average_precision(const PrCurve& curve) {
  if (curve.corpus.empty()) throw std::invalid_argument("average_precision: empty curve");
  std::vector<std::pair<double, double>> pts;  // (recall, precision)
  pts.reserve(curve.corpus.size());
  for (const auto& p : curve.corpus) pts.emplace_back(p.recall, p.precision);
  std::sort(pts.begin(), pts.end());

  ApResult res;
  if (pts.back().first - pts.front().first <= 0.0) {
    res.degenerate = true;
    res.ap = 0.0;
    return res;
  }
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double dr = pts[i].first - pts[i - 1].first;
    area += dr * 0.5 * (pts[i].second + pts[i - 1].second);
  }
  res.ap = area;
  return res;
}

std::optional<double> average_crispness(const EdgeMap& raw) {
  const double before = sum_values(raw);
  if (before <= 0.0) return std::nullopt;
  const double after = sum_values(nms_thin(raw));
  return after / before;
}

std::string format_report_table(const MetricsReport& r) {
  std::ostringstream os;
  os << "  metric   value\n";
  os << "  ------   -----\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "  ODS      %.4f\n", r.ods);
  os << buf;
  std::snprintf(buf, sizeof(buf), "  OIS      %.4f\n", r.ois);
  os << buf;
  std::snprintf(buf, sizeof(buf), "  AP       %.4f\n", r.ap);
  os << buf;
  if (r.ac_defined) {
    std::snprintf(buf, sizeof(buf), "  AC       %.4f\n", r.ac);
    os << buf;
  } else {
    os << "  AC       n/a\n";
  }
  os << "  mode     " << (r.mode == "s" ? "S-Eval" : "C-Eval") << "\n";
  std::snprintf(buf, sizeof(buf), "  tol      %.4f\n", r.tolerance);
  os << buf;
  os << "  images   " << r.n_images << "\n";
  return os.str();
}

std::string format_report_kv(const MetricsReport& r) {
  std::ostringstream os;
  os.precision(12);
  os << "ods=" << r.ods << "\n";
  os << "ois=" << r.ois << "\n";
  os << "ap=" << r.ap << "\n";
  if (r.ac_defined) {
    os << "ac=" << r.ac << "\n";
  } else {
    os << "ac=nan\n";
  }
  os << "mode=" << r.mode << "\n";
  os << "tolerance=" << r.tolerance << "\n";
  os << "n_images=" << r.n_images << "\n";
  return os.str();
}

}  // namespace cpdnet::eval
