#include "cpdnet/data.hpp"

#include "cpdnet/errors.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <cctype>
#include <map>
#include <stdexcept>

namespace cpdnet::data {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

// "stem.a3" -> {"stem", 3}; anything else -> {name, -1}.
std::pair<std::string, int> split_annotator_suffix(const std::string& name) {
  const auto dot = name.find_last_of('.');
  if (dot == std::string::npos || dot + 2 > name.size() || name[dot + 1] != 'a') {
    return {name, -1};
  }
  const std::string digits = name.substr(dot + 2);
  if (digits.empty() || !std::all_of(digits.begin(), digits.end(),
                                     [](char c) { return std::isdigit(c); })) {
    return {name, -1};
  }
  return {name.substr(0, dot), std::stoi(digits)};
}

std::string strip_extension(const std::string& filename) {
  const auto dot = filename.find_last_of('.');
  return dot == std::string::npos ? filename : filename.substr(0, dot);
}

float label_value(const io::ImageU8& img, std::size_t idx) {
  if (img.channels == 1) return img.pixels[idx] / 255.0f;
  // rgb label files: use the mean
  const std::size_t base = idx * 3;
  return (img.pixels[base] + img.pixels[base + 1] + img.pixels[base + 2]) / (3.0f * 255.0f);
}

int reflect_index(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

// Largest axis-aligned rectangle inscribed in a w x h rectangle rotated by
// `angle` radians.
void inscribed_rect(double w, double h, double angle, double& wr, double& hr) {
  const double sin_a = std::abs(std::sin(angle));
  const double cos_a = std::abs(std::cos(angle));
  if (sin_a < 1e-12) {
    wr = w;
    hr = h;
    return;
  }
  if (cos_a < 1e-12) {
    wr = h;
    hr = w;
    return;
  }
  const bool width_longer = w >= h;
  const double side_long = width_longer ? w : h;
  const double side_short = width_longer ? h : w;
  if (side_short <= 2.0 * sin_a * cos_a * side_long || std::abs(sin_a - cos_a) < 1e-10) {
    const double x = 0.5 * side_short;
    if (width_longer) {
      wr = x / sin_a;
      hr = x / cos_a;
    } else {
      wr = x / cos_a;
      hr = x / sin_a;
    }
  } else {
    const double cos_2a = cos_a * cos_a - sin_a * sin_a;
    wr = (w * cos_a - h * sin_a) / cos_2a;
    hr = (h * cos_a - w * sin_a) / cos_2a;
  }
}

// Exact 90-degree clockwise rotation of a 1xCxHxW tensor.
Tensor rot90_cw(const Tensor& t) {
  const Shape& s = t.shape();
  Tensor out = Tensor::zeros(Shape{s.n, s.c, s.w, s.h});
  for (int c = 0; c < s.c; ++c) {
    for (int y = 0; y < s.w; ++y) {
      for (int x = 0; x < s.h; ++x) {
        out.at(0, c, y, x) = t.at(0, c, s.h - 1 - x, y);
      }
    }
  }
  return out;
}

float sample_bilinear(const Tensor& t, int c, double y, double x) {
  const Shape& s = t.shape();
  y = std::clamp(y, 0.0, static_cast<double>(s.h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(s.w - 1));
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, s.h - 1), x1 = std::min(x0 + 1, s.w - 1);
  const double fy = y - y0, fx = x - x0;
  return static_cast<float>(t.at(0, c, y0, x0) * (1 - fy) * (1 - fx) +
                            t.at(0, c, y0, x1) * (1 - fy) * fx +
                            t.at(0, c, y1, x0) * fy * (1 - fx) +
                            t.at(0, c, y1, x1) * fy * fx);
}

float sample_nearest(const Tensor& t, int c, double y, double x) {
  const Shape& s = t.shape();
  const int yi = std::clamp(static_cast<int>(std::lround(y)), 0, s.h - 1);
  const int xi = std::clamp(static_cast<int>(std::lround(x)), 0, s.w - 1);
  return t.at(0, c, yi, xi);
}

}  // namespace

DatasetManifest load_manifest(const std::string& root, const std::string& split) {
  const fs::path image_dir = fs::path(root) / "images" / split;
  const fs::path label_dir = fs::path(root) / "labels" / split;
  if (!fs::is_directory(image_dir)) {
    throw DataError("load_manifest: missing directory " + image_dir.string());
  }
  if (!fs::is_directory(label_dir)) {
    throw DataError("load_manifest: missing directory " + label_dir.string());
  }

  std::map<std::string, std::string> images;  // stem -> path
  for (const auto& e : fs::directory_iterator(image_dir)) {
    if (!e.is_regular_file() || !io::has_image_extension(e.path().filename().string())) continue;
    const std::string stem = strip_extension(e.path().filename().string());
    if (images.count(stem)) {
      throw DataError("load_manifest: duplicate image stem '" + stem + "'");
    }
    images[stem] = e.path().string();
  }

  std::map<std::string, std::map<int, std::string>> labels;  // stem -> annotator -> path
  for (const auto& e : fs::directory_iterator(label_dir)) {
    if (!e.is_regular_file() || !io::has_image_extension(e.path().filename().string())) continue;
    const std::string base = strip_extension(e.path().filename().string());
    const auto [stem, annotator] = split_annotator_suffix(base);
    auto& slot = labels[stem];
    const int key = annotator < 0 ? 0 : annotator;
    if (slot.count(key)) {
      throw DataError("load_manifest: duplicate label for stem '" + stem + "'");
    }
    slot[key] = e.path().string();
  }

  DatasetManifest manifest;
  manifest.root = root;
  manifest.split = split;
  for (const auto& [stem, image_path] : images) {
    const auto it = labels.find(stem);
    if (it == labels.end()) {
      throw DataError("load_manifest: image '" + stem + "' has no label file");
    }
    ManifestEntry entry;
    entry.id = stem;
    entry.image_path = image_path;
    for (const auto& [annotator, path] : it->second) entry.label_paths.push_back(path);
    manifest.entries.push_back(std::move(entry));
  }
  for (const auto& [stem, paths] : labels) {
    if (!images.count(stem)) {
      throw DataError("load_manifest: label '" + stem + "' has no image file");
    }
  }
  if (manifest.entries.empty()) {
    throw DataError("load_manifest: split '" + split + "' is empty under " + root);
  }
  return manifest;
}

Tensor image_to_tensor(const io::ImageU8& img) {
  Tensor t = Tensor::zeros(Shape{1, 3, img.h, img.w});
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * img.w + x;
      for (int c = 0; c < 3; ++c) {
        const std::uint8_t v =
            img.channels == 1 ? img.pixels[idx] : img.pixels[idx * 3 + c];
        t.at(0, c, y, x) = v / 255.0f;
      }
    }
  }
  return t;
}

Sample load_sample(const ManifestEntry& entry, const LoadOptions& opts) {
  Sample s;
  s.id = entry.id;
  const io::ImageU8 img = io::read_image(entry.image_path);
  s.image = image_to_tensor(img);

  Tensor acc = Tensor::zeros(Shape{1, 1, img.h, img.w});
  for (const std::string& path : entry.label_paths) {
    const io::ImageU8 lab = io::read_image(path);
    if (lab.h != img.h || lab.w != img.w) {
      throw DataError("load_sample: label size mismatch for stem '" + entry.id + "'");
    }
    for (std::size_t i = 0; i < static_cast<std::size_t>(img.h) * img.w; ++i) {
      acc.data()[i] += label_value(lab, i);
    }
  }
  const float inv = 1.0f / static_cast<float>(entry.label_paths.size());
  for (float& v : acc.data()) {
    v *= inv;
    if (!opts.soft_labels) v = v >= 0.5f ? 1.0f : 0.0f;
  }
  s.label = acc;
  return s;
}

eval::GroundTruth load_ground_truth(const ManifestEntry& entry) {
  eval::GroundTruth gt;
  for (const std::string& path : entry.label_paths) {
    const io::ImageU8 lab = io::read_image(path);
    if (gt.annotations.empty()) {
      gt.h = lab.h;
      gt.w = lab.w;
    } else if (lab.h != gt.h || lab.w != gt.w) {
      throw DataError("load_ground_truth: annotation size mismatch for stem '" +
                               entry.id + "'");
    }
    std::vector<std::uint8_t> ann(static_cast<std::size_t>(lab.h) * lab.w);
    for (std::size_t i = 0; i < ann.size(); ++i) {
      ann[i] = label_value(lab, i) >= 0.5f ? 1 : 0;
    }
    gt.annotations.push_back(std::move(ann));
  }
  gt.validate();
  return gt;
}

std::vector<std::uint8_t> edge_map_to_u8(const eval::EdgeMap& map) {
  std::vector<std::uint8_t> out(map.values.size());
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(255.0f * map.values[i]));
  }
  return out;
}

eval::EdgeMap tensor_to_edge_map(const Tensor& t, const std::string& id) {
  const Shape& s = t.shape();
  if (s.n != 1 || s.c != 1) {
    throw std::invalid_argument("tensor_to_edge_map: expected 1x1xHxW, got " + s.str());
  }
  eval::EdgeMap m;
  m.h = s.h;
  m.w = s.w;
  m.source_id = id;
  m.values = t.data();
  for (float& v : m.values) v = std::clamp(v, 0.0f, 1.0f);
  return m;
}

AugmentResult augment(const Sample& sample, const AugmentationPlan& plan) {
  const Shape& s = sample.image.shape();
  const int H = s.h, W = s.w;
  Rng rng(plan.seed);
  AugmentResult result;

  std::vector<int> fine_angles{0};
  if (plan.fine_rotation_step > 0) {
    fine_angles.clear();
    for (int a = 0; a < 360; a += plan.fine_rotation_step) fine_angles.push_back(a);
  }

  int variant = 0;
  for (int base : plan.base_rotations) {
    // Exact right-angle rotation.
    Tensor img = sample.image;
    Tensor lab = sample.label;
    for (int k = 0; k < ((base / 90) % 4 + 4) % 4; ++k) {
      img = rot90_cw(img);
      lab = rot90_cw(lab);
    }
    const int bh = img.shape().h, bw = img.shape().w;

    for (int fine : fine_angles) {
      if (plan.cap > 0 && static_cast<int>(result.samples.size()) >= plan.cap) {
        return result;
      }
      ++variant;
      if (fine == 0 && bh == H && bw == W) {
        Sample out;
        out.image = img.clone();
        out.label = lab.clone();
        out.id = sample.id + "#r" + std::to_string(base) + "f0";
        result.samples.push_back(std::move(out));
        continue;
      }

      const double theta = fine * kPi / 180.0;
      double wr, hr;
      inscribed_rect(bw, bh, theta, wr, hr);
      if (wr <= 1.0 || hr <= 1.0) {
        ++result.skipped;
        continue;
      }
      const double scale = std::max(static_cast<double>(W) / wr, static_cast<double>(H) / hr);
      const double slack_x = wr * scale - W;
      const double slack_y = hr * scale - H;
      if (slack_x < -1e-9 || slack_y < -1e-9) {
        ++result.skipped;
        continue;
      }
      const double jx = (rng.next_double() - 0.5) * std::max(0.0, slack_x);
      const double jy = (rng.next_double() - 0.5) * std::max(0.0, slack_y);

      const double cos_t = std::cos(theta), sin_t = std::sin(theta);
      const double cx_src = (bw - 1) / 2.0, cy_src = (bh - 1) / 2.0;
      const double cx_dst = (W - 1) / 2.0, cy_dst = (H - 1) / 2.0;

      Sample out;
      out.image = Tensor::zeros(Shape{1, 3, H, W});
      out.label = Tensor::zeros(Shape{1, 1, H, W});
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const double u = (x - cx_dst + jx) / scale;
          const double v = (y - cy_dst + jy) / scale;
          // Inverse rotation back into the unrotated base frame.
          const double xs = cos_t * u + sin_t * v + cx_src;
          const double ys = -sin_t * u + cos_t * v + cy_src;
          for (int c = 0; c < 3; ++c) {
            out.image.at(0, c, y, x) = sample_bilinear(img, c, ys, xs);
          }
          out.label.at(0, 0, y, x) = sample_nearest(lab, 0, ys, xs);
        }
      }
      out.id = sample.id + "#r" + std::to_string(base) + "f" + std::to_string(fine);
      result.samples.push_back(std::move(out));
    }
  }
  (void)variant;
  return result;
}

Tensor reflect_pad(const Tensor& image, int min_h, int min_w, int multiple) {
  const Shape& s = image.shape();
  auto round_up = [multiple](int v) {
    return multiple > 1 ? ((v + multiple - 1) / multiple) * multiple : v;
  };
  const int th = round_up(std::max(s.h, min_h));
  const int tw = round_up(std::max(s.w, min_w));
  if (th == s.h && tw == s.w) return image;
  Tensor out = Tensor::zeros(Shape{s.n, s.c, th, tw});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < th; ++y) {
        const int sy = reflect_index(y, s.h);
        for (int x = 0; x < tw; ++x) {
          out.at(n, c, y, x) = image.at(n, c, sy, reflect_index(x, s.w));
        }
      }
    }
  }
  return out;
}

std::vector<int> window_origins(int size, int window, int stride) {
  if (window >= size) return {0};
  std::vector<int> origins;
  for (int o = 0; o + window <= size; o += stride) origins.push_back(o);
  if (origins.back() != size - window) origins.push_back(size - window);
  return origins;
}

PatchSampler::PatchSampler(std::vector<Sample> samples, const PatchOptions& opts)
    : samples_(std::move(samples)), opts_(opts), rng_(opts.seed) {
  if (samples_.empty()) throw std::invalid_argument("PatchSampler: no samples");
  for (Sample& s : samples_) {
    if (s.image.shape().h < opts_.patch || s.image.shape().w < opts_.patch) {
      s.image = reflect_pad(s.image, opts_.patch, opts_.patch, 1);
      s.label = reflect_pad(s.label, opts_.patch, opts_.patch, 1);
    }
  }
  order_.resize(samples_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
  reshuffle();
}

void PatchSampler::reshuffle() {
  for (std::size_t i = order_.size(); i > 1; --i) {
    const std::size_t j = rng_.next_below(i);
    std::swap(order_[i - 1], order_[j]);
  }
  cursor_ = 0;
}

SamplerState PatchSampler::state() const {
  SamplerState s;
  s.rng_state = rng_.state();
  s.cursor = cursor_;
  s.order = order_;
  return s;
}

void PatchSampler::restore(const SamplerState& s) {
  if (s.order.size() != order_.size()) {
    throw std::invalid_argument("PatchSampler::restore: state does not match corpus size");
  }
  rng_.set_state(s.rng_state);
  cursor_ = static_cast<std::size_t>(s.cursor);
  order_ = s.order;
}

Batch PatchSampler::next() {
  const int p = opts_.patch;
  Batch batch;
  batch.images = Tensor::zeros(Shape{opts_.batch, 3, p, p});
  batch.labels = Tensor::zeros(Shape{opts_.batch, 1, p, p});
  for (int b = 0; b < opts_.batch; ++b) {
    if (cursor_ >= order_.size()) reshuffle();
    const Sample& s = samples_[order_[cursor_++]];
    const Shape& ss = s.image.shape();
    const int oy = static_cast<int>(rng_.next_below(ss.h - p + 1));
    const int ox = static_cast<int>(rng_.next_below(ss.w - p + 1));
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < p; ++y) {
        for (int x = 0; x < p; ++x) {
          batch.images.at(b, c, y, x) = s.image.at(0, c, oy + y, ox + x);
        }
      }
    }
    for (int y = 0; y < p; ++y) {
      for (int x = 0; x < p; ++x) {
        batch.labels.at(b, 0, y, x) = s.label.at(0, 0, oy + y, ox + x);
      }
    }
  }
  return batch;
}

eval::EdgeMap sliding_window_predict(CpdNetModel& model, const Tensor& image, int window,
                                     int stride) {
  const Shape& s = image.shape();
  if (s.n != 1 || s.c != 3) {
    throw std::invalid_argument("sliding_window_predict: expected 1x3xHxW image, got " + s.str());
  }
  if (window % 8 != 0) {
    throw std::invalid_argument("sliding_window_predict: window must be divisible by 8");
  }
  const Tensor padded = reflect_pad(image, window, window, 1);
  const int ph = padded.shape().h, pw = padded.shape().w;
  const std::vector<int> oys = window_origins(ph, window, stride);
  const std::vector<int> oxs = window_origins(pw, window, stride);

  std::vector<double> acc(static_cast<std::size_t>(ph) * pw, 0.0);
  std::vector<int> cover(acc.size(), 0);
  Tensor crop = Tensor::zeros(Shape{1, 3, window, window});
  for (int oy : oys) {
    for (int ox : oxs) {
      for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < window; ++y) {
          for (int x = 0; x < window; ++x) {
            crop.at(0, c, y, x) = padded.at(0, c, oy + y, ox + x);
          }
        }
      }
      const Tensor out = model.forward(crop, /*training=*/false);
      for (int y = 0; y < window; ++y) {
        for (int x = 0; x < window; ++x) {
          const std::size_t i = static_cast<std::size_t>(oy + y) * pw + (ox + x);
          acc[i] += out.at(0, 0, y, x);
          cover[i] += 1;
        }
      }
    }
  }

  eval::EdgeMap map;
  map.h = s.h;
  map.w = s.w;
  map.values.resize(static_cast<std::size_t>(s.h) * s.w);
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * pw + x;
      map.values[static_cast<std::size_t>(y) * s.w + x] =
          std::clamp(static_cast<float>(acc[i] / cover[i]), 0.0f, 1.0f);
    }
  }
  return map;
}

}  // namespace cpdnet::data
