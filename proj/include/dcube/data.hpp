#pragma once

#include <functional>
#include <map>

#include "dcube/core/rng.hpp"
#include "dcube/core/tensor.hpp"

namespace dcube {

// ----------------------------------------------------------- toy dataset

struct ToyDatasetSpec {
  int num_classes = 3;
  std::vector<int> class_counts = {100, 100, 400};  // train counts per class
  int channels = 1;
  int height = 32;
  int width = 32;
  double size_min = 0.8;   // relative scale of shape radii
  double size_max = 1.2;
  double noise_level = 0.1;
  double difficulty = 0.5;  // 0 = fully distinct classes, 1 = identical geometry
  double test_fraction = 0.25;

  void validate() const {
    if (num_classes < 1 || static_cast<int>(class_counts.size()) != num_classes)
      throw std::invalid_argument("ToyDatasetSpec: class_counts must list one count per class");
    for (int c : class_counts)
      if (c < 2) throw std::invalid_argument("ToyDatasetSpec: need at least 2 samples per class");
    if (difficulty < 0.0 || difficulty > 1.0)
      throw std::invalid_argument("ToyDatasetSpec: difficulty outside [0,1]");
    if (test_fraction <= 0.0 || test_fraction >= 1.0)
      throw std::invalid_argument("ToyDatasetSpec: test_fraction outside (0,1)");
  }
};

struct Dataset {
  Tensor images;            // [N,C,H,W], values in [-1,1]
  std::vector<int> labels;  // in {0..K-1}
  std::vector<uint8_t> synthetic;  // 1 for generated samples
  int num_classes = 0;

  int size() const { return images.empty() ? 0 : images.dim(0); }

  std::vector<int> class_counts() const {
    std::vector<int> counts(static_cast<size_t>(num_classes), 0);
    for (int y : labels) counts[static_cast<size_t>(y)]++;
    return counts;
  }

  Tensor image(int i) const {
    const int c = images.dim(1), h = images.dim(2), w = images.dim(3);
    Tensor out({1, c, h, w});
    std::copy_n(images.data() + int64_t(i) * c * h * w, int64_t(c) * h * w, out.data());
    return out;
  }

  Dataset subset(const std::vector<int>& idx) const {
    Dataset out;
    out.num_classes = num_classes;
    const int c = images.dim(1), h = images.dim(2), w = images.dim(3);
    out.images = Tensor({static_cast<int>(idx.size()), c, h, w});
    for (size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(images.data() + int64_t(idx[i]) * c * h * w, int64_t(c) * h * w,
                  out.images.data() + int64_t(i) * c * h * w);
      out.labels.push_back(labels[static_cast<size_t>(idx[i])]);
      out.synthetic.push_back(synthetic.empty() ? 0 : synthetic[static_cast<size_t>(idx[i])]);
    }
    return out;
  }
};

struct DatasetSplits {
  Dataset train, test;
};

namespace detail {

// smooth indicator, steepness tuned for 32x32 rendering
inline double soft_edge(double signed_dist, double sharp = 0.7) {
  return 1.0 / (1.0 + std::exp(-signed_dist / sharp));
}

inline double shape_intensity(int kind, double x, double y, double cx, double cy, double r,
                              double aux, double phase) {
  const double dx = x - cx, dy = y - cy;
  const double dist = std::sqrt(dx * dx + dy * dy);
  switch (kind % 3) {
    case 0:  // filled disk
      return soft_edge(r - dist);
    case 1:  // ring
      return soft_edge(aux - std::abs(dist - r), 0.5);
    default: {  // horizontal bars windowed to a disk
      const double stripe = 0.5 + 0.5 * std::tanh(std::sin(2.0 * M_PI * (y + phase) / aux) / 0.35);
      return stripe * soft_edge(1.4 * r - dist, 1.2);
    }
  }
}

inline void render_toy_image(const ToyDatasetSpec& spec, int label, Rng& rng, double* out) {
  const int h = spec.height, w = spec.width;
  const double scale = rng.uniform(spec.size_min, spec.size_max);
  const double cx = w / 2.0 + rng.uniform(-0.12, 0.12) * w;
  const double cy = h / 2.0 + rng.uniform(-0.12, 0.12) * h;
  const double r = 0.22 * std::min(h, w) * scale;
  const double aux = (label % 3 == 1) ? rng.uniform(1.4, 2.4) : rng.uniform(5.5, 8.5);
  const double phase = rng.uniform(0.0, 8.0);
  // the common geometry all classes morph toward as difficulty -> 1
  const double common_r = 0.26 * std::min(h, w) * scale;
  const double d = spec.difficulty;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double g_class = shape_intensity(label, x, y, cx, cy, r, aux, phase);
      const double g_common = soft_edge(common_r - std::hypot(x - cx, y - cy));
      const double g = (1.0 - d) * g_class + d * g_common;
      double v = -0.8 + 1.5 * g + spec.noise_level * rng.normal();
      out[int64_t(y) * w + x] = std::clamp(v, -1.0, 1.0);
    }
}

}  // namespace detail

// Procedural imbalanced toy dataset. The same (spec, seed) pair always yields
// bitwise-identical splits; train and test draw from disjoint per-image
// substreams.
inline DatasetSplits generate_toy_dataset(const ToyDatasetSpec& spec, uint64_t seed) {
  spec.validate();
  Rng root(seed);
  DatasetSplits out;

  auto build = [&](const char* tag, const std::vector<int>& counts, uint64_t index_base) {
    Dataset ds;
    ds.num_classes = spec.num_classes;
    int total = 0;
    for (int c : counts) total += c;
    ds.images = Tensor({total, spec.channels, spec.height, spec.width});
    ds.synthetic.assign(static_cast<size_t>(total), 0);
    int i = 0;
    for (int k = 0; k < spec.num_classes; ++k)
      for (int j = 0; j < counts[static_cast<size_t>(k)]; ++j, ++i) {
        Rng img_rng = root.substream(tag, index_base + static_cast<uint64_t>(i));
        for (int ch = 0; ch < spec.channels; ++ch)
          detail::render_toy_image(
              spec, k, img_rng,
              ds.images.data() + (int64_t(i) * spec.channels + ch) * spec.height * spec.width);
        ds.labels.push_back(k);
      }
    return ds;
  };

  std::vector<int> test_counts(static_cast<size_t>(spec.num_classes));
  for (int k = 0; k < spec.num_classes; ++k) {
    test_counts[static_cast<size_t>(k)] = std::max(
        1, static_cast<int>(std::lround(spec.class_counts[static_cast<size_t>(k)] *
                                        spec.test_fraction)));
  }
  out.train = build("train-img", spec.class_counts, 0);
  out.test = build("test-img", test_counts, 1u << 24);
  return out;
}

// ----------------------------------------------------------- metrics

struct MetricsReport {
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_precision, per_class_recall, per_class_f1;
  std::vector<std::vector<int64_t>> confusion;  // [truth][prediction]
};

// Macro-averaged classification metrics. A class never predicted gets
// precision 0; a class absent from the truth gets recall 0.
inline MetricsReport compute_metrics(const std::vector<int>& predictions,
                                     const std::vector<int>& truth, int num_classes) {
  if (predictions.size() != truth.size())
    throw std::invalid_argument("compute_metrics: length mismatch");
  if (predictions.empty()) throw std::invalid_argument("compute_metrics: empty inputs");
  MetricsReport r;
  r.confusion.assign(static_cast<size_t>(num_classes),
                     std::vector<int64_t>(static_cast<size_t>(num_classes), 0));
  for (size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predictions[i];
    if (t < 0 || t >= num_classes || p < 0 || p >= num_classes)
      throw std::invalid_argument("compute_metrics: label out of range");
    r.confusion[static_cast<size_t>(t)][static_cast<size_t>(p)]++;
  }
  int64_t correct = 0;
  for (int k = 0; k < num_classes; ++k) correct += r.confusion[size_t(k)][size_t(k)];
  r.accuracy = double(correct) / double(truth.size());
  for (int k = 0; k < num_classes; ++k) {
    int64_t tp = r.confusion[size_t(k)][size_t(k)], fp = 0, fn = 0;
    for (int j = 0; j < num_classes; ++j) {
      if (j == k) continue;
      fp += r.confusion[size_t(j)][size_t(k)];
      fn += r.confusion[size_t(k)][size_t(j)];
    }
    const double prec = (tp + fp) > 0 ? double(tp) / double(tp + fp) : 0.0;
    const double rec = (tp + fn) > 0 ? double(tp) / double(tp + fn) : 0.0;
    const double f1 = (prec + rec) > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    r.per_class_precision.push_back(prec);
    r.per_class_recall.push_back(rec);
    r.per_class_f1.push_back(f1);
    r.macro_precision += prec / num_classes;
    r.macro_recall += rec / num_classes;
    r.macro_f1 += f1 / num_classes;
  }
  return r;
}

// ----------------------------------------------------------- rebalancing

struct RebalancePlan {
  std::vector<int> additions;   // synthetic samples per class
  std::vector<int> target_counts;
};

// Smallest per-class synthetic additions that bring counts to the requested
// ratio while keeping every original sample.
inline RebalancePlan solve_rebalance(const std::vector<int>& counts,
                                     const std::vector<int>& ratio) {
  if (counts.size() != ratio.size() || counts.empty())
    throw std::invalid_argument("solve_rebalance: ratio arity mismatch");
  double ratio_sum = 0.0;
  for (int r : ratio) {
    if (r <= 0) throw std::invalid_argument("solve_rebalance: ratio entries must be positive");
    ratio_sum += r;
  }
  double total = 0.0;
  for (size_t k = 0; k < counts.size(); ++k)
    total = std::max(total, counts[k] * ratio_sum / double(ratio[k]));
  RebalancePlan plan;
  for (size_t k = 0; k < counts.size(); ++k) {
    const int target = static_cast<int>(std::lround(ratio[k] * total / ratio_sum));
    plan.target_counts.push_back(std::max(target, counts[k]));
    plan.additions.push_back(std::max(0, target - counts[k]));
  }
  return plan;
}

// sampler(class, count) -> [count,C,H,W] images
using ClassSampler = std::function<Tensor(int, int)>;

inline Dataset rebalance_with_synthetic(const Dataset& dataset, const std::vector<int>& ratio,
                                        const ClassSampler& sampler, int max_synthetic = 100000) {
  const RebalancePlan plan = solve_rebalance(dataset.class_counts(), ratio);
  int total_add = 0;
  for (int a : plan.additions) total_add += a;
  if (total_add > max_synthetic)
    throw std::runtime_error("rebalance_with_synthetic: requested ratio needs " +
                             std::to_string(total_add) + " synthetic samples, cap is " +
                             std::to_string(max_synthetic));
  const int c = dataset.images.dim(1), h = dataset.images.dim(2), w = dataset.images.dim(3);
  Dataset out;
  out.num_classes = dataset.num_classes;
  out.images = Tensor({dataset.size() + total_add, c, h, w});
  std::copy_n(dataset.images.data(), dataset.images.numel(), out.images.data());
  out.labels = dataset.labels;
  out.synthetic = dataset.synthetic.empty()
                      ? std::vector<uint8_t>(static_cast<size_t>(dataset.size()), 0)
                      : dataset.synthetic;
  int64_t off = dataset.images.numel();
  for (int k = 0; k < dataset.num_classes; ++k) {
    const int n = plan.additions[static_cast<size_t>(k)];
    if (n == 0) continue;
    Tensor gen = sampler(k, n);
    if (gen.dim(0) != n || gen.dim(1) != c || gen.dim(2) != h || gen.dim(3) != w)
      throw std::runtime_error("rebalance_with_synthetic: sampler returned wrong shape");
    std::copy_n(gen.data(), gen.numel(), out.images.data() + off);
    off += gen.numel();
    for (int i = 0; i < n; ++i) {
      out.labels.push_back(k);
      out.synthetic.push_back(1);
    }
  }
  return out;
}

}  // namespace dcube
