#pragma once

#include "dcube/data.hpp"
#include "dcube/denoiser.hpp"

namespace dcube {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Empirical CDF of a sorted sample at x: (count of values <= x) / n.
inline double ecdf_eval(const std::vector<double>& sorted_sample, double x) {
  if (sorted_sample.empty()) throw std::invalid_argument("ecdf_eval: empty sample");
  const auto it = std::upper_bound(sorted_sample.begin(), sorted_sample.end(), x);
  return double(it - sorted_sample.begin()) / double(sorted_sample.size());
}

// One-sample Kolmogorov-Smirnov statistic against the standard normal CDF.
// With standardize the sample is first shifted/scaled by its own mean and
// (n-1) standard deviation. The sup over all reals reduces to a max over
// order statistics:
//   D = max_i max( i/n - Phi(z_(i)), Phi(z_(i)) - (i-1)/n )
inline double ks_statistic(std::vector<double> sample, bool standardize = true) {
  const size_t n = sample.size();
  if (n == 0) throw std::invalid_argument("ks_statistic: empty sample");
  if (standardize) {
    if (n < 2) throw std::invalid_argument("ks_statistic: standardize needs n >= 2");
    double mean = 0.0;
    for (double v : sample) mean += v;
    mean /= double(n);
    double var = 0.0;
    for (double v : sample) var += (v - mean) * (v - mean);
    var /= double(n - 1);
    if (var <= 0.0) throw std::invalid_argument("ks_statistic: zero-variance sample");
    const double inv = 1.0 / std::sqrt(var);
    for (double& v : sample) v = (v - mean) * inv;
  }
  std::sort(sample.begin(), sample.end());
  double d = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double phi = normal_cdf(sample[i]);
    d = std::max(d, double(i + 1) / double(n) - phi);
    d = std::max(d, phi - double(i) / double(n));
  }
  return d;
}

// Asymptotic Kolmogorov p-value:
//   p = 2 * sum_{k>=1} (-1)^{k-1} exp(-2 k^2 n D^2)
// truncated once terms drop below 1e-12 (hard cap 100 terms), clipped to
// [0,1].
inline double ks_pvalue(double d, int64_t n) {
  if (d < 0.0 || d > 1.0) throw std::invalid_argument("ks_pvalue: D outside [0,1]");
  if (n < 1) throw std::invalid_argument("ks_pvalue: n must be >= 1");
  const double c = 2.0 * double(n) * d * d;
  if (c == 0.0) return 1.0;
  double sum = 0.0;
  double sign = 1.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-c * double(k) * double(k));
    sum += sign * term;
    sign = -sign;
    if (term < 1e-12) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

// ----------------------------------------------------------- layer scan

struct ScanProtocol {
  int timestep_t = 100;
  int batch_size = 256;
  bool standardize = true;
  int sample_cap = 1024;       // per-feature-map KS sample size cap (0 = full map)
  bool average_maps_first = false;  // alternate reading: mean map across batch, single KS
};

struct TapGaussianity {
  std::string id;
  double d_mean = 0.0;
  double p_mean = 0.0;
  bool gaussian = false;  // p_mean > 0.05
  int64_t sample_count = 0;
};

struct GaussianityReport {
  ScanProtocol protocol;
  std::vector<TapGaussianity> taps;

  const TapGaussianity& tap(const std::string& id) const {
    for (const auto& t : taps)
      if (t.id == id) return t;
    throw std::out_of_range("GaussianityReport: no tap '" + id + "'");
  }
};

constexpr double kGaussianPThreshold = 0.05;

namespace detail {

// Deterministic stride subsample of a flattened feature map to at most `cap`
// values (cap <= 0 keeps the whole map).
inline std::vector<double> subsample_map(const double* data, int64_t n, int cap) {
  if (cap <= 0 || n <= cap) return std::vector<double>(data, data + n);
  std::vector<double> out(static_cast<size_t>(cap));
  for (int i = 0; i < cap; ++i) out[static_cast<size_t>(i)] = data[(int64_t(i) * n) / cap];
  return out;
}

}  // namespace detail

// Scans every configured tap of a frozen denoiser at a fixed timestep: one
// batch is noised via q_sample, forwarded, and each tap's per-sample feature
// map is flattened and KS-tested against the standard normal. Per-sample
// p-values (and D) are averaged over the batch; the 0.05 rule is applied to
// the averaged p.
inline GaussianityReport scan_taps(const CondUNet& model, const Dataset& data,
                                   const NoiseSchedule& sched, const ScanProtocol& protocol,
                                   uint64_t seed) {
  if (data.size() < protocol.batch_size)
    throw std::invalid_argument("scan_taps: dataset smaller than scan batch (" +
                                std::to_string(data.size()) + " < " +
                                std::to_string(protocol.batch_size) + ")");
  sched.check_t(protocol.timestep_t);

  Rng rng = Rng(seed).substream("scan");
  std::vector<int> idx(static_cast<size_t>(data.size()));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  for (size_t i = idx.size() - 1; i > 0; --i)
    std::swap(idx[i], idx[rng.below(static_cast<uint64_t>(i + 1))]);
  idx.resize(static_cast<size_t>(protocol.batch_size));

  const Dataset batch = data.subset(idx);
  const Tensor eps = rng.normal_tensor(batch.images.shape());
  const Tensor xt = q_sample(batch.images, protocol.timestep_t, eps, sched);
  const std::vector<int> t(static_cast<size_t>(protocol.batch_size), protocol.timestep_t);
  DenoiserOutput out = model.forward(xt, t, ClassCondition::from_labels(batch.labels));

  GaussianityReport report;
  report.protocol = protocol;
  for (const std::string& id : model.config().effective_tap_ids()) {
    const Tensor& act = out.taps.at(id).val();
    if (act.has_nan()) throw std::runtime_error("scan_taps: NaN activations at tap " + id);
    const int64_t map_size = act.numel() / act.dim(0);
    TapGaussianity tg;
    tg.id = id;
    if (protocol.average_maps_first) {
      std::vector<double> mean_map(static_cast<size_t>(map_size), 0.0);
      for (int i = 0; i < act.dim(0); ++i)
        for (int64_t j = 0; j < map_size; ++j)
          mean_map[static_cast<size_t>(j)] += act[int64_t(i) * map_size + j] / act.dim(0);
      auto sample = detail::subsample_map(mean_map.data(), map_size, protocol.sample_cap);
      tg.sample_count = static_cast<int64_t>(sample.size());
      tg.d_mean = ks_statistic(std::move(sample), protocol.standardize);
      tg.p_mean = ks_pvalue(tg.d_mean, tg.sample_count);
    } else {
      tg.sample_count =
          protocol.sample_cap > 0 ? std::min<int64_t>(map_size, protocol.sample_cap) : map_size;
      for (int i = 0; i < act.dim(0); ++i) {
        auto sample = detail::subsample_map(act.data() + int64_t(i) * map_size, map_size,
                                            protocol.sample_cap);
        const double d = ks_statistic(std::move(sample), protocol.standardize);
        tg.d_mean += d / act.dim(0);
        tg.p_mean += ks_pvalue(d, tg.sample_count) / act.dim(0);
      }
    }
    tg.gaussian = tg.p_mean > kGaussianPThreshold;
    report.taps.push_back(std::move(tg));
  }
  return report;
}

// ----------------------------------------------------------- selection

enum class SelectionMode { best, worst, manual };

struct SelectionConfig {
  std::vector<std::string> selected_tap_ids;
  SelectionMode mode = SelectionMode::best;
};

// best -> the non-Gaussian (semantic) taps; worst -> the Gaussian ones.
inline SelectionConfig select_features(const GaussianityReport& report, SelectionMode mode) {
  if (report.taps.empty()) throw std::invalid_argument("select_features: empty report");
  if (mode == SelectionMode::manual)
    throw std::invalid_argument("select_features: manual mode takes an explicit tap list");
  SelectionConfig sel;
  sel.mode = mode;
  for (const auto& t : report.taps)
    if ((mode == SelectionMode::best) != t.gaussian) sel.selected_tap_ids.push_back(t.id);
  if (sel.selected_tap_ids.empty())
    throw std::runtime_error(
        std::string("select_features: ") + (mode == SelectionMode::best ? "best" : "worst") +
        " selection is empty (every tap fell on one side of the 0.05 rule); pick taps "
        "explicitly with manual mode");
  return sel;
}

}  // namespace dcube
