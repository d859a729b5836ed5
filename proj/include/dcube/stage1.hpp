#pragma once

#include <Eigen/Eigenvalues>

#include "dcube/denoiser.hpp"

namespace dcube {

// Thrown when a training loss goes non-finite; the CLI maps it to a
// dedicated exit code.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ----------------------------------------------------------- pair batches

struct ContrastivePairBatch {
  Tensor x1, x2;            // [N,C,H,W] each
  std::vector<int> y1, y2;
  std::vector<double> target;  // 0 if y1==y2 else 1
  std::vector<int> t;          // shared per-pair timestep
  double margin = 0.1;
};

// x1 is the batch itself; x2 is a batch permutation resampled until no
// element is paired with itself. One timestep per pair, uniform over [1,T].
inline ContrastivePairBatch make_contrastive_pairs(const Dataset& batch, Rng& rng, int horizon_T,
                                                   double margin = 0.1) {
  const int n = batch.size();
  if (n < 2) throw std::invalid_argument("make_contrastive_pairs: batch size must be >= 2");
  std::vector<int> perm(static_cast<size_t>(n));
  bool ok = false;
  while (!ok) {
    for (int i = 0; i < n; ++i) perm[size_t(i)] = i;
    for (int i = n - 1; i > 0; --i)
      std::swap(perm[size_t(i)], perm[rng.below(static_cast<uint64_t>(i + 1))]);
    ok = true;
    for (int i = 0; i < n; ++i)
      if (perm[size_t(i)] == i) {
        ok = false;
        break;
      }
  }
  ContrastivePairBatch out;
  out.margin = margin;
  out.x1 = batch.images;
  out.y1 = batch.labels;
  const int64_t per = batch.images.numel() / n;
  out.x2 = Tensor(batch.images.shape());
  for (int i = 0; i < n; ++i) {
    std::copy_n(batch.images.data() + int64_t(perm[size_t(i)]) * per, per,
                out.x2.data() + int64_t(i) * per);
    out.y2.push_back(batch.labels[static_cast<size_t>(perm[size_t(i)])]);
    out.target.push_back(out.y1[size_t(i)] == out.y2[size_t(i)] ? 0.0 : 1.0);
    out.t.push_back(rng.uniform_int(1, horizon_T));
  }
  return out;
}

// ----------------------------------------------------------- contrastive

// Margin hinge embedding loss, summed over the batch:
//   sum_i (1-target_i) d_i + target_i max(margin - d_i, 0),
// d_i the Euclidean distance between rows of f1 and f2.
inline Var contrastive_loss(const Var& f1, const Var& f2, const std::vector<double>& target,
                            double margin) {
  check_same_shape(f1.val(), f2.val(), "contrastive_loss");
  if (margin <= 0.0) throw std::invalid_argument("contrastive_loss: margin must be positive");
  const int n = f1.val().dim(0);
  if (static_cast<int>(target.size()) != n)
    throw std::invalid_argument("contrastive_loss: target count mismatch");
  Var diff = sub(f1, f2);
  Var d = sqrt_safe(row_sum(mul(diff, diff)));  // [N]
  Tensor w_same({n}), w_diff({n});
  for (int i = 0; i < n; ++i) {
    w_same[i] = 1.0 - target[size_t(i)];
    w_diff[i] = target[size_t(i)];
  }
  Var hinge = relu(add_scalar(neg(d), margin));
  return sum_all(add(mul(d, constant(std::move(w_same))), mul(hinge, constant(std::move(w_diff)))));
}

// Pooled, unit-normalized mid-layer embedding used by the contrastive term.
inline Var mid_embedding(const Var& mid_tap) { return l2_normalize_rows(global_avg_pool(mid_tap)); }

// ----------------------------------------------------------- generator loss

struct GenLossBreakdown {
  Var total;
  double cont = 0.0;   // contrastive term as logged (batch sum / N)
  double diff1 = 0.0;
  double diff2 = 0.0;
};

// L_Gen = L_Cont + L_Diff(x1_t) + L_Diff(x2_t). The contrastive batch sum is
// divided by N before entering the total (logged scale convention).
inline GenLossBreakdown gen_loss(const ContrastivePairBatch& pairs, const CondUNet& model,
                                 const NoiseSchedule& sched, Rng& noise_rng,
                                 bool use_contrastive = true) {
  const int n = pairs.x1.dim(0);
  const Tensor eps1 = noise_rng.normal_tensor(pairs.x1.shape());
  const Tensor eps2 = noise_rng.normal_tensor(pairs.x2.shape());
  const Tensor x1t = q_sample(pairs.x1, pairs.t, eps1, sched);
  const Tensor x2t = q_sample(pairs.x2, pairs.t, eps2, sched);
  DenoiserOutput o1 = model.forward(x1t, pairs.t, ClassCondition::from_labels(pairs.y1));
  DenoiserOutput o2 = model.forward(x2t, pairs.t, ClassCondition::from_labels(pairs.y2));

  GenLossBreakdown out;
  Var ld1 = diffusion_loss(o1.eps_hat, constant(eps1));
  Var ld2 = diffusion_loss(o2.eps_hat, constant(eps2));
  out.diff1 = ld1.item();
  out.diff2 = ld2.item();
  if (use_contrastive) {
    Var cont = mul_scalar(contrastive_loss(mid_embedding(o1.taps.at("mid")),
                                           mid_embedding(o2.taps.at("mid")), pairs.target,
                                           pairs.margin),
                          1.0 / double(n));
    out.cont = cont.item();
    out.total = add(add(cont, ld1), ld2);
  } else {
    out.total = add(ld1, ld2);
  }
  return out;
}

// spec-surface wrapper over EmaState: shadow <- alpha shadow + (1-alpha) params
inline void ema_update(EmaState& ema, const ParamStore& params) { ema.update(params); }

// ----------------------------------------------------------- FID-lite

// Small fixed convolutional embedder with a frozen seed; stands in for the
// usual Inception embedding at desk scale. 64-D output.
class FidEmbedder {
 public:
  static constexpr uint64_t kFrozenSeed = 0xD1FFED5EEDULL;
  static constexpr int kDim = 64;

  explicit FidEmbedder(int in_channels = 1, uint64_t seed = kFrozenSeed) {
    Rng rng(seed);
    c1_ = Conv2dLayer(ps_, "fid.c1", in_channels, 8, 3, rng, 2);
    c2_ = Conv2dLayer(ps_, "fid.c2", 8, 16, 3, rng, 2);
    c3_ = Conv2dLayer(ps_, "fid.c3", 16, 32, 3, rng, 2);
    fc_ = LinearLayer(ps_, "fid.fc", 32, kDim, rng);
    ps_.set_requires_grad(false);
  }

  // [N,C,H,W] -> [N,64]
  Tensor embed(const Tensor& images) const {
    Var h = constant(images);
    h = silu(c1_(h));
    h = silu(c2_(h));
    h = silu(c3_(h));
    return fc_(global_avg_pool(h)).val();
  }

 private:
  ParamStore ps_;
  Conv2dLayer c1_, c2_, c3_;
  LinearLayer fc_;
};

// Frechet distance between Gaussian fits of two embedding sets [N,D]:
//   ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})
// Covariances use the n-1 denominator; when a side has fewer samples than
// the embedding dimension its covariance is shrunk toward a scaled identity
// (gamma = 0.1 of the mean diagonal).
inline double frechet_gaussian_distance(const Tensor& emb_a, const Tensor& emb_b) {
  if (emb_a.rank() != 2 || emb_b.rank() != 2 || emb_a.dim(1) != emb_b.dim(1))
    throw std::invalid_argument("frechet_gaussian_distance: need [N,D] embeddings");
  if (emb_a.dim(0) < 2 || emb_b.dim(0) < 2)
    throw std::invalid_argument("frechet_gaussian_distance: need >= 2 samples per side");
  const int d = emb_a.dim(1);

  auto moments = [d](const Tensor& e, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    const int n = e.dim(0);
    ECMap m(e.data(), n, d);
    mu = m.colwise().mean();
    Eigen::MatrixXd centered = m.rowwise() - mu.transpose();
    cov = centered.transpose() * centered / double(n - 1);
    if (n <= d) {
      const double gamma = 0.1;
      const double scale = cov.trace() / double(d);
      cov = (1.0 - gamma) * cov;
      cov.diagonal().array() += gamma * scale;
    }
  };
  Eigen::VectorXd mu1, mu2;
  Eigen::MatrixXd s1, s2;
  moments(emb_a, mu1, s1);
  moments(emb_b, mu2, s2);

  // Tr((S1 S2)^{1/2}) via the symmetric form sqrt(S1) S2 sqrt(S1)
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(s1);
  Eigen::MatrixXd root1 = es1.eigenvectors() *
                          es1.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                          es1.eigenvectors().transpose();
  Eigen::MatrixXd inner = root1 * s2 * root1;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es2(inner);
  const double tr_sqrt = es2.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  const double dist = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
  return std::max(dist, 0.0);
}

inline double fid_lite(const Tensor& real_images, const Tensor& fake_images,
                       const FidEmbedder& embedder) {
  return frechet_gaussian_distance(embedder.embed(real_images), embedder.embed(fake_images));
}

// ----------------------------------------------------------- training loop

struct Stage1Options {
  bool use_contrastive = true;
  double margin = 0.1;
  double lr = 2e-4;
  double weight_decay = 0.0;
  int steps = 1000;
  int batch_pairs = 16;
  double ema_alpha = 0.999;
  int fid_every = 0;     // 0 disables periodic FID-lite
  int fid_fake_samples = 96;
  int fid_real_samples = 256;
};

struct Stage1LogRecord {
  int step = 0;
  double l_cont = 0.0, l_diff1 = 0.0, l_diff2 = 0.0, l_gen = 0.0;
  double fid = -1.0;  // < 0 when not evaluated at this step
};

struct Stage1Result {
  EmaState ema;
  std::vector<Stage1LogRecord> history;
};

// Generates per-class fakes proportional to the dataset's class counts and
// returns FID-lite against real images drawn from the dataset.
inline double evaluate_fid_lite(const CondUNet& model, const Dataset& data,
                                const NoiseSchedule& sched, const FidEmbedder& embedder,
                                int fake_total, int real_total, uint64_t seed) {
  const auto counts = data.class_counts();
  const int k = data.num_classes;
  std::vector<Tensor> fakes;
  int made = 0;
  for (int c = 0; c < k; ++c) {
    int want = static_cast<int>(std::lround(double(fake_total) * counts[size_t(c)] / data.size()));
    if (c == k - 1) want = fake_total - made;
    want = std::max(want, 2);
    made += want;
    fakes.push_back(model.sample_class_conditional(want, c, sched, seed + static_cast<uint64_t>(c)));
  }
  Tensor fake({made, data.images.dim(1), data.images.dim(2), data.images.dim(3)});
  int64_t off = 0;
  for (const auto& f : fakes) {
    std::copy_n(f.data(), f.numel(), fake.data() + off);
    off += f.numel();
  }
  Rng rng = Rng(seed).substream("fid-real");
  std::vector<int> idx;
  const int real_n = std::min(real_total, data.size());
  for (int i = 0; i < real_n; ++i) idx.push_back(static_cast<int>(rng.below(data.size())));
  return fid_lite(data.subset(idx).images, fake, embedder);
}

// Stage-1 loop: pair construction -> L_Gen -> AdamW step -> EMA update.
inline Stage1Result train_stage1(CondUNet& model, const Dataset& train, const NoiseSchedule& sched,
                                 const Stage1Options& opt, uint64_t seed,
                                 const std::function<void(const Stage1LogRecord&)>& log = {}) {
  if (opt.use_contrastive && train.num_classes < 2)
    throw std::invalid_argument("train_stage1: contrastive term needs >= 2 classes");
  model.unfreeze();
  AdamW optim(opt.lr, 0.9, 0.999, 1e-8, opt.weight_decay);
  Stage1Result result;
  result.ema = EmaState(model.params(), opt.ema_alpha);
  Rng root(seed);
  Rng data_rng = root.substream("data");
  Rng pair_rng = root.substream("pairing");
  Rng noise_rng = root.substream("timesteps");
  FidEmbedder embedder(model.config().channels);

  for (int step = 1; step <= opt.steps; ++step) {
    std::vector<int> idx;
    for (int i = 0; i < opt.batch_pairs; ++i)
      idx.push_back(static_cast<int>(data_rng.below(static_cast<uint64_t>(train.size()))));
    const Dataset batch = train.subset(idx);
    ContrastivePairBatch pairs =
        make_contrastive_pairs(batch, pair_rng, sched.horizon(), opt.margin);
    GenLossBreakdown loss = gen_loss(pairs, model, sched, noise_rng, opt.use_contrastive);

    Stage1LogRecord rec;
    rec.step = step;
    rec.l_cont = loss.cont;
    rec.l_diff1 = loss.diff1;
    rec.l_diff2 = loss.diff2;
    rec.l_gen = loss.total.item();
    if (!std::isfinite(rec.l_gen))
      throw NumericalError("train_stage1: non-finite loss at step " + std::to_string(step) +
                           " (cont=" + std::to_string(loss.cont) +
                           " diff1=" + std::to_string(loss.diff1) +
                           " diff2=" + std::to_string(loss.diff2) + ")");

    model.params().zero_grad();
    backward(loss.total);
    optim.step(model.params());
    ema_update(result.ema, model.params());

    if (opt.fid_every > 0 && (step % opt.fid_every == 0 || step == opt.steps)) {
      EmaScope scope(model.params(), result.ema);
      rec.fid = evaluate_fid_lite(model, train, sched, embedder, opt.fid_fake_samples,
                                  opt.fid_real_samples, seed ^ 0xF1DULL);
    }
    if (log) log(rec);
    result.history.push_back(rec);
  }
  return result;
}

}  // namespace dcube
