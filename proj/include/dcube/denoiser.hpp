#pragma once

#include "dcube/core/optim.hpp"
#include "dcube/diffusion.hpp"

namespace dcube {

struct DenoiserConfig {
  int channels = 1;
  int height = 32;
  int width = 32;
  int num_classes = 3;
  int base_channels = 8;
  int depth = 3;
  int time_embed_dim = 32;
  int class_embed_dim = 32;
  std::vector<std::string> tap_ids;  // defaults to every stage tap when empty

  std::vector<std::string> all_tap_ids() const {
    std::vector<std::string> ids;
    for (int i = 0; i < depth; ++i) ids.push_back("enc_" + std::to_string(i));
    ids.push_back("mid");
    for (int i = depth - 1; i >= 0; --i) ids.push_back("dec_" + std::to_string(i));
    return ids;
  }

  std::vector<std::string> effective_tap_ids() const {
    return tap_ids.empty() ? all_tap_ids() : tap_ids;
  }

  void validate() const {
    if (depth < 1) throw std::invalid_argument("DenoiserConfig: depth must be >= 1");
    const int div = 1 << (depth - 1);
    if (height % div != 0 || width % div != 0)
      throw std::invalid_argument("DenoiserConfig: image size not divisible by 2^(depth-1)");
    const auto avail = all_tap_ids();
    const auto ids = effective_tap_ids();
    int mid_count = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (std::find(avail.begin(), avail.end(), ids[i]) == avail.end())
        throw std::invalid_argument("DenoiserConfig: unknown tap id '" + ids[i] + "'");
      for (size_t j = i + 1; j < ids.size(); ++j)
        if (ids[i] == ids[j]) throw std::invalid_argument("DenoiserConfig: duplicate tap id");
      if (ids[i] == "mid") ++mid_count;
    }
    if (mid_count != 1)
      throw std::invalid_argument("DenoiserConfig: exactly one 'mid' tap is required");
  }
};

// Batch class condition: hard integer labels or a differentiable [N,K]
// probability matrix. A one-hot soft condition embeds identically to the
// matching hard label (both paths go through the same one-hot matmul).
struct ClassCondition {
  std::vector<int> hard;
  Var soft;  // [N,K]
  bool is_soft = false;

  static ClassCondition from_labels(std::vector<int> labels) {
    ClassCondition c;
    c.hard = std::move(labels);
    return c;
  }
  static ClassCondition from_probs(Var probs) {
    ClassCondition c;
    c.soft = std::move(probs);
    c.is_soft = true;
    return c;
  }

  int size() const { return is_soft ? soft.val().dim(0) : static_cast<int>(hard.size()); }

  Var mixing_matrix(int num_classes) const {
    if (is_soft) {
      if (soft.val().dim(1) != num_classes)
        throw std::invalid_argument("ClassCondition: probability width != num_classes");
      for (int i = 0; i < soft.val().dim(0); ++i) {
        double s = 0.0;
        for (int k = 0; k < num_classes; ++k) {
          const double p = soft.val().at2(i, k);
          if (p < 0.0) throw std::invalid_argument("ClassCondition: negative probability");
          s += p;
        }
        if (std::abs(s - 1.0) > 1e-6)
          throw std::invalid_argument("ClassCondition: probabilities must sum to 1");
      }
      return soft;
    }
    Tensor onehot({static_cast<int>(hard.size()), num_classes});
    for (size_t i = 0; i < hard.size(); ++i) {
      if (hard[i] < 0 || hard[i] >= num_classes)
        throw std::invalid_argument("ClassCondition: label out of range");
      onehot.at2(static_cast<int>(i), hard[i]) = 1.0;
    }
    return constant(std::move(onehot));
  }
};

struct DenoiserOutput {
  Var eps_hat;
  std::map<std::string, Var> taps;
};

inline Tensor sinusoidal_embedding(const std::vector<int>& t, int dim) {
  const int half = dim / 2;
  Tensor out({static_cast<int>(t.size()), dim});
  for (size_t i = 0; i < t.size(); ++i)
    for (int j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * double(j) / double(half));
      out.at2(static_cast<int>(i), j) = std::sin(t[i] * freq);
      out.at2(static_cast<int>(i), half + j) = std::cos(t[i] * freq);
    }
  return out;
}

// Small conditional U-Net epsilon predictor with named tap points. Each
// resolution stage exposes one tap on the encoder and one on the decoder;
// the bottleneck exposes "mid".
class CondUNet {
 public:
  struct ResBlock {
    GroupNormLayer gn1, gn2;
    Conv2dLayer conv1, conv2;
    LinearLayer cond_proj;

    ResBlock() = default;
    ResBlock(ParamStore& ps, const std::string& name, int c, int emb_dim, Rng& rng) {
      gn1 = GroupNormLayer(ps, name + ".gn1", c);
      conv1 = Conv2dLayer(ps, name + ".conv1", c, c, 3, rng);
      cond_proj = LinearLayer(ps, name + ".cond", emb_dim, c, rng);
      gn2 = GroupNormLayer(ps, name + ".gn2", c);
      conv2 = Conv2dLayer(ps, name + ".conv2", c, c, 3, rng, 1, 0.5);
    }

    Var operator()(const Var& x, const Var& emb) const {
      Var h = conv1(silu(gn1(x)));
      h = add_channel_bias(h, cond_proj(emb));
      h = conv2(silu(gn2(h)));
      return add(x, h);
    }
  };

  CondUNet() = default;

  CondUNet(DenoiserConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(init_seed);
    const int emb = cfg_.time_embed_dim;
    std::vector<int> ch(static_cast<size_t>(cfg_.depth));
    for (int i = 0; i < cfg_.depth; ++i) ch[size_t(i)] = cfg_.base_channels << i;

    time_fc1_ = LinearLayer(params_, "time.fc1", cfg_.time_embed_dim, emb, rng);
    time_fc2_ = LinearLayer(params_, "time.fc2", emb, emb, rng);
    class_embed_ = params_.create(
        "class.embed", init::he_normal({cfg_.num_classes, cfg_.class_embed_dim},
                                       cfg_.class_embed_dim, rng));
    class_proj_ = LinearLayer(params_, "class.proj", cfg_.class_embed_dim, emb, rng);

    stem_ = Conv2dLayer(params_, "stem", cfg_.channels, ch[0], 3, rng);
    for (int i = 0; i < cfg_.depth; ++i) {
      enc_.emplace_back(params_, "enc" + std::to_string(i), ch[size_t(i)], emb, rng);
      if (i + 1 < cfg_.depth)
        down_.emplace_back(params_, "down" + std::to_string(i), ch[size_t(i)], ch[size_t(i) + 1],
                           3, rng, 2);
    }
    mid_ = ResBlock(params_, "mid", ch.back(), emb, rng);
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      merge_.emplace_back(params_, "merge" + std::to_string(i), 2 * ch[size_t(i)], ch[size_t(i)],
                          3, rng);
      dec_.emplace_back(params_, "dec" + std::to_string(i), ch[size_t(i)], emb, rng);
      if (i > 0)
        up_.emplace_back(params_, "up" + std::to_string(i), ch[size_t(i)], ch[size_t(i) - 1], 3,
                         rng);
    }
    out_gn_ = GroupNormLayer(params_, "out.gn", ch[0]);
    out_conv_ = Conv2dLayer(params_, "out.conv", ch[0], cfg_.channels, 3, rng, 1, 1e-2);
  }

  const DenoiserConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  bool frozen() const { return !params_.params().front().requires_grad(); }
  void freeze() { params_.set_requires_grad(false); }
  void unfreeze() { params_.set_requires_grad(true); }

  DenoiserOutput forward(const Tensor& x, const std::vector<int>& t,
                         const ClassCondition& cond) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.channels || x.dim(2) != cfg_.height ||
        x.dim(3) != cfg_.width)
      throw std::invalid_argument("denoiser_forward: input shape " + x.shape_str() +
                                  " does not match config");
    const int n = x.dim(0);
    if (static_cast<int>(t.size()) != n || cond.size() != n)
      throw std::invalid_argument("denoiser_forward: batch size mismatch");

    Var emb = add(time_fc2_(silu(time_fc1_(constant(sinusoidal_embedding(t, cfg_.time_embed_dim))))),
                  class_proj_(matmul(cond.mixing_matrix(cfg_.num_classes), class_embed_)));
    emb = silu(emb);

    DenoiserOutput out;
    const auto wanted = cfg_.effective_tap_ids();
    auto keep = [&](const std::string& id, const Var& v) {
      if (std::find(wanted.begin(), wanted.end(), id) != wanted.end()) out.taps.emplace(id, v);
    };

    Var h = stem_(constant(x));
    std::vector<Var> skips;
    for (int i = 0; i < cfg_.depth; ++i) {
      h = enc_[size_t(i)](h, emb);
      keep("enc_" + std::to_string(i), h);
      skips.push_back(h);
      if (i + 1 < cfg_.depth) h = down_[size_t(i)](h);
    }
    h = mid_(h, emb);
    keep("mid", h);
    for (int s = 0; s < cfg_.depth; ++s) {
      const int i = cfg_.depth - 1 - s;
      h = merge_[size_t(s)](concat_channels(h, skips[size_t(i)]));
      h = dec_[size_t(s)](h, emb);
      keep("dec_" + std::to_string(i), h);
      if (i > 0) h = up_[size_t(s)](upsample_nearest2(h));
    }
    out.eps_hat = out_conv_(silu(out_gn_(h)));
    return out;
  }

  // Ancestral sampler: runs the full reverse chain from unit-Gaussian x_T,
  // conditioning every step on class y; the result is clipped to [-1,1].
  Tensor sample_class_conditional(int n, int y, const NoiseSchedule& sched, uint64_t seed) const {
    if (n < 0) throw std::invalid_argument("sample_class_conditional: negative count");
    if (y < 0 || y >= cfg_.num_classes)
      throw std::invalid_argument("sample_class_conditional: label out of range");
    Tensor x({n, cfg_.channels, cfg_.height, cfg_.width});
    if (n == 0) return x;
    for (const auto& p : params_.params())
      if (p.val().has_nan()) throw std::runtime_error("sample_class_conditional: NaN parameters");
    Rng rng = Rng(seed).substream("sampling");
    rng.fill_normal(x);
    const auto cond = ClassCondition::from_labels(std::vector<int>(static_cast<size_t>(n), y));
    for (int t = sched.horizon(); t >= 1; --t) {
      DenoiserOutput o = forward(x, std::vector<int>(static_cast<size_t>(n), t), cond);
      if (t > 1) {
        Tensor noise = rng.normal_tensor(x.shape());
        x = reverse_step(x, t, o.eps_hat.val(), sched, &noise);
      } else {
        x = reverse_step(x, t, o.eps_hat.val(), sched, nullptr);
      }
    }
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = std::clamp(x[i], -1.0, 1.0);
    return x;
  }

 private:
  DenoiserConfig cfg_;
  ParamStore params_;
  LinearLayer time_fc1_, time_fc2_, class_proj_;
  Var class_embed_;
  Conv2dLayer stem_, out_conv_;
  std::vector<ResBlock> enc_, dec_;
  std::vector<Conv2dLayer> down_, up_;
  std::vector<Conv2dLayer> merge_;
  ResBlock mid_;
  GroupNormLayer out_gn_;
};

}  // namespace dcube
