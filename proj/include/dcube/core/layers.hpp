#pragma once

#include <cstring>

#include "dcube/core/conv.hpp"
#include "dcube/core/rng.hpp"

namespace dcube {

// Ordered registry of named parameters. Order is construction order and is
// the canonical layout for optimizers, EMA shadows and checkpoints.
class ParamStore {
 public:
  Var create(const std::string& name, Tensor init) {
    Var p(std::move(init), true);
    names_.push_back(name);
    params_.push_back(p);
    return p;
  }

  size_t size() const { return params_.size(); }
  const std::vector<Var>& params() const { return params_; }
  std::vector<Var>& params() { return params_; }
  const std::vector<std::string>& names() const { return names_; }

  int64_t total_elems() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.val().numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void set_requires_grad(bool rg) {
    for (auto& p : params_) p.set_requires_grad(rg);
  }

  std::vector<Tensor> snapshot() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.val());
    return out;
  }

  void load(const std::vector<Tensor>& values) {
    if (values.size() != params_.size()) throw std::invalid_argument("ParamStore::load: count mismatch");
    for (size_t i = 0; i < params_.size(); ++i) {
      check_same_shape(params_[i].val(), values[i], "ParamStore::load");
      params_[i].val() = values[i];
    }
  }

  // flattens all parameters into one contiguous vector (store order)
  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(total_elems()));
    for (const auto& p : params_)
      flat.insert(flat.end(), p.val().vec().begin(), p.val().vec().end());
    return flat;
  }

  void unflatten(const std::vector<double>& flat) {
    if (static_cast<int64_t>(flat.size()) != total_elems())
      throw std::invalid_argument("ParamStore::unflatten: size mismatch");
    size_t off = 0;
    for (auto& p : params_) {
      std::copy_n(flat.data() + off, p.val().numel(), p.val().data());
      off += static_cast<size_t>(p.val().numel());
    }
  }

  // FNV-1a over the raw little-endian bytes of all parameters
  uint64_t content_hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : params_)
      for (double v : p.val().vec()) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof(double));
        for (unsigned char b : bytes) {
          h ^= b;
          h *= 0x100000001b3ULL;
        }
      }
    return h;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Var> params_;
};

namespace init {

// Kaiming-style normal init for a fan_in
inline Tensor he_normal(std::vector<int> shape, int fan_in, Rng& rng, double gain = 1.0) {
  Tensor t(std::move(shape));
  const double std = gain * std::sqrt(2.0 / double(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * std;
  return t;
}

}  // namespace init

struct Conv2dLayer {
  Var w, b;
  int stride = 1;
  int pad = -1;

  Conv2dLayer() = default;
  Conv2dLayer(ParamStore& ps, const std::string& name, int cin, int cout, int k, Rng& rng,
              int stride_ = 1, double gain = 1.0)
      : stride(stride_) {
    w = ps.create(name + ".w", init::he_normal({cout, cin, k, k}, cin * k * k, rng, gain));
    b = ps.create(name + ".b", Tensor::zeros({cout}));
  }

  Var operator()(const Var& x) const { return conv2d(x, w, b, stride, pad); }
};

struct LinearLayer {
  Var w, b;  // w: [in, out]

  LinearLayer() = default;
  LinearLayer(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
              double gain = 1.0) {
    w = ps.create(name + ".w", init::he_normal({in, out}, in, rng, gain));
    b = ps.create(name + ".b", Tensor::zeros({out}));
  }

  Var operator()(const Var& x) const { return add_row_bias(matmul(x, w), b); }
};

struct GroupNormLayer {
  Var gamma, beta;
  int groups = 4;

  GroupNormLayer() = default;
  GroupNormLayer(ParamStore& ps, const std::string& name, int channels, int groups_ = 4)
      : groups(groups_) {
    gamma = ps.create(name + ".gamma", Tensor::full({channels}, 1.0));
    beta = ps.create(name + ".beta", Tensor::zeros({channels}));
  }

  Var operator()(const Var& x) const { return group_norm(x, gamma, beta, groups); }
};

}  // namespace dcube
