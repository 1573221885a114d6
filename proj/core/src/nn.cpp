#include "gwreg/nn.hpp"

#include <cmath>

#include "gwreg/error.hpp"

namespace gwreg::nn {

ad::Var ParamRegistry::add_param(const std::string& name, Tensor init) {
  for (const auto& e : params_)
    if (e.name == name) throw ConfigError("duplicate parameter name: " + name);
  params_.push_back({name, ad::param(std::move(init))});
  return params_.back().var;
}

Tensor* ParamRegistry::add_buffer(const std::string& name, Tensor init) {
  for (const auto& e : buffers_)
    if (e.name == name) throw ConfigError("duplicate buffer name: " + name);
  buffers_.push_back({name, std::make_unique<Tensor>(std::move(init))});
  return buffers_.back().tensor.get();
}

ad::Var ParamRegistry::find_param(const std::string& name) const {
  for (const auto& e : params_)
    if (e.name == name) return e.var;
  throw ConfigError("unknown parameter: " + name);
}

Tensor* ParamRegistry::find_buffer(const std::string& name) const {
  for (const auto& e : buffers_)
    if (e.name == name) return e.tensor.get();
  throw ConfigError("unknown buffer: " + name);
}

int64_t ParamRegistry::num_scalars() const {
  int64_t n = 0;
  for (const auto& e : params_) n += e.var.val().numel();
  return n;
}

Conv2d::Conv2d(ParamRegistry& reg, const std::string& prefix, int cin, int cout, int ksize,
               int stride_, int pad_, Rng& rng, bool zero_init)
    : stride(stride_), pad(pad_) {
  Tensor weight({cout, cin, ksize, ksize});
  if (!zero_init) {
    const double std = std::sqrt(2.0 / (cin * ksize * ksize));
    rng.fill_normal(weight, 0.0, std);
  }
  w = reg.add_param(prefix + ".conv.weight", std::move(weight));
  b = reg.add_param(prefix + ".conv.bias", Tensor::zeros({cout}));
}

BatchNormBanks::BatchNormBanks(ParamRegistry& reg, const std::string& prefix, int channels,
                               int banks, double momentum_)
    : momentum(momentum_) {
  for (int m = 0; m < banks; ++m) {
    const std::string base = prefix + ".bn." + std::to_string(m);
    gamma.push_back(reg.add_param(base + ".gamma", Tensor::full({channels}, 1.0)));
    beta.push_back(reg.add_param(base + ".beta", Tensor::zeros({channels})));
    run_mean.push_back(reg.add_buffer(base + ".running_mean", Tensor::zeros({channels})));
    run_var.push_back(reg.add_buffer(base + ".running_var", Tensor::full({channels}, 1.0)));
  }
}

ad::Var BatchNormBanks::operator()(const ad::Var& x, int bank, bool training) const {
  if (bank < 0 || bank >= int(gamma.size()))
    throw InvalidInput("BatchNormBanks: unknown modality bank " + std::to_string(bank));
  return ad::batch_norm(x, gamma[bank], beta[bank], *run_mean[bank], *run_var[bank], training,
                        momentum);
}

ConvBnLRelu::ConvBnLRelu(ParamRegistry& reg, const std::string& prefix, int cin, int cout,
                         int ksize, int stride, int pad, int banks, double momentum, Rng& rng)
    : conv(reg, prefix, cin, cout, ksize, stride, pad, rng), bn(reg, prefix, cout, banks, momentum) {}

ad::Var ConvBnLRelu::operator()(const ad::Var& x, int bank, bool training) const {
  return ad::leaky_relu(bn(conv(x), bank, training), 0.2);
}

ConvBlock::ConvBlock(ParamRegistry& reg, const std::string& prefix, int depth, int cin, int cout,
                     int ksize, int banks, double momentum, Rng& rng) {
  for (int i = 0; i < depth; ++i)
    subs.emplace_back(reg, prefix + std::to_string(i + 1), i == 0 ? cin : cout, cout, ksize, 1,
                      ksize / 2, banks, momentum, rng);
}

ad::Var ConvBlock::operator()(ad::Var x, int bank, bool training) const {
  for (const auto& s : subs) x = s(x, bank, training);
  return x;
}

void Adam::step(ParamRegistry& reg) {
  auto& ps = reg.params();
  if (m_.empty()) {
    for (auto& e : ps) {
      m_.emplace_back(e.var.val().shape());
      v_.emplace_back(e.var.val().shape());
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (size_t i = 0; i < ps.size(); ++i) {
    if (!ps[i].var.has_grad()) continue;
    Tensor& p = ps[i].var.val_mut();
    const Tensor& g = ps[i].var.node_->grad;
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (int64_t j = 0; j < p.numel(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      p[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

void Adam::zero_grad(ParamRegistry& reg) {
  for (auto& e : reg.params()) e.var.clear_grad();
}

}  // namespace gwreg::nn
