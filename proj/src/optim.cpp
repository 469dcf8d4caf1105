#include "usgen/optim.hpp"

#include "usgen/checkpoint.hpp"

#include <cmath>

namespace usgen::optim {

std::vector<std::pair<std::string, torch::Tensor>> named_parameters(
    const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : module.named_parameters(true)) out.emplace_back(p.key(), p.value());
  return out;
}

Adam::Adam(std::vector<std::pair<std::string, torch::Tensor>> params, AdamOptions options)
    : options_(options) {
  if (!(options_.lr > 0.0)) throw ConfigError("Adam learning rate must be > 0");
  for (auto& [name, p] : params) {
    slots_.push_back({name, p, torch::zeros_like(p), torch::zeros_like(p)});
  }
}

Adam::Adam(const torch::nn::Module& module, AdamOptions options)
    : Adam(named_parameters(module), options) {}

void Adam::zero_grad() {
  for (auto& s : slots_) {
    if (s.param.grad().defined()) {
      s.param.mutable_grad().detach_();
      s.param.mutable_grad().zero_();
    }
  }
}

void Adam::step() {
  torch::NoGradGuard no_grad;
  ++steps_;
  double clip_scale = 1.0;
  if (options_.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& s : slots_) {
      if (s.param.grad().defined()) sq += s.param.grad().pow(2).sum().item<double>();
    }
    const double norm = std::sqrt(sq);
    if (norm > options_.grad_clip) clip_scale = options_.grad_clip / (norm + 1e-6);
  }
  const double bias1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double bias2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  const double step_size = options_.lr / bias1;
  const double bias2_sqrt = std::sqrt(bias2);
  for (auto& s : slots_) {
    if (!s.param.grad().defined()) continue;
    auto g = s.param.grad();
    if (clip_scale != 1.0) g = g * clip_scale;
    s.m.mul_(options_.beta1).add_(g, 1.0 - options_.beta1);
    s.v.mul_(options_.beta2).addcmul_(g, g, 1.0 - options_.beta2);
    const auto denom = (s.v.sqrt() / bias2_sqrt).add_(options_.eps);
    s.param.addcdiv_(s.m, denom, -step_size);
  }
}

void Adam::save(ModelCheckpoint& ckpt, const std::string& prefix) const {
  for (const auto& s : slots_) {
    ckpt.put(prefix + "/" + s.name + "/m", s.m);
    ckpt.put(prefix + "/" + s.name + "/v", s.v);
  }
  ckpt.extra["optimizer_steps"][prefix] = steps_;
}

void Adam::load(const ModelCheckpoint& ckpt, const std::string& prefix) {
  torch::NoGradGuard no_grad;
  for (auto& s : slots_) {
    s.m.copy_(ckpt.get(prefix + "/" + s.name + "/m"));
    s.v.copy_(ckpt.get(prefix + "/" + s.name + "/v"));
  }
  steps_ = ckpt.extra.at("optimizer_steps").at(prefix).get<std::int64_t>();
}

}  // namespace usgen::optim
