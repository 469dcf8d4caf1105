#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace usgen {
struct ModelCheckpoint;
}

namespace usgen::optim {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global L2 norm clip, 0 disables
};

/// Adam with bias correction, matching torch.optim.Adam. Moments live in
/// named tensors so they checkpoint alongside the weights.
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, torch::Tensor>> params, AdamOptions options);
  Adam(const torch::nn::Module& module, AdamOptions options);

  void zero_grad();
  void step();

  const AdamOptions& options() const { return options_; }
  std::int64_t steps() const { return steps_; }

  /// Arrays go under `<prefix>/<param>/{m,v}`; the step counter is returned
  /// for the checkpoint header.
  void save(ModelCheckpoint& ckpt, const std::string& prefix) const;
  void load(const ModelCheckpoint& ckpt, const std::string& prefix);

 private:
  struct Slot {
    std::string name;
    torch::Tensor param;
    torch::Tensor m;
    torch::Tensor v;
  };
  std::vector<Slot> slots_;
  AdamOptions options_;
  std::int64_t steps_ = 0;
};

std::vector<std::pair<std::string, torch::Tensor>> named_parameters(
    const torch::nn::Module& module);

}  // namespace usgen::optim
