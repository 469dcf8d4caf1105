#include "usgen/tbgan.hpp"

#include <cmath>

namespace usgen::tbgan {
namespace {

constexpr double kMaskValue = -1e4;

torch::Tensor partition(const torch::Tensor& x, int window) {
  const auto b = x.size(0), h = x.size(1), w = x.size(2), nh = x.size(3), hd = x.size(4);
  return x.reshape({b, h / window, window, w / window, window, nh, hd})
      .permute({0, 1, 3, 5, 2, 4, 6})
      .reshape({b * (h / window) * (w / window), nh, window * window, hd});
}

torch::Tensor merge(const torch::Tensor& x, std::int64_t b, std::int64_t h, std::int64_t w,
                    int window) {
  const auto nh = x.size(1), hd = x.size(3);
  return x.reshape({b, h / window, w / window, nh, window, window, hd})
      .permute({0, 1, 4, 2, 5, 3, 6})
      .reshape({b, h, w, nh, hd});
}

}  // namespace

torch::Tensor relative_position_index(int window) {
  const int l = window * window;
  auto idx = torch::empty({l, l}, torch::kLong);
  auto* p = idx.data_ptr<std::int64_t>();
  for (int i = 0; i < l; ++i) {
    for (int j = 0; j < l; ++j) {
      const int dy = i / window - j / window + window - 1;
      const int dx = i % window - j % window + window - 1;
      p[i * l + j] = dy * (2 * window - 1) + dx;
    }
  }
  return idx;
}

torch::Tensor shifted_window_mask(int height, int width, int window, int shift) {
  auto labels = torch::zeros({height, width}, torch::kLong);
  auto acc = labels.accessor<std::int64_t, 2>();
  auto region = [&](int i, int n) { return i < n - window ? 0 : (i < n - shift ? 1 : 2); };
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) acc[y][x] = region(y, height) * 3 + region(x, width);
  }
  const int l = window * window;
  auto windows = labels.view({height / window, window, width / window, window})
                     .permute({0, 2, 1, 3})
                     .reshape({-1, l});
  auto differ = windows.unsqueeze(1) != windows.unsqueeze(2);
  return torch::zeros(differ.sizes()).masked_fill(differ, kMaskValue);
}

torch::Tensor windowed_attention(const torch::Tensor& q, const torch::Tensor& k,
                                 const torch::Tensor& v, int window, int shift,
                                 const torch::Tensor& bias, torch::Tensor* weights_out) {
  if (q.dim() != 5 || q.sizes() != k.sizes() || q.sizes() != v.sizes()) {
    throw ShapeError("windowed_attention: q, k, v must share a (B, H, W, heads, dim) shape");
  }
  const auto b = q.size(0), h = q.size(1), w = q.size(2), nh = q.size(3), hd = q.size(4);
  if (window < 1 || h % window != 0 || w % window != 0) {
    throw ShapeError("windowed_attention: " + std::to_string(h) + "x" + std::to_string(w) +
                     " grid is not divisible by window " + std::to_string(window));
  }
  if (shift < 0 || shift >= window) {
    throw ShapeError("windowed_attention: shift must satisfy 0 <= shift < window");
  }
  auto roll = [&](const torch::Tensor& t, int s) { return s == 0 ? t : torch::roll(t, {s, s}, {1, 2}); };
  const auto qp = partition(roll(q, -shift), window);
  const auto kp = partition(roll(k, -shift), window);
  const auto vp = partition(roll(v, -shift), window);

  const int l = window * window;
  auto logits = torch::matmul(qp, kp.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd));
  if (bias.defined()) logits = logits + bias.unsqueeze(0).to(logits.dtype());
  if (shift > 0) {
    const auto mask = shifted_window_mask(static_cast<int>(h), static_cast<int>(w), window, shift)
                          .to(logits.dtype());
    const auto nw = mask.size(0);
    logits = (logits.view({b, nw, nh, l, l}) + mask.unsqueeze(1).unsqueeze(0)).view({b * nw, nh, l, l});
  }
  auto weights = torch::softmax(logits, -1);
  if (weights_out) *weights_out = weights;
  auto out = merge(torch::matmul(weights, vp), b, h, w, window);
  return roll(out, shift);
}

WindowAttentionImpl::WindowAttentionImpl(int dim, int heads, int window)
    : dim_(dim), heads_(heads), window_(window) {
  if (dim % heads != 0) throw ConfigError("attention dim must be divisible by heads");
  qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj = register_module("proj", torch::nn::Linear(dim, dim));
  bias_table = register_parameter("bias_table",
                                  torch::zeros({(2 * window - 1) * (2 * window - 1), heads}));
  bias_index_ = relative_position_index(window);
}

torch::Tensor WindowAttentionImpl::relative_bias() const {
  const int l = window_ * window_;
  return bias_table.index_select(0, bias_index_.view(-1)).view({l, l, heads_}).permute({2, 0, 1});
}

torch::Tensor WindowAttentionImpl::run(const torch::Tensor& features, int shift,
                                       torch::Tensor* weights) {
  if (features.dim() != 4 || features.size(3) != dim_) {
    throw ShapeError("window attention expects (B, H, W, " + std::to_string(dim_) + "), got " +
                     shape_str(features));
  }
  const auto b = features.size(0), h = features.size(1), w = features.size(2);
  auto parts = qkv(features).view({b, h, w, 3, heads_, dim_ / heads_}).unbind(3);
  auto out = windowed_attention(parts[0], parts[1], parts[2], window_, shift, relative_bias(), weights);
  return proj(out.reshape({b, h, w, dim_}));
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& features, int shift) {
  return run(features, shift, nullptr);
}

torch::Tensor WindowAttentionImpl::attention_weights(const torch::Tensor& features, int shift) {
  torch::Tensor weights;
  run(features, shift, &weights);
  return weights;
}

torch::Tensor window_attention(WindowAttention& attn, const torch::Tensor& features, int window,
                               int shift) {
  if (window != attn->window()) {
    throw ShapeError("window_attention: module was built for window " +
                     std::to_string(attn->window()));
  }
  return attn(features, shift);
}

}  // namespace usgen::tbgan
