#pragma once

#include <string>
#include <vector>

#include "mskd/rng.hpp"
#include "mskd/tensor.hpp"

namespace mskd::nn {

/// A learnable tensor with its gradient accumulator.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, std::vector<int> shape)
      : name(std::move(n)), value(shape), grad(shape) {}

  void zero_grad() { grad.zero(); }
};

/// Named view over a tensor for checkpointing. Params and normalization
/// running statistics are both serialized; only params receive updates.
struct NamedTensor {
  std::string name;
  Tensor* tensor = nullptr;
  bool is_param = false;
};

/// Spatial mean of an H x W x C map, one value per channel.
Tensor global_avg_pool(const Tensor& map_hwc);

/// 2-d convolution on NCHW batches, square kernel, zero padding, no bias
/// (normalization always follows convolutions in this codebase).
class Conv2d {
 public:
  Conv2d(std::string name, int in_ch, int out_ch, int ksize, int stride, int pad);

  void init(Rng& rng);

  Tensor forward(const Tensor& x);
  /// Accumulates into weight.grad, returns gradient w.r.t. the input.
  Tensor backward(const Tensor& dy);

  Param weight;  // [out_ch, in_ch * k * k]

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }

 private:
  int in_ch_, out_ch_, k_, stride_, pad_;
  // Cached im2col patches from the last forward, one matrix per sample.
  std::vector<double> cols_;
  int n_ = 0, h_ = 0, w_ = 0, oh_ = 0, ow_ = 0;
};

/// Batch normalization over the channel axis. Accepts NCHW maps (statistics
/// over N*H*W) and NC vector batches (statistics over N). Training mode uses
/// batch statistics and updates running averages; inference uses the frozen
/// running averages.
class BatchNorm {
 public:
  BatchNorm(std::string name, int channels);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);

  /// Makes inference-mode output exactly equal its input (running_var is set
  /// to 1 - eps so the denominator is exactly 1). Test hook.
  void freeze_identity();

  Param gamma, beta;
  Tensor running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

 private:
  Tensor xhat_;
  std::vector<double> invstd_;
  bool train_mode_ = false;
  int cached_m_ = 0;  // elements per channel in the cached batch
};

class ReLU {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;

 private:
  Tensor mask_;
};

/// Fully connected layer on NC batches.
class Linear {
 public:
  Linear(std::string name, int in, int out, bool with_bias);

  void init(Rng& rng, double stddev = 0.0);  // 0 -> sqrt(2 / in)

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);

  Param weight;  // [out, in]
  Param bias;    // [out], unused when with_bias = false
  bool has_bias;

 private:
  int in_, out_;
  Tensor x_;
};

/// NCHW -> NC spatial mean.
class GlobalPool {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;

 private:
  int h_ = 0, w_ = 0;
};

/// Residual downsampling stage: 3x3 stride-2 conv, BN, ReLU, 3x3 conv, BN,
/// plus a 1x1 stride-2 projection shortcut, joined by an output ReLU.
class ResidualStage {
 public:
  ResidualStage(const std::string& name, int in_ch, int out_ch);

  void init(Rng& rng);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);

  void collect_params(std::vector<Param*>& out);
  void collect_named(const std::string& prefix, std::vector<NamedTensor>& out);

  Conv2d conv1, conv2, skip_conv;
  BatchNorm bn1, bn2, skip_bn;

 private:
  ReLU relu1_, relu2_;
};

}  // namespace mskd::nn
