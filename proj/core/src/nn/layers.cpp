#include "mskd/nn/layers.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace mskd::nn {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

Tensor global_avg_pool(const Tensor& map_hwc) {
  if (map_hwc.ndim() != 3) {
    throw std::invalid_argument("global_avg_pool: expected an HxWxC map, got " +
                                map_hwc.shape_string());
  }
  const int h = map_hwc.dim(0), w = map_hwc.dim(1), c = map_hwc.dim(2);
  if (h == 0 || w == 0) {
    throw std::invalid_argument("global_avg_pool: empty spatial extent");
  }
  Tensor out({c});
  const double inv = 1.0 / (static_cast<double>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) out[ch] += map_hwc(y, x, ch);
    }
  }
  for (int ch = 0; ch < c; ++ch) out[ch] *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::string name, int in_ch, int out_ch, int ksize, int stride, int pad)
    : weight(std::move(name), {out_ch, in_ch * ksize * ksize}),
      in_ch_(in_ch),
      out_ch_(out_ch),
      k_(ksize),
      stride_(stride),
      pad_(pad) {}

void Conv2d::init(Rng& rng) {
  const double stddev = std::sqrt(2.0 / (in_ch_ * k_ * k_));
  for (std::size_t i = 0; i < weight.value.numel(); ++i) {
    weight.value[i] = rng.normal(0.0, stddev);
  }
}

namespace {

// cols is [R, OH*OW] with R = C*K*K, row r = (c*K + kh)*K + kw.
void im2col(const double* x, int c_in, int h, int w, int k, int stride, int pad,
            int oh, int ow, double* cols) {
  for (int c = 0; c < c_in; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        double* row = cols + (static_cast<std::size_t>((c * k + kh) * k + kw)) *
                                 (static_cast<std::size_t>(oh) * ow);
        for (int y = 0; y < oh; ++y) {
          const int iy = y * stride - pad + kh;
          if (iy < 0 || iy >= h) {
            for (int xo = 0; xo < ow; ++xo) row[y * ow + xo] = 0.0;
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int xo = 0; xo < ow; ++xo) {
            const int ix = xo * stride - pad + kw;
            row[y * ow + xo] = (ix < 0 || ix >= w) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* cols, int c_in, int h, int w, int k, int stride, int pad,
            int oh, int ow, double* dx) {
  for (int c = 0; c < c_in; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const double* row = cols + (static_cast<std::size_t>((c * k + kh) * k + kw)) *
                                       (static_cast<std::size_t>(oh) * ow);
        for (int y = 0; y < oh; ++y) {
          const int iy = y * stride - pad + kh;
          if (iy < 0 || iy >= h) continue;
          double* dst = dx + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int xo = 0; xo < ow; ++xo) {
            const int ix = xo * stride - pad + kw;
            if (ix >= 0 && ix < w) dst[ix] += row[y * ow + xo];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x) {
  if (x.ndim() != 4 || x.dim(1) != in_ch_) {
    throw std::invalid_argument("Conv2d " + weight.name + ": bad input shape " +
                                x.shape_string());
  }
  n_ = x.dim(0);
  h_ = x.dim(2);
  w_ = x.dim(3);
  oh_ = (h_ + 2 * pad_ - k_) / stride_ + 1;
  ow_ = (w_ + 2 * pad_ - k_) / stride_ + 1;
  if (oh_ <= 0 || ow_ <= 0) {
    throw std::invalid_argument("Conv2d " + weight.name + ": input too small");
  }
  const std::size_t r = static_cast<std::size_t>(in_ch_) * k_ * k_;
  const std::size_t spatial = static_cast<std::size_t>(oh_) * ow_;
  cols_.assign(static_cast<std::size_t>(n_) * r * spatial, 0.0);

  Tensor out({n_, out_ch_, oh_, ow_});
  CMapRM wmat(weight.value.data(), out_ch_, static_cast<Eigen::Index>(r));
  for (int n = 0; n < n_; ++n) {
    double* cols = cols_.data() + static_cast<std::size_t>(n) * r * spatial;
    im2col(x.data() + static_cast<std::size_t>(n) * in_ch_ * h_ * w_, in_ch_, h_, w_,
           k_, stride_, pad_, oh_, ow_, cols);
    MapRM omat(out.data() + static_cast<std::size_t>(n) * out_ch_ * spatial, out_ch_,
               static_cast<Eigen::Index>(spatial));
    CMapRM cmat(cols, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(spatial));
    omat.noalias() = wmat * cmat;
  }
  return out;
}

Tensor Conv2d::backward(const Tensor& dy) {
  const std::size_t r = static_cast<std::size_t>(in_ch_) * k_ * k_;
  const std::size_t spatial = static_cast<std::size_t>(oh_) * ow_;
  if (dy.ndim() != 4 || dy.dim(0) != n_ || dy.dim(1) != out_ch_ || dy.dim(2) != oh_ ||
      dy.dim(3) != ow_) {
    throw std::invalid_argument("Conv2d " + weight.name + ": bad grad shape");
  }
  Tensor dx({n_, in_ch_, h_, w_});
  MapRM dwmat(weight.grad.data(), out_ch_, static_cast<Eigen::Index>(r));
  CMapRM wmat(weight.value.data(), out_ch_, static_cast<Eigen::Index>(r));
  std::vector<double> dcols(r * spatial);
  for (int n = 0; n < n_; ++n) {
    const double* cols = cols_.data() + static_cast<std::size_t>(n) * r * spatial;
    CMapRM cmat(cols, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(spatial));
    CMapRM dymat(dy.data() + static_cast<std::size_t>(n) * out_ch_ * spatial, out_ch_,
                 static_cast<Eigen::Index>(spatial));
    dwmat.noalias() += dymat * cmat.transpose();
    MapRM dcmat(dcols.data(), static_cast<Eigen::Index>(r),
                static_cast<Eigen::Index>(spatial));
    dcmat.noalias() = wmat.transpose() * dymat;
    col2im(dcols.data(), in_ch_, h_, w_, k_, stride_, pad_, oh_, ow_,
           dx.data() + static_cast<std::size_t>(n) * in_ch_ * h_ * w_);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm

BatchNorm::BatchNorm(std::string name, int channels)
    : gamma(name + ".gamma", {channels}),
      beta(name + ".beta", {channels}),
      running_mean({channels}),
      running_var({channels}, 1.0) {
  gamma.value.fill(1.0);
}

void BatchNorm::freeze_identity() {
  gamma.value.fill(1.0);
  beta.value.zero();
  running_mean.zero();
  running_var.fill(1.0 - eps);
}

namespace {

struct BnDims {
  int n, c, spatial;  // x is [n, c, spatial]
};

BnDims bn_dims(const Tensor& x, int channels, const std::string& name) {
  if (x.ndim() == 4) {
    if (x.dim(1) != channels)
      throw std::invalid_argument("BatchNorm " + name + ": channel mismatch");
    return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  }
  if (x.ndim() == 2) {
    if (x.dim(1) != channels)
      throw std::invalid_argument("BatchNorm " + name + ": channel mismatch");
    return {x.dim(0), x.dim(1), 1};
  }
  throw std::invalid_argument("BatchNorm " + name + ": expected NCHW or NC input");
}

}  // namespace

Tensor BatchNorm::forward(const Tensor& x, bool train) {
  const int channels = gamma.value.dim(0);
  const BnDims d = bn_dims(x, channels, gamma.name);
  const int m = d.n * d.spatial;
  if (m == 0) throw std::invalid_argument("BatchNorm " + gamma.name + ": empty batch");

  train_mode_ = train;
  cached_m_ = m;
  invstd_.assign(static_cast<std::size_t>(channels), 0.0);
  xhat_ = Tensor(x.shape());
  Tensor out(x.shape());

  std::vector<double> mean(static_cast<std::size_t>(channels), 0.0);
  std::vector<double> var(static_cast<std::size_t>(channels), 0.0);
  if (train) {
    for (int n = 0; n < d.n; ++n) {
      for (int c = 0; c < channels; ++c) {
        const double* px =
            x.data() + (static_cast<std::size_t>(n) * channels + c) * d.spatial;
        double s = 0.0;
        for (int i = 0; i < d.spatial; ++i) s += px[i];
        mean[static_cast<std::size_t>(c)] += s;
      }
    }
    for (int c = 0; c < channels; ++c) mean[static_cast<std::size_t>(c)] /= m;
    for (int n = 0; n < d.n; ++n) {
      for (int c = 0; c < channels; ++c) {
        const double* px =
            x.data() + (static_cast<std::size_t>(n) * channels + c) * d.spatial;
        const double mu = mean[static_cast<std::size_t>(c)];
        double s = 0.0;
        for (int i = 0; i < d.spatial; ++i) {
          const double dv = px[i] - mu;
          s += dv * dv;
        }
        var[static_cast<std::size_t>(c)] += s;
      }
    }
    for (int c = 0; c < channels; ++c) var[static_cast<std::size_t>(c)] /= m;
    for (int c = 0; c < channels; ++c) {
      running_mean[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * running_mean[static_cast<std::size_t>(c)] +
          momentum * mean[static_cast<std::size_t>(c)];
      running_var[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * running_var[static_cast<std::size_t>(c)] +
          momentum * var[static_cast<std::size_t>(c)];
    }
  } else {
    for (int c = 0; c < channels; ++c) {
      mean[static_cast<std::size_t>(c)] = running_mean[static_cast<std::size_t>(c)];
      var[static_cast<std::size_t>(c)] = running_var[static_cast<std::size_t>(c)];
    }
  }

  for (int c = 0; c < channels; ++c) {
    invstd_[static_cast<std::size_t>(c)] =
        1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
  }
  for (int n = 0; n < d.n; ++n) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * d.spatial;
      const double mu = mean[static_cast<std::size_t>(c)];
      const double is = invstd_[static_cast<std::size_t>(c)];
      const double g = gamma.value[static_cast<std::size_t>(c)];
      const double b = beta.value[static_cast<std::size_t>(c)];
      for (int i = 0; i < d.spatial; ++i) {
        const double xh = (x[base + i] - mu) * is;
        xhat_[base + i] = xh;
        out[base + i] = g * xh + b;
      }
    }
  }
  return out;
}

Tensor BatchNorm::backward(const Tensor& dy) {
  const int channels = gamma.value.dim(0);
  const BnDims d = bn_dims(dy, channels, gamma.name);
  const int m = d.n * d.spatial;
  if (m != cached_m_ || !dy.same_shape(xhat_)) {
    throw std::invalid_argument("BatchNorm " + gamma.name + ": grad shape mismatch");
  }

  std::vector<double> dgamma(static_cast<std::size_t>(channels), 0.0);
  std::vector<double> dbeta(static_cast<std::size_t>(channels), 0.0);
  for (int n = 0; n < d.n; ++n) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * d.spatial;
      double sg = 0.0, sb = 0.0;
      for (int i = 0; i < d.spatial; ++i) {
        sg += dy[base + i] * xhat_[base + i];
        sb += dy[base + i];
      }
      dgamma[static_cast<std::size_t>(c)] += sg;
      dbeta[static_cast<std::size_t>(c)] += sb;
    }
  }
  for (int c = 0; c < channels; ++c) {
    gamma.grad[static_cast<std::size_t>(c)] += dgamma[static_cast<std::size_t>(c)];
    beta.grad[static_cast<std::size_t>(c)] += dbeta[static_cast<std::size_t>(c)];
  }

  Tensor dx(dy.shape());
  if (train_mode_) {
    const double invm = 1.0 / m;
    for (int n = 0; n < d.n; ++n) {
      for (int c = 0; c < channels; ++c) {
        const std::size_t base =
            (static_cast<std::size_t>(n) * channels + c) * d.spatial;
        const double g = gamma.value[static_cast<std::size_t>(c)];
        const double is = invstd_[static_cast<std::size_t>(c)];
        const double dg = dgamma[static_cast<std::size_t>(c)];
        const double db = dbeta[static_cast<std::size_t>(c)];
        for (int i = 0; i < d.spatial; ++i) {
          dx[base + i] =
              g * is * invm * (m * dy[base + i] - db - xhat_[base + i] * dg);
        }
      }
    }
  } else {
    for (int n = 0; n < d.n; ++n) {
      for (int c = 0; c < channels; ++c) {
        const std::size_t base =
            (static_cast<std::size_t>(n) * channels + c) * d.spatial;
        const double gis = gamma.value[static_cast<std::size_t>(c)] *
                           invstd_[static_cast<std::size_t>(c)];
        for (int i = 0; i < d.spatial; ++i) dx[base + i] = dy[base + i] * gis;
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ReLU

Tensor ReLU::forward(const Tensor& x) {
  mask_ = Tensor(x.shape());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (x[i] > 0.0) {
      out[i] = x[i];
      mask_[i] = 1.0;
    }
  }
  return out;
}

Tensor ReLU::backward(const Tensor& dy) const {
  if (!dy.same_shape(mask_)) throw std::invalid_argument("ReLU: grad shape mismatch");
  Tensor dx(dy.shape());
  for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] = dy[i] * mask_[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::string name, int in, int out, bool with_bias)
    : weight(name + ".weight", {out, in}),
      bias(name + ".bias", {with_bias ? out : 0}),
      has_bias(with_bias),
      in_(in),
      out_(out) {}

void Linear::init(Rng& rng, double stddev) {
  const double s = stddev > 0.0 ? stddev : std::sqrt(2.0 / in_);
  for (std::size_t i = 0; i < weight.value.numel(); ++i) {
    weight.value[i] = rng.normal(0.0, s);
  }
  if (has_bias) bias.value.zero();
}

Tensor Linear::forward(const Tensor& x) {
  if (x.ndim() != 2 || x.dim(1) != in_) {
    throw std::invalid_argument("Linear " + weight.name + ": bad input shape " +
                                x.shape_string());
  }
  x_ = x;
  const int n = x.dim(0);
  Tensor out({n, out_});
  CMapRM xm(x.data(), n, in_);
  CMapRM wm(weight.value.data(), out_, in_);
  MapRM om(out.data(), n, out_);
  om.noalias() = xm * wm.transpose();
  if (has_bias) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < out_; ++j) out(i, j) += bias.value[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

Tensor Linear::backward(const Tensor& dy) {
  if (dy.ndim() != 2 || dy.dim(1) != out_ || dy.dim(0) != x_.dim(0)) {
    throw std::invalid_argument("Linear " + weight.name + ": bad grad shape");
  }
  const int n = dy.dim(0);
  CMapRM dym(dy.data(), n, out_);
  CMapRM xm(x_.data(), n, in_);
  MapRM dwm(weight.grad.data(), out_, in_);
  dwm.noalias() += dym.transpose() * xm;
  if (has_bias) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < out_; ++j) bias.grad[static_cast<std::size_t>(j)] += dy(i, j);
    }
  }
  Tensor dx({n, in_});
  MapRM dxm(dx.data(), n, in_);
  CMapRM wm(weight.value.data(), out_, in_);
  dxm.noalias() = dym * wm;
  return dx;
}

// ---------------------------------------------------------------------------
// GlobalPool

Tensor GlobalPool::forward(const Tensor& x) {
  if (x.ndim() != 4) throw std::invalid_argument("GlobalPool: expected NCHW input");
  const int n = x.dim(0), c = x.dim(1);
  h_ = x.dim(2);
  w_ = x.dim(3);
  if (h_ == 0 || w_ == 0) throw std::invalid_argument("GlobalPool: empty spatial extent");
  const double inv = 1.0 / (static_cast<double>(h_) * w_);
  Tensor out({n, c});
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const double* px = x.data() + (static_cast<std::size_t>(i) * c + ch) *
                                        (static_cast<std::size_t>(h_) * w_);
      double s = 0.0;
      for (int j = 0; j < h_ * w_; ++j) s += px[j];
      out(i, ch) = s * inv;
    }
  }
  return out;
}

Tensor GlobalPool::backward(const Tensor& dy) const {
  const int n = dy.dim(0), c = dy.dim(1);
  const double inv = 1.0 / (static_cast<double>(h_) * w_);
  Tensor dx({n, c, h_, w_});
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      double* px = dx.data() + (static_cast<std::size_t>(i) * c + ch) *
                                   (static_cast<std::size_t>(h_) * w_);
      const double g = dy(i, ch) * inv;
      for (int j = 0; j < h_ * w_; ++j) px[j] = g;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ResidualStage

ResidualStage::ResidualStage(const std::string& name, int in_ch, int out_ch)
    : conv1(name + ".conv1.weight", in_ch, out_ch, 3, 2, 1),
      conv2(name + ".conv2.weight", out_ch, out_ch, 3, 1, 1),
      skip_conv(name + ".skip_conv.weight", in_ch, out_ch, 1, 2, 0),
      bn1(name + ".bn1", out_ch),
      bn2(name + ".bn2", out_ch),
      skip_bn(name + ".skip_bn", out_ch) {}

void ResidualStage::init(Rng& rng) {
  conv1.init(rng);
  conv2.init(rng);
  skip_conv.init(rng);
}

Tensor ResidualStage::forward(const Tensor& x, bool train) {
  Tensor a = relu1_.forward(bn1.forward(conv1.forward(x), train));
  Tensor main = bn2.forward(conv2.forward(a), train);
  Tensor skip = skip_bn.forward(skip_conv.forward(x), train);
  for (std::size_t i = 0; i < main.numel(); ++i) main[i] += skip[i];
  return relu2_.forward(main);
}

Tensor ResidualStage::backward(const Tensor& dy) {
  Tensor dsum = relu2_.backward(dy);
  Tensor da = conv2.backward(bn2.backward(dsum));
  Tensor dx = conv1.backward(bn1.backward(relu1_.backward(da)));
  Tensor dskip = skip_conv.backward(skip_bn.backward(dsum));
  for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dskip[i];
  return dx;
}

void ResidualStage::collect_params(std::vector<Param*>& out) {
  out.push_back(&conv1.weight);
  out.push_back(&bn1.gamma);
  out.push_back(&bn1.beta);
  out.push_back(&conv2.weight);
  out.push_back(&bn2.gamma);
  out.push_back(&bn2.beta);
  out.push_back(&skip_conv.weight);
  out.push_back(&skip_bn.gamma);
  out.push_back(&skip_bn.beta);
}

void ResidualStage::collect_named(const std::string& prefix,
                                  std::vector<NamedTensor>& out) {
  out.push_back({prefix + ".conv1.weight", &conv1.weight.value, true});
  out.push_back({prefix + ".bn1.gamma", &bn1.gamma.value, true});
  out.push_back({prefix + ".bn1.beta", &bn1.beta.value, true});
  out.push_back({prefix + ".bn1.running_mean", &bn1.running_mean, false});
  out.push_back({prefix + ".bn1.running_var", &bn1.running_var, false});
  out.push_back({prefix + ".conv2.weight", &conv2.weight.value, true});
  out.push_back({prefix + ".bn2.gamma", &bn2.gamma.value, true});
  out.push_back({prefix + ".bn2.beta", &bn2.beta.value, true});
  out.push_back({prefix + ".bn2.running_mean", &bn2.running_mean, false});
  out.push_back({prefix + ".bn2.running_var", &bn2.running_var, false});
  out.push_back({prefix + ".skip_conv.weight", &skip_conv.weight.value, true});
  out.push_back({prefix + ".skip_bn.gamma", &skip_bn.gamma.value, true});
  out.push_back({prefix + ".skip_bn.beta", &skip_bn.beta.value, true});
  out.push_back({prefix + ".skip_bn.running_mean", &skip_bn.running_mean, false});
  out.push_back({prefix + ".skip_bn.running_var", &skip_bn.running_var, false});
}

}  // namespace mskd::nn
