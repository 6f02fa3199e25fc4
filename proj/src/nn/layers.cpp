#include "mmtumor/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Core>

#include "mmtumor/errors.hpp"

namespace mmtumor::nn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

void require_rank(const Tensor& x, std::size_t rank, const char* layer) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(layer) + " expects a rank-" + std::to_string(rank) +
                     " input, got " + x.shape_string());
  }
}

void require_dim(const Tensor& x, std::size_t axis, std::size_t expected, const char* layer) {
  if (x.dim(axis) != expected) {
    throw ShapeError(std::string(layer) + ": dimension " + std::to_string(axis) + " is " +
                     std::to_string(x.dim(axis)) + ", expected " + std::to_string(expected));
  }
}

// (N, C, S) view of a rank-2 or rank-4 tensor for per-channel statistics.
std::size_t spatial_size(const Tensor& x) { return x.rank() == 4 ? x.dim(2) * x.dim(3) : 1; }

void im2col(const double* x, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t kernel, std::size_t stride, std::size_t padding, std::size_t oh,
            std::size_t ow, double* col) {
  const auto pad = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        double* row = col + ((c * kernel + ky) * kernel + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
          double* dst = row + oy * ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + ow, 0.0);
            continue;
          }
          const double* src = x + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                          ? 0.0
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

void col2im(const double* col, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t kernel, std::size_t stride, std::size_t padding, std::size_t oh,
            std::size_t ow, double* x) {
  const auto pad = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const double* row = col + ((c * kernel + ky) * kernel + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          double* dst = x + (c * h + static_cast<std::size_t>(iy)) * w;
          const double* src = row + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) {
              dst[static_cast<std::size_t>(ix)] += src[ox];
            }
          }
        }
      }
    }
  }
}

Tensor he_normal(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Tensor glorot_uniform(std::size_t out, std::size_t in, Rng& rng) {
  Tensor t({out, in});
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels,
               std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride),
      padding_(padding),
      weight_(name + ".weight", he_normal({out_channels, in_channels * kernel * kernel},
                                          in_channels * kernel * kernel, rng)) {}

void Conv2d::forward_sample(const double* input, std::size_t h, std::size_t w, double* out,
                            std::vector<double>& col) const {
  const std::size_t oh = out_size(h);
  const std::size_t ow = out_size(w);
  const std::size_t k = in_channels_ * kernel_ * kernel_;
  ConstMatrixMap weight(weight_.value.data(), static_cast<Eigen::Index>(out_channels_),
                        static_cast<Eigen::Index>(k));
  MatrixMap y(out, static_cast<Eigen::Index>(out_channels_), static_cast<Eigen::Index>(oh * ow));
  if (pointwise()) {
    ConstMatrixMap x(input, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(oh * ow));
    y.noalias() = weight * x;
    return;
  }
  col.resize(k * oh * ow);
  im2col(input, in_channels_, h, w, kernel_, stride_, padding_, oh, ow, col.data());
  ConstMatrixMap x(col.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(oh * ow));
  y.noalias() = weight * x;
}

void Conv2d::backward_sample(const double* input, std::size_t h, std::size_t w,
                             const double* grad_out, double* grad_input,
                             std::vector<double>& col) {
  const std::size_t oh = out_size(h);
  const std::size_t ow = out_size(w);
  const auto k = static_cast<Eigen::Index>(in_channels_ * kernel_ * kernel_);
  const auto cols = static_cast<Eigen::Index>(oh * ow);
  const auto cout = static_cast<Eigen::Index>(out_channels_);

  ConstMatrixMap weight(weight_.value.data(), cout, k);
  MatrixMap dweight(weight_.grad.data(), cout, k);
  ConstMatrixMap dy(grad_out, cout, cols);

  if (pointwise()) {
    ConstMatrixMap x(input, k, cols);
    dweight.noalias() += dy * x.transpose();
    if (grad_input) {
      MatrixMap dx(grad_input, k, cols);
      dx.noalias() = weight.transpose() * dy;
    }
    return;
  }
  col.resize(static_cast<std::size_t>(k * cols));
  im2col(input, in_channels_, h, w, kernel_, stride_, padding_, oh, ow, col.data());
  {
    ConstMatrixMap x(col.data(), k, cols);
    dweight.noalias() += dy * x.transpose();
  }
  if (grad_input) {
    MatrixMap dcol(col.data(), k, cols);
    dcol.noalias() = weight.transpose() * dy;
    std::fill(grad_input, grad_input + in_channels_ * h * w, 0.0);
    col2im(col.data(), in_channels_, h, w, kernel_, stride_, padding_, oh, ow, grad_input);
  }
}

Tensor Conv2d::forward(const Tensor& x, Mode mode) {
  require_rank(x, 4, "Conv2d");
  require_dim(x, 1, in_channels_, "Conv2d");
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  if (h + 2 * padding_ < kernel_ || w + 2 * padding_ < kernel_) {
    throw ShapeError("Conv2d: input " + x.shape_string() + " smaller than the kernel");
  }
  Tensor y({n, out_channels_, out_size(h), out_size(w)});
  std::vector<double> col;
  for (std::size_t i = 0; i < n; ++i) {
    forward_sample(x.sample(i).data(), h, w, y.sample(i).data(), col);
  }
  if (mode == Mode::Train) input_ = x;
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const std::size_t n = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
  Tensor dx;
  if (input_grad_) dx = Tensor(input_.shape());
  std::vector<double> col;
  for (std::size_t i = 0; i < n; ++i) {
    backward_sample(input_.sample(i).data(), h, w, grad_out.sample(i).data(),
                    input_grad_ ? dx.sample(i).data() : nullptr, col);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm

BatchNorm::BatchNorm(std::string name, std::size_t channels, double eps, double momentum)
    : channels_(channels),
      eps_(eps),
      momentum_(momentum),
      gamma_(name + ".gamma", Tensor({channels}, 1.0)),
      beta_(name + ".beta", Tensor({channels}, 0.0)),
      running_mean_({channels}, 0.0),
      running_var_({channels}, 1.0),
      name_(std::move(name)) {}

void BatchNorm::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

void BatchNorm::collect_state(std::vector<StateRef>& out) {
  out.emplace_back(gamma_.name, &gamma_.value);
  out.emplace_back(beta_.name, &beta_.value);
  out.emplace_back(name_ + ".running_mean", &running_mean_);
  out.emplace_back(name_ + ".running_var", &running_var_);
}

void BatchNorm::normalize(const Tensor& x, Mode mode, Tensor& xhat, std::vector<double>& inv_std) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("BatchNorm expects a rank-2 or rank-4 input, got " + x.shape_string());
  }
  require_dim(x, 1, channels_, "BatchNorm");
  const std::size_t n = x.dim(0);
  const std::size_t s = spatial_size(x);
  const auto m = static_cast<double>(n * s);

  std::vector<double> mean(channels_), var(channels_);
  if (mode == Mode::Train) {
    if (n * s == 0) throw ShapeError("BatchNorm: empty batch");
    for (std::size_t c = 0; c < channels_; ++c) {
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = x.data() + (i * channels_ + c) * s;
        for (std::size_t j = 0; j < s; ++j) sum += p[j];
      }
      mean[c] = sum / m;
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = x.data() + (i * channels_ + c) * s;
        for (std::size_t j = 0; j < s; ++j) ss += (p[j] - mean[c]) * (p[j] - mean[c]);
      }
      var[c] = ss / m;
      const double unbiased = m > 1.0 ? ss / (m - 1.0) : var[c];
      running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mean[c];
      running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels_; ++c) {
      mean[c] = running_mean_[c];
      var[c] = running_var_[c];
    }
  }

  inv_std.resize(channels_);
  for (std::size_t c = 0; c < channels_; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps_);

  xhat = Tensor(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < channels_; ++c) {
      const double* p = x.data() + (i * channels_ + c) * s;
      double* q = xhat.data() + (i * channels_ + c) * s;
      for (std::size_t j = 0; j < s; ++j) q[j] = (p[j] - mean[c]) * inv_std[c];
    }
  }
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  Tensor xhat;
  std::vector<double> inv_std;
  normalize(x, mode, xhat, inv_std);
  const std::size_t n = x.dim(0);
  const std::size_t s = spatial_size(x);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < channels_; ++c) {
      const double* q = xhat.data() + (i * channels_ + c) * s;
      double* out = y.data() + (i * channels_ + c) * s;
      for (std::size_t j = 0; j < s; ++j) out[j] = gamma_.value[c] * q[j] + beta_.value[c];
    }
  }
  if (mode == Mode::Train) {
    xhat_ = std::move(xhat);
    inv_std_ = std::move(inv_std);
  }
  return y;
}

Tensor BatchNorm::backward_from(const Tensor& xhat, const std::vector<double>& inv_std,
                                const Tensor& grad_out) {
  const std::size_t n = xhat.dim(0);
  const std::size_t s = spatial_size(xhat);
  const auto m = static_cast<double>(n * s);
  Tensor dx(xhat.shape());
  for (std::size_t c = 0; c < channels_; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * channels_ + c) * s;
      for (std::size_t j = 0; j < s; ++j) {
        sum_dy += grad_out[off + j];
        sum_dy_xhat += grad_out[off + j] * xhat[off + j];
      }
    }
    gamma_.grad[c] += sum_dy_xhat;
    beta_.grad[c] += sum_dy;
    const double scale = gamma_.value[c] * inv_std[c] / m;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * channels_ + c) * s;
      for (std::size_t j = 0; j < s; ++j) {
        dx[off + j] = scale * (m * grad_out[off + j] - sum_dy - xhat[off + j] * sum_dy_xhat);
      }
    }
  }
  return dx;
}

Tensor BatchNorm::backward(const Tensor& grad_out) { return backward_from(xhat_, inv_std_, grad_out); }

// ---------------------------------------------------------------------------
// LayerNorm

LayerNorm::LayerNorm(std::string name, std::size_t features, double eps)
    : features_(features),
      eps_(eps),
      gamma_(name + ".gamma", Tensor({features}, 1.0)),
      beta_(name + ".beta", Tensor({features}, 0.0)) {}

void LayerNorm::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

void LayerNorm::collect_state(std::vector<StateRef>& out) {
  out.emplace_back(gamma_.name, &gamma_.value);
  out.emplace_back(beta_.name, &beta_.value);
}

Tensor LayerNorm::forward(const Tensor& x, Mode mode) {
  require_rank(x, 2, "LayerNorm");
  require_dim(x, 1, features_, "LayerNorm");
  const std::size_t n = x.dim(0);
  const auto f = static_cast<double>(features_);
  Tensor xhat(x.shape());
  Tensor y(x.shape());
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = x.sample(i);
    double sum = 0.0;
    for (double v : row) sum += v;
    const double mean = sum / f;
    double ss = 0.0;
    for (double v : row) ss += (v - mean) * (v - mean);
    inv_std[i] = 1.0 / std::sqrt(ss / f + eps_);
    auto q = xhat.sample(i);
    auto out = y.sample(i);
    for (std::size_t j = 0; j < features_; ++j) {
      q[j] = (row[j] - mean) * inv_std[i];
      out[j] = gamma_.value[j] * q[j] + beta_.value[j];
    }
  }
  if (mode == Mode::Train) {
    xhat_ = std::move(xhat);
    inv_std_ = std::move(inv_std);
  }
  return y;
}

Tensor LayerNorm::backward(const Tensor& grad_out) {
  const std::size_t n = xhat_.dim(0);
  const auto f = static_cast<double>(features_);
  Tensor dx(xhat_.shape());
  std::vector<double> g(features_);
  for (std::size_t i = 0; i < n; ++i) {
    auto dy = grad_out.sample(i);
    auto q = xhat_.sample(i);
    double sum_g = 0.0;
    double sum_g_xhat = 0.0;
    for (std::size_t j = 0; j < features_; ++j) {
      gamma_.grad[j] += dy[j] * q[j];
      beta_.grad[j] += dy[j];
      g[j] = dy[j] * gamma_.value[j];
      sum_g += g[j];
      sum_g_xhat += g[j] * q[j];
    }
    auto out = dx.sample(i);
    for (std::size_t j = 0; j < features_; ++j) {
      out[j] = inv_std_[i] / f * (f * g[j] - sum_g - q[j] * sum_g_xhat);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Relu, pooling

Tensor Relu::forward(const Tensor& x, Mode mode) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] < 0.0 ? 0.0 : x[i];  // NaN passes through
  if (mode == Mode::Train) output_ = y;
  return y;
}

Tensor Relu::backward(const Tensor& grad_out) {
  Tensor dx(grad_out.shape());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = output_[i] > 0.0 ? grad_out[i] : 0.0;
  return dx;
}

Tensor MaxPool2d::forward(const Tensor& x, Mode mode) {
  require_rank(x, 4, "MaxPool2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = out_size(h), ow = out_size(w);
  Tensor y({n, c, oh, ow});
  std::vector<std::size_t> argmax(mode == Mode::Train ? y.size() : 0);
  const auto pad = static_cast<std::ptrdiff_t>(padding_);
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = x.data() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t ky = 0; ky < kernel_; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kernel_; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride_ + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t idx = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
            if (src[idx] > best) {
              best = src[idx];
              best_idx = idx;
            }
          }
        }
        y[o] = best;
        if (mode == Mode::Train) argmax[o] = plane * h * w + best_idx;
      }
    }
  }
  if (mode == Mode::Train) {
    argmax_ = std::move(argmax);
    input_shape_ = x.shape();
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) {
  Tensor dx(input_shape_);
  for (std::size_t o = 0; o < grad_out.size(); ++o) dx[argmax_[o]] += grad_out[o];
  return dx;
}

Tensor AvgPool2d::forward(const Tensor& x, Mode mode) {
  require_rank(x, 4, "AvgPool2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / kernel_, ow = w / kernel_;
  if (oh == 0 || ow == 0) throw ShapeError("AvgPool2d: input " + x.shape_string() + " too small");
  Tensor y({n, c, oh, ow});
  const double inv = 1.0 / static_cast<double>(kernel_ * kernel_);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = x.data() + plane * h * w;
    double* dst = y.data() + plane * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double sum = 0.0;
        for (std::size_t ky = 0; ky < kernel_; ++ky) {
          for (std::size_t kx = 0; kx < kernel_; ++kx) {
            sum += src[(oy * kernel_ + ky) * w + ox * kernel_ + kx];
          }
        }
        dst[oy * ow + ox] = sum * inv;
      }
    }
  }
  if (mode == Mode::Train) input_shape_ = x.shape();
  return y;
}

Tensor AvgPool2d::backward(const Tensor& grad_out) {
  Tensor dx(input_shape_);
  const std::size_t h = input_shape_[2], w = input_shape_[3];
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  const double inv = 1.0 / static_cast<double>(kernel_ * kernel_);
  for (std::size_t plane = 0; plane < input_shape_[0] * input_shape_[1]; ++plane) {
    const double* src = grad_out.data() + plane * oh * ow;
    double* dst = dx.data() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const double g = src[oy * ow + ox] * inv;
        for (std::size_t ky = 0; ky < kernel_; ++ky) {
          for (std::size_t kx = 0; kx < kernel_; ++kx) {
            dst[(oy * kernel_ + ky) * w + ox * kernel_ + kx] += g;
          }
        }
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::string name, std::size_t in_features, std::size_t out_features, Rng& rng)
    : in_(in_features),
      out_(out_features),
      weight_(name + ".weight", glorot_uniform(out_features, in_features, rng)),
      bias_(name + ".bias", Tensor({out_features}, 0.0)) {}

void Linear::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

void Linear::collect_state(std::vector<StateRef>& out) {
  out.emplace_back(weight_.name, &weight_.value);
  out.emplace_back(bias_.name, &bias_.value);
}

Tensor Linear::forward(const Tensor& x, Mode mode) {
  require_rank(x, 2, "Linear");
  require_dim(x, 1, in_, "Linear");
  const auto n = static_cast<Eigen::Index>(x.dim(0));
  Tensor y({x.dim(0), out_});
  ConstMatrixMap xm(x.data(), n, static_cast<Eigen::Index>(in_));
  ConstMatrixMap wm(weight_.value.data(), static_cast<Eigen::Index>(out_),
                    static_cast<Eigen::Index>(in_));
  MatrixMap ym(y.data(), n, static_cast<Eigen::Index>(out_));
  ym.noalias() = xm * wm.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < out_; ++j) ym(i, static_cast<Eigen::Index>(j)) += bias_.value[j];
  }
  if (mode == Mode::Train) input_ = x;
  return y;
}

Tensor Linear::backward(const Tensor& grad_out) {
  const auto n = static_cast<Eigen::Index>(input_.dim(0));
  const auto in = static_cast<Eigen::Index>(in_);
  const auto out = static_cast<Eigen::Index>(out_);
  ConstMatrixMap xm(input_.data(), n, in);
  ConstMatrixMap dy(grad_out.data(), n, out);
  ConstMatrixMap wm(weight_.value.data(), out, in);
  MatrixMap dw(weight_.grad.data(), out, in);
  dw.noalias() += dy.transpose() * xm;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < out; ++j) bias_.grad[static_cast<std::size_t>(j)] += dy(i, j);
  }
  Tensor dx(input_.shape());
  MatrixMap dxm(dx.data(), n, in);
  dxm.noalias() = dy * wm;
  return dx;
}

// ---------------------------------------------------------------------------
// PreActConv

PreActConv::PreActConv(const std::string& name, std::size_t in_channels,
                       std::size_t out_channels, std::size_t kernel, std::size_t padding,
                       Rng& rng)
    : norm_(name + ".norm", in_channels), conv_(name + ".conv", in_channels, out_channels, kernel, 1, padding, rng) {}

void PreActConv::collect_parameters(std::vector<Parameter*>& out) {
  norm_.collect_parameters(out);
  conv_.collect_parameters(out);
}

void PreActConv::collect_state(std::vector<StateRef>& out) {
  norm_.collect_state(out);
  conv_.collect_state(out);
}

void PreActConv::clear_cache() {
  xhat_ = Tensor();
  inv_std_.clear();
}

Tensor PreActConv::forward(const Tensor& x, Mode mode) {
  require_rank(x, 4, "PreActConv");
  Tensor xhat;
  std::vector<double> inv_std;
  norm_.normalize(x, mode, xhat, inv_std);

  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t s = h * w;
  Tensor y({n, conv_.out_channels(), conv_.out_size(h), conv_.out_size(w)});
  std::vector<double> act(c * s);
  std::vector<double> col;
  const Tensor& gamma = norm_.gamma().value;
  const Tensor& beta = norm_.beta().value;
  for (std::size_t i = 0; i < n; ++i) {
    const double* q = xhat.sample(i).data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t j = 0; j < s; ++j) {
        const double z = gamma[ch] * q[ch * s + j] + beta[ch];
        act[ch * s + j] = z > 0.0 ? z : 0.0;
      }
    }
    conv_.forward_sample(act.data(), h, w, y.sample(i).data(), col);
  }
  if (mode == Mode::Train) {
    xhat_ = std::move(xhat);
    inv_std_ = std::move(inv_std);
  }
  return y;
}

Tensor PreActConv::backward(const Tensor& grad_out) {
  const std::size_t n = xhat_.dim(0), c = xhat_.dim(1), h = xhat_.dim(2), w = xhat_.dim(3);
  const std::size_t s = h * w;
  const Tensor& gamma = norm_.gamma().value;
  const Tensor& beta = norm_.beta().value;
  Tensor dz(xhat_.shape());
  std::vector<double> act(c * s);
  std::vector<double> col;
  for (std::size_t i = 0; i < n; ++i) {
    const double* q = xhat_.sample(i).data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t j = 0; j < s; ++j) {
        const double z = gamma[ch] * q[ch * s + j] + beta[ch];
        act[ch * s + j] = z > 0.0 ? z : 0.0;
      }
    }
    double* d = dz.sample(i).data();
    conv_.backward_sample(act.data(), h, w, grad_out.sample(i).data(), d, col);
    for (std::size_t j = 0; j < c * s; ++j) {
      if (act[j] <= 0.0) d[j] = 0.0;
    }
  }
  return norm_.backward_from(xhat_, inv_std_, dz);
}

// ---------------------------------------------------------------------------
// Sequential

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& layer : layers_) h = layer->forward(h, mode);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

void Sequential::collect_parameters(std::vector<Parameter*>& out) {
  for (auto& layer : layers_) layer->collect_parameters(out);
}

void Sequential::collect_state(std::vector<StateRef>& out) {
  for (auto& layer : layers_) layer->collect_state(out);
}

void Sequential::clear_cache() {
  for (auto& layer : layers_) layer->clear_cache();
}

// ---------------------------------------------------------------------------
// DenseBlock

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.dim(2) * x.dim(3);
  Tensor out({n, end - begin, x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    const double* src = x.data() + (i * c + begin) * s;
    std::copy(src, src + (end - begin) * s, out.sample(i).data());
  }
  return out;
}

void write_channels(Tensor& dst, const Tensor& src, std::size_t begin) {
  const std::size_t n = dst.dim(0), c = dst.dim(1), s = dst.dim(2) * dst.dim(3);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(src.sample(i).begin(), src.sample(i).end(), dst.data() + (i * c + begin) * s);
  }
}

void add_channels(Tensor& dst, const Tensor& src, std::size_t begin) {
  const std::size_t n = dst.dim(0), c = dst.dim(1), s = dst.dim(2) * dst.dim(3);
  for (std::size_t i = 0; i < n; ++i) {
    auto from = src.sample(i);
    double* to = dst.data() + (i * c + begin) * s;
    for (std::size_t j = 0; j < from.size(); ++j) to[j] += from[j];
  }
}

DenseBlock::DenseBlock(const std::string& name, std::size_t in_channels, std::size_t layers,
                       std::size_t growth, std::size_t bottleneck_width, Rng& rng)
    : in_channels_(in_channels), growth_(growth) {
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t c_in = in_channels + l * growth;
    const std::string prefix = name + ".layer" + std::to_string(l + 1);
    const std::size_t inner = bottleneck_width * growth;
    layers_.push_back(std::make_unique<Unit>(
        Unit{PreActConv(prefix + ".bottleneck", c_in, inner, 1, 0, rng),
             PreActConv(prefix + ".conv", inner, growth, 3, 1, rng)}));
  }
}

Tensor DenseBlock::forward(const Tensor& x, Mode mode) {
  require_rank(x, 4, "DenseBlock");
  require_dim(x, 1, in_channels_, "DenseBlock");
  Tensor features({x.dim(0), out_channels(), x.dim(2), x.dim(3)});
  write_channels(features, x, 0);
  std::size_t c = in_channels_;
  for (auto& unit : layers_) {
    Tensor prefix = slice_channels(features, 0, c);
    Tensor grown = unit->conv.forward(unit->bottleneck.forward(prefix, mode), mode);
    write_channels(features, grown, c);
    c += growth_;
  }
  return features;
}

Tensor DenseBlock::backward(const Tensor& grad_out) {
  Tensor grad = grad_out;
  std::size_t c = out_channels();
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    c -= growth_;
    Tensor g = slice_channels(grad, c, c + growth_);
    Tensor g_prefix = (*it)->bottleneck.backward((*it)->conv.backward(g));
    add_channels(grad, g_prefix, 0);
  }
  return slice_channels(grad, 0, in_channels_);
}

void DenseBlock::collect_parameters(std::vector<Parameter*>& out) {
  for (auto& unit : layers_) {
    unit->bottleneck.collect_parameters(out);
    unit->conv.collect_parameters(out);
  }
}

void DenseBlock::collect_state(std::vector<StateRef>& out) {
  for (auto& unit : layers_) {
    unit->bottleneck.collect_state(out);
    unit->conv.collect_state(out);
  }
}

void DenseBlock::clear_cache() {
  for (auto& unit : layers_) {
    unit->bottleneck.clear_cache();
    unit->conv.clear_cache();
  }
}

}  // namespace mmtumor::nn
