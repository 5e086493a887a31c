#include "retiscreen/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace retiscreen::dl {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, oh, ow, stride, pad;
  std::size_t q() const { return c * kh * kw; }
  std::size_t p() const { return oh * ow; }
};

// col is (C·KH·KW) × (OH·OW), row-major.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    const T* plane = image + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((ci * g.kh + ky) * g.kw + kx) * g.p();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* image) {
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    T* plane = image + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((ci * g.kh + ky) * g.kw + kx) * g.p();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.w;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, std::size_t stride,
                      std::size_t padding) {
  const auto shapes = " (input " + to_string(input.shape()) + ", kernel " + to_string(kernel.shape()) + ")";
  require(input.rank() == 4 && kernel.rank() == 4, "conv2d expects NCHW input and OIHW kernel" + shapes);
  require(input.dim(1) == kernel.dim(1), "conv2d channel mismatch" + shapes);
  require(stride >= 1, "conv2d stride must be >= 1");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), kernel.dim(2),
                 kernel.dim(3), 0, 0, stride, padding};
  require(g.h + 2 * padding >= g.kh && g.w + 2 * padding >= g.kw, "conv2d kernel larger than padded input" + shapes);
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t in_stride = g.c * g.h * g.w;
  const std::size_t out_stride = g.o * g.p();
  std::vector<T> out(g.n * out_stride);
  std::vector<T> col(g.q() * g.p());
  ConstMatMap<T> k(kernel.values().data(), g.o, g.q());
  const T* in = input.values().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(in + n * in_stride, g, col.data());
    MatMap<T>(out.data() + n * out_stride, g.o, g.p()).noalias() =
        k * ConstMatMap<T>(col.data(), g.q(), g.p());
  }

  return BasicTensor<T>::from_op(
      {g.n, g.o, g.oh, g.ow}, std::move(out), {input, kernel}, [g, in_stride, out_stride](TensorNode<T>& self) {
        auto& in_node = *self.parents[0];
        auto& k_node = *self.parents[1];
        std::vector<T> col(g.q() * g.p());
        std::vector<T> dcol(in_node.requires_grad ? g.q() * g.p() : 0);
        ConstMatMap<T> k(k_node.values.data(), g.o, g.q());
        for (std::size_t n = 0; n < g.n; ++n) {
          ConstMatMap<T> gout(self.grad.data() + n * out_stride, g.o, g.p());
          if (k_node.requires_grad) {
            im2col(in_node.values.data() + n * in_stride, g, col.data());
            MatMap<T>(k_node.grad_storage().data(), g.o, g.q()).noalias() +=
                gout * ConstMatMap<T>(col.data(), g.q(), g.p()).transpose();
          }
          if (in_node.requires_grad) {
            MatMap<T>(dcol.data(), g.q(), g.p()).noalias() = k.transpose() * gout;
            col2im_add(dcol.data(), g, in_node.grad_storage().data() + n * in_stride);
          }
        }
      });
}

template <typename T>
BasicTensor<T> add_channel_bias(const BasicTensor<T>& input, const BasicTensor<T>& bias) {
  require(input.rank() == 4 && bias.size() == input.dim(1),
          "add_channel_bias shape mismatch (input " + to_string(input.shape()) + ", bias " +
              to_string(bias.shape()) + ")");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  std::vector<T> out(input.values().begin(), input.values().end());
  const auto b = bias.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* p = out.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) p[j] += b[ch];
    }
  return BasicTensor<T>::from_op(input.shape(), std::move(out), {input, bias}, [n, c, hw](TensorNode<T>& self) {
    auto& x = *self.parents[0];
    auto& b = *self.parents[1];
    if (x.requires_grad) {
      auto& gx = x.grad_storage();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    }
    if (b.requires_grad) {
      auto& gb = b.grad_storage();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* g = self.grad.data() + (i * c + ch) * hw;
          T acc{0};
#pragma omp simd reduction(+ : acc)
          for (std::size_t j = 0; j < hw; ++j) acc += g[j];
          gb[ch] += acc;
        }
    }
  });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  const auto x = input.values();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return BasicTensor<T>::from_op(input.shape(), std::move(out), {input}, [](TensorNode<T>& self) {
    auto& x = *self.parents[0];
    auto& gx = x.grad_storage();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (x.values[i] > T{0}) gx[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& input, std::size_t window) {
  require(input.rank() == 4, "max_pool2d expects NCHW input, got " + to_string(input.shape()));
  require(window >= 1 && input.dim(2) >= window && input.dim(3) >= window,
          "max_pool2d window " + std::to_string(window) + " too large for " + to_string(input.shape()));
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = h / window, ow = w / window;
  std::vector<T> out(planes * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  const auto x = input.values();
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = base + oy * window * w + ox * window;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = base + (oy * window + dy) * w + ox * window + dx;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = x[best];
        argmax[o] = best;
      }
  }
  Shape shape{input.dim(0), input.dim(1), oh, ow};
  return BasicTensor<T>::from_op(std::move(shape), std::move(out), {input},
                                 [argmax = std::move(argmax)](TensorNode<T>& self) {
                                   auto& gx = self.parents[0]->grad_storage();
                                   for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += self.grad[o];
                                 });
}

template <typename T>
BasicTensor<T> global_average_pool(const BasicTensor<T>& input) {
  require(input.rank() == 4, "global_average_pool expects NCHW input, got " + to_string(input.shape()));
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  std::vector<T> out(n * c);
  const auto x = input.values();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.data() + p * hw;
    T acc{0};
#pragma omp simd reduction(+ : acc)
    for (std::size_t j = 0; j < hw; ++j) acc += src[j];
    out[p] = acc / static_cast<T>(hw);
  }
  return BasicTensor<T>::from_op({n, c}, std::move(out), {input}, [hw](TensorNode<T>& self) {
    auto& gx = self.parents[0]->grad_storage();
    const T scale = T{1} / static_cast<T>(hw);
    for (std::size_t p = 0; p < self.grad.size(); ++p) {
      const T g = self.grad[p] * scale;
      T* dst = gx.data() + p * hw;
      for (std::size_t j = 0; j < hw; ++j) dst[j] += g;
    }
  });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  const auto shapes = " (input " + to_string(input.shape()) + ", weight " + to_string(weight.shape()) + ", bias " +
                      to_string(bias.shape()) + ")";
  require(input.rank() == 2 && weight.rank() == 2, "linear expects 2-D input and weight" + shapes);
  require(input.dim(1) == weight.dim(1) && bias.size() == weight.dim(0), "linear shape mismatch" + shapes);
  const std::size_t n = input.dim(0), in_features = input.dim(1), out_features = weight.dim(0);
  std::vector<T> out(n * out_features);
  {
    MatMap<T> y(out.data(), n, out_features);
    y.noalias() = ConstMatMap<T>(input.values().data(), n, in_features) *
                  ConstMatMap<T>(weight.values().data(), out_features, in_features).transpose();
    const auto b = bias.values();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out_features; ++j) y(i, j) += b[j];
  }
  return BasicTensor<T>::from_op(
      {n, out_features}, std::move(out), {input, weight, bias}, [n, in_features, out_features](TensorNode<T>& self) {
        auto& x = *self.parents[0];
        auto& w = *self.parents[1];
        auto& b = *self.parents[2];
        ConstMatMap<T> g(self.grad.data(), n, out_features);
        if (x.requires_grad)
          MatMap<T>(x.grad_storage().data(), n, in_features).noalias() +=
              g * ConstMatMap<T>(w.values.data(), out_features, in_features);
        if (w.requires_grad)
          MatMap<T>(w.grad_storage().data(), out_features, in_features).noalias() +=
              g.transpose() * ConstMatMap<T>(x.values.data(), n, in_features);
        if (b.requires_grad) {
          auto& gb = b.grad_storage();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < out_features; ++j) gb[j] += g(i, j);
        }
      });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  require(logits.rank() == 2, "softmax expects an N×K tensor, got " + to_string(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  const auto z = logits.values();
  std::vector<T> out(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z.data() + i * k;
    const T mx = *std::max_element(row, row + k);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j)
      out[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / total);
  }
  return BasicTensor<T>::from_op(logits.shape(), out, {logits}, [n, k, p = out](TensorNode<T>& self) {
    auto& gz = self.parents[0]->grad_storage();
    // dz_i = p_i · Σ_j p_j (g_i − g_j); this form keeps precision when one
    // component saturates at 1.
    for (std::size_t r = 0; r < n; ++r) {
      const T* pr = p.data() + r * k;
      const T* g = self.grad.data() + r * k;
      for (std::size_t i = 0; i < k; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j)
          if (j != i) acc += static_cast<double>(pr[j]) * (static_cast<double>(g[i]) - static_cast<double>(g[j]));
        gz[r * k + i] += static_cast<T>(static_cast<double>(pr[i]) * acc);
      }
    }
  });
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets,
                             std::span<const double> sample_weights) {
  require(logits.rank() == 2, "cross_entropy expects N×K logits, got " + to_string(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  require(targets.size() == n, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                   std::to_string(n) + " rows");
  require(sample_weights.empty() || sample_weights.size() == n, "cross_entropy: sample weight count mismatch");
  std::vector<double> weights(n, 1.0);
  if (!sample_weights.empty()) weights.assign(sample_weights.begin(), sample_weights.end());
  double weight_total = 0.0;
  for (double w : weights) {
    require(w >= 0.0, "cross_entropy: negative sample weight");
    weight_total += w;
  }
  require(weight_total > 0.0, "cross_entropy: sample weights sum to zero");

  const auto z = logits.values();
  std::vector<double> probs(n * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    require(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < k,
            "cross_entropy: target " + std::to_string(targets[i]) + " outside [0, " + std::to_string(k) + ")");
    const T* row = z.data() + i * k;
    const double mx = static_cast<double>(*std::max_element(row, row + k));
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(static_cast<double>(row[j]) - mx);
    const double log_total = std::log(total);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(static_cast<double>(row[j]) - mx - log_total);
    loss += weights[i] * (mx + log_total - static_cast<double>(row[targets[i]]));
  }
  loss /= weight_total;

  std::vector<int> target_copy(targets.begin(), targets.end());
  return BasicTensor<T>::from_op(
      {1}, {static_cast<T>(loss)}, {logits},
      [n, k, probs = std::move(probs), weights = std::move(weights), target_copy = std::move(target_copy),
       weight_total](TensorNode<T>& self) {
        auto& gz = self.parents[0]->grad_storage();
        const double upstream = static_cast<double>(self.grad[0]);
        for (std::size_t i = 0; i < n; ++i) {
          const double scale = upstream * weights[i] / weight_total;
          for (std::size_t j = 0; j < k; ++j) {
            const double indicator = static_cast<int>(j) == target_copy[i] ? 1.0 : 0.0;
            gz[i * k + j] += static_cast<T>(scale * (probs[i * k + j] - indicator));
          }
        }
      });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& input) {
  double acc = 0.0;
  for (T v : input.values()) acc += static_cast<double>(v);
  return BasicTensor<T>::from_op({1}, {static_cast<T>(acc)}, {input}, [](TensorNode<T>& self) {
    auto& gx = self.parents[0]->grad_storage();
    for (auto& g : gx) g += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> weighted_sum(const BasicTensor<T>& input, std::span<const T> coefficients) {
  require(input.rank() == 2 && input.dim(1) == coefficients.size(),
          "weighted_sum: " + std::to_string(coefficients.size()) + " coefficients for " + to_string(input.shape()));
  const std::size_t n = input.dim(0), k = input.dim(1);
  const auto x = input.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) acc += static_cast<double>(x[i * k + j]) * static_cast<double>(coefficients[j]);
  std::vector<T> coeffs(coefficients.begin(), coefficients.end());
  return BasicTensor<T>::from_op({1}, {static_cast<T>(acc)}, {input},
                                 [n, k, coeffs = std::move(coeffs)](TensorNode<T>& self) {
                                   auto& gx = self.parents[0]->grad_storage();
                                   for (std::size_t i = 0; i < n; ++i)
                                     for (std::size_t j = 0; j < k; ++j) gx[i * k + j] += self.grad[0] * coeffs[j];
                                 });
}

#define RETISCREEN_INSTANTIATE_OPS(T)                                                                        \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t, std::size_t);    \
  template BasicTensor<T> add_channel_bias(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> max_pool2d(const BasicTensor<T>&, std::size_t);                                    \
  template BasicTensor<T> global_average_pool(const BasicTensor<T>&);                                        \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);       \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, std::span<const int>, std::span<const double>); \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                        \
  template BasicTensor<T> weighted_sum(const BasicTensor<T>&, std::span<const T>);

RETISCREEN_INSTANTIATE_OPS(float)
RETISCREEN_INSTANTIATE_OPS(double)

}  // namespace retiscreen::dl
