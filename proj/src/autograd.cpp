#include "dualsr/autograd.hpp"

#include <Eigen/Core>
#include <cmath>
#include <unordered_set>

namespace dualsr {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace dualsr

namespace dualsr::ag {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
Node<T>& input(Node<T>& n, std::size_t i) {
  return *n.inputs[i];
}

template <typename T>
void require_4d(const Var<T>& x, const char* what) {
  if (x.value().rank() != 4) {
    throw ShapeError(std::string(what) + ": expected NCHW, got " + shape_str(x.shape()));
  }
}

// Generic unary op: f computes the value, df the derivative given (x, y).
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  const auto& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_result<T>(std::move(y), {a}, [df](Node<T>& n) {
    auto& in = input(n, 0);
    if (!in.requires_grad) return;
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * df(in.value[i], n.value[i]);
  });
}

template <typename T>
void im2col(const T* x, int channels, int height, int width, int k, int stride, int pad, int out_h,
            int out_w, T* cols) {
  const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* row = cols + ((static_cast<std::size_t>(c) * k + ki) * k + kj) * plane;
        const T* src = x + static_cast<std::size_t>(c) * height * width;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride - pad + ki;
          T* dst = row + static_cast<std::size_t>(oh) * out_w;
          if (ih < 0 || ih >= height) {
            std::fill(dst, dst + out_w, T(0));
            continue;
          }
          const T* line = src + static_cast<std::size_t>(ih) * width;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * stride - pad + kj;
            dst[ow] = (iw >= 0 && iw < width) ? line[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, T* x) {
  const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* row = cols + ((static_cast<std::size_t>(c) * k + ki) * k + kj) * plane;
        T* dst = x + static_cast<std::size_t>(c) * height * width;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= height) continue;
          T* line = dst + static_cast<std::size_t>(ih) * width;
          const T* src = row + static_cast<std::size_t>(oh) * out_w;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < width) line[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void backward(const Var<T>& root) {
  if (!root.defined()) throw std::invalid_argument("backward on undefined variable");
  if (root.value().size() != 1) {
    throw ShapeError("backward root must be scalar, got " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = input(n, k);
      if (!in.requires_grad) continue;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& n) {
    if (input(n, 0).requires_grad) {
      auto& g = input(n, 0).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (input(n, 1).requires_grad) {
      auto& g = input(n, 1).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(y), {a, b}, [](Node<T>& n) {
    auto& x0 = input(n, 0);
    auto& x1 = input(n, 1);
    if (x0.requires_grad) {
      auto& g = x0.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * x1.value[i];
    }
    if (x1.requires_grad) {
      auto& g = x1.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * x0.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return unary<T>(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return unary<T>(
      a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary<T>(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  return unary<T>(
      a, [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x, T) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return unary<T>(
      a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  return unary<T>(
      a, [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](T x, T) { return (x < lo || x > hi) ? T(0) : T(1); });
}

template <typename T>
Var<T> log_guarded(const Var<T>& a, T eps) {
  return unary<T>(
      a, [eps](T x) { return std::log(x < eps ? eps : x); },
      [eps](T x, T) { return x < eps ? T(0) : T(1) / x; });
}

template <typename T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& g) {
  require_4d(x, "mul_channel");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const int gn = g.value().rank() == 4 ? g.dim(0) : -1;
  if (gn < 0 || (gn != N && gn != 1) || g.dim(1) != C || g.dim(2) != 1 || g.dim(3) != 1) {
    throw ShapeError("mul_channel: gate " + shape_str(g.shape()) + " vs input " + shape_str(x.shape()));
  }
  Tensor<T> y(x.shape());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T s = g.value()[static_cast<std::size_t>(gn == 1 ? 0 : n) * C + c];
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) y[base + i] = x.value()[base + i] * s;
    }
  }
  return make_result<T>(std::move(y), {x, g}, [N, C, plane, gn](Node<T>& n) {
    auto& xin = input(n, 0);
    auto& gin = input(n, 1);
    for (int b = 0; b < N; ++b) {
      for (int c = 0; c < C; ++c) {
        const std::size_t gi = static_cast<std::size_t>(gn == 1 ? 0 : b) * C + c;
        const std::size_t base = (static_cast<std::size_t>(b) * C + c) * plane;
        if (xin.requires_grad) {
          auto& gx = xin.grad_buffer();
          const T s = gin.value[gi];
          for (std::size_t i = 0; i < plane; ++i) gx[base + i] += n.grad[base + i] * s;
        }
        if (gin.requires_grad) {
          T acc = 0;
          for (std::size_t i = 0; i < plane; ++i) acc += n.grad[base + i] * xin.value[base + i];
          gin.grad_buffer()[gi] += acc;
        }
      }
    }
  });
}

template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& b) {
  require_4d(x, "add_channel");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const int bn = b.value().rank() == 4 ? b.dim(0) : -1;
  if (bn < 0 || (bn != N && bn != 1) || b.dim(1) != C || b.dim(2) != 1 || b.dim(3) != 1) {
    throw ShapeError("add_channel: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  }
  Tensor<T> y(x.shape());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T s = b.value()[static_cast<std::size_t>(bn == 1 ? 0 : n) * C + c];
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) y[base + i] = x.value()[base + i] + s;
    }
  }
  return make_result<T>(std::move(y), {x, b}, [N, C, plane, bn](Node<T>& n) {
    auto& xin = input(n, 0);
    auto& bin = input(n, 1);
    if (xin.requires_grad) {
      auto& gx = xin.grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[i];
    }
    if (bin.requires_grad) {
      auto& gb = bin.grad_buffer();
      for (int k = 0; k < N; ++k) {
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(k) * C + c) * plane;
          T acc = 0;
          for (std::size_t i = 0; i < plane; ++i) acc += n.grad[base + i];
          gb[static_cast<std::size_t>(bn == 1 ? 0 : k) * C + c] += acc;
        }
      }
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().values()) acc += v;
  return make_result<T>(Tensor<T>({1}, acc), {a}, [](Node<T>& n) {
    auto& in = input(n, 0);
    auto& g = in.grad_buffer();
    const T d = n.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  if (a.value().empty()) throw ShapeError("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_4d(x, "global_avg_pool");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> y({N, C, 1, 1});
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(N) * C; ++nc) {
    T acc = 0;
    for (std::size_t i = 0; i < plane; ++i) acc += x.value()[nc * plane + i];
    y[nc] = acc / static_cast<T>(plane);
  }
  return make_result<T>(std::move(y), {x}, [plane](Node<T>& n) {
    auto& g = input(n, 0).grad_buffer();
    for (std::size_t nc = 0; nc < n.grad.size(); ++nc) {
      const T d = n.grad[nc] / static_cast<T>(plane);
      for (std::size_t i = 0; i < plane; ++i) g[nc * plane + i] += d;
    }
  });
}

template <typename T>
Var<T> normalize_channels(const Var<T>& x, T eps) {
  require_4d(x, "normalize_channels");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> y(x.shape());
  Tensor<T> inv_norm({N, 1, x.dim(2), x.dim(3)});
  for (int n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      T ss = eps;
      for (int c = 0; c < C; ++c) {
        const T v = x.value()[(static_cast<std::size_t>(n) * C + c) * plane + p];
        ss += v * v;
      }
      const T inv = T(1) / std::sqrt(ss);
      inv_norm[static_cast<std::size_t>(n) * plane + p] = inv;
      for (int c = 0; c < C; ++c) {
        const std::size_t i = (static_cast<std::size_t>(n) * C + c) * plane + p;
        y[i] = x.value()[i] * inv;
      }
    }
  }
  return make_result<T>(std::move(y), {x}, [N, C, plane, inv_norm](Node<T>& n) {
    auto& g = input(n, 0).grad_buffer();
    // dy_c/dx_k = inv (delta_ck - y_c y_k)
    for (int b = 0; b < N; ++b) {
      for (std::size_t p = 0; p < plane; ++p) {
        const T inv = inv_norm[static_cast<std::size_t>(b) * plane + p];
        T dot = 0;
        for (int c = 0; c < C; ++c) {
          const std::size_t i = (static_cast<std::size_t>(b) * C + c) * plane + p;
          dot += n.grad[i] * n.value[i];
        }
        for (int c = 0; c < C; ++c) {
          const std::size_t i = (static_cast<std::size_t>(b) * C + c) * plane + p;
          g[i] += inv * (n.grad[i] - n.value[i] * dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> y = a.value().reshaped(std::move(shape));
  return make_result<T>(std::move(y), {a}, [](Node<T>& n) {
    auto& g = input(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& x : xs) require_4d(x, "concat_channels");
  const int N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  int C = 0;
  for (const auto& x : xs) {
    if (x.dim(0) != N || x.dim(2) != H || x.dim(3) != W) {
      throw ShapeError("concat_channels: " + shape_str(x.shape()) + " vs " + shape_str(xs[0].shape()));
    }
    C += x.dim(1);
  }
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor<T> y({N, C, H, W});
  std::vector<int> widths;
  for (int n = 0; n < N; ++n) {
    std::size_t off = static_cast<std::size_t>(n) * C * plane;
    for (const auto& x : xs) {
      const std::size_t len = static_cast<std::size_t>(x.dim(1)) * plane;
      std::copy_n(x.value().data() + n * len, len, y.data() + off);
      off += len;
    }
  }
  for (const auto& x : xs) widths.push_back(x.dim(1));
  return make_result<T>(std::move(y), xs, [N, C, plane, widths](Node<T>& n) {
    for (int b = 0; b < N; ++b) {
      std::size_t off = static_cast<std::size_t>(b) * C * plane;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        const std::size_t len = static_cast<std::size_t>(widths[k]) * plane;
        auto& in = input(n, k);
        if (in.requires_grad) {
          auto& g = in.grad_buffer();
          for (std::size_t i = 0; i < len; ++i) g[b * len + i] += n.grad[off + i];
        }
        off += len;
      }
    }
  });
}

template <typename T>
Var<T> pixel_unshuffle(const Var<T>& x, int factor) {
  require_4d(x, "pixel_unshuffle");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), s = factor;
  if (s < 1 || H % s != 0 || W % s != 0) {
    throw ShapeError("pixel_unshuffle: " + shape_str(x.shape()) + " not divisible by " + std::to_string(s));
  }
  const int Ho = H / s, Wo = W / s;
  // out[n, c*s*s + i*s + j, h, w] = x[n, c, h*s + i, w*s + j]
  auto index_pair = [=](int n, int c, int i, int j, int h, int w) {
    const std::size_t src = ((static_cast<std::size_t>(n) * C + c) * H + h * s + i) * W + w * s + j;
    const std::size_t dst =
        ((static_cast<std::size_t>(n) * C * s * s + (static_cast<std::size_t>(c) * s + i) * s + j) * Ho + h) * Wo + w;
    return std::pair{src, dst};
  };
  Tensor<T> y({N, C * s * s, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j)
          for (int h = 0; h < Ho; ++h)
            for (int w = 0; w < Wo; ++w) {
              auto [src, dst] = index_pair(n, c, i, j, h, w);
              y[dst] = x.value()[src];
            }
  return make_result<T>(std::move(y), {x}, [=](Node<T>& node) {
    auto& g = input(node, 0).grad_buffer();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < s; ++i)
          for (int j = 0; j < s; ++j)
            for (int h = 0; h < Ho; ++h)
              for (int w = 0; w < Wo; ++w) {
                auto [src, dst] = index_pair(n, c, i, j, h, w);
                g[src] += node.grad[dst];
              }
  });
}

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int factor) {
  require_4d(x, "pixel_shuffle");
  const int N = x.dim(0), Cs = x.dim(1), H = x.dim(2), W = x.dim(3), s = factor;
  if (s < 1 || Cs % (s * s) != 0) {
    throw ShapeError("pixel_shuffle: channels of " + shape_str(x.shape()) + " not divisible by " +
                     std::to_string(s * s));
  }
  const int C = Cs / (s * s), Ho = H * s, Wo = W * s;
  auto index_pair = [=](int n, int c, int i, int j, int h, int w) {
    const std::size_t src =
        ((static_cast<std::size_t>(n) * Cs + (static_cast<std::size_t>(c) * s + i) * s + j) * H + h) * W + w;
    const std::size_t dst = ((static_cast<std::size_t>(n) * C + c) * Ho + h * s + i) * Wo + w * s + j;
    return std::pair{src, dst};
  };
  Tensor<T> y({N, C, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j)
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
              auto [src, dst] = index_pair(n, c, i, j, h, w);
              y[dst] = x.value()[src];
            }
  return make_result<T>(std::move(y), {x}, [=](Node<T>& node) {
    auto& g = input(node, 0).grad_buffer();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < s; ++i)
          for (int j = 0; j < s; ++j)
            for (int h = 0; h < H; ++h)
              for (int w = 0; w < W; ++w) {
                auto [src, dst] = index_pair(n, c, i, j, h, w);
                g[src] += node.grad[dst];
              }
  });
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int factor) {
  require_4d(x, "upsample_nearest");
  const int NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3), s = factor;
  const int Ho = H * s, Wo = W * s;
  Tensor<T> y({x.dim(0), x.dim(1), Ho, Wo});
  for (int p = 0; p < NC; ++p)
    for (int h = 0; h < Ho; ++h)
      for (int w = 0; w < Wo; ++w)
        y[(static_cast<std::size_t>(p) * Ho + h) * Wo + w] =
            x.value()[(static_cast<std::size_t>(p) * H + h / s) * W + w / s];
  return make_result<T>(std::move(y), {x}, [=](Node<T>& n) {
    auto& g = input(n, 0).grad_buffer();
    for (int p = 0; p < NC; ++p)
      for (int h = 0; h < Ho; ++h)
        for (int w = 0; w < Wo; ++w)
          g[(static_cast<std::size_t>(p) * H + h / s) * W + w / s] +=
              n.grad[(static_cast<std::size_t>(p) * Ho + h) * Wo + w];
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<T> y({M, N});
  MatMap<T>(y.data(), M, N).noalias() =
      ConstMatMap<T>(a.value().data(), M, K) * ConstMatMap<T>(b.value().data(), K, N);
  return make_result<T>(std::move(y), {a, b}, [M, K, N](Node<T>& n) {
    auto& ain = input(n, 0);
    auto& bin = input(n, 1);
    ConstMatMap<T> dy(n.grad.data(), M, N);
    if (ain.requires_grad) {
      MatMap<T>(ain.grad_buffer().data(), M, K).noalias() +=
          dy * ConstMatMap<T>(bin.value.data(), K, N).transpose();
    }
    if (bin.requires_grad) {
      MatMap<T>(bin.grad_buffer().data(), K, N).noalias() +=
          ConstMatMap<T>(ain.value.data(), M, K).transpose() * dy;
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (x.value().rank() != 2 || w.value().rank() != 2 || x.dim(1) != w.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  }
  const int N = x.dim(0), I = x.dim(1), O = w.dim(0);
  const bool has_bias = b.defined();
  if (has_bias && (b.value().size() != static_cast<std::size_t>(O))) {
    throw ShapeError("linear: bias " + shape_str(b.shape()) + " for " + std::to_string(O) + " outputs");
  }
  Tensor<T> y({N, O});
  MatMap<T> ym(y.data(), N, O);
  ym.noalias() = ConstMatMap<T>(x.value().data(), N, I) * ConstMatMap<T>(w.value().data(), O, I).transpose();
  if (has_bias) {
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < O; ++o) ym(n, o) += b.value()[o];
  }
  std::vector<Var<T>> ins{x, w};
  if (has_bias) ins.push_back(b);
  return make_result<T>(std::move(y), ins, [N, I, O, has_bias](Node<T>& n) {
    ConstMatMap<T> dy(n.grad.data(), N, O);
    auto& xin = input(n, 0);
    auto& win = input(n, 1);
    if (xin.requires_grad) {
      MatMap<T>(xin.grad_buffer().data(), N, I).noalias() += dy * ConstMatMap<T>(win.value.data(), O, I);
    }
    if (win.requires_grad) {
      MatMap<T>(win.grad_buffer().data(), O, I).noalias() +=
          dy.transpose() * ConstMatMap<T>(xin.value.data(), N, I);
    }
    if (has_bias && input(n, 2).requires_grad) {
      auto& gb = input(n, 2).grad_buffer();
      for (int k = 0; k < N; ++k)
        for (int o = 0; o < O; ++o) gb[o] += dy(k, o);
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  require_4d(x, "conv2d");
  if (w.value().rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " for input " + shape_str(x.shape()));
  }
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), k = w.dim(2);
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(x.shape()));
  const bool has_bias = b.defined();
  if (has_bias && b.value().size() != static_cast<std::size_t>(O)) {
    throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " for " + std::to_string(O) + " outputs");
  }
  const bool direct = (k == 1 && stride == 1 && pad == 0);
  const int K = C * k * k;
  const int P = Ho * Wo;
  const std::size_t in_plane = static_cast<std::size_t>(C) * H * W;

  Tensor<T> y({N, O, Ho, Wo});
  AlignedVector<T> cols(direct ? 0 : static_cast<std::size_t>(K) * P);
  ConstMatMap<T> wm(w.value().data(), O, K);
  for (int n = 0; n < N; ++n) {
    const T* xn = x.value().data() + n * in_plane;
    if (!direct) im2col(xn, C, H, W, k, stride, pad, Ho, Wo, cols.data());
    MatMap<T> yn(y.data() + static_cast<std::size_t>(n) * O * P, O, P);
    yn.noalias() = wm * ConstMatMap<T>(direct ? xn : cols.data(), K, P);
    if (has_bias) {
      for (int o = 0; o < O; ++o) yn.row(o).array() += b.value()[o];
    }
  }

  std::vector<Var<T>> ins{x, w};
  if (has_bias) ins.push_back(b);
  return make_result<T>(std::move(y), ins, [=](Node<T>& node) {
    auto& xin = input(node, 0);
    auto& win = input(node, 1);
    AlignedVector<T> buf(direct ? 0 : static_cast<std::size_t>(K) * P);
    ConstMatMap<T> wmat(win.value.data(), O, K);
    for (int n = 0; n < N; ++n) {
      ConstMatMap<T> dy(node.grad.data() + static_cast<std::size_t>(n) * O * P, O, P);
      const T* xn = xin.value.data() + n * in_plane;
      if (win.requires_grad) {
        if (!direct) im2col(xn, C, H, W, k, stride, pad, Ho, Wo, buf.data());
        MatMap<T>(win.grad_buffer().data(), O, K).noalias() +=
            dy * ConstMatMap<T>(direct ? xn : buf.data(), K, P).transpose();
      }
      if (xin.requires_grad) {
        T* gx = xin.grad_buffer().data() + n * in_plane;
        if (direct) {
          MatMap<T>(gx, K, P).noalias() += wmat.transpose() * dy;
        } else {
          MatMap<T>(buf.data(), K, P).noalias() = wmat.transpose() * dy;
          col2im(buf.data(), C, H, W, k, stride, pad, Ho, Wo, gx);
        }
      }
      if (has_bias && input(node, 2).requires_grad) {
        auto& gb = input(node, 2).grad_buffer();
        for (int o = 0; o < O; ++o) gb[o] += dy.row(o).sum();
      }
    }
  });
}

#define DUALSR_INSTANTIATE_AG(T)                                                          \
  template void backward<T>(const Var<T>&);                                               \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                   \
  template Var<T> scale<T>(const Var<T>&, T);                                             \
  template Var<T> add_scalar<T>(const Var<T>&, T);                                       \
  template Var<T> square<T>(const Var<T>&);                                               \
  template Var<T> gelu<T>(const Var<T>&);                                                 \
  template Var<T> sigmoid<T>(const Var<T>&);                                              \
  template Var<T> silu<T>(const Var<T>&);                                                 \
  template Var<T> leaky_relu<T>(const Var<T>&, T);                                        \
  template Var<T> clamp<T>(const Var<T>&, T, T);                                          \
  template Var<T> log_guarded<T>(const Var<T>&, T);                                       \
  template Var<T> mul_channel<T>(const Var<T>&, const Var<T>&);                           \
  template Var<T> add_channel<T>(const Var<T>&, const Var<T>&);                           \
  template Var<T> sum<T>(const Var<T>&);                                                  \
  template Var<T> mean<T>(const Var<T>&);                                                 \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                      \
  template Var<T> normalize_channels<T>(const Var<T>&, T);                                \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                       \
  template Var<T> concat_channels<T>(const std::vector<Var<T>>&);                         \
  template Var<T> pixel_unshuffle<T>(const Var<T>&, int);                                 \
  template Var<T> pixel_shuffle<T>(const Var<T>&, int);                                   \
  template Var<T> upsample_nearest<T>(const Var<T>&, int);                                \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                 \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);

DUALSR_INSTANTIATE_AG(float)
DUALSR_INSTANTIATE_AG(double)

}  // namespace dualsr::ag
