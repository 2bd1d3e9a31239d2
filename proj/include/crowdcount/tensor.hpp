#pragma once

// Dense rank<=4 tensors (64-bit values, channels-first, row-major) with a
// tape-based reverse-mode gradient for exactly the operation set the crowd
// counting network needs, plus a central-finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace crowdcount {

// Operand shapes that cannot be combined.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated iff requires_grad, same length as data
  bool requires_grad = false;
};

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace detail

// Value-semantics handle over a shared buffer. Copies alias the same storage;
// the backward tape relies on that to accumulate into leaf gradients.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    check_shape(shape);
    Tensor t;
    t.p_ = std::make_shared<detail::TensorImpl>();
    t.p_->shape = std::move(shape);
    t.p_->data.assign(detail::shape_numel(t.p_->shape), 0.0);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor full(std::vector<int> shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<double> values,
                     bool requires_grad = false) {
    check_shape(shape);
    if (detail::shape_numel(shape) != values.size())
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + detail::shape_str(shape));
    Tensor t;
    t.p_ = std::make_shared<detail::TensorImpl>();
    t.p_->shape = std::move(shape);
    t.p_->data = std::move(values);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor scalar(double value) { return from({1}, {value}); }

  bool defined() const { return p_ != nullptr; }
  const std::vector<int>& shape() const { return p_->shape; }
  int rank() const { return static_cast<int>(p_->shape.size()); }
  int extent(int axis) const { return p_->shape.at(static_cast<std::size_t>(axis)); }
  std::size_t numel() const { return p_->data.size(); }

  // Deleted on rvalues: the storage dies with the last handle, so a
  // reference obtained from a temporary would dangle.
  std::vector<double>& data() & { return p_->data; }
  const std::vector<double>& data() const& { return p_->data; }
  void data() && = delete;

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool on) {
    p_->requires_grad = on;
    if (on)
      p_->grad.assign(p_->data.size(), 0.0);
    else
      p_->grad.clear();
  }

  std::vector<double>& grad() & {
    if (!p_->requires_grad) throw std::logic_error("tensor has no gradient slot");
    return p_->grad;
  }
  const std::vector<double>& grad() const& {
    if (!p_->requires_grad) throw std::logic_error("tensor has no gradient slot");
    return p_->grad;
  }
  void grad() && = delete;
  void zero_grad() {
    if (p_->requires_grad) std::fill(p_->grad.begin(), p_->grad.end(), 0.0);
  }

  double value() const {
    if (numel() != 1) throw std::invalid_argument("value(): tensor is not a scalar");
    return p_->data[0];
  }

  double& at(int i) { return p_->data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return p_->data[static_cast<std::size_t>(i)]; }
  double& at(int a, int b) { return p_->data[idx2(a, b)]; }
  double at(int a, int b) const { return p_->data[idx2(a, b)]; }
  double& at(int a, int b, int c) { return p_->data[idx3(a, b, c)]; }
  double at(int a, int b, int c) const { return p_->data[idx3(a, b, c)]; }
  double& at(int a, int b, int c, int d) { return p_->data[idx4(a, b, c, d)]; }
  double at(int a, int b, int c, int d) const { return p_->data[idx4(a, b, c, d)]; }

  bool same_storage(Tensor other) const { return p_ == other.p_; }

 private:
  static void check_shape(const std::vector<int>& shape) {
    if (shape.empty() || shape.size() > 4)
      throw std::invalid_argument("tensor rank must be 1..4");
    for (int d : shape)
      if (d <= 0) throw std::invalid_argument("tensor extents must be positive");
  }
  std::size_t idx2(int a, int b) const {
    return static_cast<std::size_t>(a) * p_->shape[1] + b;
  }
  std::size_t idx3(int a, int b, int c) const {
    return (static_cast<std::size_t>(a) * p_->shape[1] + b) * p_->shape[2] + c;
  }
  std::size_t idx4(int a, int b, int c, int d) const {
    return ((static_cast<std::size_t>(a) * p_->shape[1] + b) * p_->shape[2] + c) *
               p_->shape[3] +
           d;
  }

  std::shared_ptr<detail::TensorImpl> p_;
};

// Recording tape. While a Graph is alive it is the active tape for the
// constructing thread; operations on requires_grad tensors append their
// adjoint closures, and backward() replays them in reverse construction
// order. A Graph must not be shared between threads.
class Graph {
 public:
  Graph() : prev_(tl_active_) { tl_active_ = this; }
  ~Graph() { tl_active_ = prev_; }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* active() { return tl_active_; }

  void record(std::function<void()> adjoint) { tape_.push_back(std::move(adjoint)); }
  std::size_t size() const { return tape_.size(); }

  // Tensors produced by recorded ops. Their gradient slots are scratch space
  // zeroed before every replay, so repeated backward calls accumulate exactly
  // one gradient per call into the leaves.
  void note_output(Tensor out) { outputs_.push_back(std::move(out)); }

  void zero_output_grads() {
    for (Tensor& t : outputs_) t.zero_grad();
  }

  void replay_backward() {
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> tape_;
  std::vector<Tensor> outputs_;
  Graph* prev_;
  inline static thread_local Graph* tl_active_ = nullptr;
};

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> inputs) {
  if (Graph::active() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline void mark_output(Tensor& out) {
  out.set_requires_grad(true);
  Graph::active()->note_output(out);
}

}  // namespace detail

// ---- elementwise ----

inline Tensor relu(Tensor x) {
  Tensor y = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i)
    y.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  if (detail::recording({&x})) {
    detail::mark_output(y);
    Graph::active()->record([x, y]() mutable {
      for (std::size_t i = 0; i < x.numel(); ++i)
        if (x.data()[i] > 0.0) x.grad()[i] += y.grad()[i];
    });
  }
  return y;
}

// Single learnable slope shared across all elements; at x == 0 the
// negative-branch derivative applies.
inline Tensor prelu(Tensor x, Tensor slope) {
  if (slope.numel() != 1)
    throw std::invalid_argument("prelu: slope must hold exactly one value");
  const double s = slope.data()[0];
  Tensor y = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x.data()[i];
    y.data()[i] = v > 0.0 ? v : s * v;
  }
  if (detail::recording({&x, &slope})) {
    detail::mark_output(y);
    Graph::active()->record([x, slope, y, s]() mutable {
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double g = y.grad()[i];
        if (x.data()[i] > 0.0) {
          if (x.requires_grad()) x.grad()[i] += g;
        } else {
          if (x.requires_grad()) x.grad()[i] += s * g;
          if (slope.requires_grad()) slope.grad()[0] += x.data()[i] * g;
        }
      }
    });
  }
  return y;
}

inline Tensor logistic(Tensor x) {
  Tensor y = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i)
    y.data()[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
  if (detail::recording({&x})) {
    detail::mark_output(y);
    Graph::active()->record([x, y]() mutable {
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double v = y.data()[i];
        x.grad()[i] += y.grad()[i] * v * (1.0 - v);
      }
    });
  }
  return y;
}

inline Tensor add(Tensor a, Tensor b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + detail::shape_str(a.shape()) + " vs " +
                     detail::shape_str(b.shape()));
  Tensor y = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) y.data()[i] = a.data()[i] + b.data()[i];
  if (detail::recording({&a, &b})) {
    detail::mark_output(y);
    Graph::active()->record([a, b, y]() mutable {
      for (std::size_t i = 0; i < y.numel(); ++i) {
        if (a.requires_grad()) a.grad()[i] += y.grad()[i];
        if (b.requires_grad()) b.grad()[i] += y.grad()[i];
      }
    });
  }
  return y;
}

inline Tensor scale(Tensor a, double factor) {
  Tensor y = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) y.data()[i] = factor * a.data()[i];
  if (detail::recording({&a})) {
    detail::mark_output(y);
    Graph::active()->record([a, y, factor]() mutable {
      for (std::size_t i = 0; i < y.numel(); ++i) a.grad()[i] += factor * y.grad()[i];
    });
  }
  return y;
}

// Hadamard product. Shapes must match, except for the one documented
// broadcast: a [C,H,W] times a one-channel map [1,H,W].
inline Tensor mul_elementwise(Tensor a, Tensor b) {
  const bool broadcast = a.rank() == 3 && b.rank() == 3 && b.extent(0) == 1 &&
                         a.extent(0) != 1 && a.extent(1) == b.extent(1) &&
                         a.extent(2) == b.extent(2);
  if (!broadcast && a.shape() != b.shape())
    throw ShapeError("mul_elementwise: shape mismatch " + detail::shape_str(a.shape()) +
                     " vs " + detail::shape_str(b.shape()));
  Tensor y = Tensor::zeros(a.shape());
  const std::size_t plane = broadcast ? b.numel() : 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    y.data()[i] = a.data()[i] * b.data()[broadcast ? i % plane : i];
  if (detail::recording({&a, &b})) {
    detail::mark_output(y);
    Graph::active()->record([a, b, y, broadcast, plane]() mutable {
      for (std::size_t i = 0; i < y.numel(); ++i) {
        const std::size_t j = broadcast ? i % plane : i;
        const double g = y.grad()[i];
        if (a.requires_grad()) a.grad()[i] += g * b.data()[j];
        if (b.requires_grad()) b.grad()[j] += g * a.data()[i];
      }
    });
  }
  return y;
}

inline Tensor sum(Tensor x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor y = Tensor::scalar(total);
  if (detail::recording({&x})) {
    detail::mark_output(y);
    Graph::active()->record([x, y]() mutable {
      const double g = y.grad()[0];
      for (std::size_t i = 0; i < x.numel(); ++i) x.grad()[i] += g;
    });
  }
  return y;
}

// ---- convolution ----

// "Same" cross-correlation with an odd square kernel and dilated taps;
// pad = dilation*(k-1)/2 keeps the spatial extent, matching the network's
// preserved within-stage resolutions.
inline Tensor conv2d(Tensor input, Tensor weight, Tensor bias,
                     int dilation = 1) {
  if (dilation < 1) throw std::invalid_argument("conv2d: dilation must be positive");
  if (input.rank() != 3 || weight.rank() != 4)
    throw ShapeError("conv2d: expected input [C,H,W] and weight [O,C,k,k]");
  const int cin = input.extent(0), h = input.extent(1), w = input.extent(2);
  const int cout = weight.extent(0), k = weight.extent(2);
  if (weight.extent(1) != cin)
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.extent(1)) +
                     " input channels, got " + std::to_string(cin));
  if (weight.extent(3) != k || k % 2 == 0)
    throw std::invalid_argument("conv2d: kernel must be square with odd extent");
  if (bias.rank() != 1 || bias.extent(0) != cout)
    throw ShapeError("conv2d: bias length must equal output channels");
  const int pad = dilation * (k - 1) / 2;

  Tensor out = Tensor::zeros({cout, h, w});
  for (int o = 0; o < cout; ++o) {
    double* op = out.data().data() + static_cast<std::size_t>(o) * h * w;
    std::fill(op, op + static_cast<std::size_t>(h) * w, bias.data()[o]);
    for (int c = 0; c < cin; ++c) {
      const double* ip = input.data().data() + static_cast<std::size_t>(c) * h * w;
      for (int i = 0; i < k; ++i) {
        const int dy = i * dilation - pad;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        for (int j = 0; j < k; ++j) {
          const int dx = j * dilation - pad;
          const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          const double wv = weight.at(o, c, i, j);
          if (wv == 0.0) continue;
          for (int y = y0; y < y1; ++y) {
            const double* irow = ip + static_cast<std::size_t>(y + dy) * w + dx;
            double* orow = op + static_cast<std::size_t>(y) * w;
            for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
          }
        }
      }
    }
  }

  if (detail::recording({&input, &weight, &bias})) {
    detail::mark_output(out);
    Graph::active()->record([input, weight, bias, out, dilation, pad, k]() mutable {
      const int cin = input.extent(0), h = input.extent(1), w = input.extent(2);
      const int cout = weight.extent(0);
      for (int o = 0; o < cout; ++o) {
        const double* gop = out.grad().data() + static_cast<std::size_t>(o) * h * w;
        if (bias.requires_grad()) {
          double acc = 0.0;
          for (std::size_t i = 0; i < static_cast<std::size_t>(h) * w; ++i) acc += gop[i];
          bias.grad()[o] += acc;
        }
        for (int c = 0; c < cin; ++c) {
          const std::size_t coff = static_cast<std::size_t>(c) * h * w;
          const double* ip = input.data().data() + coff;
          double* gip = input.requires_grad() ? input.grad().data() + coff : nullptr;
          for (int i = 0; i < k; ++i) {
            const int dy = i * dilation - pad;
            const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            for (int j = 0; j < k; ++j) {
              const int dx = j * dilation - pad;
              const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
              const double wv = weight.at(o, c, i, j);
              double wacc = 0.0;
              for (int y = y0; y < y1; ++y) {
                const double* grow = gop + static_cast<std::size_t>(y) * w;
                const std::size_t in_off = static_cast<std::size_t>(y + dy) * w + dx;
                if (gip != nullptr) {
                  double* girow = gip + in_off;
                  for (int x = x0; x < x1; ++x) girow[x] += wv * grow[x];
                }
                if (weight.requires_grad()) {
                  const double* irow = ip + in_off;
                  for (int x = x0; x < x1; ++x) wacc += grow[x] * irow[x];
                }
              }
              if (weight.requires_grad()) weight.grad()[((static_cast<std::size_t>(o) * cin + c) * k + i) * k + j] += wacc;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- pooling ----

// 2x2/stride-2 max with ceil output extents; trailing windows may be 1 wide.
// Ties route the gradient to the first element in row-major scan order.
inline Tensor maxpool2(Tensor input) {
  if (input.rank() != 3) throw ShapeError("maxpool2: expected input [C,H,W]");
  const int c = input.extent(0), h = input.extent(1), w = input.extent(2);
  const int oh = (h + 1) / 2, ow = (w + 1) / 2;
  Tensor out = Tensor::zeros({c, oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  std::size_t oi = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x, ++oi) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (int yy = 2 * y; yy < std::min(2 * y + 2, h); ++yy)
          for (int xx = 2 * x; xx < std::min(2 * x + 2, w); ++xx) {
            const std::size_t idx = (static_cast<std::size_t>(ch) * h + yy) * w + xx;
            if (input.data()[idx] > best) {
              best = input.data()[idx];
              best_idx = idx;
            }
          }
        out.data()[oi] = best;
        argmax[oi] = best_idx;
      }
  if (detail::recording({&input})) {
    detail::mark_output(out);
    Graph::active()->record([input, out, argmax = std::move(argmax)]() mutable {
      for (std::size_t i = 0; i < out.numel(); ++i)
        input.grad()[argmax[i]] += out.grad()[i];
    });
  }
  return out;
}

// Output window i spans input rows [floor(i*H/oh), floor((i+1)*H/oh)); same
// rule for columns. Max per window, first-in-scan tie rule.
inline Tensor adaptive_max_pool(Tensor input, int out_h, int out_w) {
  if (input.rank() != 3) throw ShapeError("adaptive_max_pool: expected input [C,H,W]");
  const int c = input.extent(0), h = input.extent(1), w = input.extent(2);
  if (out_h < 1 || out_w < 1 || out_h > h || out_w > w)
    throw std::invalid_argument("adaptive_max_pool: output extent must be in [1, input extent]");
  Tensor out = Tensor::zeros({c, out_h, out_w});
  std::vector<std::size_t> argmax(out.numel());
  std::size_t oi = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < out_h; ++y) {
      const int ylo = y * h / out_h, yhi = (y + 1) * h / out_h;
      for (int x = 0; x < out_w; ++x, ++oi) {
        const int xlo = x * w / out_w, xhi = (x + 1) * w / out_w;
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (int yy = ylo; yy < yhi; ++yy)
          for (int xx = xlo; xx < xhi; ++xx) {
            const std::size_t idx = (static_cast<std::size_t>(ch) * h + yy) * w + xx;
            if (input.data()[idx] > best) {
              best = input.data()[idx];
              best_idx = idx;
            }
          }
        out.data()[oi] = best;
        argmax[oi] = best_idx;
      }
    }
  if (detail::recording({&input})) {
    detail::mark_output(out);
    Graph::active()->record([input, out, argmax = std::move(argmax)]() mutable {
      for (std::size_t i = 0; i < out.numel(); ++i)
        input.grad()[argmax[i]] += out.grad()[i];
    });
  }
  return out;
}

// Mean over all spatial positions per channel.
inline Tensor avg_pool_all(Tensor input) {
  if (input.rank() != 3) throw ShapeError("avg_pool_all: expected input [C,H,W]");
  const int c = input.extent(0);
  const std::size_t plane = static_cast<std::size_t>(input.extent(1)) * input.extent(2);
  Tensor out = Tensor::zeros({c});
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += input.data()[ch * plane + i];
    out.data()[ch] = acc / static_cast<double>(plane);
  }
  if (detail::recording({&input})) {
    detail::mark_output(out);
    Graph::active()->record([input, out, plane]() mutable {
      const double inv = 1.0 / static_cast<double>(plane);
      for (int ch = 0; ch < input.extent(0); ++ch) {
        const double g = out.grad()[ch] * inv;
        for (std::size_t i = 0; i < plane; ++i) input.grad()[ch * plane + i] += g;
      }
    });
  }
  return out;
}

// ---- dense / channel ops ----

inline Tensor linear(Tensor input, Tensor weight, Tensor bias) {
  if (input.rank() != 1 || weight.rank() != 2 || bias.rank() != 1)
    throw ShapeError("linear: expected input [C], weight [K,C], bias [K]");
  const int c = input.extent(0), k = weight.extent(0);
  if (weight.extent(1) != c || bias.extent(0) != k)
    throw ShapeError("linear: weight " + detail::shape_str(weight.shape()) +
                     " incompatible with input " + detail::shape_str(input.shape()));
  Tensor out = Tensor::zeros({k});
  for (int r = 0; r < k; ++r) {
    double acc = bias.data()[r];
    for (int i = 0; i < c; ++i) acc += weight.at(r, i) * input.data()[i];
    out.data()[r] = acc;
  }
  if (detail::recording({&input, &weight, &bias})) {
    detail::mark_output(out);
    Graph::active()->record([input, weight, bias, out]() mutable {
      const int c = input.extent(0), k = weight.extent(0);
      for (int r = 0; r < k; ++r) {
        const double g = out.grad()[r];
        if (bias.requires_grad()) bias.grad()[r] += g;
        for (int i = 0; i < c; ++i) {
          if (input.requires_grad()) input.grad()[i] += g * weight.at(r, i);
          if (weight.requires_grad())
            weight.grad()[static_cast<std::size_t>(r) * c + i] += g * input.data()[i];
        }
      }
    });
  }
  return out;
}

inline Tensor concat_channels(Tensor a, Tensor b) {
  if (a.rank() != 3 || b.rank() != 3 || a.extent(1) != b.extent(1) ||
      a.extent(2) != b.extent(2))
    throw ShapeError("concat_channels: spatial extents must match, got " +
                     detail::shape_str(a.shape()) + " and " + detail::shape_str(b.shape()));
  const int ca = a.extent(0), cb = b.extent(0);
  Tensor out = Tensor::zeros({ca + cb, a.extent(1), a.extent(2)});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.numel());
  if (detail::recording({&a, &b})) {
    detail::mark_output(out);
    Graph::active()->record([a, b, out]() mutable {
      if (a.requires_grad())
        for (std::size_t i = 0; i < a.numel(); ++i) a.grad()[i] += out.grad()[i];
      if (b.requires_grad())
        for (std::size_t i = 0; i < b.numel(); ++i) b.grad()[i] += out.grad()[a.numel() + i];
    });
  }
  return out;
}

// Per-channel scaling: out[c,.,.] = factors[c] * x[c,.,.], differentiable in
// both operands. Used to map classifier weights back onto feature maps.
inline Tensor scale_channels(Tensor x, Tensor factors) {
  if (x.rank() != 3 || factors.rank() != 1 || factors.extent(0) != x.extent(0))
    throw ShapeError("scale_channels: need x [C,H,W] and factors [C]");
  const std::size_t plane = static_cast<std::size_t>(x.extent(1)) * x.extent(2);
  Tensor out = Tensor::zeros(x.shape());
  for (int c = 0; c < x.extent(0); ++c) {
    const double f = factors.data()[c];
    for (std::size_t i = 0; i < plane; ++i)
      out.data()[c * plane + i] = f * x.data()[c * plane + i];
  }
  if (detail::recording({&x, &factors})) {
    detail::mark_output(out);
    Graph::active()->record([x, factors, out, plane]() mutable {
      for (int c = 0; c < x.extent(0); ++c) {
        const double f = factors.data()[c];
        double facc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          const double g = out.grad()[c * plane + i];
          if (x.requires_grad()) x.grad()[c * plane + i] += f * g;
          facc += g * x.data()[c * plane + i];
        }
        if (factors.requires_grad()) factors.grad()[c] += facc;
      }
    });
  }
  return out;
}

// Copies row `row` of a [K,C] matrix; the row index is a fixed selection,
// gradients flow into that row only.
inline Tensor select_row(Tensor matrix, int row) {
  if (matrix.rank() != 2) throw ShapeError("select_row: expected matrix [K,C]");
  if (row < 0 || row >= matrix.extent(0))
    throw std::invalid_argument("select_row: row " + std::to_string(row) +
                                " out of range [0," + std::to_string(matrix.extent(0)) + ")");
  const int c = matrix.extent(1);
  Tensor out = Tensor::zeros({c});
  for (int i = 0; i < c; ++i) out.data()[i] = matrix.at(row, i);
  if (detail::recording({&matrix})) {
    detail::mark_output(out);
    Graph::active()->record([matrix, out, row, c]() mutable {
      for (int i = 0; i < c; ++i)
        matrix.grad()[static_cast<std::size_t>(row) * c + i] += out.grad()[i];
    });
  }
  return out;
}

// ---- backward & gradient checking ----

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
// the active tape. Repeated calls keep accumulating; callers zero gradients
// between optimization steps.
inline void backward(Tensor loss) {
  Graph* g = Graph::active();
  if (g == nullptr) throw std::invalid_argument("backward: no active graph");
  if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
  if (!loss.requires_grad())
    throw std::invalid_argument("backward: loss was not produced by recorded operations");
  g->zero_output_grads();
  loss.grad()[0] += 1.0;
  g->replay_backward();
}

// Central finite differences vs the recorded adjoints, elementwise over
// `leaf`. Returns max of |a-n| / max(1e-8, |a|+|n|).
inline double grad_check(const std::function<Tensor()>& f, Tensor leaf,
                         double eps = 1e-5) {
  if (!leaf.requires_grad())
    throw std::invalid_argument("grad_check: leaf must require gradients");
  leaf.zero_grad();
  std::vector<double> analytic;
  {
    Graph tape;
    Tensor loss = f();
    backward(loss);
    analytic = leaf.grad();
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < leaf.numel(); ++i) {
    const double x0 = leaf.data()[i];
    leaf.data()[i] = x0 + eps;
    const double fp = f().value();
    leaf.data()[i] = x0 - eps;
    const double fm = f().value();
    leaf.data()[i] = x0;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double rel = std::fabs(analytic[i] - numeric) /
                       std::max(1e-8, std::fabs(analytic[i]) + std::fabs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace crowdcount
