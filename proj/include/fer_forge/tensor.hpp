#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace fer {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("zero-sized dimension in shape " + shape_str(shape));
    if (n > std::numeric_limits<std::size_t>::max() / d)
      throw ShapeError("element count overflows for shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

// Dense row-major n-dimensional array. The shape is fixed at construction;
// element values may be updated in place through data().
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw ShapeError("shape " + shape_str(shape_) + " needs " +
                       std::to_string(shape_numel(shape_)) + " elements, got " +
                       std::to_string(data_.size()));
  }

  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::vector<T>(values)) {}

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& at(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }
  const T& at(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * shape_[1] + i) * shape_[2] + j];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor reshape(Shape shape) const {
    if (shape_numel(shape) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;

  void validate() const {
    if (kernel_h < 1 || kernel_w < 1) throw ShapeError("kernel dimensions must be >= 1");
    if (stride < 1) throw ShapeError("stride must be >= 1");
  }

  static std::size_t out_dim(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t padding, const char* axis) {
    if (in + 2 * padding < kernel)
      throw ShapeError(std::string("convolution ") + axis + " axis: input " + std::to_string(in) +
                       " (+2*" + std::to_string(padding) + " padding) smaller than kernel " +
                       std::to_string(kernel));
    return (in + 2 * padding - kernel) / stride + 1;
  }
  std::size_t out_h(std::size_t in) const { return out_dim(in, kernel_h, stride, padding, "H"); }
  std::size_t out_w(std::size_t in) const { return out_dim(in, kernel_w, stride, padding, "W"); }
};

namespace detail {

template <typename T>
void check_conv_shapes(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>* bias,
                       const ConvGeometry& geom) {
  geom.validate();
  if (input.rank() != 3)
    throw ShapeError("conv2d input must be [C_in,H,W], got " + shape_str(input.shape()));
  if (kernels.rank() != 4)
    throw ShapeError("conv2d kernels must be [C_out,C_in,kh,kw], got " +
                     shape_str(kernels.shape()));
  if (kernels.dim(1) != input.dim(0))
    throw ShapeError("conv2d channel mismatch: input axis 0 (C_in) = " +
                     std::to_string(input.dim(0)) + " but kernels axis 1 (C_in) = " +
                     std::to_string(kernels.dim(1)));
  if (kernels.dim(2) != geom.kernel_h || kernels.dim(3) != geom.kernel_w)
    throw ShapeError("conv2d kernel axes 2,3 " + shape_str(kernels.shape()) +
                     " disagree with geometry " + std::to_string(geom.kernel_h) + "x" +
                     std::to_string(geom.kernel_w));
  if (bias && (bias->rank() != 1 || bias->dim(0) != kernels.dim(0)))
    throw ShapeError("conv2d bias must be [C_out=" + std::to_string(kernels.dim(0)) + "], got " +
                     shape_str(bias->shape()));
}

// Unrolls every receptive field into a column: result is [C*kh*kw, OH*OW].
template <typename T>
RowMatrix<T> im2col(const Tensor<T>& input, const ConvGeometry& g, std::size_t oh,
                    std::size_t ow) {
  const std::size_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  RowMatrix<T> col(static_cast<Eigen::Index>(c_in * g.kernel_h * g.kernel_w),
                   static_cast<Eigen::Index>(oh * ow));
  T* out = col.data();
  const T* in = input.data().data();
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj)
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                   static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                     static_cast<std::ptrdiff_t>(g.padding);
            *out++ = (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) ||
                      x >= static_cast<std::ptrdiff_t>(w))
                         ? T{}
                         : in[(c * h + static_cast<std::size_t>(y)) * w +
                              static_cast<std::size_t>(x)];
          }
        }
  return col;
}

// Adjoint of im2col: scatters-adds columns back into a [C,H,W] image.
template <typename T>
void col2im(const RowMatrix<T>& col, const ConvGeometry& g, std::size_t oh, std::size_t ow,
            Tensor<T>& image) {
  const std::size_t c_in = image.dim(0), h = image.dim(1), w = image.dim(2);
  const T* src = col.data();
  T* dst = image.data().data();
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki)
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj)
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                   static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ox = 0; ox < ow; ++ox, ++src) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                     static_cast<std::ptrdiff_t>(g.padding);
            if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) ||
                x >= static_cast<std::ptrdiff_t>(w))
              continue;
            dst[(c * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)] += *src;
          }
        }
}

}  // namespace detail

// Direct sliding-window convolution (cross-correlation, as in every CNN
// framework). Accumulates in kernel order c, ki, kj.
template <typename T>
Tensor<T> conv2d_forward_direct(const Tensor<T>& input, const Tensor<T>& kernels,
                                const Tensor<T>& bias, const ConvGeometry& geom) {
  detail::check_conv_shapes(input, kernels, &bias, geom);
  const std::size_t c_out = kernels.dim(0), c_in = input.dim(0);
  const std::size_t h = input.dim(1), w = input.dim(2);
  const std::size_t oh = geom.out_h(h), ow = geom.out_w(w);
  Tensor<T> out({c_out, oh, ow});
  for (std::size_t o = 0; o < c_out; ++o)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc{};
        for (std::size_t c = 0; c < c_in; ++c)
          for (std::size_t ki = 0; ki < geom.kernel_h; ++ki) {
            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * geom.stride + ki) -
                                     static_cast<std::ptrdiff_t>(geom.padding);
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kj = 0; kj < geom.kernel_w; ++kj) {
              const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * geom.stride + kj) -
                                       static_cast<std::ptrdiff_t>(geom.padding);
              if (x < 0 || x >= static_cast<std::ptrdiff_t>(w)) continue;
              acc += input.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) *
                     kernels[((o * c_in + c) * geom.kernel_h + ki) * geom.kernel_w + kj];
            }
          }
        out.at(o, oy, ox) = acc + bias[o];
      }
  return out;
}

// Window-unrolling path: im2col followed by one GEMM. This is the path the
// layers use; it agrees with conv2d_forward_direct up to summation order.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                         const ConvGeometry& geom) {
  detail::check_conv_shapes(input, kernels, &bias, geom);
  const std::size_t c_out = kernels.dim(0);
  const std::size_t oh = geom.out_h(input.dim(1)), ow = geom.out_w(input.dim(2));
  const RowMatrix<T> col = detail::im2col(input, geom, oh, ow);
  ConstMatrixMap<T> k(kernels.data().data(), static_cast<Eigen::Index>(c_out), col.rows());
  Tensor<T> out({c_out, oh, ow});
  MatrixMap<T> o(out.data().data(), static_cast<Eigen::Index>(c_out), col.cols());
  o.noalias() = k * col;
  for (std::size_t c = 0; c < c_out; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bias[c];
  return out;
}

template <typename T>
struct ConvGradients {
  Tensor<T> grad_input;
  Tensor<T> grad_kernels;
  Tensor<T> grad_bias;
};

template <typename T>
ConvGradients<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernels,
                                 const ConvGeometry& geom, const Tensor<T>& grad_out) {
  detail::check_conv_shapes<T>(input, kernels, nullptr, geom);
  const std::size_t c_out = kernels.dim(0);
  const std::size_t oh = geom.out_h(input.dim(1)), ow = geom.out_w(input.dim(2));
  const Shape expected{c_out, oh, ow};
  if (grad_out.shape() != expected)
    throw ShapeError("conv2d_backward: grad_out shape " + shape_str(grad_out.shape()) +
                     " != forward output shape " + shape_str(expected));

  const RowMatrix<T> col = detail::im2col(input, geom, oh, ow);
  const auto rows = static_cast<Eigen::Index>(c_out);
  ConstMatrixMap<T> g(grad_out.data().data(), rows, col.cols());
  ConstMatrixMap<T> k(kernels.data().data(), rows, col.rows());

  ConvGradients<T> grads{Tensor<T>(input.shape()), Tensor<T>(kernels.shape()),
                         Tensor<T>({c_out})};
  MatrixMap<T> gk(grads.grad_kernels.data().data(), rows, col.rows());
  gk.noalias() = g * col.transpose();
  for (std::size_t c = 0; c < c_out; ++c)
    grads.grad_bias[c] = g.row(static_cast<Eigen::Index>(c)).sum();
  const RowMatrix<T> gcol = k.transpose() * g;
  detail::col2im(gcol, geom, oh, ow, grads.grad_input);
  return grads;
}

// Records, for each pooled output, the flat input index that won its window.
struct PoolIndex {
  Shape input_shape;
  Shape output_shape;
  std::vector<std::size_t> argmax;
};

template <typename T>
struct PoolResult {
  Tensor<T> output;
  PoolIndex index;
};

// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
// Ties go to the first maximum in row-major window order.
template <typename T>
PoolResult<T> maxpool_forward(const Tensor<T>& input) {
  if (input.rank() != 3)
    throw ShapeError("maxpool input must be [C,H,W], got " + shape_str(input.shape()));
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (h < 2 || w < 2)
    throw ShapeError("maxpool needs H,W >= 2, got " + shape_str(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  PoolResult<T> r{Tensor<T>({c, oh, ow}), PoolIndex{input.shape(), {c, oh, ow}, {}}};
  r.index.argmax.resize(c * oh * ow);
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        std::size_t best = (ch * h + 2 * y) * w + 2 * x;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (ch * h + 2 * y + dy) * w + 2 * x + dx;
            if (input[idx] > input[best]) best = idx;
          }
        r.output[o] = input[best];
        r.index.argmax[o] = best;
      }
  return r;
}

template <typename T>
Tensor<T> maxpool_backward(const PoolIndex& index, const Tensor<T>& grad_out) {
  if (grad_out.shape() != index.output_shape)
    throw ShapeError("maxpool_backward: grad_out shape " + shape_str(grad_out.shape()) +
                     " != pooled shape " + shape_str(index.output_shape));
  Tensor<T> grad_in(index.input_shape);
  for (std::size_t o = 0; o < index.argmax.size(); ++o) grad_in[index.argmax[o]] += grad_out[o];
  return grad_in;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul needs rank-2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul inner dimension mismatch: a axis 1 = " + std::to_string(a.dim(1)) +
                     ", b axis 0 = " + std::to_string(b.dim(0)));
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Tensor<T> out({a.dim(0), b.dim(1)});
  MatrixMap<T>(out.data().data(), m, n).noalias() =
      ConstMatrixMap<T>(a.data().data(), m, k) * ConstMatrixMap<T>(b.data().data(), k, n);
  return out;
}

}  // namespace fer
