#include "refml/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "refml/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace refml {

namespace {

#if defined(__GLIBC__)
// Activation tensors are large and short-lived; serving them from the heap
// rather than fresh mmap pages avoids a page-fault storm on every step.
const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape_));
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " does not hold " + std::to_string(data_.size()) +
                     " elements");
  }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor(Shape{rows, cols}, std::vector<double>(values));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("tensor: item() on " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("tensor: cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double sum(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s;
}

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

Tensor softmax_rows(const Tensor& logits) {
  const std::size_t cols = logits.rank() == 0 ? 1 : logits.shape().back();
  const std::size_t rows = logits.numel() / cols;
  Tensor out(logits.shape());
  auto in = logits.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = in.data() + r * cols;
    double* p = o.data() + r * cols;
    const double m = *std::max_element(z, z + cols);
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      p[c] = std::exp(z[c] - m);
      denom += p[c];
    }
    for (std::size_t c = 0; c < cols; ++c) p[c] /= denom;
  }
  return out;
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t cols = logits.rank() == 0 ? 1 : logits.shape().back();
  const std::size_t rows = logits.numel() / cols;
  std::vector<std::size_t> out(rows);
  auto in = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (in[r * cols + c] > in[r * cols + best]) best = c;
    }
    out[r] = best;
  }
  return out;
}

}  // namespace refml
