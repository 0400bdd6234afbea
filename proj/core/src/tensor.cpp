#include "e4srec/tensor.hpp"

#include <cmath>
#include <sstream>

#include "e4srec/errors.hpp"

namespace e4srec::ad {

int64_t shape_product(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw ShapeError("tensor: non-positive dimension in shape");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_product(shape_)), 0.0f) {}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != static_cast<int64_t>(data_.size())) {
    throw ShapeError("tensor: data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str());
  }
}

Tensor Tensor::scalar(float v) { return Tensor({1}, {v}); }

Tensor Tensor::zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int64_t> shape, float v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::of(std::initializer_list<float> values) {
  return Tensor({static_cast<int64_t>(values.size())}, std::vector<float>(values));
}

Tensor Tensor::uniform(std::vector<int64_t> shape, Rng& rng, float lo, float hi) {
  Tensor t(std::move(shape));
  for (float& v : t.data_) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

Tensor Tensor::gaussian(std::vector<int64_t> shape, Rng& rng, float stddev) {
  Tensor t(std::move(shape));
  for (float& v : t.data_) v = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

Tensor Tensor::xavier(int64_t rows, int64_t cols, Rng& rng) {
  float limit = std::sqrt(6.0f / static_cast<float>(rows + cols));
  return uniform({rows, cols}, rng, -limit, limit);
}

bool Tensor::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  for (size_t i = 0; i < data_.size(); ++i) {
    // bit compare, so that -0.0f vs 0.0f or NaN payloads are not conflated
    uint32_t a, b;
    static_assert(sizeof(float) == sizeof(uint32_t));
    __builtin_memcpy(&a, &data_[i], 4);
    __builtin_memcpy(&b, &other.data_[i], 4);
    if (a != b) return false;
  }
  return true;
}

void Tensor::fill(float v) {
  for (float& x : data_) x = v;
}

void Tensor::add_scaled(const Tensor& other, float scale) {
  if (shape_ != other.shape_) {
    throw ShapeError("add_scaled: shape mismatch " + shape_str() + " vs " + other.shape_str());
  }
  for (size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << "x";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

}  // namespace e4srec::ad
