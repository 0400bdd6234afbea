#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "e4srec/rng.hpp"

namespace e4srec::ad {

// Dense row-major float32 tensor with value semantics. Rank 1 and 2 cover
// everything the models need; a few internal buffers use rank 3.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);
  Tensor(std::vector<int64_t> shape, std::vector<float> data);

  static Tensor scalar(float v);
  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, float v);
  static Tensor of(std::initializer_list<float> values);  // rank-1
  static Tensor uniform(std::vector<int64_t> shape, Rng& rng, float lo, float hi);
  static Tensor gaussian(std::vector<int64_t> shape, Rng& rng, float stddev);
  // Xavier/Glorot uniform over (fan_in, fan_out) = (rows, cols).
  static Tensor xavier(int64_t rows, int64_t cols, Rng& rng);

  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  // rank-2 conveniences
  int64_t rows() const { return shape_[0]; }
  int64_t cols() const { return shape_[1]; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* raw() { return data_.data(); }
  const float* raw() const { return data_.data(); }

  float& operator()(int64_t i) { return data_[static_cast<size_t>(i)]; }
  float operator()(int64_t i) const { return data_[static_cast<size_t>(i)]; }
  float& operator()(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
  float operator()(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool v) {
    requires_grad_ = v;
    return *this;
  }

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool bitwise_equal(const Tensor& other) const;

  void fill(float v);
  void add_scaled(const Tensor& other, float scale);  // *this += scale * other

  std::string shape_str() const;

 private:
  std::vector<int64_t> shape_;
  std::vector<float> data_;
  bool requires_grad_ = false;
};

int64_t shape_product(const std::vector<int64_t>& shape);

}  // namespace e4srec::ad
