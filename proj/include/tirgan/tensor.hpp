#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tirgan {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major array of doubles. Rank-4 tensors are (N, C, H, W).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

  Tensor reshaped(Shape shape) const;

  // Batch helpers for rank-4 tensors.
  Tensor batch_item(std::size_t n) const;
  static Tensor concat_batch(std::span<const Tensor> items);

  void fill(double v);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// A single image in (C, H, W) layout with C in {1, 3} and values in [-1, 1].
class ImageTensor {
 public:
  ImageTensor() = default;
  explicit ImageTensor(Tensor chw);

  std::size_t channels() const { return data_.dim(0); }
  std::size_t height() const { return data_.dim(1); }
  std::size_t width() const { return data_.dim(2); }
  const Tensor& tensor() const { return data_; }

  // (1, C, H, W) view for network input.
  Tensor as_batch() const;
  // Builds an image from item n of a (N, C, H, W) batch, clamping to [-1, 1].
  static ImageTensor from_batch(const Tensor& batch, std::size_t n = 0);

  bool operator==(const ImageTensor& other) const = default;

 private:
  Tensor data_;
};

Tensor stack_images(std::span<const ImageTensor> images);

}  // namespace tirgan
