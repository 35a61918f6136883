#include "tirgan/tensor.hpp"

#include <algorithm>
#include <numeric>

namespace tirgan {

std::string shape_str(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                     " does not match shape " + shape_str(shape_));
  }
}

double& Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

double Tensor::at(std::size_t n, std::size_t c, std::size_t h,
                  std::size_t w) const {
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " +
                     shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::batch_item(std::size_t n) const {
  if (rank() != 4 || n >= shape_[0]) {
    throw ShapeError("batch_item " + std::to_string(n) + " out of range for " +
                     shape_str(shape_));
  }
  const std::size_t stride = numel() / shape_[0];
  std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(n * stride),
                          data_.begin() + static_cast<std::ptrdiff_t>((n + 1) * stride));
  return Tensor({1, shape_[1], shape_[2], shape_[3]}, std::move(out));
}

Tensor Tensor::concat_batch(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("concat_batch of zero tensors");
  Shape shape = items.front().shape();
  if (shape.size() != 4) throw ShapeError("concat_batch expects rank-4 tensors");
  std::size_t n = 0;
  for (const auto& t : items) {
    if (t.rank() != 4 || t.dim(1) != shape[1] || t.dim(2) != shape[2] ||
        t.dim(3) != shape[3]) {
      throw ShapeError("concat_batch shape mismatch: " + shape_str(shape) +
                       " vs " + shape_str(t.shape()));
    }
    n += t.dim(0);
  }
  shape[0] = n;
  std::vector<double> out;
  out.reserve(shape_numel(shape));
  for (const auto& t : items) out.insert(out.end(), t.vec().begin(), t.vec().end());
  return Tensor(std::move(shape), std::move(out));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

ImageTensor::ImageTensor(Tensor chw) : data_(std::move(chw)) {
  if (data_.rank() != 3) {
    throw ShapeError("image tensor must be (C, H, W), got " +
                     shape_str(data_.shape()));
  }
  if (data_.dim(0) != 1 && data_.dim(0) != 3) {
    throw ShapeError("image tensor must have 1 or 3 channels, got " +
                     std::to_string(data_.dim(0)));
  }
  for (double v : data_.vec()) {
    if (!(v >= -1.0 && v <= 1.0)) {
      throw std::domain_error("image tensor value outside [-1, 1]: " +
                              std::to_string(v));
    }
  }
}

Tensor ImageTensor::as_batch() const {
  return data_.reshaped({1, data_.dim(0), data_.dim(1), data_.dim(2)});
}

ImageTensor ImageTensor::from_batch(const Tensor& batch, std::size_t n) {
  Tensor item = batch.batch_item(n);
  for (double& v : item.vec()) v = std::clamp(v, -1.0, 1.0);
  return ImageTensor(item.reshaped({batch.dim(1), batch.dim(2), batch.dim(3)}));
}

Tensor stack_images(std::span<const ImageTensor> images) {
  std::vector<Tensor> items;
  items.reserve(images.size());
  for (const auto& img : images) items.push_back(img.as_batch());
  return Tensor::concat_batch(items);
}

}  // namespace tirgan
