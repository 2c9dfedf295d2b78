#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace tif {

/// Channel-major image shape (C x H x W).
struct Shape {
  int channels{1};
  int height{16};
  int width{16};

  [[nodiscard]] std::size_t size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  [[nodiscard]] std::size_t pixels() const {
    return static_cast<std::size_t>(height) * width;
  }
  bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" +
         std::to_string(s.width);
}

/// A real-valued C x H x W image stored flat in channel-major order:
/// element (ch, i, j) lives at ch*H*W + i*W + j.
class Image {
 public:
  using Vector = Eigen::VectorXf;

  Image() = default;
  explicit Image(Shape shape) : shape_(shape), data_(Vector::Zero(static_cast<Eigen::Index>(shape.size()))) {
    if (shape.channels <= 0 || shape.height <= 0 || shape.width <= 0) {
      throw std::invalid_argument("Image: non-positive dimension " + to_string(shape));
    }
  }
  Image(Shape shape, Vector data) : shape_(shape), data_(std::move(data)) {
    if (static_cast<std::size_t>(data_.size()) != shape.size()) {
      throw std::invalid_argument("Image: data length does not match shape " + to_string(shape));
    }
  }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return shape_.size(); }
  [[nodiscard]] const Vector& data() const { return data_; }
  Vector& data() { return data_; }

  float& operator[](std::size_t i) { return data_[static_cast<Eigen::Index>(i)]; }
  float operator[](std::size_t i) const { return data_[static_cast<Eigen::Index>(i)]; }

  float& at(int ch, int i, int j) {
    return data_[static_cast<Eigen::Index>((static_cast<std::size_t>(ch) * shape_.height + i) * shape_.width + j)];
  }
  [[nodiscard]] float at(int ch, int i, int j) const {
    return data_[static_cast<Eigen::Index>((static_cast<std::size_t>(ch) * shape_.height + i) * shape_.width + j)];
  }

  bool operator==(const Image& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_{};
  Vector data_{};
};

inline void require_same_shape(const Image& a, const Image& b, const char* where) {
  if (!(a.shape() == b.shape())) {
    throw std::invalid_argument(std::string(where) + ": shape mismatch " + to_string(a.shape()) +
                                " vs " + to_string(b.shape()));
  }
}

/// Euclidean norm of (a - b) over all elements, accumulated in double.
inline double distance(const Image& a, const Image& b) {
  require_same_shape(a, b, "distance");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace tif
