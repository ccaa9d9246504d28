#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace zipcount {

/// Dense channels x height x width array, channel-outermost and row-major
/// inside each channel. This is the in-memory layout of every blockwise map
/// (count maps, probability maps, logits, features) and of the .bcm payload.
template <typename T>
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(std::size_t channels, std::size_t height, std::size_t width, T fill = T{})
      : channels_(channels), height_(height), width_(width),
        data_(channels * height * width, fill) {}

  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t plane() const { return height_ * width_; }
  std::size_t size() const { return data_.size(); }

  T& operator()(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * height_ + i) * width_ + j];
  }
  const T& operator()(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * height_ + i) * width_ + j];
  }
  // Flat index over (i, j) within channel c.
  T& at(std::size_t c, std::size_t block) { return data_[c * plane() + block]; }
  const T& at(std::size_t c, std::size_t block) const { return data_[c * plane() + block]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  bool same_shape(const Tensor3& other) const {
    return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
  }
  template <typename U>
  bool same_grid(const Tensor3<U>& other) const {
    return height_ == other.height() && width_ == other.width();
  }

  std::string shape_string() const {
    return std::to_string(channels_) + "x" + std::to_string(height_) + "x" + std::to_string(width_);
  }

  friend bool operator==(const Tensor3&, const Tensor3&) = default;

 private:
  std::size_t channels_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<T> data_;
};

// Raised when two maps that must share a grid or channel count do not.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename A, typename B>
void require_same_grid(const Tensor3<A>& a, const Tensor3<B>& b, const char* what) {
  if (!a.same_grid(b)) {
    throw ShapeError(std::string(what) + ": grid mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

}  // namespace zipcount
